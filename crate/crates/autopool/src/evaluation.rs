//! Static (bag-level) multi-label metrics and dynamic segment-based event
//! detection metrics, including the error rate E with its
//! substitution/deletion/insertion decomposition.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pooling::{BagLikelihood, InstanceLikelihoods};

/// Binary activity matrix over T fixed-length segments and C classes.
#[derive(Debug, Clone, PartialEq)]
pub struct EventRoll {
    pub active: Array2<u8>,
    pub segment_duration: f64,
}

impl EventRoll {
    pub fn new(active: Array2<u8>, segment_duration: f64) -> Result<Self> {
        if active.nrows() < 1 {
            return Err(Error::InvalidInput("event roll needs T >= 1".to_string()));
        }
        if active.iter().any(|v| *v > 1) {
            return Err(Error::InvalidInput(
                "event roll entries must be 0 or 1".to_string(),
            ));
        }
        if !(segment_duration > 0.0) {
            return Err(Error::InvalidInput(format!(
                "segment duration must be positive, got {segment_duration}"
            )));
        }
        Ok(Self {
            active,
            segment_duration,
        })
    }

    pub fn num_segments(&self) -> usize {
        self.active.nrows()
    }

    pub fn num_classes(&self) -> usize {
        self.active.ncols()
    }
}

/// Precision/recall/F1 triple. F1 = 2PR/(P+R), or 0 when P+R = 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    fn from_counts(tp: u64, fp: u64, fn_: u64) -> Self {
        let precision = if tp + fp > 0 {
            tp as f64 / (tp + fp) as f64
        } else {
            0.0
        };
        let recall = if tp + fn_ > 0 {
            tp as f64 / (tp + fn_) as f64
        } else {
            0.0
        };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Self {
            precision,
            recall,
            f1,
        }
    }
}

/// Per-class counts and scores. `degenerate` flags classes where both the
/// predicted-positive and reference-positive counts are zero, for which
/// P, R and F1 are defined as 0 by convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticReport {
    pub per_class: Vec<ClassMetrics>,
    /// Unweighted average of the class-wise scores.
    pub macro_avg: Prf,
    /// Computed from pooled counts across classes; reported as an extra.
    pub micro_avg: Prf,
}

/// Error rate E = (S + D + I) / N over all evaluated segments, where N is the
/// total number of reference-active (segment, class) pairs. `value` is None
/// when N = 0 (the rate is undefined; insertions are still counted).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRate {
    pub substitutions: u64,
    pub deletions: u64,
    pub insertions: u64,
    pub total_reference: u64,
    pub value: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DynamicReport {
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Prf,
    pub micro_avg: Prf,
    pub error_rate: ErrorRate,
    pub segment_duration: f64,
}

/// Full evaluation of one model on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub static_metrics: StaticReport,
    pub dynamic_metrics: DynamicReport,
}

/// Hard-threshold likelihoods into an activity roll. The boundary is
/// inclusive: an entry equal to the threshold counts as active.
pub fn threshold_predictions(
    likelihoods: &Array2<f64>,
    threshold: f64,
    segment_duration: f64,
) -> Result<EventRoll> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    let active = likelihoods.mapv(|v| u8::from(v >= threshold));
    EventRoll::new(active, segment_duration)
}

/// Bag-level prediction: per class, the maximum instance likelihood.
pub fn static_prediction(instances: &InstanceLikelihoods) -> BagLikelihood {
    let c = instances.num_classes();
    let mut values = Array1::zeros(c);
    for class in 0..c {
        let mut best = f64::NEG_INFINITY;
        for &v in instances.column(class) {
            best = best.max(v);
        }
        values[class] = best;
    }
    BagLikelihood { values }
}

fn class_metrics_from_counts(tp: &[u64], fp: &[u64], fn_: &[u64]) -> (Vec<ClassMetrics>, Prf, Prf) {
    let c = tp.len();
    let mut per_class = Vec::with_capacity(c);
    for class in 0..c {
        let scores = Prf::from_counts(tp[class], fp[class], fn_[class]);
        per_class.push(ClassMetrics {
            class,
            tp: tp[class],
            fp: fp[class],
            fn_: fn_[class],
            precision: scores.precision,
            recall: scores.recall,
            f1: scores.f1,
            degenerate: tp[class] + fp[class] + fn_[class] == 0,
        });
    }
    let macro_avg = Prf {
        precision: per_class.iter().map(|m| m.precision).sum::<f64>() / c as f64,
        recall: per_class.iter().map(|m| m.recall).sum::<f64>() / c as f64,
        f1: per_class.iter().map(|m| m.f1).sum::<f64>() / c as f64,
    };
    let micro_avg = Prf::from_counts(tp.iter().sum(), fp.iter().sum(), fn_.iter().sum());
    (per_class, macro_avg, micro_avg)
}

/// Bag-level multi-label metrics from binary predicted and reference labels
/// (both B×C).
pub fn static_metrics(predicted: &Array2<u8>, reference: &Array2<u8>) -> Result<StaticReport> {
    if predicted.dim() != reference.dim() {
        return Err(Error::InvalidInput(format!(
            "prediction shape {:?} does not match reference shape {:?}",
            predicted.dim(),
            reference.dim()
        )));
    }
    let c = predicted.ncols();
    let mut tp = vec![0u64; c];
    let mut fp = vec![0u64; c];
    let mut fn_ = vec![0u64; c];
    for (p_row, r_row) in predicted.rows().into_iter().zip(reference.rows()) {
        for class in 0..c {
            match (p_row[class] != 0, r_row[class] != 0) {
                (true, true) => tp[class] += 1,
                (true, false) => fp[class] += 1,
                (false, true) => fn_[class] += 1,
                (false, false) => {}
            }
        }
    }
    let (per_class, macro_avg, micro_avg) = class_metrics_from_counts(&tp, &fp, &fn_);
    Ok(StaticReport {
        per_class,
        macro_avg,
        micro_avg,
    })
}

/// Running segment-level counts, so whole datasets can be evaluated by
/// accumulating per-bag rolls (bag boundaries coincide with segment
/// boundaries, so this equals evaluating one concatenated roll).
#[derive(Debug, Clone)]
pub struct SegmentTally {
    tp: Vec<u64>,
    fp: Vec<u64>,
    fn_: Vec<u64>,
    substitutions: u64,
    deletions: u64,
    insertions: u64,
    total_reference: u64,
    segment_duration: f64,
}

impl SegmentTally {
    pub fn new(num_classes: usize, segment_duration: f64) -> Self {
        Self {
            tp: vec![0; num_classes],
            fp: vec![0; num_classes],
            fn_: vec![0; num_classes],
            substitutions: 0,
            deletions: 0,
            insertions: 0,
            total_reference: 0,
            segment_duration,
        }
    }

    pub fn add(&mut self, predicted: &EventRoll, reference: &EventRoll) -> Result<()> {
        if predicted.active.dim() != reference.active.dim() {
            return Err(Error::InvalidInput(format!(
                "prediction roll {:?} does not match reference roll {:?}",
                predicted.active.dim(),
                reference.active.dim()
            )));
        }
        if predicted.num_classes() != self.tp.len() {
            return Err(Error::InvalidInput(format!(
                "roll has {} classes, tally expects {}",
                predicted.num_classes(),
                self.tp.len()
            )));
        }
        if predicted.segment_duration != reference.segment_duration
            || predicted.segment_duration != self.segment_duration
        {
            return Err(Error::InvalidInput(format!(
                "segment durations differ: prediction {}, reference {}, tally {}",
                predicted.segment_duration, reference.segment_duration, self.segment_duration
            )));
        }
        let c = predicted.num_classes();
        for (p_row, r_row) in predicted.active.rows().into_iter().zip(reference.active.rows()) {
            // Per segment: missed reference events (FN) and spurious
            // predictions (FP) across classes; each co-occurring FN/FP pair
            // counts as one substitution, the remainders as deletions and
            // insertions.
            let mut seg_fn = 0u64;
            let mut seg_fp = 0u64;
            let mut seg_n = 0u64;
            for class in 0..c {
                let (p, r) = (p_row[class] != 0, r_row[class] != 0);
                if r {
                    seg_n += 1;
                }
                match (p, r) {
                    (true, true) => self.tp[class] += 1,
                    (true, false) => {
                        self.fp[class] += 1;
                        seg_fp += 1;
                    }
                    (false, true) => {
                        self.fn_[class] += 1;
                        seg_fn += 1;
                    }
                    (false, false) => {}
                }
            }
            let subs = seg_fn.min(seg_fp);
            self.substitutions += subs;
            self.deletions += seg_fn - subs;
            self.insertions += seg_fp - subs;
            self.total_reference += seg_n;
        }
        Ok(())
    }

    pub fn finish(self) -> DynamicReport {
        let (per_class, macro_avg, micro_avg) =
            class_metrics_from_counts(&self.tp, &self.fp, &self.fn_);
        let errors = self.substitutions + self.deletions + self.insertions;
        let value = if self.total_reference > 0 {
            Some(errors as f64 / self.total_reference as f64)
        } else {
            None
        };
        DynamicReport {
            per_class,
            macro_avg,
            micro_avg,
            error_rate: ErrorRate {
                substitutions: self.substitutions,
                deletions: self.deletions,
                insertions: self.insertions,
                total_reference: self.total_reference,
                value,
            },
            segment_duration: self.segment_duration,
        }
    }
}

/// Segment-based metrics for one predicted/reference roll pair.
pub fn segment_metrics(predicted: &EventRoll, reference: &EventRoll) -> Result<DynamicReport> {
    let mut tally = SegmentTally::new(predicted.num_classes(), predicted.segment_duration);
    tally.add(predicted, reference)?;
    Ok(tally.finish())
}

/// Reduce frame-level likelihoods to a segment roll: a segment is active for
/// a class iff any frame whose midpoint falls inside the segment is at or
/// above the threshold. A final partial segment containing at least one frame
/// midpoint is evaluated like any other.
pub fn frames_to_segments(
    frames: &Array2<f64>,
    frame_rate: f64,
    segment_duration: f64,
    threshold: f64,
) -> Result<EventRoll> {
    if !(frame_rate > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "frame rate must be positive, got {frame_rate}"
        )));
    }
    if !(segment_duration > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "segment duration must be positive, got {segment_duration}"
        )));
    }
    let (t_frames, c) = frames.dim();
    if t_frames < 1 {
        return Err(Error::InvalidInput("need at least one frame".to_string()));
    }
    let segment_of = |frame: usize| -> usize {
        let midpoint = (frame as f64 + 0.5) / frame_rate;
        (midpoint / segment_duration).floor() as usize
    };
    let num_segments = segment_of(t_frames - 1) + 1;
    let mut active = Array2::zeros((num_segments, c));
    for frame in 0..t_frames {
        let seg = segment_of(frame);
        for class in 0..c {
            if frames[[frame, class]] >= threshold {
                active[[seg, class]] = 1;
            }
        }
    }
    EventRoll::new(active, segment_duration)
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x}"),
        None => "NA".to_string(),
    }
}

/// Flat delimiter-separated view of a report: one row per class per section
/// plus macro rows; the dynamic macro row carries the error-rate fields.
pub fn report_to_csv(report: &EvalReport) -> String {
    fn push_class(out: &mut String, section: &str, m: &ClassMetrics) {
        out.push_str(&format!(
            "{section},{},{},{},{},{},{},{},,,,,\n",
            m.class, m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_
        ));
    }
    let mut out = String::from(
        "section,class,precision,recall,f1,tp,fp,fn,substitutions,deletions,insertions,n_reference,error_rate\n",
    );
    for m in &report.static_metrics.per_class {
        push_class(&mut out, "static", m);
    }
    let sm = &report.static_metrics.macro_avg;
    out.push_str(&format!(
        "static,macro,{},{},{},,,,,,,,\n",
        sm.precision, sm.recall, sm.f1
    ));
    let mi = &report.static_metrics.micro_avg;
    out.push_str(&format!(
        "static,micro,{},{},{},,,,,,,,\n",
        mi.precision, mi.recall, mi.f1
    ));
    for m in &report.dynamic_metrics.per_class {
        push_class(&mut out, "dynamic", m);
    }
    let dm = &report.dynamic_metrics.macro_avg;
    let er = &report.dynamic_metrics.error_rate;
    out.push_str(&format!(
        "dynamic,macro,{},{},{},,,,{},{},{},{},{}\n",
        dm.precision,
        dm.recall,
        dm.f1,
        er.substitutions,
        er.deletions,
        er.insertions,
        er.total_reference,
        fmt_opt(er.value)
    ));
    let di = &report.dynamic_metrics.micro_avg;
    out.push_str(&format!(
        "dynamic,micro,{},{},{},,,,,,,,\n",
        di.precision, di.recall, di.f1
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn threshold_boundary_is_inclusive() {
        let roll =
            threshold_predictions(&array![[0.5, 0.49], [0.0, 0.9]], 0.5, 1.0).unwrap();
        assert_eq!(roll.active, array![[1, 0], [0, 1]]);
    }

    #[test]
    fn threshold_all_zero_and_high_threshold() {
        let roll = threshold_predictions(&array![[0.0, 0.0]], 0.5, 1.0).unwrap();
        assert_eq!(roll.active, array![[0, 0]]);
        let roll = threshold_predictions(&array![[0.8]], 0.9, 1.0).unwrap();
        assert_eq!(roll.active[[0, 0]], 0);
        assert!(threshold_predictions(&array![[0.8]], 1.0, 1.0).is_err());
        assert!(threshold_predictions(&array![[0.8]], 0.0, 1.0).is_err());
    }

    #[test]
    fn threshold_is_monotone() {
        let likelihoods = array![[0.1, 0.4], [0.6, 0.9], [0.5, 0.2]];
        let low = threshold_predictions(&likelihoods, 0.3, 1.0).unwrap();
        let high = threshold_predictions(&likelihoods, 0.7, 1.0).unwrap();
        for (l, h) in low.active.iter().zip(high.active.iter()) {
            assert!(h <= l);
        }
    }

    #[test]
    fn static_prediction_is_column_max() {
        let p = InstanceLikelihoods::new(array![[0.2, 0.5], [0.9, 0.5], [0.1, 0.5]]).unwrap();
        let bag = static_prediction(&p);
        assert_eq!(bag.values[0], 0.9);
        assert_eq!(bag.values[1], 0.5);

        let single = InstanceLikelihoods::new(array![[0.37]]).unwrap();
        assert_eq!(static_prediction(&single).values[0], 0.37);
    }

    #[test]
    fn static_metrics_perfect_and_all_negative() {
        let labels = array![[1, 0], [0, 1], [1, 1]];
        let report = static_metrics(&labels, &labels).unwrap();
        for m in &report.per_class {
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!(report.macro_avg.f1, 1.0);

        let none = Array2::zeros((3, 2));
        let report = static_metrics(&none, &labels).unwrap();
        for m in &report.per_class {
            assert_eq!(m.recall, 0.0);
            assert_eq!(m.f1, 0.0);
        }
    }

    #[test]
    fn macro_f1_is_unweighted_mean() {
        // Class 0: tp=1, fp=2, fn=1 -> P=1/3, R=1/2, F1=0.4
        // Class 1: tp=2, fp=0, fn=1 -> P=1, R=2/3, F1=0.8
        let predicted = array![[1, 1], [1, 1], [1, 0], [0, 0]];
        let reference = array![[1, 1], [0, 1], [0, 1], [1, 0]];
        let report = static_metrics(&predicted, &reference).unwrap();
        assert_abs_diff_eq!(report.per_class[0].f1, 0.4, epsilon = 1e-12);
        assert_abs_diff_eq!(report.per_class[1].f1, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(report.macro_avg.f1, 0.6, epsilon = 1e-12);
        let mean = (report.per_class[0].f1 + report.per_class[1].f1) / 2.0;
        assert_abs_diff_eq!(report.macro_avg.f1, mean, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_class_is_flagged_and_scores_zero() {
        let predicted = array![[1, 0], [0, 0]];
        let reference = array![[1, 0], [0, 0]];
        let report = static_metrics(&predicted, &reference).unwrap();
        assert!(!report.per_class[0].degenerate);
        assert!(report.per_class[1].degenerate);
        assert_eq!(report.per_class[1].f1, 0.0);
    }

    #[test]
    fn segment_metrics_perfect_match() {
        let roll = EventRoll::new(array![[1, 0], [0, 1], [1, 1]], 1.0).unwrap();
        let report = segment_metrics(&roll, &roll).unwrap();
        assert_eq!(report.error_rate.value, Some(0.0));
        assert_eq!(report.macro_avg.f1, 1.0);
        assert_eq!(report.error_rate.total_reference, 4);
    }

    #[test]
    fn segment_metrics_substitution_case() {
        // One segment, reference has class A, prediction has class B:
        // one FN and one FP pair -> S=1, D=0, I=0, E = 1/1.
        let predicted = EventRoll::new(array![[0, 1]], 1.0).unwrap();
        let reference = EventRoll::new(array![[1, 0]], 1.0).unwrap();
        let report = segment_metrics(&predicted, &reference).unwrap();
        assert_eq!(report.error_rate.substitutions, 1);
        assert_eq!(report.error_rate.deletions, 0);
        assert_eq!(report.error_rate.insertions, 0);
        assert_eq!(report.error_rate.value, Some(1.0));
    }

    #[test]
    fn segment_metrics_empty_reference_flags_undefined_rate() {
        let predicted = EventRoll::new(array![[1, 0]], 1.0).unwrap();
        let reference = EventRoll::new(array![[0, 0]], 1.0).unwrap();
        let report = segment_metrics(&predicted, &reference).unwrap();
        assert_eq!(report.error_rate.insertions, 1);
        assert_eq!(report.error_rate.total_reference, 0);
        assert_eq!(report.error_rate.value, None);
    }

    #[test]
    fn segment_metrics_rejects_mismatched_rolls() {
        let a = EventRoll::new(array![[1, 0]], 1.0).unwrap();
        let b = EventRoll::new(array![[1, 0], [0, 0]], 1.0).unwrap();
        assert!(segment_metrics(&a, &b).is_err());
        let c = EventRoll::new(array![[1, 0]], 2.0).unwrap();
        assert!(segment_metrics(&a, &c).is_err());
    }

    #[test]
    fn frames_to_segments_any_frame_rule() {
        // 3 frames per 1 s segment.
        let frames = array![[0.0], [0.0], [1.0]];
        let roll = frames_to_segments(&frames, 3.0, 1.0, 0.5).unwrap();
        assert_eq!(roll.num_segments(), 1);
        assert_eq!(roll.active[[0, 0]], 1);

        let silent = Array2::zeros((6, 2));
        let roll = frames_to_segments(&silent, 3.0, 1.0, 0.5).unwrap();
        assert!(roll.active.iter().all(|v| *v == 0));
        assert_eq!(roll.num_segments(), 2);
    }

    #[test]
    fn frames_to_segments_partial_final_segment() {
        // 4 frames at 3 Hz: midpoints at 1/6, 1/2, 5/6, 7/6 s -> two segments,
        // the second containing only the last frame.
        let frames = array![[0.0], [0.0], [0.0], [0.9]];
        let roll = frames_to_segments(&frames, 3.0, 1.0, 0.5).unwrap();
        assert_eq!(roll.num_segments(), 2);
        assert_eq!(roll.active[[0, 0]], 0);
        assert_eq!(roll.active[[1, 0]], 1);
    }

    #[test]
    fn csv_has_macro_rows_and_error_rate() {
        let roll = EventRoll::new(array![[1, 0]], 1.0).unwrap();
        let dynamic = segment_metrics(&roll, &roll).unwrap();
        let static_report = static_metrics(&array![[1, 0]], &array![[1, 0]]).unwrap();
        let report = EvalReport {
            static_metrics: static_report,
            dynamic_metrics: dynamic,
        };
        let csv = report_to_csv(&report);
        assert!(csv.lines().any(|l| l.starts_with("static,macro,")));
        let dyn_macro = csv
            .lines()
            .find(|l| l.starts_with("dynamic,macro,"))
            .unwrap();
        assert!(dyn_macro.ends_with(",0")); // E = 0
    }
}
