//! Matching detections to ground truth and per-image labels.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{Detection, Detector, DetectorError};
use crate::dsl::Schema;
use crate::rules::Target;
use crate::sampler::FeatureVector;
use crate::world::{realize, BoundingBox, ViewCone};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_F1_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Correct,
    Incorrect,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Correct => "correct",
            Label::Incorrect => "incorrect",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageEvaluation {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ImageEvaluation {
    /// Scores from raw counts. An image with no ground truth and no
    /// detections scores 1 on every metric.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        if tp + fp + fn_ == 0 {
            return ImageEvaluation {
                tp,
                fp,
                fn_,
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ImageEvaluation {
            tp,
            fp,
            fn_,
            precision,
            recall,
            f1,
        }
    }
}

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Greedy matching: candidate pairs are taken in decreasing IoU order and
/// accepted when the IoU exceeds the threshold and both sides are free.
/// Equal IoUs are ordered by ground-truth then detection index.
///
/// When one detection clears the threshold for several ground-truth boxes,
/// greedy order can leave a box unmatched that an alternate pairing would
/// cover. Augmenting paths then extend the greedy matching to a maximum
/// one, so `tp` is always the largest achievable count.
pub fn match_and_score(
    ground_truth: &[BoundingBox],
    detections: &[Detection],
    iou_threshold: f64,
) -> ImageEvaluation {
    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (g, gt) in ground_truth.iter().enumerate() {
        for (d, det) in detections.iter().enumerate() {
            let v = iou(gt, &det.bbox);
            if v > iou_threshold {
                pairs.push((v, g, d));
            }
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut gt_match: Vec<Option<usize>> = vec![None; ground_truth.len()];
    let mut det_match: Vec<Option<usize>> = vec![None; detections.len()];
    let mut tp = 0;
    for &(_, g, d) in &pairs {
        if gt_match[g].is_none() && det_match[d].is_none() {
            gt_match[g] = Some(d);
            det_match[d] = Some(g);
            tp += 1;
        }
    }
    let mut adj: Vec<Vec<usize>> = vec![Vec::new(); ground_truth.len()];
    for &(_, g, d) in &pairs {
        adj[g].push(d);
    }
    for g in 0..ground_truth.len() {
        if gt_match[g].is_none() {
            let mut seen = vec![false; detections.len()];
            if augment(g, &adj, &mut gt_match, &mut det_match, &mut seen) {
                tp += 1;
            }
        }
    }
    ImageEvaluation::from_counts(tp, detections.len() - tp, ground_truth.len() - tp)
}

fn augment(
    g: usize,
    adj: &[Vec<usize>],
    gt_match: &mut [Option<usize>],
    det_match: &mut [Option<usize>],
    seen: &mut [bool],
) -> bool {
    for &d in &adj[g] {
        if seen[d] {
            continue;
        }
        seen[d] = true;
        if det_match[d].is_none_or(|other| augment(other, adj, gt_match, det_match, seen)) {
            gt_match[g] = Some(d);
            det_match[d] = Some(g);
            return true;
        }
    }
    false
}

/// Correct iff the F1 score is strictly above the threshold.
pub fn assign_label(eval: &ImageEvaluation, threshold: f64) -> Label {
    if eval.f1 > threshold {
        Label::Correct
    } else {
        Label::Incorrect
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub features: FeatureVector,
    pub evaluation: ImageEvaluation,
    pub label: Label,
    pub activations: Option<Vec<f64>>,
    pub augmented: Option<Target>,
}

impl LabeledExample {
    /// Whether this example carries `target`, comparing augmented targets
    /// against the augmented label.
    pub fn has_target(&self, target: Target) -> bool {
        match target.as_label() {
            Some(l) => self.label == l,
            None => self.augmented == Some(target),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub iou_threshold: f64,
    pub f1_threshold: f64,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            f1_threshold: DEFAULT_F1_THRESHOLD,
        }
    }
}

/// Realizes, detects and scores one feature vector.
pub fn label_vector(
    schema: &Schema,
    cone: &ViewCone,
    detector: &dyn Detector,
    f: FeatureVector,
    cfg: &EvaluationConfig,
) -> Result<LabeledExample, DetectorError> {
    let scene = realize(schema, &f, cone);
    let out = detector.detect(&scene, &f)?;
    let evaluation = match_and_score(&scene.ground_truth_boxes(), &out.detections, cfg.iou_threshold);
    Ok(LabeledExample {
        label: assign_label(&evaluation, cfg.f1_threshold),
        features: f,
        evaluation,
        activations: out.activations,
        augmented: None,
    })
}

/// Labels vectors in parallel, keeping their order.
pub fn label_vectors(
    schema: &Schema,
    cone: &ViewCone,
    detector: &dyn Detector,
    vectors: Vec<FeatureVector>,
    cfg: &EvaluationConfig,
) -> Result<Vec<LabeledExample>, DetectorError> {
    vectors
        .into_par_iter()
        .map(|f| label_vector(schema, cone, detector, f, cfg))
        .collect()
}

/// Fraction of examples labelled incorrect; 0 for no examples.
pub fn incorrect_ratio(data: &[LabeledExample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    data.iter().filter(|e| e.label == Label::Incorrect).count() as f64 / data.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn bx(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1)
    }

    fn det(b: BoundingBox) -> Detection {
        Detection {
            bbox: b,
            confidence: 1.0,
        }
    }

    #[test]
    fn iou_cases() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_relative_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &bx(5.0, 5.0, 6.0, 6.0)), 0.0);
        assert_relative_eq!(iou(&a, &bx(1.0, 0.0, 3.0, 2.0)), 1.0 / 3.0);
    }

    #[test]
    fn single_match() {
        let gt = [bx(0.0, 0.0, 10.0, 10.0)];
        let d = [det(bx(0.0, 0.0, 10.0, 6.0))];
        let e = match_and_score(&gt, &d, 0.5);
        assert_eq!((e.tp, e.fp, e.fn_), (1, 0, 0));
        assert_eq!(e.f1, 1.0);
    }

    #[test]
    fn duplicate_is_false_positive() {
        let gt = [bx(0.0, 0.0, 10.0, 10.0), bx(20.0, 0.0, 30.0, 10.0)];
        let d = [
            det(bx(0.0, 0.0, 10.0, 10.0)),
            det(bx(20.0, 0.0, 30.0, 10.0)),
            det(bx(0.5, 0.0, 10.0, 10.0)),
        ];
        let e = match_and_score(&gt, &d, 0.5);
        assert_eq!((e.tp, e.fp, e.fn_), (2, 1, 0));
        assert_relative_eq!(e.precision, 2.0 / 3.0);
        assert_relative_eq!(e.f1, 0.8, epsilon = 1e-15);
        assert_eq!(assign_label(&e, 0.8), Label::Incorrect);
    }

    #[test]
    fn greedy_shortfall_is_repaired() {
        // d0 overlaps both boxes and prefers g0; d1 only reaches g0.
        let gt = [bx(0.0, 0.0, 10.0, 10.0), bx(1.0, 0.0, 11.0, 10.0)];
        let d = [det(bx(0.4, 0.0, 10.4, 10.0)), det(bx(-3.0, 0.0, 7.0, 10.0))];
        assert!(iou(&gt[0], &d[0].bbox) > iou(&gt[1], &d[0].bbox));
        assert!(iou(&gt[1], &d[1].bbox) <= 0.5);
        let e = match_and_score(&gt, &d, 0.5);
        assert_eq!((e.tp, e.fp, e.fn_), (2, 0, 0));
    }

    #[test]
    fn empty_scene_is_correct() {
        let e = match_and_score(&[], &[], 0.5);
        assert_eq!(e.f1, 1.0);
        assert_eq!(assign_label(&e, 0.8), Label::Correct);
        let e = match_and_score(&[], &[det(bx(0.0, 0.0, 1.0, 1.0))], 0.5);
        assert_eq!((e.precision, e.recall, e.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn iou_exactly_at_threshold_does_not_match() {
        // IoU = 0.5 exactly.
        let gt = [bx(0.0, 0.0, 2.0, 1.0)];
        let d = [det(bx(0.0, 0.0, 1.0, 1.0))];
        let e = match_and_score(&gt, &d, 0.5);
        assert_eq!((e.tp, e.fp, e.fn_), (0, 1, 1));
    }

    #[test]
    fn label_thresholds() {
        let at = |f1: f64| ImageEvaluation {
            tp: 0,
            fp: 0,
            fn_: 0,
            precision: 0.0,
            recall: 0.0,
            f1,
        };
        assert_eq!(assign_label(&at(1.0), 0.8), Label::Correct);
        assert_eq!(assign_label(&at(0.8), 0.8), Label::Incorrect);
        assert_eq!(assign_label(&at(0.0), 0.8), Label::Incorrect);
    }
}
