//! Detection evaluation: greedy overlap matching with height-level ignore
//! regions, precision/recall curves, all-points AP, and AR sampled at nine
//! log-spaced false-positives-per-image operating points.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use crate::boxes::BBox;
use crate::error::{Error, Result};

/// Overlap above which a detection may match a ground truth.
pub const MATCH_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub class_id: usize,
    pub bbox: BBox,
}

impl GroundTruth {
    pub fn height(&self) -> f64 {
        self.bbox.height()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionRecord {
    pub image_id: String,
    pub class_id: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Ground truths outside `[min_height, max_height)` become ignore regions.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalLevel {
    pub name: String,
    pub min_height: f64,
    pub max_height: Option<f64>,
}

impl EvalLevel {
    pub fn new(name: impl Into<String>, min_height: f64, max_height: Option<f64>) -> Result<Self> {
        if !(min_height > 0.0) || max_height.is_some_and(|m| m <= min_height) {
            return Err(Error::invalid("eval_level", "min_height must be positive and below max_height"));
        }
        Ok(EvalLevel {
            name: name.into(),
            min_height,
            max_height,
        })
    }

    /// Instances at least 70 px tall.
    pub fn l1() -> Self {
        EvalLevel::new("L1", 70.0, None).expect("valid")
    }

    /// Instances at least 25 px tall.
    pub fn l2() -> Self {
        EvalLevel::new("L2", 25.0, None).expect("valid")
    }

    /// Every instance at least one pixel tall.
    pub fn all() -> Self {
        EvalLevel::new("all", 1.0, None).expect("valid")
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "L1" => Some(Self::l1()),
            "L2" => Some(Self::l2()),
            "ALL" => Some(Self::all()),
            _ => None,
        }
    }

    pub fn admits(&self, gt: &GroundTruth) -> bool {
        let h = gt.height();
        h >= self.min_height && self.max_height.is_none_or(|m| h < m)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    TruePositive,
    FalsePositive,
    /// Matched an ignore region; excluded from scoring.
    Ignored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Outcome per detection, in input order.
    pub outcomes: Vec<Outcome>,
    /// Whether each gt (input order) was claimed by a true positive.
    pub gt_matched: Vec<bool>,
    /// Whether each gt counts toward recall at this level.
    pub gt_valid: Vec<bool>,
}

impl MatchResult {
    pub fn valid_gt_count(&self) -> usize {
        self.gt_valid.iter().filter(|v| **v).count()
    }
}

/// Greedy matching per (image, class): detections in descending score take
/// the highest-overlap unclaimed in-level gt with overlap above `iou_thresh`
/// (true positive). Failing that, a detection overlapping an out-of-level gt
/// above `iou_thresh` is ignored; otherwise it is a false positive.
pub fn match_detections(dets: &[DetectionRecord], gts: &[GroundTruth], iou_thresh: f64, level: &EvalLevel) -> MatchResult {
    let gt_valid: Vec<bool> = gts.iter().map(|g| level.admits(g)).collect();
    let mut gt_matched = vec![false; gts.len()];
    let mut outcomes = vec![Outcome::FalsePositive; dets.len()];

    let mut gt_groups: HashMap<(&str, usize), Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        gt_groups.entry((g.image_id.as_str(), g.class_id)).or_default().push(i);
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score).then(a.cmp(&b)));

    for d in order {
        let det = &dets[d];
        let Some(cands) = gt_groups.get(&(det.image_id.as_str(), det.class_id)) else {
            continue;
        };
        let mut best: Option<(usize, f64)> = None;
        let mut hits_ignore = false;
        for &g in cands {
            let iou = det.bbox.iou(&gts[g].bbox);
            if iou <= iou_thresh {
                continue;
            }
            if !gt_valid[g] {
                hits_ignore = true;
            } else if !gt_matched[g] && best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        outcomes[d] = match best {
            Some((g, _)) => {
                gt_matched[g] = true;
                Outcome::TruePositive
            }
            None if hits_ignore => Outcome::Ignored,
            None => Outcome::FalsePositive,
        };
    }
    MatchResult {
        outcomes,
        gt_matched,
        gt_valid,
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    /// Detections scoring at least this are counted.
    pub threshold: f64,
    pub tp: usize,
    pub fp: usize,
    pub precision: f64,
    pub recall: f64,
}

/// Cumulative counts at every distinct score threshold, highest first.
#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub gt_count: usize,
    pub image_count: usize,
}

impl PrCurve {
    /// Builds the curve from scored outcomes; ignored detections are skipped
    /// and equal scores form a single threshold step.
    pub fn from_outcomes(scores: &[f64], outcomes: &[Outcome], gt_count: usize, image_count: usize) -> PrCurve {
        let mut scored: Vec<(f64, bool)> = scores
            .iter()
            .zip(outcomes)
            .filter(|(_, o)| **o != Outcome::Ignored)
            .map(|(&s, &o)| (s, o == Outcome::TruePositive))
            .collect();
        scored.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut points: Vec<PrPoint> = Vec::new();
        let (mut tp, mut fp) = (0usize, 0usize);
        for (i, &(score, is_tp)) in scored.iter().enumerate() {
            if is_tp {
                tp += 1;
            } else {
                fp += 1;
            }
            let last_of_tie = scored.get(i + 1).is_none_or(|next| next.0 != score);
            if last_of_tie {
                points.push(PrPoint {
                    threshold: score,
                    tp,
                    fp,
                    precision: tp as f64 / (tp + fp) as f64,
                    recall: if gt_count == 0 { 0.0 } else { tp as f64 / gt_count as f64 },
                });
            }
        }
        PrCurve {
            points,
            gt_count,
            image_count,
        }
    }

    pub fn from_match(dets: &[DetectionRecord], result: &MatchResult, image_count: usize) -> PrCurve {
        let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        PrCurve::from_outcomes(&scores, &result.outcomes, result.valid_gt_count(), image_count)
    }
}

/// All-points AP: `sum_i (r_i - r_{i-1}) * max_{j >= i} p_j`. `None` without gts.
pub fn average_precision(curve: &PrCurve) -> Option<f64> {
    if curve.gt_count == 0 {
        return None;
    }
    let mut envelope: Vec<f64> = curve.points.iter().map(|p| p.precision).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, env) in curve.points.iter().zip(&envelope) {
        ap += (p.recall - prev_recall) * env;
        prev_recall = p.recall;
    }
    Some(ap)
}

/// FPPI operating points `10^(-2 + k/4)`, k = 0..8.
pub fn fppi_grid() -> [f64; 9] {
    std::array::from_fn(|k| 10f64.powf(-2.0 + k as f64 / 4.0))
}

/// Recall at the deepest threshold whose FPPI does not exceed each grid
/// point (0 when only the empty operating point qualifies), averaged over
/// the nine points. `None` without gts or images.
pub fn average_recall(curve: &PrCurve) -> Option<f64> {
    if curve.gt_count == 0 || curve.image_count == 0 {
        return None;
    }
    let images = curve.image_count as f64;
    let grid = fppi_grid();
    let total: f64 = grid
        .iter()
        .map(|&f| {
            curve
                .points
                .iter()
                .filter(|p| p.fp as f64 / images <= f)
                .map(|p| p.recall)
                .fold(0.0, f64::max)
        })
        .sum();
    Some(total / grid.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub ap: Option<f64>,
    pub ar: Option<f64>,
    pub curve: PrCurve,
}

/// Per-class AP/AR at `level`.
pub fn evaluate_classes(
    dets: &[DetectionRecord],
    gts: &[GroundTruth],
    classes: &[usize],
    level: &EvalLevel,
    image_count: usize,
) -> Vec<ClassMetrics> {
    classes
        .iter()
        .map(|&c| {
            let d: Vec<DetectionRecord> = dets.iter().filter(|x| x.class_id == c).cloned().collect();
            let g: Vec<GroundTruth> = gts.iter().filter(|x| x.class_id == c).cloned().collect();
            let m = match_detections(&d, &g, MATCH_IOU, level);
            let curve = PrCurve::from_match(&d, &m, image_count);
            ClassMetrics {
                class_id: c,
                ap: average_precision(&curve),
                ar: average_recall(&curve),
                curve,
            }
        })
        .collect()
}

/// Mean of the defined values, `None` if none are defined.
pub fn mean_defined(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// A classification task relabelling class ids, e.g. left/right hands.
#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    pub name: String,
    pub labels: BTreeMap<usize, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskMetrics {
    pub task: String,
    /// (label, AP, AR) per label, label-sorted.
    pub per_label: Vec<(String, Option<f64>, Option<f64>)>,
    pub mean_ap: Option<f64>,
    pub mean_ar: Option<f64>,
}

/// Maps classes to each task's labels, evaluates per label and macro-averages.
pub fn classified_eval(
    dets: &[DetectionRecord],
    gts: &[GroundTruth],
    tasks: &[Task],
    level: &EvalLevel,
    image_count: usize,
) -> Result<Vec<TaskMetrics>> {
    let mut out = Vec::with_capacity(tasks.len());
    for task in tasks {
        let label_ids: BTreeMap<&str, usize> = task
            .labels
            .values()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, l)| (l.as_str(), i))
            .collect();
        let relabel = |class_id: usize| -> Result<usize> {
            task.labels
                .get(&class_id)
                .map(|l| label_ids[l.as_str()])
                .ok_or_else(|| Error::Data(format!("class {class_id} not in task `{}`", task.name)))
        };
        let d = dets
            .iter()
            .map(|x| Ok(DetectionRecord { class_id: relabel(x.class_id)?, ..x.clone() }))
            .collect::<Result<Vec<_>>>()?;
        let g = gts
            .iter()
            .map(|x| Ok(GroundTruth { class_id: relabel(x.class_id)?, ..x.clone() }))
            .collect::<Result<Vec<_>>>()?;
        let ids: Vec<usize> = label_ids.values().copied().collect();
        let metrics = evaluate_classes(&d, &g, &ids, level, image_count);
        let per_label: Vec<(String, Option<f64>, Option<f64>)> = label_ids
            .keys()
            .zip(&metrics)
            .map(|(l, m)| (l.to_string(), m.ap, m.ar))
            .collect();
        out.push(TaskMetrics {
            task: task.name.clone(),
            mean_ap: mean_defined(per_label.iter().map(|p| p.1)),
            mean_ar: mean_defined(per_label.iter().map(|p| p.2)),
            per_label,
        });
    }
    Ok(out)
}

fn fmt_metric(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

/// Plain-text metrics report with one line per class and the mean.
pub fn write_text_report<W: Write>(out: &mut W, level: &EvalLevel, metrics: &[ClassMetrics]) -> Result<()> {
    writeln!(out, "level {} (min height {}):", level.name, level.min_height)?;
    for m in metrics {
        writeln!(
            out,
            "  class {:>3}  AP {}  AR {}  gts {}",
            m.class_id,
            fmt_metric(m.ap),
            fmt_metric(m.ar),
            m.curve.gt_count
        )?;
    }
    writeln!(
        out,
        "  mean       AP {}  AR {}",
        fmt_metric(mean_defined(metrics.iter().map(|m| m.ap))),
        fmt_metric(mean_defined(metrics.iter().map(|m| m.ar)))
    )?;
    Ok(())
}

/// `task,level,AP,AR` rows; per-class rows use the task name `class_<id>`.
pub fn write_metrics_csv<W: Write>(out: &mut W, level: &EvalLevel, metrics: &[ClassMetrics], tasks: &[TaskMetrics]) -> Result<()> {
    writeln!(out, "task,level,AP,AR")?;
    for m in metrics {
        writeln!(out, "class_{},{},{},{}", m.class_id, level.name, fmt_metric(m.ap), fmt_metric(m.ar))?;
    }
    writeln!(
        out,
        "detection,{},{},{}",
        level.name,
        fmt_metric(mean_defined(metrics.iter().map(|m| m.ap))),
        fmt_metric(mean_defined(metrics.iter().map(|m| m.ar)))
    )?;
    for t in tasks {
        writeln!(out, "{},{},{},{}", t.task, level.name, fmt_metric(t.mean_ap), fmt_metric(t.mean_ar))?;
    }
    Ok(())
}

/// `class_id,recall,precision` rows for plotting.
pub fn write_pr_csv<W: Write>(out: &mut W, metrics: &[ClassMetrics]) -> Result<()> {
    writeln!(out, "class_id,recall,precision")?;
    for m in metrics {
        for p in &m.curve.points {
            writeln!(out, "{},{:.6},{:.6}", m.class_id, p.recall, p.precision)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gt(img: &str, c: usize, b: BBox) -> GroundTruth {
        GroundTruth {
            image_id: img.into(),
            class_id: c,
            bbox: b,
        }
    }

    fn det(img: &str, c: usize, s: f64, b: BBox) -> DetectionRecord {
        DetectionRecord {
            image_id: img.into(),
            class_id: c,
            score: s,
            bbox: b,
        }
    }

    const B: BBox = BBox::new(0.0, 0.0, 40.0, 40.0);

    #[test]
    fn single_hit() {
        let r = match_detections(&[det("a", 1, 0.9, B)], &[gt("a", 1, B)], MATCH_IOU, &EvalLevel::all());
        assert_eq!(r.outcomes, vec![Outcome::TruePositive]);
        assert_eq!(r.gt_matched, vec![true]);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let near = BBox::new(1.0, 0.0, 41.0, 40.0);
        let r = match_detections(
            &[det("a", 1, 0.8, near), det("a", 1, 0.9, B)],
            &[gt("a", 1, B)],
            MATCH_IOU,
            &EvalLevel::all(),
        );
        assert_eq!(r.outcomes, vec![Outcome::FalsePositive, Outcome::TruePositive]);
    }

    #[test]
    fn ap_fixtures() {
        let curve = PrCurve::from_outcomes(&[0.9], &[Outcome::TruePositive], 1, 1);
        assert_eq!(average_precision(&curve), Some(1.0));
        let curve = PrCurve::from_outcomes(&[0.9, 0.8], &[Outcome::FalsePositive, Outcome::TruePositive], 1, 1);
        assert_eq!(average_precision(&curve), Some(0.5));
        assert_eq!(average_precision(&PrCurve::from_outcomes(&[], &[], 0, 1)), None);
    }

    #[test]
    fn ar_extremes() {
        let perfect = PrCurve::from_outcomes(&[1.0, 1.0], &[Outcome::TruePositive; 2], 2, 3);
        assert_eq!(average_recall(&perfect), Some(1.0));
        let empty = PrCurve::from_outcomes(&[], &[], 2, 3);
        assert_eq!(average_recall(&empty), Some(0.0));
    }

    #[test]
    fn fppi_grid_values() {
        let expect = [0.01, 0.0178, 0.0316, 0.0562, 0.1, 0.178, 0.316, 0.562, 1.0];
        for (g, e) in fppi_grid().iter().zip(expect) {
            assert!((g - e).abs() / e < 5e-3, "{g} vs {e}");
        }
    }

    #[test]
    fn small_gts_are_ignore_regions() {
        let small = BBox::new(0.0, 0.0, 20.0, 20.0);
        let r = match_detections(
            &[det("a", 1, 0.9, small), det("a", 1, 0.8, BBox::new(50.0, 50.0, 90.0, 90.0))],
            &[gt("a", 1, small)],
            MATCH_IOU,
            &EvalLevel::l2(),
        );
        assert_eq!(r.outcomes, vec![Outcome::Ignored, Outcome::FalsePositive]);
        assert_eq!(r.valid_gt_count(), 0);
    }

    #[test]
    fn tasks_relabel_and_reject_unknown_classes() {
        let tasks = vec![Task {
            name: "L-R".into(),
            labels: BTreeMap::from([(1, "left".to_string()), (2, "right".to_string())]),
        }];
        let gts = vec![gt("a", 1, B), gt("a", 2, BBox::new(50.0, 0.0, 90.0, 40.0))];
        let dets = vec![det("a", 1, 0.9, B), det("a", 2, 0.8, BBox::new(50.0, 0.0, 90.0, 40.0))];
        let m = classified_eval(&dets, &gts, &tasks, &EvalLevel::all(), 1).unwrap();
        assert_eq!(m[0].mean_ap, Some(1.0));
        let bad = vec![det("a", 3, 0.9, B)];
        assert!(classified_eval(&bad, &gts, &tasks, &EvalLevel::all(), 1).is_err());
    }
}
