//! Evaluation: detection/ground-truth matching, precision-recall
//! metrics, average precision, direction error, and the k-fold
//! cross-validation driver that reports per-stage counts.
//!
//! Matching convention: detections are processed in descending score and
//! claim the unmatched ground-truth box of highest overlap at or above
//! the threshold. The first claim per box is a true positive; every
//! other detection is a false positive; unclaimed boxes are false
//! negatives.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::bagging::{
    build_instances, split_folds, BaggingError, GroundTruth, LabeledInstance, PositiveBag,
};
use crate::geom::{iou, normalize_angle, Aabb};
use crate::linedet::LineDetectError;
use crate::net::{train, NetError, OptimizerState, ScorerModel, TrainSet};
use crate::net::{Geometry, TrainSchedule};
use crate::par::{par_map, par_map_indexed};
use crate::params::PipelineParams;
use crate::postproc::{nms, Detection};
use crate::raster::PlanarImage;
use crate::slsgen::detect_and_propose;
use crate::synthgen::AxisTruth;

#[derive(Debug, Error)]
pub enum CvError {
    #[error(transparent)]
    LineDetect(#[from] LineDetectError),
    #[error(transparent)]
    Bagging(#[from] BaggingError),
    #[error("fold {fold}: {source}")]
    Training { fold: usize, source: NetError },
}

/// Outcome of matching one image's detections against its boxes.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
    /// Per-box: claimed by some detection.
    pub gt_matched: Vec<bool>,
    /// Per-detection: index of the claimed box, if any.
    pub det_matched: Vec<Option<usize>>,
}

/// Greedy score-ordered matching.
pub fn match_detections(dets: &[Detection], gts: &[Aabb], iou_threshold: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut gt_matched = vec![false; gts.len()];
    let mut det_matched = vec![None; dets.len()];
    let mut tp = 0;
    for &di in &order {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt_matched[gi] {
                continue;
            }
            let overlap = iou(&dets[di].square, gt);
            if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        if let Some((gi, _)) = best {
            gt_matched[gi] = true;
            det_matched[di] = Some(gi);
            tp += 1;
        }
    }
    MatchResult {
        tp,
        fn_: gts.len() - tp,
        fp: dets.len() - tp,
        gt_matched,
        det_matched,
    }
}

/// Recall/precision/F1; a metric whose denominator is zero is reported
/// as absent rather than zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrfMetrics {
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

pub fn prf(tp: usize, fn_: usize, fp: usize) -> PrfMetrics {
    let recall = (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64);
    let precision = (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64);
    let f1 = match (recall, precision) {
        (Some(r), Some(p)) if r + p > 0.0 => Some(2.0 * r * p / (r + p)),
        _ => None,
    };
    PrfMetrics { recall, precision, f1 }
}

/// Precision-recall curve swept over every distinct score, with the
/// all-points (precision envelope) area.
#[derive(Debug, Clone)]
pub struct PrCurve {
    /// (recall, precision) after each distinct score threshold, from the
    /// highest threshold down; recall is nondecreasing.
    pub points: Vec<(f64, f64)>,
    pub ap: f64,
}

/// Average precision of a pooled detection list against per-image ground
/// truth. Detections are ranked globally by score; each claims at most
/// one unmatched box of its own image (highest IoU at or above the
/// threshold first).
pub fn average_precision(
    dets: &[Detection],
    gts_by_image: &BTreeMap<String, Vec<Aabb>>,
    iou_threshold: f64,
) -> PrCurve {
    let total_gt: usize = gts_by_image.values().map(|v| v.len()).sum();
    if total_gt == 0 {
        return PrCurve { points: Vec::new(), ap: 0.0 };
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap().then(a.cmp(&b)));
    let mut matched: BTreeMap<&str, Vec<bool>> = gts_by_image
        .iter()
        .map(|(id, v)| (id.as_str(), vec![false; v.len()]))
        .collect();
    // (score, is_tp) in rank order
    let mut ranked: Vec<(f64, bool)> = Vec::with_capacity(dets.len());
    for &di in &order {
        let det = &dets[di];
        let mut is_tp = false;
        if let (Some(boxes), Some(flags)) =
            (gts_by_image.get(&det.image_id), matched.get_mut(det.image_id.as_str()))
        {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gt) in boxes.iter().enumerate() {
                if flags[gi] {
                    continue;
                }
                let overlap = iou(&det.square, gt);
                if overlap >= iou_threshold && best.is_none_or(|(_, b)| overlap > b) {
                    best = Some((gi, overlap));
                }
            }
            if let Some((gi, _)) = best {
                flags[gi] = true;
                is_tp = true;
            }
        }
        ranked.push((det.score, is_tp));
    }
    // one PR point per distinct score value
    let mut points = Vec::new();
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut i = 0;
    while i < ranked.len() {
        let score = ranked[i].0;
        while i < ranked.len() && ranked[i].0 == score {
            if ranked[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp) as f64));
    }
    PrCurve { ap: envelope_area(&points), points }
}

/// Area under the precision envelope: each recall increment is weighted
/// by the best precision attained at that recall or beyond.
fn envelope_area(points: &[(f64, f64)]) -> f64 {
    let mut envelope = vec![0.0; points.len()];
    let mut best: f64 = 0.0;
    for (i, &(_, p)) in points.iter().enumerate().rev() {
        best = best.max(p);
        envelope[i] = best;
    }
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        area += (r - prev_recall) * envelope[i];
        prev_recall = r;
    }
    area
}

/// Folded angular error between an estimated direction and the true
/// symmetry axis, in degrees within [0, 90]. The axis is treated as
/// undirected, and a quarter-turn ambiguity is folded in because a valid
/// mirror pair can sit perpendicular to the fuselage.
pub fn direction_error(estimated: f64, true_axis: f64) -> f64 {
    let mut d = normalize_angle(estimated - true_axis).abs();
    if d > std::f64::consts::FRAC_PI_2 {
        d = std::f64::consts::PI - d;
    }
    d.to_degrees()
}

/// One image ready for evaluation.
pub struct DatasetImage {
    pub image_id: String,
    pub image: PlanarImage,
    pub gt: GroundTruth,
    pub axes: Option<Vec<AxisTruth>>,
}

/// Instance counts by label plus the matching tallies at one stage.
#[derive(Debug, Clone, Copy, Default)]
pub struct StageCounts {
    pub pos: usize,
    pub neg: usize,
    pub ind: usize,
    pub tp: usize,
    pub fn_: usize,
    pub fp: usize,
}

impl StageCounts {
    fn add(&mut self, other: &StageCounts) {
        self.pos += other.pos;
        self.neg += other.neg;
        self.ind += other.ind;
        self.tp += other.tp;
        self.fn_ += other.fn_;
        self.fp += other.fp;
    }
}

/// Per-fold evaluation summary.
#[derive(Debug, Clone)]
pub struct FoldReport {
    pub fold: usize,
    pub image_count: usize,
    pub gt_count: usize,
    pub sls: StageCounts,
    pub cnn: StageCounts,
    pub nms: StageCounts,
    pub metrics: PrfMetrics,
    pub ap: f64,
    pub bags_total: usize,
    pub bags_rejected: usize,
    pub direction_errors_deg: Vec<f64>,
    /// Final detections on this fold's held-out images.
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone)]
pub struct CvReport {
    pub folds: Vec<FoldReport>,
    pub total: FoldReport,
    /// Pooled PR points over every fold's detections.
    pub pr_points: Vec<(f64, f64)>,
}

/// Median of an unsorted sample.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

struct ImageStage {
    instances: Vec<LabeledInstance>,
    bags: Vec<PositiveBag>,
}

/// Proposals, crops, and labels for every image; fold-independent, so it
/// runs once up front.
fn stage_images(
    dataset: &[DatasetImage],
    params: &PipelineParams,
) -> Result<Vec<ImageStage>, CvError> {
    let staged = par_map(dataset, |img| -> Result<ImageStage, LineDetectError> {
        let proposals = detect_and_propose(&img.image, &params.detector, &params.pairing)?;
        let (instances, bags) = build_instances(
            &img.image,
            &proposals,
            &img.gt,
            params.crop_size,
            params.model_input,
            &params.label,
        );
        Ok(ImageStage { instances, bags })
    });
    let mut out = Vec::with_capacity(dataset.len());
    for s in staged {
        out.push(s?);
    }
    Ok(out)
}

fn count_labels(instances: &[LabeledInstance], keep: impl Fn(usize) -> bool) -> (usize, usize, usize) {
    let mut pos = 0;
    let mut neg = 0;
    let mut ind = 0;
    for (i, inst) in instances.iter().enumerate() {
        if !keep(i) {
            continue;
        }
        match inst.label {
            1 => pos += 1,
            0 => neg += 1,
            _ => ind += 1,
        }
    }
    (pos, neg, ind)
}

/// Boxes claimed by at least one positive-labeled instance among `keep`.
fn boxes_hit(
    instances: &[LabeledInstance],
    gt_count: usize,
    keep: impl Fn(usize) -> bool,
) -> usize {
    let mut hit = vec![false; gt_count];
    for (i, inst) in instances.iter().enumerate() {
        if keep(i) && inst.label == 1 {
            if let Some(g) = inst.gt_index {
                hit[g] = true;
            }
        }
    }
    hit.iter().filter(|&&h| h).count()
}

/// Train one model per fold on the out-of-fold images and evaluate each
/// on its held-out images, reporting per-stage counts, final metrics,
/// average precision, bag-rejection rate, and direction errors.
pub fn run_cross_validation(
    dataset: &[DatasetImage],
    params: &PipelineParams,
) -> Result<CvReport, CvError> {
    let ids: Vec<String> = dataset.iter().map(|d| d.image_id.clone()).collect();
    let split = split_folds(&ids, params.k_folds, params.seed)?;
    let staged = stage_images(dataset, params)?;

    let fold_results: Vec<Result<FoldReport, CvError>> =
        par_map_indexed(&(0..params.k_folds).collect::<Vec<_>>(), |_, &fold| {
            run_fold(fold, dataset, &staged, &split, params)
        });

    let mut folds = Vec::with_capacity(params.k_folds);
    let mut all_dets: Vec<Detection> = Vec::new();
    for res in fold_results {
        let fr = res?;
        folds.push(fr);
    }
    // pooled AP over the union of all held-out detections
    let mut gts_by_image: BTreeMap<String, Vec<Aabb>> = BTreeMap::new();
    for d in dataset {
        gts_by_image.insert(d.image_id.clone(), d.gt.boxes.clone());
    }
    for fr in &folds {
        all_dets.extend(fr.detections.iter().cloned());
    }
    // total row: sum the counts, recompute the metrics
    let mut total = FoldReport::empty(usize::MAX);
    for fr in &folds {
        total.image_count += fr.image_count;
        total.gt_count += fr.gt_count;
        total.sls.add(&fr.sls);
        total.cnn.add(&fr.cnn);
        total.nms.add(&fr.nms);
        total.bags_total += fr.bags_total;
        total.bags_rejected += fr.bags_rejected;
        total.direction_errors_deg.extend_from_slice(&fr.direction_errors_deg);
    }
    total.metrics = prf(total.nms.tp, total.nms.fn_, total.nms.fp);
    let pooled = average_precision(&all_dets, &gts_by_image, params.match_iou);
    total.ap = pooled.ap;
    Ok(CvReport { folds, total, pr_points: pooled.points })
}

impl FoldReport {
    fn empty(fold: usize) -> Self {
        Self {
            fold,
            image_count: 0,
            gt_count: 0,
            sls: StageCounts::default(),
            cnn: StageCounts::default(),
            nms: StageCounts::default(),
            metrics: PrfMetrics { recall: None, precision: None, f1: None },
            ap: 0.0,
            bags_total: 0,
            bags_rejected: 0,
            direction_errors_deg: Vec::new(),
            detections: Vec::new(),
        }
    }
}

fn run_fold(
    fold: usize,
    dataset: &[DatasetImage],
    staged: &[ImageStage],
    split: &crate::bagging::FoldSplit,
    params: &PipelineParams,
) -> Result<FoldReport, CvError> {
    // assemble the training pool from out-of-fold images
    let mut patches = Vec::new();
    let mut bags: Vec<Vec<usize>> = Vec::new();
    let mut negatives: Vec<usize> = Vec::new();
    for (img, stage) in dataset.iter().zip(staged) {
        if split.fold_of(&img.image_id) == Some(fold) {
            continue;
        }
        let base = patches.len();
        for inst in &stage.instances {
            patches.push(&inst.patch);
        }
        for (i, inst) in stage.instances.iter().enumerate() {
            if inst.label == 0 {
                negatives.push(base + i);
            }
        }
        for bag in &stage.bags {
            bags.push(bag.instance_indices.iter().map(|&i| base + i).collect());
        }
    }
    let geometry = Geometry {
        height: params.model_input,
        width: params.model_input,
        channels: dataset.first().map_or(3, |d| d.image.channels()),
    };
    let model_seed = params.seed ^ (fold as u64).wrapping_mul(0x9e37_79b9);
    let mut model = ScorerModel::reference(geometry, model_seed);
    let mut optimizer = OptimizerState::new(model.param_count(), params.schedule.learning_rate);
    let schedule = TrainSchedule { seed: model_seed, ..params.schedule.clone() };
    let set = TrainSet { patches, bags, negatives };
    train(&mut model, &mut optimizer, &set, &schedule)
        .map_err(|source| CvError::Training { fold, source })?;

    // evaluate on the held-out images
    let mut report = FoldReport::empty(fold);
    for (img, stage) in dataset.iter().zip(staged) {
        if split.fold_of(&img.image_id) != Some(fold) {
            continue;
        }
        report.image_count += 1;
        report.gt_count += img.gt.boxes.len();
        let scores: Vec<f64> = par_map(&stage.instances, |inst| {
            model.forward(&inst.patch).expect("instance patches match the model input")
        });

        let (pos, neg, ind) = count_labels(&stage.instances, |_| true);
        let tp_sls = boxes_hit(&stage.instances, img.gt.boxes.len(), |_| true);
        report.sls.add(&StageCounts {
            pos,
            neg,
            ind,
            tp: tp_sls,
            fn_: img.gt.boxes.len() - tp_sls,
            fp: stage.instances.len() - tp_sls,
        });

        let surviving = |i: usize| scores[i] >= params.score_threshold;
        let (pos, neg, ind) = count_labels(&stage.instances, surviving);
        let survivors = (0..stage.instances.len()).filter(|&i| surviving(i)).count();
        let tp_cnn = boxes_hit(&stage.instances, img.gt.boxes.len(), surviving);
        report.cnn.add(&StageCounts {
            pos,
            neg,
            ind,
            tp: tp_cnn,
            fn_: img.gt.boxes.len() - tp_cnn,
            fp: survivors - tp_cnn,
        });

        report.bags_total += stage.bags.len();
        report.bags_rejected += stage
            .bags
            .iter()
            .filter(|bag| !bag.instance_indices.iter().any(|&i| surviving(i)))
            .count();

        let scored: Vec<(crate::geom::OrientedSquare, f64)> = stage
            .instances
            .iter()
            .zip(&scores)
            .map(|(inst, &s)| (inst.proposal.square, s))
            .collect();
        let dets = nms(&scored, params.nms_iou, params.score_threshold, &img.image_id);
        // map each kept detection back to its source instance by exact values
        let kept_labels: Vec<i8> = dets
            .iter()
            .map(|d| {
                scored
                    .iter()
                    .position(|(sq, s)| {
                        s.to_bits() == d.score.to_bits()
                            && sq.center.x.to_bits() == d.square.center.x.to_bits()
                            && sq.center.y.to_bits() == d.square.center.y.to_bits()
                            && sq.side.to_bits() == d.square.side.to_bits()
                    })
                    .map(|i| stage.instances[i].label)
                    .unwrap_or(0)
            })
            .collect();
        let (mut pos, mut neg, mut ind) = (0, 0, 0);
        for &l in &kept_labels {
            match l {
                1 => pos += 1,
                0 => neg += 1,
                _ => ind += 1,
            }
        }
        let matched = match_detections(&dets, &img.gt.boxes, params.match_iou);
        report.nms.add(&StageCounts {
            pos,
            neg,
            ind,
            tp: matched.tp,
            fn_: matched.fn_,
            fp: matched.fp,
        });
        if let Some(axes) = &img.axes {
            for (di, claimed) in matched.det_matched.iter().enumerate() {
                if let Some(gi) = claimed {
                    if let Some(axis) = axes.iter().find(|a| a.gt_index == *gi) {
                        report
                            .direction_errors_deg
                            .push(direction_error(dets[di].direction, axis.axis));
                    }
                }
            }
        }
        report.detections.extend(dets);
    }
    report.metrics = prf(report.nms.tp, report.nms.fn_, report.nms.fp);
    let mut gts_by_image: BTreeMap<String, Vec<Aabb>> = BTreeMap::new();
    for img in dataset {
        if split.fold_of(&img.image_id) == Some(fold) {
            gts_by_image.insert(img.image_id.clone(), img.gt.boxes.clone());
        }
    }
    report.ap = average_precision(&report.detections, &gts_by_image, params.match_iou).ap;
    Ok(report)
}

/// Render the fold table as aligned human-readable text.
pub fn render_text(report: &CvReport) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<6} {:<5} {:>8} {:>8} {:>7} {:>5} {:>5} {:>8} {:>7} {:>9} {:>7} {:>7}",
        "fold", "stage", "pos", "neg", "ind", "tp", "fn", "fp", "recall", "precision", "f1", "ap"
    );
    let fmt_opt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3}"));
    let mut row = |name: &str, stage: &str, c: &StageCounts, m: Option<&PrfMetrics>, ap: Option<f64>| {
        let _ = writeln!(
            out,
            "{:<6} {:<5} {:>8} {:>8} {:>7} {:>5} {:>5} {:>8} {:>7} {:>9} {:>7} {:>7}",
            name,
            stage,
            c.pos,
            c.neg,
            c.ind,
            c.tp,
            c.fn_,
            c.fp,
            m.map_or("-".into(), |m| fmt_opt(m.recall)),
            m.map_or("-".into(), |m| fmt_opt(m.precision)),
            m.map_or("-".into(), |m| fmt_opt(m.f1)),
            ap.map_or("-".into(), |a| format!("{a:.3}")),
        );
    };
    for fr in &report.folds {
        let name = format!("{}", fr.fold);
        row(&name, "sls", &fr.sls, None, None);
        row(&name, "cnn", &fr.cnn, None, None);
        row(&name, "nms", &fr.nms, Some(&fr.metrics), Some(fr.ap));
    }
    row("total", "sls", &report.total.sls, None, None);
    row("total", "cnn", &report.total.cnn, None, None);
    row("total", "nms", &report.total.nms, Some(&report.total.metrics), Some(report.total.ap));
    let _ = writeln!(out);
    let _ = writeln!(
        out,
        "bags: {} total, {} rejected at the scorer ({:.2}%)",
        report.total.bags_total,
        report.total.bags_rejected,
        100.0 * report.total.bags_rejected as f64 / report.total.bags_total.max(1) as f64,
    );
    if let Some(med) = median(&report.total.direction_errors_deg) {
        let _ = writeln!(
            out,
            "direction error (deg): median {:.2} over {} matched detections",
            med,
            report.total.direction_errors_deg.len(),
        );
    }
    let _ = writeln!(out, "ap convention: all-points precision envelope");
    out
}

/// Machine-readable line-delimited form: one `fold stage ...` record per
/// stage, tab-separated, then summary records.
pub fn render_records(report: &CvReport) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let fmt_opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x}"));
    let mut row = |name: &str, stage: &str, c: &StageCounts, m: Option<&PrfMetrics>, ap: Option<f64>| {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            name,
            stage,
            c.pos,
            c.neg,
            c.ind,
            c.tp,
            c.fn_,
            c.fp,
            m.map_or("nan".into(), |m| fmt_opt(m.recall)),
            m.map_or("nan".into(), |m| fmt_opt(m.precision)),
            m.map_or("nan".into(), |m| fmt_opt(m.f1)),
            ap.map_or("nan".into(), |a| format!("{a}")),
        );
    };
    for fr in &report.folds {
        let name = format!("{}", fr.fold);
        row(&name, "sls", &fr.sls, None, None);
        row(&name, "cnn", &fr.cnn, None, None);
        row(&name, "nms", &fr.nms, Some(&fr.metrics), Some(fr.ap));
    }
    row("total", "sls", &report.total.sls, None, None);
    row("total", "cnn", &report.total.cnn, None, None);
    row("total", "nms", &report.total.nms, Some(&report.total.metrics), Some(report.total.ap));
    let _ = writeln!(
        out,
        "bags\t{}\t{}",
        report.total.bags_total, report.total.bags_rejected
    );
    if let Some(med) = median(&report.total.direction_errors_deg) {
        let _ = writeln!(
            out,
            "direction_median_deg\t{med}\t{}",
            report.total.direction_errors_deg.len()
        );
    }
    out
}

/// Two-column PR points for external plotting.
pub fn render_pr_points(report: &CvReport) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    for (r, p) in &report.pr_points {
        let _ = writeln!(out, "{r}\t{p}");
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geom::{OrientedSquare, Point2};

    fn det(cx: f64, cy: f64, side: f64, score: f64, image_id: &str) -> Detection {
        let square = OrientedSquare::new(Point2::new(cx, cy), side, 0.0);
        Detection { square, score, image_id: image_id.to_string(), direction: 0.0 }
    }

    fn unit_box(cx: f64, cy: f64, side: f64) -> Aabb {
        Aabb::new(cx - side / 2.0, cy - side / 2.0, cx + side / 2.0, cy + side / 2.0)
    }

    #[test]
    fn double_detection_counts_one_tp_one_fp() {
        let gts = vec![unit_box(5.0, 5.0, 10.0)];
        let dets = vec![det(5.0, 5.0, 10.0, 0.9, "a"), det(6.0, 5.0, 10.0, 0.8, "a")];
        let m = match_detections(&dets, &gts, 0.4);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
        assert_eq!(m.det_matched, vec![Some(0), None]);
    }

    #[test]
    fn no_detections_all_missed() {
        let gts = vec![unit_box(5.0, 5.0, 4.0), unit_box(20.0, 20.0, 4.0)];
        let m = match_detections(&[], &gts, 0.4);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 2));
    }

    #[test]
    fn perfect_detections_all_matched() {
        let gts: Vec<Aabb> =
            (0..3).map(|i| unit_box(10.0 + 20.0 * i as f64, 10.0, 8.0)).collect();
        let dets: Vec<Detection> =
            (0..3).map(|i| det(10.0 + 20.0 * i as f64, 10.0, 8.0, 0.9, "a")).collect();
        let m = match_detections(&dets, &gts, 0.4);
        assert_eq!((m.tp, m.fp, m.fn_), (3, 0, 0));
        // accounting identities
        assert_eq!(m.tp + m.fn_, gts.len());
        assert_eq!(m.tp + m.fp, dets.len());
    }

    #[test]
    fn prf_reference_values() {
        let m = prf(744, 13, 8);
        assert!((m.recall.unwrap() - 0.983).abs() < 0.001);
        assert!((m.precision.unwrap() - 0.989).abs() < 0.001);
        assert!((m.f1.unwrap() - 0.986).abs() < 0.001);
    }

    #[test]
    fn prf_undefined_denominators() {
        let m = prf(0, 5, 0);
        assert_eq!(m.recall, Some(0.0));
        assert_eq!(m.precision, None);
        assert_eq!(m.f1, None);
        let perfect = prf(7, 0, 0);
        assert_eq!(perfect.recall, Some(1.0));
        assert_eq!(perfect.precision, Some(1.0));
        assert_eq!(perfect.f1, Some(1.0));
    }

    #[test]
    fn ap_all_correct_is_one() {
        let gts: BTreeMap<String, Vec<Aabb>> =
            [("a".to_string(), vec![unit_box(5.0, 5.0, 8.0), unit_box(25.0, 5.0, 8.0)])]
                .into_iter()
                .collect();
        let dets = vec![det(5.0, 5.0, 8.0, 0.3, "a"), det(25.0, 5.0, 8.0, 0.9, "a")];
        let curve = average_precision(&dets, &gts, 0.4);
        assert!((curve.ap - 1.0).abs() < 1e-12, "ap {}", curve.ap);
    }

    #[test]
    fn ap_alternating_ranks() {
        // ranks: TP, FP, TP, FP over 2 ground truths
        let gts: BTreeMap<String, Vec<Aabb>> =
            [("a".to_string(), vec![unit_box(5.0, 5.0, 8.0), unit_box(25.0, 5.0, 8.0)])]
                .into_iter()
                .collect();
        let dets = vec![
            det(5.0, 5.0, 8.0, 0.9, "a"),
            det(50.0, 50.0, 8.0, 0.8, "a"),
            det(25.0, 5.0, 8.0, 0.7, "a"),
            det(70.0, 50.0, 8.0, 0.6, "a"),
        ];
        let curve = average_precision(&dets, &gts, 0.4);
        let expect = (1.0 + 2.0 / 3.0) / 2.0;
        assert!((curve.ap - expect).abs() < 1e-9, "ap {} vs {expect}", curve.ap);
        // recall is nondecreasing along the sweep
        for w in curve.points.windows(2) {
            assert!(w[1].0 >= w[0].0);
        }
    }

    #[test]
    fn ap_no_correct_detections_is_zero() {
        let gts: BTreeMap<String, Vec<Aabb>> =
            [("a".to_string(), vec![unit_box(5.0, 5.0, 8.0)])].into_iter().collect();
        let dets = vec![det(50.0, 50.0, 8.0, 0.9, "a")];
        assert_eq!(average_precision(&dets, &gts, 0.4).ap, 0.0);
    }

    /// Brute-force AP: evaluate precision/recall at every threshold by
    /// re-running the matcher from scratch, then integrate the envelope.
    fn ap_brute(dets: &[Detection], gts: &BTreeMap<String, Vec<Aabb>>, thr: f64) -> f64 {
        let total_gt: usize = gts.values().map(|v| v.len()).sum();
        if total_gt == 0 {
            return 0.0;
        }
        let mut scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
        scores.sort_by(f64::total_cmp);
        scores.dedup();
        scores.reverse();
        let mut points = Vec::new();
        for &cut in &scores {
            let mut tp = 0;
            let mut fp = 0;
            for (id, boxes) in gts {
                let subset: Vec<Detection> = dets
                    .iter()
                    .filter(|d| d.score >= cut && &d.image_id == id)
                    .cloned()
                    .collect();
                let m = match_detections(&subset, boxes, thr);
                tp += m.tp;
                fp += m.fp;
            }
            // detections on images without ground truth are all false
            let known: usize = dets
                .iter()
                .filter(|d| d.score >= cut && gts.contains_key(&d.image_id))
                .count();
            let orphans =
                dets.iter().filter(|d| d.score >= cut).count() - known;
            fp += orphans;
            points.push((tp as f64 / total_gt as f64, tp as f64 / (tp + fp).max(1) as f64));
        }
        envelope_area(&points)
    }

    #[test]
    fn ap_matches_brute_force_on_random_lists() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for trial in 0..30 {
            let gts: BTreeMap<String, Vec<Aabb>> = (0..3)
                .map(|i| {
                    let boxes: Vec<Aabb> = (0..rng.random_range(1..4))
                        .map(|j| unit_box(10.0 + 25.0 * j as f64, 10.0 + 3.0 * i as f64, 8.0))
                        .collect();
                    (format!("img{i}"), boxes)
                })
                .collect();
            let dets: Vec<Detection> = (0..rng.random_range(1..50))
                .map(|_| {
                    let img = rng.random_range(0..3);
                    det(
                        rng.random_range(5.0..70.0),
                        rng.random_range(5.0..20.0),
                        8.0,
                        // quantized scores force ties across detections
                        (rng.random_range(0..20) as f64) / 20.0,
                        &format!("img{img}"),
                    )
                })
                .collect();
            let fast = average_precision(&dets, &gts, 0.4).ap;
            let brute = ap_brute(&dets, &gts, 0.4);
            assert!(
                (fast - brute).abs() < 1e-9,
                "trial {trial}: sweep {fast} vs brute {brute}"
            );
        }
    }

    #[test]
    fn direction_error_cases() {
        assert_eq!(direction_error(1.0, 1.0), 0.0);
        assert!((direction_error(1.0 + std::f64::consts::PI, 1.0)).abs() < 1e-9);
        let third = direction_error(1.0 + std::f64::consts::FRAC_PI_3, 1.0);
        assert!((third - 60.0).abs() < 1e-9, "got {third}");
        let quarter = direction_error(0.3 + std::f64::consts::FRAC_PI_2, 0.3);
        assert!((quarter - 90.0).abs() < 1e-9);
        for k in -10..10 {
            let e = direction_error(0.1 * k as f64, -0.4);
            assert!((0.0..=90.0).contains(&e));
        }
    }

    #[test]
    fn median_of_samples() {
        assert_eq!(median(&[]), None);
        assert_eq!(median(&[3.0]), Some(3.0));
        assert_eq!(median(&[5.0, 1.0, 3.0]), Some(3.0));
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]), Some(2.5));
    }
}
