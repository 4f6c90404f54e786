//! Instance assembly: rotated crops, IoU labeling against ground-truth
//! boxes, positive bag formation, and image-level fold splits.
//!
//! Labels: `+1` when the proposal square overlaps some ground-truth box
//! with IoU at or above the positive threshold, `0` when the best overlap
//! is below the negative threshold, `-1` in between. Indeterminate
//! instances take no part in training. Every positive instance joins the
//! bag of its best-overlapping box.

use std::collections::BTreeMap;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::geom::{iou, Aabb, OrientedSquare};
use crate::par::par_map;
use crate::raster::PlanarImage;
use crate::slsgen::SlsProposal;

#[derive(Debug, Error)]
pub enum BaggingError {
    #[error("crop center ({x:.1}, {y:.1}) lies outside the {width}x{height} image")]
    CenterOutsideImage { x: f64, y: f64, width: usize, height: usize },
    #[error("need at least k={k} images for {k}-fold splitting, got {got}")]
    TooFewImages { k: usize, got: usize },
    #[error("annotation line {line}: {reason}")]
    AnnotationParse { line: usize, reason: String },
}

/// IoU intervals for instance labeling.
#[derive(Debug, Clone)]
pub struct LabelParams {
    pub pos_iou: f64,
    pub neg_iou: f64,
}

impl Default for LabelParams {
    fn default() -> Self {
        Self { pos_iou: 0.4, neg_iou: 0.2 }
    }
}

/// Ground truth boxes for one image (single class).
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub image_id: String,
    pub boxes: Vec<Aabb>,
}

/// Fixed-size multi-channel crop, plane-major (`[channel][row][col]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub size: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Patch {
    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.size + y) * self.size + x]
    }
}

/// A proposal with its crop, label, and bag assignment.
#[derive(Debug, Clone)]
pub struct LabeledInstance {
    pub proposal: SlsProposal,
    pub patch: Patch,
    pub label: i8,
    pub best_iou: f64,
    /// Index of the best-overlapping ground-truth box; present iff label is +1.
    pub gt_index: Option<usize>,
}

/// All positive instances sharing one ground-truth box, as indices into
/// the labeled instance list.
#[derive(Debug, Clone)]
pub struct PositiveBag {
    pub gt_index: usize,
    pub instance_indices: Vec<usize>,
}

/// Crop the oriented square out of the image, resampled to
/// `out_size` x `out_size` with bilinear interpolation. The square is
/// rotated so its axis (theta) runs vertically in the patch; reflecting
/// the patch left-right therefore corresponds to mirroring the scene
/// across the proposal's symmetry axis. Out-of-image samples are zero.
pub fn crop_patch(
    image: &PlanarImage,
    square: &OrientedSquare,
    out_size: usize,
) -> Result<Patch, BaggingError> {
    assert!(out_size >= 8, "crop size below 8 is not useful");
    let (w, h) = (image.width(), image.height());
    let c = square.center;
    if c.x < 0.0 || c.y < 0.0 || c.x >= w as f64 || c.y >= h as f64 {
        return Err(BaggingError::CenterOutsideImage { x: c.x, y: c.y, width: w, height: h });
    }
    let (sin_t, cos_t) = square.theta.sin_cos();
    let channels = image.channels();
    let mut data = vec![0.0f32; channels * out_size * out_size];
    for (ci, plane) in image.planes().iter().enumerate() {
        for row in 0..out_size {
            let v = (row as f64 + 0.5) / out_size as f64 - 0.5;
            for col in 0..out_size {
                let u = (col as f64 + 0.5) / out_size as f64 - 0.5;
                // proper rotation: u along (sin, -cos), v along (cos, sin)
                let x = c.x + square.side * (u * sin_t + v * cos_t);
                let y = c.y + square.side * (-u * cos_t + v * sin_t);
                data[(ci * out_size + row) * out_size + col] =
                    plane.sample_bilinear(x, y) as f32;
            }
        }
    }
    Ok(Patch { size: out_size, channels, data })
}

/// Average `factor` x `factor` blocks; `patch.size` must be divisible.
pub fn downsample_patch(patch: &Patch, factor: usize) -> Patch {
    assert!(factor >= 1 && patch.size % factor == 0, "bad downsample factor");
    if factor == 1 {
        return patch.clone();
    }
    let out = patch.size / factor;
    let mut data = vec![0.0f32; patch.channels * out * out];
    let norm = 1.0 / (factor * factor) as f32;
    for c in 0..patch.channels {
        for y in 0..out {
            for x in 0..out {
                let mut acc = 0.0f32;
                for sy in 0..factor {
                    for sx in 0..factor {
                        acc += patch.get(c, y * factor + sy, x * factor + sx);
                    }
                }
                data[(c * out + y) * out + x] = acc * norm;
            }
        }
    }
    Patch { size: out, channels: patch.channels, data }
}

/// Label cropped proposals against the ground truth and group the
/// positives into per-box bags. Ties on best IoU go to the lowest box
/// index, keeping bag assignment deterministic.
pub fn label_proposals(
    cropped: Vec<(SlsProposal, Patch)>,
    gt: &GroundTruth,
    params: &LabelParams,
) -> (Vec<LabeledInstance>, Vec<PositiveBag>) {
    let scored = par_map(&cropped, |(proposal, _)| {
        let mut best_iou = 0.0;
        let mut best_idx = None;
        for (gi, bx) in gt.boxes.iter().enumerate() {
            let v = iou(&proposal.square, bx);
            if v > best_iou {
                best_iou = v;
                best_idx = Some(gi);
            }
        }
        (best_iou, best_idx)
    });
    let mut instances = Vec::with_capacity(cropped.len());
    let mut bags: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for ((proposal, patch), (best_iou, best_idx)) in cropped.into_iter().zip(scored) {
        let label: i8 = if best_iou >= params.pos_iou {
            1
        } else if best_iou < params.neg_iou {
            0
        } else {
            -1
        };
        let gt_index = if label == 1 { best_idx } else { None };
        if label == 1 {
            bags.entry(gt_index.expect("positive label implies an overlapping box"))
                .or_default()
                .push(instances.len());
        }
        instances.push(LabeledInstance { proposal, patch, label, best_iou, gt_index });
    }
    let bags = bags
        .into_iter()
        .map(|(gt_index, instance_indices)| PositiveBag { gt_index, instance_indices })
        .collect();
    (instances, bags)
}

/// Crop, downsample to the scorer input size, and label, in one pass.
/// Proposals whose square center falls outside the image are dropped.
pub fn build_instances(
    image: &PlanarImage,
    proposals: &[SlsProposal],
    gt: &GroundTruth,
    crop_size: usize,
    model_input: usize,
    params: &LabelParams,
) -> (Vec<LabeledInstance>, Vec<PositiveBag>) {
    assert!(crop_size % model_input == 0, "crop size must be a multiple of the model input");
    let factor = crop_size / model_input;
    let cropped: Vec<Option<(SlsProposal, Patch)>> = par_map(proposals, |p| {
        crop_patch(image, &p.square, crop_size)
            .ok()
            .map(|patch| (p.clone(), downsample_patch(&patch, factor)))
    });
    label_proposals(cropped.into_iter().flatten().collect(), gt, params)
}

/// Image-level k-fold assignment.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    k: usize,
    assignment: BTreeMap<String, usize>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, image_id: &str) -> Option<usize> {
        self.assignment.get(image_id).copied()
    }

    pub fn ids_in_fold(&self, fold: usize) -> Vec<&str> {
        self.assignment.iter().filter(|(_, &f)| f == fold).map(|(id, _)| id.as_str()).collect()
    }

    pub fn assignment(&self) -> &BTreeMap<String, usize> {
        &self.assignment
    }
}

/// Deterministic balanced split: ids are sorted, shuffled with the seeded
/// generator, and dealt round-robin, so fold sizes differ by at most one.
pub fn split_folds(image_ids: &[String], k: usize, seed: u64) -> Result<FoldSplit, BaggingError> {
    if k < 2 || image_ids.len() < k {
        return Err(BaggingError::TooFewImages { k: k.max(2), got: image_ids.len() });
    }
    let mut ids: Vec<String> = image_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < k {
        return Err(BaggingError::TooFewImages { k, got: ids.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let assignment = ids.into_iter().enumerate().map(|(i, id)| (id, i % k)).collect();
    Ok(FoldSplit { k, assignment })
}

/// Parse box-level annotations: one `(x1,y1),(x2,y2),class` line per box,
/// integer pixel corners. Only class 1 is ingested; other classes are
/// ignored. Blank lines are skipped.
pub fn parse_ground_truth<R: BufRead>(
    input: R,
    image_id: &str,
) -> Result<GroundTruth, BaggingError> {
    let mut boxes = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line.map_err(|e| BaggingError::AnnotationParse {
            line: lineno + 1,
            reason: e.to_string(),
        })?;
        let compact: String = line.chars().filter(|c| !c.is_whitespace()).collect();
        if compact.is_empty() {
            continue;
        }
        let parse_err = |reason: &str| BaggingError::AnnotationParse {
            line: lineno + 1,
            reason: reason.to_string(),
        };
        let inner = compact.strip_prefix('(').ok_or_else(|| parse_err("expected '('"))?;
        let (p1, rest) = inner.split_once(')').ok_or_else(|| parse_err("expected ')'"))?;
        let rest = rest
            .strip_prefix(",(")
            .ok_or_else(|| parse_err("expected ',(' between corners"))?;
        let (p2, rest) = rest.split_once(')').ok_or_else(|| parse_err("expected ')'"))?;
        let class = rest.strip_prefix(',').ok_or_else(|| parse_err("expected ',class'"))?;
        let parse_pair = |s: &str| -> Result<(i64, i64), BaggingError> {
            let (a, b) = s.split_once(',').ok_or_else(|| parse_err("expected 'x,y'"))?;
            Ok((
                a.parse().map_err(|_| parse_err("bad x coordinate"))?,
                b.parse().map_err(|_| parse_err("bad y coordinate"))?,
            ))
        };
        let (x1, y1) = parse_pair(p1)?;
        let (x2, y2) = parse_pair(p2)?;
        let class: i64 = class.parse().map_err(|_| parse_err("bad class id"))?;
        if class != 1 {
            continue;
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(parse_err("box corners are not ordered"));
        }
        boxes.push(Aabb::new(x1 as f64, y1 as f64, x2 as f64, y2 as f64));
    }
    Ok(GroundTruth { image_id: image_id.to_string(), boxes })
}
