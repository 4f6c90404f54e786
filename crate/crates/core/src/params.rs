//! Every pipeline tunable in one place, with the defaults the stages
//! were designed around. The CLI layers its config file and flags on top
//! of this struct.

use crate::bagging::LabelParams;
use crate::linedet::DetectorParams;
use crate::net::TrainSchedule;
use crate::slsgen::PairingParams;

#[derive(Debug, Clone)]
pub struct PipelineParams {
    pub detector: DetectorParams,
    pub pairing: PairingParams,
    pub label: LabelParams,
    /// Side of the resampled proposal crop, pixels.
    pub crop_size: usize,
    /// Scorer input side; the crop is block-averaged down to this.
    pub model_input: usize,
    pub schedule: TrainSchedule,
    /// Overlap beyond which a lower-scored detection is suppressed.
    pub nms_iou: f64,
    /// Minimum score for a proposal to count as a detection.
    pub score_threshold: f64,
    /// Overlap for matching detections to ground truth in evaluation.
    pub match_iou: f64,
    pub k_folds: usize,
    pub seed: u64,
}

impl Default for PipelineParams {
    fn default() -> Self {
        Self {
            detector: DetectorParams::default(),
            pairing: PairingParams::default(),
            label: LabelParams::default(),
            crop_size: 128,
            model_input: 32,
            schedule: TrainSchedule::default(),
            nms_iou: 0.4,
            score_threshold: 0.5,
            match_iou: 0.4,
            k_folds: 3,
            seed: 0,
        }
    }
}
