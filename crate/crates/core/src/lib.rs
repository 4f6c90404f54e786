//! Rotation-and-scale invariant object detection built on symmetric line
//! segment proposals.
//!
//! The pipeline runs in stages:
//!
//! 1. **linedet** - oriented line segments from per-channel gradient
//!    region growing.
//! 2. **slsgen** - endpoint-proximity pairing, mirror-symmetry scoring,
//!    and oriented-square proposals from the surviving pairs.
//! 3. **bagging** - rotated crops, IoU labeling against ground truth,
//!    positive bags, and image-level fold splits.
//! 4. **net** - a small probabilistic scorer with exact analytic
//!    gradients, trained by alternating negative batches with positive
//!    bags under a min-loss gate.
//! 5. **postproc** - scoring and greedy non-maximum suppression over
//!    oriented squares.
//! 6. **evalkit** - matching, precision/recall/F1, average precision,
//!    direction error, and k-fold cross-validation reports.
//!
//! `synthgen` renders symmetric silhouettes with exact ground truth so
//! the whole pipeline can be exercised end to end without external data.
//! `geom` holds the shared exact polygon machinery.

pub mod bagging;
pub mod evalkit;
pub mod geom;
pub mod linedet;
pub mod net;
mod par;
pub mod params;
pub mod postproc;
pub mod raster;
pub mod slsgen;
pub mod synthgen;
