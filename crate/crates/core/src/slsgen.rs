//! Proposal generation from symmetric segment pairs.
//!
//! Detected segments are paired by endpoint proximity, scored by how well
//! one mirrors the other across their common axis, gated on that score,
//! and turned into oriented square crop regions.
//!
//! For a pair (s1, s2) with endpoints p11->p12 and p21->p22, the symmetry
//! axis passes through the midpoints (p11+p22)/2 and (p12+p21)/2. The
//! score is the total displacement of the mirrored endpoints q22, q21
//! from p11, p12, normalized by the cross-endpoint distances:
//!
//! ```text
//! sym = (|p11 - q22| + |p12 - q21|) / (|p11 - p22| + |p12 - p21|)
//! ```
//!
//! A perfect mirror pair scores 0. The score is invariant under
//! translation, rotation, and uniform scaling of both segments.

use std::io::{BufRead, Write};

use thiserror::Error;

use crate::geom::{reflect_point, GeomError, OrientedSegment, OrientedSquare, Point2};
use crate::par::par_map;

/// Minimum separation of the two axis-defining midpoints.
const AXIS_MIDPOINT_EPS: f64 = 1e-6;

/// Tunables for pair selection and the symmetry gate.
#[derive(Debug, Clone)]
pub struct PairingParams {
    /// Endpoint proximity limit as a multiple of the longer segment.
    pub endpoint_distance_factor: f64,
    /// Pairs scoring below this are retained.
    pub sym_threshold: f64,
    /// Minimum pair span (largest cross-endpoint distance), pixels.
    pub min_pair_span: f64,
    /// Maximum pair span, pixels.
    pub max_pair_span: f64,
}

impl Default for PairingParams {
    fn default() -> Self {
        Self {
            endpoint_distance_factor: 2.0,
            sym_threshold: 0.3,
            min_pair_span: 10.0,
            max_pair_span: 400.0,
        }
    }
}

/// A retained symmetric pair with its derived crop square.
#[derive(Debug, Clone)]
pub struct SlsProposal {
    pub seg1: OrientedSegment,
    pub seg2: OrientedSegment,
    pub sym: f64,
    pub square: OrientedSquare,
    pub channel: u8,
}

/// Largest distance between an endpoint of one segment and an endpoint of
/// the other; the scale of the prospective crop.
pub fn pair_span(s1: &OrientedSegment, s2: &OrientedSegment) -> f64 {
    s1.a.dist(s2.a)
        .max(s1.a.dist(s2.b))
        .max(s1.b.dist(s2.a))
        .max(s1.b.dist(s2.b))
}

fn closest_endpoint_distance(s1: &OrientedSegment, s2: &OrientedSegment) -> f64 {
    s1.a.dist(s2.a)
        .min(s1.a.dist(s2.b))
        .min(s1.b.dist(s2.a))
        .min(s1.b.dist(s2.b))
}

/// Unordered candidate pairs (i < j): some endpoint of one segment lies
/// within `endpoint_distance_factor` times the longer segment's length of
/// an endpoint of the other, and the pair span is inside the configured
/// range. Segments must come from the same channel.
pub fn candidate_pairs(segments: &[OrientedSegment], params: &PairingParams) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for i in 0..segments.len() {
        for j in (i + 1)..segments.len() {
            let s1 = &segments[i];
            let s2 = &segments[j];
            let limit = params.endpoint_distance_factor * s1.length().max(s2.length());
            if closest_endpoint_distance(s1, s2) > limit {
                continue;
            }
            let span = pair_span(s1, s2);
            if span < params.min_pair_span || span > params.max_pair_span {
                continue;
            }
            pairs.push((i, j));
        }
    }
    pairs
}

/// Mirror-symmetry score of a directed pair; 0 means a perfect mirror.
///
/// Errors with `DegenerateAxis` when the two axis midpoints coincide
/// (a point-symmetric configuration the pipeline rejects).
pub fn symmetry_score(s1: &OrientedSegment, s2: &OrientedSegment) -> Result<f64, GeomError> {
    let p11 = s1.a;
    let p12 = s1.b;
    let p21 = s2.a;
    let p22 = s2.b;
    let m1 = (p11 + p22) * 0.5;
    let m2 = (p12 + p21) * 0.5;
    if m1.dist(m2) < AXIS_MIDPOINT_EPS {
        return Err(GeomError::DegenerateAxis);
    }
    let q22 = reflect_point(p22, m1, m2)?;
    let q21 = reflect_point(p21, m1, m2)?;
    let num = p11.dist(q22) + p12.dist(q21);
    let den = p11.dist(p22) + p12.dist(p21);
    Ok(num / den)
}

/// Oriented crop square for a pair: center at the endpoint mean, side 1.5x
/// the largest cross-endpoint distance, theta along the symmetry axis
/// (from the first midpoint toward the second).
pub fn make_square(s1: &OrientedSegment, s2: &OrientedSegment) -> OrientedSquare {
    let p11 = s1.a;
    let p12 = s1.b;
    let p21 = s2.a;
    let p22 = s2.b;
    let center = (p11 + p12 + p21 + p22) * 0.25;
    let side = 1.5 * pair_span(s1, s2);
    let theta = (p12.y + p21.y - p11.y - p22.y).atan2(p12.x + p21.x - p11.x - p22.x);
    OrientedSquare::new(center, side, theta)
}

/// Mirror-correspondence gate. Under the detector's contrast convention
/// the second segment of a true mirror pair traverses as the reversed
/// reflection of the first, so the reflection of its direction across
/// the pair's axis must oppose the first direction. The test value is
/// exactly +1 for a perfect mirror correspondence and -1 for a parallel
/// (translated) one, for edges at any angle to the axis.
fn directions_compatible(s1: &OrientedSegment, s2: &OrientedSegment) -> bool {
    let m1 = (s1.a + s2.b) * 0.5;
    let m2 = (s1.b + s2.a) * 0.5;
    if m1.dist(m2) < AXIS_MIDPOINT_EPS {
        return false;
    }
    let u = (m2 - m1).normalized();
    let d1 = s1.direction();
    let d2 = s2.direction();
    d1.dot(d2) - 2.0 * d1.dot(u) * d2.dot(u) > 0.0
}

/// Generate retained proposals for segments grouped by channel.
///
/// Output order is deterministic: by channel, then by (i, j) pair index.
pub fn generate_proposals(
    segments_by_channel: &[Vec<OrientedSegment>],
    params: &PairingParams,
) -> Vec<SlsProposal> {
    let per_channel = par_map(segments_by_channel, |segments| {
        let mut proposals = Vec::new();
        for (i, j) in candidate_pairs(segments, params) {
            let s1 = &segments[i];
            let s2 = &segments[j];
            if !directions_compatible(s1, s2) {
                continue;
            }
            let Ok(sym) = symmetry_score(s1, s2) else {
                continue;
            };
            if sym < params.sym_threshold {
                proposals.push(SlsProposal {
                    seg1: *s1,
                    seg2: *s2,
                    sym,
                    square: make_square(s1, s2),
                    channel: s1.channel,
                });
            }
        }
        proposals
    });
    per_channel.into_iter().flatten().collect()
}

/// Detect segments on every channel and turn them into proposals in one
/// call; the per-image entry point shared by the CLI and evaluation.
pub fn detect_and_propose(
    image: &crate::raster::PlanarImage,
    detector: &crate::linedet::DetectorParams,
    pairing: &PairingParams,
) -> Result<Vec<SlsProposal>, crate::linedet::LineDetectError> {
    let segments = crate::linedet::detect_all_channels(image.planes(), detector)?;
    Ok(generate_proposals(&group_by_channel(&segments), pairing))
}

/// Group a flat channel-tagged segment list for `generate_proposals`.
pub fn group_by_channel(segments: &[OrientedSegment]) -> Vec<Vec<OrientedSegment>> {
    let max_channel = segments.iter().map(|s| s.channel).max().map_or(0, |c| c as usize + 1);
    let mut groups = vec![Vec::new(); max_channel];
    for s in segments {
        groups[s.channel as usize].push(*s);
    }
    groups
}

#[derive(Debug, Error)]
pub enum ProposalIoError {
    #[error("i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Write proposal records, one tab-separated line each:
/// `image_id  channel  x11 y11 x12 y12 x21 y21 x22 y22  sym  cx cy side theta`.
pub fn write_proposals<W: Write>(
    out: &mut W,
    records: &[(String, SlsProposal)],
) -> Result<(), ProposalIoError> {
    for (image_id, p) in records {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            image_id,
            p.channel,
            p.seg1.a.x,
            p.seg1.a.y,
            p.seg1.b.x,
            p.seg1.b.y,
            p.seg2.a.x,
            p.seg2.a.y,
            p.seg2.b.x,
            p.seg2.b.y,
            p.sym,
            p.square.center.x,
            p.square.center.y,
            p.square.side,
            p.square.theta,
        )?;
    }
    Ok(())
}

/// Read proposal records written by [`write_proposals`].
pub fn read_proposals<R: BufRead>(input: R) -> Result<Vec<(String, SlsProposal)>, ProposalIoError> {
    let mut records = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 15 {
            return Err(ProposalIoError::Parse {
                line: lineno + 1,
                reason: format!("expected 15 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse = |idx: usize| -> Result<f64, ProposalIoError> {
            fields[idx].parse::<f64>().map_err(|e| ProposalIoError::Parse {
                line: lineno + 1,
                reason: format!("field {}: {}", idx + 1, e),
            })
        };
        let channel: u8 = fields[1].parse().map_err(|e| ProposalIoError::Parse {
            line: lineno + 1,
            reason: format!("channel: {e}"),
        })?;
        let seg1 = OrientedSegment::new(
            Point2::new(parse(2)?, parse(3)?),
            Point2::new(parse(4)?, parse(5)?),
            channel,
        );
        let seg2 = OrientedSegment::new(
            Point2::new(parse(6)?, parse(7)?),
            Point2::new(parse(8)?, parse(9)?),
            channel,
        );
        let proposal = SlsProposal {
            seg1,
            seg2,
            sym: parse(10)?,
            square: OrientedSquare::new(
                Point2::new(parse(11)?, parse(12)?),
                parse(13)?,
                parse(14)?,
            ),
            channel,
        };
        records.push((fields[0].to_string(), proposal));
    }
    Ok(records)
}
