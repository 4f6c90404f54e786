//! Frozen-model scoring and greedy non-maximum suppression over oriented
//! squares.
//!
//! NMS repeatedly keeps the highest-scoring surviving candidate and
//! removes everything overlapping it beyond the IoU threshold, so the
//! kept set depends only on the score ordering, never on the score
//! magnitudes.

use std::io::{BufRead, Write};

use thiserror::Error;

use crate::bagging::Patch;
use crate::geom::{iou, OrientedSquare, Point2};
use crate::net::{NetError, ScorerModel};
use crate::par::par_map;

/// A final detection: the surviving square, its score, and the direction
/// estimate carried by the square's orientation.
#[derive(Debug, Clone)]
pub struct Detection {
    pub square: OrientedSquare,
    pub score: f64,
    pub image_id: String,
    pub direction: f64,
}

#[derive(Debug, Error)]
pub enum DetectionIoError {
    #[error("i/o failed: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

/// Score a batch of patches with a frozen model; output order matches
/// input order and each score equals the single-patch forward exactly.
pub fn score_patches(model: &ScorerModel, patches: &[Patch]) -> Result<Vec<f64>, NetError> {
    par_map(patches, |p| model.forward(p)).into_iter().collect()
}

/// Greedy NMS. Candidates below `score_threshold` are dropped first; the
/// output is sorted by descending score (ties keep input order) and no
/// two kept squares overlap beyond `iou_threshold`.
pub fn nms(
    scored: &[(OrientedSquare, f64)],
    iou_threshold: f64,
    score_threshold: f64,
    image_id: &str,
) -> Vec<Detection> {
    assert!((0.0..1.0).contains(&iou_threshold) && iou_threshold > 0.0);
    let mut order: Vec<usize> =
        (0..scored.len()).filter(|&i| scored[i].1 >= score_threshold).collect();
    order.sort_by(|&a, &b| scored[b].1.partial_cmp(&scored[a].1).unwrap().then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    let mut suppressed = vec![false; scored.len()];
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept.push(i);
        for &j in &order {
            if j != i && !suppressed[j] && iou(&scored[i].0, &scored[j].0) > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    let detections: Vec<Detection> = kept
        .into_iter()
        .map(|i| Detection {
            square: scored[i].0,
            score: scored[i].1,
            image_id: image_id.to_string(),
            direction: scored[i].0.theta,
        })
        .collect();
    // every survivor pair must respect the overlap bound
    for (a, da) in detections.iter().enumerate() {
        for db in detections.iter().skip(a + 1) {
            let overlap = iou(&da.square, &db.square);
            assert!(
                overlap <= iou_threshold,
                "suppression left overlapping detections (iou {overlap})"
            );
        }
    }
    detections
}

/// One tab-separated line per detection:
/// `image_id  cx  cy  side  theta_radians  score`.
pub fn write_detections<W: Write>(
    out: &mut W,
    detections: &[Detection],
) -> Result<(), DetectionIoError> {
    for d in detections {
        writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}",
            d.image_id, d.square.center.x, d.square.center.y, d.square.side, d.square.theta, d.score,
        )?;
    }
    Ok(())
}

/// Read detection records written by [`write_detections`].
pub fn read_detections<R: BufRead>(input: R) -> Result<Vec<Detection>, DetectionIoError> {
    let mut detections = Vec::new();
    for (lineno, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 6 {
            return Err(DetectionIoError::Parse {
                line: lineno + 1,
                reason: format!("expected 6 fields, got {}", fields.len()),
            });
        }
        let num = |idx: usize| -> Result<f64, DetectionIoError> {
            fields[idx].parse().map_err(|e| DetectionIoError::Parse {
                line: lineno + 1,
                reason: format!("field {}: {}", idx + 1, e),
            })
        };
        let square = OrientedSquare::new(Point2::new(num(1)?, num(2)?), num(3)?, num(4)?);
        detections.push(Detection {
            square,
            score: num(5)?,
            image_id: fields[0].to_string(),
            direction: square.theta,
        });
    }
    Ok(detections)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::Geometry;

    fn sq(cx: f64, cy: f64, side: f64) -> OrientedSquare {
        OrientedSquare::new(Point2::new(cx, cy), side, 0.0)
    }

    /// Straight transcription of the greedy definition, kept independent
    /// of the production path.
    fn nms_brute(scored: &[(OrientedSquare, f64)], iou_thr: f64, score_thr: f64) -> Vec<usize> {
        let mut alive: Vec<usize> =
            (0..scored.len()).filter(|&i| scored[i].1 >= score_thr).collect();
        let mut kept = Vec::new();
        while !alive.is_empty() {
            let best = *alive
                .iter()
                .min_by(|&&a, &&b| {
                    scored[b].1.partial_cmp(&scored[a].1).unwrap().then(a.cmp(&b))
                })
                .unwrap();
            kept.push(best);
            alive.retain(|&i| i != best && iou(&scored[i].0, &scored[best].0) <= iou_thr);
        }
        kept
    }

    #[test]
    fn hand_traced_case() {
        // B overlaps A beyond threshold; C overlaps both, but only mildly
        let a = sq(0.0, 0.0, 10.0);
        let b = sq(2.0, 0.0, 10.0); // iou(A,B) = 80/120 = 0.666 > 0.4
        let c = sq(9.0, 2.0, 10.0);
        assert!(iou(&a, &b) > 0.4);
        assert!(iou(&a, &c) > 0.0 && iou(&a, &c) < 0.4);
        assert!(iou(&b, &c) > 0.0 && iou(&b, &c) < 0.4);
        let scored = vec![(a, 0.9), (b, 0.8), (c, 0.7)];
        let kept = nms(&scored, 0.4, 0.5, "img");
        let scores: Vec<f64> = kept.iter().map(|d| d.score).collect();
        assert_eq!(scores, vec![0.9, 0.7], "A suppresses B, C survives");
    }

    #[test]
    fn single_candidate_survives() {
        let scored = vec![(sq(0.0, 0.0, 5.0), 0.75)];
        let kept = nms(&scored, 0.4, 0.5, "img");
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].direction, kept[0].square.theta);
    }

    #[test]
    fn below_threshold_dropped() {
        let scored = vec![(sq(0.0, 0.0, 5.0), 0.45)];
        assert!(nms(&scored, 0.4, 0.5, "img").is_empty());
    }

    #[test]
    fn matches_brute_force_on_random_input() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for trial in 0..200 {
            let n = rng.random_range(0..=10);
            let scored: Vec<(OrientedSquare, f64)> = (0..n)
                .map(|_| {
                    (
                        OrientedSquare::new(
                            Point2::new(rng.random_range(0.0..40.0), rng.random_range(0.0..40.0)),
                            rng.random_range(4.0..18.0),
                            rng.random_range(-3.0..3.0),
                        ),
                        rng.random_range(0.0..1.0),
                    )
                })
                .collect();
            let kept = nms(&scored, 0.4, 0.3, "t");
            let brute = nms_brute(&scored, 0.4, 0.3);
            let kept_scores: Vec<u64> = kept.iter().map(|d| d.score.to_bits()).collect();
            let brute_scores: Vec<u64> = brute.iter().map(|&i| scored[i].1.to_bits()).collect();
            assert_eq!(kept_scores, brute_scores, "trial {trial} diverged");
        }
    }

    #[test]
    fn monotone_score_transform_keeps_set() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(77);
        let scored: Vec<(OrientedSquare, f64)> = (0..8)
            .map(|_| {
                (
                    OrientedSquare::new(
                        Point2::new(rng.random_range(0.0..30.0), rng.random_range(0.0..30.0)),
                        rng.random_range(4.0..14.0),
                        0.0,
                    ),
                    rng.random_range(0.5..1.0),
                )
            })
            .collect();
        let kept = nms(&scored, 0.4, 0.0, "img");
        // squash scores through a strictly increasing map
        let squashed: Vec<(OrientedSquare, f64)> =
            scored.iter().map(|&(s, v)| (s, v * v * 0.5)).collect();
        let kept2 = nms(&squashed, 0.4, 0.0, "img");
        let centers: Vec<(u64, u64)> = kept
            .iter()
            .map(|d| (d.square.center.x.to_bits(), d.square.center.y.to_bits()))
            .collect();
        let centers2: Vec<(u64, u64)> = kept2
            .iter()
            .map(|d| (d.square.center.x.to_bits(), d.square.center.y.to_bits()))
            .collect();
        assert_eq!(centers, centers2);
    }

    #[test]
    fn nms_is_idempotent() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let scored: Vec<(OrientedSquare, f64)> = (0..10)
            .map(|_| {
                (
                    OrientedSquare::new(
                        Point2::new(rng.random_range(0.0..25.0), rng.random_range(0.0..25.0)),
                        rng.random_range(4.0..12.0),
                        rng.random_range(-1.0..1.0),
                    ),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect();
        let once = nms(&scored, 0.4, 0.2, "img");
        let rescored: Vec<(OrientedSquare, f64)> =
            once.iter().map(|d| (d.square, d.score)).collect();
        let twice = nms(&rescored, 0.4, 0.2, "img");
        assert_eq!(once.len(), twice.len());
        for (a, b) in once.iter().zip(&twice) {
            assert_eq!(a.score.to_bits(), b.score.to_bits());
        }
    }

    #[test]
    fn scoring_preserves_order_and_matches_single_calls() {
        let model = ScorerModel::reference(Geometry { height: 8, width: 8, channels: 1 }, 1);
        // reference() expects 32x32 halving; an 8x8 input still resolves
        let patches: Vec<Patch> = (0..5)
            .map(|i| Patch {
                size: 8,
                channels: 1,
                data: (0..64).map(|j| ((i * 64 + j) % 17) as f32 / 17.0).collect(),
            })
            .collect();
        let batch = score_patches(&model, &patches).unwrap();
        for (i, p) in patches.iter().enumerate() {
            assert_eq!(batch[i].to_bits(), model.forward(p).unwrap().to_bits());
        }
        assert!(score_patches(&model, &[]).unwrap().is_empty());
    }

    #[test]
    fn constant_model_scores_half() {
        let mut model =
            ScorerModel::reference(Geometry { height: 8, width: 8, channels: 1 }, 2);
        let n = model.param_count();
        for p in &mut model.params_mut()[n - 65..] {
            *p = 0.0;
        }
        let patches: Vec<Patch> =
            (0..3).map(|i| Patch { size: 8, channels: 1, data: vec![i as f32 * 0.3; 64] }).collect();
        let scores = score_patches(&model, &patches).unwrap();
        assert!(scores.iter().all(|&s| s == 0.5));
    }

    #[test]
    fn detection_records_round_trip() {
        let dets = vec![
            Detection { square: sq(10.5, 20.25, 33.0), score: 0.875, image_id: "a".into(), direction: 0.0 },
            Detection {
                square: OrientedSquare::new(Point2::new(1.0, 2.0), 3.0, -1.25),
                score: 0.625,
                image_id: "b".into(),
                direction: -1.25,
            },
        ];
        let mut buf = Vec::new();
        write_detections(&mut buf, &dets).unwrap();
        let back = read_detections(&buf[..]).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].square.theta, -1.25);
        assert_eq!(back[0].score, 0.875);
        let mut buf2 = Vec::new();
        write_detections(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2, "rewrite must be byte-identical");
    }
}
