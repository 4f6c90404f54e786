//! The two training losses and the bag gate.
//!
//! Negatives use a focal loss with exponent 4, so confidently rejected
//! negatives contribute almost nothing:
//!
//! ```text
//! loss_neg(p) = -p^4 * ln(1 - p)
//! ```
//!
//! Positive instances use a modulated cross entropy,
//!
//! ```text
//! ce(p) = -(1 - p) * ln(p)
//! ```
//!
//! and within a bag only instances whose ce stays below twice the bag
//! minimum take part; the arg-min instance is always kept, so a bag can
//! never go silent.

use super::NetError;

/// Floor for log arguments; keeps both losses finite at the saturated ends.
const LOG_FLOOR: f64 = 1e-12;

/// Focal negative loss, zero at p -> 0 and strictly increasing.
pub fn loss_negative(p: f64) -> f64 {
    -p.powi(4) * (1.0 - p).max(LOG_FLOOR).ln()
}

/// d loss_negative / d p.
pub fn loss_negative_grad(p: f64) -> f64 {
    let q = 1.0 - p;
    if q <= LOG_FLOOR {
        // log argument pinned at the floor: only the p^4 factor varies
        -4.0 * p.powi(3) * LOG_FLOOR.ln()
    } else {
        -4.0 * p.powi(3) * q.ln() + p.powi(4) / q
    }
}

/// Modulated cross entropy toward the positive class, zero at p -> 1 and
/// strictly decreasing.
pub fn ce_pos(p: f64) -> f64 {
    -(1.0 - p) * p.max(LOG_FLOOR).ln()
}

/// d ce_pos / d p.
pub fn ce_pos_grad(p: f64) -> f64 {
    if p <= LOG_FLOOR {
        LOG_FLOOR.ln()
    } else {
        p.ln() - (1.0 - p) / p
    }
}

/// Gate a bag by its ce values: instance `i` is active iff
/// `ce[i] < 2 * ce_min`; when `ce_min` is exactly zero the arg-min
/// instance is force-included. Returns the summed active loss and the
/// activity mask.
pub fn bag_gate(ce: &[f64]) -> Result<(f64, Vec<bool>), NetError> {
    if ce.is_empty() {
        return Err(NetError::EmptyBag);
    }
    let mut min_idx = 0;
    for (i, &v) in ce.iter().enumerate() {
        if v < ce[min_idx] {
            min_idx = i;
        }
    }
    let ce_min = ce[min_idx];
    let mut mask: Vec<bool> = ce.iter().map(|&v| v < 2.0 * ce_min).collect();
    if ce_min == 0.0 {
        mask[min_idx] = true;
    }
    debug_assert!(mask.iter().any(|&m| m), "gate must keep at least one instance");
    let total = ce.iter().zip(&mask).filter(|(_, &m)| m).map(|(&v, _)| v).sum();
    Ok((total, mask))
}

/// Bag loss from model probabilities: per-instance ce, then the gate.
pub fn bag_loss(ps: &[f64]) -> Result<(f64, Vec<bool>), NetError> {
    let ce: Vec<f64> = ps.iter().map(|&p| ce_pos(p)).collect();
    bag_gate(&ce)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn negative_loss_values() {
        assert!(loss_negative(1e-9) < 1e-30, "p^4 factor crushes tiny p");
        let at_half = loss_negative(0.5);
        assert!((at_half - 0.0625 * std::f64::consts::LN_2).abs() < 1e-6, "got {at_half}");
        let at_09 = loss_negative(0.9);
        assert!((at_09 - 0.6561 * 10.0_f64.ln()).abs() < 1e-4, "got {at_09}");
        assert!((at_09 - 1.5108).abs() < 1e-4);
    }

    #[test]
    fn positive_ce_values() {
        assert!(ce_pos(1.0 - 1e-12) < 1e-10);
        let at_half = ce_pos(0.5);
        assert!((at_half - 0.5 * std::f64::consts::LN_2).abs() < 1e-6, "got {at_half}");
        assert!((at_half - 0.34657).abs() < 1e-5);
        let at_01 = ce_pos(0.1);
        assert!((at_01 - 0.9 * 10.0_f64.ln()).abs() < 1e-4, "got {at_01}");
        assert!((at_01 - 2.0723).abs() < 1e-4);
    }

    #[test]
    fn losses_monotone_and_nonnegative_on_grid() {
        let mut prev_neg = f64::NEG_INFINITY;
        let mut prev_ce = f64::INFINITY;
        for i in 1..1000 {
            let p = i as f64 / 1000.0;
            let n = loss_negative(p);
            let c = ce_pos(p);
            assert!(n >= 0.0 && c >= 0.0, "losses nonnegative at {p}");
            assert!(n > prev_neg, "negative loss must increase at {p}");
            assert!(c < prev_ce, "positive ce must decrease at {p}");
            prev_neg = n;
            prev_ce = c;
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let h = 1e-7;
        for i in 1..100 {
            let p = i as f64 / 100.0;
            if p >= 0.99 {
                continue;
            }
            let fd_neg = (loss_negative(p + h) - loss_negative(p - h)) / (2.0 * h);
            let an_neg = loss_negative_grad(p);
            assert!(
                (fd_neg - an_neg).abs() / fd_neg.abs().max(1.0) < 1e-6,
                "loss_negative' at {p}: {an_neg} vs {fd_neg}"
            );
            let fd_ce = (ce_pos(p + h) - ce_pos(p - h)) / (2.0 * h);
            let an_ce = ce_pos_grad(p);
            assert!(
                (fd_ce - an_ce).abs() / fd_ce.abs().max(1.0) < 1e-6,
                "ce_pos' at {p}: {an_ce} vs {fd_ce}"
            );
        }
    }

    #[test]
    fn gate_keeps_small_losses() {
        let (total, mask) = bag_gate(&[0.2, 0.5, 0.3]).unwrap();
        assert_eq!(mask, vec![true, false, true]);
        assert!((total - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_instance_always_active() {
        let (total, mask) = bag_gate(&[1.7]).unwrap();
        assert_eq!(mask, vec![true]);
        assert_eq!(total, 1.7);
    }

    #[test]
    fn equal_losses_all_active() {
        let (total, mask) = bag_gate(&[0.4; 5]).unwrap();
        assert!(mask.iter().all(|&m| m));
        assert!((total - 2.0).abs() < 1e-12);
    }

    #[test]
    fn zero_minimum_keeps_argmin() {
        let (total, mask) = bag_gate(&[0.3, 0.0, 0.2]).unwrap();
        assert_eq!(mask, vec![false, true, false], "only the saturated instance stays");
        assert_eq!(total, 0.0);
    }

    #[test]
    fn empty_bag_rejected() {
        assert_eq!(bag_gate(&[]), Err(NetError::EmptyBag));
    }

    #[test]
    fn gate_never_empties_random_bags() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4242);
        for _ in 0..10_000 {
            let n = rng.random_range(1..20);
            let ce: Vec<f64> = (0..n)
                .map(|_| if rng.random_bool(0.05) { 0.0 } else { rng.random_range(0.0..3.0) })
                .collect();
            let (_, mask) = bag_gate(&ce).unwrap();
            assert!(mask.iter().any(|&m| m), "no active instance for {ce:?}");
        }
    }

    #[test]
    fn gate_is_permutation_invariant() {
        let ce = [0.31, 0.11, 0.5, 0.21, 0.09];
        let (total, mask) = bag_gate(&ce).unwrap();
        let mut active: Vec<f64> =
            ce.iter().zip(&mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
        active.sort_by(f64::total_cmp);
        let perm = [0.5, 0.09, 0.21, 0.31, 0.11];
        let (total_p, mask_p) = bag_gate(&perm).unwrap();
        let mut active_p: Vec<f64> =
            perm.iter().zip(&mask_p).filter(|(_, &m)| m).map(|(&v, _)| v).collect();
        active_p.sort_by(f64::total_cmp);
        assert_eq!(active, active_p);
        assert!((total - total_p).abs() < 1e-12);
    }
}
