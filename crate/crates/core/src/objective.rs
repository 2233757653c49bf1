//! WARP ranking loss and the bridge-pair constraint.
//!
//! For one slate (a query paper, one positive repository and `n_k` sampled
//! negatives) the margin-penalised rank counts negatives with
//! `margin - s_pos + s_neg > 0`. The slate loss is
//! `L(rank) / rank * sum(hinge)` with `L(k) = 1 + 1/2 + ... + 1/k`, and zero
//! when the rank is zero. Bridge pairs contribute the mean cosine gap
//! `C_e = sum(1 - p.r) / 2m`, and the trained objective is `(1 + C_e) * warp`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSlate {
    pub positive: f64,
    pub negatives: Vec<f64>,
    pub margin: f64,
}

impl ScoredSlate {
    pub fn new(positive: f64, negatives: Vec<f64>, margin: f64) -> Result<Self> {
        if negatives.is_empty() {
            return Err(Error::Precondition("slate needs at least one negative".into()));
        }
        check_margin(margin)?;
        Ok(ScoredSlate {
            positive,
            negatives,
            margin,
        })
    }

    fn violation(&self, neg: f64) -> f64 {
        self.margin - self.positive + neg
    }
}

pub fn check_margin(margin: f64) -> Result<()> {
    if margin > 0.0 && margin < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("margin {margin} outside (0, 1)")))
    }
}

pub fn margin_rank(slate: &ScoredSlate) -> usize {
    slate.negatives.iter().filter(|&&n| slate.violation(n) > 0.0).count()
}

/// Harmonic rank-to-loss transform.
pub fn rank_to_loss(rank: i64) -> Result<f64> {
    if rank < 0 {
        return Err(Error::Precondition(format!("negative rank {rank}")));
    }
    Ok((1..=rank).map(|j| 1.0 / j as f64).sum())
}

fn harmonic(rank: usize) -> f64 {
    (1..=rank).map(|j| 1.0 / j as f64).sum()
}

/// Per-slate weight `L(rank) / rank`, zero for rank 0.
pub fn rank_weight(rank: usize) -> f64 {
    if rank == 0 {
        0.0
    } else {
        harmonic(rank) / rank as f64
    }
}

pub fn warp_term(slate: &ScoredSlate) -> f64 {
    let rank = margin_rank(slate);
    if rank == 0 {
        return 0.0;
    }
    let hinge: f64 = slate.negatives.iter().map(|&n| slate.violation(n).max(0.0)).sum();
    rank_weight(rank) * hinge
}

/// Slate loss and its derivatives with respect to the positive and each negative score,
/// holding the rank weight constant.
pub fn warp_term_grad(slate: &ScoredSlate) -> (f64, f64, Vec<f64>) {
    let rank = margin_rank(slate);
    if rank == 0 {
        return (0.0, 0.0, vec![0.0; slate.negatives.len()]);
    }
    let weight = rank_weight(rank);
    let mut loss = 0.0;
    let mut d_pos = 0.0;
    let d_neg = slate
        .negatives
        .iter()
        .map(|&n| {
            let v = slate.violation(n);
            if v > 0.0 {
                loss += v;
                d_pos -= weight;
                weight
            } else {
                0.0
            }
        })
        .collect();
    (weight * loss, d_pos, d_neg)
}

/// Mean slate loss.
pub fn batch_warp(slates: &[ScoredSlate]) -> Result<f64> {
    if slates.is_empty() {
        return Err(Error::Precondition("empty batch".into()));
    }
    Ok(slates.iter().map(warp_term).sum::<f64>() / slates.len() as f64)
}

/// Mean normalised cosine gap over bridge pairs of unit (or zero) vectors.
pub fn constraint_error(pairs: &[(&[f64], &[f64])]) -> f64 {
    if pairs.is_empty() {
        log::warn!("no bridge pairs; constraint error defined as 0");
        return 0.0;
    }
    let sum: f64 = pairs
        .iter()
        .map(|(p, r)| 1.0 - p.iter().zip(r.iter()).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    sum / (2.0 * pairs.len() as f64)
}

/// Fraction of bridge cosines within `eps` of 1.
pub fn fraction_within(cosines: &[f64], eps: f64) -> f64 {
    if cosines.is_empty() {
        return 0.0;
    }
    cosines.iter().filter(|&&c| 1.0 - c <= eps).count() as f64 / cosines.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub warp: f64,
    pub constraint_error: f64,
    pub total: f64,
}

pub fn total_loss(warp: f64, c_e: f64) -> LossBreakdown {
    LossBreakdown {
        warp,
        constraint_error: c_e,
        total: (1.0 + c_e) * warp,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slate(pos: f64, negs: &[f64], margin: f64) -> ScoredSlate {
        ScoredSlate::new(pos, negs.to_vec(), margin).unwrap()
    }

    #[test]
    fn pinned_slate() {
        let s = slate(0.9, &[0.8, 0.2, 0.5], 0.5);
        assert_eq!(margin_rank(&s), 2);
        assert!((warp_term(&s) - 0.375).abs() < 1e-12);
    }

    #[test]
    fn rank_extremes() {
        assert_eq!(margin_rank(&slate(0.9, &[0.1, 0.3, 0.4], 0.5)), 0);
        assert_eq!(margin_rank(&slate(0.1, &[0.1, 0.3, 0.4], 0.5)), 3);
    }

    #[test]
    fn harmonic_transform() {
        assert!((rank_to_loss(3).unwrap() - 11.0 / 6.0).abs() < 1e-15);
        assert_eq!(rank_to_loss(0).unwrap(), 0.0);
        assert_eq!(rank_to_loss(1).unwrap(), 1.0);
        assert!(rank_to_loss(-1).is_err());
    }

    #[test]
    fn zero_rank_and_boundary() {
        assert_eq!(warp_term(&slate(0.9, &[0.1], 0.5)), 0.0);
        // margin - pos + neg == 0 exactly: indicator false.
        assert_eq!(warp_term(&slate(0.75, &[0.25], 0.5)), 0.0);
    }

    #[test]
    fn batch_means() {
        let a = slate(0.9, &[0.8, 0.2, 0.5], 0.5);
        let z = slate(0.9, &[0.1], 0.5);
        assert!((batch_warp(&[a.clone(), a.clone()]).unwrap() - 0.375).abs() < 1e-12);
        assert!((batch_warp(&[z.clone(), a]).unwrap() - 0.1875).abs() < 1e-12);
        assert_eq!(batch_warp(&[z.clone(), z]).unwrap(), 0.0);
        assert!(batch_warp(&[]).is_err());
    }

    #[test]
    fn invalid_slates() {
        assert!(ScoredSlate::new(0.5, vec![], 0.5).is_err());
        assert!(ScoredSlate::new(0.5, vec![0.1], 0.0).is_err());
        assert!(ScoredSlate::new(0.5, vec![0.1], 1.0).is_err());
    }

    #[test]
    fn constraint_examples() {
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        let na = [-1.0, 0.0];
        assert_eq!(constraint_error(&[(&a, &a), (&b, &b)]), 0.0);
        assert_eq!(constraint_error(&[(&a, &na), (&b, &[0.0, -1.0])]), 1.0);
        assert_eq!(constraint_error(&[(&a, &a), (&a, &b)]), 0.25);
        assert_eq!(constraint_error(&[]), 0.0);
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(0.7, 0.0).total, 0.7);
        assert_eq!(total_loss(0.0, 0.6).total, 0.0);
        assert_eq!(total_loss(0.5, 0.25).total, 0.625);
    }

    #[test]
    fn new_violation_can_lower_the_loss() {
        let one = slate(0.5, &[0.4, -0.5], 0.5);
        let two = slate(0.5, &[0.4, 0.0 + 1e-3], 0.5);
        assert!((warp_term(&one) - 0.4).abs() < 1e-12);
        assert!(warp_term(&two) < warp_term(&one));
    }

    #[test]
    fn grad_matches_loss() {
        let s = slate(0.9, &[0.8, 0.2, 0.5], 0.5);
        let (loss, d_pos, d_neg) = warp_term_grad(&s);
        assert_eq!(loss, warp_term(&s));
        assert_eq!(d_pos, -1.5);
        assert_eq!(d_neg, vec![0.75, 0.0, 0.75]);
        let (_, d0, dn) = warp_term_grad(&slate(0.9, &[0.1], 0.5));
        assert_eq!((d0, dn), (0.0, vec![0.0]));
    }

    proptest::proptest! {
        #[test]
        fn warp_monotone_in_positive(pos in -1.0f64..1.0, bump in 0.0f64..0.5, negs in proptest::collection::vec(-1.0f64..1.0, 1..8), m in 0.05f64..0.95) {
            // L(rank)/rank shrinks as the rank grows, so the loss can jump when the
            // violation set changes; monotonicity holds while the rank is fixed.
            let (a, b) = (slate(pos, &negs, m), slate(pos + bump, &negs, m));
            proptest::prop_assume!(margin_rank(&a) == margin_rank(&b));
            proptest::prop_assert!(warp_term(&b) <= warp_term(&a) + 1e-12);
        }

        #[test]
        fn warp_monotone_in_negative(pos in -1.0f64..1.0, bump in 0.0f64..0.5, idx in 0usize..8, negs in proptest::collection::vec(-1.0f64..1.0, 1..8), m in 0.05f64..0.95) {
            let mut raised = negs.clone();
            let i = idx % raised.len();
            raised[i] += bump;
            let (a, b) = (slate(pos, &negs, m), slate(pos, &raised, m));
            proptest::prop_assume!(margin_rank(&a) == margin_rank(&b));
            proptest::prop_assert!(warp_term(&b) >= warp_term(&a) - 1e-12);
        }

        #[test]
        fn total_dominates_warp(w in 0.0f64..10.0, c in 0.0f64..=1.0) {
            let t = total_loss(w, c).total;
            proptest::prop_assert!(t >= w);
            if t == w {
                proptest::prop_assert!(c == 0.0 || w == 0.0);
            }
        }

        #[test]
        fn constraint_is_rotation_invariant(angle in 0.0f64..6.3, pts in proptest::collection::vec((0.0f64..6.3, 0.0f64..6.3), 1..6)) {
            let unit = |t: f64| [t.cos(), t.sin()];
            let rot = |v: [f64; 2]| [v[0] * angle.cos() - v[1] * angle.sin(), v[0] * angle.sin() + v[1] * angle.cos()];
            let raw: Vec<([f64; 2], [f64; 2])> = pts.iter().map(|&(a, b)| (unit(a), unit(b))).collect();
            let rotated: Vec<([f64; 2], [f64; 2])> = raw.iter().map(|&(p, r)| (rot(p), rot(r))).collect();
            let view = |v: &[([f64; 2], [f64; 2])]| constraint_error(&v.iter().map(|(p, r)| (&p[..], &r[..])).collect::<Vec<_>>());
            let (c1, c2) = (view(&raw), view(&rotated));
            proptest::prop_assert!((c1 - c2).abs() < 1e-12);
            proptest::prop_assert!((0.0..=1.0 + 1e-12).contains(&c1));
        }
    }
}
