//! Empirical log-loss risk with multiplicity weights.
//!
//! For merged point `i` with `c1` ones and `c0` zeros the contribution is
//! `-c1 ln w_i - c0 ln(1 - w_i)`. With unit weights this is the plain sum
//! of per-example log losses. Risk values are in nats and are *sums*, not
//! means.

use nalgebra::DVector;
use thiserror::Error;

use crate::data::Sample;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ObjectiveError {
    #[error("w[{index}] = {value} is outside the open interval (0, 1)")]
    Domain { index: usize, value: f64 },
    #[error("length mismatch: {left} vs {right}")]
    Length { left: usize, right: usize },
    #[error("point mass sums to {0}, expected 1")]
    MassNotNormalized(f64),
    #[error("invalid probability {value} at index {index}")]
    Probability { index: usize, value: f64 },
    #[error("infinite expected risk: h[{index}] = {value} while the label it excludes has positive mass")]
    InfiniteRisk { index: usize, value: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskEval {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian_diag: DVector<f64>,
}

/// Logarithm base for [`expected_risk`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LogBase {
    E,
    Two,
}

impl LogBase {
    fn scale(self) -> f64 {
        match self {
            LogBase::E => 1.0,
            LogBase::Two => std::f64::consts::LOG2_E,
        }
    }
}

/// Per-example log loss `-y ln p - (1 - y) ln(1 - p)` in nats.
pub fn log_loss(label: u8, p: f64) -> f64 {
    if label == 1 {
        -p.ln()
    } else {
        -(-p).ln_1p()
    }
}

pub fn risk(w: &DVector<f64>, sample: &Sample) -> Result<RiskEval, ObjectiveError> {
    risk_from_counts(w, sample.ones(), sample.zeros())
}

/// Risk, gradient and Hessian diagonal from raw label counts.
pub fn risk_from_counts(
    w: &DVector<f64>,
    ones: &[u32],
    zeros: &[u32],
) -> Result<RiskEval, ObjectiveError> {
    let n = w.len();
    if ones.len() != n || zeros.len() != n {
        return Err(ObjectiveError::Length { left: n, right: ones.len().min(zeros.len()) });
    }
    let mut value = 0.0;
    let mut gradient = DVector::zeros(n);
    let mut hessian_diag = DVector::zeros(n);
    for i in 0..n {
        let wi = w[i];
        if !(wi > 0.0 && wi < 1.0) {
            return Err(ObjectiveError::Domain { index: i, value: wi });
        }
        let (c1, c0) = (f64::from(ones[i]), f64::from(zeros[i]));
        let v = 1.0 - wi;
        if c1 > 0.0 {
            value -= c1 * wi.ln();
        }
        if c0 > 0.0 {
            value -= c0 * (-wi).ln_1p();
        }
        gradient[i] = -c1 / wi + c0 / v;
        hessian_diag[i] = c1 / (wi * wi) + c0 / (v * v);
    }
    Ok(RiskEval { value, gradient, hessian_diag })
}

/// Risk value only.
pub fn risk_value(w: &DVector<f64>, sample: &Sample) -> Result<f64, ObjectiveError> {
    risk(w, sample).map(|r| r.value)
}

/// Expected log loss of hypothesis values `h` under a distribution that puts
/// mass `point_mass[x]` on point `x` with `P(Y = 1 | x) = true_p[x]`.
pub fn expected_risk(
    h: &[f64],
    true_p: &[f64],
    point_mass: &[f64],
    base: LogBase,
) -> Result<f64, ObjectiveError> {
    if h.len() != true_p.len() || h.len() != point_mass.len() {
        return Err(ObjectiveError::Length { left: h.len(), right: true_p.len().min(point_mass.len()) });
    }
    let total: f64 = point_mass.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(ObjectiveError::MassNotNormalized(total));
    }
    for (index, &value) in point_mass.iter().chain(true_p).enumerate() {
        if !(0.0..=1.0).contains(&value) {
            return Err(ObjectiveError::Probability { index: index % h.len(), value });
        }
    }
    let mut sum = 0.0;
    for (x, ((&hx, &px), &mx)) in h.iter().zip(true_p).zip(point_mass).enumerate() {
        if !(0.0..=1.0).contains(&hx) {
            return Err(ObjectiveError::Probability { index: x, value: hx });
        }
        if mx == 0.0 {
            continue;
        }
        let mut loss = 0.0;
        if px > 0.0 {
            if hx == 0.0 {
                return Err(ObjectiveError::InfiniteRisk { index: x, value: hx });
            }
            loss -= px * hx.ln();
        }
        if px < 1.0 {
            if hx == 1.0 {
                return Err(ObjectiveError::InfiniteRisk { index: x, value: hx });
            }
            loss -= (1.0 - px) * (-hx).ln_1p();
        }
        sum += mx * loss;
    }
    Ok(sum * base.scale())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn counts(labels: &[u8]) -> (Vec<u32>, Vec<u32>) {
        (
            labels.iter().map(|&y| u32::from(y == 1)).collect(),
            labels.iter().map(|&y| u32::from(y == 0)).collect(),
        )
    }

    #[test]
    fn single_point_at_half() {
        let r = risk_from_counts(&dvector![0.5], &[1], &[0]).unwrap();
        assert_relative_eq!(r.value, std::f64::consts::LN_2, epsilon = 1e-15);
        assert_eq!(r.gradient[0], -2.0);
        assert_eq!(r.hessian_diag[0], 4.0);
    }

    #[test]
    fn additive_over_points() {
        let r = risk_from_counts(&dvector![0.5, 0.5, 0.5], &[1, 1, 1], &[0, 0, 0]).unwrap();
        assert_relative_eq!(r.value, 3.0 * std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn boundary_is_a_domain_error() {
        assert_eq!(
            risk_from_counts(&dvector![0.5, 1.0], &[1, 1], &[0, 0]),
            Err(ObjectiveError::Domain { index: 1, value: 1.0 })
        );
        assert!(risk_from_counts(&dvector![0.0], &[0], &[1]).is_err());
    }

    #[test]
    fn weighted_counts_match_expanded_sum() {
        let merged = risk_from_counts(&dvector![0.3], &[2], &[3]).unwrap().value;
        let expanded: f64 = [1, 1, 0, 0, 0].iter().map(|&y| log_loss(y, 0.3)).sum();
        assert_relative_eq!(merged, expanded, epsilon = 1e-14);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let step = 1e-6;
        for _ in 0..100 {
            let labels: Vec<u8> = (0..5).map(|_| rng.gen_range(0..=1)).collect();
            let (ones, zeros) = counts(&labels);
            let w = DVector::from_fn(5, |_, _| rng.gen_range(0.1..0.9));
            let r = risk_from_counts(&w, &ones, &zeros).unwrap();
            for i in 0..5 {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[i] += step;
                wm[i] -= step;
                let fp = risk_from_counts(&wp, &ones, &zeros).unwrap();
                let fm = risk_from_counts(&wm, &ones, &zeros).unwrap();
                let g_fd = (fp.value - fm.value) / (2.0 * step);
                assert_relative_eq!(r.gradient[i], g_fd, max_relative = 1e-6);
                let h_fd = (fp.gradient[i] - fm.gradient[i]) / (2.0 * step);
                assert_relative_eq!(r.hessian_diag[i], h_fd, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn expected_risk_examples() {
        let one_bit = expected_risk(&[0.5], &[0.5], &[1.0], LogBase::Two).unwrap();
        assert_relative_eq!(one_bit, 1.0, epsilon = 1e-15);

        let quarter = expected_risk(&[0.25], &[0.5], &[1.0], LogBase::Two).unwrap();
        let by_hand = 0.5 * 4f64.log2() + 0.5 * (4.0f64 / 3.0).log2();
        assert_relative_eq!(quarter, by_hand, epsilon = 1e-14);
        assert_relative_eq!(quarter, 1.2075, epsilon = 1e-4);

        let all_zero = expected_risk(&[0.5], &[0.0], &[1.0], LogBase::E).unwrap();
        assert_relative_eq!(all_zero, std::f64::consts::LN_2, epsilon = 1e-15);
    }

    #[test]
    fn expected_risk_flags_infinite_loss() {
        assert_eq!(
            expected_risk(&[0.0], &[0.3], &[1.0], LogBase::E),
            Err(ObjectiveError::InfiniteRisk { index: 0, value: 0.0 })
        );
        assert!(expected_risk(&[1.0], &[0.3], &[1.0], LogBase::E).is_err());
        // a certain hypothesis that is never contradicted is fine
        assert_eq!(expected_risk(&[1.0], &[1.0], &[1.0], LogBase::E), Ok(0.0));
        assert!(matches!(
            expected_risk(&[0.5], &[0.5], &[0.9], LogBase::E),
            Err(ObjectiveError::MassNotNormalized(_))
        ));
    }

    proptest! {
        #[test]
        fn convex_along_segments(
            a in proptest::collection::vec(0.01f64..0.99, 4),
            b in proptest::collection::vec(0.01f64..0.99, 4),
            labels in proptest::collection::vec(0u8..=1, 4),
            t in 0.0f64..1.0,
        ) {
            let (ones, zeros) = counts(&labels);
            let wa = DVector::from_vec(a);
            let wb = DVector::from_vec(b);
            let mid = &wa * t + &wb * (1.0 - t);
            let fa = risk_from_counts(&wa, &ones, &zeros).unwrap().value;
            let fb = risk_from_counts(&wb, &ones, &zeros).unwrap().value;
            let fm = risk_from_counts(&mid, &ones, &zeros).unwrap().value;
            prop_assert!(fm <= t * fa + (1.0 - t) * fb + 1e-12);
        }

        #[test]
        fn permutation_invariant(
            w in proptest::collection::vec(0.01f64..0.99, 6),
            labels in proptest::collection::vec(0u8..=1, 6),
            rot in 0usize..6,
        ) {
            let (ones, zeros) = counts(&labels);
            let base = risk_from_counts(&DVector::from_vec(w.clone()), &ones, &zeros).unwrap().value;
            let mut pw = w.clone();
            let mut po = ones.clone();
            let mut pz = zeros.clone();
            pw.rotate_left(rot);
            po.rotate_left(rot);
            pz.rotate_left(rot);
            pw.swap(0, 5);
            po.swap(0, 5);
            pz.swap(0, 5);
            let permuted = risk_from_counts(&DVector::from_vec(pw), &po, &pz).unwrap().value;
            prop_assert!((base - permuted).abs() <= 1e-12 * base.max(1.0));
        }
    }
}
