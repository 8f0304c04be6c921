//! Logarithmic barrier for the truncated Lipschitz polytope
//!
//! ```text
//! Q = { w : theta <= w_i <= 1 - theta,  |w_i - w_j| <= Lmat_ij }
//! ```
//!
//! where `Lmat_ij = L * rho(X_i, X_j)`. The barrier is `F = F_Q + F_L` with
//! `F_Q(w) = -sum_i [ln(w_i - theta) + ln(1 - theta - w_i)]` and
//! `F_L(w) = -sum_{i<j} [ln zeta(j,i) + ln zeta(i,j)]`,
//! `zeta(i,j) = w_i - w_j + Lmat_ij`. With `theta = 0` the box part is the
//! plain `[0, 1]` barrier.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::data::Sample;

/// A single linear constraint of the polytope.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    /// `w_i >= theta`
    Lower(usize),
    /// `w_i <= 1 - theta`
    Upper(usize),
    /// `w_j - w_i <= Lmat_ij`, i.e. `zeta(i, j) >= 0`
    Lipschitz(usize, usize),
}

impl fmt::Display for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Constraint::Lower(i) => write!(f, "w[{i}] >= theta"),
            Constraint::Upper(i) => write!(f, "w[{i}] <= 1 - theta"),
            Constraint::Lipschitz(i, j) => write!(f, "w[{j}] - w[{i}] <= L*rho({i},{j})"),
        }
    }
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BarrierError {
    #[error("point is not strictly feasible: violates {constraint} (slack {slack:e})")]
    Infeasible { constraint: Constraint, slack: f64 },
    #[error("dimension mismatch: point has {found} entries, polytope has {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("truncation level must lie in [0, 1/2), got {0}")]
    Theta(f64),
    #[error("Lipschitz constant must be positive and finite, got {0}")]
    Lipschitz(f64),
    #[error("bound matrix entry ({i},{j}) = {value} is invalid (needs symmetric, zero diagonal, positive off-diagonal)")]
    Bounds { i: usize, j: usize, value: f64 },
}

/// The feasible set: truncated box plus pairwise Lipschitz slabs.
#[derive(Debug, Clone, PartialEq)]
pub struct Polytope {
    lip_bound: DMatrix<f64>,
    theta: f64,
    lipschitz: f64,
}

impl Polytope {
    pub fn new(sample: &Sample, lipschitz: f64, theta: f64) -> Result<Self, BarrierError> {
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return Err(BarrierError::Lipschitz(lipschitz));
        }
        let mut p = Self::from_bounds(sample.distances() * lipschitz, theta)?;
        p.lipschitz = lipschitz;
        Ok(p)
    }

    /// Polytope from an explicit bound matrix `Lmat` (taken as `L = 1`).
    pub fn from_bounds(lip_bound: DMatrix<f64>, theta: f64) -> Result<Self, BarrierError> {
        if !(0.0..0.5).contains(&theta) {
            return Err(BarrierError::Theta(theta));
        }
        let n = lip_bound.nrows();
        if lip_bound.ncols() != n {
            return Err(BarrierError::Dimension { expected: n, found: lip_bound.ncols() });
        }
        for i in 0..n {
            for j in 0..n {
                let v = lip_bound[(i, j)];
                let ok = if i == j { v == 0.0 } else { v > 0.0 && v == lip_bound[(j, i)] };
                if !ok || v.is_nan() {
                    return Err(BarrierError::Bounds { i, j, value: v });
                }
            }
        }
        Ok(Self { lip_bound, theta, lipschitz: 1.0 })
    }

    pub fn dim(&self) -> usize {
        self.lip_bound.nrows()
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn lip_bound(&self) -> &DMatrix<f64> {
        &self.lip_bound
    }

    pub fn bound(&self, i: usize, j: usize) -> f64 {
        self.lip_bound[(i, j)]
    }

    /// First constraint that `w` fails to satisfy strictly, with its slack.
    pub fn first_violation(&self, w: &DVector<f64>) -> Option<(Constraint, f64)> {
        let n = self.dim();
        for i in 0..n {
            let lo = w[i] - self.theta;
            if !(lo > 0.0) {
                return Some((Constraint::Lower(i), lo));
            }
            let hi = 1.0 - self.theta - w[i];
            if !(hi > 0.0) {
                return Some((Constraint::Upper(i), hi));
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let l = self.lip_bound[(i, j)];
                let a = w[i] - w[j] + l;
                if !(a > 0.0) {
                    return Some((Constraint::Lipschitz(i, j), a));
                }
                let b = w[j] - w[i] + l;
                if !(b > 0.0) {
                    return Some((Constraint::Lipschitz(j, i), b));
                }
            }
        }
        None
    }

    /// Largest violation of the closed constraints (0 when feasible).
    pub fn max_violation(&self, w: &DVector<f64>) -> f64 {
        let n = self.dim();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            worst = worst.max(self.theta - w[i]).max(w[i] - (1.0 - self.theta));
            for j in (i + 1)..n {
                worst = worst.max((w[i] - w[j]).abs() - self.lip_bound[(i, j)]);
            }
        }
        worst
    }

    fn check(&self, w: &DVector<f64>) -> Result<(), BarrierError> {
        if w.len() != self.dim() {
            return Err(BarrierError::Dimension { expected: self.dim(), found: w.len() });
        }
        match self.first_violation(w) {
            Some((constraint, slack)) => Err(BarrierError::Infeasible { constraint, slack }),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BarrierEval {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: DMatrix<f64>,
}

/// Barrier value, gradient and dense Hessian at a strictly feasible point.
pub fn barrier_eval(w: &DVector<f64>, p: &Polytope) -> Result<BarrierEval, BarrierError> {
    p.check(w)?;
    let n = p.dim();
    let theta = p.theta;
    let mut value = 0.0;
    let mut gradient = DVector::zeros(n);
    let mut hessian = DMatrix::zeros(n, n);

    for i in 0..n {
        let lo = w[i] - theta;
        let hi = 1.0 - theta - w[i];
        value -= lo.ln() + hi.ln();
        gradient[i] += -1.0 / lo + 1.0 / hi;
        hessian[(i, i)] += 1.0 / (lo * lo) + 1.0 / (hi * hi);
    }

    for i in 0..n {
        for j in (i + 1)..n {
            let l = p.lip_bound[(i, j)];
            let a = w[i] - w[j] + l; // zeta(i, j)
            let b = w[j] - w[i] + l; // zeta(j, i)
            value -= a.ln() + b.ln();
            let g = 1.0 / b - 1.0 / a;
            gradient[i] += g;
            gradient[j] -= g;
            let h = 1.0 / (a * a) + 1.0 / (b * b);
            hessian[(i, i)] += h;
            hessian[(j, j)] += h;
            hessian[(i, j)] -= h;
            hessian[(j, i)] -= h;
        }
    }

    Ok(BarrierEval { value, gradient, hessian })
}

/// Barrier value only; `+inf` outside the open polytope.
pub fn barrier_value(w: &DVector<f64>, p: &Polytope) -> f64 {
    if w.len() != p.dim() || p.first_violation(w).is_some() {
        return f64::INFINITY;
    }
    let n = p.dim();
    let mut value = 0.0;
    for i in 0..n {
        value -= (w[i] - p.theta).ln() + (1.0 - p.theta - w[i]).ln();
        for j in (i + 1)..n {
            let l = p.lip_bound[(i, j)];
            value -= (w[i] - w[j] + l).ln() + (w[j] - w[i] + l).ln();
        }
    }
    value
}

/// Barrier parameter counting every logarithmic term: `n(n-1)` Lipschitz
/// terms plus `2n` box terms.
pub fn barrier_parameter(p: &Polytope) -> f64 {
    let n = p.dim() as f64;
    n * (n - 1.0) + 2.0 * n
}

/// The `n(n-1)` count that treats the objective as the box barrier.
pub fn lipschitz_barrier_parameter(p: &Polytope) -> f64 {
    let n = p.dim() as f64;
    n * (n - 1.0)
}

/// Minimizer of the barrier: the constant 1/2 vector.
pub fn analytic_center(p: &Polytope) -> DVector<f64> {
    let w = DVector::from_element(p.dim(), 0.5);
    debug_assert!(
        barrier_eval(&w, p).is_ok_and(|b| b.gradient.amax() <= 1e-10),
        "constant 1/2 vector must be stationary for the barrier"
    );
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(bound: f64, theta: f64) -> Polytope {
        Polytope::from_bounds(DMatrix::from_row_slice(2, 2, &[0.0, bound, bound, 0.0]), theta)
            .unwrap()
    }

    /// Random Euclidean metric on points in the unit square, scaled by `lip`.
    fn random_polytope(rng: &mut ChaCha8Rng, n: usize, lip: f64, theta: f64) -> Polytope {
        let pts: Vec<(f64, f64)> = (0..n).map(|_| (rng.gen(), rng.gen())).collect();
        let d = DMatrix::from_fn(n, n, |i, j| {
            if i == j {
                0.0
            } else {
                let (a, b) = (pts[i], pts[j]);
                lip * ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
            }
        });
        Polytope::from_bounds(d, theta).unwrap()
    }

    /// Strictly feasible point: shrink a random box point toward the center.
    fn random_feasible(rng: &mut ChaCha8Rng, p: &Polytope) -> DVector<f64> {
        let u = DVector::from_fn(p.dim(), |_, _| rng.gen_range(p.theta()..1.0 - p.theta()));
        let mut alpha: f64 = rng.gen_range(0.05..1.0);
        loop {
            let w = u.map(|x| 0.5 + alpha * (x - 0.5));
            if p.first_violation(&w).is_none() {
                return w;
            }
            alpha *= 0.5;
        }
    }

    #[test]
    fn center_of_pair_is_stationary() {
        let p = pair(1.0, 0.0);
        let b = barrier_eval(&dvector![0.5, 0.5], &p).unwrap();
        assert_eq!(b.gradient, dvector![0.0, 0.0]);
        let expected = DMatrix::from_row_slice(2, 2, &[10.0, -2.0, -2.0, 10.0]);
        assert_relative_eq!(b.hessian, expected, epsilon = 1e-12);
    }

    #[test]
    fn pair_hessian_matches_finite_differences_of_value() {
        let p = pair(1.0, 0.0);
        let w = dvector![0.5, 0.5];
        let h = 1e-5;
        let f = |dw: [f64; 2]| barrier_value(&dvector![w[0] + dw[0], w[1] + dw[1]], &p);
        let f0 = f([0.0, 0.0]);
        let d11 = (f([h, 0.0]) - 2.0 * f0 + f([-h, 0.0])) / (h * h);
        let d12 = (f([h, h]) - f([h, -h]) - f([-h, h]) + f([-h, -h])) / (4.0 * h * h);
        assert_relative_eq!(d11, 10.0, max_relative = 1e-4);
        assert_relative_eq!(d12, -2.0, max_relative = 1e-4);
    }

    #[test]
    fn gradient_and_hessian_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let step = 1e-6;
        for _ in 0..50 {
            let lip = rng.gen_range(0.5..5.0);
            let p = random_polytope(&mut rng, 5, lip, 0.1);
            let w = random_feasible(&mut rng, &p);
            let b = barrier_eval(&w, &p).unwrap();
            for i in 0..5 {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[i] += step;
                wm[i] -= step;
                let bp = barrier_eval(&wp, &p).unwrap();
                let bm = barrier_eval(&wm, &p).unwrap();
                let g_fd = (bp.value - bm.value) / (2.0 * step);
                assert_relative_eq!(b.gradient[i], g_fd, max_relative = 1e-5, epsilon = 1e-6);
                let col_fd = (&bp.gradient - &bm.gradient) / (2.0 * step);
                for j in 0..5 {
                    assert_relative_eq!(b.hessian[(j, i)], col_fd[j], max_relative = 1e-5, epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(barrier_parameter(&pair(1.0, 0.1)), 6.0);
        let one = Polytope::from_bounds(DMatrix::zeros(1, 1), 0.1).unwrap();
        assert_eq!(barrier_parameter(&one), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ten = random_polytope(&mut rng, 10, 1.0, 0.1);
        assert_eq!(barrier_parameter(&ten), 110.0);
        assert_eq!(lipschitz_barrier_parameter(&ten), 90.0);
    }

    #[test]
    fn analytic_center_is_stationary() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p3 = random_polytope(&mut rng, 3, 2.0, 0.0);
        let c = analytic_center(&p3);
        assert_eq!(c, dvector![0.5, 0.5, 0.5]);
        assert!(barrier_eval(&c, &p3).unwrap().gradient.norm() <= 1e-10);

        let p1 = Polytope::from_bounds(DMatrix::zeros(1, 1), 0.3).unwrap();
        assert_eq!(analytic_center(&p1), dvector![0.5]);

        let p2 = pair(0.7, 0.2);
        let c = analytic_center(&p2);
        assert!(barrier_eval(&c, &p2).unwrap().gradient.norm() <= 1e-10);
    }

    #[test]
    fn infeasible_points_name_the_constraint() {
        let p = pair(0.1, 0.05);
        assert!(matches!(
            barrier_eval(&dvector![0.5, 0.7], &p),
            Err(BarrierError::Infeasible { constraint: Constraint::Lipschitz(0, 1), .. })
        ));
        assert!(matches!(
            barrier_eval(&dvector![0.05, 0.1], &p),
            Err(BarrierError::Infeasible { constraint: Constraint::Lower(0), .. })
        ));
        assert!(matches!(
            barrier_eval(&dvector![0.5, 0.96], &p),
            Err(BarrierError::Infeasible { constraint: Constraint::Upper(1), .. })
        ));
        assert!(matches!(barrier_eval(&dvector![0.5], &p), Err(BarrierError::Dimension { .. })));
    }

    #[test]
    fn polytope_validation() {
        assert!(matches!(Polytope::from_bounds(DMatrix::zeros(1, 1), 0.5), Err(BarrierError::Theta(_))));
        let zero_off = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 0.0]);
        assert!(matches!(Polytope::from_bounds(zero_off, 0.1), Err(BarrierError::Bounds { i: 0, j: 1, .. })));
    }

    #[test]
    fn hessian_is_symmetric_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for k in 0..1000 {
            let n = 1 + k % 8;
            let theta = [0.0, 0.05, 0.2][k % 3];
            let lip = rng.gen_range(0.2..6.0);
            let p = random_polytope(&mut rng, n, lip, theta);
            let w = random_feasible(&mut rng, &p);
            let h = barrier_eval(&w, &p).unwrap().hessian;
            assert_eq!(h, h.transpose());
            let min_eig = h.symmetric_eigenvalues().min();
            assert!(min_eig > 0.0, "smallest eigenvalue {min_eig} at n={n}");
        }
    }

    #[test]
    fn self_concordant_along_random_lines() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let n = rng.gen_range(1..=6);
            let lip = rng.gen_range(0.3..4.0);
            let p = random_polytope(&mut rng, n, lip, 0.1);
            let w = random_feasible(&mut rng, &p);
            let d = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0)).normalize();
            let second = |s: f64| {
                let x = &w + &d * s;
                let h = barrier_eval(&x, &p).unwrap().hessian;
                (d.transpose() * h * &d)[(0, 0)]
            };
            // step well inside the smallest slack along the line
            let mut reach = 1.0;
            while p.first_violation(&(&w + &d * reach)).is_some()
                || p.first_violation(&(&w - &d * reach)).is_some()
            {
                reach *= 0.5;
            }
            let h = 1e-3 * reach;
            let phi2 = second(0.0);
            let phi3 = (-second(2.0 * h) + 8.0 * second(h) - 8.0 * second(-h) + second(-2.0 * h))
                / (12.0 * h);
            assert!(
                phi3.abs() <= 2.0 * phi2.powf(1.5) * (1.0 + 1e-6),
                "|phi'''| = {} > 2 phi''^1.5 = {}",
                phi3.abs(),
                2.0 * phi2.powf(1.5)
            );
        }
    }

    #[test]
    fn blows_up_near_every_facet() {
        let p = pair(0.3, 0.1);
        let center = barrier_value(&dvector![0.5, 0.5], &p);
        let near = [
            dvector![0.1 + 1e-9, 0.2],
            dvector![0.9 - 1e-9, 0.8],
            dvector![0.4, 0.7 - 1e-9],
            dvector![0.7 - 1e-9, 0.4],
        ];
        for w in near {
            assert!(barrier_value(&w, &p) > center + 15.0, "{w}");
        }
        assert_eq!(barrier_value(&dvector![0.1, 0.2], &p), f64::INFINITY);
    }

    #[test]
    fn unshifted_box_agrees_with_printed_formulas() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let n = 4;
        let p = random_polytope(&mut rng, n, 1.5, 0.0);
        let w = random_feasible(&mut rng, &p);
        let b = barrier_eval(&w, &p).unwrap();
        let zeta = |i: usize, j: usize| w[i] - w[j] + p.bound(i, j);
        for i in 0..n {
            let dq = -1.0 / w[i] + 1.0 / (1.0 - w[i]);
            let dl: f64 = (0..n).filter(|&j| j != i).map(|j| 1.0 / zeta(j, i) - 1.0 / zeta(i, j)).sum();
            assert_relative_eq!(b.gradient[i], dq + dl, max_relative = 1e-12);
            let hq = w[i].powi(-2) + (1.0 - w[i]).powi(-2);
            let hl: f64 =
                (0..n).filter(|&j| j != i).map(|j| zeta(j, i).powi(-2) + zeta(i, j).powi(-2)).sum();
            assert_relative_eq!(b.hessian[(i, i)], hq + hl, max_relative = 1e-12);
            for j in (0..n).filter(|&j| j != i) {
                let off = -zeta(j, i).powi(-2) - zeta(i, j).powi(-2);
                assert_relative_eq!(b.hessian[(i, j)], off, max_relative = 1e-12);
            }
        }
    }
}
