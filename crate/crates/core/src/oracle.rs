//! Reference solvers for small instances.
//!
//! Neither routine touches the interior-point code: [`oracle_solve`] runs
//! projected gradient descent with Euclidean projections computed by
//! Dykstra's alternating-projection scheme, and [`grid_solve`] enumerates a
//! feasible lattice. They exist to validate the path-following solver.

use nalgebra::DVector;
use thiserror::Error;

use crate::barrier::Polytope;
use crate::data::Sample;
use crate::objective::{self, ObjectiveError};

/// Largest instance the projection oracle accepts.
pub const MAX_ORACLE_DIM: usize = 12;
/// Largest instance the lattice search accepts.
pub const MAX_GRID_DIM: usize = 3;
/// Feasibility tolerance of a projection.
pub const PROJECTION_TOLERANCE: f64 = 1e-10;

const MAX_DYKSTRA_CYCLES: usize = 200_000;
const MAX_DESCENT_ITERATIONS: usize = 500_000;
// absorbs rounding in `theta + k * resolution`
const LATTICE_SLACK: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("oracle supports at most {max} points, got {n}")]
    TooLarge { n: usize, max: usize },
    #[error("oracle needs a positive truncation level, got {0}")]
    Theta(f64),
    #[error("tolerance/resolution must be positive, got {0}")]
    Tolerance(f64),
    #[error("sample has {sample} points but the polytope has dimension {polytope}")]
    Dimension { sample: usize, polytope: usize },
    #[error("projection did not converge in {cycles} cycles (violation {violation:e})")]
    Projection { cycles: usize, violation: f64 },
    #[error("projected gradient did not converge in {iterations} iterations (stationarity {stationarity:e})")]
    NoConvergence { iterations: usize, stationarity: f64 },
    #[error("no feasible lattice point at resolution {0}")]
    EmptyLattice(f64),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
}

/// Dykstra increments, kept between projections as a warm start.
///
/// The correction for slab `{|w_i - w_j| <= b}` is always a multiple of
/// `e_i - e_j`, so one scalar per pair suffices.
struct Dykstra {
    pairs: Vec<(usize, usize, f64)>,
    pair_inc: Vec<f64>,
    box_inc: DVector<f64>,
    lo: f64,
    hi: f64,
}

impl Dykstra {
    fn new(p: &Polytope) -> Self {
        let n = p.dim();
        let pairs: Vec<_> = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| (i, j, p.bound(i, j)))
            .collect();
        Self {
            pair_inc: vec![0.0; pairs.len()],
            pairs,
            box_inc: DVector::zeros(n),
            lo: p.theta(),
            hi: 1.0 - p.theta(),
        }
    }

    fn violation(&self, x: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for &v in x.iter() {
            worst = worst.max(self.lo - v).max(v - self.hi);
        }
        for &(i, j, b) in &self.pairs {
            worst = worst.max((x[i] - x[j]).abs() - b);
        }
        worst
    }

    /// Projection of `z` onto the polytope.
    fn project(&mut self, z: &DVector<f64>) -> Result<DVector<f64>, OracleError> {
        // invariant: z = x + sum of increments
        let mut x = z - &self.box_inc;
        for (&(i, j, _), &q) in self.pairs.iter().zip(&self.pair_inc) {
            x[i] -= q;
            x[j] += q;
        }
        for cycle in 1..=MAX_DYKSTRA_CYCLES {
            let mut change: f64 = 0.0;
            for (k, &(i, j, b)) in self.pairs.iter().enumerate() {
                let q = self.pair_inc[k];
                let (yi, yj) = (x[i] + q, x[j] - q);
                let d = yi - yj;
                let s = if d > b {
                    0.5 * (d - b)
                } else if d < -b {
                    0.5 * (d + b)
                } else {
                    0.0
                };
                let (xi, xj) = (yi - s, yj + s);
                change = change.max((xi - x[i]).abs()).max((xj - x[j]).abs());
                x[i] = xi;
                x[j] = xj;
                self.pair_inc[k] = s;
            }
            for i in 0..x.len() {
                let y = x[i] + self.box_inc[i];
                let xi = y.clamp(self.lo, self.hi);
                change = change.max((xi - x[i]).abs());
                x[i] = xi;
                self.box_inc[i] = y - xi;
            }
            if change <= 1e-13 && self.violation(&x) <= PROJECTION_TOLERANCE {
                return Ok(x);
            }
            if cycle == MAX_DYKSTRA_CYCLES {
                return Err(OracleError::Projection { cycles: cycle, violation: self.violation(&x) });
            }
        }
        unreachable!()
    }
}

fn check_inputs(sample: &Sample, p: &Polytope, max: usize) -> Result<(), OracleError> {
    let n = sample.len();
    if p.dim() != n {
        return Err(OracleError::Dimension { sample: n, polytope: p.dim() });
    }
    if n > max {
        return Err(OracleError::TooLarge { n, max });
    }
    if !(p.theta() > 0.0) {
        return Err(OracleError::Theta(p.theta()));
    }
    Ok(())
}

/// Minimizes the empirical risk over the polytope by projected gradient
/// descent with backtracking.
///
/// Stops once `||G|| * diam <= tol / 10`, where `G` is the gradient mapping
/// and `diam` the diameter of the truncated box; by convexity this bounds
/// the remaining objective gap.
pub fn oracle_solve(sample: &Sample, p: &Polytope, tol: f64) -> Result<DVector<f64>, OracleError> {
    check_inputs(sample, p, MAX_ORACLE_DIM)?;
    if !(tol > 0.0) {
        return Err(OracleError::Tolerance(tol));
    }
    let n = sample.len();
    let (ones, zeros) = (sample.ones(), sample.zeros());
    let diam = (n as f64).sqrt() * (1.0 - 2.0 * p.theta());
    let target = tol / 10.0;

    let mut proj = Dykstra::new(p);
    let mut w = proj.project(&DVector::from_element(n, 0.5))?;
    let mut current = objective::risk_from_counts(&w, ones, zeros)?;

    // curvature bound over the truncated box
    let max_weight = (0..n).map(|i| f64::from(ones[i] + zeros[i])).fold(0.0, f64::max);
    let mut eta = p.theta().powi(2) / max_weight;
    let mut stationarity = f64::INFINITY;

    for _ in 0..MAX_DESCENT_ITERATIONS {
        let (next, eval) = loop {
            let trial = proj.project(&(&w - &current.gradient * eta))?;
            let step = &trial - &w;
            let eval = objective::risk_from_counts(&trial, ones, zeros)?;
            let model = current.value + current.gradient.dot(&step) + step.norm_squared() / (2.0 * eta);
            if eval.value <= model + 1e-14 * (1.0 + current.value.abs()) || eta < 1e-18 {
                break (trial, eval);
            }
            eta *= 0.5;
        };
        stationarity = (&w - &next).norm() / eta * diam;
        w = next;
        current = eval;
        if stationarity <= target {
            return Ok(w);
        }
        eta *= 1.5;
    }
    Err(OracleError::NoConvergence { iterations: MAX_DESCENT_ITERATIONS, stationarity })
}

/// Exhaustive search over `{theta + k * resolution} ∪ {1 - theta}` per
/// coordinate, keeping only lattice points that satisfy every constraint.
pub fn grid_solve(sample: &Sample, p: &Polytope, resolution: f64) -> Result<DVector<f64>, OracleError> {
    check_inputs(sample, p, MAX_GRID_DIM)?;
    if !(resolution > 0.0) {
        return Err(OracleError::Tolerance(resolution));
    }
    let theta = p.theta();
    let steps = ((1.0 - 2.0 * theta) / resolution).floor() as usize;
    let mut axis: Vec<f64> = (0..=steps).map(|k| theta + k as f64 * resolution).collect();
    if axis.last().is_none_or(|&v| v < 1.0 - theta) {
        axis.push(1.0 - theta);
    }
    // per-coordinate loss tables keep the enumeration cheap
    let n = sample.len();
    let loss: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let (c1, c0) = (f64::from(sample.ones()[i]), f64::from(sample.zeros()[i]));
            axis.iter().map(|&v| -c1 * v.ln() - c0 * (-v).ln_1p()).collect()
        })
        .collect();

    let mut best = (f64::INFINITY, Vec::new());
    let mut idx = vec![0usize; n];
    search(0, &mut idx, 0.0, &axis, &loss, p, &mut best);
    if best.1.is_empty() {
        return Err(OracleError::EmptyLattice(resolution));
    }
    Ok(DVector::from_iterator(n, best.1.iter().map(|&k| axis[k])))
}

fn search(
    depth: usize,
    idx: &mut Vec<usize>,
    partial: f64,
    axis: &[f64],
    loss: &[Vec<f64>],
    p: &Polytope,
    best: &mut (f64, Vec<usize>),
) {
    if depth == idx.len() {
        if partial < best.0 {
            *best = (partial, idx.clone());
        }
        return;
    }
    'outer: for k in 0..axis.len() {
        let v = axis[k];
        for (prev, &kp) in idx[..depth].iter().enumerate() {
            if (v - axis[kp]).abs() > p.bound(prev, depth) + LATTICE_SLACK {
                continue 'outer;
            }
        }
        idx[depth] = k;
        search(depth + 1, idx, partial + loss[depth][k], axis, loss, p, best);
    }
}
