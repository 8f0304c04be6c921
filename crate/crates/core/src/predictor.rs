//! Lipschitz extension of fitted values to new points, and model files.
//!
//! A query at normalized distances `rho` from the reference points gets the
//! value `y_ij = (w_j rho_i + w_i rho_j) / (rho_i + rho_j)` of the pair with the
//! largest induced slope `|w_i - w_j| / (rho_i + rho_j)`. The same value is
//! recomputed as the midpoint `(max_i(w_i - L rho_i) + min_j(w_j + L rho_j)) / 2`
//! at the smallest `L` for which that interval is nonempty, and the two are
//! required to agree.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::barrier::{BarrierError, Polytope};
use crate::data::{DataError, Geometry, InputMode, Norm, Sample};
use crate::objective;
use crate::solver::{self, FitResult, SolveOptions, SolverError};

pub const MODEL_FORMAT: &str = "lipreg-model";
pub const MODEL_VERSION: u32 = 1;

/// Slack allowed in the stored Lipschitz condition.
pub const LIPSCHITZ_TOLERANCE: f64 = 1e-9;
/// Required agreement between the two extension routes.
pub const EXTENSION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Barrier(#[from] BarrierError),
    #[error("model document is malformed: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported model document `{format}` version {version}")]
    Version { format: String, version: u32 },
    #[error("w_star has {found} entries, the sample has {expected} points")]
    Length { expected: usize, found: usize },
    #[error("w_star[{index}] = {value} is outside [{theta}, 1 - {theta}]")]
    Range { index: usize, value: f64, theta: f64 },
    #[error("fitted values at points {i} and {j} differ by {gap}, more than L * rho = {bound}")]
    Lipschitz { i: usize, j: usize, gap: f64, bound: f64 },
    #[error("invalid model parameter {name} = {value}")]
    Parameter { name: &'static str, value: f64 },
    #[error("query {query} uses {found} input, the model expects {expected}")]
    Mode { query: usize, expected: InputMode, found: InputMode },
    #[error("query is at distance 0 from points {i} and {j}, which have different fitted values")]
    Inconsistent { i: usize, j: usize },
    #[error("distance vector has {found} entries, the model has {expected} points")]
    Dimension { expected: usize, found: usize },
    #[error("distance {value} to point {index} is negative or not finite")]
    Distance { index: usize, value: f64 },
    #[error("extension routes disagree: pair enumeration {pair}, midpoint {midpoint}")]
    Disagreement { pair: f64, midpoint: f64 },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Fitted values on the (merged) reference points together with `L` and `theta`.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    sample: Sample,
    w_star: DVector<f64>,
    lipschitz: f64,
    theta: f64,
    ddim: Option<f64>,
}

impl Model {
    /// Wraps fitted values, checking the range and Lipschitz invariants.
    pub fn new(
        sample: Sample,
        w_star: DVector<f64>,
        lipschitz: f64,
        theta: f64,
        ddim: Option<f64>,
    ) -> Result<Self> {
        let m = Self { sample, w_star, lipschitz, theta, ddim };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        if !(self.lipschitz > 0.0 && self.lipschitz.is_finite()) {
            return Err(ModelError::Parameter { name: "lipschitz", value: self.lipschitz });
        }
        if !(self.theta >= 0.0 && self.theta < 0.5) {
            return Err(ModelError::Parameter { name: "theta", value: self.theta });
        }
        if let Some(d) = self.ddim {
            if !(d >= 1.0 && d.is_finite()) {
                return Err(ModelError::Parameter { name: "ddim", value: d });
            }
        }
        let scale = self.sample.scale();
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(ModelError::Parameter { name: "scale", value: scale });
        }
        let n = self.sample.len();
        if self.w_star.len() != n {
            return Err(ModelError::Length { expected: n, found: self.w_star.len() });
        }
        let (lo, hi) = (self.theta, 1.0 - self.theta);
        for (index, &value) in self.w_star.iter().enumerate() {
            if !(value >= lo && value <= hi) {
                return Err(ModelError::Range { index, value, theta: self.theta });
            }
        }
        for i in 0..n {
            for j in (i + 1)..n {
                let gap = (self.w_star[i] - self.w_star[j]).abs();
                let bound = self.lipschitz * self.sample.distance(i, j);
                if gap > bound + LIPSCHITZ_TOLERANCE {
                    return Err(ModelError::Lipschitz { i, j, gap, bound });
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self) -> &Sample {
        &self.sample
    }

    pub fn w_star(&self) -> &DVector<f64> {
        &self.w_star
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn scale(&self) -> f64 {
        self.sample.scale()
    }

    pub fn ddim(&self) -> Option<f64> {
        self.ddim
    }

    pub fn mode(&self) -> InputMode {
        self.sample.mode()
    }

    /// Prediction at a single query given as raw coordinates or a raw distance row.
    pub fn predict(&self, query: &[f64]) -> Result<f64> {
        let rho = self.sample.distances_to(query)?;
        extend(self, &rho)
    }
}

/// Fits `w_star` with the interior-point solver and wraps it in a model.
pub fn fit_model(
    sample: &Sample,
    lipschitz: f64,
    theta: f64,
    ddim: Option<f64>,
    opts: &SolveOptions,
) -> Result<(Model, FitResult)> {
    let p = Polytope::new(sample, lipschitz, theta)?;
    let fit = solver::fit(sample, &p, opts)?;
    let model = Model::new(sample.clone(), fit.w_star.clone(), lipschitz, theta, ddim)?;
    Ok((model, fit))
}

fn check_distances(n: usize, rho: &[f64]) -> Result<()> {
    if rho.len() != n {
        return Err(ModelError::Dimension { expected: n, found: rho.len() });
    }
    if let Some((index, &value)) = rho.iter().enumerate().find(|(_, d)| !(**d >= 0.0 && d.is_finite())) {
        return Err(ModelError::Distance { index, value });
    }
    Ok(())
}

/// Value at a query with normalized distances `rho` to the reference points.
pub fn extend(model: &Model, rho: &[f64]) -> Result<f64> {
    let w = model.w_star.as_slice();
    check_distances(w.len(), rho)?;
    let y = match exact_hit(w, rho)? {
        Some(y) => y,
        None => {
            let pair = pair_extension(w, rho);
            let midpoint = midpoint_extension(w, rho);
            if (pair - midpoint).abs() > EXTENSION_TOLERANCE {
                return Err(ModelError::Disagreement { pair, midpoint });
            }
            pair
        }
    };
    Ok(y.clamp(model.theta, 1.0 - model.theta))
}

fn exact_hit(w: &[f64], rho: &[f64]) -> Result<Option<f64>> {
    let mut hit: Option<usize> = None;
    for (k, &d) in rho.iter().enumerate() {
        if d == 0.0 {
            match hit {
                Some(i) if w[i] != w[k] => return Err(ModelError::Inconsistent { i, j: k }),
                Some(_) => {}
                None => hit = Some(k),
            }
        }
    }
    if w.len() == 1 {
        return Ok(Some(w[0]));
    }
    Ok(hit.map(|k| w[k]))
}

/// Pair enumeration; `rho` must be strictly positive and `w` nonempty.
pub fn pair_extension(w: &[f64], rho: &[f64]) -> f64 {
    let mut best_slope = f64::NEG_INFINITY;
    let mut best = w[0];
    for i in 0..w.len() {
        for j in (i + 1)..w.len() {
            let denom = rho[i] + rho[j];
            let slope = (w[i] - w[j]).abs() / denom;
            if slope > best_slope {
                best_slope = slope;
                best = (w[j] * rho[i] + w[i] * rho[j]) / denom;
            }
        }
    }
    best
}

/// Lower and upper McShane envelopes at constant `l`.
fn envelopes(w: &[f64], rho: &[f64], l: f64) -> (f64, usize, f64, usize) {
    let (mut lo, mut lo_arg) = (f64::NEG_INFINITY, 0);
    let (mut hi, mut hi_arg) = (f64::INFINITY, 0);
    for (k, (&wk, &rk)) in w.iter().zip(rho).enumerate() {
        let a = wk - l * rk;
        if a > lo || (a == lo && rk > rho[lo_arg]) {
            lo = a;
            lo_arg = k;
        }
        let b = wk + l * rk;
        if b < hi || (b == hi && rk > rho[hi_arg]) {
            hi = b;
            hi_arg = k;
        }
    }
    (lo, lo_arg, hi, hi_arg)
}

/// Midpoint of the McShane envelopes at the smallest constant that makes
/// them meet. The gap `lo(L) - hi(L)` is convex, piecewise linear and
/// decreasing, so Newton's method from `L = 0` increases monotonically to
/// the root and stops after finitely many pieces.
pub fn midpoint_extension(w: &[f64], rho: &[f64]) -> f64 {
    let mut l = 0.0;
    for _ in 0..(2 * w.len() + 8) {
        let (lo, lo_arg, hi, hi_arg) = envelopes(w, rho, l);
        let gap = lo - hi;
        if gap <= 0.0 {
            break;
        }
        let next = l + gap / (rho[lo_arg] + rho[hi_arg]);
        if next <= l {
            break;
        }
        l = next;
    }
    let (lo, _, hi, _) = envelopes(w, rho, l);
    0.5 * (lo + hi)
}

/// Query batch in the representation matching the model's input mode.
#[derive(Debug, Clone, PartialEq)]
pub enum Queries {
    /// Raw coordinates, rescaled by the stored normalization factor.
    Points(Vec<Vec<f64>>),
    /// Raw distances to every original training observation.
    DistanceRows(Vec<Vec<f64>>),
}

impl Queries {
    pub fn mode(&self) -> InputMode {
        match self {
            Queries::Points(_) => InputMode::Coordinates,
            Queries::DistanceRows(_) => InputMode::Matrix,
        }
    }

    fn rows(&self) -> &[Vec<f64>] {
        match self {
            Queries::Points(r) | Queries::DistanceRows(r) => r,
        }
    }
}

pub fn predict_batch(model: &Model, queries: &Queries) -> Result<Vec<f64>> {
    let expected = model.mode();
    let found = queries.mode();
    if expected != found && !queries.rows().is_empty() {
        return Err(ModelError::Mode { query: 0, expected, found });
    }
    queries.rows().iter().map(|q| model.predict(q)).collect()
}

/// Mean log loss in nats of the model's predictions on labeled queries.
pub fn holdout_log_loss(model: &Model, queries: &Queries, labels: &[u8]) -> Result<f64> {
    let preds = predict_batch(model, queries)?;
    if preds.len() != labels.len() {
        return Err(DataError::LabelCount { expected: preds.len(), found: labels.len() }.into());
    }
    if preds.is_empty() {
        return Err(DataError::Empty.into());
    }
    let total: f64 = preds.iter().zip(labels).map(|(&p, &y)| objective::log_loss(y, p)).sum();
    Ok(total / preds.len() as f64)
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelDocument {
    format: String,
    version: u32,
    mode: InputMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    norm: Option<Norm>,
    lipschitz: f64,
    theta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ddim: Option<f64>,
    scale: f64,
    /// Merged reference coordinates (coordinate mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    points: Option<Vec<Vec<f64>>>,
    /// Normalized merged distance matrix (matrix mode).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    distances: Option<Vec<Vec<f64>>>,
    ones: Vec<u32>,
    zeros: Vec<u32>,
    /// Merged index of each original observation.
    groups: Vec<usize>,
    w_star: Vec<f64>,
}

pub fn save_model<W: Write>(model: &Model, mut sink: W) -> Result<()> {
    let s = &model.sample;
    let (norm, points, distances) = match s.geometry() {
        Geometry::Coordinates { points, norm } => (Some(*norm), Some(points.clone()), None),
        Geometry::Matrix => {
            let d = s.distances();
            let rows = (0..d.nrows()).map(|i| d.row(i).iter().copied().collect()).collect();
            (None, None, Some(rows))
        }
    };
    let doc = ModelDocument {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        mode: s.mode(),
        norm,
        lipschitz: model.lipschitz,
        theta: model.theta,
        ddim: model.ddim,
        scale: s.scale(),
        points,
        distances,
        ones: s.ones().to_vec(),
        zeros: s.zeros().to_vec(),
        groups: s.groups().to_vec(),
        w_star: model.w_star.iter().copied().collect(),
    };
    serde_json::to_writer_pretty(&mut sink, &doc)?;
    writeln!(sink)?;
    Ok(())
}

fn missing(field: &'static str) -> ModelError {
    ModelError::Malformed(serde::de::Error::missing_field(field))
}

pub fn load_model<R: Read>(source: R) -> Result<Model> {
    let doc: ModelDocument = serde_json::from_reader(source)?;
    if doc.format != MODEL_FORMAT || doc.version != MODEL_VERSION {
        return Err(ModelError::Version { format: doc.format, version: doc.version });
    }
    if !(doc.scale > 0.0 && doc.scale.is_finite()) {
        return Err(ModelError::Parameter { name: "scale", value: doc.scale });
    }
    let (geometry, distances) = match doc.mode {
        InputMode::Coordinates => {
            let points = doc.points.ok_or_else(|| missing("points"))?;
            let norm = doc.norm.ok_or_else(|| missing("norm"))?;
            let dim = points.first().map_or(0, Vec::len);
            if let Some(index) = points.iter().position(|p| p.len() != dim) {
                return Err(DataError::DimensionMismatch { index, expected: dim, found: points[index].len() }.into());
            }
            let n = points.len();
            let d = DMatrix::from_fn(n, n, |i, j| norm.distance(&points[i], &points[j]) / doc.scale);
            (Geometry::Coordinates { points, norm }, d)
        }
        InputMode::Matrix => {
            let rows = doc.distances.ok_or_else(|| missing("distances"))?;
            let n = rows.len();
            if let Some(r) = rows.iter().find(|r| r.len() != n) {
                return Err(DataError::NotSquare { rows: n, columns: r.len() }.into());
            }
            (Geometry::Matrix, DMatrix::from_fn(n, n, |i, j| rows[i][j]))
        }
    };
    let m = distances.nrows();
    if let Some(&g) = doc.groups.iter().find(|&&g| g >= m) {
        return Err(ModelError::Dimension { expected: m, found: g + 1 });
    }
    let sample = Sample::from_parts(distances, doc.ones, doc.zeros, doc.scale, geometry, doc.groups)?;
    Model::new(sample, DVector::from_vec(doc.w_star), doc.lipschitz, doc.theta, doc.ddim)
}
