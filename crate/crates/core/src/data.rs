//! Sample ingestion: CSV parsing, distance-matrix validation, duplicate
//! merging and diameter normalization.
//!
//! A [`Sample`] always holds *merged* points. Points at distance zero are
//! collapsed into a single optimization variable carrying the number of
//! 1-labels and 0-labels observed there, because the Lipschitz constraint
//! `|w_i - w_j| <= L * 0` pins them to the same value anyway.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Tolerance used when reporting triangle-inequality violations.
pub const TRIANGLE_TOLERANCE: f64 = 1e-12;

/// Cap applied by [`default_theta`] so the truncation stays strictly inside (0, 1/2).
pub const THETA_CAP: f64 = 0.49;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error at line {line}: {message}")]
    Csv { line: u64, message: String },
    #[error("input has no header row")]
    MissingHeader,
    #[error("header has no `label` column")]
    NoLabelColumn,
    #[error("input contains no data rows")]
    Empty,
    #[error("line {line}: expected {expected} fields, found {found}")]
    Ragged { line: u64, expected: usize, found: usize },
    #[error("line {line}, column `{column}`: cannot parse `{value}` as a number")]
    BadNumber { line: u64, column: String, value: String },
    #[error("line {line}, column `{column}`: value is not finite")]
    NonFinite { line: u64, column: String },
    #[error("line {line}: label `{value}` is not 0 or 1")]
    BadLabel { line: u64, value: String },
    #[error("distance matrix is {rows}x{columns}, expected square")]
    NotSquare { rows: usize, columns: usize },
    #[error("distance matrix is not symmetric at ({i},{j}): {upper} vs {lower}")]
    Asymmetric { i: usize, j: usize, upper: f64, lower: f64 },
    #[error("negative distance {value} at ({i},{j})")]
    NegativeDistance { i: usize, j: usize, value: f64 },
    #[error("nonzero diagonal entry {value} at ({i},{i})")]
    NonzeroDiagonal { i: usize, value: f64 },
    #[error("expected {expected} labels, found {found}")]
    LabelCount { expected: usize, found: usize },
    #[error("point {index} has {found} coordinates, expected {expected}")]
    DimensionMismatch { index: usize, expected: usize, found: usize },
    #[error("invalid norm `{0}`: expected p >= 1 or `inf`")]
    BadNorm(String),
    #[error("sample size must be positive")]
    NonPositiveSampleSize,
    #[error("doubling dimension must be a finite value >= 1, got {0}")]
    BadDdim(f64),
    #[error("truncation level must lie in (0, 1/2), got {0}")]
    BadTheta(f64),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// The vector norm used to turn coordinates into distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Norm {
    Lp(f64),
    Max,
}

impl Norm {
    pub const EUCLIDEAN: Norm = Norm::Lp(2.0);

    pub fn distance(&self, a: &[f64], b: &[f64]) -> f64 {
        let diffs = a.iter().zip(b).map(|(x, y)| (x - y).abs());
        match *self {
            Norm::Max => diffs.fold(0.0, f64::max),
            Norm::Lp(p) if p == 1.0 => diffs.sum(),
            Norm::Lp(p) if p == 2.0 => diffs.map(|d| d * d).sum::<f64>().sqrt(),
            Norm::Lp(p) => diffs.map(|d| d.powf(p)).sum::<f64>().powf(1.0 / p),
        }
    }
}

impl Default for Norm {
    fn default() -> Self {
        Norm::EUCLIDEAN
    }
}

impl FromStr for Norm {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "max" | "infinity" => Ok(Norm::Max),
            other => match other.parse::<f64>() {
                Ok(p) if p.is_infinite() && p > 0.0 => Ok(Norm::Max),
                Ok(p) if p >= 1.0 => Ok(Norm::Lp(p)),
                _ => Err(DataError::BadNorm(s.to_string())),
            },
        }
    }
}

impl fmt::Display for Norm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Norm::Lp(p) => write!(f, "{p}"),
            Norm::Max => write!(f, "inf"),
        }
    }
}

/// How the sample's geometry was supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum Geometry {
    /// Raw (unscaled) coordinates of each merged point, plus the norm.
    Coordinates { points: Vec<Vec<f64>>, norm: Norm },
    /// Distances were given directly.
    Matrix,
}

impl Geometry {
    pub fn mode(&self) -> InputMode {
        match self {
            Geometry::Coordinates { .. } => InputMode::Coordinates,
            Geometry::Matrix => InputMode::Matrix,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputMode {
    Coordinates,
    Matrix,
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputMode::Coordinates => f.write_str("coords"),
            InputMode::Matrix => f.write_str("matrix"),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoadOptions {
    pub mode: InputMode,
    pub norm: Norm,
    /// Rescale distances so the diameter is 1.
    pub normalize: bool,
}

impl LoadOptions {
    pub fn coordinates() -> Self {
        Self { mode: InputMode::Coordinates, norm: Norm::EUCLIDEAN, normalize: true }
    }

    pub fn matrix() -> Self {
        Self { mode: InputMode::Matrix, norm: Norm::EUCLIDEAN, normalize: true }
    }
}

/// Labeled points with pairwise distances, after duplicate merging.
///
/// `ones[i]` and `zeros[i]` count the 1- and 0-labels observed at merged
/// point `i`; their sum is the point's multiplicity. All off-diagonal
/// distances are strictly positive.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    distances: DMatrix<f64>,
    ones: Vec<u32>,
    zeros: Vec<u32>,
    scale: f64,
    geometry: Geometry,
    groups: Vec<usize>,
}

impl Sample {
    /// Builds a sample from a full distance matrix over the original points.
    pub fn from_matrix(distances: DMatrix<f64>, labels: &[u8], normalize: bool) -> Result<Self> {
        let distances = validate_matrix(distances)?;
        check_labels(labels, distances.nrows())?;
        Self::assemble(distances, labels, normalize, Geometry::Matrix, None)
    }

    /// Builds a sample from coordinates; distances are computed under `norm`.
    pub fn from_coordinates(
        points: Vec<Vec<f64>>,
        labels: &[u8],
        norm: Norm,
        normalize: bool,
    ) -> Result<Self> {
        check_labels(labels, points.len())?;
        let dim = points.first().map_or(0, Vec::len);
        for (index, p) in points.iter().enumerate() {
            if p.len() != dim {
                return Err(DataError::DimensionMismatch { index, expected: dim, found: p.len() });
            }
        }
        let n = points.len();
        let distances = DMatrix::from_fn(n, n, |i, j| norm.distance(&points[i], &points[j]));
        let geometry = Geometry::Coordinates { points: Vec::new(), norm };
        Self::assemble(distances, labels, normalize, geometry, Some(points))
    }

    fn assemble(
        raw: DMatrix<f64>,
        labels: &[u8],
        normalize: bool,
        geometry: Geometry,
        points: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let n = raw.nrows();
        if n == 0 {
            return Err(DataError::Empty);
        }
        let groups = zero_distance_groups(&raw);
        let m = groups.iter().copied().max().map_or(0, |g| g + 1);

        let mut ones = vec![0u32; m];
        let mut zeros = vec![0u32; m];
        for (&g, &y) in groups.iter().zip(labels) {
            if y == 1 {
                ones[g] += 1;
            } else {
                zeros[g] += 1;
            }
        }

        // A merged point inherits the tightest distance of any of its members.
        let mut merged = DMatrix::from_element(m, m, f64::INFINITY);
        for i in 0..n {
            for j in 0..n {
                let (gi, gj) = (groups[i], groups[j]);
                if gi != gj {
                    merged[(gi, gj)] = merged[(gi, gj)].min(raw[(i, j)]);
                }
            }
        }
        merged.fill_diagonal(0.0);

        let diameter = raw.iter().copied().fold(0.0, f64::max);
        let scale = if normalize && diameter > 0.0 { diameter } else { 1.0 };
        if scale != 1.0 {
            merged /= scale;
        }

        let geometry = match (geometry, points) {
            (Geometry::Coordinates { norm, .. }, Some(points)) => {
                let mut reps: Vec<Option<Vec<f64>>> = vec![None; m];
                for (p, &g) in points.into_iter().zip(&groups) {
                    reps[g].get_or_insert(p);
                }
                Geometry::Coordinates { points: reps.into_iter().flatten().collect(), norm }
            }
            (g, _) => g,
        };

        Ok(Self { distances: merged, ones, zeros, scale, geometry, groups })
    }

    /// Number of merged points (optimization variables).
    pub fn len(&self) -> usize {
        self.ones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ones.is_empty()
    }

    /// Number of original observations, i.e. the sum of all multiplicities.
    pub fn total_count(&self) -> usize {
        self.groups.len()
    }

    pub fn distances(&self) -> &DMatrix<f64> {
        &self.distances
    }

    pub fn distance(&self, i: usize, j: usize) -> f64 {
        self.distances[(i, j)]
    }

    pub fn ones(&self) -> &[u32] {
        &self.ones
    }

    pub fn zeros(&self) -> &[u32] {
        &self.zeros
    }

    pub fn weight(&self, i: usize) -> u32 {
        self.ones[i] + self.zeros[i]
    }

    pub fn weights(&self) -> Vec<u32> {
        self.ones.iter().zip(&self.zeros).map(|(a, b)| a + b).collect()
    }

    /// Factor the raw distances were divided by (1 when not normalized).
    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geometry
    }

    pub fn mode(&self) -> InputMode {
        self.geometry.mode()
    }

    /// Merged index of each original observation, in input order.
    pub fn groups(&self) -> &[usize] {
        &self.groups
    }

    /// Largest normalized distance.
    pub fn diameter(&self) -> f64 {
        self.distances.iter().copied().fold(0.0, f64::max)
    }

    /// Reassembles a sample from stored parts (used by model loading).
    pub(crate) fn from_parts(
        distances: DMatrix<f64>,
        ones: Vec<u32>,
        zeros: Vec<u32>,
        scale: f64,
        geometry: Geometry,
        groups: Vec<usize>,
    ) -> Result<Self> {
        let distances = validate_matrix(distances)?;
        let m = distances.nrows();
        if ones.len() != m || zeros.len() != m {
            return Err(DataError::LabelCount { expected: m, found: ones.len().min(zeros.len()) });
        }
        for i in 0..m {
            for j in 0..m {
                if i != j && distances[(i, j)] <= 0.0 {
                    return Err(DataError::NegativeDistance { i, j, value: distances[(i, j)] });
                }
            }
        }
        Ok(Self { distances, ones, zeros, scale, geometry, groups })
    }

    /// Distances from a query to every merged point, in normalized units.
    ///
    /// In coordinate mode `query` holds raw coordinates; in matrix mode it
    /// holds raw distances to each *original* observation.
    pub fn distances_to(&self, query: &[f64]) -> Result<Vec<f64>> {
        match &self.geometry {
            Geometry::Coordinates { points, norm } => {
                let dim = points.first().map_or(0, Vec::len);
                if query.len() != dim {
                    return Err(DataError::DimensionMismatch {
                        index: 0,
                        expected: dim,
                        found: query.len(),
                    });
                }
                Ok(points.iter().map(|p| norm.distance(p, query) / self.scale).collect())
            }
            Geometry::Matrix => {
                if query.len() != self.groups.len() {
                    return Err(DataError::DimensionMismatch {
                        index: 0,
                        expected: self.groups.len(),
                        found: query.len(),
                    });
                }
                let mut out = vec![f64::INFINITY; self.len()];
                for (j, (&d, &g)) in query.iter().zip(&self.groups).enumerate() {
                    if d < 0.0 || !d.is_finite() {
                        return Err(DataError::NegativeDistance { i: 0, j, value: d });
                    }
                    out[g] = out[g].min(d / self.scale);
                }
                Ok(out)
            }
        }
    }

    /// All triples `(i, j, k)` with `rho(i,j) > rho(i,k) + rho(k,j) + 1e-12`.
    pub fn check_triangle_inequality(&self) -> Vec<(usize, usize, usize)> {
        let n = self.len();
        let d = &self.distances;
        let mut out = Vec::new();
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                for k in 0..n {
                    if k != i && k != j && d[(i, j)] > d[(i, k)] + d[(k, j)] + TRIANGLE_TOLERANCE {
                        out.push((i, j, k));
                    }
                }
            }
        }
        out
    }

    /// Writes the sample in the CSV layout accepted by [`load_sample`].
    ///
    /// Merged points are expanded back into one row per observation (ones
    /// first), so loading the output reproduces the same merged sample.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let rows: Vec<(usize, u8)> = (0..self.len())
            .flat_map(|i| {
                std::iter::repeat_n((i, 1u8), self.ones[i] as usize)
                    .chain(std::iter::repeat_n((i, 0u8), self.zeros[i] as usize))
            })
            .collect();
        let csv_err = |e: csv::Error| DataError::Csv { line: 0, message: e.to_string() };
        match &self.geometry {
            Geometry::Coordinates { points, .. } => {
                let dim = points.first().map_or(0, Vec::len);
                let mut header: Vec<String> = (1..=dim).map(|k| format!("x{k}")).collect();
                header.push("label".into());
                w.write_record(&header).map_err(csv_err)?;
                for &(i, y) in &rows {
                    let mut rec: Vec<String> = points[i].iter().map(|v| format!("{v:?}")).collect();
                    rec.push(y.to_string());
                    w.write_record(&rec).map_err(csv_err)?;
                }
            }
            Geometry::Matrix => {
                let mut header: Vec<String> = (1..=rows.len()).map(|k| format!("d{k}")).collect();
                header.push("label".into());
                w.write_record(&header).map_err(csv_err)?;
                for &(i, y) in &rows {
                    let mut rec: Vec<String> =
                        rows.iter().map(|&(j, _)| format!("{:?}", self.distances[(i, j)])).collect();
                    rec.push(y.to_string());
                    w.write_record(&rec).map_err(csv_err)?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn check_labels(labels: &[u8], n: usize) -> Result<()> {
    if labels.len() != n {
        return Err(DataError::LabelCount { expected: n, found: labels.len() });
    }
    if let Some(&bad) = labels.iter().find(|&&y| y > 1) {
        return Err(DataError::BadLabel { line: 0, value: bad.to_string() });
    }
    Ok(())
}

/// Checks squareness, symmetry, sign and diagonal; returns the exactly
/// symmetrized matrix.
fn validate_matrix(mut d: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = d.nrows();
    if d.ncols() != n {
        return Err(DataError::NotSquare { rows: n, columns: d.ncols() });
    }
    for i in 0..n {
        let v = d[(i, i)];
        if v != 0.0 {
            return Err(DataError::NonzeroDiagonal { i, value: v });
        }
        for j in 0..n {
            let v = d[(i, j)];
            if v < 0.0 || v.is_nan() {
                return Err(DataError::NegativeDistance { i, j, value: v });
            }
        }
    }
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (d[(i, j)], d[(j, i)]);
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                return Err(DataError::Asymmetric { i, j, upper: a, lower: b });
            }
            let avg = 0.5 * (a + b);
            d[(i, j)] = avg;
            d[(j, i)] = avg;
        }
    }
    Ok(d)
}

/// Connected components of the zero-distance graph, numbered by first
/// appearance.
fn zero_distance_groups(d: &DMatrix<f64>) -> Vec<usize> {
    let n = d.nrows();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if d[(i, j)] == 0.0 {
                let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
                if ri != rj {
                    parent[ri.max(rj)] = ri.min(rj);
                }
            }
        }
    }
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    let mut groups = Vec::with_capacity(n);
    for i in 0..n {
        let r = find(&mut parent, i);
        if label[r] == usize::MAX {
            label[r] = next;
            next += 1;
        }
        groups.push(label[r]);
    }
    groups
}

/// A parsed numeric CSV table with an optional `label` column split off.
#[derive(Debug, Clone, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    pub labels: Option<Vec<u8>>,
}

/// Reads a headed CSV of decimal numbers. A column named `label` (any case)
/// is parsed as {0,1} and returned separately. Lines starting with `#` are
/// skipped. An entirely empty input yields an empty table.
pub fn read_table<R: Read>(source: R) -> Result<Table> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader
        .headers()
        .map_err(|e| DataError::Csv { line: 1, message: e.to_string() })?
        .clone();
    if headers.is_empty() {
        return Ok(Table::default());
    }
    let label_col = headers.iter().position(|h| h.eq_ignore_ascii_case("label"));
    let columns: Vec<String> = headers
        .iter()
        .enumerate()
        .filter(|(k, _)| Some(*k) != label_col)
        .map(|(_, h)| h.to_string())
        .collect();

    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Csv {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        if record.len() != headers.len() {
            return Err(DataError::Ragged { line, expected: headers.len(), found: record.len() });
        }
        let mut row = Vec::with_capacity(columns.len());
        for (k, field) in record.iter().enumerate() {
            if Some(k) == label_col {
                labels.push(parse_label(field, line)?);
                continue;
            }
            let v: f64 = field.parse().map_err(|_| DataError::BadNumber {
                line,
                column: headers[k].to_string(),
                value: field.to_string(),
            })?;
            if !v.is_finite() {
                return Err(DataError::NonFinite { line, column: headers[k].to_string() });
            }
            row.push(v);
        }
        rows.push(row);
    }
    Ok(Table { columns, rows, labels: label_col.map(|_| labels) })
}

fn parse_label(field: &str, line: u64) -> Result<u8> {
    match field.parse::<f64>() {
        Ok(v) if v == 0.0 => Ok(0),
        Ok(v) if v == 1.0 => Ok(1),
        _ => Err(DataError::BadLabel { line, value: field.to_string() }),
    }
}

/// Loads and validates a labeled sample.
///
/// Coordinate mode expects columns `x1..xk,label`; matrix mode expects
/// `d1..dn,label` where row `i` holds the distances from point `i`.
pub fn load_sample<R: Read>(source: R, options: LoadOptions) -> Result<Sample> {
    let table = read_table(source)?;
    if table.columns.is_empty() && table.labels.is_none() {
        return Err(DataError::MissingHeader);
    }
    let labels = table.labels.ok_or(DataError::NoLabelColumn)?;
    if table.rows.is_empty() {
        return Err(DataError::Empty);
    }
    match options.mode {
        InputMode::Coordinates => {
            Sample::from_coordinates(table.rows, &labels, options.norm, options.normalize)
        }
        InputMode::Matrix => {
            let n = table.rows.len();
            let cols = table.columns.len();
            if cols != n {
                return Err(DataError::NotSquare { rows: n, columns: cols });
            }
            let flat: Vec<f64> = table.rows.into_iter().flatten().collect();
            let d = DMatrix::from_row_slice(n, n, &flat);
            Sample::from_matrix(d, &labels, options.normalize)
        }
    }
}

/// Truncation level and doubling dimension.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TruncationParams {
    pub theta: f64,
    pub ddim: f64,
}

impl TruncationParams {
    pub fn new(theta: f64, ddim: f64) -> Result<Self> {
        if !(theta > 0.0 && theta < 0.5) {
            return Err(DataError::BadTheta(theta));
        }
        if !(ddim >= 1.0 && ddim.is_finite()) {
            return Err(DataError::BadDdim(ddim));
        }
        Ok(Self { theta, ddim })
    }

    /// Uses the rate-optimal truncation for `n` observations.
    pub fn auto(n: usize, ddim: f64) -> Result<Self> {
        Self::new(default_theta(n, ddim)?, ddim)
    }
}

/// Truncation rate `n^(-1/(d+2))`, capped at 0.49.
pub fn default_theta(n: usize, ddim: f64) -> Result<f64> {
    if n == 0 {
        return Err(DataError::NonPositiveSampleSize);
    }
    if !(ddim >= 1.0 && ddim.is_finite()) {
        return Err(DataError::BadDdim(ddim));
    }
    Ok((n as f64).powf(-1.0 / (ddim + 2.0)).min(THETA_CAP))
}
