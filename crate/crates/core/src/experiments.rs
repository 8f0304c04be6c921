//! Seeded Monte-Carlo runs of the truncation lower-bound constructions, an
//! anti-concentration check, and closed-form generalization bounds.
//!
//! Every run uses `ChaCha8Rng::seed_from_u64(seed)` and records the seed, so
//! reports are bit-reproducible.

use std::collections::BTreeMap;
use std::f64::consts::LN_2;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::objective::{self, LogBase, ObjectiveError};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// First-term constant of the generalization bound (Rademacher constant, doubled).
pub const RADEMACHER_CONSTANT: f64 = 2.0 * 2520.0;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("at least one trial is required")]
    NoTrials,
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("parameter {name} = {value} is out of range")]
    Range { name: &'static str, value: f64 },
    #[error("empirical-risk bookkeeping mismatch in trial {trial}: {detail}")]
    Bookkeeping { trial: u64, detail: String },
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = ExperimentError> = std::result::Result<T, E>;

/// Outcome of a batch of Bernoulli trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub experiment: String,
    pub seed: u64,
    pub trials: u64,
    pub successes: u64,
    pub estimate: f64,
    pub wilson_lo: f64,
    pub wilson_hi: f64,
    pub params: BTreeMap<String, f64>,
    /// Closed-form quantities the estimate is compared against.
    pub reference: BTreeMap<String, f64>,
}

impl TrialReport {
    fn new(experiment: &str, seed: u64, trials: u64, successes: u64) -> Self {
        let (wilson_lo, wilson_hi) = wilson_interval(successes, trials);
        Self {
            experiment: experiment.to_string(),
            seed,
            trials,
            successes,
            estimate: successes as f64 / trials as f64,
            wilson_lo,
            wilson_hi,
            params: BTreeMap::new(),
            reference: BTreeMap::new(),
        }
    }

    fn param(mut self, name: &str, value: f64) -> Self {
        self.params.insert(name.to_string(), value);
        self
    }

    fn reference(mut self, name: &str, value: f64) -> Self {
        self.reference.insert(name.to_string(), value);
        self
    }

    pub fn contains(&self, p: f64) -> bool {
        self.wilson_lo <= p && p <= self.wilson_hi
    }

    pub fn write_json<W: Write>(&self, mut sink: W) -> Result<()> {
        serde_json::to_writer_pretty(&mut sink, self)?;
        writeln!(sink)?;
        Ok(())
    }

    /// One header row and one data row; parameters and references become
    /// `param_*` and `ref_*` columns.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header: Vec<String> =
            ["experiment", "seed", "trials", "successes", "estimate", "wilson_lo", "wilson_hi"]
                .iter()
                .map(|s| s.to_string())
                .collect();
        let mut row = vec![
            self.experiment.clone(),
            self.seed.to_string(),
            self.trials.to_string(),
            self.successes.to_string(),
            format!("{:?}", self.estimate),
            format!("{:?}", self.wilson_lo),
            format!("{:?}", self.wilson_hi),
        ];
        for (k, v) in &self.params {
            header.push(format!("param_{k}"));
            row.push(format!("{v:?}"));
        }
        for (k, v) in &self.reference {
            header.push(format!("ref_{k}"));
            row.push(format!("{v:?}"));
        }
        w.write_record(&header)?;
        w.write_record(&row)?;
        w.flush()?;
        Ok(())
    }
}

/// 95% Wilson score interval for `successes` out of `trials`.
pub fn wilson_interval(successes: u64, trials: u64) -> (f64, f64) {
    if trials == 0 {
        return (0.0, 1.0);
    }
    let n = trials as f64;
    let p = successes as f64 / n;
    let z2 = Z95 * Z95;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = Z95 / denom * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((center - half).max(0.0).min(p), (center + half).min(1.0).max(p))
}

/// Binary entropy in nats.
pub fn binary_entropy(p: f64) -> f64 {
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.ln();
    }
    if p < 1.0 {
        h -= (1.0 - p) * (-p).ln_1p();
    }
    h
}

fn check_trials(trials: u64) -> Result<()> {
    if trials == 0 {
        Err(ExperimentError::NoTrials)
    } else {
        Ok(())
    }
}

/// Single-point construction with `P(Y = 1) = 1/(2n)`. A trial succeeds when
/// all `n` labels are 0, the event in which ERM over a class that is not
/// `e^{-4 eps n}`-truncated picks a value at most `e^{-4 eps n}`.
pub fn realizable_lb_trial(n: u64, eps: f64, seed: u64, trials: u64) -> Result<TrialReport> {
    check_trials(trials)?;
    if n == 0 {
        return Err(ExperimentError::Range { name: "n", value: 0.0 });
    }
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(ExperimentError::Range { name: "eps", value: eps });
    }
    let nf = n as f64;
    let p = 1.0 / (2.0 * nf);
    let q = (-4.0 * eps * nf).exp();
    if !(q < 0.5) {
        return Err(ExperimentError::Precondition(format!("e^(-4 eps n) = {q} is not below 1/2")));
    }
    let h = binary_entropy(p);
    if h > eps {
        return Err(ExperimentError::Precondition(format!("H(1/(2n)) = {h} exceeds eps = {eps}")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut successes = 0;
    for _ in 0..trials {
        if (0..n).all(|_| rng.gen::<f64>() >= p) {
            successes += 1;
        }
    }

    let exact = (nf * (-p).ln_1p()).exp();
    // Excess risk of the truncated-away value q over the Bayes value p.
    let excess = objective::expected_risk(&[q], &[p], &[1.0], LogBase::E)?
        - objective::expected_risk(&[p], &[p], &[1.0], LogBase::E)?;
    Ok(TrialReport::new("realizable", seed, trials, successes)
        .param("n", nf)
        .param("eps", eps)
        .reference("exact_probability", exact)
        .reference("excess_risk", excess)
        .reference("witness", 2.0 * eps - h)
        .reference("entropy", h))
}

/// Values of the two hypotheses on the points 1, 2, 3 of the agnostic construction.
pub fn agnostic_hypotheses(c: f64) -> [[f64; 3]; 2] {
    let tiny = (-c).exp2();
    [[0.5, 0.5, tiny], [0.25, tiny, 0.5]]
}

/// Base-2 losses `[loss at y = 0, loss at y = 1]` of a value `h`, written so
/// that `h = 2^-C` gives exactly `C` at `y = 1`.
fn bit_losses(h: f64, c: f64) -> [f64; 2] {
    let tiny = (-c).exp2();
    if h == tiny {
        [-(-tiny).ln_1p() / LN_2, c]
    } else {
        [-(-h).ln_1p() / LN_2, -h.log2()]
    }
}

/// Uniform distribution on `{1,2,3} x {0,1}` with two hypotheses; a trial
/// succeeds when ERM strictly prefers the hypothesis with larger risk.
pub fn agnostic_lb_trial(n: u64, c: f64, seed: u64, trials: u64) -> Result<TrialReport> {
    check_trials(trials)?;
    if n == 0 {
        return Err(ExperimentError::Range { name: "n", value: 0.0 });
    }
    let nf = n as f64;
    if !(c > nf.sqrt() && c.is_finite()) {
        return Err(ExperimentError::Precondition(format!("C = {c} must exceed sqrt(n) = {}", nf.sqrt())));
    }
    let hyps = agnostic_hypotheses(c);
    let losses: Vec<[[f64; 2]; 3]> =
        hyps.iter().map(|h| [bit_losses(h[0], c), bit_losses(h[1], c), bit_losses(h[2], c)]).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut successes = 0;
    for trial in 0..trials {
        let mut counts = [[0u64; 2]; 3];
        let mut direct = [0.0f64; 2];
        for _ in 0..n {
            let x = rng.gen_range(0..3);
            let y = rng.gen_range(0..2);
            counts[x][y] += 1;
            for (d, l) in direct.iter_mut().zip(&losses) {
                *d += l[x][y];
            }
        }
        // n R_n(h) as a sum of per-point risks R^x(h).
        let mut total = [0.0f64; 2];
        for (t, l) in total.iter_mut().zip(&losses) {
            *t = (0..3).map(|x| counts[x][0] as f64 * l[x][0] + counts[x][1] as f64 * l[x][1]).sum();
        }
        for i in 0..2 {
            if (total[i] - direct[i]).abs() > 1e-9 * total[i].max(1.0) {
                return Err(ExperimentError::Bookkeeping {
                    trial,
                    detail: format!("h{}: per-point sum {} vs per-sample sum {}", i + 1, total[i], direct[i]),
                });
            }
        }
        let floor = -2.0 * nf + c * (counts[2][1] as f64 - counts[1][1] as f64);
        if total[0] - total[1] < floor - 1e-9 * total[0].max(1.0) {
            return Err(ExperimentError::Bookkeeping {
                trial,
                detail: format!("risk difference {} below its lower bound {floor}", total[0] - total[1]),
            });
        }
        if total[1] < total[0] {
            successes += 1;
        }
    }

    Ok(TrialReport::new("agnostic", seed, trials, successes)
        .param("n", nf)
        .param("C", c)
        .reference("risk_gap_bits", agnostic_risk_gap(c, LogBase::Two)?)
        .reference("risk_gap_nats", agnostic_risk_gap(c, LogBase::E)?))
}

/// `R(h2) - R(h1)` under the uniform distribution, in the given log base.
pub fn agnostic_risk_gap(c: f64, base: LogBase) -> Result<f64> {
    let [h1, h2] = agnostic_hypotheses(c);
    let half = [0.5; 3];
    let mass = [1.0 / 3.0; 3];
    Ok(objective::expected_risk(&h2, &half, &mass, base)? - objective::expected_risk(&h1, &half, &mass, base)?)
}

/// `n` uniform draws over six symbols; success when the count of symbol 1
/// exceeds that of symbol 2 by more than `2 sqrt(n)`.
pub fn binom_gap_trial(n: u64, seed: u64, trials: u64) -> Result<TrialReport> {
    check_trials(trials)?;
    if n == 0 {
        return Err(ExperimentError::Range { name: "n", value: 0.0 });
    }
    let threshold = 2.0 * (n as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut successes = 0;
    for _ in 0..trials {
        let (x, x2) = draw_pair(&mut rng, n);
        if (x as f64 - x2 as f64) > threshold {
            successes += 1;
        }
    }
    Ok(TrialReport::new("binom-gap", seed, trials, successes)
        .param("n", n as f64)
        .reference("exact_probability", binom_gap_exact(n)))
}

fn draw_pair(rng: &mut ChaCha8Rng, n: u64) -> (u64, u64) {
    let (mut x, mut x2) = (0, 0);
    for _ in 0..n {
        match rng.gen_range(0..6) {
            0 => x += 1,
            1 => x2 += 1,
            _ => {}
        }
    }
    (x, x2)
}

fn ln_factorials(n: u64) -> Vec<f64> {
    let mut out = Vec::with_capacity(n as usize + 1);
    let mut acc = 0.0;
    out.push(0.0);
    for k in 1..=n {
        acc += (k as f64).ln();
        out.push(acc);
    }
    out
}

fn binomial_pmf(lf: &[f64], n: u64, k: u64, p: f64) -> f64 {
    let (n_, k_) = (n as usize, k as usize);
    (lf[n_] - lf[k_] - lf[n_ - k_] + k as f64 * p.ln() + (n - k) as f64 * (-p).ln_1p()).exp()
}

/// `P(X - X' > 2 sqrt(n))` computed exactly: `X ~ Bin(n, 1/6)` and
/// `X' | X = x ~ Bin(n - x, 1/5)`.
pub fn binom_gap_exact(n: u64) -> f64 {
    let lf = ln_factorials(n);
    let threshold = 2.0 * (n as f64).sqrt();
    let mut total = 0.0;
    for x in 0..=n {
        let px = binomial_pmf(&lf, n, x, 1.0 / 6.0);
        let tail: f64 = (0..=(n - x))
            .filter(|&x2| (x as f64 - x2 as f64) > threshold)
            .map(|x2| binomial_pmf(&lf, n - x, x2, 0.2))
            .sum();
        total += px * tail;
    }
    total
}

/// One cell of the negative-association comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssociationCell {
    pub s: u64,
    pub t: u64,
    /// Empirical `P(X >= s, X' <= t)`.
    pub joint: f64,
    /// Empirical `P(X >= s) * P(X' <= t)`.
    pub product: f64,
    pub standard_error: f64,
    pub holds: bool,
}

/// Compares the joint probability `P(X >= s, X' <= t)` with the product of
/// marginals on every `(s, t)` of the grid, allowing three standard errors.
pub fn negative_association_check(
    n: u64,
    seed: u64,
    trials: u64,
    s_grid: &[u64],
    t_grid: &[u64],
) -> Result<Vec<AssociationCell>> {
    check_trials(trials)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draws: Vec<(u64, u64)> = (0..trials).map(|_| draw_pair(&mut rng, n)).collect();
    let tf = trials as f64;
    let mut cells = Vec::with_capacity(s_grid.len() * t_grid.len());
    for &s in s_grid {
        let ps = draws.iter().filter(|d| d.0 >= s).count() as f64 / tf;
        for &t in t_grid {
            let pt = draws.iter().filter(|d| d.1 <= t).count() as f64 / tf;
            let joint = draws.iter().filter(|d| d.0 >= s && d.1 <= t).count() as f64 / tf;
            let product = ps * pt;
            let p = joint.max(product);
            let standard_error = (p * (1.0 - p) / tf).sqrt() + 1.0 / tf;
            let holds = joint >= product - 3.0 * standard_error;
            cells.push(AssociationCell { s, t, joint, product, standard_error, holds });
        }
    }
    Ok(cells)
}

/// Lower bound `exp(-9 eps^2 p n)` on both tails `P(X <= (1-eps)pn)` and
/// `P(X >= (1+eps)pn)` of `X ~ Bin(n, p)`.
pub fn reverse_chernoff_bound(n: u64, p: f64, eps: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 0.5) {
        return Err(ExperimentError::Range { name: "p", value: p });
    }
    if !(eps > 0.0 && eps <= 0.5) {
        return Err(ExperimentError::Range { name: "eps", value: eps });
    }
    let m = eps * eps * p * n as f64;
    if m < 3.0 {
        return Err(ExperimentError::Precondition(format!("eps^2 p n = {m} is below 3")));
    }
    Ok((-9.0 * m).exp())
}

/// Uniform generalization bound for the truncated Lipschitz class:
/// `(2 * 2520 / theta) L^{d/(d+1)} n^{-1/(d+1)} + 3 ln(1/theta) sqrt(ln(2/delta) / (2n))`.
/// The constant is loose; the value is meant as a diagnostic.
pub fn generalization_bound(n: u64, lipschitz: f64, ddim: f64, theta: f64, delta: f64) -> Result<f64> {
    if n == 0 {
        return Err(ExperimentError::Range { name: "n", value: 0.0 });
    }
    if !(lipschitz >= 1.0 && lipschitz.is_finite()) {
        return Err(ExperimentError::Range { name: "lipschitz", value: lipschitz });
    }
    if !(ddim >= 1.0 && ddim.is_finite()) {
        return Err(ExperimentError::Range { name: "ddim", value: ddim });
    }
    if !(theta > 0.0 && theta < 0.5) {
        return Err(ExperimentError::Range { name: "theta", value: theta });
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(ExperimentError::Range { name: "delta", value: delta });
    }
    let nf = n as f64;
    let complexity =
        RADEMACHER_CONSTANT / theta * lipschitz.powf(ddim / (ddim + 1.0)) * nf.powf(-1.0 / (ddim + 1.0));
    let deviation = 3.0 * (1.0 / theta).ln() * ((2.0 / delta).ln() / (2.0 * nf)).sqrt();
    Ok(complexity + deviation)
}

/// Hoeffding plus union bound over a finite class whose losses lie in
/// `[0, loss_range]`: `loss_range * sqrt(ln(2|H|/delta) / (2n))`.
pub fn finite_class_bound(loss_range: f64, n: u64, class_size: u64, delta: f64) -> Result<f64> {
    if !(loss_range > 0.0 && loss_range.is_finite()) {
        return Err(ExperimentError::Range { name: "theta", value: loss_range });
    }
    if n == 0 {
        return Err(ExperimentError::Range { name: "n", value: 0.0 });
    }
    if class_size == 0 {
        return Err(ExperimentError::Range { name: "class_size", value: 0.0 });
    }
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(ExperimentError::Range { name: "delta", value: delta });
    }
    Ok(loss_range * ((2.0 * class_size as f64 / delta).ln() / (2.0 * n as f64)).sqrt())
}
