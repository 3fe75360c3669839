//! Monte-Carlo checks of the estimator's robustness guarantees.
//!
//! Scores are drawn from a Huber contamination model: with probability
//! `1 - ρ` a clean Gaussian `N(μ, σ²)`, otherwise an outlier from a chosen
//! model. On top of that sampler sit three experiments:
//!
//! * [`run_theorem1_sweep`]: high-quantile estimation error over a grid of
//!   contamination rates and sample sizes, with a log-log fit of error
//!   against `M` on clean data (expected slope near `-1/2`).
//! * [`check_goodness`]: adversarial down-weighting of clean samples under an
//!   average-mass constraint, reporting the shift of the weighted mean and
//!   variance in units of `σ·α·√log(1/α)` and `σ²·α·log(1/α)`.
//! * [`run_excess_risk`]: multi-class instances with known true means;
//!   compares the rate of disagreeing with the Bayes classifier to the
//!   probability that the true margin is at most twice the worst per-class
//!   estimation error.
//!
//! Every trial draws from its own random stream keyed by `(seed, cell,
//! trial)`, so results do not depend on thread scheduling.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::argmax;
use crate::rng::{self, StreamRng};
use crate::soft_trim::{aggregate, median, AggregatorConfig, AggregatorMode, ScoreSet};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
}

/// Distribution of contaminating draws.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OutlierModel {
    /// Every outlier sits at `value`.
    PointMass { value: f64 },
    /// Outliers from `N(μ + offset, scale²)`.
    ShiftedGaussian { offset: f64, scale: f64 },
    /// Outliers uniform on `[low, high]`.
    Uniform { low: f64, high: f64 },
}

impl OutlierModel {
    fn draw(&self, mu: f64, rng: &mut StreamRng) -> f64 {
        match *self {
            OutlierModel::PointMass { value } => value,
            OutlierModel::ShiftedGaussian { offset, scale } => {
                let z: f64 = rng.sample(StandardNormal);
                mu + offset + scale * z
            }
            OutlierModel::Uniform { low, high } => rng.random_range(low..=high),
        }
    }

    fn validate(&self) -> Result<(), SimError> {
        let ok = match *self {
            OutlierModel::PointMass { value } => value.is_finite(),
            OutlierModel::ShiftedGaussian { offset, scale } => {
                offset.is_finite() && scale.is_finite() && scale >= 0.0
            }
            OutlierModel::Uniform { low, high } => {
                low.is_finite() && high.is_finite() && low <= high
            }
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidSpec(format!("bad outlier model {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContaminationSpec {
    pub mu: f64,
    pub sigma: f64,
    pub rho: f64,
    pub m: usize,
    pub outlier_model: OutlierModel,
    pub seed: u64,
}

impl ContaminationSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if !(0.0..0.5).contains(&self.rho) {
            return Err(SimError::InvalidSpec(format!(
                "rho {} not in [0, 0.5)",
                self.rho
            )));
        }
        if self.m == 0 {
            return Err(SimError::InvalidSpec("M must be positive".into()));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) || !self.mu.is_finite() {
            return Err(SimError::InvalidSpec(
                "mu must be finite and sigma positive".into(),
            ));
        }
        self.outlier_model.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContaminatedSample {
    pub scores: ScoreSet,
    /// `true` where the draw came from the outlier model.
    pub outlier_mask: Vec<bool>,
}

fn draw(spec: &ContaminationSpec, rng: &mut StreamRng) -> ContaminatedSample {
    let clean = Normal::new(spec.mu, spec.sigma).expect("validated sigma");
    let mut scores = Vec::with_capacity(spec.m);
    let mut mask = Vec::with_capacity(spec.m);
    for _ in 0..spec.m {
        let outlier = spec.rho > 0.0 && rng.random_bool(spec.rho);
        scores.push(if outlier {
            spec.outlier_model.draw(spec.mu, rng)
        } else {
            clean.sample(rng)
        });
        mask.push(outlier);
    }
    ContaminatedSample {
        scores: ScoreSet::new(scores).expect("finite draws"),
        outlier_mask: mask,
    }
}

/// Draws `M` scores from the contamination model, deterministic in `seed`.
pub fn sample_contaminated(spec: &ContaminationSpec) -> Result<ContaminatedSample, SimError> {
    spec.validate()?;
    Ok(draw(spec, &mut rng::stream(spec.seed, &[])))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub mu_hat_soft: f64,
    pub mu_hat_mean: f64,
    pub mu_hat_median: f64,
    pub err_soft: f64,
    pub err_mean: f64,
    pub err_median: f64,
    /// Raw contamination fraction seen by the soft-trim estimator.
    pub rho_hat: f64,
    pub n_outliers: usize,
}

fn trial_on(sample: &ContaminatedSample, mu: f64, cfg: &AggregatorConfig) -> TrialResult {
    let soft_cfg = AggregatorConfig {
        mode: AggregatorMode::SoftTrim,
        ..*cfg
    };
    let soft = aggregate(&sample.scores, &soft_cfg).expect("validated config");
    let s = sample.scores.as_slice();
    let mean = s.iter().sum::<f64>() / s.len() as f64;
    let med = median(s).expect("non-empty");
    TrialResult {
        mu_hat_soft: soft.mu_hat,
        mu_hat_mean: mean,
        mu_hat_median: med,
        err_soft: (soft.mu_hat - mu).abs(),
        err_mean: (mean - mu).abs(),
        err_median: (med - mu).abs(),
        rho_hat: soft.rho_raw,
        n_outliers: sample.outlier_mask.iter().filter(|&&o| o).count(),
    }
}

/// One draw plus the soft-trim, mean and median estimates of `μ`.
pub fn run_trial(
    spec: &ContaminationSpec,
    cfg: &AggregatorConfig,
) -> Result<TrialResult, SimError> {
    cfg.validate()
        .map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    let sample = sample_contaminated(spec)?;
    Ok(trial_on(&sample, spec.mu, cfg))
}

/// Nearest-rank quantile `q ∈ (0, 1]`.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Ordinary least-squares slope of `y` on `x`.
pub fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Grid and model for [`run_theorem1_sweep`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub rhos: Vec<f64>,
    pub ms: Vec<usize>,
    pub slopes: Vec<f64>,
    pub trials: usize,
    /// Quantiles are reported at `1 - delta`.
    pub delta: f64,
    pub mu: f64,
    pub sigma: f64,
    pub outlier_model: OutlierModel,
    pub lambda: f64,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let (mu, sigma) = (0.5, 0.05);
        Self {
            rhos: vec![0.0, 0.05, 0.1, 0.2],
            ms: vec![25, 50, 100, 400, 1600],
            slopes: vec![crate::soft_trim::default_slope()],
            trials: 500,
            delta: 0.05,
            mu,
            sigma,
            outlier_model: OutlierModel::PointMass {
                value: mu + 10.0 * sigma,
            },
            lambda: crate::soft_trim::DEFAULT_LAMBDA,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub rho: f64,
    pub m: usize,
    pub slope: f64,
    pub q95_err_soft: f64,
    pub q95_err_mean: f64,
    pub q95_err_median: f64,
    pub mean_rho_hat: f64,
    /// Fraction of trials where soft-trim error was below the mean's.
    pub soft_beats_mean: f64,
    /// Largest `C₀` for which `M ≥ C₀·log(1/δ)/ρ²` holds here (0 at `ρ = 0`).
    pub c0_admissible: f64,
    #[serde(skip)]
    pub trials: Vec<TrialResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub slope: f64,
    /// Slope of `log q95 error` against `log M` at `ρ = 0`.
    pub log_log_slope_rho0: Option<f64>,
    /// Slope of `q95 error` against `ρ` at the largest `M`.
    pub error_vs_rho_large_m: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub config: SweepConfig,
    pub cells: Vec<SweepCell>,
    pub fits: Vec<SlopeFit>,
}

impl SweepReport {
    pub fn cell(&self, rho: f64, m: usize, slope: f64) -> Option<&SweepCell> {
        self.cells
            .iter()
            .find(|c| c.rho == rho && c.m == m && c.slope == slope)
    }

    /// CSV with the columns `rho,M,slope,q95_err_soft,q95_err_mean,q95_err_median,mean_rho_hat`.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "rho",
            "M",
            "slope",
            "q95_err_soft",
            "q95_err_mean",
            "q95_err_median",
            "mean_rho_hat",
        ])?;
        for c in &self.cells {
            w.write_record([
                c.rho.to_string(),
                c.m.to_string(),
                c.slope.to_string(),
                c.q95_err_soft.to_string(),
                c.q95_err_mean.to_string(),
                c.q95_err_median.to_string(),
                c.mean_rho_hat.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs every `(ρ, M, k)` cell of the grid.
pub fn run_theorem1_sweep(cfg: &SweepConfig) -> Result<SweepReport, SimError> {
    if cfg.rhos.is_empty() || cfg.ms.is_empty() || cfg.slopes.is_empty() || cfg.trials == 0 {
        return Err(SimError::InvalidSpec("empty sweep grid".into()));
    }
    if !(cfg.delta > 0.0 && cfg.delta < 1.0) {
        return Err(SimError::InvalidSpec(format!(
            "delta {} not in (0, 1)",
            cfg.delta
        )));
    }
    let mut grid = Vec::new();
    for &slope in &cfg.slopes {
        for &rho in &cfg.rhos {
            for &m in &cfg.ms {
                grid.push((rho, m, slope));
            }
        }
    }
    for &(rho, m, slope) in &grid {
        ContaminationSpec {
            mu: cfg.mu,
            sigma: cfg.sigma,
            rho,
            m,
            outlier_model: cfg.outlier_model,
            seed: 0,
        }
        .validate()?;
        AggregatorConfig {
            slope,
            lambda: cfg.lambda,
            ..AggregatorConfig::default()
        }
        .validate()
        .map_err(|e| SimError::InvalidSpec(e.to_string()))?;
    }

    let q = 1.0 - cfg.delta;
    let cells: Vec<SweepCell> = grid
        .par_iter()
        .enumerate()
        .map(|(cell_idx, &(rho, m, slope))| {
            let agg = AggregatorConfig {
                slope,
                lambda: cfg.lambda,
                ..AggregatorConfig::default()
            };
            let spec = ContaminationSpec {
                mu: cfg.mu,
                sigma: cfg.sigma,
                rho,
                m,
                outlier_model: cfg.outlier_model,
                seed: cfg.seed,
            };
            let trials: Vec<TrialResult> = (0..cfg.trials)
                .map(|t| {
                    let mut r = rng::stream(cfg.seed, &[cell_idx as u64, t as u64]);
                    trial_on(&draw(&spec, &mut r), cfg.mu, &agg)
                })
                .collect();
            let col = |f: fn(&TrialResult) -> f64| trials.iter().map(f).collect::<Vec<_>>();
            let n = trials.len() as f64;
            SweepCell {
                rho,
                m,
                slope,
                q95_err_soft: quantile(&col(|t| t.err_soft), q),
                q95_err_mean: quantile(&col(|t| t.err_mean), q),
                q95_err_median: quantile(&col(|t| t.err_median), q),
                mean_rho_hat: col(|t| t.rho_hat).iter().sum::<f64>() / n,
                soft_beats_mean: trials.iter().filter(|t| t.err_soft < t.err_mean).count() as f64
                    / n,
                c0_admissible: m as f64 * rho * rho / (1.0 / cfg.delta).ln(),
                trials,
            }
        })
        .collect();

    let fits = cfg
        .slopes
        .iter()
        .map(|&slope| {
            let clean: Vec<&SweepCell> = cells
                .iter()
                .filter(|c| c.slope == slope && c.rho == 0.0)
                .collect();
            let log_log_slope_rho0 = (clean.len() >= 2).then(|| {
                let x: Vec<f64> = clean.iter().map(|c| (c.m as f64).ln()).collect();
                let y: Vec<f64> = clean.iter().map(|c| c.q95_err_soft.ln()).collect();
                ols_slope(&x, &y)
            });
            let big_m = *cfg.ms.iter().max().expect("non-empty");
            let at_big: Vec<&SweepCell> = cells
                .iter()
                .filter(|c| c.slope == slope && c.m == big_m)
                .collect();
            let error_vs_rho_large_m = (at_big.len() >= 2).then(|| {
                let x: Vec<f64> = at_big.iter().map(|c| c.rho).collect();
                let y: Vec<f64> = at_big.iter().map(|c| c.q95_err_soft).collect();
                ols_slope(&x, &y)
            });
            SlopeFit {
                slope,
                log_log_slope_rho0,
                error_vs_rho_large_m,
            }
        })
        .collect();

    Ok(SweepReport {
        config: cfg.clone(),
        cells,
        fits,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodnessConfig {
    pub alphas: Vec<f64>,
    pub trials: usize,
    pub m: usize,
    pub mu: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for GoodnessConfig {
    fn default() -> Self {
        Self {
            alphas: vec![0.05, 0.1, 0.2],
            trials: 500,
            m: 10_000,
            mu: 0.5,
            sigma: 0.05,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoodnessRow {
    pub alpha: f64,
    /// Max over trials of `|μ̂_w - μ| / (σ·α·√log(1/α))`.
    pub max_mean_ratio: f64,
    /// Max over trials of `|σ̂²_w - σ²| / (σ²·α·log(1/α))`.
    pub max_var_ratio: f64,
}

/// Weighted mean and variance.
pub fn weighted_moments(scores: &[f64], weights: &[f64]) -> (f64, f64) {
    let total: f64 = weights.iter().sum();
    let mean = scores.iter().zip(weights).map(|(s, w)| s * w).sum::<f64>() / total;
    let var = scores
        .iter()
        .zip(weights)
        .map(|(s, w)| w * (s - mean) * (s - mean))
        .sum::<f64>()
        / total;
    (mean, var)
}

/// The extreme-point weight vectors that meet the average-mass constraint
/// `mean(w) ≥ 1 - α`: zero out the `⌊αM⌋` largest, the `⌊αM⌋` smallest, or
/// the `⌊αM/2⌋` most extreme on each side.
pub fn adversarial_weights(scores: &[f64], alpha: f64) -> Vec<Vec<f64>> {
    let m = scores.len();
    let cut = (alpha * m as f64).floor() as usize;
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let zeroed = |idx: &[usize]| {
        let mut w = vec![1.0; m];
        for &i in idx {
            w[i] = 0.0;
        }
        w
    };
    let half = cut / 2;
    vec![
        zeroed(&order[m - cut..]),
        zeroed(&order[..cut]),
        zeroed(&[&order[..half], &order[m - (cut - half)..]].concat()),
    ]
}

/// Worst-case mean and variance shifts of clean samples under adversarial
/// down-weighting, one row per `α` (`α = 0` is skipped).
pub fn check_goodness(cfg: &GoodnessConfig) -> Result<Vec<GoodnessRow>, SimError> {
    if cfg.m == 0 || cfg.trials == 0 || cfg.sigma.is_nan() || cfg.sigma <= 0.0 {
        return Err(SimError::InvalidSpec(
            "goodness check needs M, trials, sigma > 0".into(),
        ));
    }
    let alphas: Vec<f64> = cfg.alphas.iter().copied().filter(|&a| a > 0.0).collect();
    if alphas.iter().any(|&a| a >= 1.0) {
        return Err(SimError::InvalidSpec("alpha must be below 1".into()));
    }
    let spec = ContaminationSpec {
        mu: cfg.mu,
        sigma: cfg.sigma,
        rho: 0.0,
        m: cfg.m,
        outlier_model: OutlierModel::PointMass { value: cfg.mu },
        seed: cfg.seed,
    };
    let per_trial: Vec<Vec<(f64, f64)>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let sample = draw(&spec, &mut rng::stream(cfg.seed, &[t as u64]));
            let s = sample.scores.as_slice();
            alphas
                .iter()
                .map(|&alpha| {
                    let mean_unit = cfg.sigma * alpha * (1.0 / alpha).ln().sqrt();
                    let var_unit = cfg.sigma * cfg.sigma * alpha * (1.0 / alpha).ln();
                    adversarial_weights(s, alpha)
                        .iter()
                        .map(|w| {
                            let (mean, var) = weighted_moments(s, w);
                            (
                                (mean - cfg.mu).abs() / mean_unit,
                                (var - cfg.sigma * cfg.sigma).abs() / var_unit,
                            )
                        })
                        .fold((0.0f64, 0.0f64), |acc, r| (acc.0.max(r.0), acc.1.max(r.1)))
                })
                .collect()
        })
        .collect();
    Ok(alphas
        .iter()
        .enumerate()
        .map(|(a, &alpha)| GoodnessRow {
            alpha,
            max_mean_ratio: per_trial.iter().map(|t| t[a].0).fold(0.0, f64::max),
            max_var_ratio: per_trial.iter().map(|t| t[a].1).fold(0.0, f64::max),
        })
        .collect())
}

/// Multi-class instance generator for [`run_excess_risk`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskSpec {
    pub k: usize,
    /// True margins, cycled over trials.
    pub margins: Vec<f64>,
    pub sigma: f64,
    pub rho: f64,
    pub m: usize,
    pub delta: f64,
    /// Outliers of class `i` sit at `μ_i + outlier_offset`.
    pub outlier_offset: f64,
    pub aggregator: AggregatorConfig,
    pub trials: usize,
    pub seed: u64,
}

impl RiskSpec {
    pub fn validate(&self) -> Result<(), SimError> {
        if self.k < 2 {
            return Err(SimError::InvalidSpec("need at least two classes".into()));
        }
        if self.margins.is_empty() || self.margins.iter().any(|&m| m.is_nan() || m < 0.0) {
            return Err(SimError::InvalidSpec("margins must be non-negative".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(SimError::InvalidSpec("delta must lie in (0, 1)".into()));
        }
        if self.trials == 0 {
            return Err(SimError::InvalidSpec("trials must be positive".into()));
        }
        self.aggregator
            .validate()
            .map_err(|e| SimError::InvalidSpec(e.to_string()))?;
        ContaminationSpec {
            mu: 0.0,
            sigma: self.sigma,
            rho: self.rho,
            m: self.m,
            outlier_model: OutlierModel::PointMass {
                value: self.outlier_offset,
            },
            seed: 0,
        }
        .validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExcessRiskReport {
    pub trials: usize,
    /// Fraction of trials where the prediction differs from the Bayes class.
    pub excess_risk: f64,
    /// Fraction of trials with `margin ≤ 2·max_i |μ̂_i - μ_i|`.
    pub bound_probability: f64,
    pub standard_error: f64,
    /// `excess_risk ≤ bound_probability + 3·standard_error`.
    pub holds: bool,
    /// Trials where a misclassification happened outside the bound event.
    pub violations: usize,
}

/// The 12-cell grid `K ∈ {2, 5}`, `ρ ∈ {0, 0.1, 0.2}`, `M ∈ {50, 400}` with
/// `σ = 0.05`, margins from 0 to `1.6σ` and outliers `10σ` above each mean.
pub fn default_risk_grid(trials: usize, seed: u64) -> Vec<RiskSpec> {
    let sigma = 0.05;
    let margins: Vec<f64> = [0.0, 0.05, 0.1, 0.2, 0.4, 0.8, 1.6]
        .iter()
        .map(|m| m * sigma)
        .collect();
    let mut grid = Vec::with_capacity(12);
    for k in [2, 5] {
        for rho in [0.0, 0.1, 0.2] {
            for m in [50, 400] {
                grid.push(RiskSpec {
                    k,
                    margins: margins.clone(),
                    sigma,
                    rho,
                    m,
                    delta: 0.05,
                    outlier_offset: 10.0 * sigma,
                    aggregator: AggregatorConfig::default(),
                    trials,
                    seed: rng::derive_seed(seed, &[grid.len() as u64]),
                });
            }
        }
    }
    grid
}

/// Simulates instances with known means and checks the margin bound.
pub fn run_excess_risk(spec: &RiskSpec) -> Result<ExcessRiskReport, SimError> {
    spec.validate()?;
    let base = 0.5;
    let outcomes: Vec<(bool, bool)> = (0..spec.trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(spec.seed, &[t as u64]);
            let margin = spec.margins[t % spec.margins.len()];
            let best = r.random_range(0..spec.k);
            let runner_up = (best + 1 + r.random_range(0..spec.k - 1)) % spec.k;
            let means: Vec<f64> = (0..spec.k)
                .map(|i| {
                    if i == best {
                        base + margin
                    } else if i == runner_up {
                        base
                    } else {
                        let gap: f64 = r.sample::<f64, _>(StandardNormal).abs();
                        base - 0.5 * spec.sigma * gap
                    }
                })
                .collect();
            let mut estimates = Vec::with_capacity(spec.k);
            let mut worst = 0.0f64;
            for (i, &mu) in means.iter().enumerate() {
                let cs = ContaminationSpec {
                    mu,
                    sigma: spec.sigma,
                    rho: spec.rho,
                    m: spec.m,
                    outlier_model: OutlierModel::PointMass {
                        value: mu + spec.outlier_offset,
                    },
                    seed: 0,
                };
                let mut cr = rng::stream(spec.seed, &[t as u64, i as u64 + 1]);
                let sample = draw(&cs, &mut cr);
                let est = aggregate(&sample.scores, &spec.aggregator)
                    .expect("validated")
                    .mu_hat;
                worst = worst.max((est - mu).abs());
                estimates.push(est);
            }
            let wrong = argmax(&estimates) != best;
            let in_bound = margin <= 2.0 * worst;
            (wrong, in_bound)
        })
        .collect();
    let n = outcomes.len() as f64;
    let excess = outcomes.iter().filter(|o| o.0).count() as f64 / n;
    let bound = outcomes.iter().filter(|o| o.1).count() as f64 / n;
    let se = (excess * (1.0 - excess) / n + bound * (1.0 - bound) / n).sqrt();
    Ok(ExcessRiskReport {
        trials: spec.trials,
        excess_risk: excess,
        bound_probability: bound,
        standard_error: se,
        holds: excess <= bound + 3.0 * se,
        violations: outcomes.iter().filter(|o| o.0 && !o.1).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(rho: f64, m: usize, seed: u64) -> ContaminationSpec {
        ContaminationSpec {
            mu: 0.0,
            sigma: 1.0,
            rho,
            m,
            outlier_model: OutlierModel::PointMass { value: 100.0 },
            seed,
        }
    }

    #[test]
    fn clean_when_rho_zero() {
        let s = sample_contaminated(&spec(0.0, 4000, 3)).unwrap();
        assert!(s.outlier_mask.iter().all(|o| !o));
        let mean = s.scores.as_slice().iter().sum::<f64>() / 4000.0;
        assert!(mean.abs() < 0.1);
    }

    #[test]
    fn deterministic_in_seed() {
        assert_eq!(
            sample_contaminated(&spec(0.3, 50, 9)).unwrap(),
            sample_contaminated(&spec(0.3, 50, 9)).unwrap()
        );
        assert_ne!(
            sample_contaminated(&spec(0.3, 50, 9)).unwrap(),
            sample_contaminated(&spec(0.3, 50, 10)).unwrap()
        );
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(sample_contaminated(&spec(0.5, 10, 0)).is_err());
        assert!(sample_contaminated(&spec(0.1, 0, 0)).is_err());
        let mut s = spec(0.1, 10, 0);
        s.outlier_model = OutlierModel::Uniform {
            low: 1.0,
            high: 0.0,
        };
        assert!(sample_contaminated(&s).is_err());
    }

    #[test]
    fn outlier_models_land_where_expected() {
        let mut s = spec(0.4, 2000, 1);
        s.outlier_model = OutlierModel::ShiftedGaussian {
            offset: 50.0,
            scale: 1.0,
        };
        let d = sample_contaminated(&s).unwrap();
        for (v, o) in d.scores.as_slice().iter().zip(&d.outlier_mask) {
            if *o {
                assert!(*v > 40.0);
            }
        }
        s.outlier_model = OutlierModel::Uniform {
            low: 10.0,
            high: 11.0,
        };
        let d = sample_contaminated(&s).unwrap();
        for (v, o) in d.scores.as_slice().iter().zip(&d.outlier_mask) {
            if *o {
                assert!((10.0..=11.0).contains(v));
            }
        }
    }

    #[test]
    fn trial_errors_are_absolute_differences() {
        let t = run_trial(&spec(0.2, 200, 4), &AggregatorConfig::default()).unwrap();
        assert_eq!(t.err_soft, (t.mu_hat_soft - 0.0).abs());
        assert_eq!(t.err_mean, t.mu_hat_mean.abs());
        assert_eq!(t.err_median, t.mu_hat_median.abs());
        assert!(t.err_mean > t.err_soft);
    }

    #[test]
    fn quantile_and_fits() {
        let v: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(quantile(&v, 0.95), 95.0);
        assert_eq!(quantile(&v, 1.0), 100.0);
        let x = [1.0, 2.0, 3.0];
        assert!((ols_slope(&x, &[2.0, 4.0, 6.0]) - 2.0).abs() < 1e-12);
        assert!((spearman(&x, &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&x, &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn adversarial_weights_meet_mass_constraint() {
        let s: Vec<f64> = (0..100).map(f64::from).collect();
        for w in adversarial_weights(&s, 0.1) {
            let mass = w.iter().sum::<f64>() / 100.0;
            assert!(mass >= 0.9 - 1e-12);
        }
        let top = &adversarial_weights(&s, 0.1)[0];
        assert!(top[90..].iter().all(|&w| w == 0.0));
    }

    #[test]
    fn separated_classes_have_no_excess_risk() {
        let r = run_excess_risk(&RiskSpec {
            k: 3,
            margins: vec![20.0],
            sigma: 1.0,
            rho: 0.0,
            m: 30,
            delta: 0.05,
            outlier_offset: 10.0,
            aggregator: AggregatorConfig::default(),
            trials: 200,
            seed: 1,
        })
        .unwrap();
        assert_eq!(r.excess_risk, 0.0);
        assert!(r.holds);
    }

    #[test]
    fn zero_margins_make_the_bound_trivial() {
        let r = run_excess_risk(&RiskSpec {
            k: 3,
            margins: vec![0.0],
            sigma: 1.0,
            rho: 0.1,
            m: 30,
            delta: 0.05,
            outlier_offset: 10.0,
            aggregator: AggregatorConfig::default(),
            trials: 200,
            seed: 1,
        })
        .unwrap();
        assert_eq!(r.bound_probability, 1.0);
        assert!(r.holds);
    }
}
