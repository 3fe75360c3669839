//! Adaptive soft-trim aggregation of per-concept similarity scores.
//!
//! Given the scores `S_1..S_M` one image receives from the concept prompts of
//! one class, the estimator
//!
//! 1. takes the median `m` and the median absolute deviation `MAD`,
//! 2. estimates the contamination rate `ρ̂` as the fraction of scores with
//!    `|S_j - m| > λ·MAD`,
//! 3. weights each score by the logistic posterior that it is clean,
//!    `w_j = σ(-log((1-ρ̂)/ρ̂) · k · |S_j - m| / MAD)`,
//! 4. returns the weighted mean `Σ w_j S_j / Σ w_j`.
//!
//! `λ` controls which deviations count as outliers when estimating `ρ̂` and
//! `k` is the sigmoid slope. The weight of a score exactly at the median is
//! always `σ(0) = 1/2`; weights fall off monotonically with deviation.
//!
//! The remaining [`AggregatorMode`]s are the comparison family: the plain
//! mean, the median, hard trimming, one-step Huber and Cauchy weights, and
//! the maximum score.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default outlier threshold `λ`.
pub const DEFAULT_LAMBDA: f64 = 2.5;

/// Default sigmoid slope `k = e^4.6`, the CLIP logit scale.
pub fn default_slope() -> f64 {
    4.6f64.exp()
}

/// Tuning constant for Huber weights (95% Gaussian efficiency).
pub const DEFAULT_HUBER_DELTA: f64 = 1.345;

/// Tuning constant for Cauchy weights (95% Gaussian efficiency).
pub const DEFAULT_CAUCHY_GAMMA: f64 = 2.385;

/// Upper clamp on `ρ̂`; the logit is undefined at 1/2.
pub const RHO_CEILING: f64 = 0.5 - 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SoftTrimError {
    #[error("score set is empty")]
    Empty,
    #[error("score {index} is not finite")]
    NonFinite { index: usize },
    #[error("weights and scores differ in length ({weights} vs {scores})")]
    LengthMismatch { weights: usize, scores: usize },
    #[error("weights sum to zero")]
    ZeroWeight,
    #[error("unknown aggregator mode {0:?}")]
    UnknownMode(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// A non-empty set of finite scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreSet(Vec<f64>);

impl ScoreSet {
    pub fn new(scores: Vec<f64>) -> Result<Self, SoftTrimError> {
        if scores.is_empty() {
            return Err(SoftTrimError::Empty);
        }
        if let Some(index) = scores.iter().position(|s| !s.is_finite()) {
            return Err(SoftTrimError::NonFinite { index });
        }
        Ok(Self(scores))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    fn max(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

impl TryFrom<Vec<f64>> for ScoreSet {
    type Error = SoftTrimError;

    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(scores: &[f64]) -> Result<f64, SoftTrimError> {
    if scores.is_empty() {
        return Err(SoftTrimError::Empty);
    }
    let mut v = scores.to_vec();
    let n = v.len();
    let mid = n / 2;
    let (_, upper, _) = v.select_nth_unstable_by(mid, f64::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        return Ok(upper);
    }
    let lower = v[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok((lower + upper) / 2.0)
}

/// Median absolute deviation around `m`.
pub fn mad(scores: &[f64], m: f64) -> f64 {
    let dev: Vec<f64> = scores.iter().map(|s| (s - m).abs()).collect();
    median(&dev).unwrap_or(0.0)
}

/// Fraction of scores with `|S_j - m| > λ·MAD`, before any clamping.
pub fn contamination_fraction(scores: &[f64], m: f64, mad: f64, lambda: f64) -> f64 {
    if scores.is_empty() {
        return 0.0;
    }
    let cut = lambda * mad;
    let n = scores.iter().filter(|s| (*s - m).abs() > cut).count();
    n as f64 / scores.len() as f64
}

/// Lower clamp on `ρ̂` for a set of `m` scores: `1 / (2m)`, held below the
/// ceiling for `m = 1`.
pub fn rho_floor(m: usize) -> f64 {
    (1.0 / (2.0 * m.max(1) as f64)).min(RHO_CEILING)
}

/// Contamination estimate clamped to `[1/(2M), 1/2 - 1e-6]`.
///
/// With `MAD = 0` nothing can be trimmed and the floor is returned.
pub fn estimate_rho(scores: &[f64], m: f64, mad: f64, lambda: f64) -> f64 {
    let floor = rho_floor(scores.len());
    if mad == 0.0 {
        return floor;
    }
    contamination_fraction(scores, m, mad, lambda).clamp(floor, RHO_CEILING)
}

/// Logistic function without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)`, finite for every finite `x`.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn soft_trim_exponents(scores: &[f64], m: f64, mad: f64, rho: f64, slope: f64) -> Vec<f64> {
    let logit = ((1.0 - rho) / rho).ln();
    scores
        .iter()
        .map(|s| -logit * slope * (s - m).abs() / mad)
        .collect()
}

/// Soft-trim weights `σ(-log((1-ρ)/ρ) · k · |S_j - m| / MAD)`.
///
/// All weights are 1 when `MAD = 0`. Weights too small for `f64` are held at
/// the smallest positive normal value so every weight stays positive.
pub fn soft_trim_weights(scores: &[f64], m: f64, mad: f64, rho: f64, slope: f64) -> Vec<f64> {
    if mad == 0.0 {
        return vec![1.0; scores.len()];
    }
    soft_trim_exponents(scores, m, mad, rho, slope)
        .into_iter()
        .map(|x| sigmoid(x).max(f64::MIN_POSITIVE))
        .collect()
}

/// Weighted mean `Σ w_j S_j / Σ w_j`.
pub fn robust_mean(scores: &[f64], weights: &[f64]) -> Result<f64, SoftTrimError> {
    if weights.len() != scores.len() {
        return Err(SoftTrimError::LengthMismatch {
            weights: weights.len(),
            scores: scores.len(),
        });
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(SoftTrimError::ZeroWeight);
    }
    Ok(scores.iter().zip(weights).map(|(s, w)| s * w).sum::<f64>() / total)
}

/// Weighted mean from log-weights; immune to underflow at steep slopes.
fn log_weighted_mean(scores: &[f64], log_w: &[f64]) -> f64 {
    let top = log_w.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (s, lw) in scores.iter().zip(log_w) {
        let w = (lw - top).exp();
        num += w * s;
        den += w;
    }
    num / den
}

fn clamp_to_hull(mu: f64, set: &ScoreSet) -> f64 {
    mu.clamp(set.min(), set.max())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorMode {
    /// Arithmetic mean over concepts.
    PriorMean,
    SoftTrim,
    MedianOnly,
    HardTrim,
    Huber,
    Cauchy,
    /// Maximum score.
    Confidence,
}

impl AggregatorMode {
    pub const ALL: [AggregatorMode; 7] = [
        AggregatorMode::PriorMean,
        AggregatorMode::SoftTrim,
        AggregatorMode::MedianOnly,
        AggregatorMode::HardTrim,
        AggregatorMode::Huber,
        AggregatorMode::Cauchy,
        AggregatorMode::Confidence,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregatorMode::PriorMean => "prior_mean",
            AggregatorMode::SoftTrim => "soft_trim",
            AggregatorMode::MedianOnly => "median_only",
            AggregatorMode::HardTrim => "hard_trim",
            AggregatorMode::Huber => "huber",
            AggregatorMode::Cauchy => "cauchy",
            AggregatorMode::Confidence => "confidence",
        }
    }
}

impl fmt::Display for AggregatorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggregatorMode {
    type Err = SoftTrimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| SoftTrimError::UnknownMode(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregatorConfig {
    pub mode: AggregatorMode,
    pub lambda: f64,
    pub slope: f64,
    pub huber_delta: f64,
    pub cauchy_gamma: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        Self {
            mode: AggregatorMode::SoftTrim,
            lambda: DEFAULT_LAMBDA,
            slope: default_slope(),
            huber_delta: DEFAULT_HUBER_DELTA,
            cauchy_gamma: DEFAULT_CAUCHY_GAMMA,
        }
    }
}

impl AggregatorConfig {
    pub fn with_mode(mode: AggregatorMode) -> Self {
        Self {
            mode,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SoftTrimError> {
        let positive = [
            ("lambda", self.lambda),
            ("slope", self.slope),
            ("huber_delta", self.huber_delta),
            ("cauchy_gamma", self.cauchy_gamma),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SoftTrimError::InvalidParameter(format!(
                    "{name} must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything one aggregation produces, kept for diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftTrimEstimate {
    pub mode: AggregatorMode,
    pub median: f64,
    pub mad: f64,
    /// Fraction of scores beyond `λ·MAD`, unclamped.
    pub rho_raw: f64,
    /// Clamped estimate used inside the soft-trim logit.
    pub rho_hat: f64,
    pub weights: Vec<f64>,
    pub mu_hat: f64,
    pub lambda: f64,
    pub slope: f64,
    /// Hard trim removed every score and fell back to the median.
    pub fallback: bool,
}

/// Aggregates one score set under the configured mode.
pub fn aggregate(
    scores: &ScoreSet,
    cfg: &AggregatorConfig,
) -> Result<SoftTrimEstimate, SoftTrimError> {
    cfg.validate()?;
    let s = scores.as_slice();
    let n = s.len();
    let m = median(s)?;
    let spread = mad(s, m);
    let rho_raw = contamination_fraction(s, m, spread, cfg.lambda);
    let rho_hat = estimate_rho(s, m, spread, cfg.lambda);

    let mut fallback = false;
    let unit = || vec![1.0; n];
    let (weights, mu) = match cfg.mode {
        AggregatorMode::PriorMean => {
            let w = unit();
            let mu = robust_mean(s, &w)?;
            (w, mu)
        }
        AggregatorMode::MedianOnly => (unit(), m),
        AggregatorMode::Confidence => (unit(), scores.max()),
        _ if spread == 0.0 => {
            let w = unit();
            let mu = robust_mean(s, &w)?;
            (w, mu)
        }
        AggregatorMode::SoftTrim => {
            let x = soft_trim_exponents(s, m, spread, rho_hat, cfg.slope);
            let log_w: Vec<f64> = x.iter().map(|&x| log_sigmoid(x)).collect();
            let w = x
                .iter()
                .map(|&x| sigmoid(x).max(f64::MIN_POSITIVE))
                .collect();
            (w, log_weighted_mean(s, &log_w))
        }
        AggregatorMode::HardTrim => {
            let cut = cfg.lambda * spread;
            let w: Vec<f64> = s
                .iter()
                .map(|v| if (v - m).abs() <= cut { 1.0 } else { 0.0 })
                .collect();
            match robust_mean(s, &w) {
                Ok(mu) => (w, mu),
                Err(_) => {
                    fallback = true;
                    (w, m)
                }
            }
        }
        AggregatorMode::Huber => {
            let w: Vec<f64> = s
                .iter()
                .map(|v| {
                    let d = (v - m).abs();
                    if d == 0.0 {
                        1.0
                    } else {
                        (cfg.huber_delta * spread / d).min(1.0)
                    }
                })
                .collect();
            let mu = robust_mean(s, &w)?;
            (w, mu)
        }
        AggregatorMode::Cauchy => {
            let scale = cfg.cauchy_gamma * spread;
            let w: Vec<f64> = s
                .iter()
                .map(|v| {
                    let r = (v - m).abs() / scale;
                    1.0 / (1.0 + r * r)
                })
                .collect();
            let mu = robust_mean(s, &w)?;
            (w, mu)
        }
    };

    Ok(SoftTrimEstimate {
        mode: cfg.mode,
        median: m,
        mad: spread,
        rho_raw,
        rho_hat,
        weights,
        // A weighted mean is a convex combination; the clamp only absorbs
        // last-bit rounding.
        mu_hat: clamp_to_hull(mu, scores),
        lambda: cfg.lambda,
        slope: cfg.slope,
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    const HAND: [f64; 5] = [0.1, 0.2, 0.2, 0.3, 0.8];

    #[test]
    fn median_conventions() {
        assert_eq!(median(&[0.3, 0.1, 0.2]).unwrap(), 0.2);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]).unwrap(), 2.5);
        assert_eq!(median(&[4.0, 1.0, 3.0, 2.0]).unwrap(), 2.5);
        assert_eq!(median(&[]), Err(SoftTrimError::Empty));
    }

    #[test]
    fn mad_cases() {
        assert!((mad(&[0.1, 0.2, 0.3], 0.2) - 0.1).abs() < 1e-12);
        assert_eq!(mad(&[0.4; 7], 0.4), 0.0);
        assert!((mad(&HAND, 0.2) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn rho_on_hand_example() {
        let raw = contamination_fraction(&HAND, 0.2, 0.1, 2.5);
        assert_eq!(raw, 0.2);
        assert_eq!(estimate_rho(&HAND, 0.2, 0.1, 2.5), 0.2);
        assert_eq!(estimate_rho(&[0.3; 4], 0.3, 0.0, 2.5), rho_floor(4));
    }

    #[test]
    fn rho_is_clamped() {
        // Half the points far out: raw fraction 0.5 would zero the logit.
        let s = [0.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let m = median(&s).unwrap();
        let d = mad(&s, m);
        assert_eq!(estimate_rho(&s, m, d, 0.5), RHO_CEILING);
        let clean = [0.50, 0.51, 0.49, 0.5];
        let m = median(&clean).unwrap();
        assert_eq!(estimate_rho(&clean, m, mad(&clean, m), 100.0), rho_floor(4));
    }

    #[test]
    fn weights_on_hand_example() {
        let w = soft_trim_weights(&HAND, 0.2, 0.1, 0.2, 1.0);
        let expected = [0.2, 0.5, 0.5, 0.2, 2.44e-4];
        for (got, want) in w.iter().zip(expected) {
            assert!(((got - want) / want).abs() < 1e-3, "{got} vs {want}");
        }
        let mu = robust_mean(&HAND, &w).unwrap();
        assert!((mu - 0.2001).abs() < 1e-3);
    }

    #[test]
    fn zero_deviation_weight_is_half() {
        for rho in [0.01, 0.2, 0.49] {
            for slope in [0.25, 1.0, default_slope()] {
                let w = soft_trim_weights(&[0.5, 0.7], 0.5, 0.1, rho, slope);
                assert_eq!(w[0], 0.5);
            }
        }
    }

    #[test]
    fn flat_slope_gives_uniform_weights() {
        let w = soft_trim_weights(&HAND, 0.2, 0.1, 0.2, 1e-12);
        assert!(w.iter().all(|w| (w - 0.5).abs() < 1e-9));
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert_eq!(sigmoid(1000.0), 1.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert!(log_sigmoid(-1000.0).is_finite());
        assert!((log_sigmoid(-1000.0) + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn robust_mean_reductions() {
        assert!((robust_mean(&HAND, &[1.0; 5]).unwrap() - 0.32).abs() < 1e-12);
        assert_eq!(robust_mean(&[0.7], &[0.3]).unwrap(), 0.7);
        assert_eq!(robust_mean(&[0.7], &[0.0]), Err(SoftTrimError::ZeroWeight));
        assert!(matches!(
            robust_mean(&[0.7], &[1.0, 1.0]),
            Err(SoftTrimError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn aggregate_modes_on_hand_example() {
        let s = ScoreSet::new(HAND.to_vec()).unwrap();
        let hard = aggregate(&s, &AggregatorConfig::with_mode(AggregatorMode::HardTrim)).unwrap();
        assert!((hard.mu_hat - 0.2).abs() < 1e-12);
        assert_eq!(hard.weights, vec![1.0, 1.0, 1.0, 1.0, 0.0]);

        let conf = ScoreSet::new(vec![0.1, 0.9]).unwrap();
        let c = aggregate(
            &conf,
            &AggregatorConfig::with_mode(AggregatorMode::Confidence),
        )
        .unwrap();
        assert_eq!(c.mu_hat, 0.9);

        let soft = aggregate(
            &s,
            &AggregatorConfig {
                slope: 1.0,
                ..AggregatorConfig::default()
            },
        )
        .unwrap();
        assert!((soft.median - 0.2).abs() < 1e-12);
        assert!((soft.mad - 0.1).abs() < 1e-12);
        assert_eq!(soft.rho_raw, 0.2);
        assert!((soft.mu_hat - 0.2001).abs() < 1e-3);
    }

    #[test]
    fn constant_scores_every_mode() {
        let s = ScoreSet::new(vec![0.37; 6]).unwrap();
        for mode in AggregatorMode::ALL {
            let e = aggregate(&s, &AggregatorConfig::with_mode(mode)).unwrap();
            assert_eq!(e.mu_hat, 0.37, "{mode}");
        }
    }

    #[test]
    fn hard_trim_fallback() {
        // Even-length set where the middle pair sits beyond λ·MAD.
        let s = ScoreSet::new(vec![0.0, 1.0]).unwrap();
        let cfg = AggregatorConfig {
            mode: AggregatorMode::HardTrim,
            lambda: 0.5,
            ..AggregatorConfig::default()
        };
        let e = aggregate(&s, &cfg).unwrap();
        assert!(e.fallback);
        assert_eq!(e.mu_hat, 0.5);
    }

    #[test]
    fn huber_and_cauchy_weights() {
        let s = ScoreSet::new(HAND.to_vec()).unwrap();
        let h = aggregate(&s, &AggregatorConfig::with_mode(AggregatorMode::Huber)).unwrap();
        assert_eq!(h.weights[..4], [1.0, 1.0, 1.0, 1.0]);
        assert!((h.weights[4] - 1.345 * 0.1 / 0.6).abs() < 1e-9);
        let c = aggregate(&s, &AggregatorConfig::with_mode(AggregatorMode::Cauchy)).unwrap();
        let r: f64 = 0.6 / (2.385 * 0.1);
        assert!((c.weights[4] - 1.0 / (1.0 + r * r)).abs() < 1e-9);
    }

    #[test]
    fn steep_slope_does_not_underflow_mean() {
        let s = ScoreSet::new(vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let cfg = AggregatorConfig {
            slope: 1e6,
            ..AggregatorConfig::default()
        };
        let e = aggregate(&s, &cfg).unwrap();
        assert_eq!(e.mu_hat, 0.5);
        assert!(e.weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn mode_parsing() {
        for mode in AggregatorMode::ALL {
            assert_eq!(mode.as_str().parse::<AggregatorMode>().unwrap(), mode);
        }
        assert!(matches!(
            "trimmed".parse::<AggregatorMode>(),
            Err(SoftTrimError::UnknownMode(_))
        ));
    }

    #[test]
    fn score_set_validation() {
        assert_eq!(ScoreSet::new(vec![]), Err(SoftTrimError::Empty));
        assert_eq!(
            ScoreSet::new(vec![0.1, f64::NAN]),
            Err(SoftTrimError::NonFinite { index: 1 })
        );
    }

    #[test]
    fn invalid_config_rejected() {
        let s = ScoreSet::new(vec![0.1]).unwrap();
        let cfg = AggregatorConfig {
            lambda: 0.0,
            ..AggregatorConfig::default()
        };
        assert!(matches!(
            aggregate(&s, &cfg),
            Err(SoftTrimError::InvalidParameter(_))
        ));
    }
}
