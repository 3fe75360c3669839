//! Shape diagnostics for similarity score distributions: population skewness,
//! excess kurtosis and normal Q–Q points.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

/// `|skewness|` above this flags a skewed distribution.
pub const SKEW_THRESHOLD: f64 = 0.5;
/// Excess kurtosis above this flags heavy tails.
pub const KURTOSIS_THRESHOLD: f64 = 3.0;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiagnosticsError {
    #[error("need at least 4 scores, got {0}")]
    TooFew(usize),
    #[error("score {0} is not finite")]
    NonFinite(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ShapeFlags {
    pub skewed: bool,
    pub heavy_tailed: bool,
    /// Zero variance: moments reported as 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    /// `(theoretical normal quantile, sample order statistic)` pairs.
    pub qq_points: Vec<(f64, f64)>,
    pub flags: ShapeFlags,
}

/// Standard-normal quantiles at the Hazen plotting positions `(i - 0.5) / n`.
pub fn hazen_quantiles(n: usize) -> Vec<f64> {
    let z = Normal::standard();
    (1..=n)
        .map(|i| z.inverse_cdf((i as f64 - 0.5) / n as f64))
        .collect()
}

pub fn describe(scores: &[f64]) -> Result<DistributionReport, DiagnosticsError> {
    let n = scores.len();
    if n < 4 {
        return Err(DiagnosticsError::TooFew(n));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(DiagnosticsError::NonFinite(i));
    }
    let nf = n as f64;
    let mean = scores.iter().sum::<f64>() / nf;
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for s in scores {
        let d = s - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;

    let degenerate = m2 == 0.0;
    let (skewness, excess_kurtosis) = if degenerate {
        (0.0, 0.0)
    } else {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    };

    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let qq_points = hazen_quantiles(n).into_iter().zip(sorted).collect();

    Ok(DistributionReport {
        n,
        mean,
        std: m2.sqrt(),
        skewness,
        excess_kurtosis,
        qq_points,
        flags: ShapeFlags {
            skewed: skewness.abs() > SKEW_THRESHOLD,
            heavy_tailed: excess_kurtosis > KURTOSIS_THRESHOLD,
            degenerate,
        },
    })
}

/// Writes Q–Q points as CSV rows `label,theoretical,sample`.
pub fn write_qq_csv<W: std::io::Write>(
    out: W,
    reports: &[(String, &DistributionReport)],
) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["label", "theoretical", "sample"])?;
    for (label, r) in reports {
        for (t, s) in &r.qq_points {
            w.write_record([label.as_str(), &t.to_string(), &s.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn needs_four() {
        assert_eq!(describe(&[1.0, 2.0, 3.0]), Err(DiagnosticsError::TooFew(3)));
    }

    #[test]
    fn symmetric_set_has_zero_skew() {
        let r = describe(&[1.0, 2.0, 2.0, 3.0]).unwrap();
        assert_eq!(r.skewness, 0.0);
    }

    #[test]
    fn hand_moments() {
        let r = describe(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(r.mean, 2.5);
        assert_eq!(r.skewness, 0.0);
        assert!((r.excess_kurtosis - (2.5625 / 1.5625 - 3.0)).abs() < 1e-12);
        assert!((r.excess_kurtosis + 1.36).abs() < 1e-9);
        assert!(!r.flags.skewed && !r.flags.heavy_tailed);
    }

    #[test]
    fn constant_is_degenerate() {
        let r = describe(&[0.2; 5]).unwrap();
        assert!(r.flags.degenerate);
        assert_eq!(r.skewness, 0.0);
        assert_eq!(r.excess_kurtosis, 0.0);
    }

    #[test]
    fn hazen_is_symmetric() {
        let q = hazen_quantiles(4);
        assert!((q[0] + q[3]).abs() < 1e-12);
        assert!((q[1] + q[2]).abs() < 1e-12);
        assert!((q[0] - Normal::standard().inverse_cdf(0.125)).abs() < 1e-12);
    }

    #[test]
    fn qq_csv_shape() {
        let r = describe(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut buf = Vec::new();
        write_qq_csv(&mut buf, &[("c".into(), &r)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("label,theoretical,sample\n"));
    }
}
