//! Evaluation metrics: MAE, cumulative score and the absolute-error CDF.

use crate::error::{Error, Result};

fn check(preds: &[f64], targets: &[f64]) -> Result<()> {
    if preds.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} predictions for {} targets",
            preds.len(),
            targets.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::contract("metrics need at least one sample"));
    }
    Ok(())
}

pub fn abs_errors(preds: &[f64], targets: &[f64]) -> Vec<f64> {
    preds.iter().zip(targets).map(|(p, t)| (p - t).abs()).collect()
}

/// Mean absolute error in years.
pub fn mae(preds: &[f64], targets: &[f64]) -> Result<f64> {
    check(preds, targets)?;
    Ok(abs_errors(preds, targets).iter().sum::<f64>() / preds.len() as f64)
}

/// Percentage of samples with `|error| <= k`.
pub fn cumulative_score(preds: &[f64], targets: &[f64], k: f64) -> Result<f64> {
    check(preds, targets)?;
    if !(k >= 0.0) {
        return Err(Error::contract(format!("cumulative score threshold must be >= 0, got {k}")));
    }
    let hits = preds.iter().zip(targets).filter(|(p, t)| (*p - *t).abs() <= k).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorCdf {
    /// `(threshold, fraction of samples with |error| <= threshold)`.
    pub points: Vec<(f64, f64)>,
    /// Trapezoidal area under the curve over `[0, max threshold]`, divided by
    /// the maximum threshold.
    pub auc: f64,
}

pub fn error_cdf(preds: &[f64], targets: &[f64], thresholds: &[f64]) -> Result<ErrorCdf> {
    check(preds, targets)?;
    if thresholds.is_empty() {
        return Err(Error::contract("error CDF needs at least one threshold"));
    }
    if thresholds[0] < 0.0 || thresholds.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::contract("error CDF thresholds must be non-negative and strictly increasing"));
    }
    let errs = abs_errors(preds, targets);
    let n = errs.len() as f64;
    let frac = |t: f64| errs.iter().filter(|&&e| e <= t).count() as f64 / n;
    let points: Vec<(f64, f64)> = thresholds.iter().map(|&t| (t, frac(t))).collect();
    let t_max = *thresholds.last().unwrap();
    let auc = if t_max == 0.0 {
        points[0].1
    } else {
        let mut curve = Vec::with_capacity(points.len() + 1);
        if thresholds[0] > 0.0 {
            curve.push((0.0, frac(0.0)));
        }
        curve.extend_from_slice(&points);
        curve.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0).sum::<f64>() / t_max
    };
    Ok(ErrorCdf { points, auc })
}

/// Thresholds `0, 0.5, ..., 15`.
pub fn default_cdf_thresholds() -> Vec<f64> {
    (0..=30).map(|i| i as f64 * 0.5).collect()
}

/// `k = 1..=10` years.
pub fn default_cs_levels() -> Vec<f64> {
    (1..=10).map(|k| k as f64).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub samples: usize,
    pub mae: f64,
    /// `(k, percent)` pairs in increasing `k`.
    pub cs: Vec<(f64, f64)>,
    pub cdf: Vec<(f64, f64)>,
    pub auc: f64,
}

impl MetricsReport {
    pub fn compute(preds: &[f64], targets: &[f64], cs_levels: &[f64], thresholds: &[f64]) -> Result<Self> {
        let cdf = error_cdf(preds, targets, thresholds)?;
        let cs = cs_levels
            .iter()
            .map(|&k| Ok((k, cumulative_score(preds, targets, k)?)))
            .collect::<Result<_>>()?;
        Ok(MetricsReport { samples: preds.len(), mae: mae(preds, targets)?, cs, cdf: cdf.points, auc: cdf.auc })
    }

    pub fn standard(preds: &[f64], targets: &[f64]) -> Result<Self> {
        Self::compute(preds, targets, &default_cs_levels(), &default_cdf_thresholds())
    }

    pub fn cs_at(&self, k: f64) -> Option<f64> {
        self.cs.iter().find(|(kk, _)| *kk == k).map(|&(_, v)| v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[3.0, 4.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(mae(&[20.0, 30.0], &[25.0, 30.0]).unwrap(), 2.5);
        assert!(matches!(mae(&[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn cs_examples() {
        assert_eq!(cumulative_score(&[5.0], &[5.0], 0.0).unwrap(), 100.0);
        let t = [0.0, 0.0, 0.0];
        let p = [1.0, -3.0, 7.0];
        assert!((cumulative_score(&p, &t, 5.0).unwrap() - 200.0 / 3.0).abs() < 1e-9);
        assert_eq!(cumulative_score(&p, &t, 7.0).unwrap(), 100.0);
        assert!(cumulative_score(&p, &t, -1.0).is_err());
    }

    #[test]
    fn cdf_examples() {
        let th: Vec<f64> = (0..=10).map(|i| i as f64).collect();
        let perfect = error_cdf(&[1.0, 2.0], &[1.0, 2.0], &th).unwrap();
        assert!(perfect.points.iter().all(|&(_, f)| f == 1.0));
        assert_eq!(perfect.auc, 1.0);

        let one = error_cdf(&[35.0], &[30.0], &th).unwrap();
        assert_eq!(one.points[4].1, 0.0);
        assert_eq!(one.points[5].1, 1.0);
        // trapezoids: half a unit over [4,5] plus five units over [5,10]
        assert!((one.auc - 0.55).abs() < 1e-12);
        assert!((one.auc - 0.5).abs() <= 0.05 + 1e-12);

        assert!(error_cdf(&[1.0], &[1.0], &[1.0, 0.5]).is_err());
    }

    #[test]
    fn report_cdf_matches_cs() {
        let p = [10.0, 22.0, 31.5, 40.0, 58.0];
        let t = [12.0, 20.0, 30.0, 47.0, 58.5];
        let r = MetricsReport::standard(&p, &t).unwrap();
        for &(th, f) in &r.cdf {
            assert_eq!(f, cumulative_score(&p, &t, th).unwrap() / 100.0);
        }
        assert_eq!(r.cs.len(), 10);
        assert_eq!(r.cdf.len(), 31);
        assert_eq!(r.cdf.last().unwrap().1, 1.0);
    }
}
