//! Regression objectives over predicted ages.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Adaptive,
    Mae,
    Mse,
    Huber,
    WeightedMse,
}

impl LossKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Adaptive => "adaptive",
            LossKind::Mae => "mae",
            LossKind::Mse => "mse",
            LossKind::Huber => "huber",
            LossKind::WeightedMse => "weighted_mse",
        }
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "adaptive" => LossKind::Adaptive,
            "mae" => LossKind::Mae,
            "mse" => LossKind::Mse,
            "huber" => LossKind::Huber,
            "weighted_mse" => LossKind::WeightedMse,
            _ => return Err(Error::config(format!("unknown loss kind {s:?}"))),
        })
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Per-integer-year weights for the weighted squared error.
#[derive(Clone, Debug, PartialEq)]
pub struct AgeWeights {
    bins: BTreeMap<i64, f64>,
}

pub fn age_bin(age: f64) -> i64 {
    age.floor() as i64
}

impl AgeWeights {
    pub fn new(bins: BTreeMap<i64, f64>) -> Result<Self> {
        if let Some((b, w)) = bins.iter().find(|(_, w)| !(**w > 0.0) || !w.is_finite()) {
            return Err(Error::config(format!("weight for age bin {b} must be positive, got {w}")));
        }
        Ok(AgeWeights { bins })
    }

    /// Weight `∝ N / count(bin)`, scaled so the mean weight over `ages` is 1.
    pub fn inverse_frequency(ages: &[f64]) -> Result<Self> {
        if ages.is_empty() {
            return Err(Error::contract("inverse-frequency weights need at least one age"));
        }
        let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
        for &a in ages {
            *counts.entry(age_bin(a)).or_default() += 1;
        }
        let n = ages.len() as f64;
        let k = counts.len() as f64;
        let bins = counts.into_iter().map(|(b, c)| (b, n / (k * c as f64))).collect();
        Self::new(bins)
    }

    pub fn uniform(lo: i64, hi: i64) -> Self {
        AgeWeights { bins: (lo..=hi).map(|b| (b, 1.0)).collect() }
    }

    pub fn weight(&self, age: f64) -> Result<f64> {
        let b = age_bin(age);
        self.bins
            .get(&b)
            .copied()
            .ok_or_else(|| Error::config(format!("no weight for age bin {b}")))
    }

    pub fn bins(&self) -> &BTreeMap<i64, f64> {
        &self.bins
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Adaptiveness of the adaptive loss.
    pub sigma: f64,
    /// Huber transition point.
    pub delta: f64,
    pub weights: Option<AgeWeights>,
}

impl Default for LossSpec {
    fn default() -> Self {
        LossSpec { kind: LossKind::Adaptive, sigma: 2.0, delta: 1.0, weights: None }
    }
}

impl LossSpec {
    pub fn of(kind: LossKind) -> Self {
        LossSpec { kind, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0) {
            return Err(Error::config(format!("loss.sigma must be positive, got {}", self.sigma)));
        }
        if !(self.delta > 0.0) {
            return Err(Error::config(format!("loss.delta must be positive, got {}", self.delta)));
        }
        Ok(())
    }
}

/// Per-sample loss `f(e)` and derivative `f'(e)` for error `e = pred - target`.
fn pointwise(spec: &LossSpec, e: f64, weight: f64) -> (f64, f64) {
    let a = e.abs();
    let sign = if e > 0.0 {
        1.0
    } else if e < 0.0 {
        -1.0
    } else {
        0.0
    };
    match spec.kind {
        LossKind::Adaptive => {
            let s = spec.sigma;
            let d = a + s;
            ((1.0 + s) * e * e / d, (1.0 + s) * e * (a + 2.0 * s) / (d * d))
        }
        LossKind::Mae => (a, sign),
        LossKind::Mse => (e * e, 2.0 * e),
        LossKind::Huber => {
            let dl = spec.delta;
            if a <= dl {
                (0.5 * e * e, e)
            } else {
                (dl * (a - 0.5 * dl), dl * sign)
            }
        }
        LossKind::WeightedMse => (weight * e * e, 2.0 * weight * e),
    }
}

/// Mean loss over the batch and its gradient with respect to `pred`.
pub fn loss_and_grad(pred: &[f64], target: &[f64], spec: &LossSpec) -> Result<(f64, Vec<f64>)> {
    spec.validate()?;
    if pred.len() != target.len() {
        return Err(Error::shape(format!(
            "loss: {} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::contract("loss over an empty batch"));
    }
    let n = pred.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for (&p, &t) in pred.iter().zip(target) {
        let w = match spec.kind {
            LossKind::WeightedMse => match &spec.weights {
                Some(ws) => ws.weight(t)?,
                None => return Err(Error::config("weighted_mse needs an age weight table")),
            },
            _ => 1.0,
        };
        let (f, df) = pointwise(spec, p - t, w);
        total += f;
        grad.push(df / n);
    }
    Ok((total / n, grad))
}

/// Records the loss of `pred` (any shape with one element per target) as a
/// scalar node of `g`.
pub fn standard_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &[f32], spec: &LossSpec) -> Result<Var> {
    let p: Vec<f64> = g.data(pred).iter().map(|&v| Scalar::to_f64(v)).collect();
    let t: Vec<f64> = target.iter().map(|&v| v as f64).collect();
    let (value, grad) = loss_and_grad(&p, &t, spec)?;
    g.linearized(pred, T::from_f64(value), grad.into_iter().map(T::from_f64).collect())
}

/// `(1+σ)/N · Σ e²/(|e|+σ)`.
pub fn adaptive_loss<T: Scalar>(g: &mut Graph<T>, pred: Var, target: &[f32], sigma: f64) -> Result<Var> {
    standard_loss(g, pred, target, &LossSpec { kind: LossKind::Adaptive, sigma, ..LossSpec::default() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn eval(kind: LossKind, pred: &[f64], target: &[f64]) -> f64 {
        loss_and_grad(pred, target, &LossSpec::of(kind)).unwrap().0
    }

    #[test]
    fn adaptive_hand_values() {
        assert_eq!(eval(LossKind::Adaptive, &[3.0, 7.0], &[3.0, 7.0]), 0.0);
        assert!((eval(LossKind::Adaptive, &[21.0], &[20.0]) - 1.0).abs() < 1e-12);
        assert!((eval(LossKind::Adaptive, &[20.0], &[24.0]) - 8.0).abs() < 1e-12);
    }

    #[test]
    fn standard_hand_values() {
        assert_eq!(eval(LossKind::Mse, &[3.0], &[0.0]), 9.0);
        assert_eq!(eval(LossKind::Mae, &[20.0, 30.0], &[25.0, 30.0]), 2.5);
        assert!((eval(LossKind::Huber, &[0.5], &[0.0]) - 0.125).abs() < 1e-12);
        assert!((eval(LossKind::Huber, &[2.0], &[0.0]) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn uniform_weights_equal_mse() {
        let pred = [10.5, 33.0, 71.2, 4.0];
        let target = [12.0, 30.0, 70.0, 9.9];
        let spec = LossSpec {
            kind: LossKind::WeightedMse,
            weights: Some(AgeWeights::uniform(0, 80)),
            ..LossSpec::default()
        };
        let (w, gw) = loss_and_grad(&pred, &target, &spec).unwrap();
        let (m, gm) = loss_and_grad(&pred, &target, &LossSpec::of(LossKind::Mse)).unwrap();
        assert_eq!(w, m);
        assert_eq!(gw, gm);
    }

    #[test]
    fn missing_weight_bin_is_config_error() {
        let spec = LossSpec {
            kind: LossKind::WeightedMse,
            weights: Some(AgeWeights::uniform(0, 10)),
            ..LossSpec::default()
        };
        assert!(matches!(loss_and_grad(&[1.0], &[50.0], &spec), Err(Error::Config(_))));
        let spec = LossSpec { weights: None, ..spec };
        assert!(matches!(loss_and_grad(&[1.0], &[5.0], &spec), Err(Error::Config(_))));
    }

    #[test]
    fn inverse_frequency_weights_average_to_one() {
        let ages = [20.1, 20.7, 20.2, 35.0, 61.5, 61.9];
        let w = AgeWeights::inverse_frequency(&ages).unwrap();
        let mean: f64 = ages.iter().map(|&a| w.weight(a).unwrap()).sum::<f64>() / ages.len() as f64;
        assert!((mean - 1.0).abs() < 1e-12);
        assert!(w.weight(35.0).unwrap() > w.weight(20.0).unwrap());
    }

    #[test]
    fn length_mismatch_is_shape_error() {
        assert!(matches!(
            loss_and_grad(&[1.0, 2.0], &[1.0], &LossSpec::default()),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn graph_loss_node_backpropagates() {
        let mut g = Graph::<f64>::new();
        let p = g.param("p", Tensor::new(vec![2, 1], vec![22.0, 30.0]).unwrap()).unwrap();
        let l = adaptive_loss(&mut g, p, &[20.0, 30.0], 2.0).unwrap();
        // e = 2: (1+2)*4/4 / 2 = 1.5
        assert!((g.data(l)[0] - 1.5).abs() < 1e-12);
        let gr = g.backward(l).unwrap().wrt(&g, p);
        // f'(2) = 3*2*(2+4)/16 = 2.25, halved for the mean
        assert!((gr.data()[0] - 1.125).abs() < 1e-12);
        assert_eq!(gr.data()[1], 0.0);
    }
}
