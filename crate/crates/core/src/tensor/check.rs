//! Central-difference gradient checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{Graph, OpKind, Scalar, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step `h` in `(f(x+h) - f(x-h)) / 2h`.
    pub step: f64,
    /// Maximum tolerated relative error.
    pub tol: f64,
    /// Lower bound of the relative-error denominator `max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
    /// Perturb the backward pass of one operation family.
    pub fault: Option<OpKind>,
    pub metric: ErrorMetric,
}

/// What `tol` bounds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ErrorMetric {
    /// Largest per-coordinate `|a - n| / max(|a|, |n|, floor)`.
    #[default]
    Coordinate,
    /// `‖a - n‖ / max(‖a‖, ‖n‖, floor)` over every checked coordinate of
    /// every input. Robust to coordinates whose true gradient is zero, where
    /// 32-bit rounding noise makes the per-coordinate ratio meaningless.
    Norm,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-3, tol: 1e-3, floor: 1e-8, max_coords: None, seed: 0, fault: None, metric: ErrorMetric::Coordinate }
    }
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub input: usize,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// `‖a - n‖ / max(‖a‖, ‖n‖, floor)` over the checked coordinates.
    pub norm_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub norm_rel_err: f64,
    pub passed: bool,
    pub inputs: Vec<InputCheck>,
}

fn eval<T: Scalar, F>(f: &F, inputs: &[Tensor<T>], fault: Option<OpKind>) -> Result<(Graph<T>, Var, Vec<Var>)>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    g.inject_fault(fault);
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = f(&mut g, &vars)?;
    if !g.value(out).is_scalar() {
        return Err(Error::contract(format!(
            "gradient check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok((g, out, vars))
}

/// Compares the analytic gradient of scalar `f` with respect to each input
/// against central differences.
pub fn grad_check<T: Scalar, F>(f: F, inputs: &[Tensor<T>], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    if !(opts.step > 0.0) {
        return Err(Error::contract(format!("gradient check step must be positive, got {}", opts.step)));
    }
    let (g, out, vars) = eval(&f, inputs, opts.fault)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| grads.wrt(&g, v)).collect();
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let h = T::from_f64(opts.step);
    let mut checks = Vec::with_capacity(inputs.len());
    let (mut td2, mut ta2, mut tn2) = (0.0, 0.0, 0.0);
    for (idx, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = match opts.max_coords {
            Some(k) if k < n => {
                let mut c = sample(&mut rng, n, k).into_vec();
                c.sort_unstable();
                c
            }
            _ => (0..n).collect(),
        };
        let mut check = InputCheck { input: idx, checked: coords.len(), max_abs_err: 0.0, max_rel_err: 0.0, norm_rel_err: 0.0, worst: 0 };
        let (mut d2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for &c in &coords {
            let orig = input.data()[c];
            work[idx].data_mut()[c] = orig + h;
            let (gp, op, _) = eval(&f, &work, None)?;
            let fp = gp.data(op)[0].to_f64();
            work[idx].data_mut()[c] = orig - h;
            let (gm, om, _) = eval(&f, &work, None)?;
            let fm = gm.data(om)[0].to_f64();
            work[idx].data_mut()[c] = orig;
            // the step actually taken after rounding to T
            let span = ((orig + h) - (orig - h)).to_f64();
            let numeric = (fp - fm) / span;
            let a = analytic[idx].data()[c].to_f64();
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
            d2 += abs * abs;
            a2 += a * a;
            n2 += numeric * numeric;
            check.max_abs_err = check.max_abs_err.max(abs);
            if rel > check.max_rel_err || !rel.is_finite() {
                check.max_rel_err = rel;
                check.worst = c;
            }
        }
        td2 += d2;
        ta2 += a2;
        tn2 += n2;
        check.norm_rel_err = d2.sqrt() / a2.sqrt().max(n2.sqrt()).max(opts.floor);
        checks.push(check);
    }
    let max_abs_err = checks.iter().map(|c| c.max_abs_err).fold(0.0, f64::max);
    let max_rel_err = checks.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let norm_rel_err = td2.sqrt() / ta2.sqrt().max(tn2.sqrt()).max(opts.floor);
    let bound = match opts.metric {
        ErrorMetric::Coordinate => max_rel_err,
        ErrorMetric::Norm => norm_rel_err,
    };
    Ok(GradCheckReport {
        max_abs_err,
        max_rel_err,
        norm_rel_err,
        passed: bound.is_finite() && bound <= opts.tol,
        inputs: checks,
    })
}
