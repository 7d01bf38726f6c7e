//! Finite-difference checks of every layer type and of the full reduced model.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use agegrad::model::{layers, BridgeMode, ModelSpec, ParamStore, Variant};
use agegrad::tensor::{ErrorMetric, OpKind};
use agegrad::{grad_check, GradCheckOptions, GradCheckReport, Graph, Result, Tensor, Var};

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub tol: f64,
    pub step: f64,
    pub seed: u64,
    /// Coordinates sampled per tensor in the full-model case.
    pub model_coords: usize,
    /// Corrupts the backward pass of this operation family.
    pub fault: Option<OpKind>,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        SuiteOptions { tol: 1e-3, step: 1e-2, seed: 0, model_coords: 8, fault: None }
    }
}

#[derive(Clone, Debug)]
pub struct CaseResult {
    pub name: &'static str,
    /// Operation families the case exercises.
    pub ops: Vec<OpKind>,
    pub report: GradCheckReport,
    pub elapsed: Duration,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.report.passed
    }
}

fn uniform(shape: &[usize], scale: f32, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).expect("shape matches")
}

/// Parameters under `prefix` from `spec`'s layout, at a random point away
/// from the initialisation (so layer scales and norms are not degenerate).
fn layer_params(spec: &ModelSpec, prefix: &str, rng: &mut ChaCha8Rng) -> Vec<(String, Tensor<f32>)> {
    let store = ParamStore::init(spec, rng.random()).expect("valid spec");
    store
        .iter()
        .filter(|(n, _)| n.starts_with(prefix))
        .map(|(n, t)| {
            let noise = uniform(t.shape(), 0.5, rng);
            let data = t.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            (n.to_string(), Tensor::new(t.shape().to_vec(), data).expect("shape matches"))
        })
        .collect()
}

/// Scalar probe `sum(out ⊙ r)` with a fixed pseudo-random `r`, so every
/// output element contributes a distinct weight.
fn probe(g: &mut Graph<f32>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let r = g.input(uniform(&shape, 1.0, &mut rng));
    let m = g.mul(out, r)?;
    g.sum(m)
}

struct Case {
    name: &'static str,
    ops: Vec<OpKind>,
    /// `(name, value)`; names starting with `_` stay anonymous.
    inputs: Vec<(String, Tensor<f32>)>,
    body: Box<dyn Fn(&mut Graph<f32>, &[Var]) -> Result<Var>>,
    max_coords: Option<usize>,
}

fn case(
    name: &'static str,
    ops: &[OpKind],
    inputs: Vec<(String, Tensor<f32>)>,
    body: impl Fn(&mut Graph<f32>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case { name, ops: ops.to_vec(), inputs, body: Box::new(body), max_coords: None }
}

fn anon(t: Tensor<f32>) -> (String, Tensor<f32>) {
    ("_x".into(), t)
}

fn small_spec() -> ModelSpec {
    ModelSpec::reduced()
}

/// Reduced spec with a 2×2 backbone grid, so the bridge sees real spatial
/// positions.
fn bridge_spec(mode: BridgeMode) -> ModelSpec {
    ModelSpec { input_size: 64, token_count: 16, bridge_mode: mode, ..ModelSpec::reduced() }
}

fn cases(opts: &SuiteOptions) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let r = &mut rng;
    let mut out = Vec::new();

    out.push(case(
        "conv2d_depthwise",
        &[OpKind::Conv2d],
        vec![anon(uniform(&[2, 3, 6, 6], 1.0, r)), anon(uniform(&[3, 1, 3, 3], 1.0, r)), anon(uniform(&[3], 1.0, r))],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 3),
    ));
    out.push(case(
        "conv2d_pointwise",
        &[OpKind::Conv2d],
        vec![anon(uniform(&[2, 4, 5, 5], 1.0, r)), anon(uniform(&[6, 4, 1, 1], 1.0, r)), anon(uniform(&[6], 1.0, r))],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 0, 1),
    ));
    out.push(case(
        "conv2d_strided",
        &[OpKind::Conv2d],
        vec![anon(uniform(&[1, 3, 8, 8], 1.0, r)), anon(uniform(&[4, 3, 4, 4], 1.0, r)), anon(uniform(&[4], 1.0, r))],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 4, 0, 1),
    ));
    out.push(case(
        "layer_norm",
        &[OpKind::LayerNorm],
        vec![anon(uniform(&[3, 8], 2.0, r)), anon(uniform(&[8], 1.5, r)), anon(uniform(&[8], 1.0, r))],
        |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6),
    ));
    out.push(case("gelu", &[OpKind::Gelu], vec![anon(uniform(&[4, 5], 3.0, r))], |g, v| g.gelu(v[0])));
    out.push(case("softmax", &[OpKind::Softmax], vec![anon(uniform(&[3, 6], 2.0, r))], |g, v| g.softmax(v[0], 1)));
    out.push(case(
        "matmul",
        &[OpKind::MatMul],
        vec![anon(uniform(&[3, 4], 1.0, r)), anon(uniform(&[4, 5], 1.0, r))],
        |g, v| g.matmul(v[0], v[1]),
    ));

    let spec = small_spec();
    let mut named = vec![anon(uniform(&[2, 4, 16], 1.0, r))];
    named.extend(layer_params(&spec, "encoder.block0.", r));
    let heads = spec.num_heads;
    out.push(case(
        "attention_block",
        &[OpKind::LayerNorm, OpKind::Linear, OpKind::BatchMatMul, OpKind::Softmax, OpKind::Gelu, OpKind::Scale],
        named,
        move |g, v| layers::encoder_block(g, "encoder.block0", v[0], heads),
    ));

    let mut named = vec![anon(uniform(&[2, 8, 8, 8], 1.0, r))];
    named.extend(layer_params(&spec, "backbone.stage0.block0.", r));
    out.push(case(
        "convnext_block",
        &[OpKind::Conv2d, OpKind::Permute, OpKind::LayerNorm, OpKind::Linear, OpKind::Gelu, OpKind::MulBroadcast],
        named,
        |g, v| layers::convnext_block(g, "backbone.stage0.block0", v[0]),
    ));

    for (name, mode) in [("bridge_learnable", BridgeMode::Learnable), ("bridge_reshape", BridgeMode::Reshape)] {
        let spec = bridge_spec(mode);
        let mut named = vec![anon(uniform(&[2, 64, 2, 2], 1.0, r))];
        named.extend(layer_params(&spec, "bridge.", r));
        out.push(case(
            name,
            &[OpKind::Permute, OpKind::Reshape, OpKind::Linear, OpKind::AddBroadcast],
            named,
            move |g, v| layers::bridge(g, &spec, v[0], mode),
        ));
    }

    for (name, layers_n) in [("mlp_head_1", 1), ("mlp_head_2", 2)] {
        let spec = ModelSpec { head_layers: layers_n, ..small_spec() };
        let mut named = vec![anon(uniform(&[3, 4, 16], 1.0, r))];
        named.extend(layer_params(&spec, "head.", r));
        out.push(case(name, &[OpKind::MeanAxis, OpKind::Linear, OpKind::Gelu], named, move |g, v| {
            layers::mlp_head(g, v[0], layers_n)
        }));
    }

    let spec = ModelSpec { variant: Variant::Hybrid, ..small_spec() };
    let mut named = vec![anon(uniform(&[2, 3, 32, 32], 1.0, r))];
    named.extend(layer_params(&spec, "", r));
    let mut full = case(
        "full_reduced_hybrid",
        &[OpKind::Conv2d, OpKind::LayerNorm, OpKind::Linear, OpKind::BatchMatMul, OpKind::Softmax, OpKind::Gelu],
        named,
        move |g, v| Ok(agegrad::model::forward(g, &spec, v[0])?.prediction),
    );
    full.max_coords = Some(opts.model_coords);
    out.push(full);
    out
}

pub fn case_names() -> Vec<&'static str> {
    cases(&SuiteOptions::default()).into_iter().map(|c| c.name).collect()
}

/// Runs every case; `filter` keeps cases whose name contains it.
pub fn run_suite(opts: &SuiteOptions, filter: Option<&str>) -> Result<Vec<CaseResult>> {
    let mut results = Vec::new();
    for (i, c) in cases(opts).into_iter().enumerate() {
        if filter.is_some_and(|f| !c.name.contains(f)) {
            continue;
        }
        let t0 = Instant::now();
        let names: Vec<String> = c.inputs.iter().map(|(n, _)| n.clone()).collect();
        let tensors: Vec<Tensor<f32>> = c.inputs.into_iter().map(|(_, t)| t).collect();
        let body = c.body;
        let seed = opts.seed.wrapping_add(i as u64);
        let f = move |g: &mut Graph<f32>, vars: &[Var]| -> Result<Var> {
            for (n, &v) in names.iter().zip(vars) {
                if !n.starts_with('_') {
                    g.bind_name(n, v)?;
                }
            }
            let out = body(g, vars)?;
            probe(g, out, seed)
        };
        let gc = GradCheckOptions {
            step: opts.step,
            tol: opts.tol,
            max_coords: c.max_coords,
            seed,
            fault: opts.fault,
            metric: ErrorMetric::Norm,
            ..GradCheckOptions::default()
        };
        let report = grad_check(f, &tensors, &gc)?;
        results.push(CaseResult { name: c.name, ops: c.ops, report, elapsed: t0.elapsed() });
    }
    Ok(results)
}

/// One line per case: `PASS|FAIL name max_rel_err ops seconds`.
pub fn format_results(results: &[CaseResult]) -> String {
    results
        .iter()
        .map(|r| {
            let ops: Vec<&str> = r.ops.iter().map(|o| o.name()).collect();
            format!(
                "{} {:<22} rel_err {:.3e}  ops {}  {:.2}s\n",
                if r.passed() { "PASS" } else { "FAIL" },
                r.name,
                r.report.norm_rel_err,
                ops.join(","),
                r.elapsed.as_secs_f64()
            )
        })
        .collect()
}
