use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

use super::spec::{BridgeMode, ModelSpec, Variant, LAYER_SCALE_INIT, MLP_RATIO};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Normal(0, 0.02) truncated to two standard deviations.
    TruncNormal,
    Zeros,
    Ones,
    Const(f32),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

const INIT_STD: f64 = 0.02;

struct Layout(Vec<ParamDef>);

impl Layout {
    fn add(&mut self, name: String, shape: &[usize], init: Init) {
        self.0.push(ParamDef { name, shape: shape.to_vec(), init });
    }

    fn norm(&mut self, prefix: &str, d: usize) {
        self.add(format!("{prefix}.gamma"), &[d], Init::Ones);
        self.add(format!("{prefix}.beta"), &[d], Init::Zeros);
    }

    fn linear(&mut self, prefix: &str, i: usize, o: usize) {
        self.add(format!("{prefix}.weight"), &[i, o], Init::TruncNormal);
        self.add(format!("{prefix}.bias"), &[o], Init::Zeros);
    }

    fn conv(&mut self, prefix: &str, o: usize, cpg: usize, k: usize) {
        self.add(format!("{prefix}.kernel"), &[o, cpg, k, k], Init::TruncNormal);
        self.add(format!("{prefix}.bias"), &[o], Init::Zeros);
    }
}

/// Every parameter of `spec` in construction order.
pub fn param_layout(spec: &ModelSpec) -> Vec<ParamDef> {
    let mut l = Layout(Vec::new());
    if matches!(spec.variant, Variant::ConvNext | Variant::Hybrid) {
        let dims = spec.stage_dims;
        l.conv("backbone.stem.conv", dims[0], 3, 4);
        l.norm("backbone.stem.norm", dims[0]);
        for s in 0..4 {
            let c = dims[s];
            if s > 0 {
                l.norm(&format!("backbone.down{s}.norm"), dims[s - 1]);
                l.conv(&format!("backbone.down{s}.conv"), c, dims[s - 1], 2);
            }
            for b in 0..spec.stage_depths[s] {
                let p = format!("backbone.stage{s}.block{b}");
                l.conv(&format!("{p}.dwconv"), c, 1, 7);
                l.norm(&format!("{p}.norm"), c);
                l.linear(&format!("{p}.pwconv1"), c, MLP_RATIO * c);
                l.linear(&format!("{p}.pwconv2"), MLP_RATIO * c, c);
                if spec.use_layer_scale {
                    l.add(format!("{p}.layer_scale"), &[c], Init::Const(LAYER_SCALE_INIT));
                }
            }
        }
    }
    match spec.variant {
        Variant::Hybrid => {
            let c = spec.feature_dim();
            if spec.bridge_mode == BridgeMode::Learnable {
                l.linear("bridge.proj", c, c);
            }
            if spec.positional_embedding {
                l.add("bridge.pos_embed".into(), &[spec.token_count, spec.token_dim], Init::TruncNormal);
            }
        }
        Variant::Vit => {
            let patch = 3 * spec.patch_size * spec.patch_size;
            l.linear("patch_embed", patch, spec.token_dim);
            if spec.positional_embedding {
                l.add("patch_embed.pos_embed".into(), &[spec.token_count, spec.token_dim], Init::TruncNormal);
            }
        }
        Variant::ConvNext => {}
    }
    if spec.variant != Variant::ConvNext {
        let d = spec.token_dim;
        for b in 0..spec.encoder_blocks {
            let p = format!("encoder.block{b}");
            l.norm(&format!("{p}.norm1"), d);
            for proj in ["q", "k", "v", "proj"] {
                l.linear(&format!("{p}.attn.{proj}"), d, d);
            }
            l.norm(&format!("{p}.norm2"), d);
            l.linear(&format!("{p}.mlp.fc1"), d, MLP_RATIO * d);
            l.linear(&format!("{p}.mlp.fc2"), MLP_RATIO * d, d);
        }
        l.norm("encoder.norm", d);
    }
    let d = spec.head_input_dim();
    if spec.head_layers == 1 {
        l.linear("head.fc", d, 1);
    } else {
        l.linear("head.fc1", d, spec.head_hidden);
        l.linear("head.fc2", spec.head_hidden, 1);
    }
    l.0
}

/// Total number of scalar parameters of `spec`.
pub fn count_parameters(spec: &ModelSpec) -> usize {
    param_layout(spec).iter().map(|p| p.shape.iter().product::<usize>()).sum()
}

/// Name of the head's output bias, the parameter that carries the age offset.
pub fn output_bias_name(spec: &ModelSpec) -> &'static str {
    if spec.head_layers == 1 {
        "head.fc.bias"
    } else {
        "head.fc2.bias"
    }
}

/// Named parameter tensors of one model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor<f32>>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fresh parameters for `spec`, deterministic in `seed`.
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut store = ParamStore::new();
        for def in param_layout(spec) {
            let n: usize = def.shape.iter().product();
            let data: Vec<f32> = match def.init {
                Init::Zeros => vec![0.0; n],
                Init::Ones => vec![1.0; n],
                Init::Const(c) => vec![c; n],
                Init::TruncNormal => (0..n).map(|_| trunc_normal(&normal, &mut rng) as f32).collect(),
            };
            store.insert(&def.name, Tensor::new(def.shape, data)?)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, name: &str, t: Tensor<f32>) -> Result<()> {
        if self.entries.insert(name.to_string(), t).is_some() {
            return Err(Error::config(format!("duplicate parameter {name}")));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<f32>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn count(&self) -> usize {
        self.entries.values().map(|t| t.len()).sum()
    }

    /// Checks names and shapes against the layout of `spec`.
    pub fn check_matches(&self, spec: &ModelSpec) -> Result<()> {
        let layout = param_layout(spec);
        for def in &layout {
            match self.entries.get(&def.name) {
                None => return Err(Error::shape(format!("parameter {} missing for this model spec", def.name))),
                Some(t) if t.shape() != def.shape.as_slice() => {
                    return Err(Error::shape(format!(
                        "parameter {} has shape {:?}, spec expects {:?}",
                        def.name,
                        t.shape(),
                        def.shape
                    )))
                }
                _ => {}
            }
        }
        if layout.len() != self.entries.len() {
            let extra = self
                .entries
                .keys()
                .find(|k| !layout.iter().any(|d| &d.name == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::shape(format!("parameter {extra} is not part of this model spec")));
        }
        Ok(())
    }

    /// Registers every parameter as a named trainable leaf of `g`.
    pub fn load_into<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Vec<(String, Var)>> {
        self.entries
            .iter()
            .map(|(name, t)| Ok((name.clone(), g.param(name, t.cast())?)))
            .collect()
    }
}

fn trunc_normal(normal: &Normal<f64>, rng: &mut impl Rng) -> f64 {
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            return v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn head_parameter_counts() {
        let mut s = ModelSpec::default();
        s.head_layers = 1;
        let one: usize = param_layout(&s)
            .iter()
            .filter(|p| p.name.starts_with("head."))
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        assert_eq!(one, 193);
        s.head_layers = 2;
        s.head_hidden = 256;
        let two: usize = param_layout(&s)
            .iter()
            .filter(|p| p.name.starts_with("head."))
            .map(|p| p.shape.iter().product::<usize>())
            .sum();
        assert_eq!(two, 49_665);
        let names: Vec<_> = param_layout(&s).into_iter().filter(|p| p.name.starts_with("head.")).collect();
        assert!(names.iter().any(|p| p.name == "head.fc1.weight" && p.shape == [192, 256]));
        assert!(names.iter().any(|p| p.name == "head.fc2.weight" && p.shape == [256, 1]));
    }

    #[test]
    fn learnable_bridge_adds_projection() {
        let learn = ModelSpec::default();
        let reshape = ModelSpec { bridge_mode: BridgeMode::Reshape, ..ModelSpec::default() };
        assert_eq!(count_parameters(&learn) - count_parameters(&reshape), 768 * 768 + 768);
    }

    #[test]
    fn construction_is_reproducible() {
        let s = ModelSpec::reduced();
        let a = ParamStore::init(&s, 7).unwrap();
        let b = ParamStore::init(&s, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.count(), count_parameters(&s));
        a.check_matches(&s).unwrap();
        let c = ParamStore::init(&s, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn names_are_unique_and_dotted() {
        let layout = param_layout(&ModelSpec::default());
        let mut names: Vec<_> = layout.iter().map(|p| p.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), layout.len());
        assert!(names.contains(&"backbone.stage2.block0.dwconv.kernel".to_string()));
    }

    #[test]
    fn mismatch_names_the_parameter() {
        let a = ParamStore::init(&ModelSpec::reduced(), 1).unwrap();
        let other = ModelSpec { head_hidden: 16, ..ModelSpec::reduced() };
        let msg = a.check_matches(&other).unwrap_err().to_string();
        assert!(msg.contains("head.fc1"), "{msg}");
    }
}
