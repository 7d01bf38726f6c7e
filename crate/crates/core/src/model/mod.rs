//! ConvNeXt, ViT and hybrid ConvNeXt-Transformer age regressors.

pub mod layers;
mod params;
mod spec;

pub use params::{count_parameters, output_bias_name, param_layout, Init, ParamDef, ParamStore};
pub use spec::{BridgeMode, ModelSpec, Variant, BACKBONE_STRIDE, LAYER_SCALE_INIT, MLP_RATIO, NORM_EPS};

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Graph, Scalar, Tensor, Var};

/// Nodes of interest from one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// Backbone feature map (convnext and hybrid).
    pub features: Option<Var>,
    /// Token sequence entering the encoder (vit and hybrid).
    pub tokens: Option<Var>,
    /// Encoder output (vit and hybrid).
    pub encoded: Option<Var>,
    /// `B×1` age predictions.
    pub prediction: Var,
}

/// Runs `spec` on `image` (B×3×S×S) using parameters already registered in
/// `g` (see [`ParamStore::load_into`]).
pub fn forward<T: Scalar>(g: &mut Graph<T>, spec: &ModelSpec, image: Var) -> Result<ForwardOutput> {
    spec.validate()?;
    let s = g.shape(image).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] != spec.input_size || s[3] != spec.input_size {
        return Err(Error::shape(format!(
            "model expects B×3×{n}×{n} images, got {s:?}",
            n = spec.input_size
        )));
    }
    let mut out = ForwardOutput { features: None, tokens: None, encoded: None, prediction: image };
    let head_in = match spec.variant {
        Variant::ConvNext => {
            let f = layers::convnext_backbone(g, spec, image)?;
            out.features = Some(f);
            let fs = g.shape(f).to_vec();
            let t = g.reshape(f, &[fs[0], fs[1], fs[2] * fs[3]])?;
            // B×C×hw -> B×hw×C so the head pools over positions
            g.permute(t, &[0, 2, 1])?
        }
        Variant::Vit => {
            let patches = layers::patchify(g, image, spec.patch_size)?;
            let mut t = layers::linear(g, "patch_embed", patches)?;
            if spec.positional_embedding {
                let pe = g.param_var("patch_embed.pos_embed")?;
                t = g.add_broadcast(t, pe)?;
            }
            out.tokens = Some(t);
            let e = layers::vit_encoder(g, spec, t)?;
            out.encoded = Some(e);
            e
        }
        Variant::Hybrid => {
            let f = layers::convnext_backbone(g, spec, image)?;
            out.features = Some(f);
            let t = layers::bridge(g, spec, f, spec.bridge_mode)?;
            out.tokens = Some(t);
            let e = layers::vit_encoder(g, spec, t)?;
            out.encoded = Some(e);
            e
        }
    };
    out.prediction = layers::mlp_head(g, head_in, spec.head_layers)?;
    Ok(out)
}

/// Inference helper: predictions for a `B×3×S×S` batch.
pub fn predict(spec: &ModelSpec, params: &ParamStore, images: &Tensor<f32>) -> Result<Vec<f32>> {
    let mut g = Graph::<f32>::new();
    params.load_into(&mut g)?;
    let x = g.input(images.clone());
    let out = forward(&mut g, spec, x)?;
    Ok(g.data(out.prediction).to_vec())
}

/// Predictions for a batch, evaluated in sub-batches of `chunk` images that
/// run in parallel. Results equal [`predict`] on the whole batch.
pub fn predict_parallel(spec: &ModelSpec, params: &ParamStore, images: &Tensor<f32>, chunk: usize) -> Result<Vec<f32>> {
    let s = images.shape();
    if s.len() != 4 {
        return Err(Error::shape(format!("expected B×3×S×S images, got {s:?}")));
    }
    let b = s[0];
    let per = images.len() / b;
    let chunk = chunk.max(1);
    let parts = par::map_range(b.div_ceil(chunk), |i| {
        let lo = i * chunk;
        let hi = (lo + chunk).min(b);
        let mut shape = s.to_vec();
        shape[0] = hi - lo;
        let t = Tensor::new(shape, images.data()[lo * per..hi * per].to_vec())?;
        predict(spec, params, &t)
    });
    let mut out = Vec::with_capacity(b);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}
