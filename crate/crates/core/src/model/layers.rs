//! Layer forward passes. Each function looks its parameters up by dotted
//! name in the graph, so the same code runs for training, evaluation and
//! gradient checks.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Var};

use super::spec::{BridgeMode, ModelSpec, NORM_EPS};

fn p<T: Scalar>(g: &Graph<T>, prefix: &str, name: &str) -> Result<Var> {
    g.param_var(&format!("{prefix}.{name}"))
}

fn opt_p<T: Scalar>(g: &Graph<T>, prefix: &str, name: &str) -> Option<Var> {
    g.param_var(&format!("{prefix}.{name}")).ok()
}

/// LayerNorm over the last axis with `{prefix}.gamma` / `{prefix}.beta`.
pub fn norm<T: Scalar>(g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = p(g, prefix, "gamma")?;
    let beta = p(g, prefix, "beta")?;
    g.layer_norm(x, gamma, beta, NORM_EPS)
}

pub fn linear<T: Scalar>(g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
    let w = p(g, prefix, "weight")?;
    let b = opt_p(g, prefix, "bias");
    g.linear(x, w, b)
}

/// LayerNorm across the channels of an NCHW map.
pub fn channel_norm<T: Scalar>(g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
    let t = g.permute(x, &[0, 2, 3, 1])?;
    let t = norm(g, prefix, t)?;
    g.permute(t, &[0, 3, 1, 2])
}

fn channels<T: Scalar>(g: &Graph<T>, x: Var, what: &str) -> Result<usize> {
    let s = g.shape(x);
    if s.len() != 4 {
        return Err(Error::shape(format!("{what}: expected B×C×H×W, got {s:?}")));
    }
    Ok(s[1])
}

/// Depthwise 7×7 → LayerNorm → pointwise C→4C → GELU → pointwise 4C→C →
/// layer scale → residual.
pub fn convnext_block<T: Scalar>(g: &mut Graph<T>, prefix: &str, x: Var) -> Result<Var> {
    let c = channels(g, x, prefix)?;
    let k = p(g, prefix, "dwconv.kernel")?;
    let ks = g.shape(k);
    if ks[0] != c || ks[1] != 1 {
        return Err(Error::shape(format!(
            "{prefix}: input has {c} channels, depthwise kernel is {ks:?}"
        )));
    }
    let kb = opt_p(g, prefix, "dwconv.bias");
    let t = g.conv2d(x, k, kb, 1, 3, c)?;
    let t = g.permute(t, &[0, 2, 3, 1])?;
    let t = norm(g, &format!("{prefix}.norm"), t)?;
    let t = linear(g, &format!("{prefix}.pwconv1"), t)?;
    let t = g.gelu(t)?;
    let mut t = linear(g, &format!("{prefix}.pwconv2"), t)?;
    if let Some(ls) = opt_p(g, prefix, "layer_scale") {
        t = g.mul_broadcast(t, ls)?;
    }
    let t = g.permute(t, &[0, 3, 1, 2])?;
    g.add(x, t)
}

fn conv<T: Scalar>(g: &mut Graph<T>, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let k = p(g, prefix, "kernel")?;
    let b = opt_p(g, prefix, "bias");
    g.conv2d(x, k, b, stride, 0, 1)
}

/// Stem, four stages of ConvNeXt blocks and the three 2×2 downsamplers.
pub fn convnext_backbone<T: Scalar>(g: &mut Graph<T>, spec: &ModelSpec, image: Var) -> Result<Var> {
    let s = g.shape(image).to_vec();
    if s.len() != 4 || s[1] != 3 || s[2] != spec.input_size || s[3] != spec.input_size {
        return Err(Error::shape(format!(
            "backbone expects B×3×{n}×{n} images, got {s:?}",
            n = spec.input_size
        )));
    }
    let mut x = conv(g, "backbone.stem.conv", image, 4)?;
    x = channel_norm(g, "backbone.stem.norm", x)?;
    for stage in 0..4 {
        if stage > 0 {
            x = channel_norm(g, &format!("backbone.down{stage}.norm"), x)?;
            x = conv(g, &format!("backbone.down{stage}.conv"), x, 2)?;
        }
        for b in 0..spec.stage_depths[stage] {
            x = convnext_block(g, &format!("backbone.stage{stage}.block{b}"), x)?;
        }
    }
    Ok(x)
}

/// Feature map `B×C×h×w` to tokens `B×(h·w·C/D)×D`.
///
/// The `h·w` feature vectors are taken in row-major spatial order, optionally
/// passed through a shared C→C linear map, and each split into `C/D`
/// consecutive tokens.
pub fn bridge<T: Scalar>(g: &mut Graph<T>, spec: &ModelSpec, features: Var, mode: BridgeMode) -> Result<Var> {
    let s = g.shape(features).to_vec();
    if s.len() != 4 {
        return Err(Error::shape(format!("bridge expects B×C×h×w features, got {s:?}")));
    }
    let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
    if c * hw != spec.token_count * spec.token_dim || c % spec.token_dim != 0 {
        return Err(Error::shape(format!(
            "bridge: {c}×{}×{} features cannot become {} tokens of {}",
            s[2], s[3], spec.token_count, spec.token_dim
        )));
    }
    let t = g.permute(features, &[0, 2, 3, 1])?;
    let mut t = g.reshape(t, &[b, hw, c])?;
    if mode == BridgeMode::Learnable {
        t = linear(g, "bridge.proj", t)?;
    }
    let t = g.reshape(t, &[b, spec.token_count, spec.token_dim])?;
    match opt_p(g, "bridge", "pos_embed") {
        Some(pe) if spec.positional_embedding => g.add_broadcast(t, pe),
        _ => Ok(t),
    }
}

/// Cuts `B×3×S×S` images into `B×N×(3·p·p)` flattened patches.
pub fn patchify<T: Scalar>(g: &mut Graph<T>, image: Var, patch: usize) -> Result<Var> {
    let s = g.shape(image).to_vec();
    if s.len() != 4 || s[2] % patch != 0 || s[3] % patch != 0 {
        return Err(Error::shape(format!("cannot cut {s:?} into {patch}×{patch} patches")));
    }
    let (b, c, gh, gw) = (s[0], s[1], s[2] / patch, s[3] / patch);
    let t = g.reshape(image, &[b, c, gh, patch, gw, patch])?;
    let t = g.permute(t, &[0, 2, 4, 1, 3, 5])?;
    g.reshape(t, &[b, gh * gw, c * patch * patch])
}

/// Multi-head scaled dot-product self-attention without the output
/// projection. Returns `(output B×N×D, attention probabilities (B·H)×N×N)`.
pub fn attention<T: Scalar>(g: &mut Graph<T>, q: Var, k: Var, v: Var, heads: usize) -> Result<(Var, Var)> {
    let s = g.shape(q).to_vec();
    if s.len() != 3 {
        return Err(Error::shape(format!("attention expects B×N×D, got {s:?}")));
    }
    let (b, n, d) = (s[0], s[1], s[2]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!("width {d} not divisible into {heads} heads")));
    }
    let dh = d / heads;
    let mut split = |x: Var| -> Result<Var> {
        let t = g.reshape(x, &[b, n, heads, dh])?;
        let t = g.permute(t, &[0, 2, 1, 3])?;
        g.reshape(t, &[b * heads, n, dh])
    };
    let (q, k, v) = (split(q)?, split(k)?, split(v)?);
    let scores = g.batch_matmul(q, k, true)?;
    let scores = g.scale(scores, T::from_f64(1.0 / (dh as f64).sqrt()))?;
    let probs = g.softmax(scores, 2)?;
    let out = g.batch_matmul(probs, v, false)?;
    let out = g.reshape(out, &[b, heads, n, dh])?;
    let out = g.permute(out, &[0, 2, 1, 3])?;
    Ok((g.reshape(out, &[b, n, d])?, probs))
}

/// Pre-norm attention and feed-forward sublayers, each with a residual.
pub fn encoder_block<T: Scalar>(g: &mut Graph<T>, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let h = norm(g, &format!("{prefix}.norm1"), x)?;
    let q = linear(g, &format!("{prefix}.attn.q"), h)?;
    let k = linear(g, &format!("{prefix}.attn.k"), h)?;
    let v = linear(g, &format!("{prefix}.attn.v"), h)?;
    let (a, _) = attention(g, q, k, v, heads)?;
    let a = linear(g, &format!("{prefix}.attn.proj"), a)?;
    let x = g.add(x, a)?;
    let h = norm(g, &format!("{prefix}.norm2"), x)?;
    let h = linear(g, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h)?;
    let h = linear(g, &format!("{prefix}.mlp.fc2"), h)?;
    g.add(x, h)
}

pub fn vit_encoder<T: Scalar>(g: &mut Graph<T>, spec: &ModelSpec, tokens: Var) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    if s.len() != 3 || s[2] != spec.token_dim {
        return Err(Error::shape(format!("encoder expects B×N×{}, got {s:?}", spec.token_dim)));
    }
    if spec.token_dim % spec.num_heads.max(1) != 0 || spec.num_heads == 0 {
        return Err(Error::config(format!(
            "token_dim {} not divisible by num_heads {}",
            spec.token_dim, spec.num_heads
        )));
    }
    let mut x = tokens;
    for b in 0..spec.encoder_blocks {
        x = encoder_block(g, &format!("encoder.block{b}"), x, spec.num_heads)?;
    }
    norm(g, "encoder.norm", x)
}

/// Sequence mean followed by one or two linear layers ending in width 1.
pub fn mlp_head<T: Scalar>(g: &mut Graph<T>, tokens: Var, head_layers: usize) -> Result<Var> {
    if g.shape(tokens).len() != 3 {
        return Err(Error::shape(format!("head expects B×N×D tokens, got {:?}", g.shape(tokens))));
    }
    let pooled = g.mean_axis(tokens, 1)?;
    match head_layers {
        1 => linear(g, "head.fc", pooled),
        2 => {
            let h = linear(g, "head.fc1", pooled)?;
            let h = g.gelu(h)?;
            linear(g, "head.fc2", h)
        }
        n => Err(Error::config(format!("head_layers must be 1 or 2, got {n}"))),
    }
}
