use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    ConvNext,
    Vit,
    Hybrid,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ConvNext => "convnext",
            Variant::Vit => "vit",
            Variant::Hybrid => "hybrid",
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "convnext" => Ok(Variant::ConvNext),
            "vit" => Ok(Variant::Vit),
            "hybrid" => Ok(Variant::Hybrid),
            _ => Err(Error::config(format!("unknown model variant {s:?}"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How the backbone feature map becomes the token sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BridgeMode {
    /// Shared linear map over each spatial feature vector, then split.
    Learnable,
    /// Split only.
    Reshape,
}

impl BridgeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            BridgeMode::Learnable => "learnable",
            BridgeMode::Reshape => "reshape",
        }
    }
}

impl FromStr for BridgeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learnable" => Ok(BridgeMode::Learnable),
            "reshape" => Ok(BridgeMode::Reshape),
            _ => Err(Error::config(format!("unknown bridge mode {s:?}"))),
        }
    }
}

/// Architecture configuration. `Default` is the full-size hybrid.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub input_size: usize,
    pub stage_depths: [usize; 4],
    pub stage_dims: [usize; 4],
    pub encoder_blocks: usize,
    pub token_dim: usize,
    pub token_count: usize,
    pub num_heads: usize,
    pub head_layers: usize,
    pub head_hidden: usize,
    pub bridge_mode: BridgeMode,
    pub use_layer_scale: bool,
    pub positional_embedding: bool,
    /// Patch edge for the ViT-only variant.
    pub patch_size: usize,
}

/// Epsilon of every LayerNorm in the models.
pub const NORM_EPS: f64 = 1e-6;
pub const LAYER_SCALE_INIT: f32 = 1e-6;
pub const MLP_RATIO: usize = 4;
/// Total downsampling of the ConvNeXt backbone (stem 4, three 2x merges).
pub const BACKBONE_STRIDE: usize = 32;

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            variant: Variant::Hybrid,
            input_size: 224,
            stage_depths: [3, 3, 9, 3],
            stage_dims: [96, 192, 384, 768],
            encoder_blocks: 12,
            token_dim: 192,
            token_count: 196,
            num_heads: 3,
            head_layers: 2,
            head_hidden: 256,
            bridge_mode: BridgeMode::Learnable,
            use_layer_scale: true,
            positional_embedding: true,
            patch_size: 16,
        }
    }
}

impl ModelSpec {
    /// Small hybrid for gradient checks: 32 px input, one block per stage,
    /// two encoder blocks over four 16-d tokens.
    pub fn reduced() -> Self {
        ModelSpec {
            input_size: 32,
            stage_depths: [1, 1, 1, 1],
            stage_dims: [8, 16, 32, 64],
            encoder_blocks: 2,
            token_dim: 16,
            token_count: 4,
            num_heads: 2,
            head_hidden: 32,
            ..ModelSpec::default()
        }
    }

    /// Desk-scale hybrid: 64 px input, dims 24/48/96/192, four encoder blocks.
    pub fn desk() -> Self {
        ModelSpec {
            input_size: 64,
            stage_depths: [1, 1, 2, 1],
            stage_dims: [24, 48, 96, 192],
            encoder_blocks: 4,
            token_dim: 48,
            token_count: 16,
            num_heads: 3,
            head_hidden: 64,
            ..ModelSpec::default()
        }
    }

    /// Side length of the backbone output grid.
    pub fn feature_grid(&self) -> usize {
        self.input_size / BACKBONE_STRIDE
    }

    pub fn feature_dim(&self) -> usize {
        self.stage_dims[3]
    }

    /// Width of the vectors entering the head.
    pub fn head_input_dim(&self) -> usize {
        match self.variant {
            Variant::ConvNext => self.feature_dim(),
            Variant::Vit | Variant::Hybrid => self.token_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config(m));
        if self.head_layers != 1 && self.head_layers != 2 {
            return bad(format!("head_layers must be 1 or 2, got {}", self.head_layers));
        }
        if self.head_layers == 2 && self.head_hidden == 0 {
            return bad("head_hidden must be positive".into());
        }
        if self.variant != Variant::ConvNext {
            if self.token_dim == 0 || self.num_heads == 0 || self.token_dim % self.num_heads != 0 {
                return bad(format!(
                    "token_dim {} must be divisible by num_heads {}",
                    self.token_dim, self.num_heads
                ));
            }
        }
        match self.variant {
            Variant::ConvNext | Variant::Hybrid => {
                if self.input_size == 0 || self.input_size % BACKBONE_STRIDE != 0 {
                    return bad(format!("input_size {} must be a multiple of {BACKBONE_STRIDE}", self.input_size));
                }
                if self.stage_dims.iter().any(|&d| d == 0) {
                    return bad("stage_dims must be positive".into());
                }
            }
            Variant::Vit => {
                if self.patch_size == 0 || self.input_size % self.patch_size != 0 {
                    return bad(format!(
                        "input_size {} must be a multiple of patch_size {}",
                        self.input_size, self.patch_size
                    ));
                }
                let n = (self.input_size / self.patch_size).pow(2);
                if n != self.token_count {
                    return bad(format!("vit needs token_count {n}, got {}", self.token_count));
                }
            }
        }
        if self.variant == Variant::Hybrid {
            let c = self.feature_dim();
            if c % self.token_dim != 0 {
                return bad(format!("token_dim {} must divide feature dim {c}", self.token_dim));
            }
            let elems = c * self.feature_grid().pow(2);
            if self.token_dim * self.token_count != elems {
                return bad(format!(
                    "token_count {} x token_dim {} != {elems} backbone features",
                    self.token_count, self.token_dim
                ));
            }
        }
        Ok(())
    }

    /// `key=value` lines, the format used by config files and checkpoints.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let list = |v: &[usize; 4]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        vec![
            ("variant".into(), self.variant.to_string()),
            ("input_size".into(), self.input_size.to_string()),
            ("stage_depths".into(), list(&self.stage_depths)),
            ("stage_dims".into(), list(&self.stage_dims)),
            ("encoder_blocks".into(), self.encoder_blocks.to_string()),
            ("token_dim".into(), self.token_dim.to_string()),
            ("token_count".into(), self.token_count.to_string()),
            ("num_heads".into(), self.num_heads.to_string()),
            ("head_layers".into(), self.head_layers.to_string()),
            ("head_hidden".into(), self.head_hidden.to_string()),
            ("bridge_mode".into(), self.bridge_mode.as_str().into()),
            ("use_layer_scale".into(), self.use_layer_scale.to_string()),
            ("positional_embedding".into(), self.positional_embedding.to_string()),
            ("patch_size".into(), self.patch_size.to_string()),
        ]
    }

    /// Applies one `key=value` setting (keys without the `model.` prefix).
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let num = |v: &str| -> Result<usize> {
            v.trim()
                .parse()
                .map_err(|_| Error::config(format!("model.{key}: expected a non-negative integer, got {v:?}")))
        };
        let four = |v: &str| -> Result<[usize; 4]> {
            let parts: Vec<usize> = v.split(',').map(num).collect::<Result<_>>()?;
            parts
                .try_into()
                .map_err(|_| Error::config(format!("model.{key}: expected four comma-separated integers")))
        };
        let flag = |v: &str| -> Result<bool> {
            match v.trim() {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::config(format!("model.{key}: expected true or false, got {v:?}"))),
            }
        };
        match key {
            "variant" => self.variant = value.trim().parse()?,
            "input_size" => self.input_size = num(value)?,
            "stage_depths" => self.stage_depths = four(value)?,
            "stage_dims" => self.stage_dims = four(value)?,
            "encoder_blocks" => self.encoder_blocks = num(value)?,
            "token_dim" => self.token_dim = num(value)?,
            "token_count" => self.token_count = num(value)?,
            "num_heads" => self.num_heads = num(value)?,
            "head_layers" => self.head_layers = num(value)?,
            "head_hidden" => self.head_hidden = num(value)?,
            "bridge_mode" => self.bridge_mode = value.trim().parse()?,
            "use_layer_scale" => self.use_layer_scale = flag(value)?,
            "positional_embedding" => self.positional_embedding = flag(value)?,
            "patch_size" => self.patch_size = num(value)?,
            _ => return Err(Error::config(format!("unknown key model.{key}"))),
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 14] = [
        "variant",
        "input_size",
        "stage_depths",
        "stage_dims",
        "encoder_blocks",
        "token_dim",
        "token_count",
        "num_heads",
        "head_layers",
        "head_hidden",
        "bridge_mode",
        "use_layer_scale",
        "positional_embedding",
        "patch_size",
    ];
}
