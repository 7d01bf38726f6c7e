//! Flat `key=value` run configuration with dotted keys.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use agegrad::data::{check_ratios, AugmentSpec, SplitMode};
use agegrad::loss::LossSpec;
use agegrad::model::{ModelSpec, Variant};
use agegrad::optim::AdamWConfig;
use agegrad::schedule::{ScheduleKind, ScheduleSpec};
use agegrad::{Error, Result};

pub const ENV_PREFIX: &str = "AGEGRAD_";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    /// Name of the model preset the `model.*` keys start from.
    pub preset: String,
    pub model: ModelSpec,
    pub loss: LossSpec,
    pub schedule: ScheduleSpec,
    /// `None` derives warmup as a fraction of the total steps.
    pub warmup_steps: Option<usize>,
    /// `None` derives the total from epochs and the train split size.
    pub total_steps: Option<usize>,
    pub optim: AdamWConfig,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub manifest: Option<PathBuf>,
    pub ratios: [f64; 3],
    pub split_mode: SplitMode,
    pub augment_enabled: bool,
    pub augment: AugmentSpec,
    pub pretrain_checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    /// Full-scale settings: batch 128, 100 epochs, lr 1.5e-5, patience 3.
    fn default() -> Self {
        TrainConfig {
            preset: "hybrid".into(),
            model: ModelSpec::default(),
            loss: LossSpec::default(),
            schedule: ScheduleSpec::new(ScheduleKind::WarmupCosine, 1.5e-5, 0),
            warmup_steps: None,
            total_steps: None,
            optim: AdamWConfig::default(),
            batch_size: 128,
            eval_batch_size: 64,
            max_epochs: 100,
            patience: 3,
            seed: 0,
            manifest: None,
            ratios: [0.8, 0.1, 0.1],
            split_mode: SplitMode::Image,
            augment_enabled: true,
            augment: AugmentSpec::default(),
            pretrain_checkpoint: None,
        }
    }
}

pub fn preset(name: &str) -> Result<ModelSpec> {
    Ok(match name {
        "hybrid" => ModelSpec::default(),
        "convnext" => ModelSpec { variant: Variant::ConvNext, ..ModelSpec::default() },
        "vit" => ModelSpec { variant: Variant::Vit, ..ModelSpec::default() },
        "reduced" => ModelSpec::reduced(),
        "desk" => ModelSpec::desk(),
        _ => return Err(Error::config(format!("model.preset: unknown preset {name:?}"))),
    })
}

fn parse<T: std::str::FromStr>(key: &str, v: &str, what: &str) -> Result<T> {
    v.trim().parse().map_err(|_| Error::config(format!("{key}: expected {what}, got {v:?}")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(Error::config(format!("{key}: expected true or false, got {v:?}"))),
    }
}

fn pair(key: &str, v: &str) -> Result<(f64, f64)> {
    let parts: Vec<f64> = v.split(',').map(|p| parse(key, p, "a number")).collect::<Result<_>>()?;
    match parts[..] {
        [a, b] => Ok((a, b)),
        _ => Err(Error::config(format!("{key}: expected two comma-separated numbers, got {v:?}"))),
    }
}

fn opt_count(key: &str, v: &str) -> Result<Option<usize>> {
    match v.trim() {
        "" | "auto" => Ok(None),
        s => Ok(Some(parse(key, s, "an integer or auto")?)),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    match v.trim() {
        "" | "none" => None,
        s => Some(PathBuf::from(s)),
    }
}

/// `step:lr` pairs separated by commas.
pub fn parse_manual(key: &str, v: &str) -> Result<Vec<(usize, f64)>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',')
        .map(|e| {
            let (s, lr) = e
                .split_once(':')
                .ok_or_else(|| Error::config(format!("{key}: expected step:lr entries, got {e:?}")))?;
            Ok((parse(key, s, "a step")?, parse(key, lr, "a learning rate")?))
        })
        .collect()
}

fn fmt_opt<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".into(), T::to_string)
}

impl TrainConfig {
    /// Every accepted key, in documentation order.
    pub fn keys() -> Vec<String> {
        let mut k = vec!["model.preset".to_string()];
        k.extend(ModelSpec::KEYS.iter().map(|s| format!("model.{s}")));
        k.extend(
            [
                "loss.kind",
                "loss.sigma",
                "loss.delta",
                "schedule.kind",
                "schedule.base_lr",
                "schedule.min_lr",
                "schedule.warmup_steps",
                "schedule.total_steps",
                "schedule.plateau_factor",
                "schedule.plateau_patience",
                "schedule.plateau_threshold",
                "schedule.manual",
                "optim.beta1",
                "optim.beta2",
                "optim.eps",
                "optim.weight_decay",
                "train.batch_size",
                "train.eval_batch_size",
                "train.max_epochs",
                "train.patience",
                "train.seed",
                "train.pretrain_checkpoint",
                "data.manifest",
                "data.ratios",
                "data.split_mode",
                "augment.enabled",
                "augment.crop_p",
                "augment.crop_scale",
                "augment.flip_p",
                "augment.jitter_p",
                "augment.brightness",
                "augment.contrast",
                "augment.rotate_p",
                "augment.rotate_deg",
                "augment.blur_p",
                "augment.blur_sigma",
                "augment.erase_p",
                "augment.erase_area",
            ]
            .map(String::from),
        );
        k
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        self.set_inner(key, v).map_err(|e| match e {
            Error::Config(m) if !m.contains(key) => Error::config(format!("{key}: {m}")),
            e => e,
        })
    }

    fn set_inner(&mut self, key: &str, v: &str) -> Result<()> {
        let f = |what| parse::<f64>(key, v, what);
        let n = |what| parse::<usize>(key, v, what);
        match key {
            "model.preset" => {
                self.model = preset(v.trim())?;
                self.preset = v.trim().to_string();
            }
            k if k.starts_with("model.") => self.model.set(&k["model.".len()..], v)?,
            "loss.kind" => self.loss.kind = v.trim().parse()?,
            "loss.sigma" => self.loss.sigma = f("a number")?,
            "loss.delta" => self.loss.delta = f("a number")?,
            "schedule.kind" => self.schedule.kind = v.trim().parse()?,
            "schedule.base_lr" => self.schedule.base_lr = f("a learning rate")?,
            "schedule.min_lr" => self.schedule.min_lr = f("a learning rate")?,
            "schedule.warmup_steps" => self.warmup_steps = opt_count(key, v)?,
            "schedule.total_steps" => self.total_steps = opt_count(key, v)?,
            "schedule.plateau_factor" => self.schedule.plateau.factor = f("a number")?,
            "schedule.plateau_patience" => self.schedule.plateau.patience = n("an integer")?,
            "schedule.plateau_threshold" => self.schedule.plateau.threshold = f("a number")?,
            "schedule.manual" => self.schedule.manual = parse_manual(key, v)?,
            "optim.beta1" => self.optim.beta1 = f("a number")?,
            "optim.beta2" => self.optim.beta2 = f("a number")?,
            "optim.eps" => self.optim.eps = f("a number")?,
            "optim.weight_decay" => self.optim.weight_decay = f("a number")?,
            "train.batch_size" => self.batch_size = n("an integer")?,
            "train.eval_batch_size" => self.eval_batch_size = n("an integer")?,
            "train.max_epochs" => self.max_epochs = n("an integer")?,
            "train.patience" => self.patience = n("an integer")?,
            "train.seed" => self.seed = parse(key, v, "an integer")?,
            "train.pretrain_checkpoint" => self.pretrain_checkpoint = opt_path(v),
            "data.manifest" => self.manifest = opt_path(v),
            "data.ratios" => {
                let r: Vec<f64> = v.split(',').map(|p| parse(key, p, "a ratio")).collect::<Result<_>>()?;
                self.ratios = r
                    .try_into()
                    .map_err(|_| Error::config(format!("{key}: expected three comma-separated ratios")))?;
            }
            "data.split_mode" => self.split_mode = v.trim().parse()?,
            "augment.enabled" => self.augment_enabled = flag(key, v)?,
            "augment.crop_p" => self.augment.crop_p = f("a probability")?,
            "augment.crop_scale" => self.augment.crop_scale = pair(key, v)?,
            "augment.flip_p" => self.augment.flip_p = f("a probability")?,
            "augment.jitter_p" => self.augment.jitter_p = f("a probability")?,
            "augment.brightness" => self.augment.brightness = f("a number")?,
            "augment.contrast" => self.augment.contrast = f("a number")?,
            "augment.rotate_p" => self.augment.rotate_p = f("a probability")?,
            "augment.rotate_deg" => self.augment.rotate_deg = f("degrees")?,
            "augment.blur_p" => self.augment.blur_p = f("a probability")?,
            "augment.blur_sigma" => self.augment.blur_sigma = pair(key, v)?,
            "augment.erase_p" => self.augment.erase_p = f("a probability")?,
            "augment.erase_area" => self.augment.erase_area = pair(key, v)?,
            _ => return Err(Error::config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Current value of every key, in [`TrainConfig::keys`] order.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let model: BTreeMap<String, String> = self.model.to_kv().into_iter().collect();
        let p = |x: &Option<PathBuf>| x.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string());
        let pr = |(a, b): (f64, f64)| format!("{a},{b}");
        let a = &self.augment;
        Self::keys()
            .into_iter()
            .map(|k| {
                let v = match k.as_str() {
                    "model.preset" => self.preset.clone(),
                    m if m.starts_with("model.") => model[&m["model.".len()..]].clone(),
                    "loss.kind" => self.loss.kind.to_string(),
                    "loss.sigma" => self.loss.sigma.to_string(),
                    "loss.delta" => self.loss.delta.to_string(),
                    "schedule.kind" => self.schedule.kind.to_string(),
                    "schedule.base_lr" => self.schedule.base_lr.to_string(),
                    "schedule.min_lr" => self.schedule.min_lr.to_string(),
                    "schedule.warmup_steps" => fmt_opt(&self.warmup_steps),
                    "schedule.total_steps" => fmt_opt(&self.total_steps),
                    "schedule.plateau_factor" => self.schedule.plateau.factor.to_string(),
                    "schedule.plateau_patience" => self.schedule.plateau.patience.to_string(),
                    "schedule.plateau_threshold" => self.schedule.plateau.threshold.to_string(),
                    "schedule.manual" => self
                        .schedule
                        .manual
                        .iter()
                        .map(|(s, lr)| format!("{s}:{lr}"))
                        .collect::<Vec<_>>()
                        .join(","),
                    "optim.beta1" => self.optim.beta1.to_string(),
                    "optim.beta2" => self.optim.beta2.to_string(),
                    "optim.eps" => self.optim.eps.to_string(),
                    "optim.weight_decay" => self.optim.weight_decay.to_string(),
                    "train.batch_size" => self.batch_size.to_string(),
                    "train.eval_batch_size" => self.eval_batch_size.to_string(),
                    "train.max_epochs" => self.max_epochs.to_string(),
                    "train.patience" => self.patience.to_string(),
                    "train.seed" => self.seed.to_string(),
                    "train.pretrain_checkpoint" => p(&self.pretrain_checkpoint),
                    "data.manifest" => p(&self.manifest),
                    "data.ratios" => self.ratios.map(|r| r.to_string()).join(","),
                    "data.split_mode" => match self.split_mode {
                        SplitMode::Image => "image".into(),
                        SplitMode::Subject => "subject".into(),
                    },
                    "augment.enabled" => self.augment_enabled.to_string(),
                    "augment.crop_p" => a.crop_p.to_string(),
                    "augment.crop_scale" => pr(a.crop_scale),
                    "augment.flip_p" => a.flip_p.to_string(),
                    "augment.jitter_p" => a.jitter_p.to_string(),
                    "augment.brightness" => a.brightness.to_string(),
                    "augment.contrast" => a.contrast.to_string(),
                    "augment.rotate_p" => a.rotate_p.to_string(),
                    "augment.rotate_deg" => a.rotate_deg.to_string(),
                    "augment.blur_p" => a.blur_p.to_string(),
                    "augment.blur_sigma" => pr(a.blur_sigma),
                    "augment.erase_p" => a.erase_p.to_string(),
                    "augment.erase_area" => pr(a.erase_area),
                    other => unreachable!("key {other} has no formatter"),
                };
                (k, v)
            })
            .collect()
    }

    pub fn to_text(&self) -> String {
        self.to_kv().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Applies `key=value` lines. Blank lines and `#` comments are skipped;
    /// `model.preset` is applied before the other keys wherever it appears.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
            entries.push((k.trim().to_string(), v.trim().to_string()));
        }
        self.apply_pairs(&entries)
    }

    pub fn apply_pairs(&mut self, entries: &[(String, String)]) -> Result<()> {
        let (presets, rest): (Vec<_>, Vec<_>) = entries.iter().partition(|(k, _)| k == "model.preset");
        for (k, v) in presets.into_iter().chain(rest) {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// `AGEGRAD_MODEL_HEAD_LAYERS` for `model.head_layers`.
    pub fn env_name(key: &str) -> String {
        format!("{ENV_PREFIX}{}", key.replace('.', "_").to_ascii_uppercase())
    }

    /// Applies overrides found by `lookup` under each key's variable name.
    pub fn apply_env(&mut self, lookup: impl Fn(&str) -> Option<String>) -> Result<()> {
        let found: Vec<(String, String)> = Self::keys()
            .into_iter()
            .filter_map(|k| lookup(&Self::env_name(&k)).map(|v| (k, v)))
            .collect();
        self.apply_pairs(&found)
    }

    /// Defaults, then the file (if any), then `AGEGRAD_*` variables.
    pub fn load(path: Option<&Path>, lookup: impl Fn(&str) -> Option<String>) -> Result<Self> {
        let mut c = Self::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            c.apply_text(&text)?;
        }
        c.apply_env(lookup)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.validate()?;
        self.augment.validate()?;
        check_ratios(self.ratios)?;
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be >= 1"));
        }
        if self.eval_batch_size == 0 {
            return Err(Error::config("train.eval_batch_size must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs must be >= 1"));
        }
        for (key, p) in [("data.manifest", &self.manifest), ("train.pretrain_checkpoint", &self.pretrain_checkpoint)] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::config(format!("{key}: {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// The schedule with totals resolved for `steps_per_epoch`.
    pub fn resolved_schedule(&self, steps_per_epoch: usize) -> Result<ScheduleSpec> {
        let total = self.total_steps.unwrap_or(self.max_epochs * steps_per_epoch);
        let fresh = ScheduleSpec::new(self.schedule.kind, self.schedule.base_lr, total);
        let s = ScheduleSpec {
            total_steps: total,
            warmup_steps: self.warmup_steps.unwrap_or(fresh.warmup_steps),
            plateau: self.schedule.plateau,
            manual: self.schedule.manual.clone(),
            ..self.schedule.clone()
        };
        s.validate()?;
        Ok(s)
    }

    /// Augmentation sized for the model input.
    pub fn augment_spec(&self) -> AugmentSpec {
        AugmentSpec { size: self.model.input_size, ..self.augment.clone() }
    }
}
