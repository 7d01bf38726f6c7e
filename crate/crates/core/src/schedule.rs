//! Learning-rate schedules.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScheduleKind {
    WarmupCosine,
    OneCycle,
    CosineAnnealing,
    ReduceOnPlateau,
    Manual,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 5] = [
        ScheduleKind::WarmupCosine,
        ScheduleKind::OneCycle,
        ScheduleKind::CosineAnnealing,
        ScheduleKind::ReduceOnPlateau,
        ScheduleKind::Manual,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::WarmupCosine => "warmup_cosine",
            ScheduleKind::OneCycle => "one_cycle",
            ScheduleKind::CosineAnnealing => "cosine_annealing",
            ScheduleKind::ReduceOnPlateau => "reduce_on_plateau",
            ScheduleKind::Manual => "manual",
        }
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown schedule kind {s:?}")))
    }
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlateauSpec {
    pub factor: f64,
    /// Consecutive epochs without improvement before the rate is cut.
    pub patience: usize,
    /// Relative improvement needed to count as better.
    pub threshold: f64,
}

impl Default for PlateauSpec {
    fn default() -> Self {
        PlateauSpec { factor: 0.1, patience: 10, threshold: 1e-4 }
    }
}

/// Warmup starts at `base_lr / WARMUP_START_DIV`.
pub const WARMUP_START_DIV: f64 = 100.0;
pub const WARMUP_FRACTION: f64 = 0.1;
pub const ONE_CYCLE_PEAK_AT: f64 = 0.3;
/// One-cycle starts at `base_lr / ONE_CYCLE_START_DIV`.
pub const ONE_CYCLE_START_DIV: f64 = 25.0;
pub const ONE_CYCLE_FINAL_DIV: f64 = 1e4;

#[derive(Clone, Debug, PartialEq)]
pub struct ScheduleSpec {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub plateau: PlateauSpec,
    /// `(first step, lr)` entries with strictly increasing steps. Steps
    /// before the first entry use `base_lr`.
    pub manual: Vec<(usize, f64)>,
}

impl ScheduleSpec {
    /// A schedule of `kind` with default constants (10% warmup, no floor).
    pub fn new(kind: ScheduleKind, base_lr: f64, total_steps: usize) -> Self {
        let warmup_steps = if kind == ScheduleKind::WarmupCosine {
            (total_steps as f64 * WARMUP_FRACTION).round() as usize
        } else {
            0
        };
        ScheduleSpec {
            kind,
            base_lr,
            min_lr: 0.0,
            warmup_steps,
            total_steps,
            plateau: PlateauSpec::default(),
            manual: Vec::new(),
        }
    }

    /// Constant learning rate.
    pub fn constant(lr: f64) -> Self {
        ScheduleSpec { manual: vec![(0, lr)], ..Self::new(ScheduleKind::Manual, lr, 0) }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0) || !self.base_lr.is_finite() {
            return Err(Error::config(format!("base_lr must be finite and >= 0, got {}", self.base_lr)));
        }
        if !(self.min_lr >= 0.0) || self.min_lr > self.base_lr {
            return Err(Error::config(format!(
                "min_lr must lie in [0, base_lr], got {} with base_lr {}",
                self.min_lr, self.base_lr
            )));
        }
        if self.warmup_steps > self.total_steps {
            return Err(Error::config(format!(
                "warmup_steps {} exceeds total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        let cosine = matches!(
            self.kind,
            ScheduleKind::WarmupCosine | ScheduleKind::OneCycle | ScheduleKind::CosineAnnealing
        );
        if cosine && self.total_steps == 0 {
            return Err(Error::config(format!("{} needs total_steps > 0", self.kind)));
        }
        let p = &self.plateau;
        if !(p.factor > 0.0 && p.factor < 1.0) || !(p.threshold >= 0.0) {
            return Err(Error::config(format!(
                "plateau factor must lie in (0, 1) and threshold be >= 0, got {} and {}",
                p.factor, p.threshold
            )));
        }
        if self.manual.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::config("manual schedule steps must be strictly increasing"));
        }
        if let Some(&(s, lr)) = self.manual.iter().find(|(_, lr)| !(*lr >= 0.0)) {
            return Err(Error::config(format!("manual schedule lr at step {s} must be >= 0, got {lr}")));
        }
        Ok(())
    }
}

/// Cosine from `hi` at `t = 0` to `lo` at `t = 1`.
fn cosine(hi: f64, lo: f64, t: f64) -> f64 {
    lo + (hi - lo) * 0.5 * (1.0 + (PI * t.clamp(0.0, 1.0)).cos())
}

/// Learning rate at optimizer `step` (0-based). `plateau` carries the
/// validation history and is required for `reduce_on_plateau`.
pub fn lr_at(spec: &ScheduleSpec, step: usize, plateau: Option<&PlateauState>) -> Result<f64> {
    spec.validate()?;
    let (base, min) = (spec.base_lr, spec.min_lr);
    let total = spec.total_steps;
    Ok(match spec.kind {
        ScheduleKind::WarmupCosine => {
            let w = spec.warmup_steps;
            if step >= total {
                min
            } else if step < w {
                let start = base / WARMUP_START_DIV;
                start + (base - start) * step as f64 / w as f64
            } else {
                cosine(base, min, (step - w) as f64 / (total - w) as f64)
            }
        }
        ScheduleKind::CosineAnnealing => {
            if step >= total {
                min
            } else {
                cosine(base, min, step as f64 / total as f64)
            }
        }
        ScheduleKind::OneCycle => {
            let fin = base / ONE_CYCLE_FINAL_DIV;
            let peak = ONE_CYCLE_PEAK_AT * total as f64;
            let s = step as f64;
            if step >= total {
                fin
            } else if s < peak {
                let start = base / ONE_CYCLE_START_DIV;
                start + (base - start) * s / peak
            } else {
                cosine(base, fin, (s - peak) / (total as f64 - peak))
            }
        }
        ScheduleKind::ReduceOnPlateau => match plateau {
            Some(p) => p.lr(),
            None => return Err(Error::contract("reduce_on_plateau needs the validation history")),
        },
        ScheduleKind::Manual => spec
            .manual
            .iter()
            .take_while(|(s, _)| *s <= step)
            .last()
            .map_or(base, |&(_, lr)| lr),
    })
}

/// Validation-driven state of `reduce_on_plateau`.
#[derive(Clone, Debug, PartialEq)]
pub struct PlateauState {
    spec: PlateauSpec,
    min_lr: f64,
    lr: f64,
    best: f64,
    bad_epochs: usize,
}

impl PlateauState {
    pub fn new(spec: &ScheduleSpec) -> Self {
        PlateauState {
            spec: spec.plateau,
            min_lr: spec.min_lr,
            lr: spec.base_lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    /// Records an epoch's validation signal.
    pub fn observe(&mut self, signal: f64) {
        if signal < self.best * (1.0 - self.spec.threshold) {
            self.best = signal;
            self.bad_epochs = 0;
            return;
        }
        self.bad_epochs += 1;
        if self.bad_epochs >= self.spec.patience {
            self.lr = (self.lr * self.spec.factor).max(self.min_lr);
            self.bad_epochs = 0;
        }
    }
}

/// Schedule plus whatever state it needs across epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct Scheduler {
    spec: ScheduleSpec,
    plateau: Option<PlateauState>,
}

impl Scheduler {
    pub fn new(spec: ScheduleSpec) -> Result<Self> {
        spec.validate()?;
        let plateau = (spec.kind == ScheduleKind::ReduceOnPlateau).then(|| PlateauState::new(&spec));
        Ok(Scheduler { spec, plateau })
    }

    pub fn spec(&self) -> &ScheduleSpec {
        &self.spec
    }

    pub fn lr_at(&self, step: usize) -> Result<f64> {
        lr_at(&self.spec, step, self.plateau.as_ref())
    }

    /// Epoch boundary. Plateau schedules require the validation signal.
    pub fn end_epoch(&mut self, signal: Option<f64>) -> Result<()> {
        if let Some(p) = &mut self.plateau {
            let s = signal.ok_or_else(|| Error::contract("reduce_on_plateau needs a validation signal"))?;
            p.observe(s);
        }
        Ok(())
    }
}
