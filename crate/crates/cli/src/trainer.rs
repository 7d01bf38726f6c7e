//! Epoch loop: forward, loss, backward, AdamW, validation, early stopping.

use std::time::Instant;

use agegrad::data::{batches, split_dataset, BatchOptions, Dataset, Manifest, Split};
use agegrad::loss::{loss_and_grad, standard_loss, AgeWeights, LossKind, LossSpec};
use agegrad::model::{self, output_bias_name, ModelSpec, ParamStore};
use agegrad::optim::{EarlyStopState, OptimState};
use agegrad::schedule::{ScheduleSpec, Scheduler};
use agegrad::{Error, Graph, Result};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::report::{LogRow, TrainLog};

#[derive(Clone, Debug)]
pub struct TrainData {
    pub manifest: Manifest,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

/// Loads the manifest, assigns splits and decodes every image at the model's
/// input size.
pub fn prepare_data(cfg: &TrainConfig) -> Result<TrainData> {
    let path = cfg
        .manifest
        .as_ref()
        .ok_or_else(|| Error::config("data.manifest is not set"))?;
    let raw = Manifest::load(path)?;
    let manifest = if raw.records.iter().any(|r| r.split == Split::Unassigned) {
        split_dataset(&raw, cfg.ratios, cfg.seed, cfg.split_mode)?
    } else {
        raw
    };
    let s = cfg.model.input_size;
    Ok(TrainData {
        train: Dataset::load(&manifest, Split::Train, s)?,
        val: Dataset::load(&manifest, Split::Val, s)?,
        test: Dataset::load(&manifest, Split::Test, s)?,
        manifest,
    })
}

/// Predictions for every sample of `ds`, in dataset order.
pub fn predict_dataset(spec: &ModelSpec, params: &ParamStore, ds: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    let opts = BatchOptions::eval(batch_size);
    let mut out = Vec::with_capacity(ds.len());
    for b in batches(ds, &opts, 0)? {
        out.extend(model::predict(spec, params, &b?.images)?.into_iter().map(f64::from));
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Record 0 in the `seconds` column so logs are reproducible byte for byte.
    pub deterministic: bool,
    /// Per-epoch progress on stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ParamStore,
    pub best: Checkpoint,
    pub optim: OptimState,
    pub log: TrainLog,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub schedule: ScheduleSpec,
    pub steps_per_epoch: usize,
}

/// Fresh parameters with the output bias set to the mean training age.
pub fn init_params(spec: &ModelSpec, seed: u64, train_ages: &[f64]) -> Result<ParamStore> {
    let mut p = ParamStore::init(spec, seed)?;
    if !train_ages.is_empty() {
        let mean = train_ages.iter().sum::<f64>() / train_ages.len() as f64;
        if let Some(b) = p.get_mut(output_bias_name(spec)) {
            b.data_mut().fill(mean as f32);
        }
    }
    Ok(p)
}

/// The configured loss, with inverse-frequency weights from the training
/// ages when weighted MSE has none.
pub fn resolved_loss(cfg: &TrainConfig, train: &Dataset) -> Result<LossSpec> {
    let mut l = cfg.loss.clone();
    if l.kind == LossKind::WeightedMse && l.weights.is_none() {
        l.weights = Some(AgeWeights::inverse_frequency(&train.ages())?);
    }
    Ok(l)
}

/// Mean loss and MAE of `params` over `ds`.
pub fn evaluate(cfg: &TrainConfig, loss: &LossSpec, params: &ParamStore, ds: &Dataset) -> Result<(f64, f64)> {
    if ds.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    let preds = predict_dataset(&cfg.model, params, ds, cfg.eval_batch_size)?;
    let ages = ds.ages();
    let (l, _) = loss_and_grad(&preds, &ages, loss)?;
    Ok((l, agegrad::metrics::mae(&preds, &ages)?))
}

/// Trains `init` on `data.train`, validating on `data.val` after each epoch.
/// `on_best` sees every new best-so-far checkpoint.
pub fn train(
    cfg: &TrainConfig,
    data: &TrainData,
    init: ParamStore,
    opts: &TrainOptions,
    mut on_best: impl FnMut(&Checkpoint) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::contract("training and validation splits must be nonempty"));
    }
    init.check_matches(&cfg.model)?;
    let loss_spec = resolved_loss(cfg, &data.train)?;
    let steps_per_epoch = data.train.len().div_ceil(cfg.batch_size);
    let schedule = cfg.resolved_schedule(steps_per_epoch)?;
    let mut scheduler = Scheduler::new(schedule.clone())?;
    let mut augment = cfg.augment_spec();
    augment.erase_fill = data.train.mean_color();
    let batch_opts = BatchOptions {
        batch_size: cfg.batch_size,
        shuffle: true,
        seed: cfg.seed,
        augment: cfg.augment_enabled.then_some(augment),
        normalize: Default::default(),
    };

    let mut params = init;
    let mut optim = OptimState::new(cfg.optim);
    let mut early = EarlyStopState::new(cfg.patience);
    let mut log = TrainLog::default();
    let mut best: Option<Checkpoint> = None;
    let mut best_epoch = 0;
    let mut stopped_early = false;
    let mut step = 0usize;

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let epoch_lr = scheduler.lr_at(step)?;
        let mut loss_sum = 0.0;
        for batch in batches(&data.train, &batch_opts, epoch as u64)? {
            let batch = batch?;
            let lr = scheduler.lr_at(step)?;
            let mut g = Graph::<f32>::new();
            params.load_into(&mut g)?;
            let x = g.input(batch.images);
            let out = model::forward(&mut g, &cfg.model, x)?;
            let loss = standard_loss(&mut g, out.prediction, &batch.ages, &loss_spec)?;
            let value = g.data(loss)[0] as f64;
            if !value.is_finite() {
                return Err(Error::contract(format!("training loss diverged at epoch {epoch}, step {step}")));
            }
            loss_sum += value * batch.ages.len() as f64;
            let grads = g.backward(loss)?.named(&g);
            optim.step(&mut params, &grads, lr)?;
            step += 1;
        }
        let train_loss = loss_sum / data.train.len() as f64;
        let (val_loss, val_mae) = evaluate(cfg, &loss_spec, &params, &data.val)?;
        let secs = t0.elapsed().as_secs_f64();
        log.rows.push(LogRow {
            epoch,
            train_loss,
            val_loss,
            val_mae,
            lr: epoch_lr,
            seconds: if opts.deterministic { 0.0 } else { secs },
        });
        if opts.verbose {
            eprintln!(
                "epoch {epoch:>3}  train_loss {train_loss:>9.4}  val_loss {val_loss:>9.4}  val_mae {val_mae:>7.3}  lr {epoch_lr:.3e}  {secs:.1}s"
            );
        }
        if best.as_ref().is_none_or(|b| val_mae < b.best_val_mae) {
            let ck = Checkpoint {
                spec: cfg.model.clone(),
                params: params.clone(),
                optim: Some(optim.clone()),
                best_val_mae: val_mae,
            };
            on_best(&ck)?;
            best = Some(ck);
            best_epoch = epoch;
        }
        scheduler.end_epoch(Some(val_mae))?;
        if early.update(val_mae) {
            stopped_early = true;
            break;
        }
    }
    Ok(TrainOutcome {
        params,
        best: best.expect("at least one epoch ran"),
        optim,
        log,
        best_epoch,
        stopped_early,
        schedule,
        steps_per_epoch,
    })
}
