//! Subcommand implementations. The binary only parses arguments and calls
//! these; tests call them directly.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use agegrad::data::{
    gen_synthetic, split_dataset, Dataset, Image, Manifest, Normalize, Record, Split, SynthSpec,
};
use agegrad::metrics::MetricsReport;
use agegrad::model::{self, ParamStore};
use agegrad::tensor::OpKind;
use agegrad::{Error, Result, Tensor};

use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::gradcheck::{self, CaseResult, SuiteOptions};
use crate::io::{create_dir, write_atomic};
use crate::plot::{line_plot, series_csv, Series};
use crate::report::{metrics_to_csv, metrics_from_csv, predictions_to_csv, TrainLog};
use crate::trainer::{self, evaluate, init_params, prepare_data, TrainData, TrainOptions};

pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const RESOLVED_CONFIG: &str = "config.txt";
pub const SPLIT_MANIFEST: &str = "split.csv";

/// SHA-256 over every parameter in name order: name bytes, then the `f32`
/// values little-endian.
pub fn param_digest(params: &ParamStore) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Manifest with absolute record paths, loadable from any directory.
fn absolute(m: &Manifest) -> Result<Manifest> {
    let records = m
        .records
        .iter()
        .map(|r| {
            let p = m.resolve(r);
            let p = std::path::absolute(&p).map_err(|e| Error::io(&p, e))?;
            Ok(Record { path: p.to_string_lossy().into_owned(), ..r.clone() })
        })
        .collect::<Result<Vec<_>>>()?;
    Manifest::new(PathBuf::new(), records)
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub stopped_early: bool,
    /// Digest of the parameters training started from.
    pub init_digest: String,
    pub test: Option<(f64, f64)>,
    pub log: TrainLog,
}

/// Trains `cfg` and writes the resolved config, the assigned splits, the
/// best checkpoint and the training log into `out`.
pub fn cmd_train(cfg: &TrainConfig, out: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let data = prepare_data(cfg)?;
    train_on(cfg, &data, out, opts)
}

fn train_on(cfg: &TrainConfig, data: &TrainData, out: &Path, opts: &TrainOptions) -> Result<TrainSummary> {
    create_dir(out)?;
    write_atomic(&out.join(RESOLVED_CONFIG), cfg.to_text().as_bytes())?;
    write_atomic(&out.join(SPLIT_MANIFEST), absolute(&data.manifest)?.to_csv().as_bytes())?;
    let init = match &cfg.pretrain_checkpoint {
        Some(p) => Checkpoint::load_params_for(p, &cfg.model)?,
        None => init_params(&cfg.model, cfg.seed, &data.train.ages())?,
    };
    let init_digest = param_digest(&init);
    let best_path = out.join(BEST_CHECKPOINT);
    let res = trainer::train(cfg, data, init, opts, |ck| ck.save(&best_path))?;
    res.log.save(&out.join(TRAIN_LOG))?;
    let test = if data.test.is_empty() {
        None
    } else {
        let loss = trainer::resolved_loss(cfg, &data.train)?;
        Some(evaluate(cfg, &loss, &res.best.params, &data.test)?)
    };
    Ok(TrainSummary {
        epochs: res.log.rows.len(),
        best_epoch: res.best_epoch,
        best_val_mae: res.best.best_val_mae,
        stopped_early: res.stopped_early,
        init_digest,
        test,
        log: res.log,
    })
}

/// Loads `path` and, if any record is unassigned, splits it with the
/// configured ratios and seed (the same assignment training used).
fn load_split_manifest(cfg: &TrainConfig, path: &Path) -> Result<Manifest> {
    let m = Manifest::load(path)?;
    if m.records.iter().any(|r| r.split == Split::Unassigned) {
        split_dataset(&m, cfg.ratios, cfg.seed, cfg.split_mode)
    } else {
        Ok(m)
    }
}

#[derive(Clone, Debug)]
pub struct EvalOutput {
    pub report: MetricsReport,
    /// `(path, age, prediction)` per sample in manifest order.
    pub predictions: Vec<(String, f64, f64)>,
}

/// Evaluates a checkpoint on one split of `manifest` with resize-only
/// preprocessing. Writes `metrics_<split>.csv` and `predictions_<split>.csv`
/// into `out` when given.
pub fn cmd_eval(
    cfg: &TrainConfig,
    checkpoint: &Path,
    manifest: &Path,
    split: Split,
    out: Option<&Path>,
) -> Result<EvalOutput> {
    let ck = Checkpoint::load(checkpoint)?;
    let m = load_split_manifest(cfg, manifest)?;
    let ds = Dataset::load(&m, split, ck.spec.input_size)?;
    if ds.is_empty() {
        return Err(Error::contract(format!("split {} is empty", split.as_str())));
    }
    let preds = trainer::predict_dataset(&ck.spec, &ck.params, &ds, cfg.eval_batch_size)?;
    let ages = ds.ages();
    let report = MetricsReport::standard(&preds, &ages)?;
    let predictions: Vec<(String, f64, f64)> = ds
        .samples
        .iter()
        .zip(&preds)
        .map(|(s, &p)| (s.path.to_string_lossy().into_owned(), s.age, p))
        .collect();
    if let Some(out) = out {
        let name = split.as_str();
        write_atomic(&out.join(format!("metrics_{name}.csv")), metrics_to_csv(&report).as_bytes())?;
        write_atomic(&out.join(format!("predictions_{name}.csv")), predictions_to_csv(&predictions).as_bytes())?;
    }
    Ok(EvalOutput { report, predictions })
}

/// Age estimate for one image file.
pub fn cmd_predict(checkpoint: &Path, image: &Path) -> Result<f64> {
    let ck = Checkpoint::load(checkpoint)?;
    let s = ck.spec.input_size;
    let im = Image::load(image)?.resize(s, s)?;
    let x = Tensor::new(vec![1, 3, s, s], im.to_chw(&Normalize::default()))?;
    Ok(f64::from(model::predict(&ck.spec, &ck.params, &x)?[0]))
}

/// One ablation axis: a config key and the values it takes.
#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for Axis {
    type Err = Error;
    /// `key=v1;v2;...`
    fn from_str(s: &str) -> Result<Self> {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| Error::config(format!("grid axis must be key=v1;v2, got {s:?}")))?;
        let values: Vec<String> = v.split(';').map(|x| x.trim().to_string()).filter(|x| !x.is_empty()).collect();
        if values.is_empty() {
            return Err(Error::config(format!("grid axis {k} has no values")));
        }
        if !TrainConfig::keys().iter().any(|key| key == k.trim()) {
            return Err(Error::config(format!("{}: unknown config key", k.trim())));
        }
        Ok(Axis { key: k.trim().to_string(), values })
    }
}

/// Named grids with the row structure of the published ablation tables.
pub fn ablation_preset(name: &str) -> Result<Vec<Axis>> {
    let axis = |k: &str, v: &[&str]| Axis { key: k.into(), values: v.iter().map(|s| s.to_string()).collect() };
    Ok(match name {
        "table1" => vec![axis("model.head_layers", &["1", "2"])],
        "table2" => vec![axis("model.head_hidden", &["32", "64", "128", "192", "256"])],
        "table4" => vec![axis("schedule.kind", &["warmup_cosine", "manual"])],
        _ => return Err(Error::config(format!("unknown ablation preset {name:?} (table1, table2, table4)"))),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub cell: usize,
    pub settings: Vec<(String, String)>,
    pub best_val_mae: f64,
    pub test_mae: f64,
    pub best_epoch: usize,
    pub epochs: usize,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub keys: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["cell".to_string()];
        header.extend(self.keys.iter().cloned());
        header.extend(["best_val_mae", "test_mae", "best_epoch", "epochs", "error"].map(String::from));
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![r.cell.to_string()];
            rec.extend(r.settings.iter().map(|(_, v)| v.clone()));
            rec.extend([
                r.best_val_mae.to_string(),
                r.test_mae.to_string(),
                r.best_epoch.to_string(),
                r.epochs.to_string(),
                r.error.clone().unwrap_or_default(),
            ]);
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv output is utf-8")
    }
}

/// Every combination of the axes, first axis slowest.
pub fn grid_cells(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    axes.iter().fold(vec![Vec::new()], |acc, a| {
        acc.iter()
            .flat_map(|prefix| {
                a.values.iter().map(move |v| {
                    let mut c = prefix.clone();
                    c.push((a.key.clone(), v.clone()));
                    c
                })
            })
            .collect()
    })
}

/// Trains one cell per grid combination on shared data and seed. A failing
/// cell is recorded in its row and the sweep continues. Writes
/// `ablation.csv` and each cell's run directory under `out`.
pub fn cmd_ablate(cfg: &TrainConfig, axes: &[Axis], out: &Path, opts: &TrainOptions) -> Result<AblationTable> {
    if axes.is_empty() {
        return Err(Error::config("ablation grid is empty"));
    }
    create_dir(out)?;
    let mut data_cache: BTreeMap<usize, TrainData> = BTreeMap::new();
    let mut rows = Vec::new();
    for (i, settings) in grid_cells(axes).into_iter().enumerate() {
        let res = run_cell(cfg, &settings, &mut data_cache, &out.join(format!("cell{i}")), opts);
        let row = match res {
            Ok(s) => AblationRow {
                cell: i,
                settings,
                best_val_mae: s.best_val_mae,
                test_mae: s.test.map_or(f64::NAN, |t| t.1),
                best_epoch: s.best_epoch,
                epochs: s.epochs,
                error: None,
            },
            Err(e) => AblationRow {
                cell: i,
                settings,
                best_val_mae: f64::NAN,
                test_mae: f64::NAN,
                best_epoch: 0,
                epochs: 0,
                error: Some(format!("{}: {}", e.kind(), e.detail())),
            },
        };
        if opts.verbose {
            eprintln!("cell {i}: val_mae {} test_mae {}", row.best_val_mae, row.test_mae);
        }
        rows.push(row);
    }
    let table = AblationTable { keys: axes.iter().map(|a| a.key.clone()).collect(), rows };
    write_atomic(&out.join("ablation.csv"), table.to_csv().as_bytes())?;
    Ok(table)
}

fn run_cell(
    cfg: &TrainConfig,
    settings: &[(String, String)],
    cache: &mut BTreeMap<usize, TrainData>,
    out: &Path,
    opts: &TrainOptions,
) -> Result<TrainSummary> {
    let mut c = cfg.clone();
    c.apply_pairs(settings)?;
    c.validate()?;
    let size = c.model.input_size;
    if !cache.contains_key(&size) {
        cache.insert(size, prepare_data(&c)?);
    }
    train_on(&c, &cache[&size], out, opts)
}

fn label(p: &Path) -> String {
    let parent = p.parent().and_then(|d| d.file_name()).map(|s| s.to_string_lossy().into_owned());
    let stem = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match parent {
        Some(d) => format!("{d}/{stem}"),
        None => stem,
    }
}

/// Training-loss overlay (`loss.svg`, `loss.csv`) for `logs` and error CDF
/// overlay (`cdf.svg`, `cdf.csv`) for `reports`. Every input is parsed
/// before anything is written.
pub fn cmd_plots(logs: &[PathBuf], reports: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    if logs.is_empty() && reports.is_empty() {
        return Err(Error::config("plots needs at least one --log or --report"));
    }
    let mut loss = Vec::new();
    for p in logs {
        let log = TrainLog::load(p)?;
        if log.rows.is_empty() {
            return Err(Error::contract(format!("training log {} has no rows", p.display())));
        }
        loss.push(Series {
            label: label(p),
            points: log.rows.iter().map(|r| (r.epoch as f64, r.train_loss)).collect(),
        });
    }
    let mut cdf = Vec::new();
    for p in reports {
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        let rep = metrics_from_csv(&text)?;
        cdf.push(Series { label: label(p), points: rep.cdf.clone() });
    }
    let mut written = Vec::new();
    let mut emit = |name: &str, body: String| -> Result<()> {
        let path = out.join(name);
        write_atomic(&path, body.as_bytes())?;
        written.push(path);
        Ok(())
    };
    if !loss.is_empty() {
        emit("loss.svg", line_plot("Training loss vs. epochs", "epoch", "train loss", &loss, None))?;
        emit("loss.csv", series_csv("epoch", "train_loss", &loss))?;
    }
    if !cdf.is_empty() {
        emit(
            "cdf.svg",
            line_plot("Cumulative distribution of absolute error", "absolute error (years)", "fraction", &cdf, Some((0.0, 1.0))),
        )?;
        emit("cdf.csv", series_csv("threshold", "fraction", &cdf))?;
    }
    Ok(written)
}

#[derive(Clone, Debug)]
pub struct GradcheckOutput {
    pub results: Vec<CaseResult>,
    /// Operation families used by every failing case.
    pub suspects: Vec<OpKind>,
}

impl GradcheckOutput {
    pub fn passed(&self) -> bool {
        self.results.iter().all(CaseResult::passed)
    }

    pub fn render(&self) -> String {
        let mut s = gradcheck::format_results(&self.results);
        let failed = self.results.iter().filter(|r| !r.passed()).count();
        if failed == 0 {
            s += &format!("all {} cases passed\n", self.results.len());
        } else {
            let ops: Vec<&str> = self.suspects.iter().map(|o| o.name()).collect();
            s += &format!(
                "{failed} of {} cases failed; common operations: {}\n",
                self.results.len(),
                if ops.is_empty() { "none".to_string() } else { ops.join(",") }
            );
        }
        s
    }
}

pub fn cmd_gradcheck(opts: &SuiteOptions, filter: Option<&str>) -> Result<GradcheckOutput> {
    let results = gradcheck::run_suite(opts, filter)?;
    if results.is_empty() {
        return Err(Error::config(format!("no gradient check case matches {:?}", filter.unwrap_or(""))));
    }
    let failing: Vec<&CaseResult> = results.iter().filter(|r| !r.passed()).collect();
    let suspects = match failing.split_first() {
        None => Vec::new(),
        Some((first, rest)) => {
            first.ops.iter().copied().filter(|op| rest.iter().all(|r| r.ops.contains(op))).collect()
        }
    };
    Ok(GradcheckOutput { results, suspects })
}

/// Writes `n` synthetic images and their manifest into `out`.
pub fn cmd_gen_data(spec: &SynthSpec, out: &Path) -> Result<Manifest> {
    gen_synthetic(spec, out)
}
