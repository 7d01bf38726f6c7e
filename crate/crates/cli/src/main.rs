use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use agegrad::data::{Split, SynthSpec};
use agegrad::tensor::OpKind;
use agegrad::{Error, Result};

use agegrad_cli::commands::{self, Axis, BEST_CHECKPOINT, SPLIT_MANIFEST};
use agegrad_cli::config::TrainConfig;
use agegrad_cli::gradcheck::SuiteOptions;
use agegrad_cli::trainer::TrainOptions;

/// Facial age regression: train, evaluate and inspect ConvNeXt/ViT hybrids.
#[derive(Parser, Debug)]
#[command(name = "agegrad", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Debug)]
struct Global {
    /// key=value config file
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides train.seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// One worker thread and reproducible logs (zero timing column)
    #[arg(long, global = true)]
    single_thread: bool,
    /// Extra key=value override, applied after the file and environment
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Per-epoch progress on stderr
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Train a model; writes best.ckpt, train_log.csv, config.txt and split.csv
    Train,
    /// Evaluate a checkpoint on one split; writes metrics and predictions CSVs
    Eval {
        /// Defaults to <out>/best.ckpt
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Defaults to <out>/split.csv if present, else data.manifest
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Print the age estimate for one image
    Predict {
        /// Defaults to <out>/best.ckpt
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        image: PathBuf,
    },
    /// Train one cell per grid combination; writes ablation.csv
    Ablate {
        /// Axis as key=v1;v2 (repeatable)
        #[arg(long)]
        grid: Vec<String>,
        /// table1, table2 or table4
        #[arg(long)]
        preset: Option<String>,
    },
    /// SVG and CSV plots of training logs and metric reports
    Plots {
        #[arg(long)]
        log: Vec<PathBuf>,
        #[arg(long)]
        report: Vec<PathBuf>,
    },
    /// Finite-difference checks of every layer and the reduced model
    Gradcheck {
        #[arg(long, default_value_t = SuiteOptions::default().tol)]
        tol: f64,
        #[arg(long, default_value_t = SuiteOptions::default().step)]
        step: f64,
        /// Only cases whose name contains this
        #[arg(long)]
        filter: Option<String>,
        /// Corrupt the backward pass of one operation (negative control)
        #[arg(long, hide = true)]
        fault: Option<String>,
    },
    /// Write a synthetic image set and manifest into <out>
    GenData {
        #[arg(long, default_value_t = 320)]
        n: usize,
        /// 0 or 1: two related distributions for two-stage training
        #[arg(long, default_value_t = 0)]
        style: u8,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn load_config(g: &Global) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::load(g.config.as_deref(), |k| std::env::var(k).ok())?;
    let pairs = g
        .sets
        .iter()
        .map(|s| {
            s.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
                .ok_or_else(|| Error::config(format!("--set expects key=value, got {s:?}")))
        })
        .collect::<Result<Vec<_>>>()?;
    cfg.apply_pairs(&pairs)?;
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<bool> {
    let g = &cli.global;
    if g.single_thread && !agegrad::par::force_single_thread() {
        return Err(Error::config("could not restrict the thread pool to one worker"));
    }
    let opts = TrainOptions { deterministic: g.single_thread, verbose: g.verbose };
    let default_ckpt = || g.out.join(BEST_CHECKPOINT);
    match cli.cmd {
        Cmd::Train => {
            let cfg = load_config(g)?;
            let s = commands::cmd_train(&cfg, &g.out, &opts)?;
            println!(
                "epochs {}  best_epoch {}  best_val_mae {:.4}  stopped_early {}",
                s.epochs, s.best_epoch, s.best_val_mae, s.stopped_early
            );
            if let Some((_, mae)) = s.test {
                println!("test_mae {mae:.4}");
            }
            println!("init_sha256 {}", s.init_digest);
            println!("wrote {}", g.out.display());
        }
        Cmd::Eval { checkpoint, manifest, split } => {
            let cfg = load_config(g)?;
            let split: Split = split.parse()?;
            let manifest = match manifest {
                Some(m) => m,
                None if g.out.join(SPLIT_MANIFEST).exists() => g.out.join(SPLIT_MANIFEST),
                None => cfg.manifest.clone().ok_or_else(|| Error::config("no --manifest and data.manifest is not set"))?,
            };
            let ck = checkpoint.unwrap_or_else(default_ckpt);
            let r = commands::cmd_eval(&cfg, &ck, &manifest, split, Some(&g.out))?.report;
            println!("samples {}  mae {:.4}  cs@5 {:.2}  auc {:.4}", r.samples, r.mae, r.cs_at(5.0).unwrap_or(f64::NAN), r.auc);
        }
        Cmd::Predict { checkpoint, image } => {
            let ck = checkpoint.unwrap_or_else(default_ckpt);
            println!("{}", commands::cmd_predict(&ck, &image)?);
        }
        Cmd::Ablate { grid, preset } => {
            let cfg = load_config(g)?;
            let mut axes = match preset {
                Some(p) => commands::ablation_preset(&p)?,
                None => Vec::new(),
            };
            for a in &grid {
                axes.push(a.parse::<Axis>()?);
            }
            let t = commands::cmd_ablate(&cfg, &axes, &g.out, &opts)?;
            print!("{}", t.to_csv());
            return Ok(t.rows.iter().all(|r| r.error.is_none()));
        }
        Cmd::Plots { log, report } => {
            for p in commands::cmd_plots(&log, &report, &g.out)? {
                println!("wrote {}", p.display());
            }
        }
        Cmd::Gradcheck { tol, step, filter, fault } => {
            let fault = match fault {
                Some(f) => Some(OpKind::parse(&f).ok_or_else(|| Error::config(format!("unknown operation {f:?}")))?),
                None => None,
            };
            let seed = g.seed.unwrap_or(0);
            let o = SuiteOptions { tol, step, seed, fault, ..SuiteOptions::default() };
            let out = commands::cmd_gradcheck(&o, filter.as_deref())?;
            print!("{}", out.render());
            return Ok(out.passed());
        }
        Cmd::GenData { n, style, size } => {
            let spec = SynthSpec { n, seed: g.seed.unwrap_or(0), size, style };
            let m = commands::cmd_gen_data(&spec, &g.out)?;
            println!("wrote {} images to {}", m.records.len(), g.out.display());
        }
    }
    Ok(true)
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.kind().as_str().map(str::to_string).unwrap_or_else(|| e.to_string());
            let detail = e.to_string();
            let first = detail.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {}", one_line(if first.is_empty() { &msg } else { first }));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {}: {}", e.kind(), one_line(&e.detail()));
            ExitCode::FAILURE
        }
    }
}
