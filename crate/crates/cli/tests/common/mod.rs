#![allow(dead_code)]

use std::path::{Path, PathBuf};

use agegrad::data::{gen_synthetic, Manifest, SynthSpec};
use agegrad_cli::config::TrainConfig;

/// `n` synthetic images of side `size` in `dir`; returns the manifest path.
pub fn synth(dir: &Path, n: usize, seed: u64, size: usize) -> PathBuf {
    gen_synthetic(&SynthSpec { n, seed, size, style: 0 }, dir).unwrap();
    dir.join("manifest.csv")
}

/// Reduced model, two short epochs, no early stopping.
pub fn tiny_cfg(manifest: &Path) -> TrainConfig {
    let mut c = TrainConfig::default();
    c.apply_text(
        "model.preset=reduced\ntrain.batch_size=8\ntrain.eval_batch_size=16\ntrain.max_epochs=2\ntrain.patience=0\nschedule.base_lr=1e-3\n",
    )
    .unwrap();
    c.manifest = Some(manifest.to_path_buf());
    c
}

/// Rewrites the manifest at `path` with every record moved to `split`.
pub fn reassign(path: &Path, split: agegrad::data::Split, age: Option<f64>) {
    let mut m = Manifest::load(path).unwrap();
    for r in &mut m.records {
        r.split = split;
        if let Some(a) = age {
            r.age = a;
        }
    }
    m.save(path).unwrap();
}
