use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{Manifest, Record, Split};
use super::raster::Image;
use super::derive_seed;
use crate::error::{Error, Result};
use crate::par;

pub const MAX_AGE: f64 = 80.0;

/// Synthetic face stand-in whose pixel statistics encode age.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub seed: u64,
    pub size: usize,
    /// 0 and 1 give two related but distinct distributions (stripe
    /// orientation and tint channel differ), used for two-stage training.
    pub style: u8,
}

impl SynthSpec {
    pub fn new(n: usize, seed: u64) -> Self {
        SynthSpec { n, seed, size: 224, style: 0 }
    }
}

/// Renders one image for `age`. Mean luminance, ring count and stripe
/// frequency all increase with age; every image also gets random ring
/// centre, phases, a global brightness offset and per-pixel noise.
pub fn render(age: f64, size: usize, style: u8, rng: &mut impl Rng) -> Result<Image> {
    if size == 0 {
        return Err(Error::contract("synthetic image size must be positive"));
    }
    let t = (age / MAX_AGE).clamp(0.0, 1.0);
    let gauss = |sd: f64| Normal::new(0.0, sd).expect("positive sd");
    let lum = 50.0 + 130.0 * t + gauss(4.0).sample(rng);
    let (cy, cx) = (0.5 + rng.random_range(-0.08..0.08), 0.5 + rng.random_range(-0.08..0.08));
    let rings = 1.0 + 5.0 * t;
    let ring_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let stripes = 2.0 + 6.0 * t;
    let stripe_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let tint = 40.0 * (t - 0.5);
    let tint_channel = if style == 0 { 0 } else { 1 };
    let ring_weight = [1.0, 0.6, 0.3];
    let noise = gauss(6.0);
    let s = size as f64;
    let mut data = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (u, v) = (x as f64 / s, y as f64 / s);
            let r = ((u - cx).powi(2) + (v - cy).powi(2)).sqrt();
            let ring = 30.0 * (std::f64::consts::TAU * rings * r / 0.5 + ring_phase).sin();
            let coord = if style == 0 { v } else { u };
            let stripe = 20.0 * (std::f64::consts::TAU * stripes * coord + stripe_phase).sin();
            for c in 0..3 {
                let mut val = lum + ring * ring_weight[c] + stripe + noise.sample(rng);
                if c == tint_channel {
                    val += tint;
                } else if c == 2 {
                    val -= tint;
                }
                data.push(val.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::new(size, size, data)
}

/// Ages drawn uniformly from `[0, 80]`, rounded to 0.1 years.
pub fn sample_age(rng: &mut impl Rng) -> f64 {
    (rng.random_range(0.0..=MAX_AGE) * 10.0).round() / 10.0
}

/// Renders `spec.n` images without touching the disk.
pub fn generate(spec: &SynthSpec) -> Result<Vec<(f64, Image)>> {
    if spec.n < 8 {
        return Err(Error::contract(format!("synthetic set needs at least 8 samples, got {}", spec.n)));
    }
    par::map_range(spec.n, |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[spec.seed, spec.style as u64, i as u64]));
        let age = sample_age(&mut rng);
        Ok((age, render(age, spec.size, spec.style, &mut rng)?))
    })
    .into_iter()
    .collect()
}

/// Writes `img/NNNNN.png` files and `manifest.csv` (all records unassigned)
/// into `out_dir`.
pub fn gen_synthetic(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    let samples = generate(spec)?;
    let img_dir = out_dir.join("img");
    std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (i, (age, im)) in samples.iter().enumerate() {
        let rel = format!("img/{i:05}.png");
        im.save_png(&out_dir.join(&rel))?;
        records.push(Record { path: rel, age: *age, split: Split::Unassigned });
    }
    let m = Manifest::new(out_dir, records)?;
    m.save(&out_dir.join("manifest.csv"))?;
    Ok(m)
}
