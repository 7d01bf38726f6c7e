use rand::Rng;

use super::raster::Image;
use crate::error::{Error, Result};

/// Training-time augmentation. Stages run in field order after the resize;
/// evaluation uses the resize alone.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub size: usize,
    pub crop_p: f64,
    /// Range of the kept area fraction.
    pub crop_scale: (f64, f64),
    pub flip_p: f64,
    pub jitter_p: f64,
    /// Brightness factor is drawn from `1 ± brightness`.
    pub brightness: f64,
    pub contrast: f64,
    pub rotate_p: f64,
    pub rotate_deg: f64,
    pub blur_p: f64,
    pub blur_sigma: (f64, f64),
    pub erase_p: f64,
    /// Range of the erased square's area as a fraction of the image.
    pub erase_area: (f64, f64),
    pub erase_fill: [u8; 3],
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            size: 224,
            crop_p: 1.0,
            crop_scale: (0.8, 1.0),
            flip_p: 0.5,
            jitter_p: 1.0,
            brightness: 0.2,
            contrast: 0.2,
            rotate_p: 1.0,
            rotate_deg: 10.0,
            blur_p: 0.2,
            blur_sigma: (0.1, 1.0),
            erase_p: 0.25,
            erase_area: (0.02, 0.10),
            erase_fill: [128; 3],
        }
    }
}

impl AugmentSpec {
    /// Resize only.
    pub fn none(size: usize) -> Self {
        AugmentSpec {
            size,
            crop_p: 0.0,
            flip_p: 0.0,
            jitter_p: 0.0,
            rotate_p: 0.0,
            blur_p: 0.0,
            erase_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("crop_p", self.crop_p),
            ("flip_p", self.flip_p),
            ("jitter_p", self.jitter_p),
            ("rotate_p", self.rotate_p),
            ("blur_p", self.blur_p),
            ("erase_p", self.erase_p),
        ];
        if let Some((k, p)) = probs.iter().find(|(_, p)| !(0.0..=1.0).contains(p)) {
            return Err(Error::config(format!("augment.{k} must lie in [0, 1], got {p}")));
        }
        if self.size == 0 {
            return Err(Error::config("augment.size must be positive"));
        }
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!("augment.crop_scale must satisfy 0 < lo <= hi <= 1, got ({lo}, {hi})")));
        }
        let (lo, hi) = self.erase_area;
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::config(format!("augment.erase_area must satisfy 0 < lo <= hi < 1, got ({lo}, {hi})")));
        }
        let (lo, hi) = self.blur_sigma;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::config(format!("augment.blur_sigma must satisfy 0 < lo <= hi, got ({lo}, {hi})")));
        }
        if !(0.0..1.0).contains(&self.brightness) || !(0.0..1.0).contains(&self.contrast) {
            return Err(Error::config("augment.brightness and augment.contrast must lie in [0, 1)"));
        }
        if !(self.rotate_deg >= 0.0 && self.rotate_deg <= 180.0) {
            return Err(Error::config(format!("augment.rotate_deg must lie in [0, 180], got {}", self.rotate_deg)));
        }
        Ok(())
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn coin<R: Rng>(rng: &mut R, p: f64) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

/// Runs the full training pipeline on one image.
pub fn augment<R: Rng>(image: &Image, spec: &AugmentSpec, rng: &mut R) -> Result<Image> {
    spec.validate()?;
    let s = spec.size;
    let mut im = image.resize(s, s)?;
    if coin(rng, spec.crop_p) {
        let frac = uniform(rng, spec.crop_scale);
        let side = ((frac.sqrt() * s as f64).round() as usize).clamp(1, s);
        let y = rng.random_range(0..=s - side);
        let x = rng.random_range(0..=s - side);
        im = im.crop(y, x, side, side)?.resize(s, s)?;
    }
    if coin(rng, spec.flip_p) {
        im = im.flip_horizontal();
    }
    if coin(rng, spec.jitter_p) {
        let b = uniform(rng, (1.0 - spec.brightness, 1.0 + spec.brightness));
        let c = uniform(rng, (1.0 - spec.contrast, 1.0 + spec.contrast));
        jitter(&mut im, b, c);
    }
    if coin(rng, spec.rotate_p) {
        let deg = uniform(rng, (-spec.rotate_deg, spec.rotate_deg));
        im = rotate(&im, deg);
    }
    if coin(rng, spec.blur_p) {
        let sigma = uniform(rng, spec.blur_sigma);
        im = blur3(&im, sigma);
    }
    if coin(rng, spec.erase_p) {
        let frac = uniform(rng, spec.erase_area);
        let side = erase_side(s, s, frac);
        let y = rng.random_range(0..=s - side);
        let x = rng.random_range(0..=s - side);
        erase(&mut im, y, x, side, spec.erase_fill);
    }
    Ok(im)
}

fn to_u8(v: f64) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

/// Scales intensities by `brightness`, then stretches them about the mean
/// gray level by `contrast`.
pub fn jitter(im: &mut Image, brightness: f64, contrast: f64) {
    if brightness == 1.0 && contrast == 1.0 {
        return;
    }
    let scaled: Vec<f64> = im.data().iter().map(|&v| v as f64 * brightness).collect();
    let mean = scaled.iter().sum::<f64>() / scaled.len() as f64;
    for (d, v) in im.data_mut().iter_mut().zip(scaled) {
        *d = to_u8((v - mean) * contrast + mean);
    }
}

/// Rotation about the image centre with bilinear sampling and edge clamping.
pub fn rotate(im: &Image, degrees: f64) -> Image {
    if degrees == 0.0 {
        return im.clone();
    }
    let (h, w) = (im.height(), im.width());
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = im.clone();
    let at = |y: isize, x: isize| im.pixel(y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as isize, y0 as isize);
            let (p00, p01, p10, p11) = (at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1));
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = p00[c] as f64 * (1.0 - fx) + p01[c] as f64 * fx;
                let bot = p10[c] as f64 * (1.0 - fx) + p11[c] as f64 * fx;
                px[c] = to_u8(top * (1.0 - fy) + bot * fy);
            }
            out.set_pixel(y, x, px);
        }
    }
    out
}

/// Separable 3×3 Gaussian blur with edge clamping.
pub fn blur3(im: &Image, sigma: f64) -> Image {
    let e = (-1.0 / (2.0 * sigma * sigma)).exp();
    let k = [e / (1.0 + 2.0 * e), 1.0 / (1.0 + 2.0 * e), e / (1.0 + 2.0 * e)];
    let (h, w) = (im.height(), im.width());
    let mut tmp = vec![0.0f64; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (j, kw) in k.iter().enumerate() {
                    let xx = (x as isize + j as isize - 1).clamp(0, w as isize - 1) as usize;
                    acc += kw * im.pixel(y, xx)[c] as f64;
                }
                tmp[(y * w + x) * 3 + c] = acc;
            }
        }
    }
    let mut out = im.clone();
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for (c, p) in px.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, kw) in k.iter().enumerate() {
                    let yy = (y as isize + j as isize - 1).clamp(0, h as isize - 1) as usize;
                    acc += kw * tmp[(yy * w + x) * 3 + c];
                }
                *p = to_u8(acc);
            }
            out.set_pixel(y, x, px);
        }
    }
    out
}

/// Side of a square covering at most `frac` of an `h×w` image.
pub fn erase_side(h: usize, w: usize, frac: f64) -> usize {
    ((frac * (h * w) as f64).sqrt().floor() as usize).clamp(1, h.min(w))
}

pub fn erase(im: &mut Image, y: usize, x: usize, side: usize, fill: [u8; 3]) {
    for r in y..y + side {
        for c in x..x + side {
            im.set_pixel(r, c, fill);
        }
    }
}
