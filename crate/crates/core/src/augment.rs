//! Random time-domain augmentations for training windows.

use std::cell::Cell;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

thread_local! {
    static AUGMENT_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`augment_sample`] calls made on this thread so far.
pub fn augment_call_count() -> u64 {
    AUGMENT_CALLS.with(Cell::get)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    pub probability: f64,
    pub noise_sigma_range: (f64, f64),
    pub cutout_window_range: (usize, usize),
    pub rng_seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            probability: 0.9,
            noise_sigma_range: (0.0, 0.05),
            cutout_window_range: (100, 500),
            rng_seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn with_probability(probability: f64) -> Self {
        Self {
            probability,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!(
                "augmentation probability {} outside [0, 1]",
                self.probability
            )));
        }
        let (lo, hi) = self.noise_sigma_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("bad noise sigma range [{lo}, {hi}]")));
        }
        let (lo, hi) = self.cutout_window_range;
        if lo == 0 || lo > hi {
            return Err(Error::Config(format!("bad cutout window range [{lo}, {hi}]")));
        }
        Ok(())
    }
}

/// The eight augmentation choices; composites name the second op first.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Noise,
    Shift,
    Cutout,
    Crop,
    CutoutShift,
    CutoutNoise,
    CropShift,
    CropNoise,
}

impl Branch {
    pub const ALL: [Branch; 8] = [
        Branch::Noise,
        Branch::Shift,
        Branch::Cutout,
        Branch::Crop,
        Branch::CutoutShift,
        Branch::CutoutNoise,
        Branch::CropShift,
        Branch::CropNoise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Noise => "noise",
            Branch::Shift => "shift",
            Branch::Cutout => "cutout",
            Branch::Crop => "crop",
            Branch::CutoutShift => "cutout+shift",
            Branch::CutoutNoise => "cutout+noise",
            Branch::CropShift => "crop+shift",
            Branch::CropNoise => "crop+noise",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn gaussian_noise(x: &[f64], sigma: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("noise sigma {sigma} must be finite and >= 0")));
    }
    if sigma == 0.0 {
        return Ok(x.to_vec());
    }
    let n = Normal::new(0.0, sigma).expect("validated sigma");
    Ok(x.iter().map(|v| v + n.sample(rng)).collect())
}

/// Circular rotation: `y[(i + k) mod l] = x[i]`, for any integer `k`.
pub fn rotate(x: &[f64], k: i64) -> Vec<f64> {
    let l = x.len();
    if l == 0 {
        return Vec::new();
    }
    let r = k.rem_euclid(l as i64) as usize;
    let mut y = x.to_vec();
    y.rotate_right(r);
    y
}

/// Circular shift by `k` with `|k| <= l/2`.
pub fn shift(x: &[f64], k: i64) -> Result<Vec<f64>> {
    let half = (x.len() / 2) as i64;
    if k.abs() > half {
        return Err(Error::Parameter(format!(
            "shift {k} exceeds half the signal length {}",
            x.len()
        )));
    }
    Ok(rotate(x, k))
}

/// Zeroes `x[start..start + w]`.
pub fn cutout(x: &[f64], w: usize, start: usize) -> Result<Vec<f64>> {
    if w > x.len() {
        return Err(Error::Parameter(format!(
            "cutout window {w} longer than signal {}",
            x.len()
        )));
    }
    if start > x.len() - w {
        return Err(Error::Parameter(format!(
            "cutout start {start} past {}",
            x.len() - w
        )));
    }
    let mut y = x.to_vec();
    y[start..start + w].fill(0.0);
    Ok(y)
}

/// Takes the half-length window at `start` and stretches it back to the
/// full length by linear interpolation. Output position `j` reads window
/// coordinate `j * (h - 1) / (l - 1)`, so the window endpoints land on the
/// output endpoints.
pub fn crop(x: &[f64], start: usize) -> Result<Vec<f64>> {
    let l = x.len();
    let h = l / 2;
    if h < 2 {
        return Err(Error::Parameter(format!("signal of length {l} is too short to crop")));
    }
    if start > l - h {
        return Err(Error::Parameter(format!("crop start {start} past {}", l - h)));
    }
    let win = &x[start..start + h];
    let scale = (h - 1) as f64 / (l - 1) as f64;
    Ok((0..l)
        .map(|j| {
            let u = j as f64 * scale;
            let i = (u.floor() as usize).min(h - 2);
            let t = u - i as f64;
            win[i] + t * (win[i + 1] - win[i])
        })
        .collect())
}

fn draw_noise(x: &[f64], cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f64> {
    let (lo, hi) = cfg.noise_sigma_range;
    let sigma = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    gaussian_noise(x, sigma, rng).expect("validated sigma")
}

fn draw_shift(x: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let half = (x.len() / 2) as i64;
    rotate(x, rng.random_range(-half..=half))
}

fn draw_cutout(x: &[f64], cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f64> {
    let l = x.len();
    let (lo, hi) = cfg.cutout_window_range;
    let hi = hi.min(l);
    let lo = lo.min(hi);
    let w = rng.random_range(lo..=hi);
    let start = rng.random_range(0..=l - w);
    cutout(x, w, start).expect("window fits")
}

fn draw_crop(x: &[f64], rng: &mut impl Rng) -> Vec<f64> {
    let l = x.len();
    if l / 2 < 2 {
        return x.to_vec();
    }
    let start = rng.random_range(0..=l - l / 2);
    crop(x, start).expect("start in range")
}

/// Applies the given branch with freshly drawn parameters.
pub fn apply_branch(x: &[f64], branch: Branch, cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f64> {
    match branch {
        Branch::Noise => draw_noise(x, cfg, rng),
        Branch::Shift => draw_shift(x, rng),
        Branch::Cutout => draw_cutout(x, cfg, rng),
        Branch::Crop => draw_crop(x, rng),
        Branch::CutoutShift => {
            let y = draw_shift(x, rng);
            draw_cutout(&y, cfg, rng)
        }
        Branch::CutoutNoise => {
            let y = draw_noise(x, cfg, rng);
            draw_cutout(&y, cfg, rng)
        }
        Branch::CropShift => {
            let y = draw_shift(x, rng);
            draw_crop(&y, rng)
        }
        Branch::CropNoise => {
            let y = draw_noise(x, cfg, rng);
            draw_crop(&y, rng)
        }
    }
}

/// Like [`augment_sample`] but also reports which branch ran, if any.
pub fn augment_traced(x: &[f64], cfg: &AugmentConfig, rng: &mut impl Rng) -> (Vec<f64>, Option<Branch>) {
    AUGMENT_CALLS.with(|c| c.set(c.get() + 1));
    if cfg.probability <= 0.0 || rng.random::<f64>() >= cfg.probability {
        return (x.to_vec(), None);
    }
    let branch = Branch::ALL[rng.random_range(0..Branch::ALL.len())];
    (apply_branch(x, branch, cfg, rng), Some(branch))
}

/// With probability `cfg.probability` applies one of the eight branches,
/// chosen uniformly; otherwise returns `x` unchanged.
pub fn augment_sample(x: &[f64], cfg: &AugmentConfig, rng: &mut impl Rng) -> Vec<f64> {
    augment_traced(x, cfg, rng).0
}

/// CSV with the original signal and one augmented copy per branch, for
/// plotting. Columns: `t,original,<branch>...`.
pub fn preview_csv(x: &[f64], cfg: &AugmentConfig, rng: &mut impl Rng) -> String {
    let cols: Vec<Vec<f64>> = Branch::ALL.iter().map(|&b| apply_branch(x, b, cfg, rng)).collect();
    let mut out = String::from("t,original");
    for b in Branch::ALL {
        out.push(',');
        out.push_str(b.name());
    }
    out.push('\n');
    for (t, v) in x.iter().enumerate() {
        out.push_str(&format!("{t},{v}"));
        for c in &cols {
            out.push_str(&format!(",{}", c[t]));
        }
        out.push('\n');
    }
    out
}
