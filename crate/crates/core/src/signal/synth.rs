use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Dataset, SignalSample};
use crate::error::{Error, Result};

const SYNTH_RATE_HZ: f64 = 48_000.0;

/// Fundamental DFT bin of synthetic class `class` out of `n_classes` for
/// windows of `length` points: odd multiples of `length / (4 n_classes)`,
/// spread over the half spectrum. Halving any of them (what the crop
/// augmentation does) never lands on another class's bin.
pub fn synth_base_bin(class: usize, n_classes: usize, length: usize) -> usize {
    (2 * class + 1) * length / (4 * n_classes)
}

/// Class-conditioned sinusoids: class `c` has a unit-amplitude tone at bin
/// [`synth_base_bin`] with random phase, one weaker harmonic (x2..x4)
/// below Nyquist, and white Gaussian noise of std `noise_sigma`.
pub fn synth_generate(
    n_classes: usize,
    per_class: usize,
    length: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::Parameter("synthetic data needs at least two classes".into()));
    }
    if n_classes > 256 {
        return Err(Error::Parameter("labels are stored as u8".into()));
    }
    if noise_sigma < 0.0 {
        return Err(Error::Parameter(format!("noise sigma {noise_sigma} < 0")));
    }
    if synth_base_bin(0, n_classes, length) == 0 {
        return Err(Error::Parameter(format!(
            "length {length} too short for {n_classes} distinct class frequencies"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, noise_sigma.max(f64::MIN_POSITIVE)).expect("sigma");
    let mut samples = Vec::with_capacity(n_classes * per_class);
    for c in 0..n_classes {
        let f = synth_base_bin(c, n_classes, length);
        let harmonics: Vec<usize> = (2..=4).filter(|h| 2 * h * f < length).collect();
        for _ in 0..per_class {
            let phase = rng.random_range(0.0..2.0 * PI);
            let harmonic = if harmonics.is_empty() {
                None
            } else {
                let h = harmonics[rng.random_range(0..harmonics.len())];
                Some((h * f, rng.random_range(0.1..0.5), rng.random_range(0.0..2.0 * PI)))
            };
            let values = (0..length)
                .map(|t| {
                    let tt = t as f64 / length as f64;
                    let mut v = (2.0 * PI * f as f64 * tt + phase).sin();
                    if let Some((hf, amp, ph)) = harmonic {
                        v += amp * (2.0 * PI * hf as f64 * tt + ph).sin();
                    }
                    if noise_sigma > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    v
                })
                .collect();
            samples.push(SignalSample::new(values, Some(c as u8), SYNTH_RATE_HZ));
        }
    }
    Dataset::new(format!("synthetic-{n_classes}x{per_class}"), samples, n_classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Dominant non-negative bin from a direct O(n^2) DFT.
    fn naive_peak(x: &[f64]) -> usize {
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (t, v) in x.iter().enumerate() {
                    let a = -2.0 * PI * ((k * t) % n) as f64 / n as f64;
                    re += v * a.cos();
                    im += v * a.sin();
                }
                (k, re * re + im * im)
            })
            .fold((0, -1.0), |best, (k, m)| if m > best.1 { (k, m) } else { best })
            .0
    }

    #[test]
    fn noiseless_peak_is_class_bin() {
        let ds = synth_generate(4, 1, 256, 0.0, 3).unwrap();
        for s in &ds.samples {
            let c = s.label.unwrap() as usize;
            assert_eq!(naive_peak(&s.values), synth_base_bin(c, 4, 256));
        }
    }

    #[test]
    fn halved_bins_avoid_other_classes() {
        for n in 2..=10 {
            let bins: Vec<usize> = (0..n).map(|c| synth_base_bin(c, n, 1600)).collect();
            assert!(bins.windows(2).all(|w| w[0] < w[1]) && 2 * bins[n - 1] < 1600);
            for b in &bins {
                assert!(!bins.contains(&(b / 2)) || b / 2 == 0);
            }
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_generate(3, 5, 128, 0.2, 9).unwrap();
        let b = synth_generate(3, 5, 128, 0.2, 9).unwrap();
        assert_eq!(a, b);
        let c = synth_generate(3, 5, 128, 0.2, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn counts_and_labels() {
        let ds = synth_generate(4, 50, 128, 0.1, 0).unwrap();
        assert_eq!(ds.len(), 200);
        let by = ds.indices_by_class();
        assert!(by.iter().all(|v| v.len() == 50));
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(synth_generate(1, 5, 128, 0.0, 0).is_err());
        assert!(synth_generate(4, 5, 15, 0.0, 0).is_err());
        assert!(synth_generate(4, 5, 128, -1.0, 0).is_err());
    }
}
