//! Vibration windows, datasets and the experiment splits built from them.

mod bundle;
mod split;
mod synth;
mod window;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use bundle::{load_bundle, load_csv, read_bundle, save_bundle, write_bundle, BundleHeader, BUNDLE_MAGIC};
pub use split::{make_split, Experiment, SplitPlan};
pub use synth::{synth_base_bin, synth_generate};
pub use window::{split_paderborn, split_recording, window_recording, PADERBORN_RATE_HZ};

/// One fixed-length vibration window.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalSample {
    pub values: Vec<f64>,
    pub label: Option<u8>,
    pub sample_rate_hz: f64,
}

impl SignalSample {
    pub fn new(values: Vec<f64>, label: Option<u8>, sample_rate_hz: f64) -> Self {
        Self {
            values,
            label,
            sample_rate_hz,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Zero-mean, unit-variance copy; constant windows map to zeros.
    pub fn z_scored(&self) -> Self {
        let n = self.values.len() as f64;
        let mean = self.values.iter().sum::<f64>() / n;
        let var = self.values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let inv = if var > 0.0 { 1.0 / var.sqrt() } else { 0.0 };
        Self {
            values: self.values.iter().map(|v| (v - mean) * inv).collect(),
            ..self.clone()
        }
    }
}

/// A labelled (or unlabelled) collection of equal-length windows.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub samples: Vec<SignalSample>,
    pub n_classes: usize,
    pub window_length: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, samples: Vec<SignalSample>, n_classes: usize) -> Result<Self> {
        let window_length = samples.first().map_or(0, SignalSample::len);
        let ds = Self {
            name: name.into(),
            samples,
            n_classes,
            window_length,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 {
            return Err(Error::Data("a dataset needs at least one class".into()));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.len() != self.window_length {
                return Err(Error::Data(format!(
                    "sample {i} has length {}, expected {}",
                    s.len(),
                    self.window_length
                )));
            }
            if let Some(l) = s.label {
                if l as usize >= self.n_classes {
                    return Err(Error::Data(format!(
                        "sample {i} has label {l} but the dataset has {} classes",
                        self.n_classes
                    )));
                }
            }
            if let Some(j) = s.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Data(format!("sample {i} has a non-finite value at {j}")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<Option<u8>> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Indices of samples per class; unlabelled samples are skipped.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_classes];
        for (i, s) in self.samples.iter().enumerate() {
            if let Some(l) = s.label {
                out[l as usize].push(i);
            }
        }
        out
    }

    pub fn z_scored(&self) -> Self {
        Self {
            samples: self.samples.iter().map(SignalSample::z_scored).collect(),
            ..self.clone()
        }
    }

    /// Concatenation of several datasets with the same window length.
    pub fn concat(name: impl Into<String>, parts: Vec<Dataset>) -> Result<Self> {
        let n_classes = parts.iter().map(|d| d.n_classes).max().unwrap_or(1);
        let samples = parts.into_iter().flat_map(|d| d.samples).collect();
        Self::new(name, samples, n_classes)
    }
}

/// Label set used by the split plans.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ClassSet(pub std::collections::BTreeSet<u8>);

impl ClassSet {
    pub fn all(n: usize) -> Self {
        Self((0..n.min(256)).map(|c| c as u8).collect())
    }

    pub fn contains(&self, c: u8) -> bool {
        self.0.contains(&c)
    }
}

impl FromIterator<u8> for ClassSet {
    fn from_iter<T: IntoIterator<Item = u8>>(iter: T) -> Self {
        Self(iter.into_iter().collect())
    }
}
