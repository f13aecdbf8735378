//! `SIGB1` dataset bundles and CSV import.
//!
//! Layout: the 5 magic bytes `SIGB1`, a `u32` LE header length, a UTF-8 JSON
//! [`BundleHeader`], then `n_samples * window_length` LE `f32` values in
//! row-major order, then (when `has_labels`) one `u8` label per sample.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, SignalSample};
use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 5] = b"SIGB1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleHeader {
    pub name: String,
    pub n_samples: usize,
    pub window_length: usize,
    pub sample_rate_hz: f64,
    pub n_classes: usize,
    pub has_labels: bool,
}

pub fn write_bundle(dataset: &Dataset, mut w: impl Write) -> Result<()> {
    let Some(first) = dataset.samples.first() else {
        return Err(Error::Data("refusing to save an empty dataset".into()));
    };
    let has_labels = first.label.is_some();
    if dataset.samples.iter().any(|s| s.label.is_some() != has_labels) {
        return Err(Error::Data("bundle samples must be all labelled or all unlabelled".into()));
    }
    if dataset
        .samples
        .iter()
        .any(|s| s.sample_rate_hz != first.sample_rate_hz)
    {
        return Err(Error::Data("bundle samples must share one sample rate".into()));
    }
    dataset.validate()?;
    let header = BundleHeader {
        name: dataset.name.clone(),
        n_samples: dataset.len(),
        window_length: dataset.window_length,
        sample_rate_hz: first.sample_rate_hz,
        n_classes: dataset.n_classes,
        has_labels,
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(9 + json.len() + dataset.len() * (dataset.window_length * 4 + 1));
    buf.extend_from_slice(BUNDLE_MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for s in &dataset.samples {
        for &v in &s.values {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    if has_labels {
        buf.extend(dataset.samples.iter().map(|s| s.label.unwrap_or(0)));
    }
    w.write_all(&buf).map_err(|e| Error::io("<bundle>", e))
}

fn format_err(offset: usize, detail: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        detail: detail.into(),
    }
}

fn take<'a>(bytes: &'a [u8], at: usize, n: usize, what: &str) -> Result<&'a [u8]> {
    bytes
        .get(at..at + n)
        .ok_or_else(|| format_err(at, format!("truncated {what}: need {n} bytes, file has {}", bytes.len())))
}

pub fn read_bundle(bytes: &[u8]) -> Result<Dataset> {
    if bytes.get(..5) != Some(BUNDLE_MAGIC.as_slice()) {
        return Err(format_err(0, "bad magic, expected SIGB1"));
    }
    let hl = u32::from_le_bytes(take(bytes, 5, 4, "header length")?.try_into().unwrap()) as usize;
    let header: BundleHeader = serde_json::from_slice(take(bytes, 9, hl, "header")?)
        .map_err(|e| format_err(9, format!("bad header: {e}")))?;
    let mut at = 9 + hl;
    let row_bytes = header.window_length * 4;
    let mut samples = Vec::with_capacity(header.n_samples);
    for i in 0..header.n_samples {
        let rec = take(bytes, at, row_bytes, &format!("sample {i}"))?;
        let values = rec
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        samples.push(SignalSample::new(values, None, header.sample_rate_hz));
        at += row_bytes;
    }
    if header.has_labels {
        let labels = take(bytes, at, header.n_samples, "labels")?;
        for (i, (s, &l)) in samples.iter_mut().zip(labels).enumerate() {
            if l as usize >= header.n_classes {
                return Err(format_err(at + i, format!("label {l} >= n_classes {}", header.n_classes)));
            }
            s.label = Some(l);
        }
        at += header.n_samples;
    }
    if at != bytes.len() {
        return Err(format_err(at, format!("{} trailing bytes", bytes.len() - at)));
    }
    let ds = Dataset {
        name: header.name,
        samples,
        n_classes: header.n_classes,
        window_length: header.window_length,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_bundle(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_bundle(dataset, &mut buf)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_bundle(&bytes)
}

/// One sample per row of decimal values, with the integer label in the last
/// column when `has_labels`.
pub fn load_csv(path: impl AsRef<Path>, has_labels: bool, sample_rate_hz: f64) -> Result<Dataset> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut samples = Vec::new();
    let mut max_label = 0u8;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let mut fields: Vec<&str> = rec.iter().collect();
        let label = if has_labels {
            let raw = fields
                .pop()
                .ok_or_else(|| Error::Ingestion(format!("row {row} is empty")))?;
            let l: u8 = raw
                .parse()
                .map_err(|_| Error::Ingestion(format!("row {row}: bad label {raw:?}")))?;
            max_label = max_label.max(l);
            Some(l)
        } else {
            None
        };
        let values = fields
            .iter()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Ingestion(format!("row {row}: {e}")))?;
        samples.push(SignalSample::new(values, label, sample_rate_hz));
    }
    if samples.is_empty() {
        return Err(Error::Ingestion(format!("{} has no rows", path.display())));
    }
    let name = path
        .file_stem()
        .map_or_else(|| "csv".to_string(), |s| s.to_string_lossy().into_owned());
    Dataset::new(name, samples, max_label as usize + 1)
}
