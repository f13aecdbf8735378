use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `None` marks the end-of-training row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub tokenizer: String,
    pub augment_p: f64,
    /// Labelled-set size for scarcity sweeps, 0 otherwise.
    pub n_train: usize,
    pub epoch: Option<u64>,
    /// Mean test accuracy over seeds.
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn push(&mut self, row: ResultRow) -> Result<()> {
        if !(0.0..=1.0).contains(&row.accuracy) {
            return Err(Error::Contract(format!("accuracy {} outside [0, 1]", row.accuracy)));
        }
        self.rows.push(row);
        Ok(())
    }

    /// Stable order by tokenizer, model, augmentation probability, then
    /// sweep size and epoch (final last).
    pub fn sort(&mut self) {
        self.rows.sort_by(|a, b| {
            a.tokenizer
                .cmp(&b.tokenizer)
                .then_with(|| a.model.cmp(&b.model))
                .then_with(|| a.augment_p.total_cmp(&b.augment_p))
                .then_with(|| a.n_train.cmp(&b.n_train))
                .then_with(|| a.epoch.unwrap_or(u64::MAX).cmp(&b.epoch.unwrap_or(u64::MAX)))
        });
    }

    pub fn final_rows(&self) -> impl Iterator<Item = &ResultRow> {
        self.rows.iter().filter(|r| r.epoch.is_none())
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["model", "tokenizer", "augment_p", "n_train", "epoch", "accuracy"])?;
        for r in &self.rows {
            w.write_record([
                r.model.clone(),
                r.tokenizer.clone(),
                r.augment_p.to_string(),
                r.n_train.to_string(),
                r.epoch.map_or_else(|| "final".to_string(), |e| e.to_string()),
                format!("{:.6}", r.accuracy),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }
}

/// One row of a run's `metrics.csv`. `split` is `pretrain`, `train` or
/// `test`; pretraining rows have no accuracy.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: u64,
    pub split: &'static str,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub lr: f64,
    pub seconds: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "split", "loss", "accuracy", "lr", "seconds"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.split.to_string(),
            r.loss.to_string(),
            r.accuracy.map(|a| a.to_string()).unwrap_or_default(),
            r.lr.to_string(),
            r.seconds.map(|s| format!("{s:.3}")).unwrap_or_default(),
        ])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Contract(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Accuracy-versus-epoch line chart. Output depends only on the input, so
/// identical runs give identical files.
pub fn accuracy_svg(title: &str, series: &[(String, Vec<(u64, f64)>)]) -> String {
    let (w, h, m) = (640.0, 400.0, 50.0);
    let max_epoch = series
        .iter()
        .flat_map(|(_, p)| p.iter().map(|&(e, _)| e))
        .max()
        .unwrap_or(1)
        .max(1) as f64;
    let x = |e: u64| m + (w - 2.0 * m) * e as f64 / max_epoch;
    let y = |a: f64| h - m - (h - 2.0 * m) * a.clamp(0.0, 1.0);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<path d="M{m} {m} V{} H{}" fill="none" stroke="black"/>"#,
        h - m,
        w - m
    );
    for k in 0..=4 {
        let a = k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{a:.2}</text>"#,
            m - 6.0,
            y(a) + 4.0
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epoch</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        w - m,
        h - m + 16.0,
        max_epoch
    );
    for (i, (label, pts)) in series.iter().enumerate() {
        let colour = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(j, &(e, a))| format!("{}{:.2} {:.2}", if j == 0 { 'M' } else { 'L' }, x(e), y(a)))
            .collect();
        let _ = writeln!(
            s,
            r#"<path d="{}" fill="none" stroke="{colour}" stroke-width="1.5"/>"#,
            d.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" fill="{colour}">{}</text>"#,
            w - m - 120.0,
            m + 16.0 * (i as f64 + 1.0),
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
