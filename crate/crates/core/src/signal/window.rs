use super::SignalSample;
use crate::error::{Error, Result};

pub const PADERBORN_RATE_HZ: f64 = 64_000.0;
const PADERBORN_SECONDS: f64 = 4.0;
const PADERBORN_SPLITS: usize = 100;

/// Cuts `raw` into consecutive blocks of `window_length + 2 * trim` points
/// and drops `trim` points from each end of every block. A partial trailing
/// block is discarded.
pub fn window_recording(
    raw: &[f64],
    window_length: usize,
    trim: usize,
    sample_rate_hz: f64,
    label: Option<u8>,
) -> Result<Vec<SignalSample>> {
    if window_length == 0 {
        return Err(Error::Parameter("window length must be positive".into()));
    }
    let block = window_length + 2 * trim;
    if raw.len() < block {
        return Err(Error::Ingestion(format!(
            "recording of {} points is shorter than one block of {block}",
            raw.len()
        )));
    }
    Ok(raw
        .chunks_exact(block)
        .map(|b| SignalSample::new(b[trim..trim + window_length].to_vec(), label, sample_rate_hz))
        .collect())
}

/// Splits the first `seconds * rate_hz` points of `raw` into `n_splits`
/// equal consecutive windows.
pub fn split_recording(
    raw: &[f64],
    seconds: f64,
    rate_hz: f64,
    n_splits: usize,
    label: Option<u8>,
) -> Result<Vec<SignalSample>> {
    let need = (seconds * rate_hz).round() as usize;
    if n_splits == 0 || need < n_splits {
        return Err(Error::Parameter(format!(
            "cannot split {need} points into {n_splits} windows"
        )));
    }
    if raw.len() < need {
        return Err(Error::Ingestion(format!(
            "signal has {} points, need {need} ({seconds} s at {rate_hz} Hz)",
            raw.len()
        )));
    }
    let len = need / n_splits;
    Ok(raw[..len * n_splits]
        .chunks_exact(len)
        .map(|w| SignalSample::new(w.to_vec(), label, rate_hz))
        .collect())
}

/// Four seconds at 64 kHz cut into 100 windows of 2560 points.
pub fn split_paderborn(raw: &[f64], label: Option<u8>) -> Result<Vec<SignalSample>> {
    split_recording(raw, PADERBORN_SECONDS, PADERBORN_RATE_HZ, PADERBORN_SPLITS, label)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64).collect()
    }

    #[test]
    fn cwru_channel_gives_280_windows() {
        let w = window_recording(&ramp(467_600), 1600, 35, 48_000.0, Some(3)).unwrap();
        assert_eq!(w.len(), 280);
        assert!(w.iter().all(|s| s.len() == 1600 && s.label == Some(3)));
        assert_eq!(w[0].values[0], 35.0);
        assert_eq!(w[1].values[0], 1670.0 + 35.0);
        assert_eq!(*w[0].values.last().unwrap(), 1634.0);
    }

    #[test]
    fn one_block_and_partial_blocks() {
        assert_eq!(window_recording(&ramp(1670), 1600, 35, 1.0, None).unwrap().len(), 1);
        assert_eq!(window_recording(&ramp(1670 * 5 / 2), 1600, 35, 1.0, None).unwrap().len(), 2);
        assert!(matches!(
            window_recording(&ramp(1669), 1600, 35, 1.0, None),
            Err(Error::Ingestion(_))
        ));
    }

    #[test]
    fn windowing_conserves_points() {
        for len in [1670, 3000, 5009, 467_600] {
            let n = window_recording(&ramp(len), 1600, 35, 1.0, None).unwrap().len();
            assert!(n * 1670 <= len && len < (n + 1) * 1670);
        }
    }

    #[test]
    fn paderborn_signal_gives_100_windows_of_2560() {
        let w = split_paderborn(&ramp(256_000), Some(1)).unwrap();
        assert_eq!(w.len(), 100);
        assert!(w.iter().all(|s| s.len() == 2560));
        assert_eq!(w[99].values[2559], 255_999.0);
        assert!(matches!(split_paderborn(&ramp(255_999), None), Err(Error::Ingestion(_))));
    }

    #[test]
    fn paderborn_corpus_size() {
        let signal = ramp(256_000);
        let total: usize = (0..580).map(|_| split_paderborn(&signal, None).unwrap().len()).sum();
        assert_eq!(total, 58_000);
    }
}
