use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenize::TokenSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MaskConfig {
    /// Probability that a token is selected for corruption.
    pub mask_p: f64,
    /// Among selected tokens: share zeroed.
    pub zero_p: f64,
    /// Among selected tokens: share replaced by random values. The rest are kept.
    pub random_p: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        Self {
            mask_p: 0.5,
            zero_p: 0.7,
            random_p: 0.2,
        }
    }
}

impl MaskConfig {
    pub fn keep_p(&self) -> f64 {
        1.0 - self.zero_p - self.random_p
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |p: f64| (0.0..=1.0).contains(&p);
        if !ok(self.mask_p) || !ok(self.zero_p) || !ok(self.random_p) || self.keep_p() < -1e-12 {
            return Err(Error::Config(format!(
                "mask probabilities out of range: mask {}, zero {}, random {}",
                self.mask_p, self.zero_p, self.random_p
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskAction {
    Zero,
    Random,
    Keep,
}

/// Which tokens were corrupted and how.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MaskPlan {
    pub masked: Vec<bool>,
    /// `Some` exactly at masked positions.
    pub actions: Vec<Option<MaskAction>>,
    /// Values written at `Random` positions, in token order.
    pub replacement_values: Vec<f64>,
}

impl MaskPlan {
    pub fn n_masked(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }
}

/// Selects each token with probability `mask_p`; a selected token is zeroed,
/// filled with uniform draws from the sample's `[min, max]` range, or kept.
/// Draw order per token: selection, action, then replacement values.
pub fn apply_mask(tokens: &TokenSequence, cfg: &MaskConfig, rng: &mut impl Rng) -> (TokenSequence, MaskPlan) {
    let n = tokens.n_tokens;
    let d = tokens.token_dim;
    let (lo, hi) = tokens
        .tokens
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut out = tokens.clone();
    let mut plan = MaskPlan {
        masked: vec![false; n],
        actions: vec![None; n],
        replacement_values: Vec::new(),
    };
    if cfg.mask_p <= 0.0 {
        return (out, plan);
    }
    for i in 0..n {
        if rng.random::<f64>() >= cfg.mask_p {
            continue;
        }
        let u = rng.random::<f64>();
        let action = if u < cfg.zero_p {
            MaskAction::Zero
        } else if u < cfg.zero_p + cfg.random_p {
            MaskAction::Random
        } else {
            MaskAction::Keep
        };
        let row = &mut out.tokens[i * d..(i + 1) * d];
        match action {
            MaskAction::Zero => row.fill(0.0),
            MaskAction::Random => {
                for v in row.iter_mut() {
                    *v = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                    plan.replacement_values.push(*v);
                }
            }
            MaskAction::Keep => {}
        }
        plan.masked[i] = true;
        plan.actions[i] = Some(action);
    }
    (out, plan)
}
