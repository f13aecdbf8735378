use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linear::Linear;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Channels of the token matrix fed in as `[channels, time]`.
    pub in_channels: usize,
    pub n_classes: usize,
    pub dropout: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            in_channels: 8,
            n_classes: 10,
            dropout: 0.3,
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.n_classes < 2 {
            return Err(Error::Config("baseline needs input channels and two or more classes".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Tokens `[n, c]` to a channels-first `[c, n]` signal, checking `c`.
fn channels_first(g: &mut Graph, tokens: Var, channels: usize) -> Result<Var> {
    let shape = g.shape(tokens).to_vec();
    if shape.len() != 2 || shape[1] != channels {
        return Err(Error::Config(format!(
            "baseline expects {channels} input channels, tokens have shape {shape:?}"
        )));
    }
    g.transpose(tokens)
}

#[derive(Debug, Clone)]
struct Conv {
    w: ParamId,
    b: ParamId,
    kernel: usize,
    stride: usize,
}

impl Conv {
    fn new(store: &mut ParamStore, name: &str, ci: usize, co: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add_xavier(format!("{name}.w"), &[co, ci, kernel], ci * kernel, co * kernel, rng),
            b: store.add_const(format!("{name}.b"), &[co], 0.0),
            kernel,
            stride,
        }
    }

    /// Symmetric "same" padding: `k - 1` zeros split with the extra one on the right.
    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        let left = (self.kernel - 1) / 2;
        g.conv1d(x, w, b, self.stride, left, self.kernel - 1 - left)
    }
}

/// Five-layer 1-D CNN with a pooled dense head.
#[derive(Debug, Clone)]
pub struct CnnBaseline {
    pub config: BaselineConfig,
    convs: Vec<Conv>,
    fc: Vec<Linear>,
}

pub const CNN_POOL_BINS: usize = 8;
pub const CNN_HIDDEN_WIDTH: usize = 526;

impl CnnBaseline {
    pub fn new(config: BaselineConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let spec = [
            (config.in_channels, 32, 10, 2),
            (32, 256, 5, 1),
            (256, 512, 3, 1),
            (512, 256, 3, 1),
            (256, 256, 3, 2),
        ];
        let convs = spec
            .iter()
            .enumerate()
            .map(|(i, &(ci, co, k, s))| Conv::new(store, &format!("cnn.conv{i}"), ci, co, k, s, rng))
            .collect();
        let dims = [256 * CNN_POOL_BINS, 512, CNN_HIDDEN_WIDTH, config.n_classes];
        let fc = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("cnn.fc{i}"), w[0], w[1], true, rng))
            .collect();
        Ok(Self { config, convs, fc })
    }

    /// Flattened pooled features `[1, 2048]`.
    pub fn features(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let mut x = channels_first(g, tokens, self.config.in_channels)?;
        for c in &self.convs {
            x = c.forward(g, x)?;
            x = g.gelu(x);
        }
        let p = g.adaptive_avg_pool(x, CNN_POOL_BINS)?;
        g.reshape(p, &[1, 256 * CNN_POOL_BINS])
    }

    pub fn logits<R: Rng>(&self, g: &mut Graph, tokens: Var, training: bool, rng: &mut R) -> Result<Var> {
        let p = self.config.dropout;
        let x = self.features(g, tokens)?;
        let x = g.dropout(x, p, training, rng)?;
        let x = self.fc[0].forward(g, x)?;
        let x = g.gelu(x);
        let x = g.dropout(x, p, training, rng)?;
        let x = self.fc[1].forward(g, x)?;
        let x = g.gelu(x);
        self.fc[2].forward(g, x)
    }
}

pub const MLP_POOL_BINS: usize = 256;

/// Time-pooled multilayer perceptron.
#[derive(Debug, Clone)]
pub struct MlpBaseline {
    pub config: BaselineConfig,
    fc: Vec<Linear>,
}

impl MlpBaseline {
    pub fn new(config: BaselineConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let dims = [
            config.in_channels * MLP_POOL_BINS,
            1024,
            1024,
            512,
            256,
            config.n_classes,
        ];
        let fc = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("mlp.fc{i}"), w[0], w[1], true, rng))
            .collect();
        Ok(Self { config, fc })
    }

    /// Flattened pooled input `[1, channels * 256]`.
    pub fn features(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        let x = channels_first(g, tokens, self.config.in_channels)?;
        let p = g.adaptive_avg_pool(x, MLP_POOL_BINS)?;
        g.reshape(p, &[1, self.config.in_channels * MLP_POOL_BINS])
    }

    pub fn logits<R: Rng>(&self, g: &mut Graph, tokens: Var, training: bool, rng: &mut R) -> Result<Var> {
        let mut x = self.features(g, tokens)?;
        let last = self.fc.len() - 1;
        for (i, l) in self.fc.iter().enumerate() {
            x = l.forward(g, x)?;
            if i < last {
                x = g.gelu(x);
            }
            if i == 0 {
                x = g.dropout(x, self.config.dropout, training, rng)?;
            }
        }
        Ok(x)
    }
}
