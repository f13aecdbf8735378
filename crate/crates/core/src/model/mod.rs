//! Transformer encoder and the CNN / MLP baselines.

mod baselines;
mod encoder;
mod linear;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::tokenize::{Tokenizer, TokenizerConfig};

pub use baselines::{BaselineConfig, CnnBaseline, MlpBaseline, CNN_HIDDEN_WIDTH, CNN_POOL_BINS, MLP_POOL_BINS};
pub use encoder::{AttentionTrace, EncodeMode, Encoder, EncoderConfig, FfVariant};
pub use linear::Linear;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ArchConfig {
    Transformer(EncoderConfig),
    Cnn(BaselineConfig),
    Mlp(BaselineConfig),
}

impl ArchConfig {
    pub fn input_dim(&self) -> usize {
        match self {
            ArchConfig::Transformer(c) => c.input_dim,
            ArchConfig::Cnn(c) | ArchConfig::Mlp(c) => c.in_channels,
        }
    }

    pub fn n_classes(&self) -> usize {
        match self {
            ArchConfig::Transformer(c) => c.n_classes,
            ArchConfig::Cnn(c) | ArchConfig::Mlp(c) => c.n_classes,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ArchConfig::Transformer(_) => "transformer",
            ArchConfig::Cnn(_) => "cnn",
            ArchConfig::Mlp(_) => "mlp",
        }
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub tokenizer: TokenizerConfig,
    pub arch: ArchConfig,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let td = self.tokenizer.token_dim();
        if self.arch.input_dim() != td {
            return Err(Error::Config(format!(
                "{} expects input dim {} but the {} tokenizer gives {td}",
                self.arch.name(),
                self.arch.input_dim(),
                self.tokenizer.id()
            )));
        }
        match &self.arch {
            ArchConfig::Transformer(c) => c.validate(),
            ArchConfig::Cnn(c) | ArchConfig::Mlp(c) => c.validate(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Net {
    Transformer(Encoder),
    Cnn(CnnBaseline),
    Mlp(MlpBaseline),
}

/// A tokenizer, a network and the parameters they share.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub tokenizer: Tokenizer,
    pub net: Net,
}

impl Model {
    /// Fresh initialisation; parameter order is fixed by `spec`.
    pub fn new(spec: ModelSpec, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let tokenizer = Tokenizer::new(spec.tokenizer.clone(), &mut store, rng);
        let net = match &spec.arch {
            ArchConfig::Transformer(c) => Net::Transformer(Encoder::new(c.clone(), &mut store, rng)?),
            ArchConfig::Cnn(c) => Net::Cnn(CnnBaseline::new(c.clone(), &mut store, rng)?),
            ArchConfig::Mlp(c) => Net::Mlp(MlpBaseline::new(c.clone(), &mut store, rng)?),
        };
        Ok(Self {
            spec,
            store,
            tokenizer,
            net,
        })
    }

    pub fn seeded(spec: ModelSpec, seed: u64) -> Result<Self> {
        Self::new(spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn n_classes(&self) -> usize {
        self.spec.arch.n_classes()
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    pub fn encoder(&self) -> Option<&Encoder> {
        match &self.net {
            Net::Transformer(e) => Some(e),
            _ => None,
        }
    }

    /// Logits `[1, n_classes]` for one raw window.
    pub fn logits<R: Rng>(&self, g: &mut Graph, x: &[f64], training: bool, rng: &mut R) -> Result<Var> {
        let t = self.tokenizer.forward(g, x)?;
        self.logits_from_tokens(g, t, training, rng)
    }

    pub fn logits_from_tokens<R: Rng>(&self, g: &mut Graph, tokens: Var, training: bool, rng: &mut R) -> Result<Var> {
        match &self.net {
            Net::Transformer(e) => e.encode(g, tokens, EncodeMode::Classify, training, rng),
            Net::Cnn(c) => c.logits(g, tokens, training, rng),
            Net::Mlp(m) => m.logits(g, tokens, training, rng),
        }
    }

    /// Per-token reconstruction `[n_tokens, token_dim]` of a (corrupted)
    /// token matrix. Transformer only.
    pub fn reconstruct<R: Rng>(&self, g: &mut Graph, tokens: Var, training: bool, rng: &mut R) -> Result<Var> {
        match &self.net {
            Net::Transformer(e) => e.encode(g, tokens, EncodeMode::Reconstruct, training, rng),
            _ => Err(Error::Config(format!(
                "{} models have no reconstruction head",
                self.spec.arch.name()
            ))),
        }
    }

    /// Eval-mode logits as plain values.
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::with_params(&self.store);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v = self.logits(&mut g, x, false, &mut rng)?;
        Ok(g.value(v).to_vec())
    }

    /// Class-token attention per head at `layer` for one window.
    pub fn attention_scores(&self, x: &[f64], layer: usize) -> Result<Vec<Vec<f64>>> {
        let enc = self
            .encoder()
            .ok_or_else(|| Error::Config("attention scores need a transformer".into()))?;
        let t = self.tokenizer.tokenize(&self.store, x)?;
        enc.attention_scores(&self.store, &t.tokens, t.n_tokens, layer)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn desk_spec() -> ModelSpec {
        ModelSpec {
            tokenizer: TokenizerConfig::fourier(),
            arch: ArchConfig::Transformer(EncoderConfig::desk(3, 4)),
        }
    }

    #[test]
    fn tokenizer_mismatch_is_a_config_error() {
        let spec = ModelSpec {
            tokenizer: TokenizerConfig::constant(8),
            arch: ArchConfig::Transformer(EncoderConfig::desk(3, 4)),
        };
        assert!(matches!(Model::seeded(spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn logits_and_predict() {
        let m = Model::seeded(desk_spec(), 1).unwrap();
        let x: Vec<f64> = (0..256).map(|i| (i as f64 * 0.3).sin()).collect();
        let z = m.predict(&x).unwrap();
        assert_eq!(z.len(), 4);
        assert_eq!(z, m.predict(&x).unwrap());
    }

    #[test]
    fn same_seed_same_params() {
        let a = Model::seeded(desk_spec(), 3).unwrap();
        let b = Model::seeded(desk_spec(), 3).unwrap();
        assert_eq!(a.store.to_named(), b.store.to_named());
    }

    #[test]
    fn baselines_reject_wrong_channels() {
        let spec = ModelSpec {
            tokenizer: TokenizerConfig::fourier(),
            arch: ArchConfig::Mlp(BaselineConfig::default()),
        };
        assert!(Model::seeded(spec, 0).is_err());
    }
}
