use rand::Rng;
use serde::{Deserialize, Serialize};

use super::linear::Linear;
use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FfVariant {
    #[default]
    Plain,
    Glu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub dropout: f64,
    /// Defaults to `4 * model_dim` when absent.
    pub ff_hidden_dim: Option<usize>,
    pub ff_variant: FfVariant,
    pub input_dim: usize,
    pub n_classes: usize,
    /// Two-layer GELU embedder instead of a single linear map.
    pub mlp_embedder: bool,
    /// Whether [`Encoder::attention_scores`] keeps the class-token column.
    pub scores_include_cls: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            model_dim: 256,
            n_heads: 32,
            n_layers: 4,
            dropout: 0.3,
            ff_hidden_dim: None,
            ff_variant: FfVariant::Plain,
            input_dim: 3,
            n_classes: 10,
            mlp_embedder: false,
            scores_include_cls: true,
        }
    }
}

impl EncoderConfig {
    /// Small profile for single-core runs: width 64, 2 layers, 4 heads.
    pub fn desk(input_dim: usize, n_classes: usize) -> Self {
        Self {
            model_dim: 64,
            n_heads: 4,
            n_layers: 2,
            dropout: 0.1,
            input_dim,
            n_classes,
            ..Self::default()
        }
    }

    pub fn ff_hidden(&self) -> usize {
        self.ff_hidden_dim.unwrap_or(4 * self.model_dim)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.n_heads == 0 || self.n_layers == 0 || self.input_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary embeddings need an even head dim, got {}",
                self.head_dim()
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.n_classes < 2 {
            return Err(Error::Config("need at least two classes".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodeMode {
    /// Class token prepended; returns `[1, n_classes]` logits.
    Classify,
    /// No class token; returns `[n_tokens, input_dim]`.
    Reconstruct,
}

#[derive(Debug, Clone)]
struct LayerNormParams {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNormParams {
    fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.g"), &[d], 1.0),
            beta: store.add_const(format!("{name}.b"), &[d], 0.0),
        }
    }

    fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let (gm, bt) = (g.param(self.gamma), g.param(self.beta));
        g.layer_norm(x, gm, bt, LN_EPS)
    }
}

#[derive(Debug, Clone)]
struct Layer {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    ff1: Linear,
    ff_gate: Option<Linear>,
    ff2: Linear,
    ln1: LayerNormParams,
    ln2: LayerNormParams,
}

#[derive(Debug, Clone)]
enum Embedder {
    Linear(Linear),
    Mlp(Linear, Linear),
}

/// Parameter handles of the transformer encoder.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    embed: Embedder,
    pub cls_token: ParamId,
    layers: Vec<Layer>,
    head: Linear,
    recon: (Linear, Linear),
    /// Test hook: disable the residual connections.
    pub residual: bool,
}

/// Per-layer, per-head attention probabilities recorded during a forward pass.
#[derive(Debug, Default)]
pub struct AttentionTrace {
    pub layers: Vec<Vec<Var>>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (d, i) = (config.model_dim, config.input_dim);
        let embed = if config.mlp_embedder {
            Embedder::Mlp(
                Linear::new(store, "embed.0", i, d, true, rng),
                Linear::new(store, "embed.1", d, d, true, rng),
            )
        } else {
            Embedder::Linear(Linear::new(store, "embed", i, d, true, rng))
        };
        let cls_token = store.add_normal("cls_token", &[1, d], 0.02, rng);
        let h = config.ff_hidden();
        let layers = (0..config.n_layers)
            .map(|l| {
                let p = format!("layers.{l}");
                Layer {
                    wq: Linear::new(store, &format!("{p}.attn.q"), d, d, false, rng),
                    wk: Linear::new(store, &format!("{p}.attn.k"), d, d, false, rng),
                    wv: Linear::new(store, &format!("{p}.attn.v"), d, d, false, rng),
                    wo: Linear::new(store, &format!("{p}.attn.o"), d, d, true, rng),
                    ff1: Linear::new(
                        store,
                        &format!("{p}.ff.1"),
                        d,
                        h,
                        config.ff_variant == FfVariant::Plain,
                        rng,
                    ),
                    ff_gate: (config.ff_variant == FfVariant::Glu)
                        .then(|| Linear::new(store, &format!("{p}.ff.3"), d, h, false, rng)),
                    ff2: Linear::new(
                        store,
                        &format!("{p}.ff.2"),
                        h,
                        d,
                        config.ff_variant == FfVariant::Plain,
                        rng,
                    ),
                    ln1: LayerNormParams::new(store, &format!("{p}.ln1"), d),
                    ln2: LayerNormParams::new(store, &format!("{p}.ln2"), d),
                }
            })
            .collect();
        let head = Linear::new(store, "head", d, config.n_classes, true, rng);
        let recon = (
            Linear::new(store, "recon.0", d, d, true, rng),
            Linear::new(store, "recon.1", d, i, true, rng),
        );
        Ok(Self {
            config,
            embed,
            cls_token,
            layers,
            head,
            recon,
            residual: true,
        })
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    fn embed(&self, g: &mut Graph, tokens: Var) -> Result<Var> {
        match &self.embed {
            Embedder::Linear(l) => l.forward(g, tokens),
            Embedder::Mlp(a, b) => {
                let h = a.forward(g, tokens)?;
                let h = g.gelu(h);
                b.forward(g, h)
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention<R: Rng>(
        &self,
        g: &mut Graph,
        layer: &Layer,
        x: Var,
        positions: &[usize],
        training: bool,
        rng: &mut R,
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let hd = self.config.head_dim();
        let q = layer.wq.forward(g, x)?;
        let k = layer.wk.forward(g, x)?;
        let v = layer.wv.forward(g, x)?;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut heads = Vec::with_capacity(self.config.n_heads);
        let mut probs = Vec::new();
        for h in 0..self.config.n_heads {
            let qh = g.slice_cols(q, h * hd, hd)?;
            let qh = g.rope(qh, positions)?;
            let kh = g.slice_cols(k, h * hd, hd)?;
            let kh = g.rope(kh, positions)?;
            let vh = g.slice_cols(v, h * hd, hd)?;
            let kt = g.transpose(kh)?;
            let s = g.matmul(qh, kt)?;
            let s = g.scale(s, scale);
            let p = g.softmax(s)?;
            probs.push(p);
            let p = g.dropout(p, self.config.dropout, training, rng)?;
            heads.push(g.matmul(p, vh)?);
        }
        if let Some(t) = trace {
            t.extend(probs);
        }
        let cat = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
        layer.wo.forward(g, cat)
    }

    fn feed_forward(&self, g: &mut Graph, layer: &Layer, x: Var) -> Result<Var> {
        let a = layer.ff1.forward(g, x)?;
        let a = g.gelu(a);
        let h = match &layer.ff_gate {
            Some(gate) => {
                let b = gate.forward(g, x)?;
                g.mul(a, b)?
            }
            None => a,
        };
        layer.ff2.forward(g, h)
    }

    fn residual_norm(&self, g: &mut Graph, sub: Var, x: Var, ln: &LayerNormParams) -> Result<Var> {
        let s = if self.residual { g.add(sub, x)? } else { sub };
        ln.forward(g, s)
    }

    /// Runs the layer stack over `x: [n, model_dim]`.
    fn layer_ref(&self, layer: usize) -> Result<&Layer> {
        self.layers.get(layer).ok_or_else(|| {
            Error::Parameter(format!("layer {layer} out of range for {} layers", self.layers.len()))
        })
    }

    /// Multi-head self-attention sublayer of `layer` on `x: [n, model_dim]`.
    pub fn attention_at<R: Rng>(
        &self,
        g: &mut Graph,
        layer: usize,
        x: Var,
        positions: &[usize],
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let l = self.layer_ref(layer)?;
        self.attention(g, l, x, positions, training, rng, None)
    }

    /// Feed-forward sublayer of `layer`.
    pub fn feed_forward_at(&self, g: &mut Graph, layer: usize, x: Var) -> Result<Var> {
        let l = self.layer_ref(layer)?;
        self.feed_forward(g, l, x)
    }

    /// One post-norm block: `LN(x + attn(x))`, then `LN(x_a + ff(x_a))`.
    #[allow(clippy::too_many_arguments)]
    pub fn layer_forward<R: Rng>(
        &self,
        g: &mut Graph,
        layer: usize,
        x: Var,
        positions: &[usize],
        training: bool,
        rng: &mut R,
        trace: Option<&mut Vec<Var>>,
    ) -> Result<Var> {
        let l = self.layer_ref(layer)?;
        let a = self.attention(g, l, x, positions, training, rng, trace)?;
        let a = g.dropout(a, self.config.dropout, training, rng)?;
        let xa = self.residual_norm(g, a, x, &l.ln1)?;
        let f = self.feed_forward(g, l, xa)?;
        let f = g.dropout(f, self.config.dropout, training, rng)?;
        self.residual_norm(g, f, xa, &l.ln2)
    }

    /// Runs the layer stack over `x: [n, model_dim]`.
    pub fn run_layers<R: Rng>(
        &self,
        g: &mut Graph,
        mut x: Var,
        positions: &[usize],
        training: bool,
        rng: &mut R,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        for i in 0..self.layers.len() {
            let rec = trace.as_deref_mut().map(|t| {
                t.layers.push(Vec::new());
                t.layers.last_mut().expect("pushed")
            });
            x = self.layer_forward(g, i, x, positions, training, rng, rec)?;
        }
        Ok(x)
    }

    /// Sequence embeddings after the layer stack, before any head.
    pub fn hidden<R: Rng>(
        &self,
        g: &mut Graph,
        tokens: Var,
        mode: EncodeMode,
        training: bool,
        rng: &mut R,
        trace: Option<&mut AttentionTrace>,
    ) -> Result<Var> {
        let shape = g.shape(tokens).to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::Contract("encode needs a non-empty token matrix".into()));
        }
        if shape[1] != self.config.input_dim {
            return Err(Error::dims("encode", &shape, &[shape[0], self.config.input_dim]));
        }
        let e = self.embed(g, tokens)?;
        let x = match mode {
            EncodeMode::Classify => {
                let c = g.param(self.cls_token);
                g.concat_rows(&[c, e])?
            }
            EncodeMode::Reconstruct => e,
        };
        let n = g.shape(x)[0];
        let positions: Vec<usize> = (0..n).collect();
        self.run_layers(g, x, &positions, training, rng, trace)
    }

    /// Logits `[1, n_classes]` or reconstructions `[n, input_dim]`.
    pub fn encode<R: Rng>(
        &self,
        g: &mut Graph,
        tokens: Var,
        mode: EncodeMode,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let h = self.hidden(g, tokens, mode, training, rng, None)?;
        match mode {
            EncodeMode::Classify => {
                let c = g.slice_rows(h, 0, 1)?;
                self.head.forward(g, c)
            }
            EncodeMode::Reconstruct => {
                let r = self.recon.0.forward(g, h)?;
                let r = g.gelu(r);
                self.recon.1.forward(g, r)
            }
        }
    }

    /// Class-token attention row per head at `layer`, shape
    /// `[n_heads, n_tokens + 1]` (or `[n_heads, n_tokens]` without the class
    /// column, renormalised).
    pub fn attention_scores(&self, store: &ParamStore, tokens: &[f64], n_tokens: usize, layer: usize) -> Result<Vec<Vec<f64>>> {
        self.layer_ref(layer)?;
        let mut g = Graph::with_params(store);
        let t = g.constant(&[n_tokens, self.config.input_dim], tokens.to_vec())?;
        let mut trace = AttentionTrace::default();
        let mut rng = crate::rng::derive_rng(0, 0, 0);
        self.hidden(&mut g, t, EncodeMode::Classify, false, &mut rng, Some(&mut trace))?;
        let n = n_tokens + 1;
        Ok(trace.layers[layer]
            .iter()
            .map(|&p| {
                let row = &g.value(p)[..n];
                if self.config.scores_include_cls {
                    row.to_vec()
                } else {
                    let s: f64 = row[1..].iter().sum();
                    row[1..].iter().map(|v| v / s).collect()
                }
            })
            .collect())
    }
}
