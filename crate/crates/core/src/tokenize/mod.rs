//! Turning raw windows into token sequences.

mod fft;

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, ParamStore, Var};
use crate::error::{Error, Result};

pub use fft::{fft, fft_complex, ifft};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerId {
    Constant,
    Cnn,
    Fourier,
}

impl fmt::Display for TokenizerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TokenizerId::Constant => "constant",
            TokenizerId::Cnn => "cnn",
            TokenizerId::Fourier => "fourier",
        })
    }
}

fn default_d() -> usize {
    8
}
fn default_modes() -> usize {
    40
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TokenizerConfig {
    Constant {
        #[serde(default = "default_d")]
        d: usize,
    },
    Cnn,
    Fourier {
        #[serde(default = "default_modes")]
        n_modes: usize,
        /// Store the bin index divided by `L/2` instead of the raw index.
        #[serde(default = "default_true")]
        normalize_frequency: bool,
    },
}

impl TokenizerConfig {
    pub fn constant(d: usize) -> Self {
        TokenizerConfig::Constant { d }
    }

    pub fn fourier() -> Self {
        TokenizerConfig::Fourier {
            n_modes: 40,
            normalize_frequency: true,
        }
    }

    pub fn id(&self) -> TokenizerId {
        match self {
            TokenizerConfig::Constant { .. } => TokenizerId::Constant,
            TokenizerConfig::Cnn => TokenizerId::Cnn,
            TokenizerConfig::Fourier { .. } => TokenizerId::Fourier,
        }
    }

    pub fn token_dim(&self) -> usize {
        match self {
            TokenizerConfig::Constant { d } => *d,
            TokenizerConfig::Cnn => CNN_CHANNELS,
            TokenizerConfig::Fourier { .. } => 3,
        }
    }

    /// Whether the tokenizer has learned weights.
    pub fn is_trainable(&self) -> bool {
        matches!(self, TokenizerConfig::Cnn)
    }

    /// Number of tokens produced for a window of `len` points.
    pub fn n_tokens(&self, len: usize) -> usize {
        match self {
            TokenizerConfig::Constant { d } => len / d,
            TokenizerConfig::Cnn => len / 4,
            TokenizerConfig::Fourier { n_modes, .. } => *n_modes,
        }
    }
}

/// Tokens stored row-major as `[n_tokens, token_dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub tokens: Vec<f64>,
    pub n_tokens: usize,
    pub token_dim: usize,
    pub tokenizer: TokenizerId,
    pub source_length: usize,
}

impl TokenSequence {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.tokens[i * self.token_dim..(i + 1) * self.token_dim]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_tokens, self.token_dim)
    }

    /// `token,c0,c1,...` with one line per token.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("token");
        for c in 0..self.token_dim {
            out.push_str(&format!(",c{c}"));
        }
        out.push('\n');
        for i in 0..self.n_tokens {
            out.push_str(&i.to_string());
            for v in self.row(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Row-major reshape of `x` into `L/d` tokens of width `d`.
pub fn tokenize_constant(x: &[f64], d: usize) -> Result<TokenSequence> {
    if d == 0 || x.is_empty() || x.len() % d != 0 {
        return Err(Error::Parameter(format!(
            "token width {d} does not divide signal length {}",
            x.len()
        )));
    }
    Ok(TokenSequence {
        tokens: x.to_vec(),
        n_tokens: x.len() / d,
        token_dim: d,
        tokenizer: TokenizerId::Constant,
        source_length: x.len(),
    })
}

/// Top `n_modes` bins of the half spectrum of `x / L` by magnitude, ties to
/// the lower bin. Each token is `(Re, Im, freq)` where `freq` is the bin
/// index, or the bin index over `L/2` when `normalize_frequency`.
pub fn tokenize_fourier(x: &[f64], n_modes: usize, normalize_frequency: bool) -> Result<TokenSequence> {
    let l = x.len();
    let half = l / 2;
    if n_modes == 0 || half + 1 < n_modes || l < 2 * n_modes {
        return Err(Error::Parameter(format!(
            "signal of length {l} has too few non-redundant bins for {n_modes} modes"
        )));
    }
    let spec = fft(x)?;
    let inv_l = 1.0 / l as f64;
    let mut bins: Vec<(usize, f64)> = (0..=half).map(|k| (k, spec[k].norm() * inv_l)).collect();
    bins.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut tokens = Vec::with_capacity(3 * n_modes);
    for &(k, _) in &bins[..n_modes] {
        let c = spec[k] * inv_l;
        let f = if normalize_frequency { k as f64 / half as f64 } else { k as f64 };
        tokens.extend_from_slice(&[c.re, c.im, f]);
    }
    Ok(TokenSequence {
        tokens,
        n_tokens: n_modes,
        token_dim: 3,
        tokenizer: TokenizerId::Fourier,
        source_length: l,
    })
}

const CNN_KERNEL: usize = 4;
const CNN_STRIDE: usize = 2;
const CNN_HIDDEN: usize = 4;
const CNN_CHANNELS: usize = 8;

/// Left padding that makes a strided conv produce exactly `len / stride`
/// outputs.
pub fn same_left_pad(len: usize, kernel: usize, stride: usize) -> usize {
    let out = len / stride;
    ((out.saturating_sub(1)) * stride + kernel).saturating_sub(len)
}

/// Two strided convolutions with a GELU between them, 1 -> 4 -> 8 channels.
#[derive(Debug, Clone)]
pub struct CnnTokenizerParams {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
}

impl CnnTokenizerParams {
    pub fn init(store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let k = CNN_KERNEL;
        Self {
            conv1_w: store.add_xavier("tokenizer.conv1.w", &[CNN_HIDDEN, 1, k], k, CNN_HIDDEN * k, rng),
            conv1_b: store.add_const("tokenizer.conv1.b", &[CNN_HIDDEN], 0.0),
            conv2_w: store.add_xavier(
                "tokenizer.conv2.w",
                &[CNN_CHANNELS, CNN_HIDDEN, k],
                CNN_HIDDEN * k,
                CNN_CHANNELS * k,
                rng,
            ),
            conv2_b: store.add_const("tokenizer.conv2.b", &[CNN_CHANNELS], 0.0),
        }
    }

    /// Looks the parameters up by name in an existing store.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let get = |n: &str| {
            store
                .id(n)
                .ok_or_else(|| Error::Parameter(format!("missing parameter {n}")))
        };
        Ok(Self {
            conv1_w: get("tokenizer.conv1.w")?,
            conv1_b: get("tokenizer.conv1.b")?,
            conv2_w: get("tokenizer.conv2.w")?,
            conv2_b: get("tokenizer.conv2.b")?,
        })
    }

    /// `x: [1, L]` -> tokens `[L/4, 8]`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let len = g.shape(x)[1];
        if len < 16 {
            return Err(Error::Parameter(format!("CNN tokenizer needs L >= 16, got {len}")));
        }
        let (w1, b1) = (g.param(self.conv1_w), g.param(self.conv1_b));
        let p1 = same_left_pad(len, CNN_KERNEL, CNN_STRIDE);
        let h = g.conv1d(x, w1, b1, CNN_STRIDE, p1, 0)?;
        let h = g.gelu(h);
        let (w2, b2) = (g.param(self.conv2_w), g.param(self.conv2_b));
        let p2 = same_left_pad(len / 2, CNN_KERNEL, CNN_STRIDE);
        let y = g.conv1d(h, w2, b2, CNN_STRIDE, p2, 0)?;
        g.transpose(y)
    }
}

/// A configured tokenizer plus any learned weights it owns.
#[derive(Debug, Clone)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub cnn: Option<CnnTokenizerParams>,
}

impl Tokenizer {
    /// Builds the tokenizer, registering CNN weights in `store` if needed.
    pub fn new(config: TokenizerConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Self {
        let cnn = config.is_trainable().then(|| CnnTokenizerParams::init(store, rng));
        Self { config, cnn }
    }

    pub fn from_store(config: TokenizerConfig, store: &ParamStore) -> Result<Self> {
        let cnn = if config.is_trainable() {
            Some(CnnTokenizerParams::from_store(store)?)
        } else {
            None
        };
        Ok(Self { config, cnn })
    }

    /// Tokenizes outside any graph. Fixed tokenizers only.
    pub fn tokenize_fixed(&self, x: &[f64]) -> Result<TokenSequence> {
        match &self.config {
            TokenizerConfig::Constant { d } => tokenize_constant(x, *d),
            TokenizerConfig::Fourier {
                n_modes,
                normalize_frequency,
            } => tokenize_fourier(x, *n_modes, *normalize_frequency),
            TokenizerConfig::Cnn => Err(Error::Contract(
                "the CNN tokenizer runs inside a graph".into(),
            )),
        }
    }

    /// Token matrix `[n_tokens, token_dim]` as a graph node.
    pub fn forward(&self, g: &mut Graph, x: &[f64]) -> Result<Var> {
        match &self.cnn {
            Some(cnn) => {
                let xv = g.constant(&[1, x.len()], x.to_vec())?;
                cnn.forward(g, xv)
            }
            None => {
                let t = self.tokenize_fixed(x)?;
                g.constant(&[t.n_tokens, t.token_dim], t.tokens)
            }
        }
    }

    /// Tokens as plain values; for the CNN this runs a throwaway graph.
    pub fn tokenize(&self, store: &ParamStore, x: &[f64]) -> Result<TokenSequence> {
        if self.cnn.is_none() {
            return self.tokenize_fixed(x);
        }
        let mut g = Graph::with_params(store);
        let v = self.forward(&mut g, x)?;
        let shape = g.shape(v).to_vec();
        Ok(TokenSequence {
            tokens: g.value(v).to_vec(),
            n_tokens: shape[0],
            token_dim: shape[1],
            tokenizer: TokenizerId::Cnn,
            source_length: x.len(),
        })
    }
}

/// Tokenizes with a freshly initialised CNN when `config` is the CNN.
pub fn tokenize_cnn(x: &[f64], store: &ParamStore, params: &CnnTokenizerParams) -> Result<TokenSequence> {
    let tok = Tokenizer {
        config: TokenizerConfig::Cnn,
        cnn: Some(params.clone()),
    };
    tok.tokenize(store, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn signal(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn constant_shapes() {
        let x = signal(1600, 0);
        let t = tokenize_constant(&x, 8).unwrap();
        assert_eq!(t.shape(), (200, 8));
        assert_eq!(t.tokens, x);
        assert_eq!(tokenize_constant(&x, 1600).unwrap().shape(), (1, 1600));
        assert!(matches!(tokenize_constant(&x, 7), Err(Error::Parameter(_))));
    }

    #[test]
    fn fourier_sinusoid_and_ordering() {
        let n = 1600;
        let x: Vec<f64> = (0..n)
            .map(|t| (2.0 * PI * 7.0 * t as f64 / n as f64 + 0.3).sin())
            .collect();
        let t = tokenize_fourier(&x, 40, false).unwrap();
        assert_eq!(t.shape(), (40, 3));
        assert_eq!(t.row(0)[2], 7.0);
        let amp = |i: usize| t.row(i)[0].hypot(t.row(i)[1]);
        assert!((amp(0) - 0.5).abs() < 1e-12);
        for i in 0..39 {
            assert!(amp(i) >= amp(i + 1));
        }
        // the remaining bins are all ~0, so ties resolve to ascending bins
        assert!(t.row(1)[2] < t.row(2)[2] || amp(1) != amp(2));
        let normed = tokenize_fourier(&x, 40, true).unwrap();
        assert!((normed.row(0)[2] - 7.0 / 800.0).abs() < 1e-15);
        assert!(tokenize_fourier(&signal(79, 1), 40, true).is_err());
        assert_eq!(tokenize_fourier(&signal(80, 1), 40, true).unwrap().shape(), (40, 3));
    }

    #[test]
    fn cnn_shapes_and_zero_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let p = CnnTokenizerParams::init(&mut store, &mut rng);
        let x = signal(1600, 2);
        assert_eq!(tokenize_cnn(&x, &store, &p).unwrap().shape(), (400, 8));
        for id in [p.conv1_w, p.conv1_b, p.conv2_w, p.conv2_b] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let t = tokenize_cnn(&x, &store, &p).unwrap();
        assert!(t.tokens.iter().all(|&v| v == 0.0));
        assert!(tokenize_cnn(&signal(15, 0), &store, &p).is_err());
    }

    #[test]
    fn cnn_length_is_quarter_for_random_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let p = CnnTokenizerParams::init(&mut store, &mut rng);
        for _ in 0..20 {
            let l = rng.random_range(16..600);
            let t = tokenize_cnn(&signal(l, l as u64), &store, &p).unwrap();
            assert_eq!(t.n_tokens, (l / 2) / 2, "L = {l}");
        }
    }

    #[test]
    fn csv_dump() {
        let t = tokenize_constant(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(t.to_csv(), "token,c0,c1\n0,1,2\n1,3,4\n");
    }
}
