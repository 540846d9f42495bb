//! Building blocks shared by every stage: parameter binding, linear layers,
//! multi-head attention, transformer layers and positional encodings.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};

use rand::Rng;
use soc_tensor::{Tape, Tensor, Var};

use crate::error::{Result, SocError};
use crate::params::ParamStore;

/// A tape plus the parameter store it reads from. Each named parameter is
/// recorded on the tape at most once, so every use of a name shares one
/// variable (and one gradient).
pub struct Graph<'a> {
    tape: &'a mut Tape,
    params: &'a ParamStore,
    bound: HashMap<String, Var>,
    trainable: bool,
}

impl<'a> Graph<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a ParamStore, trainable: bool) -> Self {
        Self { tape, params, bound: HashMap::new(), trainable }
    }

    /// A graph whose parameters are already recorded on `tape` (used when an
    /// outside harness owns the leaves, e.g. finite-difference checks).
    pub fn with_bindings(tape: &'a mut Tape, params: &'a ParamStore, bound: HashMap<String, Var>) -> Self {
        Self { tape, params, bound, trainable: true }
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name).ok_or_else(|| SocError::MissingParam(name.to_string()))?;
        let v = if self.trainable { self.tape.leaf(t.clone()) } else { self.tape.constant(t.clone()) };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bindings(&self) -> &HashMap<String, Var> {
        &self.bound
    }
}

impl Deref for Graph<'_> {
    type Target = Tape;
    fn deref(&self) -> &Tape {
        self.tape
    }
}

impl DerefMut for Graph<'_> {
    fn deref_mut(&mut self) -> &mut Tape {
        self.tape
    }
}

pub fn xavier_uniform<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// He-normal initialization for convolutions followed by relu.
pub fn kaiming_normal<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub name: String,
    pub input: usize,
    pub output: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, input: usize, output: usize) -> Self {
        Self { name: name.into(), input, output }
    }

    fn weight_key(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_key(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert(self.weight_key(), xavier_uniform(&[self.input, self.output], self.input, self.output, rng));
        store.insert(self.bias_key(), Tensor::zeros(&[self.output]));
    }

    /// Applies `x W + b` over the last axis of `x`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.shape(x).to_vec();
        let last = *shape.last().expect("rank >= 1");
        if last != self.input {
            return Err(SocError::Contract(format!(
                "{}: expected last axis {}, got input {shape:?}",
                self.name, self.input
            )));
        }
        let rows = g.value(x).numel() / last;
        let (w, b) = (g.param(&self.weight_key())?, g.param(&self.bias_key())?);
        let flat = g.reshape(x, &[rows, last])?;
        let y = g.matmul(flat, w)?;
        let y = g.add(y, b)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("rank >= 1") = self.output;
        Ok(g.reshape(y, &out_shape)?)
    }
}

/// Stack of linear layers with relu between them (none after the last).
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(name: &str, dims: &[usize]) -> Self {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(format!("{name}.layer{}", i + 1), w[0], w[1]))
            .collect();
        Self { layers }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.layers.iter().for_each(|l| l.init(store, rng));
    }

    pub fn forward(&self, g: &mut Graph, mut x: Var) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, x)?;
            if i + 1 < self.layers.len() {
                x = g.relu(x)?;
            }
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub name: String,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        Self { name: name.into(), dim }
    }

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(format!("{}.gamma", self.name), Tensor::ones(&[self.dim]));
        store.insert(format!("{}.beta", self.name), Tensor::zeros(&[self.dim]));
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let gamma = g.param(&format!("{}.gamma", self.name))?;
        let beta = g.param(&format!("{}.beta", self.name))?;
        Ok(g.layer_norm(x, gamma, beta)?)
    }
}

/// Scaled dot-product multi-head attention: queries from `x`, keys and
/// values from `y`, heads concatenated and projected by an output matrix.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
}

impl MultiHeadAttention {
    pub fn new(name: &str, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(SocError::Config(crate::error::ConfigError::Invalid {
                key: "heads".into(),
                reason: format!("{name}: dimension {dim} is not divisible by {heads} heads"),
            }));
        }
        Ok(Self {
            name: name.to_string(),
            dim,
            heads,
            q: Linear::new(format!("{name}.q"), dim, dim),
            k: Linear::new(format!("{name}.k"), dim, dim),
            v: Linear::new(format!("{name}.v"), dim, dim),
            out: Linear::new(format!("{name}.out"), dim, dim),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for l in [&self.q, &self.k, &self.v, &self.out] {
            l.init(store, rng);
        }
    }

    /// `[B, n, D] -> [B * h, n, D / h]`
    fn split_heads(&self, g: &mut Graph, x: Var, batch: usize, n: usize) -> Result<Var> {
        let dh = self.dim / self.heads;
        let x = g.reshape(x, &[batch, n, self.heads, dh])?;
        let x = g.permute(x, &[0, 2, 1, 3])?;
        Ok(g.reshape(x, &[batch * self.heads, n, dh])?)
    }

    /// Returns the attended output (shaped like `x`) and the attention
    /// weights `[B * h, n, m]`. Accepts `[n, D]` / `[m, D]` or batched
    /// `[B, n, D]` / `[B, m, D]` inputs.
    pub fn forward_with_weights(&self, g: &mut Graph, x: Var, y: Var) -> Result<(Var, Var)> {
        let (sx, sy) = (g.shape(x).to_vec(), g.shape(y).to_vec());
        let (batch, n, m) = match (sx.as_slice(), sy.as_slice()) {
            (&[n, d1], &[m, d2]) if d1 == self.dim && d2 == self.dim => (1, n, m),
            (&[b1, n, d1], &[b2, m, d2]) if b1 == b2 && d1 == self.dim && d2 == self.dim => (b1, n, m),
            _ => {
                return Err(SocError::Contract(format!(
                    "{}: cannot attend from {sx:?} to {sy:?} at width {}",
                    self.name, self.dim
                )))
            }
        };
        let dh = self.dim / self.heads;
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, y)?;
        let v = self.v.forward(g, y)?;
        let q = self.split_heads(g, q, batch, n)?;
        let k = self.split_heads(g, k, batch, m)?;
        let v = self.split_heads(g, v, batch, m)?;
        let kt = g.transpose(k)?;
        let scores = g.bmm(q, kt)?;
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
        let attn = g.softmax(scores, 2)?;
        let ctx = g.bmm(attn, v)?;
        let ctx = g.reshape(ctx, &[batch, self.heads, n, dh])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &sx)?;
        let out = self.out.forward(g, ctx)?;
        Ok((out, attn))
    }

    pub fn forward(&self, g: &mut Graph, x: Var, y: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, x, y)?.0)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    mlp: Mlp,
}

impl FeedForward {
    pub fn new(name: &str, dim: usize, hidden: usize) -> Self {
        Self { mlp: Mlp::new(name, &[dim, hidden, dim]) }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.mlp.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        self.mlp.forward(g, x)
    }
}

/// Post-norm transformer encoder layer (self-attention + feed-forward).
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    attn: MultiHeadAttention,
    ffn: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(&format!("{name}.self_attn"), dim, heads)?,
            ffn: FeedForward::new(&format!("{name}.ffn"), dim, hidden),
            norm1: LayerNorm::new(format!("{name}.norm1"), dim),
            norm2: LayerNorm::new(format!("{name}.norm2"), dim),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.attn.init(store, rng);
        self.ffn.init(store, rng);
        self.norm1.init(store);
        self.norm2.init(store);
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let a = self.attn.forward(g, x, x)?;
        let x = g.add(x, a)?;
        let x = self.norm1.forward(g, x)?;
        let f = self.ffn.forward(g, x)?;
        let x = g.add(x, f)?;
        self.norm2.forward(g, x)
    }
}

/// Post-norm transformer decoder layer: query self-attention, cross-attention
/// into a memory, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    self_attn: MultiHeadAttention,
    cross_attn: MultiHeadAttention,
    ffn: FeedForward,
    norm1: LayerNorm,
    norm2: LayerNorm,
    norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(name: &str, dim: usize, heads: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(&format!("{name}.self_attn"), dim, heads)?,
            cross_attn: MultiHeadAttention::new(&format!("{name}.cross_attn"), dim, heads)?,
            ffn: FeedForward::new(&format!("{name}.ffn"), dim, hidden),
            norm1: LayerNorm::new(format!("{name}.norm1"), dim),
            norm2: LayerNorm::new(format!("{name}.norm2"), dim),
            norm3: LayerNorm::new(format!("{name}.norm3"), dim),
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.self_attn.init(store, rng);
        self.cross_attn.init(store, rng);
        self.ffn.init(store, rng);
        self.norm1.init(store);
        self.norm2.init(store);
        self.norm3.init(store);
    }

    pub fn forward(&self, g: &mut Graph, queries: Var, memory: Var) -> Result<Var> {
        let a = self.self_attn.forward(g, queries, queries)?;
        let q = g.add(queries, a)?;
        let q = self.norm1.forward(g, q)?;
        let c = self.cross_attn.forward(g, q, memory)?;
        let q = g.add(q, c)?;
        let q = self.norm2.forward(g, q)?;
        let f = self.ffn.forward(g, q)?;
        let q = g.add(q, f)?;
        self.norm3.forward(g, q)
    }
}

/// Fixed sinusoidal encoding of positions `0..n`, shape `[n, dim]`.
pub fn sine_encoding_1d(n: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[n, dim], |i| {
        let (pos, c) = (i / dim, i % dim);
        let freq = 10000f64.powf((2 * (c / 2)) as f64 / dim as f64);
        let angle = pos as f64 / freq;
        if c % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

/// Fixed 2-d sinusoidal encoding of an `h x w` grid, shape `[h * w, dim]`:
/// the first half of the channels encodes the row, the second the column,
/// each from normalized coordinates scaled to `[0, 2 pi]`.
pub fn sine_encoding_2d(h: usize, w: usize, dim: usize) -> Tensor {
    let half = dim / 2;
    Tensor::from_fn(&[h * w, dim], |i| {
        let (p, c) = (i / dim, i % dim);
        let (y, x) = (p / w, p % w);
        let (coord, c) = if c < half {
            ((y as f64 + 0.5) / h as f64, c)
        } else {
            ((x as f64 + 0.5) / w as f64, c - half)
        };
        let freq = 10000f64.powf((2 * (c / 2)) as f64 / half.max(1) as f64);
        let angle = coord * std::f64::consts::TAU / freq;
        if c % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn attention_fixture(dim: usize, heads: usize) -> (MultiHeadAttention, ParamStore) {
        let mha = MultiHeadAttention::new("attn", dim, heads).unwrap();
        let mut store = ParamStore::new();
        mha.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        (mha, store)
    }

    #[test]
    fn indivisible_heads_are_a_config_error() {
        assert!(matches!(MultiHeadAttention::new("m", 10, 4), Err(SocError::Config(_))));
    }

    #[test]
    fn single_key_gives_identical_rows() {
        let (mha, store) = attention_fixture(8, 2);
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = g.constant(Tensor::randn(&[5, 8], 1.0, &mut rng));
        let y = g.constant(Tensor::randn(&[1, 8], 1.0, &mut rng));
        let out = mha.forward(&mut g, x, y).unwrap();
        let rows: Vec<&[f64]> = g.data(out).chunks(8).collect();
        for r in &rows[1..] {
            for (a, b) in r.iter().zip(rows[0]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_keys_split_weight_equally() {
        let (mha, store) = attention_fixture(8, 4);
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = g.constant(Tensor::randn(&[3, 8], 1.0, &mut rng));
        let key = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let other = Tensor::randn(&[1, 8], 1.0, &mut rng);
        let mut data = key.data().to_vec();
        data.extend_from_slice(key.data());
        data.extend_from_slice(other.data());
        let y = g.constant(Tensor::new(&[3, 8], data).unwrap());
        let (_, w) = mha.forward_with_weights(&mut g, x, y).unwrap();
        for row in g.data(w).chunks(3) {
            assert!((row[0] - row[1]).abs() < 1e-15);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shared_names_bind_once() {
        let lin = Linear::new("shared", 4, 4);
        let mut store = ParamStore::new();
        lin.init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, true);
        let a = g.param("shared.weight").unwrap();
        let b = g.param("shared.weight").unwrap();
        assert_eq!(a, b);
        assert!(matches!(g.param("nope"), Err(SocError::MissingParam(_))));
    }

    #[test]
    fn encodings_are_bounded() {
        let e = sine_encoding_2d(4, 4, 8);
        assert_eq!(e.shape(), &[16, 8]);
        assert!(e.data().iter().all(|v| v.abs() <= 1.0));
        assert_eq!(sine_encoding_1d(3, 4).at(&[0, 1]), 1.0);
    }
}
