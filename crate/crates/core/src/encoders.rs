//! Toy backbones: a strided convolutional pyramid for frames and a small
//! transformer over word embeddings for the referring expression.

use std::collections::HashMap;

use rand::Rng;
use soc_tensor::{Tensor, Var};

use crate::error::{ConfigError, Result, SocError};
use crate::nn::{kaiming_normal, EncoderLayer, Graph};
use crate::params::ParamStore;
use crate::synth::LEXICON;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const MAX_TOKENS: usize = 64;
/// Output channels of the stem and of the four pyramid stages.
pub const STEM_CHANNELS: usize = 8;
pub const STAGE_CHANNELS: [usize; 4] = [16, 32, 64, 128];

/// Word-to-id table with the reserved `PAD` and `UNK` entries first.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn new<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = Self { words: Vec::new(), ids: HashMap::new() };
        for w in ["<pad>", "<unk>"].into_iter().chain(words) {
            if !v.ids.contains_key(w) {
                v.ids.insert(w.to_string(), v.words.len());
                v.words.push(w.to_string());
            }
        }
        v
    }

    /// The vocabulary of the synthetic expression templates.
    pub fn synthetic() -> Self {
        Self::new(LEXICON.iter().copied())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    /// Lower-cases, strips punctuation and maps words to ids; unknown words
    /// become `UNK`.
    pub fn encode(&self, text: &str) -> Result<TextExpression> {
        let ids: Vec<usize> = text
            .split_whitespace()
            .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
            .filter(|w| !w.is_empty())
            .map(|w| self.id(&w))
            .collect();
        TextExpression::new(ids, self.len())
    }
}

/// Token ids of one expression: `1 <= L <= 64`, every id in the vocabulary.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextExpression {
    ids: Vec<usize>,
}

impl TextExpression {
    pub fn new(ids: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if ids.is_empty() || ids.len() > MAX_TOKENS {
            return Err(SocError::Contract(format!(
                "expressions need 1..={MAX_TOKENS} tokens, got {}",
                ids.len()
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab_size) {
            return Err(SocError::Contract(format!("token id {bad} outside a vocabulary of {vocab_size}")));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Levels `F^v_1..F^v_4`, each `[T, C_i, H0 / 2^(i+1), W0 / 2^(i+1)]`.
#[derive(Clone, Copy, Debug)]
pub struct FeaturePyramid {
    pub levels: [Var; 4],
}

/// Word states `[L, C_t]` and their mean, the sentence feature `[1, C_t]`.
#[derive(Clone, Copy, Debug)]
pub struct TextFeatures {
    pub words: Var,
    pub sentence: Var,
}

#[derive(Clone, Debug)]
pub struct VisualEncoder;

impl VisualEncoder {
    fn layers() -> impl Iterator<Item = (String, usize, usize)> {
        let names = std::iter::once("stem".to_string()).chain((1..=4).map(|i| format!("stage{i}")));
        let ins = std::iter::once(3).chain(std::iter::once(STEM_CHANNELS)).chain(STAGE_CHANNELS[..3].iter().copied());
        let outs = std::iter::once(STEM_CHANNELS).chain(STAGE_CHANNELS.iter().copied());
        names.zip(ins).zip(outs).map(|((n, i), o)| (format!("encoders.visual.{n}"), i, o))
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        for (name, cin, cout) in Self::layers() {
            store.insert(format!("{name}.weight"), kaiming_normal(&[cout, cin, 3, 3], cin * 9, rng));
            store.insert(format!("{name}.bias"), Tensor::zeros(&[cout]));
        }
    }

    /// `clip`: `[T, 3, H0, W0]` with `H0`, `W0` multiples of 32.
    pub fn forward(&self, g: &mut Graph, clip: Var) -> Result<FeaturePyramid> {
        let shape = g.shape(clip).to_vec();
        match shape.as_slice() {
            [t, 3, h, w] if *t >= 1 && h % 32 == 0 && w % 32 == 0 && *h > 0 && *w > 0 => {}
            _ => {
                return Err(ConfigError::Invalid {
                    key: "height/width".into(),
                    reason: format!("clip shape {shape:?} must be [T, 3, H, W] with H, W multiples of 32"),
                }
                .into())
            }
        }
        let mut x = clip;
        let mut levels = Vec::with_capacity(4);
        for (i, (name, _, _)) in Self::layers().enumerate() {
            let w = g.param(&format!("{name}.weight"))?;
            let b = g.param(&format!("{name}.bias"))?;
            x = g.conv2d(x, w, Some(b), 2, 1)?;
            x = g.relu(x)?;
            if i > 0 {
                levels.push(x);
            }
        }
        Ok(FeaturePyramid { levels: [levels[0], levels[1], levels[2], levels[3]] })
    }
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub dim: usize,
    pub vocab_size: usize,
    layers: Vec<EncoderLayer>,
}

impl TextEncoder {
    pub fn new(dim: usize, heads: usize, hidden: usize, num_layers: usize, vocab_size: usize) -> Result<Self> {
        let layers = (1..=num_layers)
            .map(|k| EncoderLayer::new(&format!("encoders.text.layer{k}"), dim, heads, hidden))
            .collect::<Result<_>>()?;
        Ok(Self { dim, vocab_size, layers })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        store.insert("encoders.text.embedding", Tensor::randn(&[self.vocab_size, self.dim], 1.0, rng));
        store.insert("encoders.text.position", Tensor::randn(&[MAX_TOKENS, self.dim], 0.1, rng));
        self.layers.iter().for_each(|l| l.init(store, rng));
    }

    /// Embedding lookup only: one row per token, in token order.
    pub fn word_embeddings(&self, g: &mut Graph, expr: &TextExpression) -> Result<Var> {
        let table = g.param("encoders.text.embedding")?;
        Ok(g.embedding(table, expr.ids())?)
    }

    pub fn forward(&self, g: &mut Graph, expr: &TextExpression) -> Result<TextFeatures> {
        let x = self.word_embeddings(g, expr)?;
        let pos = g.param("encoders.text.position")?;
        let pos = g.narrow(pos, 0, 0, expr.len())?;
        let mut x = g.add(x, pos)?;
        for layer in &self.layers {
            x = layer.forward(g, x)?;
        }
        let sentence = g.mean_axis(x, 0)?;
        let sentence = g.reshape(sentence, &[1, self.dim])?;
        Ok(TextFeatures { words: x, sentence })
    }
}
