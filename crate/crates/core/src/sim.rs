//! Semantic integration: per-frame aggregation of the fused multi-scale
//! tokens into frame-level object queries, then the video-level object
//! cluster that groups those queries across time into video-level queries
//! seeded by the sentence feature.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use soc_tensor::{Tensor, Var};

use crate::error::{Result, SocError};
use crate::fusion::FusedFeatures;
use crate::nn::{sine_encoding_1d, sine_encoding_2d, DecoderLayer, EncoderLayer, Graph, Linear};
use crate::params::ParamStore;

/// Which stages of the video-level object cluster are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum VocStructure {
    None,
    EncoderOnly,
    DecoderOnly,
    Both,
}

impl VocStructure {
    pub const ALL: [VocStructure; 4] = [Self::None, Self::EncoderOnly, Self::DecoderOnly, Self::Both];

    pub fn has_encoder(self) -> bool {
        matches!(self, Self::EncoderOnly | Self::Both)
    }

    pub fn has_decoder(self) -> bool {
        matches!(self, Self::DecoderOnly | Self::Both)
    }
}

impl FromStr for VocStructure {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "none" => Ok(Self::None),
            "encoder_only" => Ok(Self::EncoderOnly),
            "decoder_only" => Ok(Self::DecoderOnly),
            "both" => Ok(Self::Both),
            _ => Err(()),
        }
    }
}

impl fmt::Display for VocStructure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::EncoderOnly => "encoder_only",
            Self::DecoderOnly => "decoder_only",
            Self::Both => "both",
        })
    }
}

/// Encoded per-scale visual tokens `[T, H_i W_i, D]` with their sizes.
#[derive(Clone, Debug)]
pub struct EncodedVisual {
    pub scales: Vec<Var>,
    pub sizes: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct SimDims {
    pub dim: usize,
    pub text_dim: usize,
    pub heads: usize,
    pub hidden: usize,
    pub num_queries: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub voc_layers: usize,
}

#[derive(Clone, Debug)]
pub struct Sim {
    pub dims: SimDims,
    pub structure: VocStructure,
    encoder: Vec<EncoderLayer>,
    decoder: Vec<DecoderLayer>,
    voc_encoder: Vec<EncoderLayer>,
    voc_decoder: Vec<DecoderLayer>,
    sentence_proj: Linear,
}

/// Number of fused scales, each with its own learned scale embedding.
const NUM_SCALES: usize = 3;

impl Sim {
    pub fn new(dims: SimDims, structure: VocStructure) -> Result<Self> {
        let enc = |prefix: &str, n: usize| -> Result<Vec<EncoderLayer>> {
            (1..=n).map(|k| EncoderLayer::new(&format!("{prefix}.layer{k}"), dims.dim, dims.heads, dims.hidden)).collect()
        };
        let dec = |prefix: &str, n: usize| -> Result<Vec<DecoderLayer>> {
            (1..=n).map(|k| DecoderLayer::new(&format!("{prefix}.layer{k}"), dims.dim, dims.heads, dims.hidden)).collect()
        };
        Ok(Self {
            encoder: enc("sim.encoder", dims.encoder_layers)?,
            decoder: dec("sim.decoder", dims.decoder_layers)?,
            voc_encoder: enc("sim.voc.encoder", dims.voc_layers)?,
            voc_decoder: dec("sim.voc.decoder", dims.voc_layers)?,
            sentence_proj: Linear::new("sim.voc.sentence_proj", dims.text_dim, dims.dim),
            structure,
            dims,
        })
    }

    /// Every parameter is created regardless of `structure`, so checkpoints
    /// of all ablation variants share one layout.
    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.dims.dim;
        store.insert("sim.scale_embed", Tensor::randn(&[NUM_SCALES, d], 0.1, rng));
        store.insert("sim.query_embed", Tensor::randn(&[self.dims.num_queries, d], 1.0, rng));
        store.insert("sim.voc.query_pos", Tensor::randn(&[self.dims.num_queries, d], 1.0, rng));
        self.sentence_proj.init(store, rng);
        for l in self.encoder.iter().chain(&self.voc_encoder) {
            l.init(store, rng);
        }
        for l in self.decoder.iter().chain(&self.voc_decoder) {
            l.init(store, rng);
        }
    }

    /// Per frame: concatenates the scales (plus positional and scale
    /// embeddings), encodes them with self-attention, and decodes the
    /// learned queries against them. Frames never interact.
    pub fn frame_content_aggregation(&self, g: &mut Graph, fused: &FusedFeatures) -> Result<(EncodedVisual, Var)> {
        let d = self.dims.dim;
        if fused.visual.len() != NUM_SCALES {
            return Err(SocError::Contract(format!("expected {NUM_SCALES} fused scales, got {}", fused.visual.len())));
        }
        let t = g.shape(fused.visual[0])[0];
        let scale_embed = g.param("sim.scale_embed")?;
        let mut tokens = Vec::with_capacity(NUM_SCALES);
        for (s, (&v, &(h, w))) in fused.visual.iter().zip(&fused.sizes).enumerate() {
            let pos = g.constant(sine_encoding_2d(h, w, d));
            let emb = g.narrow(scale_embed, 0, s, 1)?;
            let pos = g.add(pos, emb)?;
            tokens.push(g.add(v, pos)?);
        }
        let mut x = g.concat(&tokens, 1)?;
        for layer in &self.encoder {
            x = layer.forward(g, x)?;
        }
        let mut scales = Vec::with_capacity(NUM_SCALES);
        let mut offset = 0;
        for &(h, w) in &fused.sizes {
            scales.push(g.narrow(x, 1, offset, h * w)?);
            offset += h * w;
        }
        let queries = g.param("sim.query_embed")?;
        let mut q = g.broadcast_to(queries, &[t, self.dims.num_queries, d])?;
        for layer in &self.decoder {
            q = layer.forward(g, q, x)?;
        }
        Ok((EncodedVisual { scales, sizes: fused.sizes.clone() }, q))
    }

    /// Groups frame queries `[T, N_q, D]` into video queries `[N_q, D]`.
    /// Returns `None` when the cluster is disabled.
    pub fn video_object_cluster(&self, g: &mut Graph, frame_q: Var, sentence: Var) -> Result<Option<Var>> {
        if self.structure == VocStructure::None {
            return Ok(None);
        }
        let (t, n, d) = match g.shape(frame_q) {
            &[t, n, d] if d == self.dims.dim => (t, n, d),
            s => return Err(SocError::Contract(format!("frame queries must be [T, N_q, {}], got {s:?}", self.dims.dim))),
        };
        let temporal = g.constant(sine_encoding_1d(t, d).reshaped(&[t, 1, d])?);
        let x = g.add(frame_q, temporal)?;
        let mut x = g.reshape(x, &[t * n, d])?;
        if self.structure.has_encoder() {
            for layer in &self.voc_encoder {
                x = layer.forward(g, x)?;
            }
        }
        if !self.structure.has_decoder() {
            let x = g.reshape(x, &[t, n, d])?;
            return Ok(Some(g.mean_axis(x, 0)?));
        }
        let s = self.sentence_proj.forward(g, sentence)?;
        let pos = g.param("sim.voc.query_pos")?;
        let mut v = g.add(pos, s)?;
        for layer in &self.voc_decoder {
            v = layer.forward(g, v, x)?;
        }
        Ok(Some(v))
    }

    /// Video-level queries for a disabled cluster: zeros, which makes the
    /// broadcast step an identity.
    pub fn zero_video_queries(&self, g: &mut Graph) -> Var {
        g.constant(Tensor::zeros(&[self.dims.num_queries, self.dims.dim]))
    }
}

/// Adds the video query of each slot to that slot in every frame.
pub fn broadcast_enhance(g: &mut Graph, frame_q: Var, video_q: Var) -> Result<Var> {
    let (fs, vs) = (g.shape(frame_q).to_vec(), g.shape(video_q).to_vec());
    match (fs.as_slice(), vs.as_slice()) {
        (&[_, n, d], &[nv, dv]) if n == nv && d == dv => Ok(g.add(frame_q, video_q)?),
        _ => Err(SocError::Contract(format!(
            "video queries {vs:?} do not match frame queries {fs:?} (N_v must equal N_q)"
        ))),
    }
}
