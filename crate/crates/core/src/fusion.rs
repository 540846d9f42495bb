//! Two-stream multi-modal fusion: words gate the visual tokens
//! (language-to-vision) and visual tokens reorganize the words
//! (vision-to-language), at pyramid scales 2-4 with attention weights
//! shared across scales.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use soc_tensor::Var;

use crate::encoders::{FeaturePyramid, STAGE_CHANNELS};
use crate::error::Result;
use crate::nn::{Graph, Linear, MultiHeadAttention};
use crate::params::ParamStore;

/// Which fusion streams are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FusionStrategy {
    None,
    V2L,
    L2V,
    Both,
}

impl FusionStrategy {
    pub const ALL: [FusionStrategy; 4] = [Self::None, Self::V2L, Self::L2V, Self::Both];

    pub fn language_to_vision(self) -> bool {
        matches!(self, Self::L2V | Self::Both)
    }

    pub fn vision_to_language(self) -> bool {
        matches!(self, Self::V2L | Self::Both)
    }
}

impl FromStr for FusionStrategy {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "none" => Ok(Self::None),
            "v2l" => Ok(Self::V2L),
            "l2v" => Ok(Self::L2V),
            "both" => Ok(Self::Both),
            _ => Err(()),
        }
    }
}

impl fmt::Display for FusionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::V2L => "v2l",
            Self::L2V => "l2v",
            Self::Both => "both",
        })
    }
}

/// Pyramid levels (1-based) that take part in fusion.
pub const FUSED_LEVELS: [usize; 3] = [2, 3, 4];

/// Per fused scale: visual tokens `[T, H_i W_i, D]` and words `[L, D]`,
/// plus the spatial size of each scale.
#[derive(Clone, Debug)]
pub struct FusedFeatures {
    pub visual: Vec<Var>,
    pub textual: Vec<Var>,
    pub sizes: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
pub struct Fusion {
    pub strategy: FusionStrategy,
    pub dim: usize,
    visual_proj: Vec<Linear>,
    text_proj: Linear,
    l2v: MultiHeadAttention,
    v2l: MultiHeadAttention,
}

impl Fusion {
    pub fn new(strategy: FusionStrategy, dim: usize, text_dim: usize, heads: usize) -> Result<Self> {
        let visual_proj = FUSED_LEVELS
            .iter()
            .map(|&i| Linear::new(format!("fusion.visual_proj.level{i}"), STAGE_CHANNELS[i - 1], dim))
            .collect();
        Ok(Self {
            strategy,
            dim,
            visual_proj,
            text_proj: Linear::new("fusion.text_proj", text_dim, dim),
            l2v: MultiHeadAttention::new("fusion.l2v", dim, heads)?,
            v2l: MultiHeadAttention::new("fusion.v2l", dim, heads)?,
        })
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        self.visual_proj.iter().for_each(|l| l.init(store, rng));
        self.text_proj.init(store, rng);
        self.l2v.init(store, rng);
        self.v2l.init(store, rng);
    }

    /// Projects level `i` to `[T, H W, D]` tokens (a 1x1 convolution applied
    /// channel-last).
    fn project_level(&self, g: &mut Graph, level: Var, proj: &Linear) -> Result<(Var, (usize, usize))> {
        let s = g.shape(level).to_vec();
        let (t, c, h, w) = (s[0], s[1], s[2], s[3]);
        let x = g.permute(level, &[0, 2, 3, 1])?;
        let x = g.reshape(x, &[t, h * w, c])?;
        Ok((proj.forward(g, x)?, (h, w)))
    }

    /// Projected inputs before any attention: visual tokens per fused scale
    /// and the projected words.
    pub fn project(&self, g: &mut Graph, pyramid: &FeaturePyramid, words: Var) -> Result<(Vec<Var>, Vec<(usize, usize)>, Var)> {
        let mut visual = Vec::with_capacity(FUSED_LEVELS.len());
        let mut sizes = Vec::with_capacity(FUSED_LEVELS.len());
        for (k, &i) in FUSED_LEVELS.iter().enumerate() {
            let (v, hw) = self.project_level(g, pyramid.levels[i - 1], &self.visual_proj[k])?;
            visual.push(v);
            sizes.push(hw);
        }
        let words = self.text_proj.forward(g, words)?;
        Ok((visual, sizes, words))
    }

    pub fn forward(&self, g: &mut Graph, pyramid: &FeaturePyramid, words: Var) -> Result<FusedFeatures> {
        let (projected, sizes, fw) = self.project(g, pyramid, words)?;
        let mut visual = Vec::with_capacity(projected.len());
        let mut textual = Vec::with_capacity(projected.len());
        for &fv in &projected {
            let shape = g.shape(fv).to_vec();
            let flat = g.reshape(fv, &[shape[0] * shape[1], self.dim])?;
            let vf = if self.strategy.language_to_vision() {
                let a = self.l2v.forward(g, flat, fw)?;
                let gated = g.mul(a, flat)?;
                g.reshape(gated, &shape)?
            } else {
                fv
            };
            let ef = if self.strategy.vision_to_language() {
                let a = self.v2l.forward(g, fw, flat)?;
                g.mul(a, fw)?
            } else {
                fw
            };
            visual.push(vf);
            textual.push(ef);
        }
        Ok(FusedFeatures { visual, textual, sizes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use soc_tensor::{Tape, Tensor};

    fn run(strategy: FusionStrategy) -> (Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<Vec<f64>>, Vec<f64>) {
        let fusion = Fusion::new(strategy, 8, 6, 2).unwrap();
        let mut store = ParamStore::new();
        // Parameters do not depend on the strategy.
        Fusion::new(FusionStrategy::Both, 8, 6, 2).unwrap().init(&mut store, &mut ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        let levels = [16usize, 8, 4, 2];
        let lv: Vec<Var> = levels
            .iter()
            .zip(STAGE_CHANNELS)
            .map(|(&s, c)| g.constant(Tensor::randn(&[2, c, s, s], 1.0, &mut rng)))
            .collect();
        let pyramid = FeaturePyramid { levels: [lv[0], lv[1], lv[2], lv[3]] };
        let words = g.constant(Tensor::randn(&[3, 6], 1.0, &mut rng));
        let (proj, _, fw) = fusion.project(&mut g, &pyramid, words).unwrap();
        let out = fusion.forward(&mut g, &pyramid, words).unwrap();
        let d = |vs: &[Var], g: &Graph| vs.iter().map(|&v| g.data(v).to_vec()).collect::<Vec<_>>();
        (d(&out.visual, &g), d(&out.textual, &g), d(&proj, &g), g.data(fw).to_vec())
    }

    #[test]
    fn strategies_switch_exactly_one_stream() {
        let (v, t, p, w) = run(FusionStrategy::None);
        assert_eq!(v, p);
        assert!(t.iter().all(|x| *x == w));

        let (v, t, p, w) = run(FusionStrategy::L2V);
        assert!(v.iter().zip(&p).all(|(a, b)| a != b));
        assert!(t.iter().all(|x| *x == w));

        let (v, t, p, w) = run(FusionStrategy::V2L);
        assert_eq!(v, p);
        assert!(t.iter().all(|x| *x != w));

        let (v, t, p, w) = run(FusionStrategy::Both);
        assert!(v.iter().zip(&p).all(|(a, b)| a != b));
        assert!(t.iter().all(|x| *x != w));
        assert!(v.iter().chain(&t).flatten().all(|x| x.is_finite()));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in FusionStrategy::ALL {
            assert_eq!(s.to_string().parse::<FusionStrategy>(), Ok(s));
        }
        assert!("sideways".parse::<FusionStrategy>().is_err());
    }
}
