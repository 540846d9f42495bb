//! Prediction heads: per-query class logits and boxes, an FPN decoder that
//! produces stride-4 segmentation features, and the dynamic mask head whose
//! 1x1 convolution kernels are generated per query.

use rand::Rng;
use soc_tensor::{Tensor, Var};

use crate::encoders::{FeaturePyramid, STAGE_CHANNELS};
use crate::error::{Result, SocError};
use crate::nn::{kaiming_normal, Graph, Mlp};
use crate::params::ParamStore;
use crate::sim::EncodedVisual;

/// Hidden width of the dynamic mask layers.
pub const DYNAMIC_HIDDEN: usize = 8;
/// Relative-coordinate channels appended to the segmentation features.
pub const COORD_CHANNELS: usize = 2;

/// Length of the per-query kernel vector for `dim` feature channels:
/// three 1x1 layers `(dim + 2) -> 8 -> 8 -> 1` with biases, laid out as
/// `w1 | b1 | w2 | b2 | w3 | b3` with weights row-major `[out, in]`.
pub fn dynamic_param_count(dim: usize) -> usize {
    let h = DYNAMIC_HIDDEN;
    (dim + COORD_CHANNELS) * h + h + h * h + h + h + 1
}

/// Per-query predictions over the clip.
#[derive(Clone, Copy, Debug)]
pub struct TrajectoryPrediction {
    /// `[T, N_q, 1]`
    pub class_logits: Var,
    /// `[T, N_q, 4]` normalized `(cx, cy, w, h)`.
    pub boxes: Var,
    /// `[T, N_q, H0 / 4, W0 / 4]` mask logits.
    pub masks: Var,
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub dim: usize,
    class: Mlp,
    boxes: Mlp,
    controller: Mlp,
}

impl Heads {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            class: Mlp::new("heads.class", &[dim, dim, dim, 1]),
            boxes: Mlp::new("heads.box", &[dim, dim, dim, 4]),
            controller: Mlp::new("heads.controller", &[dim, dim, dynamic_param_count(dim)]),
        }
    }

    pub fn init<R: Rng + ?Sized>(&self, store: &mut ParamStore, rng: &mut R) {
        let d = self.dim;
        self.class.init(store, rng);
        self.boxes.init(store, rng);
        self.controller.init(store, rng);
        for (i, c) in [STAGE_CHANNELS[0], d, d, d].into_iter().enumerate() {
            store.insert(format!("heads.fpn.lateral{}.weight", i + 1), kaiming_normal(&[d, c, 1, 1], c, rng));
            store.insert(format!("heads.fpn.lateral{}.bias", i + 1), Tensor::zeros(&[d]));
        }
        store.insert("heads.fpn.out.weight", kaiming_normal(&[d, d, 3, 3], d * 9, rng));
        store.insert("heads.fpn.out.bias", Tensor::zeros(&[d]));
    }

    /// `[T, N_q, D] -> [T, N_q, 1]`
    pub fn class_head(&self, g: &mut Graph, frame_q: Var) -> Result<Var> {
        self.class.forward(g, frame_q)
    }

    /// `[T, N_q, D] -> [T, N_q, 4]`, sigmoid-bounded.
    pub fn box_head(&self, g: &mut Graph, frame_q: Var) -> Result<Var> {
        let b = self.boxes.forward(g, frame_q)?;
        Ok(g.sigmoid(b)?)
    }

    /// `[T, N_q, D] -> [T, N_q, P]` dynamic kernel vectors.
    pub fn kernels(&self, g: &mut Graph, frame_q: Var) -> Result<Var> {
        self.controller.forward(g, frame_q)
    }

    fn conv(&self, g: &mut Graph, x: Var, name: &str, pad: usize) -> Result<Var> {
        let w = g.param(&format!("{name}.weight"))?;
        let b = g.param(&format!("{name}.bias"))?;
        Ok(g.conv2d(x, w, Some(b), 1, pad)?)
    }

    /// Top-down pathway from the coarsest encoded scale to stride 4, where
    /// backbone level 1 joins; a final 3x3 convolution gives `[T, D, H0/4, W0/4]`.
    pub fn fpn_decode(&self, g: &mut Graph, encoded: &EncodedVisual, level1: Var) -> Result<Var> {
        let t = g.shape(level1)[0];
        let mut maps = Vec::with_capacity(encoded.scales.len());
        for (&s, &(h, w)) in encoded.scales.iter().zip(&encoded.sizes) {
            let x = g.reshape(s, &[t, h, w, self.dim])?;
            maps.push(g.permute(x, &[0, 3, 1, 2])?);
        }
        // maps[k] is pyramid level k + 2; lateral{i} belongs to level i.
        let mut top = self.conv(g, maps[maps.len() - 1], "heads.fpn.lateral4", 0)?;
        for k in (0..maps.len() - 1).rev() {
            let lateral = self.conv(g, maps[k], &format!("heads.fpn.lateral{}", k + 2), 0)?;
            top = self.merge(g, lateral, top)?;
        }
        let lateral = self.conv(g, level1, "heads.fpn.lateral1", 0)?;
        top = self.merge(g, lateral, top)?;
        self.conv(g, top, "heads.fpn.out", 1)
    }

    fn merge(&self, g: &mut Graph, lateral: Var, coarse: Var) -> Result<Var> {
        let up = g.upsample_bilinear(coarse, 2)?;
        if g.shape(up) != g.shape(lateral) {
            return Err(SocError::Contract(format!(
                "FPN lateral {:?} does not match upsampled {:?}",
                g.shape(lateral),
                g.shape(up)
            )));
        }
        Ok(g.add(lateral, up)?)
    }

    /// Dynamic mask head. For query `n` on frame `t` the features are
    /// `F_seg[t]` plus two channels `(x - cx, y - cy)` relative to the
    /// predicted box centre, in normalized pixel-centre coordinates; three
    /// 1x1 layers parameterized by that query's kernel vector give one logit
    /// per pixel.
    pub fn mask_head(&self, g: &mut Graph, kernels: Var, seg: Var, boxes: Var) -> Result<Var> {
        let (t, d, h, w) = match g.shape(seg) {
            &[t, d, h, w] if d == self.dim => (t, d, h, w),
            s => return Err(SocError::Contract(format!("segmentation features must be [T, {}, H, W], got {s:?}", self.dim))),
        };
        let nq = g.shape(kernels)[1];
        let hid = DYNAMIC_HIDDEN;
        let hw = h * w;
        let cin = d + COORD_CHANNELS;
        let mut offset = 0;
        let mut take = |g: &mut Graph, len: usize| -> Result<Var> {
            let v = g.narrow(kernels, 2, offset, len)?;
            offset += len;
            Ok(v)
        };
        let w1 = take(g, cin * hid)?;
        let b1 = take(g, hid)?;
        let w2 = take(g, hid * hid)?;
        let b2 = take(g, hid)?;
        let w3 = take(g, hid)?;
        let b3 = take(g, 1)?;

        // Layer 1, feature part: [T, N_q*8, D] x [T, D, HW].
        let w1 = g.reshape(w1, &[t, nq, hid, cin])?;
        let w1f = g.narrow(w1, 3, 0, d)?;
        let w1f = g.reshape(w1f, &[t, nq * hid, d])?;
        let feats = g.reshape(seg, &[t, d, hw])?;
        let h1 = g.bmm(w1f, feats)?;
        let h1 = g.reshape(h1, &[t, nq, hid, hw])?;

        // Layer 1, coordinate part: w_x (x - cx) + w_y (y - cy).
        let xs = g.constant(Tensor::from_fn(&[1, 1, 1, hw], |p| ((p % w) as f64 + 0.5) / w as f64));
        let ys = g.constant(Tensor::from_fn(&[1, 1, 1, hw], |p| ((p / w) as f64 + 0.5) / h as f64));
        let cx = g.narrow(boxes, 2, 0, 1)?;
        let cx = g.reshape(cx, &[t, nq, 1, 1])?;
        let cy = g.narrow(boxes, 2, 1, 1)?;
        let cy = g.reshape(cy, &[t, nq, 1, 1])?;
        let rx = g.sub(xs, cx)?;
        let ry = g.sub(ys, cy)?;
        let wx = g.narrow(w1, 3, d, 1)?;
        let wy = g.narrow(w1, 3, d + 1, 1)?;
        let px = g.mul(wx, rx)?;
        let py = g.mul(wy, ry)?;
        let h1 = g.add(h1, px)?;
        let h1 = g.add(h1, py)?;
        let b1 = g.reshape(b1, &[t, nq, hid, 1])?;
        let h1 = g.add(h1, b1)?;
        let h1 = g.relu(h1)?;

        // Layers 2 and 3, batched over (frame, query).
        let h1 = g.reshape(h1, &[t * nq, hid, hw])?;
        let w2 = g.reshape(w2, &[t * nq, hid, hid])?;
        let b2 = g.reshape(b2, &[t * nq, hid, 1])?;
        let h2 = g.bmm(w2, h1)?;
        let h2 = g.add(h2, b2)?;
        let h2 = g.relu(h2)?;
        let w3 = g.reshape(w3, &[t * nq, 1, hid])?;
        let b3 = g.reshape(b3, &[t * nq, 1, 1])?;
        let m = g.bmm(w3, h2)?;
        let m = g.add(m, b3)?;
        Ok(g.reshape(m, &[t, nq, h, w])?)
    }

    pub fn forward(&self, g: &mut Graph, frame_q: Var, encoded: &EncodedVisual, pyramid: &FeaturePyramid) -> Result<(TrajectoryPrediction, Var)> {
        let class_logits = self.class_head(g, frame_q)?;
        let boxes = self.box_head(g, frame_q)?;
        let kernels = self.kernels(g, frame_q)?;
        let seg = self.fpn_decode(g, encoded, pyramid.levels[0])?;
        let masks = self.mask_head(g, kernels, seg, boxes)?;
        Ok((TrajectoryPrediction { class_logits, boxes, masks }, seg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use soc_tensor::Tape;

    #[test]
    fn kernel_length_matches_layers() {
        assert_eq!(dynamic_param_count(8), 10 * 8 + 8 + 64 + 8 + 8 + 1);
    }

    #[test]
    fn zero_kernels_give_zero_logits() {
        let heads = Heads::new(4);
        let store = ParamStore::new();
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let k = g.constant(Tensor::zeros(&[2, 3, dynamic_param_count(4)]));
        let seg = g.constant(Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng));
        let b = g.constant(Tensor::full(&[2, 3, 4], 0.5));
        let m = heads.mask_head(&mut g, k, seg, b).unwrap();
        assert_eq!(g.shape(m), &[2, 3, 4, 4]);
        assert!(g.data(m).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_class_weights_give_even_odds() {
        let heads = Heads::new(4);
        let mut store = ParamStore::new();
        heads.init(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        for (name, t) in store.clone().iter() {
            if name.starts_with("heads.class") {
                store.insert(name, Tensor::zeros(t.shape()));
            }
        }
        let mut tape = Tape::new();
        let mut g = Graph::new(&mut tape, &store, false);
        let q = g.constant(Tensor::randn(&[2, 5, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(2)));
        let c = heads.class_head(&mut g, q).unwrap();
        assert_eq!(g.shape(c), &[2, 5, 1]);
        assert!(g.data(c).iter().all(|&v| soc_tensor::sigmoid(v) == 0.5));
        let b = heads.box_head(&mut g, q).unwrap();
        assert!(g.data(b).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
