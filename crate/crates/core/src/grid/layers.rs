//! Stem, transformer blocks, patch merging and the classification head.

use rand::Rng;

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore, Session};
use crate::tensor::Tensor;

fn xavier<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], -a, a, rng)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            w: store.add(format!("{name}.w"), xavier(in_dim, out_dim, rng), true, true),
            b: store.add(format!("{name}.b"), Tensor::zeros(&[1, out_dim]), true, false),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (w, b) = (s.p(self.w), s.p(self.b));
        let y = s.graph.matmul(x, w)?;
        s.graph.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn init(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[1, dim], 1.0), true, false),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[1, dim]), true, false),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        s.graph.layer_norm(x, g, b)
    }
}

/// Pre-LN transformer block: `x + MHSA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub dim: usize,
    pub heads: usize,
    pub ln1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub ln2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        mlp_ratio: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            dim,
            heads,
            ln1: LayerNorm::init(store, &format!("{name}.ln1"), dim),
            qkv: Linear::init(store, &format!("{name}.qkv"), dim, 3 * dim, rng),
            proj: Linear::init(store, &format!("{name}.proj"), dim, dim, rng),
            ln2: LayerNorm::init(store, &format!("{name}.ln2"), dim),
            fc1: Linear::init(store, &format!("{name}.fc1"), dim, mlp_ratio * dim, rng),
            fc2: Linear::init(store, &format!("{name}.fc2"), mlp_ratio * dim, dim, rng),
        }
    }

    /// Per-head attention probabilities of `LN(x)`.
    fn attention_probs(&self, s: &mut Session<'_>, x: Var) -> Result<(Var, Vec<(Var, Var)>)> {
        let h = self.ln1.forward(s, x)?;
        let qkv = self.qkv.forward(s, h)?;
        let dh = self.dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut per_head = Vec::with_capacity(self.heads);
        for head in 0..self.heads {
            let q = s.graph.slice_cols(qkv, head * dh, dh)?;
            let k = s.graph.slice_cols(qkv, self.dim + head * dh, dh)?;
            let v = s.graph.slice_cols(qkv, 2 * self.dim + head * dh, dh)?;
            let kt = s.graph.transpose(k)?;
            let scores = s.graph.matmul(q, kt)?;
            let scores = s.graph.scale(scores, scale)?;
            let p = s.graph.softmax_rows(scores)?;
            per_head.push((p, v));
        }
        Ok((qkv, per_head))
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let d = s.graph.value(x).cols();
        if d != self.dim {
            return Err(Error::shape("block", s.graph.value(x).shape(), &[0, self.dim]));
        }
        let (_, per_head) = self.attention_probs(s, x)?;
        let mut outs = Vec::with_capacity(self.heads);
        for (p, v) in per_head {
            outs.push(s.graph.matmul(p, v)?);
        }
        let attn = if outs.len() == 1 {
            outs[0]
        } else {
            s.graph.concat_cols(&outs)?
        };
        let attn = self.proj.forward(s, attn)?;
        let x = s.graph.add(x, attn)?;
        let h = self.ln2.forward(s, x)?;
        let h = self.fc1.forward(s, h)?;
        let h = s.graph.gelu(h)?;
        let h = self.fc2.forward(s, h)?;
        s.graph.add(x, h)
    }

    /// Head-averaged attention matrix the block would apply to `x`.
    pub fn attention_map(&self, s: &mut Session<'_>, x: Var) -> Result<Tensor> {
        let (_, per_head) = self.attention_probs(s, x)?;
        let l = s.graph.value(x).rows();
        let mut avg = Tensor::zeros(&[l, l]);
        for (p, _) in &per_head {
            for (a, v) in avg.data_mut().iter_mut().zip(s.graph.value(*p).data()) {
                *a += v;
            }
        }
        let inv = 1.0 / per_head.len() as f64;
        Ok(avg.map(|v| v * inv))
    }
}

/// `blocks_per_node` blocks applied in sequence.
#[derive(Clone, Debug)]
pub struct Stage {
    pub blocks: Vec<Block>,
}

impl Stage {
    pub fn forward(&self, s: &mut Session<'_>, mut x: Var) -> Result<Var> {
        for b in &self.blocks {
            x = b.forward(s, x)?;
        }
        Ok(x)
    }
}

/// Source indices turning an `h×w` token grid into `(h/2)(w/2)` rows of four
/// concatenated neighbours (top-left, top-right, bottom-left, bottom-right).
pub fn merge_indices(h: usize, w: usize, d: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w * d);
    for r in (0..h).step_by(2) {
        for c in (0..w).step_by(2) {
            for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let tok = (r + dr) * w + (c + dc);
                idx.extend((0..d).map(|k| tok * d + k));
            }
        }
    }
    idx
}

/// Source indices cutting an `H×W×C` image into row-major `p×p` patches,
/// each flattened in `(dy, dx, channel)` order.
pub fn patch_indices(height: usize, width: usize, channels: usize, p: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(height * width * channels);
    for pr in 0..height / p {
        for pc in 0..width / p {
            for dy in 0..p {
                for dx in 0..p {
                    let (y, x) = (pr * p + dy, pc * p + dx);
                    idx.extend((0..channels).map(|ch| (y * width + x) * channels + ch));
                }
            }
        }
    }
    idx
}

/// 2×2 stride-2 patch merge followed by a linear projection.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            proj: Linear::init(store, name, 4 * in_dim, out_dim, rng),
        }
    }

    pub fn forward(&self, s: &mut Session<'_>, x: Var, h: usize, w: usize) -> Result<Var> {
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Input(format!("patch merge needs even extent, got {h}x{w}")));
        }
        let d = s.graph.value(x).cols();
        if s.graph.value(x).rows() != h * w || 4 * d != self.proj.in_dim {
            return Err(Error::shape("patch_embed", s.graph.value(x).shape(), &[h * w, self.proj.in_dim / 4]));
        }
        let merged = s
            .graph
            .gather(x, merge_indices(h, w, d), vec![h * w / 4, 4 * d])?;
        self.proj.forward(s, merged)
    }
}

/// Non-overlapping patchify plus linear projection to the first level's width.
#[derive(Clone, Debug)]
pub struct Stem {
    pub proj: Linear,
    pub patch: usize,
}

impl Stem {
    pub fn forward(&self, s: &mut Session<'_>, image: Var) -> Result<Var> {
        let shape = s.graph.value(image).shape().to_vec();
        if shape.len() != 3 {
            return Err(Error::Input(format!("image must be H×W×C, got {shape:?}")));
        }
        let (h, w, c) = (shape[0], shape[1], shape[2]);
        let p = self.patch;
        if h % p != 0 || w % p != 0 {
            return Err(Error::Input(format!("image {h}x{w} not divisible by patch {p}")));
        }
        if p * p * c != self.proj.in_dim {
            return Err(Error::shape("stem", &shape, &[p, p, self.proj.in_dim / (p * p)]));
        }
        let l = (h / p) * (w / p);
        let patches = s
            .graph
            .gather(image, patch_indices(h, w, c, p), vec![l, p * p * c])?;
        self.proj.forward(s, patches)
    }
}

/// LayerNorm, mean pool, then linear projection to class logits.
#[derive(Clone, Debug)]
pub struct Head {
    pub norm: LayerNorm,
    pub proj: Linear,
}

impl Head {
    pub fn forward(&self, s: &mut Session<'_>, x: Var) -> Result<Var> {
        let x = self.norm.forward(s, x)?;
        let pooled = s.graph.mean_pool_rows(x)?;
        self.proj.forward(s, pooled)
    }
}
