//! Transformer building blocks shared by the tokenizer, the translation
//! model and the teacher: pre-norm attention layers, feed-forward blocks,
//! 2-D relative position bias and the sigmoid-gated fusion unit.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{bail, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;
/// Additive logit for masked attention entries. Finite, and large enough that
/// `exp` underflows to exactly zero after max subtraction.
pub const MASKED: f64 = -1e30;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout_rate: f64,
    pub causal: bool,
    pub rel_pos_2d: bool,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize, ffn_dim: usize) -> Self {
        AttentionConfig {
            model_dim,
            num_heads,
            ffn_dim,
            dropout_rate: 0.0,
            causal: false,
            rel_pos_2d: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim == 0 || self.model_dim % self.num_heads != 0 {
            bail!(
                Config,
                "model_dim {} is not divisible into {} heads",
                self.model_dim,
                self.num_heads
            );
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            bail!(Config, "dropout_rate {} outside [0,1)", self.dropout_rate);
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Xavier-uniform weights stored as `[in, out]`, zero bias.
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        let weight = ps.uniform(format!("{name}.weight"), &[d_in, d_out], bound, rng);
        let bias = bias.then(|| ps.zeros(format!("{name}.bias"), &[d_out]));
        Linear { weight, bias }
    }

    pub fn forward(&self, t: &Tape, x: Var) -> Result<Var> {
        let y = t.matmul(x, t.param(self.weight))?;
        match self.bias {
            Some(b) => t.add(y, t.param(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: ps.ones(format!("{name}.gain"), &[dim]),
            bias: ps.zeros(format!("{name}.bias"), &[dim]),
        }
    }

    pub fn forward(&self, t: &Tape, x: Var) -> Result<Var> {
        t.layer_norm(x, t.param(self.gain), t.param(self.bias), LN_EPS)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub fc1: Linear,
    pub fc2: Linear,
    dropout: f64,
}

impl FeedForward {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut impl Rng) -> Self {
        FeedForward {
            fc1: Linear::new(ps, &format!("{name}.fc1"), cfg.model_dim, cfg.ffn_dim, true, rng),
            fc2: Linear::new(ps, &format!("{name}.fc2"), cfg.ffn_dim, cfg.model_dim, true, rng),
            dropout: cfg.dropout_rate,
        }
    }

    pub fn forward(&self, t: &Tape, x: Var) -> Result<Var> {
        let h = t.gelu(self.fc1.forward(t, x)?);
        let h = t.dropout(h, self.dropout)?;
        self.fc2.forward(t, h)
    }
}

/// `[len, len]` additive mask that hides future positions.
pub fn causal_mask(t: &Tape, len: usize) -> Var {
    let m = Tensor::from_fn(&[len, len], |k| if k % len > k / len { MASKED } else { 0.0 });
    t.constant(m)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    heads: usize,
    dropout: f64,
}

impl MultiHeadAttention {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.model_dim;
        MultiHeadAttention {
            q: Linear::new(ps, &format!("{name}.q"), d, d, true, rng),
            k: Linear::new(ps, &format!("{name}.k"), d, d, true, rng),
            v: Linear::new(ps, &format!("{name}.v"), d, d, true, rng),
            o: Linear::new(ps, &format!("{name}.o"), d, d, true, rng),
            heads: cfg.num_heads,
            dropout: cfg.dropout_rate,
        }
    }

    pub fn forward(&self, t: &Tape, query: Var, memory: Var, mask: Option<Var>, bias: Option<Var>) -> Result<Var> {
        Ok(self.forward_with_weights(t, query, memory, mask, bias)?.0)
    }

    /// Scaled dot-product attention. `query` is `[T, d]`, `memory` is
    /// `[S, d]`, `mask` is an additive `[T, S]` constant and `bias` an
    /// additive `[H, T, S]` logit bias. Also returns the `[H, T, S]`
    /// attention weights.
    pub fn forward_with_weights(
        &self,
        t: &Tape,
        query: Var,
        memory: Var,
        mask: Option<Var>,
        bias: Option<Var>,
    ) -> Result<(Var, Var)> {
        let qs = t.shape(query);
        let ms = t.shape(memory);
        if qs.len() != 2 || ms.len() != 2 || qs[1] != ms[1] {
            bail!(Shape, "attention query {qs:?} and memory {ms:?} must be [T,d] and [S,d]");
        }
        let (tl, sl, d) = (qs[0], ms[0], qs[1]);
        if d % self.heads != 0 {
            bail!(Config, "model dim {d} not divisible by {} heads", self.heads);
        }
        let hd = d / self.heads;
        let q = self.q.forward(t, query)?;
        let k = self.k.forward(t, memory)?;
        let v = self.v.forward(t, memory)?;
        let q = t.permute(t.reshape(q, &[tl, self.heads, hd])?, &[1, 0, 2])?;
        let kt = t.permute(t.reshape(k, &[sl, self.heads, hd])?, &[1, 2, 0])?;
        let v = t.permute(t.reshape(v, &[sl, self.heads, hd])?, &[1, 0, 2])?;
        let mut logits = t.scale(t.matmul(q, kt)?, 1.0 / (hd as f64).sqrt());
        if let Some(b) = bias {
            logits = t.add(logits, b)?;
        }
        if let Some(m) = mask {
            logits = t.add(logits, m)?;
        }
        let weights = t.softmax(logits, 2)?;
        let attn = t.dropout(weights, self.dropout)?;
        let ctx = t.matmul(attn, v)?;
        let ctx = t.reshape(t.permute(ctx, &[1, 0, 2])?, &[tl, d])?;
        Ok((self.o.forward(t, ctx)?, weights))
    }
}

/// Learned per-head additive attention bias indexed by the clipped 2-D
/// displacement between raster positions of a `grid_h × grid_w` grid.
#[derive(Clone, Debug)]
pub struct RelPos2D {
    pub table: ParamId,
    pub grid_h: usize,
    pub grid_w: usize,
    pub heads: usize,
}

impl RelPos2D {
    pub fn new(ps: &mut ParamStore, name: &str, grid_h: usize, grid_w: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let buckets = (2 * grid_h - 1) * (2 * grid_w - 1);
        let table = ps.normal(format!("{name}.table"), &[buckets, heads], 0.02, rng);
        RelPos2D { table, grid_h, grid_w, heads }
    }

    pub fn num_buckets(&self) -> usize {
        (2 * self.grid_h - 1) * (2 * self.grid_w - 1)
    }

    /// Bucket for the displacement from raster position `i` to `j` on a grid
    /// of width `width`; displacements beyond the table radius are clamped.
    pub fn bucket(&self, i: usize, j: usize, width: usize) -> usize {
        let rh = self.grid_h as isize - 1;
        let rw = self.grid_w as isize - 1;
        let dr = ((j / width) as isize - (i / width) as isize).clamp(-rh, rh);
        let dc = ((j % width) as isize - (i % width) as isize).clamp(-rw, rw);
        ((dr + rh) * (2 * rw + 1) + (dc + rw)) as usize
    }

    /// Bias `[H, len, len]` among the first `len` raster positions of a
    /// `grid_h × grid_w` grid.
    pub fn bias(&self, t: &Tape, grid_h: usize, grid_w: usize, len: usize) -> Result<Var> {
        if len > grid_h * grid_w {
            bail!(Contract, "{len} positions exceed a {grid_h}x{grid_w} grid");
        }
        let ids: Vec<usize> = (0..len * len).map(|k| self.bucket(k / len, k % len, grid_w)).collect();
        let rows = t.embedding(t.param(self.table), &ids)?;
        let rows = t.reshape(rows, &[len, len, self.heads])?;
        t.permute(rows, &[2, 0, 1])
    }
}

/// Sigmoid-gated convex combination of two equally shaped streams.
#[derive(Clone, Debug)]
pub struct GatedFusion {
    pub w: ParamId,
    pub u: ParamId,
}

impl GatedFusion {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, rng: &mut impl Rng) -> Self {
        let bound = (3.0 / dim as f64).sqrt();
        GatedFusion {
            w: ps.uniform(format!("{name}.w"), &[dim, dim], bound, rng),
            u: ps.uniform(format!("{name}.u"), &[dim, dim], bound, rng),
        }
    }

    pub fn gate(&self, t: &Tape, h_img: Var, h_txt: Var) -> Result<Var> {
        let a = t.matmul(h_img, t.param(self.w))?;
        let b = t.matmul(h_txt, t.param(self.u))?;
        Ok(t.sigmoid(t.add(a, b)?))
    }

    /// `Λ⊙h_img + (1−Λ)⊙h_txt`, computed as `h_txt + Λ⊙(h_img − h_txt)`.
    pub fn forward(&self, t: &Tape, h_img: Var, h_txt: Var) -> Result<Var> {
        if t.shape(h_img) != t.shape(h_txt) {
            bail!(
                Contract,
                "gated fusion streams differ in shape: {:?} vs {:?}",
                t.shape(h_img),
                t.shape(h_txt)
            );
        }
        let gate = self.gate(t, h_img, h_txt)?;
        let diff = t.sub(h_img, h_txt)?;
        t.add(h_txt, t.mul(gate, diff)?)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
    dropout: f64,
}

impl EncoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut impl Rng) -> Self {
        EncoderLayer {
            ln_attn: LayerNorm::new(ps, &format!("{name}.ln_attn"), cfg.model_dim),
            attn: MultiHeadAttention::new(ps, &format!("{name}.attn"), cfg, rng),
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), cfg.model_dim),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), cfg, rng),
            dropout: cfg.dropout_rate,
        }
    }

    pub fn forward(&self, t: &Tape, h: Var, mask: Option<Var>) -> Result<Var> {
        let x = self.ln_attn.forward(t, h)?;
        let a = self.attn.forward(t, x, x, mask, None)?;
        let h = t.add(h, t.dropout(a, self.dropout)?)?;
        let x = self.ln_ffn.forward(t, h)?;
        let f = self.ffn.forward(t, x)?;
        t.add(h, t.dropout(f, self.dropout)?)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_cross: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
    dropout: f64,
}

impl DecoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut impl Rng) -> Self {
        DecoderLayer {
            ln_self: LayerNorm::new(ps, &format!("{name}.ln_self"), cfg.model_dim),
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), cfg, rng),
            ln_cross: LayerNorm::new(ps, &format!("{name}.ln_cross"), cfg.model_dim),
            cross_attn: MultiHeadAttention::new(ps, &format!("{name}.cross_attn"), cfg, rng),
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), cfg.model_dim),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), cfg, rng),
            dropout: cfg.dropout_rate,
        }
    }

    pub fn forward(&self, t: &Tape, h: Var, memory: Var, self_mask: Option<Var>) -> Result<Var> {
        let x = self.ln_self.forward(t, h)?;
        let a = self.self_attn.forward(t, x, x, self_mask, None)?;
        let h = t.add(h, t.dropout(a, self.dropout)?)?;
        let x = self.ln_cross.forward(t, h)?;
        let c = self.cross_attn.forward(t, x, memory, None, None)?;
        let h = t.add(h, t.dropout(c, self.dropout)?)?;
        let x = self.ln_ffn.forward(t, h)?;
        let f = self.ffn.forward(t, x)?;
        t.add(h, t.dropout(f, self.dropout)?)
    }
}

/// Decoder layer with two cross-attention streams joined by [`GatedFusion`].
/// Each stream carries its own residual, so the fused state is a pointwise
/// convex combination of the two stream states.
#[derive(Clone, Debug)]
pub struct DualDecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ln_img: LayerNorm,
    pub cross_img: MultiHeadAttention,
    pub ln_txt: LayerNorm,
    pub cross_txt: MultiHeadAttention,
    pub fusion: GatedFusion,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
    dropout: f64,
}

/// Intermediate states of one [`DualDecoderLayer`] pass.
pub struct DualStates {
    pub image_stream: Var,
    pub text_stream: Option<Var>,
    pub fused: Var,
    pub output: Var,
}

impl DualDecoderLayer {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &AttentionConfig, rng: &mut impl Rng) -> Self {
        DualDecoderLayer {
            ln_self: LayerNorm::new(ps, &format!("{name}.ln_self"), cfg.model_dim),
            self_attn: MultiHeadAttention::new(ps, &format!("{name}.self_attn"), cfg, rng),
            ln_img: LayerNorm::new(ps, &format!("{name}.ln_img"), cfg.model_dim),
            cross_img: MultiHeadAttention::new(ps, &format!("{name}.cross_img"), cfg, rng),
            ln_txt: LayerNorm::new(ps, &format!("{name}.ln_txt"), cfg.model_dim),
            cross_txt: MultiHeadAttention::new(ps, &format!("{name}.cross_txt"), cfg, rng),
            fusion: GatedFusion::new(ps, &format!("{name}.fusion"), cfg.model_dim, rng),
            ln_ffn: LayerNorm::new(ps, &format!("{name}.ln_ffn"), cfg.model_dim),
            ffn: FeedForward::new(ps, &format!("{name}.ffn"), cfg, rng),
            dropout: cfg.dropout_rate,
        }
    }

    /// With `mem_txt == None` the text stream is ablated and the image
    /// stream passes through the fusion unchanged (gate fixed at 1).
    pub fn forward_states(
        &self,
        t: &Tape,
        h: Var,
        mem_img: Var,
        mem_txt: Option<Var>,
        self_mask: Option<Var>,
        rel_bias: Option<Var>,
    ) -> Result<DualStates> {
        let x = self.ln_self.forward(t, h)?;
        let a = self.self_attn.forward(t, x, x, self_mask, rel_bias)?;
        let c = t.add(h, t.dropout(a, self.dropout)?)?;

        let xi = self.ln_img.forward(t, c)?;
        let ci = self.cross_img.forward(t, xi, mem_img, None, None)?;
        let image_stream = t.add(c, t.dropout(ci, self.dropout)?)?;

        let (text_stream, fused) = match mem_txt {
            Some(mem) => {
                let xt = self.ln_txt.forward(t, c)?;
                let ct = self.cross_txt.forward(t, xt, mem, None, None)?;
                let text_stream = t.add(c, t.dropout(ct, self.dropout)?)?;
                let fused = self.fusion.forward(t, image_stream, text_stream)?;
                (Some(text_stream), fused)
            }
            None => (None, image_stream),
        };

        let x = self.ln_ffn.forward(t, fused)?;
        let f = self.ffn.forward(t, x)?;
        let output = t.add(fused, t.dropout(f, self.dropout)?)?;
        Ok(DualStates { image_stream, text_stream, fused, output })
    }

    pub fn forward(
        &self,
        t: &Tape,
        h: Var,
        mem_img: Var,
        mem_txt: Option<Var>,
        self_mask: Option<Var>,
        rel_bias: Option<Var>,
    ) -> Result<Var> {
        Ok(self.forward_states(t, h, mem_img, mem_txt, self_mask, rel_bias)?.output)
    }
}

/// Pre-norm encoder stack with a final layer norm.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub layers: Vec<EncoderLayer>,
    pub final_ln: LayerNorm,
}

impl Encoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &AttentionConfig, num_layers: usize, rng: &mut impl Rng) -> Self {
        Encoder {
            layers: (0..num_layers)
                .map(|i| EncoderLayer::new(ps, &format!("{name}.layer{i}"), cfg, rng))
                .collect(),
            final_ln: LayerNorm::new(ps, &format!("{name}.final_ln"), cfg.model_dim),
        }
    }

    /// Returns the normalized final states and the raw output of every layer.
    pub fn forward_all(&self, t: &Tape, mut h: Var, mask: Option<Var>) -> Result<(Var, Vec<Var>)> {
        let mut per_layer = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            h = layer.forward(t, h, mask)?;
            per_layer.push(h);
        }
        Ok((self.final_ln.forward(t, h)?, per_layer))
    }

    pub fn forward(&self, t: &Tape, h: Var, mask: Option<Var>) -> Result<Var> {
        Ok(self.forward_all(t, h, mask)?.0)
    }
}

/// Causal pre-norm decoder stack with cross-attention and a final layer norm.
#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    pub final_ln: LayerNorm,
}

impl Decoder {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &AttentionConfig, num_layers: usize, rng: &mut impl Rng) -> Self {
        Decoder {
            layers: (0..num_layers)
                .map(|i| DecoderLayer::new(ps, &format!("{name}.layer{i}"), cfg, rng))
                .collect(),
            final_ln: LayerNorm::new(ps, &format!("{name}.final_ln"), cfg.model_dim),
        }
    }

    pub fn forward(&self, t: &Tape, mut h: Var, memory: Var) -> Result<Var> {
        let len = t.shape(h)[0];
        let mask = causal_mask(t, len);
        for layer in &self.layers {
            h = layer.forward(t, h, memory, Some(mask))?;
        }
        self.final_ln.forward(t, h)
    }
}

/// Causal stack of [`DualDecoderLayer`]s with 2-D relative position bias in
/// self-attention over a raster token grid.
#[derive(Clone, Debug)]
pub struct DualDecoder {
    pub layers: Vec<DualDecoderLayer>,
    pub rel_pos: Option<RelPos2D>,
    pub final_ln: LayerNorm,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl DualDecoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &AttentionConfig,
        num_layers: usize,
        grid_h: usize,
        grid_w: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let rel_pos = cfg
            .rel_pos_2d
            .then(|| RelPos2D::new(ps, &format!("{name}.rel_pos"), grid_h, grid_w, cfg.num_heads, rng));
        DualDecoder {
            layers: (0..num_layers)
                .map(|i| DualDecoderLayer::new(ps, &format!("{name}.layer{i}"), cfg, rng))
                .collect(),
            rel_pos,
            final_ln: LayerNorm::new(ps, &format!("{name}.final_ln"), cfg.model_dim),
            grid_h,
            grid_w,
        }
    }

    pub fn forward(&self, t: &Tape, mut h: Var, mem_img: Var, mem_txt: Option<Var>) -> Result<Var> {
        let len = t.shape(h)[0];
        if len > self.grid_h * self.grid_w {
            bail!(
                Contract,
                "sequence of {len} tokens exceeds the {}x{} token grid",
                self.grid_h,
                self.grid_w
            );
        }
        let mask = causal_mask(t, len);
        let bias = match &self.rel_pos {
            Some(rp) => Some(rp.bias(t, self.grid_h, self.grid_w, len)?),
            None => None,
        };
        for layer in &self.layers {
            h = layer.forward(t, h, mem_img, mem_txt, Some(mask), bias)?;
        }
        self.final_ln.forward(t, h)
    }
}
