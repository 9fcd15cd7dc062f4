//! Vector-quantized image tokenizer: a patch transformer encoder, a
//! Euclidean codebook and a patch transformer decoder, trained with a
//! reconstruction term, a codebook term and a weighted commitment term.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{bail, Result};
use crate::nn::{AttentionConfig, Encoder, Linear};
use crate::optim::{batch_gradients, check_finite, clip_grad_norm, AdamConfig, AdamW, LrSchedule};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;
pub const CHECKPOINT_KIND: &str = "tokenizer";

/// `[H, W, 3]` tensor with values in `[0, 1]`.
pub fn image_tensor(img: &RgbImage) -> Tensor {
    let data = img.as_raw().iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::new(vec![img.height() as usize, img.width() as usize, CHANNELS], data).expect("RGB buffer matches its dimensions")
}

/// Inverse of [`image_tensor`], clamping to `[0, 1]` and rounding.
pub fn tensor_image(t: &Tensor) -> Result<RgbImage> {
    let s = t.shape();
    if s.len() != 3 || s[2] != CHANNELS {
        bail!(Shape, "expected an [H, W, 3] image tensor, found {s:?}");
    }
    Ok(RgbImage::from_fn(s[1] as u32, s[0] as u32, |x, y| {
        let i = (y as usize * s[1] + x as usize) * CHANNELS;
        let px = |c: usize| (t.data()[i + c].clamp(0.0, 1.0) * 255.0).round() as u8;
        Rgb([px(0), px(1), px(2)])
    }))
}

/// Splits an `[H, W, C]` tensor into raster-ordered `P×P` patches, each
/// flattened as `(dy, dx, c)`: returns `[(H/P)·(W/P), P·P·C]`.
pub fn patchify(img: &Tensor, patch: usize) -> Result<Tensor> {
    let s = img.shape();
    if s.len() != 3 || patch == 0 || s[0] % patch != 0 || s[1] % patch != 0 {
        bail!(Shape, "image {s:?} is not divisible into {patch}x{patch} patches");
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let (gh, gw) = (h / patch, w / patch);
    let dim = patch * patch * c;
    let mut out = vec![0.0; gh * gw * dim];
    for py in 0..gh {
        for px in 0..gw {
            let base = (py * gw + px) * dim;
            for dy in 0..patch {
                let src = ((py * patch + dy) * w + px * patch) * c;
                let dst = base + dy * patch * c;
                out[dst..dst + patch * c].copy_from_slice(&img.data()[src..src + patch * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, dim], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, grid_h: usize, grid_w: usize, patch: usize) -> Result<Tensor> {
    let dim = patch * patch * CHANNELS;
    if patches.shape() != [grid_h * grid_w, dim] {
        bail!(Shape, "patches {:?} do not form a {grid_h}x{grid_w} grid of {patch}px RGB patches", patches.shape());
    }
    let (h, w) = (grid_h * patch, grid_w * patch);
    let mut out = vec![0.0; h * w * CHANNELS];
    for py in 0..grid_h {
        for px in 0..grid_w {
            let base = (py * grid_w + px) * dim;
            for dy in 0..patch {
                let dst = ((py * patch + dy) * w + px * patch) * CHANNELS;
                let src = base + dy * patch * CHANNELS;
                out[dst..dst + patch * CHANNELS].copy_from_slice(&patches.data()[src..src + patch * CHANNELS]);
            }
        }
    }
    Tensor::new(vec![h, w, CHANNELS], out)
}

/// Borrowed view of `K` code vectors stored row-major.
#[derive(Clone, Copy, Debug)]
pub struct Codebook<'a> {
    pub entries: &'a [f64],
    pub dim: usize,
}

impl Codebook<'_> {
    pub fn len(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.entries.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        &self.entries[k * self.dim..(k + 1) * self.dim]
    }
}

/// Nearest code by squared Euclidean distance; the lowest index wins ties.
/// Returns the index and the squared distance.
pub fn quantize(v: &[f64], cb: &Codebook) -> Result<(usize, f64)> {
    if cb.is_empty() {
        bail!(Config, "empty codebook");
    }
    if v.len() != cb.dim {
        bail!(Shape, "vector of dimension {} against codes of dimension {}", v.len(), cb.dim);
    }
    let mut best = (0, f64::INFINITY);
    for k in 0..cb.len() {
        let d: f64 = v.iter().zip(cb.entry(k)).map(|(a, b)| (a - b) * (a - b)).sum();
        if d < best.1 {
            best = (k, d);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TokenizerConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub codebook_size: usize,
    pub code_dim: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Weight of the commitment term.
    pub commitment: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            image_height: 64,
            image_width: 64,
            patch: 8,
            codebook_size: 512,
            code_dim: 64,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            encoder_layers: 4,
            decoder_layers: 4,
            commitment: 0.25,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_height % self.patch != 0 || self.image_width % self.patch != 0 {
            bail!(Config, "{}x{} images are not divisible into {} px patches", self.image_height, self.image_width, self.patch);
        }
        if self.codebook_size < 2 || self.code_dim == 0 {
            bail!(Config, "codebook needs at least 2 entries of positive dimension");
        }
        if self.commitment < 0.0 {
            bail!(Config, "commitment weight must be non-negative");
        }
        self.attention().validate()
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.image_height / self.patch, self.image_width / self.patch)
    }

    pub fn num_tokens(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch * CHANNELS
    }

    fn attention(&self) -> AttentionConfig {
        AttentionConfig { dropout_rate: 0.0, ..AttentionConfig::new(self.model_dim, self.num_heads, self.ffn_dim) }
    }
}

#[derive(Clone, Debug)]
pub struct TokenizerModel {
    pub cfg: TokenizerConfig,
    pub params: ParamStore,
    enc_in: Linear,
    enc_pos: ParamId,
    encoder: Encoder,
    enc_out: Linear,
    pub codebook: ParamId,
    dec_in: Linear,
    dec_pos: ParamId,
    decoder: Encoder,
    dec_out: Linear,
}

/// The three loss terms and the intermediate values they were built from.
#[derive(Clone, Copy, Debug)]
pub struct Stage1Loss {
    pub total: Var,
    pub recon: Var,
    pub codebook: Var,
    pub commitment: Var,
    /// Encoder output `E(x)`, `[N, code_dim]`.
    pub encoded: Var,
    /// Straight-through quantized vectors fed to the decoder.
    pub quantized: Var,
    pub reconstruction: Var,
}

impl TokenizerModel {
    pub fn new(cfg: TokenizerConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, "tokenizer-init");
        let mut ps = ParamStore::new();
        let att = cfg.attention();
        let (n, d) = (cfg.num_tokens(), cfg.model_dim);
        let enc_in = Linear::new(&mut ps, "tok.enc_in", cfg.patch_dim(), d, true, &mut rng);
        let enc_pos = ps.normal("tok.enc_pos", &[n, d], 0.02, &mut rng);
        let encoder = Encoder::new(&mut ps, "tok.encoder", &att, cfg.encoder_layers, &mut rng);
        let enc_out = Linear::new(&mut ps, "tok.enc_out", d, cfg.code_dim, true, &mut rng);
        let bound = 1.0 / cfg.codebook_size as f64;
        let codebook = ps.uniform("tok.codebook", &[cfg.codebook_size, cfg.code_dim], bound, &mut rng);
        let dec_in = Linear::new(&mut ps, "tok.dec_in", cfg.code_dim, d, true, &mut rng);
        let dec_pos = ps.normal("tok.dec_pos", &[n, d], 0.02, &mut rng);
        let decoder = Encoder::new(&mut ps, "tok.decoder", &att, cfg.decoder_layers, &mut rng);
        let dec_out = Linear::new(&mut ps, "tok.dec_out", d, cfg.patch_dim(), true, &mut rng);
        Ok(TokenizerModel { cfg, params: ps, enc_in, enc_pos, encoder, enc_out, codebook, dec_in, dec_pos, decoder, dec_out })
    }

    pub fn codebook(&self) -> Codebook<'_> {
        Codebook { entries: self.params.value(self.codebook).data(), dim: self.cfg.code_dim }
    }

    fn check_image(&self, x: &Tensor) -> Result<()> {
        let want = [self.cfg.image_height, self.cfg.image_width, CHANNELS];
        if x.shape() != want {
            bail!(Shape, "image tensor {:?} does not match the tokenizer's {:?}", x.shape(), want);
        }
        Ok(())
    }

    /// `E(x)`: `[N, code_dim]` continuous code vectors.
    pub fn encode_vectors(&self, t: &Tape, x: &Tensor) -> Result<Var> {
        self.check_image(x)?;
        let mut p = patchify(x, self.cfg.patch)?;
        // centred pixels give the patch projections varied directions
        p.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
        let h = self.enc_in.forward(t, t.constant(p))?;
        let h = t.add(h, t.param(self.enc_pos))?;
        let h = self.encoder.forward(t, h, None)?;
        self.enc_out.forward(t, h)
    }

    /// `G(q)`: patch-layout reconstruction `[N, patch_dim]`.
    pub fn decode_vectors(&self, t: &Tape, q: Var) -> Result<Var> {
        let h = self.dec_in.forward(t, q)?;
        let h = t.add(h, t.param(self.dec_pos))?;
        let h = self.decoder.forward(t, h, None)?;
        self.dec_out.forward(t, h)
    }

    fn nearest(&self, vectors: &[f64]) -> Result<Vec<usize>> {
        let cb = self.codebook();
        vectors.chunks(self.cfg.code_dim).map(|v| quantize(v, &cb).map(|(k, _)| k)).collect()
    }

    pub fn stage1_loss(&self, t: &Tape, x: &Tensor) -> Result<Stage1Loss> {
        let encoded = self.encode_vectors(t, x)?;
        let e_val = t.value(encoded);
        let idx = self.nearest(e_val.data())?;
        let selected = t.embedding(t.param(self.codebook), &idx)?;
        let sel_val = t.value(selected);

        // decoder input equals the selected codes; its gradient is copied to E(x)
        let offset: Vec<f64> = sel_val.data().iter().zip(e_val.data()).map(|(z, e)| z - e).collect();
        let quantized = t.add(encoded, t.constant(Tensor::new(e_val.shape().to_vec(), offset)?))?;
        let reconstruction = self.decode_vectors(t, quantized)?;
        let target = t.constant(patchify(x, self.cfg.patch)?);
        let recon = t.mse(reconstruction, target)?;
        let codebook = t.mse(t.detach(encoded), selected)?;
        let commitment = t.scale(t.mse(encoded, t.constant(sel_val))?, self.cfg.commitment);
        let total = t.add(t.add(recon, codebook)?, commitment)?;
        Ok(Stage1Loss { total, recon, codebook, commitment, encoded, quantized, reconstruction })
    }

    /// Raster-ordered visual tokens of an `[H, W, 3]` image tensor.
    pub fn encode_tensor(&self, x: &Tensor) -> Result<Vec<usize>> {
        let t = Tape::with_params(&self.params);
        let e = self.encode_vectors(&t, x)?;
        t.with_value(e, |v| self.nearest(v))
    }

    pub fn encode_image(&self, img: &RgbImage) -> Result<Vec<usize>> {
        self.encode_tensor(&image_tensor(img))
    }

    /// Reconstruction `[H, W, 3]` clamped to `[0, 1]`.
    pub fn decode_tensor(&self, tokens: &[usize]) -> Result<Tensor> {
        let n = self.cfg.num_tokens();
        if tokens.len() != n {
            bail!(Shape, "{} tokens for a grid of {n}", tokens.len());
        }
        if let Some(&bad) = tokens.iter().find(|&&k| k >= self.cfg.codebook_size) {
            bail!(Range, "visual token {bad} outside a codebook of {}", self.cfg.codebook_size);
        }
        let t = Tape::with_params(&self.params);
        let q = t.embedding(t.param(self.codebook), tokens)?;
        let out = t.value(self.decode_vectors(&t, q)?);
        let (gh, gw) = self.cfg.grid();
        let mut img = unpatchify(&out, gh, gw, self.cfg.patch)?;
        img.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        Ok(img)
    }

    pub fn decode_tokens(&self, tokens: &[usize]) -> Result<RgbImage> {
        tensor_image(&self.decode_tensor(tokens)?)
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        Checkpoint::from_store(CHECKPOINT_KIND, &self.cfg, step, &self.params)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let mut m = TokenizerModel::new(c.config_as()?, 0)?;
        c.load_into(&mut m.params)?;
        Ok(m)
    }
}

/// Mean absolute per-pixel error of the tokenize/detokenize round trip.
pub fn round_trip_mae(m: &TokenizerModel, x: &Tensor) -> Result<f64> {
    let r = m.decode_tensor(&m.encode_tensor(x)?)?;
    Ok(r.data().iter().zip(x.data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / x.numel() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    /// Checkpoint cadence for resumable runs; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            steps: 1500,
            batch_size: 8,
            schedule: LrSchedule { peak_lr: 2e-3, end_lr: 1e-4, warmup_steps: 50, total_steps: 1500, power: 1.0 },
            adam: AdamConfig { beta1: 0.9, beta2: 0.99, eps: 1e-8, weight_decay: 0.0 },
            clip_norm: 1.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Log {
    pub step: usize,
    pub loss: f64,
    pub recon: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Trainer state that survives a checkpoint round trip.
pub struct Stage1Run {
    pub model: TokenizerModel,
    pub opt: AdamW,
    pub step: usize,
}

impl Stage1Run {
    pub fn new(model: TokenizerModel, cfg: &Stage1Config) -> Self {
        let opt = AdamW::new(&model.params, cfg.adam.clone());
        Stage1Run { model, opt, step: 0 }
    }

    /// Model and optimizer state in one checkpoint.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = self.model.to_checkpoint(self.step as u64)?;
        c.arrays.extend(self.opt.state(&self.model.params));
        Ok(c)
    }

    pub fn resume(c: &Checkpoint, cfg: &Stage1Config) -> Result<Self> {
        let model = TokenizerModel::from_checkpoint(c)?;
        let mut opt = AdamW::new(&model.params, cfg.adam.clone());
        opt.restore(&model.params, &c.arrays, c.step as usize)?;
        Ok(Stage1Run { model, opt, step: c.step as usize })
    }

    /// Runs until `cfg.steps`. `on_step` sees every log record and may
    /// persist the run; it is called after the update of that step.
    pub fn train(
        &mut self,
        images: &[Tensor],
        cfg: &Stage1Config,
        seed: u64,
        mut on_step: impl FnMut(&Stage1Run, &Stage1Log) -> Result<()>,
    ) -> Result<()> {
        if images.is_empty() {
            bail!(Config, "stage-1 training needs at least one image");
        }
        if cfg.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        cfg.schedule.validate()?;
        while self.step < cfg.steps {
            let step = self.step;
            let batch = batch_indices(images.len(), cfg.batch_size, seed, step);
            let (sums, mut grads) = batch_gradients(&self.model.params, &batch, None, |t, i| {
                let l = self.model.stage1_loss(t, &images[i])?;
                Ok(vec![l.total, l.recon, l.codebook, l.commitment])
            })?;
            check_finite(&["loss", "reconstruction", "codebook", "commitment"], &sums, &grads, step)?;
            let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
            let lr = cfg.schedule.at(step);
            self.opt.update(&mut self.model.params, &grads, lr);
            self.step += 1;
            let log = Stage1Log { step, loss: sums[0], recon: sums[1], codebook: sums[2], commitment: sums[3], lr, grad_norm };
            on_step(self, &log)?;
        }
        Ok(())
    }
}

/// Deterministic minibatch for `step`: a per-epoch permutation of the data
/// sliced into consecutive batches.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let batch = batch.min(n);
    let per_epoch = n.div_ceil(batch);
    let epoch = step / per_epoch;
    let k = step % per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::rng(rng::mix(seed, epoch as u64)));
    order[k * batch..((k + 1) * batch).min(n)].to_vec()
}
