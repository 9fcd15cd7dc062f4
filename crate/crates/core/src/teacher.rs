//! Text-to-image teacher for distillation: a transformer text encoder, a
//! residual convolutional encoder of the source image, and an image decoder
//! with the same dual cross-attention and gated fusion as the student.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{bail, Result};
use crate::model::{softmax, text_ids, CHAR_VOCAB, EOS};
use crate::nn::{AttentionConfig, Encoder, Linear};
use crate::optim::{batch_gradients, check_finite, clip_grad_norm, AdamConfig, AdamW, LrSchedule};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;
use crate::tokenizer::batch_indices;

pub const CHECKPOINT_KIND: &str = "teacher";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Three-quarters of the student width by default.
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub text_layers: usize,
    pub image_layers: usize,
    pub conv_channels: usize,
    /// Number of stride-2 residual blocks; the feature grid is the image
    /// size divided by `2^blocks`.
    pub conv_blocks: usize,
    pub max_text_len: usize,
    pub codebook_size: usize,
    pub token_grid_h: usize,
    pub token_grid_w: usize,
    pub rel_pos_2d: bool,
    /// Softmax temperature of the distributions handed to the student.
    pub temperature: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            image_height: 64,
            image_width: 64,
            model_dim: 48,
            num_heads: 4,
            ffn_dim: 192,
            dropout: 0.1,
            text_layers: 2,
            image_layers: 3,
            conv_channels: 16,
            conv_blocks: 3,
            max_text_len: 64,
            codebook_size: 512,
            token_grid_h: 8,
            token_grid_w: 8,
            rel_pos_2d: true,
            temperature: 1.0,
        }
    }
}

impl TeacherConfig {
    pub fn validate(&self) -> Result<()> {
        let f = 1 << self.conv_blocks;
        if self.image_height % f != 0 || self.image_width % f != 0 {
            bail!(Config, "{}x{} images do not halve cleanly {} times", self.image_height, self.image_width, self.conv_blocks);
        }
        if self.conv_channels == 0 || self.codebook_size < 2 || self.max_text_len == 0 {
            bail!(Config, "teacher needs conv channels, a visual vocabulary and a text length");
        }
        if self.temperature <= 0.0 {
            bail!(Config, "temperature must be positive");
        }
        self.attention(false).validate()
    }

    /// Width three quarters of `student_dim`, rounded to a multiple of `heads`.
    pub fn scaled_width(student_dim: usize, heads: usize) -> usize {
        let w = (student_dim * 3).div_ceil(4);
        w.div_ceil(heads).max(1) * heads
    }

    pub fn feature_len(&self) -> usize {
        (self.image_height >> self.conv_blocks) * (self.image_width >> self.conv_blocks)
    }

    fn attention(&self, rel_pos: bool) -> AttentionConfig {
        AttentionConfig {
            dropout_rate: self.dropout,
            rel_pos_2d: rel_pos,
            ..AttentionConfig::new(self.model_dim, self.num_heads, self.ffn_dim)
        }
    }
}

#[derive(Clone, Debug)]
struct Conv {
    weight: ParamId,
    bias: ParamId,
    stride: usize,
    padding: usize,
}

impl Conv {
    fn new(ps: &mut ParamStore, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize, rng: &mut impl rand::Rng) -> Self {
        let std = (2.0 / (c_in * k * k) as f64).sqrt();
        Conv {
            weight: ps.normal(format!("{name}.weight"), &[c_out, c_in, k, k], std, rng),
            bias: ps.zeros(format!("{name}.bias"), &[c_out]),
            stride,
            padding: k / 2,
        }
    }

    fn forward(&self, t: &Tape, x: Var) -> Result<Var> {
        t.conv2d(x, t.param(self.weight), t.param(self.bias), self.stride, self.padding)
    }
}

/// `relu(conv(relu(conv_s2(x))) + proj_s2(x))`.
#[derive(Clone, Debug)]
struct ResBlock {
    a: Conv,
    b: Conv,
    skip: Conv,
}

impl ResBlock {
    fn forward(&self, t: &Tape, x: Var) -> Result<Var> {
        let h = t.relu(self.a.forward(t, x)?);
        let h = self.b.forward(t, h)?;
        Ok(t.relu(t.add(h, self.skip.forward(t, x)?)?))
    }
}

#[derive(Clone, Debug)]
pub struct TeacherModel {
    pub cfg: TeacherConfig,
    pub params: ParamStore,
    txt_embed: ParamId,
    txt_pos: ParamId,
    text_encoder: Encoder,
    stem: Conv,
    blocks: Vec<ResBlock>,
    feat_proj: Linear,
    feat_pos: ParamId,
    tok_embed: ParamId,
    tok_pos: ParamId,
    decoder: crate::nn::DualDecoder,
    head: Linear,
}

impl TeacherModel {
    pub fn new(cfg: TeacherConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, "teacher-init");
        let mut ps = ParamStore::new();
        let d = cfg.model_dim;
        let att = cfg.attention(false);
        let txt_embed = ps.normal("t2i.txt.embed", &[CHAR_VOCAB, d], 0.02, &mut rng);
        let txt_pos = ps.normal("t2i.txt.pos", &[cfg.max_text_len + 1, d], 0.02, &mut rng);
        let text_encoder = Encoder::new(&mut ps, "t2i.txt", &att, cfg.text_layers, &mut rng);
        let c = cfg.conv_channels;
        let stem = Conv::new(&mut ps, "t2i.conv.stem", 3, c, 3, 1, &mut rng);
        let blocks = (0..cfg.conv_blocks)
            .map(|i| {
                let n = format!("t2i.conv.block{i}");
                ResBlock {
                    a: Conv::new(&mut ps, &format!("{n}.a"), c, c, 3, 2, &mut rng),
                    b: Conv::new(&mut ps, &format!("{n}.b"), c, c, 3, 1, &mut rng),
                    skip: Conv::new(&mut ps, &format!("{n}.skip"), c, c, 1, 2, &mut rng),
                }
            })
            .collect();
        let feat_proj = Linear::new(&mut ps, "t2i.feat_proj", c, d, true, &mut rng);
        let feat_pos = ps.normal("t2i.feat_pos", &[cfg.feature_len(), d], 0.02, &mut rng);
        let grid = (cfg.token_grid_h, cfg.token_grid_w);
        let tok_embed = ps.normal("t2i.img.embed", &[cfg.codebook_size + 1, d], 0.02, &mut rng);
        let tok_pos = ps.normal("t2i.img.pos", &[grid.0 * grid.1, d], 0.02, &mut rng);
        let decoder = crate::nn::DualDecoder::new(&mut ps, "t2i.img", &cfg.attention(cfg.rel_pos_2d), cfg.image_layers, grid.0, grid.1, &mut rng);
        let head = Linear::new(&mut ps, "t2i.img.head", d, cfg.codebook_size, true, &mut rng);
        Ok(TeacherModel {
            cfg,
            params: ps,
            txt_embed,
            txt_pos,
            text_encoder,
            stem,
            blocks,
            feat_proj,
            feat_pos,
            tok_embed,
            tok_pos,
            decoder,
            head,
        })
    }

    /// Text states `[T+1, d]` over the target characters and an end symbol.
    pub fn encode_text(&self, t: &Tape, ids: &[usize]) -> Result<Var> {
        if ids.len() > self.cfg.max_text_len {
            bail!(Contract, "text of {} ids exceeds max_text_len {}", ids.len(), self.cfg.max_text_len);
        }
        let mut input = ids.to_vec();
        input.push(EOS);
        let positions: Vec<usize> = (0..input.len()).collect();
        let h = t.add(t.embedding(t.param(self.txt_embed), &input)?, t.embedding(t.param(self.txt_pos), &positions)?)?;
        self.text_encoder.forward(t, h, None)
    }

    /// Convolutional feature sequence `[feature_len, d]` of an `[H, W, 3]` image.
    pub fn encode_image(&self, t: &Tape, x: &Tensor) -> Result<Var> {
        let (h, w) = (self.cfg.image_height, self.cfg.image_width);
        if x.shape() != [h, w, 3] {
            bail!(Shape, "image tensor {:?} does not match the teacher's [{h}, {w}, 3]", x.shape());
        }
        // [H, W, C] -> [C, H, W], centred
        let mut chw = vec![0.0; 3 * h * w];
        for (i, v) in x.data().iter().enumerate() {
            chw[(i % 3) * h * w + i / 3] = 2.0 * v - 1.0;
        }
        let mut f = self.stem.forward(t, t.constant(Tensor::new(vec![3, h, w], chw)?))?;
        f = t.relu(f);
        for b in &self.blocks {
            f = b.forward(t, f)?;
        }
        let s = t.shape(f);
        let seq = t.transpose(t.reshape(f, &[s[0], s[1] * s[2]])?)?;
        let seq = self.feat_proj.forward(t, seq)?;
        t.add(seq, t.param(self.feat_pos))
    }

    /// Teacher-forced logits `[|z|, K]`.
    pub fn logits(&self, t: &Tape, x: &Tensor, ids: &[usize], z: &[usize]) -> Result<Var> {
        let k = self.cfg.codebook_size;
        if z.is_empty() || z.len() > self.cfg.token_grid_h * self.cfg.token_grid_w {
            bail!(Contract, "{} visual tokens for a {}x{} grid", z.len(), self.cfg.token_grid_h, self.cfg.token_grid_w);
        }
        if let Some(&bad) = z.iter().find(|&&v| v >= k) {
            bail!(Range, "visual token {bad} outside the vocabulary of {k}");
        }
        let txt = self.encode_text(t, ids)?;
        let img = self.encode_image(t, x)?;
        let mut input = vec![k];
        input.extend_from_slice(&z[..z.len() - 1]);
        let positions: Vec<usize> = (0..z.len()).collect();
        let h = t.add(t.embedding(t.param(self.tok_embed), &input)?, t.embedding(t.param(self.tok_pos), &positions)?)?;
        let h = self.decoder.forward(t, h, img, Some(txt))?;
        self.head.forward(t, h)
    }

    /// Row-major `[|z|, K]` probabilities at the configured temperature,
    /// from a single teacher-forced pass.
    pub fn distributions(&self, x: &Tensor, text: &str, z: &[usize]) -> Result<Vec<f64>> {
        let ids = text_ids(text)?;
        let t = Tape::with_params(&self.params);
        let l = self.logits(&t, x, &ids, z)?;
        let temp = self.cfg.temperature;
        Ok(t.with_value(l, |v| {
            v.chunks(self.cfg.codebook_size)
                .flat_map(|row| softmax(&row.iter().map(|x| x / temp).collect::<Vec<_>>()))
                .collect()
        }))
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        Checkpoint::from_store(CHECKPOINT_KIND, &self.cfg, step, &self.params)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let mut m = TeacherModel::new(c.config_as()?, 0)?;
        c.load_into(&mut m.params)?;
        Ok(m)
    }
}

/// One `(x, t, z)` training triple.
#[derive(Clone, Debug)]
pub struct TeacherExample {
    pub image: Tensor,
    pub text: Vec<usize>,
    pub tokens: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub clip_norm: f64,
    pub label_smoothing: f64,
    pub checkpoint_every: usize,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        TeacherTrainConfig {
            steps: 1500,
            batch_size: 8,
            schedule: LrSchedule { peak_lr: 2e-3, end_lr: 1e-4, warmup_steps: 50, total_steps: 1500, power: 1.0 },
            adam: AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 },
            clip_norm: 1.0,
            label_smoothing: 0.0,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherLog {
    pub step: usize,
    /// Mean cross-entropy per visual token, in nats.
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct TeacherRun {
    pub model: TeacherModel,
    pub opt: AdamW,
    pub step: usize,
}

impl TeacherRun {
    pub fn new(model: TeacherModel, cfg: &TeacherTrainConfig) -> Self {
        let opt = AdamW::new(&model.params, cfg.adam.clone());
        TeacherRun { model, opt, step: 0 }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut c = self.model.to_checkpoint(self.step as u64)?;
        c.arrays.extend(self.opt.state(&self.model.params));
        Ok(c)
    }

    pub fn resume(c: &Checkpoint, cfg: &TeacherTrainConfig) -> Result<Self> {
        let model = TeacherModel::from_checkpoint(c)?;
        let mut opt = AdamW::new(&model.params, cfg.adam.clone());
        opt.restore(&model.params, &c.arrays, c.step as usize)?;
        Ok(TeacherRun { model, opt, step: c.step as usize })
    }

    /// Per-token cross-entropy of one example on `t`.
    pub fn example_loss(model: &TeacherModel, t: &Tape, ex: &TeacherExample, smoothing: f64) -> Result<Var> {
        let l = model.logits(t, &ex.image, &ex.text, &ex.tokens)?;
        let ce = t.cross_entropy(l, &ex.tokens, smoothing)?;
        Ok(t.scale(ce, 1.0 / ex.tokens.len() as f64))
    }

    pub fn train(
        &mut self,
        data: &[TeacherExample],
        cfg: &TeacherTrainConfig,
        seed: u64,
        mut on_step: impl FnMut(&TeacherRun, &TeacherLog) -> Result<()>,
    ) -> Result<()> {
        if data.is_empty() {
            bail!(Config, "teacher training needs at least one example");
        }
        if cfg.batch_size == 0 {
            bail!(Config, "batch_size must be positive");
        }
        cfg.schedule.validate()?;
        while self.step < cfg.steps {
            let step = self.step;
            let batch = batch_indices(data.len(), cfg.batch_size, seed, step);
            let model = &self.model;
            let (sums, mut grads) = batch_gradients(&model.params, &batch, Some(rng::mix(seed, step as u64)), |t, i| {
                Ok(vec![Self::example_loss(model, t, &data[i], cfg.label_smoothing)?])
            })?;
            check_finite(&["teacher"], &sums, &grads, step)?;
            let grad_norm = clip_grad_norm(&mut grads, cfg.clip_norm);
            let lr = cfg.schedule.at(step);
            self.opt.update(&mut self.model.params, &grads, lr);
            self.step += 1;
            on_step(self, &TeacherLog { step, loss: sums[0], lr, grad_norm })?;
        }
        Ok(())
    }
}

/// Mean per-token loss and greedy teacher-forced argmax accuracy.
pub fn teacher_fit(model: &TeacherModel, data: &[TeacherExample]) -> Result<(f64, f64)> {
    let (mut loss, mut hits, mut total) = (0.0, 0usize, 0usize);
    for ex in data {
        let t = Tape::with_params(&model.params);
        let l = model.logits(&t, &ex.image, &ex.text, &ex.tokens)?;
        loss += t.scalar(t.cross_entropy(l, &ex.tokens, 0.0)?)? / ex.tokens.len() as f64;
        let k = model.cfg.codebook_size;
        t.with_value(l, |v| {
            for (row, &z) in v.chunks(k).zip(&ex.tokens) {
                hits += (crate::model::argmax(row) == z) as usize;
            }
        });
        total += ex.tokens.len();
    }
    Ok((loss / data.len().max(1) as f64, hits as f64 / total.max(1) as f64))
}
