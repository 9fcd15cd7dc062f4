//! Joint training of the translation model against a frozen tokenizer and
//! teacher: visual-token, source-text, target-text and distillation losses
//! under AdamW, with per-epoch validation, early stopping and averaging of
//! the last epoch checkpoints.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::{average_checkpoints, Checkpoint};
use crate::error::{bail, Result};
use crate::model::{text_io, IimtModel};
use crate::optim::{batch_gradients, check_finite, clip_grad_norm, AdamConfig, AdamW, LrSchedule};
use crate::rng;
use crate::tensor::Tensor;
use crate::tokenizer::batch_indices;

pub const RUN_KIND: &str = "iimt-run";
pub const TERMS: [&str; 5] = ["l_total", "l_iimt", "l_ocr", "l_tit", "l_kd"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    /// Weight of the source-text (OCR) loss.
    pub alpha: f64,
    /// Weight of the target-text (TIT) loss.
    pub beta_w: f64,
    /// Weight of the distillation loss.
    pub gamma: f64,
    pub schedule: LrSchedule,
    pub adam: AdamConfig,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub max_steps: usize,
    pub batch_size: usize,
    /// Steps per "epoch": the unit of validation, early stopping and
    /// checkpoint averaging.
    pub epoch_steps: usize,
    pub early_stop_patience: usize,
    pub avg_last_n: usize,
    /// Divide each loss by its token count before weighting.
    pub per_token: bool,
    pub kd_temperature: f64,
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            alpha: 1.0,
            beta_w: 1.0,
            gamma: 1.0,
            schedule: LrSchedule { peak_lr: 1e-3, end_lr: 1e-5, warmup_steps: 100, total_steps: 3000, power: 1.0 },
            adam: AdamConfig { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 },
            label_smoothing: 0.1,
            dropout: 0.1,
            max_steps: 3000,
            batch_size: 8,
            epoch_steps: 50,
            early_stop_patience: 10,
            avg_last_n: 10,
            per_token: true,
            kd_temperature: 1.0,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl Stage2Config {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta_w, self.gamma].iter().any(|w| !(*w >= 0.0)) {
            bail!(Config, "loss weights must be non-negative");
        }
        if self.early_stop_patience == 0 || self.avg_last_n == 0 {
            bail!(Config, "early_stop_patience and avg_last_n must be at least 1");
        }
        if self.batch_size == 0 || self.epoch_steps == 0 {
            bail!(Config, "batch_size and epoch_steps must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) || !(0.0..1.0).contains(&self.dropout) {
            bail!(Config, "label_smoothing and dropout must lie in [0,1)");
        }
        if self.kd_temperature <= 0.0 {
            bail!(Config, "kd_temperature must be positive");
        }
        self.schedule.validate()
    }
}

/// One prepared training record.
#[derive(Clone, Debug)]
pub struct IimtExample {
    pub id: String,
    /// Source image `[H, W, 3]`.
    pub image: Tensor,
    pub source_ids: Vec<usize>,
    pub target_ids: Vec<usize>,
    /// Visual tokens of the target image under the frozen tokenizer.
    pub tokens: Vec<usize>,
    /// Teacher probabilities `[|tokens|, K]`, row-major.
    pub teacher: Option<Vec<f64>>,
}

/// Scalar losses of one example; `total` carries the gradient.
#[derive(Clone, Copy, Debug)]
pub struct Stage2Terms {
    pub total: Var,
    pub iimt: Var,
    pub ocr: Var,
    pub tit: Var,
    pub kd: Var,
}

impl Stage2Terms {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.total, self.iimt, self.ocr, self.tit, self.kd]
    }
}

fn normalize(t: &Tape, v: Var, count: usize, per_token: bool) -> Var {
    if per_token {
        t.scale(v, 1.0 / count.max(1) as f64)
    } else {
        v
    }
}

/// Label-smoothed cross-entropy of visual-token logits `[|z|, K]`.
pub fn loss_iimt(t: &Tape, logits: Var, z: &[usize], smoothing: f64, per_token: bool) -> Result<Var> {
    Ok(normalize(t, t.cross_entropy(logits, z, smoothing)?, z.len(), per_token))
}

/// Label-smoothed cross-entropy of character logits against `ids + [EOS]`.
pub fn loss_text(t: &Tape, logits: Var, ids: &[usize], smoothing: f64, per_token: bool) -> Result<Var> {
    let (_, target) = text_io(ids);
    Ok(normalize(t, t.cross_entropy(logits, &target, smoothing)?, target.len(), per_token))
}

/// Cross-entropy of the student's visual-token distributions against the
/// teacher's, summed over steps and codes.
pub fn loss_kd(t: &Tape, logits: Var, teacher: &[f64], steps: usize, per_token: bool) -> Result<Var> {
    Ok(normalize(t, t.soft_cross_entropy(logits, teacher)?, steps, per_token))
}

/// All four losses and their weighted sum for one example.
pub fn stage2_terms(model: &IimtModel, t: &Tape, ex: &IimtExample, cfg: &Stage2Config) -> Result<Stage2Terms> {
    let (src_in, _) = text_io(&ex.source_ids);
    let (tgt_in, _) = text_io(&ex.target_ids);
    let out = model.forward(t, &ex.image, &src_in, &tgt_in, &ex.tokens)?;
    let s = cfg.label_smoothing;
    let iimt = loss_iimt(t, out.image, &ex.tokens, s, cfg.per_token)?;
    let ocr = loss_text(t, out.source_text, &ex.source_ids, s, cfg.per_token)?;
    let zero = || t.constant(Tensor::scalar(0.0));
    let tit = match out.target_text {
        Some(l) => loss_text(t, l, &ex.target_ids, s, cfg.per_token)?,
        None => zero(),
    };
    let kd = match &ex.teacher {
        Some(q) => loss_kd(t, out.image, q, ex.tokens.len(), cfg.per_token)?,
        None => zero(),
    };
    let mut total = iimt;
    for (w, v) in [(cfg.alpha, ocr), (cfg.beta_w, tit), (cfg.gamma, kd)] {
        if w != 0.0 {
            total = t.add(total, t.scale(v, w))?;
        }
    }
    Ok(Stage2Terms { total, iimt, ocr, tit, kd })
}

/// Mean of every term over `data`, evaluated without dropout.
pub fn evaluate_terms(model: &IimtModel, data: &[IimtExample], cfg: &Stage2Config) -> Result<[f64; 5]> {
    let per: Vec<Result<Vec<f64>>> = data
        .par_iter()
        .map(|ex| {
            let t = Tape::with_params(&model.params);
            let terms = stage2_terms(model, &t, ex, cfg)?;
            terms.vars().into_iter().map(|v| t.scalar(v)).collect()
        })
        .collect();
    let mut acc = [0.0; 5];
    for p in per {
        for (a, v) in acc.iter_mut().zip(p?) {
            *a += v / data.len().max(1) as f64;
        }
    }
    Ok(acc)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_iimt: f64,
    pub l_ocr: f64,
    pub l_tit: f64,
    pub l_kd: f64,
    pub l_total: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: usize,
    pub valid_total: Option<f64>,
    pub best: Option<f64>,
    pub bad_epochs: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
struct RunMeta {
    best: Option<f64>,
    bad_epochs: usize,
    stopped: bool,
    epoch: usize,
}

pub struct Stage2Run {
    pub model: IimtModel,
    pub opt: AdamW,
    pub step: usize,
    pub epoch: usize,
    pub best: Option<f64>,
    pub bad_epochs: usize,
    pub stopped: bool,
    /// Parameters at the end of the most recent epochs, oldest first.
    pub recent: Vec<Checkpoint>,
}

impl Stage2Run {
    pub fn new(model: IimtModel, cfg: &Stage2Config) -> Self {
        let opt = AdamW::new(&model.params, cfg.adam.clone());
        Stage2Run { model, opt, step: 0, epoch: 0, best: None, bad_epochs: 0, stopped: false, recent: Vec::new() }
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = RunMeta { best: self.best, bad_epochs: self.bad_epochs, stopped: self.stopped, epoch: self.epoch };
        let mut c = Checkpoint {
            kind: RUN_KIND.into(),
            config: serde_json::json!({ "model": self.model.cfg, "run": meta }),
            step: self.step as u64,
            arrays: self.model.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect(),
        };
        c.arrays.extend(self.opt.state(&self.model.params));
        for (j, e) in self.recent.iter().enumerate() {
            c.arrays.extend(e.arrays.iter().map(|(n, t)| (format!("recent.{j}.{n}"), t.clone())));
        }
        Ok(c)
    }

    pub fn resume(c: &Checkpoint, cfg: &Stage2Config) -> Result<Self> {
        c.expect_kind(RUN_KIND)?;
        let model_cfg = serde_json::from_value(c.config["model"].clone())?;
        let meta: RunMeta = serde_json::from_value(c.config["run"].clone())?;
        let mut model = IimtModel::new(model_cfg, 0)?;
        c.load_into(&mut model.params)?;
        let mut opt = AdamW::new(&model.params, cfg.adam.clone());
        opt.restore(&model.params, &c.arrays, c.step as usize)?;
        let mut recent = Vec::new();
        for j in 0.. {
            let prefix = format!("recent.{j}.");
            let arrays: Vec<(String, Tensor)> = c
                .arrays
                .iter()
                .filter_map(|(n, t)| n.strip_prefix(&prefix).map(|s| (s.to_string(), t.clone())))
                .collect();
            if arrays.is_empty() {
                break;
            }
            recent.push(Checkpoint { arrays, ..model.to_checkpoint(0)? });
        }
        Ok(Stage2Run {
            model,
            opt,
            step: c.step as usize,
            epoch: meta.epoch,
            best: meta.best,
            bad_epochs: meta.bad_epochs,
            stopped: meta.stopped,
            recent,
        })
    }

    /// Trains until the step budget is spent or validation stops improving
    /// for `early_stop_patience` epochs. `on_step` sees each step log;
    /// `on_epoch` runs after each epoch's bookkeeping and may persist the run.
    pub fn train(
        &mut self,
        train: &[IimtExample],
        valid: &[IimtExample],
        cfg: &Stage2Config,
        on_step: impl FnMut(&StepLog) -> Result<()>,
        on_epoch: impl FnMut(&Stage2Run, &EpochLog) -> Result<()>,
    ) -> Result<()> {
        self.train_until(train, valid, cfg, cfg.max_steps, on_step, on_epoch)
    }

    /// [`train`](Self::train), pausing once `until` steps are done. A paused
    /// run resumes exactly as if it had never stopped.
    pub fn train_until(
        &mut self,
        train: &[IimtExample],
        valid: &[IimtExample],
        cfg: &Stage2Config,
        until: usize,
        mut on_step: impl FnMut(&StepLog) -> Result<()>,
        mut on_epoch: impl FnMut(&Stage2Run, &EpochLog) -> Result<()>,
    ) -> Result<()> {
        cfg.validate()?;
        if train.is_empty() {
            bail!(Config, "stage-2 training needs at least one example");
        }
        if cfg.gamma > 0.0 && train.iter().chain(valid).any(|e| e.teacher.is_none()) {
            bail!(Config, "gamma > 0 needs teacher distributions for every example");
        }
        while self.step < cfg.max_steps.min(until) && !self.stopped {
            let step = self.step;
            let batch = batch_indices(train.len(), cfg.batch_size, cfg.seed, step);
            let model = &self.model;
            let dropout = (cfg.dropout > 0.0).then(|| rng::mix(cfg.seed, step as u64));
            let (sums, mut grads) = batch_gradients(&model.params, &batch, dropout, |t, i| {
                Ok(stage2_terms(model, t, &train[i], cfg)?.vars())
            })?;
            check_finite(&TERMS, &sums, &grads, step)?;
            clip_grad_norm(&mut grads, cfg.clip_norm);
            let lr = cfg.schedule.at(step);
            self.opt.update(&mut self.model.params, &grads, lr);
            self.step += 1;
            on_step(&StepLog { step, l_total: sums[0], l_iimt: sums[1], l_ocr: sums[2], l_tit: sums[3], l_kd: sums[4], lr })?;
            if self.step % cfg.epoch_steps == 0 || self.step == cfg.max_steps {
                let log = self.end_epoch(valid, cfg)?;
                on_epoch(self, &log)?;
            }
        }
        Ok(())
    }

    fn end_epoch(&mut self, valid: &[IimtExample], cfg: &Stage2Config) -> Result<EpochLog> {
        self.epoch += 1;
        self.recent.push(self.model.to_checkpoint(self.step as u64)?);
        if self.recent.len() > cfg.avg_last_n {
            self.recent.remove(0);
        }
        let valid_total = if valid.is_empty() {
            None
        } else {
            let v = evaluate_terms(&self.model, valid, cfg)?[0];
            if !v.is_finite() {
                return Err(crate::Error::NonFinite { term: "validation l_total".into(), step: self.step });
            }
            Some(v)
        };
        if let Some(v) = valid_total {
            if self.best.is_none_or(|b| v < b) {
                self.best = Some(v);
                self.bad_epochs = 0;
            } else {
                self.bad_epochs += 1;
                self.stopped = self.bad_epochs >= cfg.early_stop_patience;
            }
        }
        Ok(EpochLog { epoch: self.epoch, step: self.step, valid_total, best: self.best, bad_epochs: self.bad_epochs })
    }

    /// Mean of the retained epoch checkpoints (the live parameters if no
    /// epoch has finished).
    pub fn averaged(&self) -> Result<IimtModel> {
        let mut m = self.model.clone();
        if !self.recent.is_empty() {
            average_checkpoints(&self.recent)?.load_into(&mut m.params)?;
        }
        Ok(m)
    }
}

/// Exact-match rates of greedy decoding on `data`: target text, and visual
/// tokens under the full two-pass inference.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub text_exact: f64,
    pub tokens_exact: f64,
    pub token_accuracy: f64,
}

pub fn fit_report(model: &IimtModel, data: &[IimtExample]) -> Result<FitReport> {
    let per: Vec<Result<(bool, bool, usize)>> = data
        .par_iter()
        .map(|ex| {
            let enc = {
                let t = Tape::with_params(&model.params);
                t.value(model.encode(&t, &ex.image)?.last)
            };
            let (ids, _) = model.decode_target_text(&enc)?;
            let states = if model.has_target_decoder() {
                let t = Tape::with_params(&model.params);
                let e = crate::model::EncoderStates { last: t.constant(enc.clone()), tapped: t.constant(enc.clone()) };
                Some(t.value(model.target_text(&t, &e, &text_io(&ids).0)?.0))
            } else {
                None
            };
            let z = model.decode_image_tokens(&enc, states.as_ref())?;
            let hits = z.iter().zip(&ex.tokens).filter(|(a, b)| a == b).count();
            Ok((ids == ex.target_ids, z == ex.tokens, hits))
        })
        .collect();
    let (mut text, mut toks, mut hits, mut total) = (0, 0, 0, 0);
    for (p, ex) in per.into_iter().zip(data) {
        let (a, b, h) = p?;
        text += a as usize;
        toks += b as usize;
        hits += h;
        total += ex.tokens.len();
    }
    let n = data.len().max(1) as f64;
    Ok(FitReport { text_exact: text as f64 / n, tokens_exact: toks as f64 / n, token_accuracy: hits as f64 / total.max(1) as f64 })
}
