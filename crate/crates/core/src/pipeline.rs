//! The command-level pipeline behind the `iimt` binary: dataset synthesis,
//! the three training stages, batch translation and evaluation, all rooted
//! in one output directory.
//!
//! ```text
//! {out}/dataset/                  images, manifests, summary.json
//! {out}/checkpoints/{stage}/      model.ckpt, run.ckpt, log.jsonl, summary.json
//! {out}/translations/             {id}.png, {id}.txt, manifest.jsonl, errors.jsonl
//! {out}/report/                   report.json, wer_buckets.csv
//! ```
//! Every directory also receives the effective configuration as `config.json`.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{bail, Error, Result};
use crate::eval::{evaluate_corpus, EvalConfig, MetricReport};
use crate::model::{text_ids, IimtConfig, IimtModel};
use crate::synth::dataset::{load_rgb, read_split, save_png};
use crate::synth::{build_dataset, ManifestRecord, SentencePair, SynthConfig, SynthSummary};
use crate::teacher::{teacher_fit, TeacherConfig, TeacherExample, TeacherModel, TeacherRun, TeacherTrainConfig};
use crate::tokenizer::{image_tensor, round_trip_mae, Stage1Config, Stage1Run, TokenizerConfig, TokenizerModel};
use crate::training::{evaluate_terms, IimtExample, Stage2Config, Stage2Run};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Master seed; every stage derives its randomness from it.
    pub seed: u64,
    pub synth: SynthConfig,
    pub tokenizer: TokenizerConfig,
    pub stage1: Stage1Config,
    pub teacher: TeacherConfig,
    pub teacher_train: TeacherTrainConfig,
    pub model: IimtConfig,
    pub stage2: Stage2Config,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    /// Reads a TOML file; every field may be given as a dotted key such as
    /// `stage2.alpha = 0.5`. Missing fields keep their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config: {e}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Tokenizer,
    Teacher,
    Iimt,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Tokenizer => "tokenizer",
            Stage::Teacher => "teacher",
            Stage::Iimt => "iimt",
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    /// Continue from `run.ckpt` in the stage directory.
    pub resume: bool,
    /// Stop (leaving a resumable `run.ckpt`) once this many steps are done.
    pub stop_after: Option<usize>,
}

/// Outcome of a batch command: items that failed while others succeeded.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchOutcome {
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: String,
    pub steps: usize,
    pub finished: bool,
    pub metrics: serde_json::Value,
}

pub struct Pipeline {
    pub cfg: PipelineConfig,
    pub root: PathBuf,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, root: impl Into<PathBuf>) -> Self {
        Pipeline { cfg, root: root.into() }
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(stage.name())
    }

    pub fn translations_dir(&self) -> PathBuf {
        self.root.join("translations")
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }

    fn echo_config(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.json");
        fs::write(&p, serde_json::to_string_pretty(&self.cfg)?).map_err(|e| Error::io(&p, e))
    }

    pub fn synth(&self, pairs: &[SentencePair]) -> Result<SynthSummary> {
        let dir = self.dataset_dir();
        let summary = build_dataset(pairs, &self.cfg.synth, self.cfg.seed, &dir)?;
        self.echo_config(&dir)?;
        Ok(summary)
    }

    fn split(&self, split: &str) -> Result<Vec<ManifestRecord>> {
        let dir = self.dataset_dir();
        if !dir.join(format!("manifest.{split}.jsonl")).exists() {
            bail!(Config, "no dataset at {}; run `iimt synth` first", dir.display());
        }
        read_split(&dir, split)
    }

    fn image(&self, rel: &str) -> Result<crate::Tensor> {
        Ok(image_tensor(&load_rgb(&self.dataset_dir().join(rel))?))
    }

    fn load_stage(&self, stage: Stage) -> Result<Checkpoint> {
        let p = self.stage_dir(stage).join("model.ckpt");
        if !p.exists() {
            bail!(Config, "no {} checkpoint at {}; run `iimt train {}` first", stage.name(), p.display(), stage.name());
        }
        Checkpoint::load(&p)
    }

    pub fn tokenizer(&self) -> Result<TokenizerModel> {
        TokenizerModel::from_checkpoint(&self.load_stage(Stage::Tokenizer)?)
    }

    pub fn teacher(&self) -> Result<TeacherModel> {
        TeacherModel::from_checkpoint(&self.load_stage(Stage::Teacher)?)
    }

    pub fn iimt(&self) -> Result<IimtModel> {
        IimtModel::from_checkpoint(&self.load_stage(Stage::Iimt)?)
    }

    pub fn train(&self, stage: Stage, opts: TrainOptions) -> Result<TrainSummary> {
        let dir = self.stage_dir(stage);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let resume = if opts.resume && dir.join("run.ckpt").exists() {
            Some(Checkpoint::load(&dir.join("run.ckpt"))?)
        } else {
            None
        };
        let start = resume.as_ref().map_or(0, |c| c.step as usize);
        let mut log = StepLogFile::open(&dir.join("log.jsonl"), start)?;
        let summary = match stage {
            Stage::Tokenizer => self.train_tokenizer(&dir, resume, opts, &mut log)?,
            Stage::Teacher => self.train_teacher(&dir, resume, opts, &mut log)?,
            Stage::Iimt => self.train_iimt(&dir, resume, opts, &mut log)?,
        };
        self.echo_config(&dir)?;
        let p = dir.join("summary.json");
        fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(|e| Error::io(&p, e))?;
        Ok(summary)
    }

    fn train_tokenizer(&self, dir: &Path, resume: Option<Checkpoint>, opts: TrainOptions, log: &mut StepLogFile) -> Result<TrainSummary> {
        let records = self.split("train")?;
        let images: Vec<crate::Tensor> = records
            .par_iter()
            .flat_map(|r| [self.image(&r.src_image_path), self.image(&r.tgt_image_path)])
            .collect::<Result<_>>()?;
        let mut cfg = self.cfg.stage1.clone();
        let mut run = match &resume {
            Some(c) => Stage1Run::resume(c, &cfg)?,
            None => Stage1Run::new(TokenizerModel::new(self.cfg.tokenizer.clone(), self.cfg.seed)?, &cfg),
        };
        let budget = cfg.steps;
        cfg.steps = opts.stop_after.map_or(budget, |s| s.min(budget));
        let every = cfg.checkpoint_every;
        run.train(&images, &cfg, self.cfg.seed, |r, l| {
            log.write(l)?;
            if every > 0 && r.step % every == 0 {
                r.checkpoint()?.save(&dir.join("run.ckpt"))?;
            }
            Ok(())
        })?;
        run.checkpoint()?.save(&dir.join("run.ckpt"))?;
        let finished = run.step >= budget;
        let mut metrics = serde_json::Value::Null;
        if finished {
            run.model.to_checkpoint(run.step as u64)?.save(&dir.join("model.ckpt"))?;
            let maes = images.par_iter().map(|x| round_trip_mae(&run.model, x)).collect::<Result<Vec<_>>>()?;
            let mut codes: Vec<usize> = images.par_iter().map(|x| run.model.encode_tensor(x)).collect::<Result<Vec<_>>>()?.concat();
            codes.sort_unstable();
            codes.dedup();
            metrics = serde_json::json!({
                "round_trip_mae": maes.iter().sum::<f64>() / maes.len() as f64,
                "codes_used": codes.len(),
            });
        }
        Ok(TrainSummary { stage: "tokenizer".into(), steps: run.step, finished, metrics })
    }

    fn teacher_data(&self, tok: &TokenizerModel, records: &[ManifestRecord], max_len: usize) -> Result<Vec<TeacherExample>> {
        let kept: Vec<&ManifestRecord> = records.iter().filter(|r| r.tgt_text.chars().count() <= max_len).collect();
        if kept.len() < records.len() {
            log::warn!("skipping {} records whose target text exceeds {max_len} characters", records.len() - kept.len());
        }
        kept.par_iter()
            .map(|r| {
                Ok(TeacherExample {
                    image: self.image(&r.src_image_path)?,
                    text: text_ids(&r.tgt_text)?,
                    tokens: tok.encode_tensor(&self.image(&r.tgt_image_path)?)?,
                })
            })
            .collect()
    }

    fn teacher_config(&self, tok: &TokenizerModel) -> TeacherConfig {
        let mut c = self.cfg.teacher.clone();
        c.image_height = tok.cfg.image_height;
        c.image_width = tok.cfg.image_width;
        c.codebook_size = tok.cfg.codebook_size;
        (c.token_grid_h, c.token_grid_w) = tok.cfg.grid();
        c
    }

    fn train_teacher(&self, dir: &Path, resume: Option<Checkpoint>, opts: TrainOptions, log: &mut StepLogFile) -> Result<TrainSummary> {
        let tok = self.tokenizer()?;
        let tcfg = self.teacher_config(&tok);
        let data = self.teacher_data(&tok, &self.split("train")?, tcfg.max_text_len)?;
        let mut cfg = self.cfg.teacher_train.clone();
        let mut run = match &resume {
            Some(c) => TeacherRun::resume(c, &cfg)?,
            None => TeacherRun::new(TeacherModel::new(tcfg, self.cfg.seed)?, &cfg),
        };
        let budget = cfg.steps;
        cfg.steps = opts.stop_after.map_or(budget, |s| s.min(budget));
        let every = cfg.checkpoint_every;
        run.train(&data, &cfg, self.cfg.seed, |r, l| {
            log.write(l)?;
            if every > 0 && r.step % every == 0 {
                r.checkpoint()?.save(&dir.join("run.ckpt"))?;
            }
            Ok(())
        })?;
        run.checkpoint()?.save(&dir.join("run.ckpt"))?;
        let finished = run.step >= budget;
        let mut metrics = serde_json::Value::Null;
        if finished {
            run.model.to_checkpoint(run.step as u64)?.save(&dir.join("model.ckpt"))?;
            let (loss, acc) = teacher_fit(&run.model, &data)?;
            metrics = serde_json::json!({ "loss_per_token": loss, "token_accuracy": acc });
        }
        Ok(TrainSummary { stage: "teacher".into(), steps: run.step, finished, metrics })
    }

    /// Prepared stage-2 examples of a split; teacher distributions are
    /// attached when a teacher is given.
    pub fn iimt_examples(
        &self,
        split: &str,
        tok: &TokenizerModel,
        teacher: Option<&TeacherModel>,
        max_len: usize,
    ) -> Result<Vec<IimtExample>> {
        let records = self.split(split)?;
        let kept: Vec<&ManifestRecord> = records
            .iter()
            .filter(|r| r.src_text.chars().count() <= max_len && r.tgt_text.chars().count() <= max_len)
            .collect();
        if kept.len() < records.len() {
            log::warn!("{split}: skipping {} records with text longer than {max_len}", records.len() - kept.len());
        }
        kept.par_iter()
            .map(|r| {
                let image = self.image(&r.src_image_path)?;
                let tokens = tok.encode_tensor(&self.image(&r.tgt_image_path)?)?;
                let teacher = match teacher {
                    Some(t) => Some(t.distributions(&image, &r.tgt_text, &tokens)?),
                    None => None,
                };
                Ok(IimtExample {
                    id: r.id.clone(),
                    image,
                    source_ids: text_ids(&r.src_text)?,
                    target_ids: text_ids(&r.tgt_text)?,
                    tokens,
                    teacher,
                })
            })
            .collect()
    }

    fn train_iimt(&self, dir: &Path, resume: Option<Checkpoint>, opts: TrainOptions, log: &mut StepLogFile) -> Result<TrainSummary> {
        let tok = self.tokenizer()?;
        let mut cfg = self.cfg.stage2.clone();
        cfg.seed = self.cfg.seed;
        let teacher = if cfg.gamma > 0.0 {
            let mut t = self.teacher()?;
            t.cfg.temperature = cfg.kd_temperature;
            Some(t)
        } else {
            None
        };
        let mut mcfg = self.cfg.model.clone();
        mcfg.match_tokenizer(&tok);
        mcfg.dropout = cfg.dropout;
        let train = self.iimt_examples("train", &tok, teacher.as_ref(), mcfg.max_text_len)?;
        let valid = self.iimt_examples("valid", &tok, teacher.as_ref(), mcfg.max_text_len)?;
        let mut run = match &resume {
            Some(c) => Stage2Run::resume(c, &cfg)?,
            None => Stage2Run::new(IimtModel::new(mcfg, self.cfg.seed)?, &cfg),
        };
        let budget = cfg.max_steps;
        let until = opts.stop_after.unwrap_or(budget);
        let mut valid_log = StepLogFile::open(&dir.join("valid.jsonl"), run.epoch)?;
        run.train_until(&train, &valid, &cfg, until, |l| log.write(l), |r, e| {
            valid_log.write(e)?;
            r.checkpoint()?.save(&dir.join("run.ckpt"))
        })?;
        run.checkpoint()?.save(&dir.join("run.ckpt"))?;
        let finished = run.step >= budget || run.stopped;
        let mut metrics = serde_json::Value::Null;
        if finished {
            let model = run.averaged()?;
            model.to_checkpoint(run.step as u64)?.save(&dir.join("model.ckpt"))?;
            cfg.dropout = 0.0;
            let terms = evaluate_terms(&model, &train, &cfg)?;
            metrics = serde_json::json!({
                "stopped_early": run.stopped,
                "best_valid": run.best,
                "averaged_checkpoints": run.recent.len(),
                "train_terms": { "l_total": terms[0], "l_iimt": terms[1], "l_ocr": terms[2], "l_tit": terms[3], "l_kd": terms[4] },
            });
        }
        Ok(TrainSummary { stage: "iimt".into(), steps: run.step, finished, metrics })
    }

    /// Translates `(name, path)` inputs into `{name}.png` and `{name}.txt`.
    /// Unreadable inputs are recorded in `errors.jsonl`; the rest proceed.
    pub fn translate(&self, inputs: &[(String, PathBuf)]) -> Result<BatchOutcome> {
        let tok = self.tokenizer()?;
        let model = self.iimt()?;
        let out = self.translations_dir();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let results: Vec<Result<serde_json::Value>> = inputs
            .par_iter()
            .map(|(name, path)| {
                let img = load_rgb(path)?;
                if img.dimensions() != (model.cfg.image_width as u32, model.cfg.image_height as u32) {
                    bail!(
                        Shape,
                        "{}: image is {}x{}, the model expects {}x{}",
                        path.display(),
                        img.width(),
                        img.height(),
                        model.cfg.image_width,
                        model.cfg.image_height
                    );
                }
                let r = model.translate(&img, &tok)?;
                save_png(&r.target_image, &out.join(format!("{name}.png")))?;
                let txt = out.join(format!("{name}.txt"));
                fs::write(&txt, format!("{}\n", r.target_text)).map_err(|e| Error::io(&txt, e))?;
                if r.truncated {
                    log::warn!("{name}: text decoding hit max_text_len");
                }
                Ok(serde_json::json!({ "id": name, "text": r.target_text, "tokens": r.visual_tokens, "truncated": r.truncated }))
            })
            .collect();
        let mut manifest = String::new();
        let mut errors = String::new();
        let mut outcome = BatchOutcome::default();
        for ((name, path), r) in inputs.iter().zip(results) {
            match r {
                Ok(v) => {
                    outcome.succeeded += 1;
                    manifest.push_str(&format!("{v}\n"));
                }
                Err(e) => {
                    outcome.failed += 1;
                    log::error!("{}: {e}", path.display());
                    let rec = serde_json::json!({ "id": name, "path": path.display().to_string(), "error": e.to_string() });
                    errors.push_str(&format!("{rec}\n"));
                }
            }
        }
        for (file, body) in [("manifest.jsonl", &manifest), ("errors.jsonl", &errors)] {
            let p = out.join(file);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        self.echo_config(&out)?;
        Ok(outcome)
    }

    /// Source images of a dataset split as translation inputs named by id.
    pub fn split_inputs(&self, split: &str) -> Result<Vec<(String, PathBuf)>> {
        Ok(self.split(split)?.into_iter().map(|r| (r.id, self.dataset_dir().join(r.src_image_path))).collect())
    }

    pub fn evaluate(&self, outputs: &Path, split: &str) -> Result<MetricReport> {
        if !outputs.is_dir() {
            bail!(Config, "outputs directory {} does not exist", outputs.display());
        }
        let records = self.split(split)?;
        let atlas = self.cfg.synth.render.atlas()?;
        let report = evaluate_corpus(outputs, &self.dataset_dir(), &records, &atlas, &self.cfg.eval)?;
        let dir = self.report_dir();
        report.write(&dir)?;
        self.echo_config(&dir)?;
        Ok(report)
    }
}

/// JSON-lines log that, on resume, keeps only records before the resume
/// point so a resumed run reproduces an uninterrupted log.
struct StepLogFile {
    file: fs::File,
    path: PathBuf,
}

impl StepLogFile {
    fn open(path: &Path, keep_before: usize) -> Result<Self> {
        let kept: String = match fs::read_to_string(path) {
            Ok(text) if keep_before > 0 => text.lines().take(keep_before).map(|l| format!("{l}\n")).collect(),
            _ => String::new(),
        };
        fs::write(path, kept).map_err(|e| Error::io(path, e))?;
        let file = fs::OpenOptions::new().append(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(StepLogFile { file, path: path.to_path_buf() })
    }

    fn write(&mut self, record: &impl Serialize) -> Result<()> {
        let line = serde_json::to_string(record)?;
        writeln!(self.file, "{line}").map_err(|e| Error::io(&self.path, e))
    }
}
