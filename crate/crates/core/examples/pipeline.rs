//! The whole pipeline in-process at toy scale: synthesize, train the three
//! stages, translate the test split and score it.
//!
//! cargo run --release --example pipeline -- [out_dir]

use iimt::pipeline::{Pipeline, PipelineConfig, Stage, TrainOptions};
use iimt::synth::toy_corpus;

fn main() -> iimt::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "pipeline-example".into());
    let cfg = PipelineConfig::from_toml(include_str!("../configs/nano.toml"))?;
    let pipe = Pipeline::new(cfg, &out);

    let summary = pipe.synth(&toy_corpus(40, pipe.cfg.seed))?;
    println!("synth: {}", serde_json::to_string(&summary)?);
    for stage in [Stage::Tokenizer, Stage::Teacher, Stage::Iimt] {
        let s = pipe.train(stage, TrainOptions::default())?;
        println!("train {}: {} steps, {}", stage.name(), s.steps, s.metrics);
    }

    let inputs = pipe.split_inputs("test")?;
    let outcome = pipe.translate(&inputs)?;
    println!("translate: {} succeeded, {} failed", outcome.succeeded, outcome.failed);
    let report = pipe.evaluate(&pipe.translations_dir(), "test")?;
    println!(
        "evaluate: {} examples, BLEU {:.2}, Structure-BLEU {:.2}, SSIM {:.4}, WER {:.3}",
        report.examples, report.bleu, report.structure_bleu, report.ssim, report.wer
    );
    println!("outputs under {out}/");
    Ok(())
}
