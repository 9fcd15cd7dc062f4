//! Trains the text-to-image teacher to predict the visual tokens of
//! rendered target sentences, then shows its soft targets.

use iimt::model::text_ids;
use iimt::synth::{render, toy_corpus, RenderSpec};
use iimt::teacher::{teacher_fit, TeacherConfig, TeacherExample, TeacherModel, TeacherRun, TeacherTrainConfig};
use iimt::tokenizer::{image_tensor, TokenizerConfig, TokenizerModel};

fn main() -> iimt::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(150);
    let spec = RenderSpec::default();
    let atlas = spec.atlas()?;
    // an untrained tokenizer still gives a fixed image-to-token map to learn
    let tok = TokenizerModel::new(TokenizerConfig { codebook_size: 64, model_dim: 16, ffn_dim: 32, ..Default::default() }, 4)?;
    let data: Vec<TeacherExample> = toy_corpus(12, 8)
        .iter()
        .enumerate()
        .filter_map(|(i, p)| render(&p.target, &spec, &atlas, i as u64).ok())
        .map(|s| {
            Ok(TeacherExample { image: image_tensor(&s.image), text: text_ids(&s.text)?, tokens: tok.encode_image(&s.image)? })
        })
        .collect::<iimt::Result<_>>()?;

    let cfg = TeacherConfig {
        model_dim: 24,
        ffn_dim: 48,
        text_layers: 1,
        image_layers: 2,
        conv_channels: 8,
        conv_blocks: 2,
        dropout: 0.0,
        codebook_size: tok.cfg.codebook_size,
        ..Default::default()
    };
    let mut tc = TeacherTrainConfig { steps, ..Default::default() };
    tc.schedule.total_steps = steps;
    let mut run = TeacherRun::new(TeacherModel::new(cfg, 2)?, &tc);
    run.train(&data, &tc, 2, |_, log| {
        if log.step % 25 == 0 {
            println!("step {:>4} loss {:.4}", log.step, log.loss);
        }
        Ok(())
    })?;
    let (loss, acc) = teacher_fit(&run.model, &data)?;
    println!("per-token loss {loss:.4}, token accuracy {acc:.3}");

    let ex = &data[0];
    let text = iimt::model::ids_text(&ex.text);
    let probs = run.model.distributions(&ex.image, &text, &ex.tokens)?;
    let k = run.model.cfg.codebook_size;
    for (pos, row) in probs.chunks(k).take(4).enumerate() {
        let best = row.iter().cloned().enumerate().fold((0, 0.0), |a, (i, p)| if p > a.1 { (i, p) } else { a });
        println!("position {pos}: gold token {}, teacher top {} at p={:.3}", ex.tokens[pos], best.0, best.1);
    }
    Ok(())
}
