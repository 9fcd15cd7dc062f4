//! Trains a small image tokenizer on rendered text and reports the
//! round-trip reconstruction error.
//!
//! cargo run --release --example tokenizer -- [steps] [out_dir]

use std::path::Path;

use iimt::synth::dataset::save_png;
use iimt::synth::{render, toy_corpus, RenderSpec};
use iimt::tokenizer::{image_tensor, round_trip_mae, Stage1Config, Stage1Run, TokenizerConfig, TokenizerModel};

fn main() -> iimt::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let out = std::env::args().nth(2).unwrap_or_else(|| "tokenizer-example".into());
    let spec = RenderSpec::default();
    let atlas = spec.atlas()?;
    let images: Vec<_> = toy_corpus(16, 2)
        .iter()
        .enumerate()
        .filter_map(|(i, p)| render(&p.target, &spec, &atlas, i as u64).ok())
        .map(|s| s.image)
        .collect();
    let tensors: Vec<_> = images.iter().map(image_tensor).collect();

    let cfg = TokenizerConfig { model_dim: 32, code_dim: 8, ffn_dim: 64, codebook_size: 256, ..Default::default() };
    let mut s1 = Stage1Config { steps, ..Default::default() };
    s1.schedule.total_steps = steps;
    let mut run = Stage1Run::new(TokenizerModel::new(cfg, 1)?, &s1);
    run.train(&tensors, &s1, 1, |_, log| {
        if log.step % 50 == 0 {
            println!("step {:>4} recon {:.5} codebook {:.5} commitment {:.5}", log.step, log.recon, log.codebook, log.commitment);
        }
        Ok(())
    })?;

    let mae = tensors.iter().map(|x| round_trip_mae(&run.model, x)).sum::<iimt::Result<f64>>()? / tensors.len() as f64;
    let tokens = run.model.encode_image(&images[0])?;
    println!("{} images, mean round-trip MAE {mae:.4}", images.len());
    println!("first image as {} visual tokens: {:?}", tokens.len(), &tokens[..8.min(tokens.len())]);
    std::fs::create_dir_all(&out).map_err(|e| iimt::Error::io(&out, e))?;
    save_png(&images[0], &Path::new(&out).join("original.png"))?;
    save_png(&run.model.decode_tokens(&tokens)?, &Path::new(&out).join("reconstruction.png"))?;
    println!("wrote {out}/original.png and {out}/reconstruction.png");
    Ok(())
}
