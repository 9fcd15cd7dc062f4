//! Renders toy sentence pairs into images and writes them to a directory.
//!
//! cargo run --release --example synth -- [out_dir]

use iimt::eval::oracle_ocr;
use std::path::Path;

use iimt::synth::dataset::save_png;
use iimt::synth::{synth_pair, toy_corpus, RenderSpec};

fn main() -> iimt::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "synth-example".into());
    std::fs::create_dir_all(&out).map_err(|e| iimt::Error::io(&out, e))?;
    let spec = RenderSpec::default();
    let atlas = spec.atlas()?;
    for (i, p) in toy_corpus(4, 5).iter().enumerate() {
        let pair = synth_pair(&p.source, &p.target, &spec, &atlas, i as u64)?;
        for (side, s) in [("src", &pair.source), ("tgt", &pair.target)] {
            let path = Path::new(&out).join(format!("{i}_{side}.png"));
            save_png(&s.image, &path)?;
            println!("{}: {:?} rotated {:.2} deg, shifted {:?}, read back as {:?}",
                path.display(), s.text, s.transform.rotation_deg, s.transform.translation_px, oracle_ocr(&s.image, &atlas).text());
        }
    }
    Ok(())
}
