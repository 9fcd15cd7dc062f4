//! Oracle OCR, BLEU, Structure-BLEU and SSIM on rendered images: a perfect
//! output, a displaced copy and a noisy copy of the same reference.

use iimt::eval::{bleu, oracle_ocr, ssim, structure_bleu};
use iimt::synth::render::{render_layout, Layout};
use iimt::synth::{RenderSpec, RigidTransform};

fn main() -> iimt::Result<()> {
    let spec = RenderSpec { height: 96, width: 96, max_rotation_deg: 0.0, ..RenderSpec::default() };
    let atlas = spec.atlas()?;
    let text = "the old man reads a book";
    let layout = Layout::new(text, &spec, &atlas)?;
    let at = |dy| render_layout(text, &layout, RigidTransform { rotation_deg: 0.0, translation_px: [0, dy] }, [220, 220, 200], &spec, &atlas);
    let reference = at(0);

    let mut noisy = reference.image.clone();
    let mut rng = iimt::rng::rng(3);
    for p in noisy.pixels_mut() {
        for c in p.0.iter_mut() {
            *c = (*c as i32 + rand::Rng::random_range(&mut rng, -40..=40)).clamp(0, 255) as u8;
        }
    }

    let ref_text = oracle_ocr(&reference.image, &atlas).text();
    println!("reference reads {ref_text:?}");
    for (name, img) in [("identical", reference.image.clone()), ("moved 30px down", at(30).image), ("noisy", noisy)] {
        let hyp = oracle_ocr(&img, &atlas).text();
        let b = bleu(&[hyp.clone()], &[ref_text.clone()])?;
        let (sb, m) = structure_bleu(&img, &reference.image, &atlas);
        println!(
            "{name:>16}: ocr {hyp:?} bleu {b:.1} structure-bleu {:.1} ({} matched, {} unmatched) ssim {:.4}",
            sb.score,
            m.pairs.len(),
            m.unmatched,
            ssim(&img, &reference.image)?
        );
    }
    Ok(())
}
