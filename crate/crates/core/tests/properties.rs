mod common;

use std::collections::HashMap;

use image::{Rgb, RgbImage};
use iimt::checkpoint::{average_checkpoints, Checkpoint};
use iimt::eval::metrics::{bleu, iou, wer};
use iimt::eval::ssim::ssim_channel;
use iimt::eval::{match_boxes, ssim};
use iimt::model::{softmax, text_io, IimtModel};
use iimt::nn::GatedFusion;
use iimt::synth::dataset::{read_manifest, write_manifest};
use iimt::synth::{BBox, ManifestRecord, TextBox};
use iimt::tokenizer::{quantize, Codebook};
use iimt::training::{loss_iimt, loss_kd, stage2_terms, Stage2Config};
use iimt::{rng, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;

use common::cases::{jitter, micro_example, micro_iimt_config};
use common::oracles::{bleu_oracle, edit_oracle, ssim_direct};

// ---- BLEU -----------------------------------------------------------------

fn sentence(max: usize) -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "the", "dog"]).prop_map(String::from), 0..max)
}

fn corpus() -> impl Strategy<Value = Vec<(Vec<String>, Vec<String>)>> {
    prop::collection::vec((sentence(9), sentence(9)), 1..6)
}

proptest! {
    #[test]
    fn bleu_matches_enumeration_oracle(c in corpus()) {
        let hyps: Vec<String> = c.iter().map(|(h, _)| h.join(" ")).collect();
        let refs: Vec<String> = c.iter().map(|(_, r)| r.join(" ")).collect();
        let h: Vec<Vec<String>> = c.iter().map(|(h, _)| h.clone()).collect();
        let r: Vec<Vec<String>> = c.iter().map(|(_, r)| r.clone()).collect();
        let got = bleu(&hyps, &refs).unwrap();
        prop_assert!((got - bleu_oracle(&h, &r)).abs() <= 1e-9, "{got} vs {}", bleu_oracle(&h, &r));
        prop_assert!((0.0..=100.0).contains(&got));
    }

    #[test]
    fn bleu_of_identity_is_100_when_4grams_exist(c in prop::collection::vec(sentence(9), 1..5)) {
        let s: Vec<String> = c.iter().map(|w| w.join(" ")).collect();
        let got = bleu(&s, &s).unwrap();
        if c.iter().any(|w| w.len() >= 4) {
            prop_assert!((got - 100.0).abs() < 1e-9);
        } else {
            prop_assert_eq!(got, 0.0);
        }
    }
}

// ---- WER ------------------------------------------------------------------

proptest! {
    #[test]
    fn wer_matches_recursive_edit_distance(h in sentence(6), r in sentence(6)) {
        let got = wer(&h.join(" "), &r.join(" "));
        if r.is_empty() {
            prop_assert!(got.is_err());
        } else {
            let want = edit_oracle(&h, &r) as f64 / r.len() as f64;
            prop_assert!((got.unwrap() - want).abs() < 1e-12);
        }
    }
}

// ---- IoU and box matching -------------------------------------------------

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..50.0f64, 0.0..50.0f64, 0.5..30.0f64, 0.5..30.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h).unwrap())
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matching_keeps_exactly_the_best_pairs_above_half(gens in prop::collection::vec(bbox(), 0..5), refs in prop::collection::vec(bbox(), 0..5)) {
        let tb = |b: &BBox, i: usize| TextBox { text: format!("w{i}"), bbox: *b };
        let g: Vec<TextBox> = gens.iter().enumerate().map(|(i, b)| tb(b, i)).collect();
        let r: Vec<TextBox> = refs.iter().enumerate().map(|(i, b)| tb(b, i)).collect();
        let m = match_boxes(&g, &r);
        prop_assert_eq!(m.pairs.len() + m.unmatched, g.len());
        for p in &m.pairs {
            prop_assert!(p.iou >= 0.5);
            let best = r.iter().map(|x| iou(&p.hyp.bbox, &x.bbox)).fold(0.0, f64::max);
            prop_assert_eq!(p.iou, best);
            // earliest reference wins a tie
            let first = r.iter().position(|x| iou(&p.hyp.bbox, &x.bbox) == best).unwrap();
            prop_assert_eq!(&p.reference, &r[first]);
        }
    }
}

// ---- SSIM -----------------------------------------------------------------

fn rgb_image(w: u32, h: u32) -> impl Strategy<Value = RgbImage> {
    prop::collection::vec(any::<u8>(), (w * h * 3) as usize)
        .prop_map(move |v| RgbImage::from_raw(w, h, v).unwrap())
}

proptest! {
    #[test]
    fn ssim_matches_direct_window_on_8x8(a in rgb_image(8, 8), b in rgb_image(8, 8)) {
        for c in 0..3 {
            let ca: Vec<f64> = a.pixels().map(|p| p.0[c] as f64).collect();
            let cb: Vec<f64> = b.pixels().map(|p| p.0[c] as f64).collect();
            let got = ssim_channel(&ca, &cb, 8, 8);
            prop_assert!((got - ssim_direct(&ca, &cb, 8, 8)).abs() < 1e-9);
        }
    }

    #[test]
    fn ssim_is_symmetric_and_maximal_on_identity(a in rgb_image(9, 7), b in rgb_image(9, 7)) {
        let ab = ssim(&a, &b).unwrap();
        prop_assert!((ab - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ab <= 1.0 + 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-9);
    }
}

// ---- quantizer ------------------------------------------------------------

proptest! {
    #[test]
    fn quantizer_matches_exhaustive_search(
        dim in 1usize..4,
        k in 1usize..9,
        seed in any::<u64>(),
    ) {
        // small integer values make exact distance ties common
        let mut r = rng::rng(seed);
        let entries: Vec<f64> = (0..k * dim).map(|_| r.random_range(-2..3) as f64).collect();
        let v: Vec<f64> = (0..dim).map(|_| r.random_range(-2..3) as f64).collect();
        let (idx, d) = quantize(&v, &Codebook { entries: &entries, dim }).unwrap();
        let dists: Vec<f64> = entries.chunks(dim).map(|e| e.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum()).collect();
        let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(idx, dists.iter().position(|&x| x == min).unwrap());
        prop_assert_eq!(d, min);
    }
}

// ---- manifests and checkpoints ---------------------------------------------

fn record() -> impl Strategy<Value = ManifestRecord> {
    ("[a-z]{1,8}", "[a-zäöüß ]{1,20}", "[a-z ]{1,20}", bbox(), -8.0..8.0f64, -4i64..5, -4i64..5).prop_map(
        |(id, s, t, b, rot, dx, dy)| ManifestRecord {
            id: id.clone(),
            src_image_path: format!("images/{id}.src.png"),
            tgt_image_path: format!("images/{id}.tgt.png"),
            src_text: s.clone(),
            tgt_text: t.clone(),
            src_boxes: vec![TextBox { text: s, bbox: b }],
            tgt_boxes: vec![TextBox { text: t, bbox: b }],
            rotation_deg: rot,
            translation_px: [dx, dy],
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn manifest_round_trips(records in prop::collection::vec(record(), 0..6)) {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        write_manifest(&p, &records).unwrap();
        prop_assert_eq!(read_manifest(&p).unwrap(), records);
    }

    #[test]
    fn checkpoint_bytes_round_trip(vals in prop::collection::vec(-1e6..1e6f64, 1..20), step in any::<u64>()) {
        let mut ps = ParamStore::new();
        ps.add("a.weight", Tensor::new(vec![vals.len()], vals.clone()).unwrap());
        ps.add("b", Tensor::scalar(vals[0]));
        let c = Checkpoint::from_store("test", &serde_json::json!({"x": 1}), step, &ps).unwrap();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.step, step);
        let mut restored = ps.clone();
        restored.value_mut(0).data_mut().iter_mut().for_each(|v| *v = 0.0);
        back.load_into(&mut restored).unwrap();
        prop_assert!(restored.bitwise_eq(&ps));
    }

    #[test]
    fn averaging_is_the_elementwise_mean(n in 1usize..5, len in 1usize..6, seed in any::<u64>()) {
        let mut r = rng::rng(seed);
        let stores: Vec<ParamStore> = (0..n).map(|_| {
            let mut ps = ParamStore::new();
            ps.add("w", Tensor::from_fn(&[len], |_| r.random_range(-1.0..1.0)));
            ps
        }).collect();
        let cks: Vec<Checkpoint> = stores.iter().map(|s| Checkpoint::from_store("t", &0, 0, s).unwrap()).collect();
        let avg = average_checkpoints(&cks).unwrap();
        let got = avg.get("w").unwrap();
        for j in 0..len {
            let want = stores.iter().map(|s| s.value(0).data()[j]).sum::<f64>() / n as f64;
            prop_assert!((got.data()[j] - want).abs() < 1e-12);
        }
    }
}

// ---- model-level invariants -------------------------------------------------

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn gated_fusion_stays_in_the_convex_hull(seed in any::<u64>()) {
        let mut ps = ParamStore::new();
        let mut r = rng::rng(seed);
        let g = GatedFusion::new(&mut ps, "g", 6, &mut r);
        let a = Tensor::from_fn(&[3, 6], |_| r.random_range(-3.0..3.0));
        let b = Tensor::from_fn(&[3, 6], |_| r.random_range(-3.0..3.0));
        let t = Tape::with_params(&ps);
        let out = g.forward(&t, t.constant(a.clone()), t.constant(b.clone())).unwrap();
        let gate = g.gate(&t, t.constant(a.clone()), t.constant(b.clone())).unwrap();
        for ((o, x), (y, l)) in t.value(out).data().iter().zip(a.data()).zip(b.data().iter().zip(t.value(gate).data())) {
            prop_assert!(*l > 0.0 && *l < 1.0);
            prop_assert!(*o >= x.min(*y) - 1e-12 && *o <= x.max(*y) + 1e-12);
            prop_assert!((o - (l * x + (1.0 - l) * y)).abs() < 1e-12);
        }
    }

    #[test]
    fn decoders_are_causal(seed in any::<u64>(), pos in 0usize..4) {
        let cfg = micro_iimt_config();
        let mut m = IimtModel::new(cfg.clone(), seed).unwrap();
        jitter(&mut m.params, seed);
        let ex = micro_example(&cfg, seed);
        let (src_in, _) = text_io(&ex.source_ids);
        let (tgt_in, _) = text_io(&ex.target_ids);
        let run = |tokens: &[usize], tgt: &[usize]| {
            let t = Tape::with_params(&m.params);
            let o = m.forward(&t, &ex.image, &src_in, tgt, tokens).unwrap();
            (t.value(o.image), t.value(o.target_text.unwrap()))
        };
        let (img0, txt0) = run(&ex.tokens, &tgt_in);
        let mut tokens = ex.tokens.clone();
        tokens[pos] = (tokens[pos] + 1) % cfg.codebook_size;
        let (img1, _) = run(&tokens, &tgt_in);
        let k = cfg.codebook_size;
        // logits row i predicts token i from tokens before it
        prop_assert_eq!(&img0.data()[..(pos + 1) * k], &img1.data()[..(pos + 1) * k]);
        if pos + 1 < tokens.len() {
            prop_assert_ne!(&img0.data()[(pos + 1) * k..], &img1.data()[(pos + 1) * k..]);
        }
        let tp = pos.min(tgt_in.len() - 1);
        let mut tgt = tgt_in.clone();
        tgt[tp] = 120;
        let (_, txt1) = run(&ex.tokens, &tgt);
        prop_assert_eq!(&txt0.data()[..tp * 256], &txt1.data()[..tp * 256]);
    }

    #[test]
    fn weighted_total_is_the_sum_of_terms(alpha in 0.0..2.0f64, beta in 0.0..2.0f64, gamma in 0.0..2.0f64, smoothing in 0.0..0.3f64) {
        let mcfg = micro_iimt_config();
        let m = IimtModel::new(mcfg.clone(), 3).unwrap();
        let ex = micro_example(&mcfg, 4);
        let cfg = Stage2Config { alpha, beta_w: beta, gamma, label_smoothing: smoothing, ..Default::default() };
        let t = Tape::with_params(&m.params);
        let s = stage2_terms(&m, &t, &ex, &cfg).unwrap();
        let v = |x| t.scalar(x).unwrap();
        let want = v(s.iimt) + alpha * v(s.ocr) + beta * v(s.tit) + gamma * v(s.kd);
        prop_assert!((v(s.total) - want).abs() < 1e-10 * want.abs().max(1.0));
    }

    #[test]
    fn token_and_distillation_losses_match_direct_formulas(seed in any::<u64>(), smoothing in 0.0..0.5f64) {
        let (n, k) = (4, 7);
        let mut r = rng::rng(seed);
        let logits = Tensor::from_fn(&[n, k], |_| r.random_range(-4.0..4.0));
        let z: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let q: Vec<f64> = (0..n).flat_map(|_| {
            let row: Vec<f64> = (0..k).map(|_| r.random_range(0.01..1.0)).collect();
            let s: f64 = row.iter().sum();
            row.into_iter().map(move |x| x / s)
        }).collect();
        let t = Tape::new();
        let l = t.constant(logits.clone());
        let ce = t.scalar(loss_iimt(&t, l, &z, smoothing, true).unwrap()).unwrap();
        let kd = t.scalar(loss_kd(&t, l, &q, n, true).unwrap()).unwrap();
        let (mut ce_want, mut kd_want) = (0.0, 0.0);
        for i in 0..n {
            let row = &logits.data()[i * k..(i + 1) * k];
            let p = softmax(row);
            for c in 0..k {
                let target = (1.0 - smoothing) * (c == z[i]) as usize as f64 + smoothing / k as f64;
                ce_want -= target * p[c].ln();
                kd_want -= q[i * k + c] * p[c].ln();
            }
        }
        prop_assert!((ce - ce_want / n as f64).abs() < 1e-10);
        prop_assert!((kd - kd_want / n as f64).abs() < 1e-10);
    }

    #[test]
    fn smoothed_loss_never_falls_below_target_entropy(seed in any::<u64>(), smoothing in 0.01..0.5f64) {
        let k = 6;
        let mut r = rng::rng(seed);
        let logits = Tensor::from_fn(&[3, k], |_| r.random_range(-30.0..30.0));
        let t = Tape::new();
        let ce = t.scalar(loss_iimt(&t, t.constant(logits), &[0, 3, 5], smoothing, true).unwrap()).unwrap();
        let hi = 1.0 - smoothing + smoothing / k as f64;
        let lo = smoothing / k as f64;
        let floor = -(hi * hi.ln() + (k - 1) as f64 * lo * lo.ln());
        prop_assert!(ce >= floor - 1e-9, "{ce} < {floor}");
    }
}

// ---- gradient routing -------------------------------------------------------

fn grads_by_prefix(m: &IimtModel, pick: impl Fn(&iimt::training::Stage2Terms) -> iimt::Var) -> HashMap<String, f64> {
    let cfg = micro_iimt_config();
    let ex = micro_example(&cfg, 5);
    let t = Tape::with_params(&m.params);
    let s = stage2_terms(m, &t, &ex, &Stage2Config::default()).unwrap();
    let g = t.backward(pick(&s)).unwrap();
    let mut out = HashMap::new();
    for (i, p) in m.params.iter().enumerate() {
        let n = g.param(i).map_or(0.0, |v| v.iter().map(|x| x.abs()).sum());
        out.insert(p.name.clone(), n);
    }
    out
}

#[test]
fn each_loss_reaches_only_its_own_modules() {
    let cfg = micro_iimt_config();
    let mut m = IimtModel::new(cfg, 6).unwrap();
    jitter(&mut m.params, 7);

    // the source-text loss sees the encoder only up to the tap layer
    let ocr = grads_by_prefix(&m, |s| s.ocr);
    for (name, g) in &ocr {
        let reached = *g > 0.0;
        let allowed = name.starts_with("src_txt.")
            || name.starts_with("enc.layer0.")
            || name.starts_with("enc.tap_ln.")
            || name == "enc.patch_in.weight"
            || name == "enc.patch_in.bias"
            || name == "enc.special"
            || name == "enc.pos";
        assert!(!reached || allowed, "source-text loss reached {name}");
    }
    assert!(ocr["src_txt.head.weight"] > 0.0 && ocr["enc.layer0.ffn.fc1.weight"] > 0.0);

    // the target-text loss never reaches the source-text or image decoders
    let tit = grads_by_prefix(&m, |s| s.tit);
    for (name, g) in &tit {
        if name.starts_with("src_txt.") || name.starts_with("img.") {
            assert_eq!(*g, 0.0, "target-text loss reached {name}");
        }
    }

    // the image losses never reach the source-text decoder
    for pick in [|s: &iimt::training::Stage2Terms| s.iimt, |s: &iimt::training::Stage2Terms| s.kd] {
        for (name, g) in grads_by_prefix(&m, pick) {
            if name.starts_with("src_txt.") {
                assert_eq!(g, 0.0, "image loss reached {name}");
            }
        }
    }
}

#[test]
fn ablated_text_decoder_has_no_parameters() {
    let mut cfg = micro_iimt_config();
    cfg.target_text_decoder = false;
    let m = IimtModel::new(cfg.clone(), 1).unwrap();
    assert!(m.params.iter().all(|p| !p.name.starts_with("tgt_txt.")));
    let ex = micro_example(&cfg, 2);
    let t = Tape::with_params(&m.params);
    let s = stage2_terms(&m, &t, &ex, &Stage2Config::default()).unwrap();
    assert_eq!(t.scalar(s.tit).unwrap(), 0.0);
}

#[test]
fn blank_rgb_is_a_valid_image() {
    // guards the proptest image strategy above
    let img = RgbImage::from_pixel(3, 2, Rgb([1, 2, 3]));
    assert_eq!(img.as_raw().len(), 18);
}
