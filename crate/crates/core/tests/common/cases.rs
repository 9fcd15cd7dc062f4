//! The gradient-check suite: every primitive, every layer type and every
//! training loss on micro configurations. Each case yields its worst
//! relative error.

use iimt::model::{IimtConfig, IimtModel};
use iimt::nn::{
    causal_mask, AttentionConfig, Decoder, DecoderLayer, DualDecoder, DualDecoderLayer, Encoder, EncoderLayer,
    GatedFusion, MultiHeadAttention, RelPos2D,
};
use iimt::rng;
use iimt::teacher::{TeacherConfig, TeacherModel};
use iimt::tokenizer::{patchify, TokenizerConfig, TokenizerModel};
use iimt::training::{stage2_terms, IimtExample, Stage2Config, Stage2Terms};
use iimt::{ParamStore, Tape, Tensor, Var};
use rand::Rng;

use super::grad::{check_inputs, check_params, contract, random, rel_err, worst, STEP};

pub const TOLERANCE: f64 = 1e-4;

/// Adds uniform noise to every parameter so unit gains and zero biases
/// do not hide errors.
pub fn jitter(ps: &mut ParamStore, seed: u64) {
    let mut r = rng::rng(seed);
    for p in ps.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v += r.random_range(-0.1..0.1));
    }
}

fn positive(shape: &[usize], seed: u64) -> Tensor {
    let mut t = random(shape, seed);
    t.data_mut().iter_mut().for_each(|v| *v = v.abs() + 0.1);
    t
}

fn distribution(rows: usize, cols: usize, seed: u64) -> Vec<f64> {
    let t = positive(&[rows, cols], seed);
    t.data().chunks(cols).flat_map(|r| {
        let s: f64 = r.iter().sum();
        r.iter().map(move |v| v / s)
    }).collect()
}

pub fn primitives() -> Vec<(String, f64)> {
    let r = |s: &[usize], seed| random(s, seed);
    let mut out: Vec<(String, f64)> = vec![
        ("add".into(), check_inputs(&[r(&[3, 4], 1), r(&[3, 4], 2)], |t, v| t.add(v[0], v[1]))),
        ("add (broadcast)".into(), check_inputs(&[r(&[3, 4], 1), r(&[4], 2)], |t, v| t.add(v[0], v[1]))),
        ("sub".into(), check_inputs(&[r(&[3, 4], 1), r(&[3, 4], 2)], |t, v| t.sub(v[0], v[1]))),
        ("mul".into(), check_inputs(&[r(&[3, 4], 1), r(&[3, 4], 2)], |t, v| t.mul(v[0], v[1]))),
        ("scale".into(), check_inputs(&[r(&[5], 1)], |t, v| Ok(t.scale(v[0], -2.5)))),
        ("sigmoid".into(), check_inputs(&[r(&[2, 5], 3)], |t, v| Ok(t.sigmoid(v[0])))),
        ("gelu".into(), check_inputs(&[r(&[2, 5], 4)], |t, v| Ok(t.gelu(v[0])))),
        ("relu".into(), check_inputs(&[r(&[2, 5], 5)], |t, v| Ok(t.relu(v[0])))),
        ("matmul".into(), check_inputs(&[r(&[3, 4], 6), r(&[4, 2], 7)], |t, v| t.matmul(v[0], v[1]))),
        ("matmul (batched)".into(), check_inputs(&[r(&[2, 3, 4], 6), r(&[2, 4, 2], 7)], |t, v| t.matmul(v[0], v[1]))),
        ("permute".into(), check_inputs(&[r(&[2, 3, 4], 8)], |t, v| t.permute(v[0], &[2, 0, 1]))),
        ("transpose".into(), check_inputs(&[r(&[3, 4], 9)], |t, v| t.transpose(v[0]))),
        ("reshape".into(), check_inputs(&[r(&[3, 4], 10)], |t, v| t.reshape(v[0], &[2, 6]))),
        ("concat".into(), check_inputs(&[r(&[2, 3], 11), r(&[4, 3], 12)], |t, v| t.concat(&[v[0], v[1]], 0))),
        ("concat (axis 1)".into(), check_inputs(&[r(&[2, 3], 11), r(&[2, 1], 12)], |t, v| t.concat(&[v[0], v[1]], 1))),
        ("softmax".into(), check_inputs(&[r(&[3, 5], 13)], |t, v| t.softmax(v[0], 1))),
        ("softmax (axis 0)".into(), check_inputs(&[r(&[3, 5], 13)], |t, v| t.softmax(v[0], 0))),
        (
            "layer_norm".into(),
            check_inputs(&[r(&[3, 6], 14), r(&[6], 15), r(&[6], 16)], |t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("embedding".into(), check_inputs(&[r(&[5, 3], 17)], |t, v| t.embedding(v[0], &[4, 0, 4, 2]))),
        ("cross_entropy".into(), check_inputs(&[r(&[3, 6], 18)], |t, v| t.cross_entropy(v[0], &[1, 5, 0], 0.0))),
        (
            "cross_entropy (smoothed)".into(),
            check_inputs(&[r(&[3, 6], 18)], |t, v| t.cross_entropy(v[0], &[1, 5, 0], 0.1)),
        ),
        (
            "soft_cross_entropy".into(),
            check_inputs(&[r(&[3, 6], 19)], |t, v| t.soft_cross_entropy(v[0], &distribution(3, 6, 20))),
        ),
        ("mse".into(), check_inputs(&[r(&[3, 4], 21), r(&[3, 4], 22)], |t, v| t.mse(v[0], v[1]))),
        ("sum".into(), check_inputs(&[r(&[3, 4], 23)], |t, v| Ok(t.sum(v[0])))),
        ("mean".into(), check_inputs(&[r(&[3, 4], 24)], |t, v| Ok(t.mean(v[0])))),
        (
            "conv2d".into(),
            check_inputs(&[r(&[2, 5, 5], 25), r(&[3, 2, 3, 3], 26), r(&[3], 27)], |t, v| t.conv2d(v[0], v[1], v[2], 1, 1)),
        ),
        (
            "conv2d (stride 2)".into(),
            check_inputs(&[r(&[2, 6, 6], 28), r(&[3, 2, 3, 3], 29), r(&[3], 30)], |t, v| t.conv2d(v[0], v[1], v[2], 2, 1)),
        ),
        ("dropout".into(), check_inputs(&[r(&[4, 5], 31)], |t, v| t.dropout_seeded(v[0], 0.3, 9))),
    ];
    // the causal mask enters attention scores additively
    out.push((
        "masked softmax".into(),
        check_inputs(&[r(&[4, 4], 32)], |t, v| {
            let m = causal_mask(t, 4);
            t.softmax(t.add(v[0], m)?, 1)
        }),
    ));
    out
}

/// A store holding a query and memory alongside the layer's parameters, so
/// one check covers gradients with respect to inputs and weights alike.
struct LayerFixture {
    ps: ParamStore,
    h: usize,
    mem: usize,
    mem2: usize,
}

fn fixture(len: usize, mem_len: usize, dim: usize) -> (LayerFixture, AttentionConfig, rand_chacha::ChaCha8Rng) {
    let mut ps = ParamStore::new();
    let h = ps.add("in.h", random(&[len, dim], 40));
    let mem = ps.add("in.mem", random(&[mem_len, dim], 41));
    let mem2 = ps.add("in.mem2", random(&[mem_len + 1, dim], 42));
    (LayerFixture { ps, h, mem, mem2 }, AttentionConfig::new(dim, 2, 2 * dim), rng::rng(43))
}

fn layer_case(mut f: LayerFixture, build: impl for<'a> Fn(&Tape<'a>, Var, Var, Var) -> iimt::Result<Var>) -> f64 {
    jitter(&mut f.ps, 44);
    let (h, mem, mem2) = (f.h, f.mem, f.mem2);
    let errs = check_params(&f.ps, None, |ps| Tape::with_params(ps), |t| {
        let out = build(t, t.param(h), t.param(mem), t.param(mem2))?;
        Ok(contract(t, out))
    });
    worst(&errs).1
}

pub fn layers() -> Vec<(String, f64)> {
    let dim = 8;
    let mut out = Vec::new();

    let (mut f, cfg, mut r) = fixture(4, 3, dim);
    let mha = MultiHeadAttention::new(&mut f.ps, "mha", &cfg, &mut r);
    out.push(("multi-head attention".into(), layer_case(f, |t, h, m, _| mha.forward(t, h, m, None, None))));

    let (mut f, cfg, mut r) = fixture(4, 3, dim);
    let mha = MultiHeadAttention::new(&mut f.ps, "mha", &cfg, &mut r);
    let rp = RelPos2D::new(&mut f.ps, "rp", 2, 2, cfg.num_heads, &mut r);
    out.push((
        "masked self-attention with 2-D relative bias".into(),
        layer_case(f, |t, h, _, _| {
            let bias = rp.bias(t, 2, 2, 4)?;
            mha.forward(t, h, h, Some(causal_mask(t, 4)), Some(bias))
        }),
    ));

    let (mut f, _, mut r) = fixture(4, 4, dim);
    let g = GatedFusion::new(&mut f.ps, "gate", dim, &mut r);
    out.push(("gated fusion".into(), layer_case(f, |t, h, m, _| g.forward(t, h, m))));

    let (mut f, cfg, mut r) = fixture(4, 3, dim);
    let l = EncoderLayer::new(&mut f.ps, "enc", &cfg, &mut r);
    out.push(("encoder layer".into(), layer_case(f, |t, h, _, _| l.forward(t, h, None))));

    let (mut f, cfg, mut r) = fixture(4, 3, dim);
    let l = DecoderLayer::new(&mut f.ps, "dec", &cfg, &mut r);
    out.push(("decoder layer".into(), layer_case(f, |t, h, m, _| l.forward(t, h, m, Some(causal_mask(t, 4))))));

    let (mut f, cfg, mut r) = fixture(4, 3, dim);
    let l = DualDecoderLayer::new(&mut f.ps, "dual", &cfg, &mut r);
    let rp = RelPos2D::new(&mut f.ps, "rp", 2, 2, cfg.num_heads, &mut r);
    out.push((
        "gated-fusion image-decoder layer".into(),
        layer_case(f, |t, h, m, m2| {
            let bias = rp.bias(t, 2, 2, 4)?;
            l.forward(t, h, m, Some(m2), Some(causal_mask(t, 4)), Some(bias))
        }),
    ));

    let (mut f, cfg, mut r) = fixture(4, 3, dim);
    let l = DualDecoderLayer::new(&mut f.ps, "dual", &cfg, &mut r);
    out.push((
        "image-decoder layer without text memory".into(),
        layer_case(f, |t, h, m, _| l.forward(t, h, m, None, Some(causal_mask(t, 4)), None)),
    ));

    let (mut f, cfg, mut r) = fixture(4, 3, dim);
    let e = Encoder::new(&mut f.ps, "enc", &cfg, 2, &mut r);
    out.push(("encoder stack".into(), layer_case(f, |t, h, _, _| e.forward(t, h, None))));

    let (mut f, cfg, mut r) = fixture(4, 3, dim);
    let d = Decoder::new(&mut f.ps, "dec", &cfg, 2, &mut r);
    out.push(("decoder stack".into(), layer_case(f, |t, h, m, _| d.forward(t, h, m))));

    let (mut f, mut cfg, mut r) = fixture(3, 3, dim);
    cfg.rel_pos_2d = true;
    let d = DualDecoder::new(&mut f.ps, "dual", &cfg, 2, 2, 2, &mut r);
    out.push(("image-decoder stack".into(), layer_case(f, |t, h, m, m2| d.forward(t, h, m, Some(m2)))));
    out
}

pub fn micro_tokenizer() -> TokenizerModel {
    let cfg = TokenizerConfig {
        image_height: 8,
        image_width: 8,
        patch: 4,
        codebook_size: 6,
        code_dim: 3,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        encoder_layers: 1,
        decoder_layers: 1,
        commitment: 0.25,
    };
    let mut m = TokenizerModel::new(cfg, 5).unwrap();
    jitter(&mut m.params, 6);
    m
}

pub fn micro_image(h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = rng::rng(seed);
    Tensor::from_fn(&[h, w, 3], |_| r.random_range(0.0..1.0))
}

fn trainable_only(m: &TokenizerModel, prefixes: &[&str]) -> ParamStore {
    let mut ps = m.params.clone();
    ps.set_all_trainable(false);
    for p in prefixes {
        ps.set_trainable_prefix(p, true);
    }
    ps
}

/// The tokenizer loss has stop-gradients, so each term is checked against
/// the parameters it is meant to train, the rest held fixed, and the
/// straight-through path is checked separately.
pub fn stage1() -> Vec<(String, f64)> {
    let m = micro_tokenizer();
    let x = micro_image(8, 8, 7);
    let mut out = Vec::new();

    let ps = trainable_only(&m, &["tok.dec"]);
    let errs = check_params(&ps, None, |ps| Tape::with_params(ps), |t| Ok(m.stage1_loss(t, &x)?.total));
    out.push(("stage-1 loss wrt decoder".into(), worst(&errs).1));

    let ps = trainable_only(&m, &["tok.codebook"]);
    let errs = check_params(&ps, None, |ps| Tape::with_params(ps), |t| Ok(m.stage1_loss(t, &x)?.codebook));
    out.push(("stage-1 codebook term wrt codebook".into(), worst(&errs).1));

    let ps = trainable_only(&m, &["tok.enc"]);
    let errs = check_params(&ps, None, |ps| Tape::with_params(ps), |t| {
        let l = m.stage1_loss(t, &x)?;
        Ok(l.commitment)
    });
    out.push(("stage-1 commitment term wrt encoder".into(), worst(&errs).1));

    // straight-through: the encoder output receives exactly the gradient of
    // the reconstruction with respect to the decoder input
    let t = Tape::with_params(&m.params);
    let l = m.stage1_loss(&t, &x).unwrap();
    let routed = t.backward(l.recon).unwrap().of(l.encoded).unwrap().to_vec();
    let q0 = t.value(l.quantized);
    let target = patchify(&x, 4).unwrap();
    let recon_at = |q: &Tensor| {
        let t = Tape::with_params(&m.params);
        let rec = m.decode_vectors(&t, t.constant(q.clone())).unwrap();
        let mse = t.mse(rec, t.constant(target.clone())).unwrap();
        t.scalar(mse).unwrap()
    };
    let numeric: Vec<f64> = (0..q0.numel())
        .map(|j| {
            let mut q = q0.clone();
            q.data_mut()[j] += STEP;
            let fp = recon_at(&q);
            q.data_mut()[j] -= 2.0 * STEP;
            (fp - recon_at(&q)) / (2.0 * STEP)
        })
        .collect();
    out.push(("stage-1 straight-through routing".into(), rel_err(&routed, &numeric)));
    out
}

pub fn micro_iimt_config() -> IimtConfig {
    IimtConfig {
        image_height: 16,
        image_width: 16,
        patch: 8,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        dropout: 0.1,
        encoder_layers: 2,
        tap_layer: 1,
        text_layers: 1,
        source_text_layers: 1,
        image_layers: 1,
        max_text_len: 8,
        codebook_size: 6,
        token_grid_h: 2,
        token_grid_w: 2,
        rel_pos_2d: true,
        target_text_decoder: true,
        beam_width: 1,
    }
}

pub fn micro_example(cfg: &IimtConfig, seed: u64) -> IimtExample {
    let n = cfg.token_grid_h * cfg.token_grid_w;
    let mut r = rng::rng(seed);
    IimtExample {
        id: format!("ex{seed}"),
        image: micro_image(cfg.image_height, cfg.image_width, seed),
        source_ids: (0..3).map(|_| r.random_range(97..101)).collect(),
        target_ids: (0..2).map(|_| r.random_range(97..101)).collect(),
        tokens: (0..n).map(|_| r.random_range(0..cfg.codebook_size)).collect(),
        teacher: Some(distribution(n, cfg.codebook_size, seed + 1)),
    }
}

/// Every stage-2 term against every parameter of a micro model, with
/// dropout masks fixed by the tape seed.
pub fn stage2() -> Vec<(String, f64)> {
    let mcfg = micro_iimt_config();
    let mut m = IimtModel::new(mcfg.clone(), 8).unwrap();
    jitter(&mut m.params, 9);
    let ex = micro_example(&mcfg, 10);
    let cfg = Stage2Config { label_smoothing: 0.1, alpha: 0.7, beta_w: 1.3, gamma: 0.5, ..Default::default() };
    let term = |pick: fn(&Stage2Terms) -> Var, name: &str| {
        let errs = check_params(&m.params, Some(6), |ps| Tape::training(ps, 11), |t| Ok(pick(&stage2_terms(&m, t, &ex, &cfg)?)));
        let (which, e) = worst(&errs);
        (format!("{name} (worst: {which})"), e)
    };
    vec![
        term(|s| s.iimt, "image-token loss"),
        term(|s| s.ocr, "source-text loss"),
        term(|s| s.tit, "target-text loss"),
        term(|s| s.kd, "distillation loss"),
        term(|s| s.total, "weighted total"),
    ]
}

pub fn teacher() -> Vec<(String, f64)> {
    let cfg = TeacherConfig {
        image_height: 16,
        image_width: 16,
        model_dim: 8,
        num_heads: 2,
        ffn_dim: 16,
        dropout: 0.0,
        text_layers: 1,
        image_layers: 1,
        conv_channels: 2,
        conv_blocks: 1,
        max_text_len: 8,
        codebook_size: 6,
        token_grid_h: 2,
        token_grid_w: 2,
        rel_pos_2d: true,
        temperature: 1.0,
    };
    let mut m = TeacherModel::new(cfg, 12).unwrap();
    jitter(&mut m.params, 13);
    let x = micro_image(16, 16, 14);
    let errs = check_params(&m.params, Some(6), |ps| Tape::with_params(ps), |t| {
        let logits = m.logits(t, &x, &[97, 98], &[1, 4, 0, 5])?;
        t.cross_entropy(logits, &[1, 4, 0, 5], 0.0)
    });
    let (which, e) = worst(&errs);
    vec![(format!("teacher loss (worst: {which})"), e)]
}

/// The whole suite.
pub fn gradient_suite() -> Vec<(String, f64)> {
    [primitives(), layers(), stage1(), stage2(), teacher()].concat()
}
