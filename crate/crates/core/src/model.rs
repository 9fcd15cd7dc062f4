//! End-to-end image-to-image translation model: a patch transformer image
//! encoder, character-level source and target text decoders, and an image
//! decoder whose layers attend to both the image memory and the target text
//! decoder's states through a gated fusion.

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::error::{bail, Result};
use crate::nn::{AttentionConfig, Decoder, DualDecoder, Encoder, LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;
use crate::tokenizer::{image_tensor, patchify, TokenizerModel};

pub const CHAR_VOCAB: usize = 256;
/// End of sequence; also the start symbol fed to the text decoders.
pub const EOS: usize = 255;
pub const PAD: usize = 254;
pub const CHECKPOINT_KIND: &str = "iimt";

/// Latin-1 character ids of `text`; ids 254 and 255 are reserved.
pub fn text_ids(text: &str) -> Result<Vec<usize>> {
    text.chars()
        .map(|c| {
            let v = c as usize;
            if v >= PAD {
                bail!(Range, "character {c:?} is outside the 254 text ids");
            }
            Ok(v)
        })
        .collect()
}

/// Inverse of [`text_ids`]; reserved ids are dropped.
pub fn ids_text(ids: &[usize]) -> String {
    ids.iter().filter(|&&i| i < PAD).map(|&i| char::from(i as u8)).collect()
}

/// Teacher-forcing pair for a text decoder: `[EOS] + ids` in, `ids + [EOS]` out.
pub fn text_io(ids: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(ids.len() + 1);
    input.push(EOS);
    input.extend_from_slice(ids);
    let mut target = ids.to_vec();
    target.push(EOS);
    (input, target)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IimtConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub patch: usize,
    pub model_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub encoder_layers: usize,
    /// 1-based encoder layer whose output feeds the source text decoder.
    pub tap_layer: usize,
    pub text_layers: usize,
    pub source_text_layers: usize,
    pub image_layers: usize,
    pub max_text_len: usize,
    /// Visual vocabulary size and token grid of the frozen tokenizer.
    pub codebook_size: usize,
    pub token_grid_h: usize,
    pub token_grid_w: usize,
    pub rel_pos_2d: bool,
    /// Without the target text decoder the image decoder sees only the
    /// image memory.
    pub target_text_decoder: bool,
    pub beam_width: usize,
}

impl Default for IimtConfig {
    fn default() -> Self {
        IimtConfig {
            image_height: 64,
            image_width: 64,
            patch: 8,
            model_dim: 64,
            num_heads: 4,
            ffn_dim: 256,
            dropout: 0.1,
            encoder_layers: 4,
            tap_layer: 2,
            text_layers: 2,
            source_text_layers: 2,
            image_layers: 3,
            max_text_len: 64,
            codebook_size: 512,
            token_grid_h: 8,
            token_grid_w: 8,
            rel_pos_2d: true,
            target_text_decoder: true,
            beam_width: 1,
        }
    }
}

impl IimtConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_height % self.patch != 0 || self.image_width % self.patch != 0 {
            bail!(Config, "{}x{} images are not divisible into {} px patches", self.image_height, self.image_width, self.patch);
        }
        if self.tap_layer == 0 || self.tap_layer > self.encoder_layers {
            bail!(Config, "tap_layer {} outside 1..={}", self.tap_layer, self.encoder_layers);
        }
        if self.codebook_size < 2 || self.token_grid_h == 0 || self.token_grid_w == 0 {
            bail!(Config, "visual vocabulary and token grid must be non-trivial");
        }
        if self.max_text_len == 0 || self.beam_width == 0 {
            bail!(Config, "max_text_len and beam_width must be positive");
        }
        self.attention(false).validate()
    }

    /// Adopts the image size, visual vocabulary and grid of a tokenizer.
    pub fn match_tokenizer(&mut self, tok: &TokenizerModel) {
        self.image_height = tok.cfg.image_height;
        self.image_width = tok.cfg.image_width;
        self.codebook_size = tok.cfg.codebook_size;
        (self.token_grid_h, self.token_grid_w) = tok.cfg.grid();
    }

    pub fn num_patches(&self) -> usize {
        (self.image_height / self.patch) * (self.image_width / self.patch)
    }

    pub fn num_visual_tokens(&self) -> usize {
        self.token_grid_h * self.token_grid_w
    }

    fn attention(&self, rel_pos: bool) -> AttentionConfig {
        AttentionConfig {
            dropout_rate: self.dropout,
            rel_pos_2d: rel_pos,
            ..AttentionConfig::new(self.model_dim, self.num_heads, self.ffn_dim)
        }
    }
}

/// Character embedding, learned positions, causal cross-attending stack and
/// a 256-way output head.
#[derive(Clone, Debug)]
pub struct TextDecoder {
    embed: ParamId,
    pos: ParamId,
    decoder: Decoder,
    head: Linear,
    max_len: usize,
}

impl TextDecoder {
    pub fn new(ps: &mut ParamStore, name: &str, att: &AttentionConfig, layers: usize, max_len: usize, rng: &mut impl rand::Rng) -> Self {
        let d = att.model_dim;
        TextDecoder {
            embed: ps.normal(format!("{name}.embed"), &[CHAR_VOCAB, d], 0.02, rng),
            pos: ps.normal(format!("{name}.pos"), &[max_len + 1, d], 0.02, rng),
            decoder: Decoder::new(ps, name, att, layers, rng),
            head: Linear::new(ps, &format!("{name}.head"), d, CHAR_VOCAB, true, rng),
            max_len,
        }
    }

    /// Final-layer states `[T, d]` and logits `[T, 256]` for `input` ids.
    pub fn forward(&self, t: &Tape, memory: Var, input: &[usize]) -> Result<(Var, Var)> {
        if input.is_empty() || input.len() > self.max_len + 1 {
            bail!(Contract, "text decoder input of {} ids, allowed 1..={}", input.len(), self.max_len + 1);
        }
        if let Some(&bad) = input.iter().find(|&&i| i >= CHAR_VOCAB) {
            bail!(Range, "character id {bad} outside the vocabulary of {CHAR_VOCAB}");
        }
        let positions: Vec<usize> = (0..input.len()).collect();
        let h = t.add(t.embedding(t.param(self.embed), input)?, t.embedding(t.param(self.pos), &positions)?)?;
        let states = self.decoder.forward(t, h, memory)?;
        Ok((states, self.head.forward(t, states)?))
    }
}

/// Visual-token embedding (with a start symbol at index `K`), learned
/// positions, dual-memory stack with 2-D relative bias and a `K`-way head.
#[derive(Clone, Debug)]
pub struct ImageDecoder {
    embed: ParamId,
    pos: ParamId,
    decoder: DualDecoder,
    head: Linear,
    vocab: usize,
}

impl ImageDecoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        att: &AttentionConfig,
        layers: usize,
        vocab: usize,
        grid: (usize, usize),
        rng: &mut impl rand::Rng,
    ) -> Self {
        let d = att.model_dim;
        ImageDecoder {
            embed: ps.normal(format!("{name}.embed"), &[vocab + 1, d], 0.02, rng),
            pos: ps.normal(format!("{name}.pos"), &[grid.0 * grid.1, d], 0.02, rng),
            decoder: DualDecoder::new(ps, name, att, layers, grid.0, grid.1, rng),
            head: Linear::new(ps, &format!("{name}.head"), d, vocab, true, rng),
            vocab,
        }
    }

    pub fn start_token(&self) -> usize {
        self.vocab
    }

    pub fn decoder(&self) -> &DualDecoder {
        &self.decoder
    }

    /// Logits `[len, K]` for the next token after each prefix of `tokens`:
    /// the input is the start symbol followed by `tokens[..len-1]`.
    pub fn forward(&self, t: &Tape, mem_img: Var, mem_txt: Option<Var>, tokens: &[usize], len: usize) -> Result<Var> {
        let grid = self.decoder.grid_h * self.decoder.grid_w;
        if len == 0 || len > grid {
            bail!(Contract, "image decoder asked for {len} positions on a grid of {grid}");
        }
        if tokens.len() + 1 < len {
            bail!(Contract, "{} tokens cannot feed {len} positions", tokens.len());
        }
        if let Some(&bad) = tokens[..len - 1].iter().find(|&&k| k >= self.vocab) {
            bail!(Range, "visual token {bad} outside the vocabulary of {}", self.vocab);
        }
        let mut input = Vec::with_capacity(len);
        input.push(self.vocab);
        input.extend_from_slice(&tokens[..len - 1]);
        let positions: Vec<usize> = (0..len).collect();
        let h = t.add(t.embedding(t.param(self.embed), &input)?, t.embedding(t.param(self.pos), &positions)?)?;
        let states = self.decoder.forward(t, h, mem_img, mem_txt)?;
        self.head.forward(t, states)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderStates {
    /// Normalized output of the last encoder layer, `[N+1, d]`.
    pub last: Var,
    /// Normalized output of the tap layer, `[N+1, d]`.
    pub tapped: Var,
}

/// Teacher-forced logits of every head.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub source_text: Var,
    pub target_text: Option<Var>,
    pub image: Var,
}

#[derive(Clone, Debug)]
pub struct IimtModel {
    pub cfg: IimtConfig,
    pub params: ParamStore,
    patch_in: Linear,
    special: ParamId,
    pos: ParamId,
    encoder: Encoder,
    tap_ln: LayerNorm,
    source_decoder: TextDecoder,
    target_decoder: Option<TextDecoder>,
    image_decoder: ImageDecoder,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TranslationOutput {
    pub target_text: String,
    pub visual_tokens: Vec<usize>,
    #[serde(skip)]
    pub target_image: RgbImage,
    /// Text decoding hit `max_text_len` without emitting an end symbol.
    pub truncated: bool,
}

impl IimtModel {
    pub fn new(cfg: IimtConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, "iimt-init");
        let mut ps = ParamStore::new();
        let d = cfg.model_dim;
        let att = cfg.attention(false);
        let patch_dim = cfg.patch * cfg.patch * 3;
        let patch_in = Linear::new(&mut ps, "enc.patch_in", patch_dim, d, true, &mut rng);
        let special = ps.normal("enc.special", &[1, d], 0.02, &mut rng);
        let pos = ps.normal("enc.pos", &[cfg.num_patches() + 1, d], 0.02, &mut rng);
        let encoder = Encoder::new(&mut ps, "enc", &att, cfg.encoder_layers, &mut rng);
        let tap_ln = LayerNorm::new(&mut ps, "enc.tap_ln", d);
        let source_decoder = TextDecoder::new(&mut ps, "src_txt", &att, cfg.source_text_layers, cfg.max_text_len, &mut rng);
        let target_decoder = cfg
            .target_text_decoder
            .then(|| TextDecoder::new(&mut ps, "tgt_txt", &att, cfg.text_layers, cfg.max_text_len, &mut rng));
        let image_decoder = ImageDecoder::new(
            &mut ps,
            "img",
            &cfg.attention(cfg.rel_pos_2d),
            cfg.image_layers,
            cfg.codebook_size,
            (cfg.token_grid_h, cfg.token_grid_w),
            &mut rng,
        );
        Ok(IimtModel { cfg, params: ps, patch_in, special, pos, encoder, tap_ln, source_decoder, target_decoder, image_decoder })
    }

    pub fn image_decoder(&self) -> &ImageDecoder {
        &self.image_decoder
    }

    pub fn has_target_decoder(&self) -> bool {
        self.target_decoder.is_some()
    }

    /// Input sequence before the first encoder layer: the special token
    /// followed by projected patches, plus positions. `[N+1, d]`.
    pub fn embed_image(&self, t: &Tape, x: &Tensor) -> Result<Var> {
        let want = [self.cfg.image_height, self.cfg.image_width, 3];
        if x.shape() != want {
            bail!(Shape, "image tensor {:?} does not match the model's {:?}", x.shape(), want);
        }
        let mut p = patchify(x, self.cfg.patch)?;
        p.data_mut().iter_mut().for_each(|v| *v = 2.0 * *v - 1.0);
        let patches = self.patch_in.forward(t, t.constant(p))?;
        let seq = t.concat(&[t.param(self.special), patches], 0)?;
        t.add(seq, t.param(self.pos))
    }

    pub fn encode(&self, t: &Tape, x: &Tensor) -> Result<EncoderStates> {
        let h = self.embed_image(t, x)?;
        let (last, per_layer) = self.encoder.forward_all(t, h, None)?;
        let tapped = self.tap_ln.forward(t, per_layer[self.cfg.tap_layer - 1])?;
        Ok(EncoderStates { last, tapped })
    }

    /// Source-text logits from the tapped encoder states.
    pub fn source_text(&self, t: &Tape, enc: &EncoderStates, input: &[usize]) -> Result<Var> {
        Ok(self.source_decoder.forward(t, enc.tapped, input)?.1)
    }

    /// Target-text final states and logits. Errors if the model was built
    /// without a target text decoder.
    pub fn target_text(&self, t: &Tape, enc: &EncoderStates, input: &[usize]) -> Result<(Var, Var)> {
        let Some(dec) = &self.target_decoder else {
            bail!(Contract, "model has no target text decoder");
        };
        dec.forward(t, enc.last, input)
    }

    /// Next-token logits `[len, K]` over the visual vocabulary.
    pub fn image_tokens(&self, t: &Tape, enc: &EncoderStates, text_states: Option<Var>, tokens: &[usize], len: usize) -> Result<Var> {
        self.image_decoder.forward(t, enc.last, text_states, tokens, len)
    }

    /// Teacher-forced pass over one example.
    pub fn forward(&self, t: &Tape, x: &Tensor, src_in: &[usize], tgt_in: &[usize], tokens: &[usize]) -> Result<ForwardOutput> {
        let enc = self.encode(t, x)?;
        let source_text = self.source_text(t, &enc, src_in)?;
        let (states, target_text) = match &self.target_decoder {
            Some(_) => {
                let (s, l) = self.target_text(t, &enc, tgt_in)?;
                (Some(s), Some(l))
            }
            None => (None, None),
        };
        let image = self.image_tokens(t, &enc, states, tokens, tokens.len())?;
        Ok(ForwardOutput { source_text, target_text, image })
    }

    /// Greedy (or beam, per config) decoding of the target text from the
    /// final encoder states. Returns the ids without the end symbol and
    /// whether the length cap was hit.
    pub fn decode_target_text(&self, enc_last: &Tensor) -> Result<(Vec<usize>, bool)> {
        if self.target_decoder.is_none() {
            return Ok((Vec::new(), false));
        }
        if self.cfg.beam_width > 1 {
            return self.beam_text(enc_last);
        }
        let mut ids: Vec<usize> = Vec::new();
        while ids.len() < self.cfg.max_text_len {
            let dist = self.text_distribution(enc_last, &ids)?;
            let next = argmax(&dist);
            if next == EOS {
                return Ok((ids, false));
            }
            ids.push(next);
        }
        Ok((ids, true))
    }

    /// Next-character distribution after `prefix` (without the start symbol).
    pub fn text_distribution(&self, enc_last: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
        let t = Tape::with_params(&self.params);
        let enc = EncoderStates { last: t.constant(enc_last.clone()), tapped: t.constant(enc_last.clone()) };
        let (input, _) = text_io(prefix);
        let (_, logits) = self.target_text(&t, &enc, &input)?;
        let last = t.value(logits);
        Ok(softmax(last.row(prefix.len())))
    }

    fn beam_text(&self, enc_last: &Tensor) -> Result<(Vec<usize>, bool)> {
        let width = self.cfg.beam_width;
        let mut beams: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
        let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
        for _ in 0..self.cfg.max_text_len {
            let mut cand: Vec<(Vec<usize>, f64)> = Vec::new();
            for (ids, score) in &beams {
                let dist = self.text_distribution(enc_last, ids)?;
                for (c, p) in dist.iter().enumerate() {
                    if *p > 0.0 {
                        let mut next = ids.clone();
                        next.push(c);
                        cand.push((next, score + p.ln()));
                    }
                }
            }
            // stable sort keeps lower ids first among equal scores
            cand.sort_by(|a, b| b.1.total_cmp(&a.1));
            beams.clear();
            for (ids, s) in cand.into_iter().take(width) {
                if ids.last() == Some(&EOS) {
                    finished.push((ids[..ids.len() - 1].to_vec(), s));
                } else {
                    beams.push((ids, s));
                }
            }
            let best_open = beams.first().map(|b| b.1).unwrap_or(f64::NEG_INFINITY);
            if finished.iter().any(|f| f.1 >= best_open) {
                break;
            }
        }
        let best = finished.iter().max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        match best {
            Some((ids, _)) => Ok((ids.clone(), false)),
            None => Ok((beams.first().map(|b| b.0.clone()).unwrap_or_default(), true)),
        }
    }

    /// Greedy raster-order visual tokens, always exactly one full grid.
    /// `text_states` are the target decoder's final states over the text.
    pub fn decode_image_tokens(&self, enc_last: &Tensor, text_states: Option<&Tensor>) -> Result<Vec<usize>> {
        let n = self.cfg.num_visual_tokens();
        let mut tokens: Vec<usize> = Vec::with_capacity(n);
        while tokens.len() < n {
            let t = Tape::with_params(&self.params);
            let enc = EncoderStates { last: t.constant(enc_last.clone()), tapped: t.constant(enc_last.clone()) };
            let mem_txt = text_states.map(|s| t.constant(s.clone()));
            let logits = self.image_tokens(&t, &enc, mem_txt, &tokens, tokens.len() + 1)?;
            let next = t.with_value(logits, |v| argmax(&v[tokens.len() * self.cfg.codebook_size..]));
            tokens.push(next);
        }
        Ok(tokens)
    }

    /// Two-pass inference: target text first, then visual tokens conditioned
    /// on the decoded text, then detokenization.
    pub fn translate(&self, x: &RgbImage, tokenizer: &TokenizerModel) -> Result<TranslationOutput> {
        let xt = image_tensor(x);
        let enc_last = {
            let t = Tape::with_params(&self.params);
            t.value(self.encode(&t, &xt)?.last)
        };
        let (ids, truncated) = self.decode_target_text(&enc_last)?;
        let text_states = match &self.target_decoder {
            Some(_) => {
                let t = Tape::with_params(&self.params);
                let enc = EncoderStates { last: t.constant(enc_last.clone()), tapped: t.constant(enc_last.clone()) };
                let (input, _) = text_io(&ids);
                Some(t.value(self.target_text(&t, &enc, &input)?.0))
            }
            None => None,
        };
        let visual_tokens = self.decode_image_tokens(&enc_last, text_states.as_ref())?;
        let target_image = tokenizer.decode_tokens(&visual_tokens)?;
        Ok(TranslationOutput { target_text: ids_text(&ids), visual_tokens, target_image, truncated })
    }

    pub fn to_checkpoint(&self, step: u64) -> Result<Checkpoint> {
        Checkpoint::from_store(CHECKPOINT_KIND, &self.cfg, step, &self.params)
    }

    pub fn from_checkpoint(c: &Checkpoint) -> Result<Self> {
        c.expect_kind(CHECKPOINT_KIND)?;
        let mut m = IimtModel::new(c.config_as()?, 0)?;
        c.load_into(&mut m.params)?;
        Ok(m)
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
