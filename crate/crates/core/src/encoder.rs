//! Retrieval backbone: image encoder, text encoder, and an image-grounded
//! fusion encoder whose blocks add a cross-attention sublayer (text as
//! query, image features as key/value).
//!
//! Blocks are pre-norm with residual-branch output projections initialized
//! to zero, so a freshly initialized encoder is the identity map. Masking
//! enters only through the optional [`MaskOutcome`] arguments of the embed
//! functions; the inference helpers at the bottom cannot mask at all.

use crate::checkpoint::{Bundle, CheckpointError};
use crate::corpus::{AttributeSchema, Caption, SyntheticImage};
use crate::masking::{self, MaskOutcome};
use crate::optim::ParamSet;
use crate::rng::stream_rng;
use crate::tape::{Binder, Matrix, NodeId, Tape};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("mask references patch index {0} but the image has {1} patches")]
    MaskOutOfRange(usize, usize),
    #[error("expected origin {expected:?}, got {got:?}")]
    WrongOrigin { expected: Origin, got: Origin },
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Image,
    Text,
    Fused,
}

/// A sequence of embeddings on the tape; row 0 is the classification slot.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddingSequence {
    pub node: NodeId,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            width: 32,
            layers: 2,
            heads: 2,
            ffn_mult: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gain: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub wq: Vec<Matrix>,
    pub wk: Vec<Matrix>,
    pub wv: Vec<Matrix>,
    pub wo: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub ln_attn: NormParams,
    pub attn: AttentionParams,
    /// Cross-attention sublayer; present only in fusion blocks.
    pub cross: Option<(NormParams, AttentionParams)>,
    pub ln_ffn: NormParams,
    pub ffn_w1: Matrix,
    pub ffn_b1: Matrix,
    pub ffn_w2: Matrix,
    pub ffn_b2: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub schema: AttributeSchema,
    pub config: EncoderConfig,
    pub patch_proj: Matrix,
    pub patch_bias: Matrix,
    pub token_table: Matrix,
    pub pos_image: Matrix,
    pub pos_text: Matrix,
    pub cls_image: Matrix,
    pub cls_text: Matrix,
    /// Channel-mask prototypes c^v and c^t.
    pub proto_image: Matrix,
    pub proto_text: Matrix,
    pub image_blocks: Vec<BlockParams>,
    pub text_blocks: Vec<BlockParams>,
    pub fusion_blocks: Vec<BlockParams>,
    /// Learnable contrastive temperature, kept in [0.01, 0.5] by the trainer.
    pub tau: Matrix,
    pub itm_w: Matrix,
    pub itm_b: Matrix,
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

const INIT_SCALE: f64 = 0.02;
pub const TAU_INIT: f64 = 0.07;
pub const TAU_MIN: f64 = 0.01;
pub const TAU_MAX: f64 = 0.5;

fn init_norm(width: usize) -> NormParams {
    NormParams {
        gain: Matrix::ones((1, width)),
        bias: Matrix::zeros((1, width)),
    }
}

fn init_attention(width: usize, heads: usize, rng: &mut impl Rng) -> AttentionParams {
    let dk = width / heads;
    AttentionParams {
        wq: (0..heads).map(|_| gaussian_matrix(width, dk, INIT_SCALE, rng)).collect(),
        wk: (0..heads).map(|_| gaussian_matrix(width, dk, INIT_SCALE, rng)).collect(),
        wv: (0..heads).map(|_| gaussian_matrix(width, dk, INIT_SCALE, rng)).collect(),
        // zero output projection keeps every residual branch silent at init
        wo: Matrix::zeros((width, width)),
    }
}

fn init_block(config: &EncoderConfig, cross: bool, rng: &mut impl Rng) -> BlockParams {
    let d = config.width;
    BlockParams {
        ln_attn: init_norm(d),
        attn: init_attention(d, config.heads, rng),
        cross: cross.then(|| (init_norm(d), init_attention(d, config.heads, rng))),
        ln_ffn: init_norm(d),
        ffn_w1: gaussian_matrix(d, config.ffn_mult * d, INIT_SCALE, rng),
        ffn_b1: Matrix::zeros((1, config.ffn_mult * d)),
        ffn_w2: Matrix::zeros((config.ffn_mult * d, d)),
        ffn_b2: Matrix::zeros((1, d)),
    }
}

impl EncoderParams {
    pub fn init(schema: &AttributeSchema, config: &EncoderConfig, seed: u64) -> Self {
        assert!(config.width % config.heads == 0, "width must split across heads");
        let mut rng = stream_rng(seed, "encoder-init", 0);
        let d = config.width;
        let max_text = schema.max_sequence_len();
        EncoderParams {
            schema: schema.clone(),
            config: config.clone(),
            patch_proj: gaussian_matrix(schema.patch_dim, d, INIT_SCALE, &mut rng),
            patch_bias: Matrix::zeros((1, d)),
            token_table: gaussian_matrix(schema.vocab_size(), d, INIT_SCALE, &mut rng),
            pos_image: gaussian_matrix(schema.patch_count + 1, d, INIT_SCALE, &mut rng),
            pos_text: gaussian_matrix(max_text + 1, d, INIT_SCALE, &mut rng),
            cls_image: gaussian_matrix(1, d, INIT_SCALE, &mut rng),
            cls_text: gaussian_matrix(1, d, INIT_SCALE, &mut rng),
            proto_image: Matrix::zeros((1, d)),
            proto_text: Matrix::zeros((1, d)),
            image_blocks: (0..config.layers).map(|_| init_block(config, false, &mut rng)).collect(),
            text_blocks: (0..config.layers).map(|_| init_block(config, false, &mut rng)).collect(),
            fusion_blocks: (0..config.layers).map(|_| init_block(config, true, &mut rng)).collect(),
            tau: Matrix::from_elem((1, 1), TAU_INIT),
            itm_w: gaussian_matrix(d, 2, INIT_SCALE, &mut rng),
            itm_b: Matrix::zeros((1, 2)),
        }
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new();
        self.for_each(&mut |name, m| b.push(name, m.clone()));
        b
    }

    pub fn from_bundle(
        schema: &AttributeSchema,
        config: &EncoderConfig,
        bundle: &Bundle,
    ) -> Result<Self, EncoderError> {
        let mut params = EncoderParams::init(schema, config, 0);
        let mut err = None;
        params.for_each_mut(&mut |name, m| {
            if err.is_some() {
                return;
            }
            match bundle.take(name, m.dim()) {
                Ok(t) => *m = t,
                Err(e) => err = Some(e),
            }
        });
        match err {
            Some(e) => Err(e.into()),
            None => Ok(params),
        }
    }

    pub fn tau_value(&self) -> f64 {
        self.tau[[0, 0]]
    }
}

fn visit_attention<'a>(
    prefix: &str,
    attn: &'a AttentionParams,
    f: &mut dyn FnMut(&str, &'a Matrix),
) {
    for (h, m) in attn.wq.iter().enumerate() {
        f(&format!("{prefix}.q{h}"), m);
    }
    for (h, m) in attn.wk.iter().enumerate() {
        f(&format!("{prefix}.k{h}"), m);
    }
    for (h, m) in attn.wv.iter().enumerate() {
        f(&format!("{prefix}.v{h}"), m);
    }
    f(&format!("{prefix}.out"), &attn.wo);
}

fn visit_attention_mut<'a>(
    prefix: &str,
    attn: &'a mut AttentionParams,
    f: &mut dyn FnMut(&str, &'a mut Matrix),
) {
    for (h, m) in attn.wq.iter_mut().enumerate() {
        f(&format!("{prefix}.q{h}"), m);
    }
    for (h, m) in attn.wk.iter_mut().enumerate() {
        f(&format!("{prefix}.k{h}"), m);
    }
    for (h, m) in attn.wv.iter_mut().enumerate() {
        f(&format!("{prefix}.v{h}"), m);
    }
    f(&format!("{prefix}.out"), &mut attn.wo);
}

fn visit_block<'a>(prefix: &str, b: &'a BlockParams, f: &mut dyn FnMut(&str, &'a Matrix)) {
    f(&format!("{prefix}.ln_attn.gain"), &b.ln_attn.gain);
    f(&format!("{prefix}.ln_attn.bias"), &b.ln_attn.bias);
    visit_attention(&format!("{prefix}.attn"), &b.attn, f);
    if let Some((ln, attn)) = &b.cross {
        f(&format!("{prefix}.ln_cross.gain"), &ln.gain);
        f(&format!("{prefix}.ln_cross.bias"), &ln.bias);
        visit_attention(&format!("{prefix}.cross"), attn, f);
    }
    f(&format!("{prefix}.ln_ffn.gain"), &b.ln_ffn.gain);
    f(&format!("{prefix}.ln_ffn.bias"), &b.ln_ffn.bias);
    f(&format!("{prefix}.ffn_w1"), &b.ffn_w1);
    f(&format!("{prefix}.ffn_b1"), &b.ffn_b1);
    f(&format!("{prefix}.ffn_w2"), &b.ffn_w2);
    f(&format!("{prefix}.ffn_b2"), &b.ffn_b2);
}

fn visit_block_mut<'a>(prefix: &str, b: &'a mut BlockParams, f: &mut dyn FnMut(&str, &'a mut Matrix)) {
    f(&format!("{prefix}.ln_attn.gain"), &mut b.ln_attn.gain);
    f(&format!("{prefix}.ln_attn.bias"), &mut b.ln_attn.bias);
    visit_attention_mut(&format!("{prefix}.attn"), &mut b.attn, f);
    if let Some((ln, attn)) = &mut b.cross {
        f(&format!("{prefix}.ln_cross.gain"), &mut ln.gain);
        f(&format!("{prefix}.ln_cross.bias"), &mut ln.bias);
        visit_attention_mut(&format!("{prefix}.cross"), attn, f);
    }
    f(&format!("{prefix}.ln_ffn.gain"), &mut b.ln_ffn.gain);
    f(&format!("{prefix}.ln_ffn.bias"), &mut b.ln_ffn.bias);
    f(&format!("{prefix}.ffn_w1"), &mut b.ffn_w1);
    f(&format!("{prefix}.ffn_b1"), &mut b.ffn_b1);
    f(&format!("{prefix}.ffn_w2"), &mut b.ffn_w2);
    f(&format!("{prefix}.ffn_b2"), &mut b.ffn_b2);
}

impl ParamSet for EncoderParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("patch_proj", &self.patch_proj);
        f("patch_bias", &self.patch_bias);
        f("token_table", &self.token_table);
        f("pos_image", &self.pos_image);
        f("pos_text", &self.pos_text);
        f("cls_image", &self.cls_image);
        f("cls_text", &self.cls_text);
        f("proto_image", &self.proto_image);
        f("proto_text", &self.proto_text);
        for (i, b) in self.image_blocks.iter().enumerate() {
            visit_block(&format!("img.{i}"), b, f);
        }
        for (i, b) in self.text_blocks.iter().enumerate() {
            visit_block(&format!("txt.{i}"), b, f);
        }
        for (i, b) in self.fusion_blocks.iter().enumerate() {
            visit_block(&format!("fus.{i}"), b, f);
        }
        f("tau", &self.tau);
        f("itm_w", &self.itm_w);
        f("itm_b", &self.itm_b);
    }

    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("patch_proj", &mut self.patch_proj);
        f("patch_bias", &mut self.patch_bias);
        f("token_table", &mut self.token_table);
        f("pos_image", &mut self.pos_image);
        f("pos_text", &mut self.pos_text);
        f("cls_image", &mut self.cls_image);
        f("cls_text", &mut self.cls_text);
        f("proto_image", &mut self.proto_image);
        f("proto_text", &mut self.proto_text);
        for (i, b) in self.image_blocks.iter_mut().enumerate() {
            visit_block_mut(&format!("img.{i}"), b, f);
        }
        for (i, b) in self.text_blocks.iter_mut().enumerate() {
            visit_block_mut(&format!("txt.{i}"), b, f);
        }
        for (i, b) in self.fusion_blocks.iter_mut().enumerate() {
            visit_block_mut(&format!("fus.{i}"), b, f);
        }
        f("tau", &mut self.tau);
        f("itm_w", &mut self.itm_w);
        f("itm_b", &mut self.itm_b);
    }
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

fn attention(
    tape: &mut Tape,
    binder: &mut Binder,
    attn: &AttentionParams,
    queries: NodeId,
    keys_values: NodeId,
) -> NodeId {
    let heads = attn.wq.len();
    let dk = attn.wq[0].ncols();
    let mut contexts = Vec::with_capacity(heads);
    for h in 0..heads {
        let wq = binder.bind(tape, &attn.wq[h]);
        let wk = binder.bind(tape, &attn.wk[h]);
        let wv = binder.bind(tape, &attn.wv[h]);
        let q = tape.matmul(queries, wq);
        let k = tape.matmul(keys_values, wk);
        let v = tape.matmul(keys_values, wv);
        let scores = tape.matmul_nt(q, k);
        let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
        let weights = tape.row_softmax(scores);
        contexts.push(tape.matmul(weights, v));
    }
    let ctx = if contexts.len() == 1 {
        contexts[0]
    } else {
        tape.concat_cols(&contexts)
    };
    let wo = binder.bind(tape, &attn.wo);
    tape.matmul(ctx, wo)
}

fn layer_norm_with(
    tape: &mut Tape,
    binder: &mut Binder,
    norm: &NormParams,
    x: NodeId,
) -> NodeId {
    let g = binder.bind(tape, &norm.gain);
    let b = binder.bind(tape, &norm.bias);
    tape.layer_norm(x, g, b)
}

fn run_block(
    tape: &mut Tape,
    binder: &mut Binder,
    block: &BlockParams,
    x: NodeId,
    cross_kv: Option<NodeId>,
) -> NodeId {
    let mut x = x;

    let normed = layer_norm_with(tape, binder, &block.ln_attn, x);
    let self_out = attention(tape, binder, &block.attn, normed, normed);
    x = tape.add(x, self_out);

    if let (Some((ln, cross_attn)), Some(kv)) = (&block.cross, cross_kv) {
        let normed = layer_norm_with(tape, binder, ln, x);
        let cross_out = attention(tape, binder, cross_attn, normed, kv);
        x = tape.add(x, cross_out);
    }

    let normed = layer_norm_with(tape, binder, &block.ln_ffn, x);
    let w1 = binder.bind(tape, &block.ffn_w1);
    let b1 = binder.bind(tape, &block.ffn_b1);
    let w2 = binder.bind(tape, &block.ffn_w2);
    let b2 = binder.bind(tape, &block.ffn_b2);
    let h = tape.matmul(normed, w1);
    let h = tape.add_row(h, b1);
    let h = tape.gelu(h);
    let h = tape.matmul(h, w2);
    let h = tape.add_row(h, b2);
    x = tape.add(x, h);
    x
}

/// Builds the channel-mask constants: `B` (1 keeps, 0 replaces) and `1 - B`.
fn channel_mask_matrices(masks: &[(usize, &[u8])], rows: usize, width: usize) -> (Matrix, Matrix) {
    let mut keep = Matrix::ones((rows, width));
    for (row, mask) in masks {
        for (c, &b) in mask.iter().enumerate() {
            keep[[*row, c]] = b as f64;
        }
    }
    let inv = keep.mapv(|x| 1.0 - x);
    (keep, inv)
}

/// Patch embedding (Eq.-style `[v_cls, L^v(p_1), ...] + P^v`) with optional
/// patch- and channel-level masking. Surviving patches keep their original
/// positional rows.
pub fn embed_image(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &EncoderParams,
    image: &SyntheticImage,
    mask: Option<&MaskOutcome>,
) -> Result<EmbeddingSequence, EncoderError> {
    let m = image.patches.nrows();
    if let Some(outcome) = mask {
        for &idx in &outcome.kept_patch_indices {
            if idx >= m {
                return Err(EncoderError::MaskOutOfRange(idx, m));
            }
        }
        let masks_image =
            outcome.kept_patch_indices.len() != m || !outcome.image_channel_masks.is_empty();
        if masks_image {
            masking::record_mask_application();
        }
    }

    let patches = tape.leaf(image.patches.clone());
    let proj = binder.bind(tape, &params.patch_proj);
    let bias = binder.bind(tape, &params.patch_bias);
    let projected = tape.matmul(patches, proj);
    let projected = tape.add_row(projected, bias);

    let kept: Vec<usize> = match mask {
        Some(outcome) => outcome.kept_patch_indices.clone(),
        None => (0..m).collect(),
    };
    let mut rows = if kept.len() == m && kept.iter().enumerate().all(|(i, &k)| i == k) {
        projected
    } else {
        tape.select_rows(projected, &kept)
    };

    if let Some(outcome) = mask {
        if !outcome.image_channel_masks.is_empty() {
            let width = params.config.width;
            let pairs: Vec<(usize, &[u8])> = outcome
                .image_channel_masks
                .iter()
                .enumerate()
                .map(|(i, m)| (i, m.as_slice()))
                .collect();
            let (keep, inv) = channel_mask_matrices(&pairs, kept.len(), width);
            let proto = binder.bind(tape, &params.proto_image);
            let proto_rows = tape.broadcast_row(proto, kept.len());
            let kept_part = tape.mul_const(rows, keep);
            let proto_part = tape.mul_const(proto_rows, inv);
            rows = tape.add(kept_part, proto_part);
        }
    }

    let cls = binder.bind(tape, &params.cls_image);
    let seq = tape.concat_rows(&[cls, rows]);
    let mut pos_indices = Vec::with_capacity(kept.len() + 1);
    pos_indices.push(0);
    pos_indices.extend(kept.iter().map(|&i| i + 1));
    let pos_table = binder.bind(tape, &params.pos_image);
    let pos = tape.select_rows(pos_table, &pos_indices);
    let out = tape.add(seq, pos);
    Ok(EmbeddingSequence {
        node: out,
        origin: Origin::Image,
    })
}

/// Token embedding with optional MASK substitution and channel masking;
/// text length is preserved.
pub fn embed_text(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &EncoderParams,
    caption: &Caption,
    mask: Option<&MaskOutcome>,
) -> Result<EmbeddingSequence, EncoderError> {
    let n = caption.tokens.len();
    if let Some(outcome) = mask {
        let masks_text =
            !outcome.masked_token_positions.is_empty() || !outcome.text_channel_masks.is_empty();
        if masks_text {
            masking::record_mask_application();
        }
    }

    let tokens: Vec<usize> = caption
        .tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| match mask {
            Some(outcome) if outcome.masked_token_positions.contains(&i) => AttributeSchema::MASK,
            _ => t,
        })
        .collect();

    let table = binder.bind(tape, &params.token_table);
    let mut rows = tape.select_rows(table, &tokens);

    if let Some(outcome) = mask {
        if !outcome.text_channel_masks.is_empty() {
            let width = params.config.width;
            let pairs: Vec<(usize, &[u8])> = outcome
                .text_channel_masks
                .iter()
                .map(|(pos, m)| (*pos, m.as_slice()))
                .collect();
            let (keep, inv) = channel_mask_matrices(&pairs, n, width);
            let proto = binder.bind(tape, &params.proto_text);
            let proto_rows = tape.broadcast_row(proto, n);
            let kept_part = tape.mul_const(rows, keep);
            let proto_part = tape.mul_const(proto_rows, inv);
            rows = tape.add(kept_part, proto_part);
        }
    }

    let cls = binder.bind(tape, &params.cls_text);
    let seq = tape.concat_rows(&[cls, rows]);
    let pos_indices: Vec<usize> = (0..=n).collect();
    let pos_table = binder.bind(tape, &params.pos_text);
    let pos = tape.select_rows(pos_table, &pos_indices);
    let out = tape.add(seq, pos);
    Ok(EmbeddingSequence {
        node: out,
        origin: Origin::Text,
    })
}

pub fn encode_image(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &EncoderParams,
    emb: EmbeddingSequence,
) -> Result<EmbeddingSequence, EncoderError> {
    if emb.origin != Origin::Image {
        return Err(EncoderError::WrongOrigin {
            expected: Origin::Image,
            got: emb.origin,
        });
    }
    let mut x = emb.node;
    for block in &params.image_blocks {
        x = run_block(tape, binder, block, x, None);
    }
    Ok(EmbeddingSequence {
        node: x,
        origin: Origin::Image,
    })
}

pub fn encode_text(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &EncoderParams,
    emb: EmbeddingSequence,
) -> Result<EmbeddingSequence, EncoderError> {
    if emb.origin != Origin::Text {
        return Err(EncoderError::WrongOrigin {
            expected: Origin::Text,
            got: emb.origin,
        });
    }
    let mut x = emb.node;
    for block in &params.text_blocks {
        x = run_block(tape, binder, block, x, None);
    }
    Ok(EmbeddingSequence {
        node: x,
        origin: Origin::Text,
    })
}

/// Fusion encoder: raw text embeddings as query, encoded image features as
/// key/value in every block's cross-attention sublayer.
pub fn fuse(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &EncoderParams,
    text_emb: EmbeddingSequence,
    image_feats: EmbeddingSequence,
) -> Result<EmbeddingSequence, EncoderError> {
    if text_emb.origin != Origin::Text {
        return Err(EncoderError::WrongOrigin {
            expected: Origin::Text,
            got: text_emb.origin,
        });
    }
    if image_feats.origin != Origin::Image {
        return Err(EncoderError::WrongOrigin {
            expected: Origin::Image,
            got: image_feats.origin,
        });
    }
    let mut x = text_emb.node;
    for block in &params.fusion_blocks {
        x = run_block(tape, binder, block, x, Some(image_feats.node));
    }
    Ok(EmbeddingSequence {
        node: x,
        origin: Origin::Fused,
    })
}

/// Classification row of a sequence as a 1×d node.
pub fn cls_row(tape: &mut Tape, seq: EmbeddingSequence) -> NodeId {
    tape.select_rows(seq.node, &[0])
}

/// ITM head logits (1×2: mismatch, match) from a fused sequence.
pub fn itm_logits(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &EncoderParams,
    fused: EmbeddingSequence,
) -> NodeId {
    let cls = cls_row(tape, fused);
    let w = binder.bind(tape, &params.itm_w);
    let b = binder.bind(tape, &params.itm_b);
    let logits = tape.matmul(cls, w);
    tape.add_row(logits, b)
}

// ---------------------------------------------------------------------------
// Inference helpers. These build a throwaway tape and expose no masking
// hooks, so every evaluation path is unmasked by construction.
// ---------------------------------------------------------------------------

/// Global image feature f^v_cls.
pub fn image_cls_feature(params: &EncoderParams, image: &SyntheticImage) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let emb = embed_image(&mut tape, &mut binder, params, image, None).expect("unmasked embed");
    let enc = encode_image(&mut tape, &mut binder, params, emb).expect("origin is image");
    tape.value(enc.node).row(0).to_vec()
}

/// Global text feature f^t_cls.
pub fn text_cls_feature(params: &EncoderParams, caption: &Caption) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let emb = embed_text(&mut tape, &mut binder, params, caption, None).expect("unmasked embed");
    let enc = encode_text(&mut tape, &mut binder, params, emb).expect("origin is text");
    tape.value(enc.node).row(0).to_vec()
}

/// Match probability from the ITM head for one (caption, image) pair.
pub fn itm_match_probability(
    params: &EncoderParams,
    caption: &Caption,
    image: &SyntheticImage,
) -> f64 {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let img_emb = embed_image(&mut tape, &mut binder, params, image, None).expect("unmasked embed");
    let img_feats = encode_image(&mut tape, &mut binder, params, img_emb).expect("origin is image");
    let txt_emb = embed_text(&mut tape, &mut binder, params, caption, None).expect("unmasked embed");
    let fused = fuse(&mut tape, &mut binder, params, txt_emb, img_feats).expect("origins checked");
    let logits = itm_logits(&mut tape, &mut binder, params, fused);
    let probs = tape.row_softmax(logits);
    tape.value(probs)[[0, 1]]
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec, Provenance};
    use crate::masking::MaskConfig;
    use std::collections::BTreeSet;

    fn toy_corpus() -> crate::corpus::CorpusSplit {
        let spec = CorpusSpec {
            train_identities: 6,
            test_identities: 3,
            labeled_ratio: 1.0,
            ..CorpusSpec::default()
        };
        generate_corpus(&spec, 31).unwrap()
    }

    fn params_for(corpus: &crate::corpus::CorpusSplit, seed: u64) -> EncoderParams {
        EncoderParams::init(&corpus.spec.schema, &EncoderConfig::default(), seed)
    }

    fn jitter(params: &mut EncoderParams, scale: f64, seed: u64) {
        let mut rng = stream_rng(seed, "jitter", 0);
        params.for_each_mut(&mut |_, m| {
            m.mapv_inplace(|x| x + scale * rng.gen_range(-1.0..1.0));
        });
    }

    #[test]
    fn embed_image_shape_contract() {
        let corpus = toy_corpus();
        let params = params_for(&corpus, 1);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let emb =
            embed_image(&mut tape, &mut binder, &params, &corpus.labeled[0].image, None).unwrap();
        assert_eq!(tape.value(emb.node).dim(), (17, 32));
    }

    #[test]
    fn embed_image_zero_weights_leaves_cls_only() {
        let corpus = toy_corpus();
        let mut params = params_for(&corpus, 1);
        params.patch_proj.fill(0.0);
        params.patch_bias.fill(0.0);
        params.pos_image.fill(0.0);
        let outcome = MaskOutcome {
            kept_patch_indices: vec![0, 3],
            ..MaskOutcome::identity(16)
        };
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let emb = embed_image(
            &mut tape,
            &mut binder,
            &params,
            &corpus.labeled[0].image,
            Some(&outcome),
        )
        .unwrap();
        let v = tape.value(emb.node);
        assert_eq!(v.dim(), (3, 32));
        assert_eq!(v.row(0).to_vec(), params.cls_image.row(0).to_vec());
        assert!(v.row(1).iter().all(|&x| x == 0.0));
        assert!(v.row(2).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn masked_embed_matches_unmasked_rows() {
        // Surviving rows of a patch-masked embedding must equal the same
        // rows of the unmasked embedding (gap-preserving positions).
        let corpus = toy_corpus();
        let mut params = params_for(&corpus, 2);
        jitter(&mut params, 0.05, 3);
        let image = &corpus.labeled[0].image;
        let kept = vec![0usize, 2, 5, 9, 15];
        let outcome = MaskOutcome {
            kept_patch_indices: kept.clone(),
            ..MaskOutcome::identity(16)
        };

        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let masked = embed_image(&mut tape, &mut binder, &params, image, Some(&outcome)).unwrap();
        let full = embed_image(&mut tape, &mut binder, &params, image, None).unwrap();
        let masked_v = tape.value(masked.node).clone();
        let full_v = tape.value(full.node);
        assert_eq!(masked_v.row(0), full_v.row(0));
        for (out_row, &orig) in kept.iter().enumerate() {
            assert_eq!(masked_v.row(out_row + 1), full_v.row(orig + 1));
        }
    }

    #[test]
    fn embed_image_rejects_out_of_range_mask() {
        let corpus = toy_corpus();
        let params = params_for(&corpus, 1);
        let outcome = MaskOutcome {
            kept_patch_indices: vec![0, 99],
            ..MaskOutcome::identity(16)
        };
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        assert!(matches!(
            embed_image(&mut tape, &mut binder, &params, &corpus.labeled[0].image, Some(&outcome)),
            Err(EncoderError::MaskOutOfRange(99, 16))
        ));
    }

    #[test]
    fn embed_text_shape_and_mask_substitution() {
        let corpus = toy_corpus();
        let params = params_for(&corpus, 4);
        let caption = Caption {
            tokens: vec![
                AttributeSchema::BOS,
                params.schema.connective_token(0),
                params.schema.value_token(0, 1),
                params.schema.connective_token(1),
                params.schema.value_token(1, 2),
                params.schema.connective_token(2),
                params.schema.value_token(2, 3),
                AttributeSchema::EOS,
            ],
            provenance: Provenance::Human,
            oracle_corruption_rate: 0.0,
        };
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let plain = embed_text(&mut tape, &mut binder, &params, &caption, None).unwrap();
        assert_eq!(tape.value(plain.node).dim(), (9, 32));

        let outcome = MaskOutcome {
            masked_token_positions: BTreeSet::from([2usize]),
            ..MaskOutcome::identity(16)
        };
        let masked = embed_text(&mut tape, &mut binder, &params, &caption, Some(&outcome)).unwrap();
        let pv = tape.value(plain.node);
        let mv = tape.value(masked.node);
        let mut changed = 0;
        for r in 0..pv.nrows() {
            if pv.row(r) != mv.row(r) {
                changed += 1;
                // row 3 = token position 2; must equal MASK embedding + position
                assert_eq!(r, 3);
                let expect: Vec<f64> = params
                    .token_table
                    .row(AttributeSchema::MASK)
                    .iter()
                    .zip(params.pos_text.row(r).iter())
                    .map(|(a, b)| a + b)
                    .collect();
                assert_eq!(mv.row(r).to_vec(), expect);
            }
        }
        assert_eq!(changed, 1, "exactly one row uses the MASK embedding");
    }

    #[test]
    fn encoders_are_identity_at_init() {
        // Residual output projections start at zero.
        let corpus = toy_corpus();
        let params = params_for(&corpus, 5);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let emb =
            embed_image(&mut tape, &mut binder, &params, &corpus.labeled[0].image, None).unwrap();
        let enc = encode_image(&mut tape, &mut binder, &params, emb).unwrap();
        assert_eq!(tape.value(emb.node), tape.value(enc.node));

        let temb =
            embed_text(&mut tape, &mut binder, &params, &corpus.labeled[0].caption, None).unwrap();
        let tenc = encode_text(&mut tape, &mut binder, &params, temb).unwrap();
        assert_eq!(tape.value(temb.node), tape.value(tenc.node));
    }

    #[test]
    fn encode_checks_origin() {
        let corpus = toy_corpus();
        let params = params_for(&corpus, 5);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let emb =
            embed_image(&mut tape, &mut binder, &params, &corpus.labeled[0].image, None).unwrap();
        assert!(matches!(
            encode_text(&mut tape, &mut binder, &params, emb),
            Err(EncoderError::WrongOrigin { .. })
        ));
    }

    #[test]
    fn cls_output_is_permutation_invariant() {
        // Permuting patch rows together with their positional rows must not
        // change the classification output: attention has no other notion
        // of order. Verified by direct recomputation on a 3-patch toy.
        let schema = AttributeSchema {
            attribute_count: 2,
            values_per_attribute: 3,
            patch_count: 3,
            patch_dim: 4,
            connective_count: 2,
            image_noise: 0.1,
        };
        let config = EncoderConfig {
            width: 8,
            layers: 2,
            heads: 2,
            ffn_mult: 2,
        };
        let mut params = EncoderParams::init(&schema, &config, 6);
        let mut rng = stream_rng(7, "jitter", 0);
        params.for_each_mut(&mut |_, m| m.mapv_inplace(|x| x + 0.3 * rng.gen_range(-1.0..1.0)));

        let spec = CorpusSpec {
            schema: schema.clone(),
            train_identities: 2,
            test_identities: 2,
            images_per_identity: 1,
            captions_per_image: 1,
            labeled_ratio: 1.0,
        };
        let corpus = generate_corpus(&spec, 8).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let emb =
            embed_image(&mut tape, &mut binder, &params, &corpus.labeled[0].image, None).unwrap();
        let base = tape.value(emb.node).clone();

        // permutation (1 2 3) -> (3 1 2) of the patch rows
        let mut permuted = base.clone();
        permuted.row_mut(1).assign(&base.row(3));
        permuted.row_mut(2).assign(&base.row(1));
        permuted.row_mut(3).assign(&base.row(2));

        let enc_base = encode_image(&mut tape, &mut binder, &params, emb).unwrap();
        let leaf = tape.leaf(permuted);
        let enc_perm = encode_image(
            &mut tape,
            &mut binder,
            &params,
            EmbeddingSequence { node: leaf, origin: Origin::Image },
        )
        .unwrap();
        let a = tape.value(enc_base.node).row(0).to_vec();
        let b = tape.value(enc_perm.node).row(0).to_vec();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9, "cls changed under permutation");
        }
    }

    #[test]
    fn encoded_norm_stays_bounded_at_init_scale() {
        let corpus = toy_corpus();
        let params = params_for(&corpus, 9);
        for (i, img) in corpus
            .labeled
            .iter()
            .map(|p| &p.image)
            .chain(corpus.test_gallery.iter())
            .take(100)
            .enumerate()
        {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let emb = embed_image(&mut tape, &mut binder, &params, img, None).unwrap();
            let enc = encode_image(&mut tape, &mut binder, &params, emb).unwrap();
            let in_norm = tape.value(emb.node).mapv(|x| x * x).sum().sqrt();
            let out_norm = tape.value(enc.node).mapv(|x| x * x).sum().sqrt();
            assert!(
                out_norm <= 10.0 * in_norm,
                "image {i}: output norm {out_norm} vs input {in_norm}"
            );
            assert!(out_norm.is_finite());
        }
    }

    #[test]
    fn fusion_with_zero_cross_output_matches_self_only_blocks() {
        // Zeroing the cross-attention output projection must reduce each
        // fusion block to its self-attention + FFN path. Oracle: run the
        // same weights as plain text blocks.
        let corpus = toy_corpus();
        let mut params = params_for(&corpus, 10);
        jitter(&mut params, 0.2, 11);
        for block in &mut params.fusion_blocks {
            if let Some((_, cross)) = &mut block.cross {
                cross.wo.fill(0.0);
            }
        }
        let mut self_only = params.clone();
        self_only.text_blocks = params
            .fusion_blocks
            .iter()
            .map(|b| BlockParams {
                cross: None,
                ..b.clone()
            })
            .collect();

        let caption = &corpus.labeled[0].caption;
        let image = &corpus.labeled[0].image;
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let img_emb = embed_image(&mut tape, &mut binder, &params, image, None).unwrap();
        let img_feats = encode_image(&mut tape, &mut binder, &params, img_emb).unwrap();
        let txt = embed_text(&mut tape, &mut binder, &params, caption, None).unwrap();
        let fused = fuse(&mut tape, &mut binder, &params, txt, img_feats).unwrap();

        let txt2 = embed_text(&mut tape, &mut binder, &self_only, caption, None).unwrap();
        let plain = encode_text(&mut tape, &mut binder, &self_only, txt2).unwrap();

        let a = tape.value(fused.node);
        let b = tape.value(plain.node);
        let diff = (a - b).mapv(f64::abs).sum();
        assert!(diff < 1e-12, "ablated fusion differs from self-only path: {diff}");
    }

    #[test]
    fn fusion_is_sensitive_to_image_features() {
        let corpus = toy_corpus();
        let mut params = params_for(&corpus, 12);
        jitter(&mut params, 0.2, 13);
        let caption = &corpus.labeled[0].caption;
        let mut tape = Tape::new();
        let mut binder = Binder::new();

        let txt = embed_text(&mut tape, &mut binder, &params, caption, None).unwrap();
        let zeros = tape.leaf(Matrix::zeros((17, 32)));
        let fused_zero = fuse(
            &mut tape,
            &mut binder,
            &params,
            txt,
            EmbeddingSequence { node: zeros, origin: Origin::Image },
        )
        .unwrap();

        let img_emb =
            embed_image(&mut tape, &mut binder, &params, &corpus.labeled[0].image, None).unwrap();
        let img_feats = encode_image(&mut tape, &mut binder, &params, img_emb).unwrap();
        let txt2 = embed_text(&mut tape, &mut binder, &params, caption, None).unwrap();
        let fused_real = fuse(&mut tape, &mut binder, &params, txt2, img_feats).unwrap();

        let a = tape.value(fused_zero.node).row(0).to_vec();
        let b = tape.value(fused_real.node).row(0).to_vec();
        let diff: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-8, "cross-attention ignored the image features");
        assert_eq!(tape.value(fused_real.node).nrows(), caption.tokens.len() + 1);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let corpus = toy_corpus();
        let mut params = params_for(&corpus, 14);
        jitter(&mut params, 0.3, 15);
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let emb =
            embed_image(&mut tape, &mut binder, &params, &corpus.labeled[0].image, None).unwrap();
        let _ = encode_image(&mut tape, &mut binder, &params, emb).unwrap();
        let softmaxes = tape.row_softmax_values();
        assert!(!softmaxes.is_empty());
        for sm in softmaxes {
            for row in sm.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn channel_mask_composition_matches_sequential_oracle() {
        // patch-then-channel: channel masks apply to the surviving rows'
        // projected embeddings, before positions are added.
        let corpus = toy_corpus();
        let mut params = params_for(&corpus, 16);
        jitter(&mut params, 0.1, 17);
        params.proto_image = Matrix::from_shape_fn((1, 32), |(_, c)| 0.1 * c as f64);
        let image = &corpus.labeled[0].image;
        let kept = vec![1usize, 4, 7];
        let masks: Vec<Vec<u8>> = (0..3)
            .map(|k| (0..32).map(|c| ((c + k) % 3 != 0) as u8).collect())
            .collect();
        let outcome = MaskOutcome {
            kept_patch_indices: kept.clone(),
            image_channel_masks: masks.clone(),
            ..MaskOutcome::identity(16)
        };

        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let emb = embed_image(&mut tape, &mut binder, &params, image, Some(&outcome)).unwrap();
        let got = tape.value(emb.node).clone();

        // oracle: project, select, channel-mask via the plain helper, add positions
        let projected = image.patches.dot(&params.patch_proj) + &params.patch_bias;
        for (out_row, &orig) in kept.iter().enumerate() {
            let row: Vec<f64> = projected.row(orig).to_vec();
            let proto: Vec<f64> = params.proto_image.row(0).to_vec();
            let masked =
                crate::masking::apply_channel_mask_with(&row, &proto, &masks[out_row]).unwrap();
            for c in 0..32 {
                let expect = masked[c] + params.pos_image[[orig + 1, c]];
                let actual = got[[out_row + 1, c]];
                assert!(
                    (expect - actual).abs() < 1e-12,
                    "row {out_row} col {c}: {expect} vs {actual}"
                );
            }
        }
        // cls row is never channel-masked
        for c in 0..32 {
            let expect = params.cls_image[[0, c]] + params.pos_image[[0, c]];
            assert!((got[[0, c]] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn full_mask_pipeline_runs_and_counts() {
        let corpus = toy_corpus();
        let params = params_for(&corpus, 18);
        let caption = &corpus.labeled[0].caption;
        let caps = vec![caption];
        let outcomes = crate::masking::mask_batch(
            &MaskConfig::default(),
            &params.schema,
            &caps,
            16,
            32,
            7,
        )
        .unwrap();
        let (t0, _) = crate::masking::mask_counters();
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let img = embed_image(
            &mut tape,
            &mut binder,
            &params,
            &corpus.labeled[0].image,
            Some(&outcomes[0]),
        )
        .unwrap();
        assert_eq!(tape.value(img.node).nrows(), 13); // 1 + floor(16*0.8)
        let txt = embed_text(&mut tape, &mut binder, &params, caption, Some(&outcomes[0])).unwrap();
        assert_eq!(tape.value(txt.node).nrows(), caption.tokens.len() + 1);
        // other test threads may bump the global counter concurrently
        let (t1, _) = crate::masking::mask_counters();
        assert!(t1 - t0 >= 2);
    }

    #[test]
    fn checkpoint_round_trip() {
        let corpus = toy_corpus();
        let mut params = params_for(&corpus, 19);
        jitter(&mut params, 0.2, 20);
        let bundle = params.to_bundle();
        let back =
            EncoderParams::from_bundle(&params.schema, &params.config, &bundle).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn inference_helpers_produce_finite_features() {
        let corpus = toy_corpus();
        let mut params = params_for(&corpus, 21);
        jitter(&mut params, 0.2, 22);
        let f_v = image_cls_feature(&params, &corpus.test_gallery[0]);
        let f_t = text_cls_feature(&params, &corpus.test_queries[0].caption);
        assert_eq!(f_v.len(), 32);
        assert_eq!(f_t.len(), 32);
        assert!(f_v.iter().chain(&f_t).all(|x| x.is_finite()));
        let p = itm_match_probability(&params, &corpus.test_queries[0].caption, &corpus.test_gallery[0]);
        assert!((0.0..=1.0).contains(&p));
    }
}
