//! Conditional caption model for the generation stage.
//!
//! A small autoregressive token model conditioned on one projected image
//! vector (mean-pooled patch pixels) prepended to the token sequence. It is
//! finetuned on the labeled pairs with the summed next-token cross-entropy
//! and then decodes pseudo-texts (greedy or nucleus sampling) for every
//! unlabeled image.

use crate::checkpoint::{Bundle, CheckpointError};
use crate::corpus::{
    oracle_corruption, AttributeSchema, Caption, CorpusSplit, PairedSample, Provenance,
    SyntheticImage,
};
use crate::optim::{clip_gradients, Adam, ParamSet};
use crate::rng::{derive_seed, stream_rng};
use crate::tape::{Binder, Matrix, NodeId, Tape};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CaptionerError {
    #[error("caption must start with BOS and end with EOS")]
    MalformedCaption,
    #[error("finetune requires a non-empty labeled set")]
    EmptyLabeledSet,
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
}

/// Decoding strategy for pseudo-text generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoder {
    Greedy,
    /// Nucleus sampling over the smallest prefix of the sorted distribution
    /// with cumulative mass >= top_p.
    Sample { top_p: f64 },
}

pub const HIDDEN: usize = 32;

/// Parameters of the caption model: image projection, token and positional
/// embeddings, one pre-norm attention/feedforward mixing block, output head.
#[derive(Debug, Clone, PartialEq)]
pub struct CaptionerParams {
    pub schema: AttributeSchema,
    pub hidden: usize,
    pub image_projection: Matrix, // patch_dim × hidden
    pub image_bias: Matrix,       // 1 × hidden
    pub token_embeddings: Matrix, // vocab × hidden
    pub positional: Matrix,       // (max_seq + 1) × hidden
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub attn_q: Matrix, // hidden × hidden
    pub attn_k: Matrix,
    pub attn_v: Matrix,
    pub attn_out: Matrix, // hidden × hidden, zero at init
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub ffn_w1: Matrix, // hidden × 4*hidden
    pub ffn_b1: Matrix,
    pub ffn_w2: Matrix, // 4*hidden × hidden, zero at init
    pub ffn_b2: Matrix,
    pub head_w: Matrix, // hidden × vocab, zero at init => uniform distribution
    pub head_b: Matrix, // 1 × vocab
}

fn gaussian_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    Matrix::from_shape_fn((rows, cols), |_| {
        // Box-Muller
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

impl CaptionerParams {
    /// Fresh initialization. The output head starts at zero, so an
    /// untrained model predicts the uniform distribution over the
    /// vocabulary at every step.
    pub fn init(schema: &AttributeSchema, seed: u64) -> Self {
        let mut rng = stream_rng(seed, "captioner-init", 0);
        let d = HIDDEN;
        let vocab = schema.vocab_size();
        let max_pos = schema.max_sequence_len() + 1;
        let scale = 0.02;
        CaptionerParams {
            schema: schema.clone(),
            hidden: d,
            image_projection: gaussian_matrix(schema.patch_dim, d, scale, &mut rng),
            image_bias: Matrix::zeros((1, d)),
            token_embeddings: gaussian_matrix(vocab, d, scale, &mut rng),
            positional: gaussian_matrix(max_pos, d, scale, &mut rng),
            ln1_gain: Matrix::ones((1, d)),
            ln1_bias: Matrix::zeros((1, d)),
            attn_q: gaussian_matrix(d, d, scale, &mut rng),
            attn_k: gaussian_matrix(d, d, scale, &mut rng),
            attn_v: gaussian_matrix(d, d, scale, &mut rng),
            attn_out: Matrix::zeros((d, d)),
            ln2_gain: Matrix::ones((1, d)),
            ln2_bias: Matrix::zeros((1, d)),
            ffn_w1: gaussian_matrix(d, 4 * d, scale, &mut rng),
            ffn_b1: Matrix::zeros((1, 4 * d)),
            ffn_w2: Matrix::zeros((4 * d, d)),
            ffn_b2: Matrix::zeros((1, d)),
            head_w: Matrix::zeros((d, vocab)),
            head_b: Matrix::zeros((1, vocab)),
        }
    }

    pub fn to_bundle(&self) -> Bundle {
        let mut b = Bundle::new();
        self.for_each(&mut |name, m| b.push(name, m.clone()));
        b
    }

    pub fn from_bundle(schema: &AttributeSchema, bundle: &Bundle) -> Result<Self, CaptionerError> {
        let mut params = CaptionerParams::init(schema, 0);
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
}

impl ParamSet for CaptionerParams {
    fn for_each(&self, f: &mut dyn FnMut(&str, &Matrix)) {
        f("image_projection", &self.image_projection);
        f("image_bias", &self.image_bias);
        f("token_embeddings", &self.token_embeddings);
        f("positional", &self.positional);
        f("ln1_gain", &self.ln1_gain);
        f("ln1_bias", &self.ln1_bias);
        f("attn_q", &self.attn_q);
        f("attn_k", &self.attn_k);
        f("attn_v", &self.attn_v);
        f("attn_out", &self.attn_out);
        f("ln2_gain", &self.ln2_gain);
        f("ln2_bias", &self.ln2_bias);
        f("ffn_w1", &self.ffn_w1);
        f("ffn_b1", &self.ffn_b1);
        f("ffn_w2", &self.ffn_w2);
        f("ffn_b2", &self.ffn_b2);
        f("head_w", &self.head_w);
        f("head_b", &self.head_b);
    }

    fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut Matrix)) {
        f("image_projection", &mut self.image_projection);
        f("image_bias", &mut self.image_bias);
        f("token_embeddings", &mut self.token_embeddings);
        f("positional", &mut self.positional);
        f("ln1_gain", &mut self.ln1_gain);
        f("ln1_bias", &mut self.ln1_bias);
        f("attn_q", &mut self.attn_q);
        f("attn_k", &mut self.attn_k);
        f("attn_v", &mut self.attn_v);
        f("attn_out", &mut self.attn_out);
        f("ln2_gain", &mut self.ln2_gain);
        f("ln2_bias", &mut self.ln2_bias);
        f("ffn_w1", &mut self.ffn_w1);
        f("ffn_b1", &mut self.ffn_b1);
        f("ffn_w2", &mut self.ffn_w2);
        f("ffn_b2", &mut self.ffn_b2);
        f("head_w", &mut self.head_w);
        f("head_b", &mut self.head_b);
    }
}

/// Mean-pooled patch pixels as a 1 × patch_dim row.
fn pooled_image(image: &SyntheticImage) -> Matrix {
    let m = image.patches.nrows() as f64;
    image
        .patches
        .sum_axis(ndarray::Axis(0))
        .insert_axis(ndarray::Axis(0))
        / m
}

/// Builds the forward graph for a teacher-forced sequence and returns
/// per-position log-probability rows (one row per input position).
fn forward_logprobs(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &CaptionerParams,
    image: &SyntheticImage,
    input_tokens: &[usize],
) -> NodeId {
    let d = params.hidden;
    let pooled = tape.leaf(pooled_image(image));
    let wi = binder.bind(tape, &params.image_projection);
    let bi = binder.bind(tape, &params.image_bias);
    let img = tape.matmul(pooled, wi);
    let img = tape.add_row(img, bi);

    let table = binder.bind(tape, &params.token_embeddings);
    let toks = tape.select_rows(table, input_tokens);
    let seq = tape.concat_rows(&[img, toks]);

    let n = input_tokens.len() + 1;
    let pos_table = binder.bind(tape, &params.positional);
    let positions: Vec<usize> = (0..n).collect();
    let pos = tape.select_rows(pos_table, &positions);
    let mut x = tape.add(seq, pos);

    // one pre-norm causal block
    let ln1g = binder.bind(tape, &params.ln1_gain);
    let ln1b = binder.bind(tape, &params.ln1_bias);
    let normed = tape.layer_norm(x, ln1g, ln1b);
    let wq = binder.bind(tape, &params.attn_q);
    let wk = binder.bind(tape, &params.attn_k);
    let wv = binder.bind(tape, &params.attn_v);
    let q = tape.matmul(normed, wq);
    let k = tape.matmul(normed, wk);
    let v = tape.matmul(normed, wv);
    let scores = tape.matmul_nt(q, k);
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let causal = Matrix::from_shape_fn((n, n), |(r, c)| if c > r { -1e30 } else { 0.0 });
    let scores = tape.add_const(scores, &causal);
    let attn = tape.row_softmax(scores);
    let ctx = tape.matmul(attn, v);
    let wo = binder.bind(tape, &params.attn_out);
    let attn_out = tape.matmul(ctx, wo);
    x = tape.add(x, attn_out);

    let ln2g = binder.bind(tape, &params.ln2_gain);
    let ln2b = binder.bind(tape, &params.ln2_bias);
    let normed = tape.layer_norm(x, ln2g, ln2b);
    let w1 = binder.bind(tape, &params.ffn_w1);
    let b1 = binder.bind(tape, &params.ffn_b1);
    let w2 = binder.bind(tape, &params.ffn_w2);
    let b2 = binder.bind(tape, &params.ffn_b2);
    let h = tape.matmul(normed, w1);
    let h = tape.add_row(h, b1);
    let h = tape.gelu(h);
    let h = tape.matmul(h, w2);
    let h = tape.add_row(h, b2);
    x = tape.add(x, h);

    let hw = binder.bind(tape, &params.head_w);
    let hb = binder.bind(tape, &params.head_b);
    let logits = tape.matmul(x, hw);
    let logits = tape.add_row(logits, hb);
    tape.row_log_softmax(logits)
}

fn split_caption(caption: &Caption) -> Result<(&[usize], &[usize]), CaptionerError> {
    let toks = &caption.tokens;
    if toks.len() < 2
        || toks[0] != AttributeSchema::BOS
        || *toks.last().unwrap() != AttributeSchema::EOS
    {
        return Err(CaptionerError::MalformedCaption);
    }
    // image occupies position 0; inputs are BOS..second-to-last token and
    // targets are every token after BOS
    Ok((&toks[..toks.len() - 1], &toks[1..]))
}

/// Builds the summed language-modeling loss node for one (image, caption)
/// pair on an existing tape.
pub fn lm_loss_node(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &CaptionerParams,
    image: &SyntheticImage,
    caption: &Caption,
) -> Result<NodeId, CaptionerError> {
    let (inputs, targets) = split_caption(caption)?;
    let logprobs = forward_logprobs(tape, binder, params, image, inputs);
    // position p predicts targets[p-1]; build a one-hot weight that picks
    // those entries, then sum
    let n = inputs.len() + 1;
    let vocab = params.schema.vocab_size();
    let mut pick = Matrix::zeros((n, vocab));
    for (i, &t) in targets.iter().enumerate() {
        pick[[i + 1, t]] = -1.0;
    }
    let picked = tape.mul_const(logprobs, pick);
    Ok(tape.sum_all(picked))
}

/// Summed negative log-likelihood of the caption given the image (teacher
/// forcing over every token after BOS).
pub fn lm_loss(
    params: &CaptionerParams,
    image: &SyntheticImage,
    caption: &Caption,
) -> Result<f64, CaptionerError> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let node = lm_loss_node(&mut tape, &mut binder, params, image, caption)?;
    Ok(tape.scalar(node))
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            epochs: 30,
            learning_rate: 3e-3,
            batch_size: 16,
            seed: 0,
        }
    }
}

/// Per-epoch mean token loss history from finetuning.
pub type FinetuneHistory = Vec<f64>;

/// Finetunes on labeled pairs. Deterministic per seed; returns the trained
/// parameters and per-epoch mean token loss.
pub fn finetune(
    params: &CaptionerParams,
    labeled: &[PairedSample],
    config: &FinetuneConfig,
) -> Result<(CaptionerParams, FinetuneHistory), CaptionerError> {
    if labeled.is_empty() {
        return Err(CaptionerError::EmptyLabeledSet);
    }
    let mut params = params.clone();
    let mut adam = Adam::new(config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        let mut rng = stream_rng(config.seed, "caption-shuffle", epoch as u64);
        order.shuffle(&mut rng);

        let mut epoch_loss = 0.0;
        let mut epoch_tokens = 0usize;
        for chunk in order.chunks(config.batch_size.max(1)) {
            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let mut parts = Vec::with_capacity(chunk.len());
            let mut tokens = 0usize;
            for &idx in chunk {
                let pair = &labeled[idx];
                parts.push(lm_loss_node(
                    &mut tape,
                    &mut binder,
                    &params,
                    &pair.image,
                    &pair.caption,
                )?);
                tokens += pair.caption.tokens.len() - 1;
            }
            let total = tape.concat_rows(&parts);
            let total = tape.sum_all(total);
            // optimize the mean per-token loss so the step size is
            // insensitive to batch makeup
            let loss_node = tape.scale(total, 1.0 / tokens as f64);
            let loss = tape.scalar(loss_node);
            if !loss.is_finite() {
                return Err(CaptionerError::Diverged { epoch, loss });
            }
            epoch_loss += tape.scalar(total);
            epoch_tokens += tokens;

            let grads = tape.backward(loss_node);
            let mut named: BTreeMap<String, Matrix> = BTreeMap::new();
            params.for_each(&mut |name, m| {
                if let Some(g) = binder.grad_of(&grads, m) {
                    named.insert(name.to_string(), g.clone());
                }
            });
            clip_gradients(&mut named, 5.0);
            adam.step(&mut params, &named);
        }
        history.push(epoch_loss / epoch_tokens.max(1) as f64);
    }

    // guard against a blow-up caused by the final update
    let mut finite = true;
    params.for_each(&mut |_, m| finite &= m.iter().all(|x| x.is_finite()));
    if !finite {
        return Err(CaptionerError::Diverged {
            epoch: config.epochs.saturating_sub(1),
            loss: f64::NAN,
        });
    }
    Ok((params, history))
}

/// Distribution over the next token given the current prefix.
fn next_token_logprobs(
    params: &CaptionerParams,
    image: &SyntheticImage,
    prefix: &[usize],
) -> Vec<f64> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let logprobs = forward_logprobs(&mut tape, &mut binder, params, image, prefix);
    let v = tape.value(logprobs);
    v.row(v.nrows() - 1).to_vec()
}

/// Generates one pseudo caption for an image. The oracle corruption rate is
/// filled in from the image's true attributes via `attrs`.
pub fn generate_pseudo_text(
    params: &CaptionerParams,
    image: &SyntheticImage,
    attrs: &[usize],
    decoder: Decoder,
    seed: u64,
) -> Caption {
    let schema = &params.schema;
    let max_new = schema.max_generated_tokens();
    let mut tokens = vec![AttributeSchema::BOS];
    let mut rng = stream_rng(seed, "decode", 0);
    let mut truncated = true;
    for _ in 0..max_new {
        let logprobs = next_token_logprobs(params, image, &tokens);
        let next = match decoder {
            Decoder::Greedy => argmax_token(&logprobs),
            Decoder::Sample { top_p } => nucleus_sample(&logprobs, top_p, &mut rng),
        };
        tokens.push(next);
        if next == AttributeSchema::EOS {
            truncated = false;
            break;
        }
    }
    if truncated {
        log::debug!("generation hit the length cap; appending EOS");
        tokens.push(AttributeSchema::EOS);
    }
    let rate = oracle_corruption(schema, attrs, &tokens);
    Caption {
        tokens,
        provenance: Provenance::Pseudo,
        oracle_corruption_rate: rate,
    }
}

fn argmax_token(logprobs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in logprobs.iter().enumerate() {
        if v > logprobs[best] {
            best = i;
        }
    }
    best
}

fn nucleus_sample(logprobs: &[f64], top_p: f64, rng: &mut impl Rng) -> usize {
    let mut order: Vec<usize> = (0..logprobs.len()).collect();
    order.sort_by(|&a, &b| logprobs[b].partial_cmp(&logprobs[a]).unwrap().then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut mass = 0.0;
    for &i in &order {
        kept.push(i);
        mass += logprobs[i].exp();
        if mass >= top_p {
            break;
        }
    }
    let total: f64 = kept.iter().map(|&i| logprobs[i].exp()).sum();
    let mut draw = rng.gen_range(0.0..total);
    for &i in &kept {
        let p = logprobs[i].exp();
        if draw < p {
            return i;
        }
        draw -= p;
    }
    *kept.last().expect("nucleus never empty")
}

/// Pseudo-labels every unlabeled image in the corpus. Sample ids continue
/// after the labeled ids so the union has unique ids.
pub fn generate_pseudo_set(
    params: &CaptionerParams,
    corpus: &CorpusSplit,
    decoder: Decoder,
    texts_per_image: usize,
    seed: u64,
) -> Vec<PairedSample> {
    let mut out = Vec::with_capacity(corpus.unlabeled.len() * texts_per_image);
    let mut next_id = corpus.labeled.len();
    for (i, image) in corpus.unlabeled.iter().enumerate() {
        let attrs = corpus.attrs_of(image.identity_id);
        for t in 0..texts_per_image {
            let cap_seed = derive_seed(seed, "pseudo", (i * texts_per_image + t) as u64);
            let caption = generate_pseudo_text(params, image, attrs, decoder, cap_seed);
            out.push(PairedSample {
                sample_id: next_id,
                image: image.clone(),
                caption,
            });
            next_id += 1;
        }
    }
    out
}
