//! Hybrid patch/channel masking.
//!
//! Patch-level masking removes image patches (the survivors keep their
//! original positional rows) and substitutes text tokens with the MASK
//! token. Channel-level masking replaces a random subset of embedding
//! channels with the corresponding channels of a learnable prototype.
//! Masks are drawn per sample per step; inference never masks, which the
//! instrumentation counters below make checkable.

use crate::corpus::{AttributeSchema, Caption};
use crate::rng::{derive_seed, stream_rng};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::cell::Cell;
use std::collections::BTreeSet;
use std::sync::atomic::{AtomicU64, Ordering};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MaskError {
    #[error("masking ratio must be in [0, 1), got {0}")]
    BadRatio(f64),
    #[error("row and prototype widths differ: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("patch index {0} out of range for {1} patches")]
    PatchOutOfRange(usize, usize),
}

/// Masking ratios and per-level, per-modality enable flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskConfig {
    pub rho_v: f64,
    pub rho_t: f64,
    pub beta_v: f64,
    pub beta_t: f64,
    pub patch_image: bool,
    pub patch_text: bool,
    pub channel_image: bool,
    pub channel_text: bool,
}

impl Default for MaskConfig {
    fn default() -> Self {
        MaskConfig {
            rho_v: 0.2,
            rho_t: 0.1,
            beta_v: 0.1,
            beta_t: 0.1,
            patch_image: true,
            patch_text: true,
            channel_image: true,
            channel_text: true,
        }
    }
}

impl MaskConfig {
    /// Everything off; masked and unmasked paths coincide.
    pub fn disabled() -> Self {
        MaskConfig {
            patch_image: false,
            patch_text: false,
            channel_image: false,
            channel_text: false,
            ..MaskConfig::default()
        }
    }

    pub fn any_enabled(&self) -> bool {
        self.patch_image || self.patch_text || self.channel_image || self.channel_text
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        for r in [self.rho_v, self.rho_t, self.beta_v, self.beta_t] {
            if !(0.0..1.0).contains(&r) {
                return Err(MaskError::BadRatio(r));
            }
        }
        Ok(())
    }
}

/// Realized mask draws for one (image, text) sample.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskOutcome {
    /// Sorted surviving patch indices; all of `0..M` when patch masking is off.
    pub kept_patch_indices: Vec<usize>,
    /// Token positions replaced by the MASK token.
    pub masked_token_positions: BTreeSet<usize>,
    /// Channel masks per surviving patch row (empty when channel masking is
    /// off for the image side). 1 keeps the channel, 0 takes the prototype.
    pub image_channel_masks: Vec<Vec<u8>>,
    /// Channel masks per content-token position on the text side.
    pub text_channel_masks: Vec<(usize, Vec<u8>)>,
    pub draw_seed: u64,
}

impl MaskOutcome {
    /// Outcome that leaves a sample untouched.
    pub fn identity(patch_count: usize) -> Self {
        MaskOutcome {
            kept_patch_indices: (0..patch_count).collect(),
            masked_token_positions: BTreeSet::new(),
            image_channel_masks: Vec::new(),
            text_channel_masks: Vec::new(),
            draw_seed: 0,
        }
    }

    pub fn is_identity(&self, patch_count: usize) -> bool {
        self.kept_patch_indices.len() == patch_count
            && self.masked_token_positions.is_empty()
            && self.image_channel_masks.is_empty()
            && self.text_channel_masks.is_empty()
    }
}

/// Uniform subset of `floor(M * (1 - rho))` patch indices, sorted.
pub fn draw_patch_mask(patch_count: usize, rho: f64, seed: u64) -> Result<Vec<usize>, MaskError> {
    if !(0.0..1.0).contains(&rho) {
        return Err(MaskError::BadRatio(rho));
    }
    let keep = (patch_count as f64 * (1.0 - rho)).floor() as usize;
    let mut rng = stream_rng(seed, "patch-mask", 0);
    let mut kept = rand::seq::index::sample(&mut rng, patch_count, keep).into_vec();
    kept.sort_unstable();
    Ok(kept)
}

/// Number of text tokens to mask: round-half-up of `content_count * rho`.
pub fn token_mask_count(content_count: usize, rho: f64) -> usize {
    (content_count as f64 * rho + 0.5).floor() as usize
}

/// Uniform subset of the given content positions, of size
/// `round(N * rho)` where `N` is the number of content tokens. Special
/// tokens never appear because they are not content positions.
pub fn draw_token_mask(
    content_positions: &[usize],
    rho: f64,
    seed: u64,
) -> Result<BTreeSet<usize>, MaskError> {
    if !(0.0..1.0).contains(&rho) {
        return Err(MaskError::BadRatio(rho));
    }
    let count = token_mask_count(content_positions.len(), rho).min(content_positions.len());
    let mut rng = stream_rng(seed, "token-mask", 0);
    let picks = rand::seq::index::sample(&mut rng, content_positions.len(), count);
    Ok(picks.iter().map(|i| content_positions[i]).collect())
}

/// Per-channel Bernoulli draw: 0 with probability `beta`, 1 otherwise.
pub fn draw_channel_mask(width: usize, beta: f64, seed: u64) -> Result<Vec<u8>, MaskError> {
    if !(0.0..1.0).contains(&beta) {
        return Err(MaskError::BadRatio(beta));
    }
    let mut rng = stream_rng(seed, "channel-mask", 0);
    Ok((0..width)
        .map(|_| if rng.gen_bool(beta) { 0 } else { 1 })
        .collect())
}

/// `row ⊙ b + prototype ⊙ (1 - b)` for a given binary mask.
pub fn apply_channel_mask_with(
    row: &[f64],
    prototype: &[f64],
    mask: &[u8],
) -> Result<Vec<f64>, MaskError> {
    if row.len() != prototype.len() || row.len() != mask.len() {
        return Err(MaskError::WidthMismatch(row.len(), prototype.len()));
    }
    Ok(row
        .iter()
        .zip(prototype)
        .zip(mask)
        .map(|((&r, &p), &b)| if b == 1 { r } else { p })
        .collect())
}

/// Draws a fresh channel mask and applies it.
pub fn apply_channel_mask(
    row: &[f64],
    prototype: &[f64],
    beta: f64,
    seed: u64,
) -> Result<Vec<f64>, MaskError> {
    if row.len() != prototype.len() {
        return Err(MaskError::WidthMismatch(row.len(), prototype.len()));
    }
    let mask = draw_channel_mask(row.len(), beta, seed)?;
    apply_channel_mask_with(row, prototype, &mask)
}

/// Draws independent mask outcomes for every sample of a training batch.
/// Patch-level draws happen first; image channel masks cover exactly the
/// surviving rows, text channel masks cover every content-token position.
pub fn mask_batch(
    config: &MaskConfig,
    schema: &AttributeSchema,
    captions: &[&Caption],
    patch_count: usize,
    width: usize,
    seed: u64,
) -> Result<Vec<MaskOutcome>, MaskError> {
    config.validate()?;
    let mut out = Vec::with_capacity(captions.len());
    for (i, caption) in captions.iter().enumerate() {
        let sample_seed = derive_seed(seed, "mask-sample", i as u64);
        let kept = if config.patch_image {
            draw_patch_mask(patch_count, config.rho_v, derive_seed(sample_seed, "patch", 0))?
        } else {
            (0..patch_count).collect()
        };
        let masked_tokens = if config.patch_text {
            let content = caption.content_positions(schema);
            draw_token_mask(&content, config.rho_t, derive_seed(sample_seed, "token", 0))?
        } else {
            BTreeSet::new()
        };
        let image_channel_masks = if config.channel_image {
            kept.iter()
                .enumerate()
                .map(|(k, _)| {
                    draw_channel_mask(width, config.beta_v, derive_seed(sample_seed, "chan-v", k as u64))
                })
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        let text_channel_masks = if config.channel_text {
            // MASK-substituted rows stay maskable like any content row
            caption
                .content_positions(schema)
                .iter()
                .enumerate()
                .map(|(k, &pos)| {
                    draw_channel_mask(width, config.beta_t, derive_seed(sample_seed, "chan-t", k as u64))
                        .map(|m| (pos, m))
                })
                .collect::<Result<Vec<_>, _>>()?
        } else {
            Vec::new()
        };
        out.push(MaskOutcome {
            kept_patch_indices: kept,
            masked_token_positions: masked_tokens,
            image_channel_masks,
            text_channel_masks,
            draw_seed: sample_seed,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Instrumentation: masked-training / unmasked-inference contract.
// ---------------------------------------------------------------------------

static TRAIN_MASK_APPLICATIONS: AtomicU64 = AtomicU64::new(0);
static EVAL_MASK_APPLICATIONS: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static EVAL_DEPTH: Cell<u32> = const { Cell::new(0) };
}

/// Marks the enclosing scope as an inference path. Mask applications inside
/// it are counted separately so the unmasked-inference contract can be
/// asserted.
pub struct EvalModeGuard;

impl EvalModeGuard {
    pub fn enter() -> Self {
        EVAL_DEPTH.with(|d| d.set(d.get() + 1));
        EvalModeGuard
    }
}

impl Drop for EvalModeGuard {
    fn drop(&mut self) {
        EVAL_DEPTH.with(|d| d.set(d.get() - 1));
    }
}

pub fn in_eval_mode() -> bool {
    EVAL_DEPTH.with(|d| d.get() > 0)
}

/// Called by the encoder whenever a non-identity mask outcome is applied.
pub fn record_mask_application() {
    if in_eval_mode() {
        EVAL_MASK_APPLICATIONS.fetch_add(1, Ordering::Relaxed);
    } else {
        TRAIN_MASK_APPLICATIONS.fetch_add(1, Ordering::Relaxed);
    }
}

/// (train, eval) mask application counters since process start.
pub fn mask_counters() -> (u64, u64) {
    (
        TRAIN_MASK_APPLICATIONS.load(Ordering::Relaxed),
        EVAL_MASK_APPLICATIONS.load(Ordering::Relaxed),
    )
}
