//! Noise-guided progressive training: noise measurers and schedulers.
//!
//! Every training pair gets a noise score in [0, 1]; human-annotated pairs
//! are fixed at zero. Pairs are sorted ascending by score and a scheduler
//! admits a growing prefix per epoch, starting at a fraction λ0 of the data
//! and reaching everything at epoch T_grow.

use crate::corpus::{AttributeSchema, PairedSample, Provenance};
use crate::encoder::{self, EncoderParams};
use crate::rng::stream_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CurriculumError {
    #[error("lambda0 must be in (0, 1], got {0}")]
    BadLambda0(f64),
    #[error("t_grow must be >= 1, got {0}")]
    BadTGrow(usize),
    #[error("bucket count {0} exceeds sample count {1}")]
    TooManyBuckets(usize, usize),
    #[error("baby-step plan admits all data only after epoch {0}, but the run has {1} epochs")]
    PlanTooLong(usize, usize),
    #[error("duplicate sample id {0} in scores")]
    DuplicateId(usize),
    #[error("no scores given")]
    Empty,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("score table parse error: {0}")]
    Parse(String),
}

/// Noise measurer variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Measurer {
    /// 1 − ψ(I, T) where ψ is the finetuned scorer's match probability.
    BlipscoreAnalog,
    /// 1 − ψ with ψ the cosine similarity of an untrained encoder, standing
    /// in for a generic pretrained scorer.
    ClipscoreAnalog,
    /// Content-token count normalized by the corpus maximum.
    SentenceLength,
    /// Uniform noise; the no-information baseline.
    Random,
}

impl Measurer {
    pub fn parse(s: &str) -> Option<Measurer> {
        match s {
            "blipscore_analog" => Some(Measurer::BlipscoreAnalog),
            "clipscore_analog" => Some(Measurer::ClipscoreAnalog),
            "sentence_length" => Some(Measurer::SentenceLength),
            "random" => Some(Measurer::Random),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Measurer::BlipscoreAnalog => "blipscore_analog",
            Measurer::ClipscoreAnalog => "clipscore_analog",
            Measurer::SentenceLength => "sentence_length",
            Measurer::Random => "random",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseScore {
    pub sample_id: usize,
    pub score: f64,
    pub measurer: Measurer,
}

fn clamp_unit(psi: f64, what: &str) -> f64 {
    if !(0.0..=1.0).contains(&psi) {
        log::warn!("{what} = {psi} outside [0,1]; clamping");
        psi.clamp(0.0, 1.0)
    } else {
        psi
    }
}

/// Scores one pair. `scorer` is the warm-up retrieval model for the
/// match-probability measurer and an untrained-initialization encoder for
/// the cosine analog; `max_content` normalizes sentence length. Human
/// pairs score exactly zero regardless of the measurer.
pub fn measure_noise(
    pair: &PairedSample,
    scorer: &EncoderParams,
    measurer: Measurer,
    schema: &AttributeSchema,
    max_content: usize,
    seed: u64,
) -> NoiseScore {
    let score = if pair.caption.provenance == Provenance::Human {
        0.0
    } else {
        match measurer {
            Measurer::BlipscoreAnalog => {
                let psi = encoder::itm_match_probability(scorer, &pair.caption, &pair.image);
                1.0 - clamp_unit(psi, "match probability")
            }
            Measurer::ClipscoreAnalog => {
                let f_t = encoder::text_cls_feature(scorer, &pair.caption);
                let f_v = encoder::image_cls_feature(scorer, &pair.image);
                let psi = encoder::cosine(&f_t, &f_v);
                1.0 - clamp_unit(psi, "cosine similarity")
            }
            Measurer::SentenceLength => {
                let n = pair.caption.content_token_count(schema);
                clamp_unit(n as f64 / max_content.max(1) as f64, "length ratio")
            }
            Measurer::Random => {
                let mut rng = stream_rng(seed, "random-measurer", pair.sample_id as u64);
                rng.gen_range(0.0..1.0)
            }
        }
    };
    NoiseScore {
        sample_id: pair.sample_id,
        score,
        measurer,
    }
}

/// Scores every pair of the training union.
pub fn score_pairs(
    pairs: &[&PairedSample],
    scorer: &EncoderParams,
    measurer: Measurer,
    schema: &AttributeSchema,
    seed: u64,
) -> Vec<NoiseScore> {
    let max_content = pairs
        .iter()
        .map(|p| p.caption.content_token_count(schema))
        .max()
        .unwrap_or(1);
    pairs
        .iter()
        .map(|p| measure_noise(p, scorer, measurer, schema, max_content, seed))
        .collect()
}

// ---------------------------------------------------------------------------
// Schedulers
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    Linear,
    BabyStep,
    Root2,
}

impl Scheduler {
    pub fn parse(s: &str) -> Option<Scheduler> {
        match s {
            "linear" => Some(Scheduler::Linear),
            "baby_step" => Some(Scheduler::BabyStep),
            "root2" => Some(Scheduler::Root2),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Scheduler::Linear => "linear",
            Scheduler::BabyStep => "baby_step",
            Scheduler::Root2 => "root2",
        }
    }
}

/// min(1, λ0 + (1 − λ0) · t / T_grow)
pub fn lambda_linear(t: usize, lambda0: f64, t_grow: usize) -> f64 {
    (lambda0 + (1.0 - lambda0) / t_grow as f64 * t as f64).min(1.0)
}

/// min(1, sqrt(λ0² + (1 − λ0²) · t / T_grow)); the standard root-2
/// competence schedule.
pub fn lambda_root2(t: usize, lambda0: f64, t_grow: usize) -> f64 {
    (lambda0 * lambda0 + (1.0 - lambda0 * lambda0) * t as f64 / t_grow as f64)
        .sqrt()
        .min(1.0)
}

/// Cumulative admitted counts for the baby-step scheduler: after every
/// `epochs_per_bucket` epochs one more equal-size bucket is admitted, with
/// the division remainder in the last bucket.
pub fn baby_step_counts(
    total: usize,
    buckets: usize,
    epochs_per_bucket: usize,
    epochs: usize,
) -> Result<Vec<usize>, CurriculumError> {
    if buckets == 0 || buckets > total {
        return Err(CurriculumError::TooManyBuckets(buckets, total));
    }
    let base = total / buckets;
    let bucket_size = |k: usize| if k == buckets - 1 { base + total % buckets } else { base };
    let mut counts = Vec::with_capacity(epochs);
    for t in 0..epochs {
        let admitted_buckets = (t / epochs_per_bucket.max(1) + 1).min(buckets);
        counts.push((0..admitted_buckets).map(bucket_size).sum());
    }
    if counts.last() != Some(&total) {
        let needed = (buckets - 1) * epochs_per_bucket.max(1);
        return Err(CurriculumError::PlanTooLong(needed, epochs));
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanParams {
    pub scheduler: Scheduler,
    pub lambda0: f64,
    pub t_grow: usize,
    pub epochs: usize,
    pub buckets: usize,
    pub epochs_per_bucket: usize,
}

impl Default for PlanParams {
    fn default() -> Self {
        PlanParams {
            scheduler: Scheduler::Linear,
            lambda0: 0.3,
            t_grow: 15,
            epochs: 20,
            buckets: 4,
            epochs_per_bucket: 5,
        }
    }
}

/// Noise-sorted sample order plus per-epoch admitted-prefix sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct CurriculumPlan {
    pub sorted_ids: Vec<usize>,
    pub scheduler: Scheduler,
    pub lambda0: f64,
    pub t_grow: usize,
    pub epoch_counts: Vec<usize>,
}

impl CurriculumPlan {
    /// Sample ids admitted at epoch `t` (clamped to the last planned epoch).
    pub fn admitted(&self, epoch: usize) -> &[usize] {
        let idx = epoch.min(self.epoch_counts.len().saturating_sub(1));
        &self.sorted_ids[..self.epoch_counts[idx]]
    }
}

/// Sorts samples ascending by (score, sample_id) and precomputes admitted
/// counts per epoch. Continuous schedulers admit
/// `max(ceil(λ(t)·total), previous)`.
pub fn build_plan(
    scores: &[NoiseScore],
    params: &PlanParams,
) -> Result<CurriculumPlan, CurriculumError> {
    if scores.is_empty() {
        return Err(CurriculumError::Empty);
    }
    if !(0.0 < params.lambda0 && params.lambda0 <= 1.0) {
        return Err(CurriculumError::BadLambda0(params.lambda0));
    }
    if params.t_grow == 0 {
        return Err(CurriculumError::BadTGrow(params.t_grow));
    }
    let mut seen = HashSet::new();
    for s in scores {
        if !seen.insert(s.sample_id) {
            return Err(CurriculumError::DuplicateId(s.sample_id));
        }
    }

    let mut order: Vec<(f64, usize)> = scores.iter().map(|s| (s.score, s.sample_id)).collect();
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores are finite").then(a.1.cmp(&b.1)));
    let sorted_ids: Vec<usize> = order.into_iter().map(|(_, id)| id).collect();

    let total = sorted_ids.len();
    let epochs = params.epochs.max(1);
    let epoch_counts = match params.scheduler {
        Scheduler::BabyStep => {
            baby_step_counts(total, params.buckets, params.epochs_per_bucket, epochs)?
        }
        continuous => {
            let lambda = |t: usize| match continuous {
                Scheduler::Linear => lambda_linear(t, params.lambda0, params.t_grow),
                Scheduler::Root2 => lambda_root2(t, params.lambda0, params.t_grow),
                Scheduler::BabyStep => unreachable!(),
            };
            let mut counts = Vec::with_capacity(epochs);
            let mut prev = 0usize;
            for t in 0..epochs {
                let admitted = ((lambda(t) * total as f64).ceil() as usize).clamp(1, total);
                prev = admitted.max(prev);
                counts.push(prev);
            }
            if counts.last() != Some(&total) {
                return Err(CurriculumError::PlanTooLong(params.t_grow, epochs));
            }
            counts
        }
    };

    Ok(CurriculumPlan {
        sorted_ids,
        scheduler: params.scheduler,
        lambda0: params.lambda0,
        t_grow: params.t_grow,
        epoch_counts,
    })
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |vals: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..vals.len()).collect();
        idx.sort_by(|&a, &b| vals[a].partial_cmp(&vals[b]).expect("finite"));
        let mut ranks = vec![0.0; vals.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && vals[idx[j + 1]] == vals[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for k in 0..xs.len() {
        let dx = rx[k] - mx;
        let dy = ry[k] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        0.0
    } else {
        cov / (vx * vy).sqrt()
    }
}

/// Persists scores as `sample_id,measurer,score` CSV for audit.
pub fn write_scores(path: &Path, scores: &[NoiseScore]) -> Result<(), CurriculumError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "sample_id,measurer,score")?;
    for s in scores {
        writeln!(w, "{},{},{}", s.sample_id, s.measurer.name(), s.score)?;
    }
    Ok(())
}

pub fn read_scores(path: &Path) -> Result<Vec<NoiseScore>, CurriculumError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 3 {
            return Err(CurriculumError::Parse(format!("line {}: {line}", i + 1)));
        }
        out.push(NoiseScore {
            sample_id: parts[0]
                .parse()
                .map_err(|e| CurriculumError::Parse(format!("line {}: {e}", i + 1)))?,
            measurer: Measurer::parse(parts[1])
                .ok_or_else(|| CurriculumError::Parse(format!("unknown measurer {}", parts[1])))?,
            score: parts[2]
                .parse()
                .map_err(|e| CurriculumError::Parse(format!("line {}: {e}", i + 1)))?,
        });
    }
    Ok(out)
}
