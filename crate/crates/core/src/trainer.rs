//! Retrieval-stage training loop: epoch/batch iteration over the admitted
//! curriculum prefix, per-batch masking, adaptive-moment updates with
//! gradient clipping, checkpointing, and the warm-up scoring pass that
//! feeds the curriculum.

use crate::checkpoint::CheckpointError;
use crate::corpus::{AttributeSchema, PairedSample, SyntheticImage, TestQuery};
use crate::curriculum::{score_pairs, CurriculumPlan, Measurer, NoiseScore};
use crate::encoder::{EncoderConfig, EncoderParams, TAU_MAX, TAU_MIN};
use crate::evalkit;
use crate::masking::{mask_batch, MaskConfig, MaskOutcome};
use crate::objectives::{total_loss_node, ObjectiveError};
use crate::optim::{clip_gradients, Adam, ParamSet};
use crate::rng::{derive_seed, stream_rng};
use crate::tape::{Binder, Matrix, Tape};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainerError {
    #[error("no training pairs")]
    EmptyTrainingSet,
    #[error("plan references sample id {0} which is not in the training set")]
    UnknownSampleId(usize),
    #[error("duplicate sample id {0} across labeled and pseudo sets")]
    DuplicateSampleId(usize),
    #[error("training diverged at epoch {epoch}: loss {loss}; last-good checkpoint retained")]
    Diverged { epoch: usize, loss: f64 },
    #[error("objective error: {0}")]
    Objective(#[from] ObjectiveError),
    #[error("masking error: {0}")]
    Mask(#[from] crate::masking::MaskError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] CheckpointError),
    #[error("eval error: {0}")]
    Eval(#[from] evalkit::EvalError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Step size for the width-32 desk-scale stack. The reference setup
    /// for a pretrained 12-layer backbone uses 1e-5; that value underfits
    /// at this scale.
    pub learning_rate: f64,
    pub seed: u64,
    pub mask: MaskConfig,
    pub hard_negatives: bool,
    pub tau_init: f64,
    pub grad_clip: f64,
    /// Restrict masking to pseudo-labeled pairs.
    pub mask_pseudo_only: bool,
    /// Gaussian patch jitter applied as training-time augmentation
    /// (0 disables it).
    pub augment_jitter: f64,
    pub warmup_epochs: usize,
    pub encoder: EncoderConfig,
    /// Number of probe queries evaluated between epochs (0 disables).
    pub probe_queries: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-4,
            seed: 0,
            mask: MaskConfig::default(),
            hard_negatives: true,
            tau_init: crate::encoder::TAU_INIT,
            grad_clip: 5.0,
            mask_pseudo_only: false,
            augment_jitter: 0.0,
            warmup_epochs: 5,
            encoder: EncoderConfig::default(),
            probe_queries: 32,
            checkpoint_every: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss_itc: f64,
    pub loss_itm: f64,
    pub admitted: usize,
    pub grad_norm_mean: f64,
    pub grad_norm_max: f64,
    pub probe_r1: Option<f64>,
}

pub type TrainHistory = Vec<EpochStats>;

#[derive(Debug, Clone)]
pub struct Probe<'a> {
    pub queries: &'a [TestQuery],
    pub gallery: &'a [SyntheticImage],
}

pub struct TrainOutput {
    pub params: EncoderParams,
    pub history: TrainHistory,
}

fn build_index(
    labeled: &[PairedSample],
    pseudo: &[PairedSample],
) -> Result<HashMap<usize, PairedSample>, TrainerError> {
    let mut map = HashMap::with_capacity(labeled.len() + pseudo.len());
    for pair in labeled.iter().chain(pseudo) {
        if map.insert(pair.sample_id, pair.clone()).is_some() {
            return Err(TrainerError::DuplicateSampleId(pair.sample_id));
        }
    }
    Ok(map)
}

fn jitter_image(image: &SyntheticImage, sigma: f64, seed: u64) -> SyntheticImage {
    let mut rng = stream_rng(seed, "jitter-aug", 0);
    let mut patches = image.patches.clone();
    patches.mapv_inplace(|x| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen();
        x + sigma * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    });
    SyntheticImage {
        patches,
        ..image.clone()
    }
}

/// Trains the retrieval encoder from a fresh initialization. With a plan,
/// each epoch trains on the admitted low-noise prefix; otherwise on the
/// full set. Masking applies per batch in training only.
pub fn train(
    config: &TrainConfig,
    schema: &AttributeSchema,
    labeled: &[PairedSample],
    pseudo: &[PairedSample],
    plan: Option<&CurriculumPlan>,
    probe: Option<Probe<'_>>,
    out_dir: Option<&Path>,
) -> Result<TrainOutput, TrainerError> {
    if labeled.is_empty() && pseudo.is_empty() {
        return Err(TrainerError::EmptyTrainingSet);
    }
    config.mask.validate()?;
    let index = build_index(labeled, pseudo)?;
    let all_ids: Vec<usize> = labeled.iter().chain(pseudo).map(|p| p.sample_id).collect();
    if let Some(plan) = plan {
        for id in &plan.sorted_ids {
            if !index.contains_key(id) {
                return Err(TrainerError::UnknownSampleId(*id));
            }
        }
    }

    train_from(
        EncoderParams::init(schema, &config.encoder, derive_seed(config.seed, "train-init", 0)),
        config,
        plan,
        &index,
        &all_ids,
        probe,
        out_dir,
    )
}

/// The inner loop, starting from the given parameters.
pub fn train_from(
    init: EncoderParams,
    config: &TrainConfig,
    plan: Option<&CurriculumPlan>,
    index: &HashMap<usize, PairedSample>,
    all_ids: &[usize],
    probe: Option<Probe<'_>>,
    out_dir: Option<&Path>,
) -> Result<TrainOutput, TrainerError> {
    let mut params = init;
    params.tau[[0, 0]] = config.tau_init;
    let mut adam = Adam::new(config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs);
    let mut last_good = params.clone();

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }

    for epoch in 0..config.epochs {
        let mut admitted: Vec<usize> = match plan {
            Some(plan) => plan.admitted(epoch).to_vec(),
            None => all_ids.to_vec(),
        };
        let mut shuffle_rng = stream_rng(config.seed, "shuffle", epoch as u64);
        admitted.shuffle(&mut shuffle_rng);

        let mut itc_sum = 0.0;
        let mut itm_sum = 0.0;
        let mut itm_batches = 0usize;
        let mut batches = 0usize;
        let mut norm_sum = 0.0;
        let mut norm_max = 0.0f64;

        for (step, chunk) in admitted.chunks(config.batch_size.max(2)).enumerate() {
            if chunk.len() < 2 {
                continue; // contrastive training needs at least two pairs
            }
            let step_tag = epoch as u64 * 1_000_000 + step as u64;
            let mut pairs: Vec<PairedSample> =
                chunk.iter().map(|id| index[id].clone()).collect();
            if config.augment_jitter > 0.0 {
                for (k, pair) in pairs.iter_mut().enumerate() {
                    pair.image = jitter_image(
                        &pair.image,
                        config.augment_jitter,
                        derive_seed(config.seed, "augment", step_tag * 1000 + k as u64),
                    );
                }
            }

            let masks: Option<Vec<MaskOutcome>> = if config.mask.any_enabled() {
                let captions: Vec<&crate::corpus::Caption> =
                    pairs.iter().map(|p| &p.caption).collect();
                let mut outcomes = mask_batch(
                    &config.mask,
                    &params.schema,
                    &captions,
                    params.schema.patch_count,
                    params.config.width,
                    derive_seed(config.seed, "mask", step_tag),
                )?;
                if config.mask_pseudo_only {
                    for (outcome, pair) in outcomes.iter_mut().zip(&pairs) {
                        if pair.caption.provenance == crate::corpus::Provenance::Human {
                            *outcome = MaskOutcome::identity(params.schema.patch_count);
                        }
                    }
                }
                Some(outcomes)
            } else {
                None
            };

            let mut tape = Tape::new();
            let mut binder = Binder::new();
            let loss = total_loss_node(
                &mut tape,
                &mut binder,
                &params,
                &pairs,
                masks.as_deref(),
                config.hard_negatives,
                derive_seed(config.seed, "itm", step_tag),
            )?;
            let total = loss.total_value();
            if !total.is_finite() {
                if let Some(dir) = out_dir {
                    last_good.to_bundle().save(&dir.join("rescue.ckpt"))?;
                }
                return Err(TrainerError::Diverged { epoch, loss: total });
            }
            itc_sum += loss.itc_value;
            if let Some(v) = loss.itm_value {
                itm_sum += v;
                itm_batches += 1;
            }
            batches += 1;

            let grads = tape.backward(loss.node);
            let mut named: BTreeMap<String, Matrix> = BTreeMap::new();
            params.for_each(&mut |name, m| {
                if let Some(g) = binder.grad_of(&grads, m) {
                    named.insert(name.to_string(), g.clone());
                }
            });
            let norm = clip_gradients(&mut named, config.grad_clip);
            norm_sum += norm;
            norm_max = norm_max.max(norm);
            adam.step(&mut params, &named);
            params.tau[[0, 0]] = params.tau[[0, 0]].clamp(TAU_MIN, TAU_MAX);
        }

        let probe_r1 = match &probe {
            Some(p) if config.probe_queries > 0 => {
                let queries = &p.queries[..config.probe_queries.min(p.queries.len())];
                Some(evalkit::evaluate(&params, queries, p.gallery, None)?.rank1)
            }
            _ => None,
        };

        history.push(EpochStats {
            epoch,
            loss_itc: itc_sum / batches.max(1) as f64,
            loss_itm: itm_sum / itm_batches.max(1) as f64,
            admitted: admitted.len(),
            grad_norm_mean: norm_sum / batches.max(1) as f64,
            grad_norm_max: norm_max,
            probe_r1,
        });
        last_good = params.clone();

        if let Some(dir) = out_dir {
            let every = config.checkpoint_every.max(1);
            if (epoch + 1) % every == 0 {
                params.to_bundle().save(&dir.join(format!("epoch-{:03}.ckpt", epoch + 1)))?;
            }
        }
    }

    // the per-batch loss check cannot see a blow-up caused by the very
    // last update, so verify the parameters directly
    let mut finite = true;
    params.for_each(&mut |_, m| finite &= m.iter().all(|x| x.is_finite()));
    if !finite {
        if let Some(dir) = out_dir {
            last_good.to_bundle().save(&dir.join("rescue.ckpt"))?;
        }
        return Err(TrainerError::Diverged {
            epoch: config.epochs.saturating_sub(1),
            loss: f64::NAN,
        });
    }

    if let Some(dir) = out_dir {
        params.to_bundle().save(&dir.join("final.ckpt"))?;
        write_history(&dir.join("history.csv"), &history)?;
    }
    Ok(TrainOutput { params, history })
}

/// Trains the warm-up scorer (no curriculum, no masking) and scores every
/// pair once. For the cosine-analog measurer the scorer is used at its
/// initialization, standing in for a generic pretrained model.
pub fn warmup_and_score(
    config: &TrainConfig,
    schema: &AttributeSchema,
    labeled: &[PairedSample],
    pseudo: &[PairedSample],
    measurer: Measurer,
    score_path: Option<&Path>,
) -> Result<(Vec<NoiseScore>, EncoderParams), TrainerError> {
    let index = build_index(labeled, pseudo)?;
    let all_ids: Vec<usize> = labeled.iter().chain(pseudo).map(|p| p.sample_id).collect();
    let init = EncoderParams::init(schema, &config.encoder, derive_seed(config.seed, "warmup-init", 0));
    let init_snapshot = init.clone();

    let warm_config = TrainConfig {
        epochs: config.warmup_epochs,
        mask: MaskConfig::disabled(),
        probe_queries: 0,
        seed: derive_seed(config.seed, "warmup", 0),
        ..config.clone()
    };
    let scorer = match measurer {
        // only the match-probability measurer needs the finetuned scorer
        Measurer::BlipscoreAnalog => {
            train_from(init, &warm_config, None, &index, &all_ids, None, None)?.params
        }
        _ => init_snapshot,
    };

    let pairs: Vec<&PairedSample> = labeled.iter().chain(pseudo).collect();
    let scores = score_pairs(
        &pairs,
        &scorer,
        measurer,
        &scorer.schema,
        derive_seed(config.seed, "measure", 0),
    );
    if let Some(path) = score_path {
        crate::curriculum::write_scores(path, &scores)
            .map_err(|e| TrainerError::Io(std::io::Error::other(e.to_string())))?;
    }
    Ok((scores, scorer))
}

pub fn write_history(path: &Path, history: &[EpochStats]) -> Result<(), TrainerError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        w,
        "epoch,loss_itc,loss_itm,admitted,grad_norm_mean,grad_norm_max,probe_r1"
    )?;
    for s in history {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.epoch,
            s.loss_itc,
            s.loss_itm,
            s.admitted,
            s.grad_norm_mean,
            s.grad_norm_max,
            s.probe_r1.map_or(String::new(), |v| v.to_string()),
        )?;
    }
    Ok(())
}
