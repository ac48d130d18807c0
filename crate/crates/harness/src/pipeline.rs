//! End-to-end pipeline: corpus -> caption finetune -> pseudo-text
//! generation -> warm-up scoring -> retrieval training -> evaluation.
//!
//! Stages are content-addressed: each artifact lives under the root keyed
//! by a hash of exactly the config fields it depends on, so ladder and
//! sweep cells that share upstream stages reuse them. A completed run
//! writes `manifest.json`; rerunning the same config hash loads it back
//! unless forced.

use crate::config::{Config, CurriculumMode};
use persearch_core::captioner::{self, CaptionerParams};
use persearch_core::checkpoint::Bundle;
use persearch_core::corpus::{
    generate_corpus, read_corpus, write_corpus, Caption, CorpusSplit, PairedSample, Provenance,
};
use persearch_core::curriculum::{build_plan, read_scores, write_scores, NoiseScore};
use persearch_core::encoder::EncoderParams;
use persearch_core::evalkit::{self, EvalReport};
use persearch_core::rng::derive_seed;
use persearch_core::trainer::{self, Probe};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("config error: {0}")]
    Config(#[from] crate::config::ConfigError),
    #[error("corpus stage failed: {0}")]
    Corpus(#[from] persearch_core::corpus::CorpusError),
    #[error("caption stage failed: {0}")]
    Captioner(#[from] persearch_core::captioner::CaptionerError),
    #[error("scoring stage failed: {0}")]
    Curriculum(#[from] persearch_core::curriculum::CurriculumError),
    #[error("training stage failed: {0}")]
    Trainer(#[from] persearch_core::trainer::TrainerError),
    #[error("evaluation stage failed: {0}")]
    Eval(#[from] persearch_core::evalkit::EvalError),
    #[error("encoder error: {0}")]
    Encoder(#[from] persearch_core::encoder::EncoderError),
    #[error("checkpoint error: {0}")]
    Checkpoint(#[from] persearch_core::checkpoint::CheckpointError),
    #[error("artifact error: {0}")]
    Artifact(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Root directory holding all cached artifacts and run manifests.
#[derive(Debug, Clone)]
pub struct ArtifactRoot {
    pub path: PathBuf,
}

pub const ROOT_ENV_VAR: &str = "PERSEARCH_ROOT";

impl ArtifactRoot {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        ArtifactRoot { path: path.into() }
    }

    /// Resolution order: explicit flag, then the environment variable,
    /// then `./artifacts`.
    pub fn resolve(flag: Option<&Path>) -> Self {
        if let Some(p) = flag {
            return ArtifactRoot::new(p);
        }
        if let Ok(env) = std::env::var(ROOT_ENV_VAR) {
            if !env.is_empty() {
                return ArtifactRoot::new(env);
            }
        }
        ArtifactRoot::new("artifacts")
    }

    pub fn corpus_dir(&self, config: &Config) -> PathBuf {
        self.path.join("corpus").join(config.corpus_key())
    }

    pub fn captioner_ckpt(&self, config: &Config) -> PathBuf {
        self.path
            .join("captioner")
            .join(format!("{}.ckpt", config.captioner_key()))
    }

    pub fn pseudo_file(&self, config: &Config) -> PathBuf {
        self.path
            .join("pseudo")
            .join(format!("{}.jsonl", config.pseudo_key()))
    }

    pub fn scores_file(&self, config: &Config) -> PathBuf {
        self.path
            .join("scores")
            .join(format!("{}.csv", config.scores_key()))
    }

    pub fn run_dir(&self, config: &Config) -> PathBuf {
        self.path.join("runs").join(config.hash())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Metrics {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    pub map: f64,
}

impl From<&EvalReport> for Metrics {
    fn from(r: &EvalReport) -> Self {
        Metrics {
            rank1: r.rank1,
            rank5: r.rank5,
            rank10: r.rank10,
            map: r.map,
        }
    }
}

/// Record of one pipeline run: artifact paths, metrics and wall-clock per
/// stage. Written before any dependent consumer reads the run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub config_hash: String,
    pub seed: u64,
    pub config_text: String,
    pub artifacts: BTreeMap<String, String>,
    pub metrics: Option<Metrics>,
    pub stage_seconds: BTreeMap<String, f64>,
    pub error: Option<String>,
}

impl ExperimentManifest {
    fn new(config: &Config) -> Self {
        ExperimentManifest {
            config_hash: config.hash(),
            seed: config.seed,
            config_text: config.canonical(),
            artifacts: BTreeMap::new(),
            metrics: None,
            stage_seconds: BTreeMap::new(),
            error: None,
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| PipelineError::Artifact(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| PipelineError::Artifact(e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Stage functions (each loads its artifact if the cache already holds it)
// ---------------------------------------------------------------------------

pub fn ensure_corpus(root: &ArtifactRoot, config: &Config) -> Result<CorpusSplit, PipelineError> {
    let dir = root.corpus_dir(config);
    if dir.join("manifest.jsonl").exists() {
        return Ok(read_corpus(&dir)?);
    }
    let corpus = generate_corpus(&config.corpus_spec(), config.seed)?;
    write_corpus(&dir, &corpus)?;
    Ok(corpus)
}

pub fn ensure_captioner(
    root: &ArtifactRoot,
    config: &Config,
    corpus: &CorpusSplit,
) -> Result<CaptionerParams, PipelineError> {
    let path = root.captioner_ckpt(config);
    let schema = config.schema();
    if path.exists() {
        return Ok(CaptionerParams::from_bundle(&schema, &Bundle::load(&path)?)?);
    }
    let init = CaptionerParams::init(&schema, derive_seed(config.seed, "captioner-model", 0));
    let (trained, history) = captioner::finetune(&init, &corpus.labeled, &config.finetune_config())?;
    log::info!(
        "caption finetune: {} pairs, final mean token loss {:.4}",
        corpus.labeled.len(),
        history.last().copied().unwrap_or(f64::NAN)
    );
    std::fs::create_dir_all(path.parent().expect("has parent"))?;
    trained.to_bundle().save(&path)?;
    Ok(trained)
}

#[derive(Serialize, Deserialize)]
struct PseudoLine {
    sample_id: usize,
    unlabeled_index: usize,
    tokens: Vec<usize>,
    oracle_corruption_rate: f64,
}

fn write_pseudo_set(path: &Path, corpus: &CorpusSplit, set: &[PairedSample]) -> Result<(), PipelineError> {
    std::fs::create_dir_all(path.parent().expect("has parent"))?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    // pseudo pairs are generated in unlabeled order, texts_per_image each
    let per_image = if corpus.unlabeled.is_empty() {
        1
    } else {
        set.len() / corpus.unlabeled.len()
    };
    for (k, pair) in set.iter().enumerate() {
        let line = PseudoLine {
            sample_id: pair.sample_id,
            unlabeled_index: k / per_image.max(1),
            tokens: pair.caption.tokens.clone(),
            oracle_corruption_rate: pair.caption.oracle_corruption_rate,
        };
        writeln!(
            w,
            "{}",
            serde_json::to_string(&line).map_err(|e| PipelineError::Artifact(e.to_string()))?
        )?;
    }
    Ok(())
}

fn read_pseudo_set(path: &Path, corpus: &CorpusSplit) -> Result<Vec<PairedSample>, PipelineError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PseudoLine =
            serde_json::from_str(&line).map_err(|e| PipelineError::Artifact(e.to_string()))?;
        let image = corpus.unlabeled.get(parsed.unlabeled_index).ok_or_else(|| {
            PipelineError::Artifact(format!(
                "pseudo set references unlabeled image {} of {}",
                parsed.unlabeled_index,
                corpus.unlabeled.len()
            ))
        })?;
        out.push(PairedSample {
            sample_id: parsed.sample_id,
            image: image.clone(),
            caption: Caption {
                tokens: parsed.tokens,
                provenance: Provenance::Pseudo,
                oracle_corruption_rate: parsed.oracle_corruption_rate,
            },
        });
    }
    Ok(out)
}

pub fn ensure_pseudo(
    root: &ArtifactRoot,
    config: &Config,
    corpus: &CorpusSplit,
    captioner_params: &CaptionerParams,
) -> Result<Vec<PairedSample>, PipelineError> {
    let path = root.pseudo_file(config);
    if path.exists() {
        return read_pseudo_set(&path, corpus);
    }
    let set = captioner::generate_pseudo_set(
        captioner_params,
        corpus,
        config.decoder()?,
        config.caption_texts_per_image,
        derive_seed(config.seed, "pseudo-decode", 0),
    );
    write_pseudo_set(&path, corpus, &set)?;
    Ok(set)
}

pub fn ensure_scores(
    root: &ArtifactRoot,
    config: &Config,
    corpus: &CorpusSplit,
    pseudo: &[PairedSample],
) -> Result<Vec<NoiseScore>, PipelineError> {
    let path = root.scores_file(config);
    if path.exists() {
        return Ok(read_scores(&path)?);
    }
    let (scores, _) = trainer::warmup_and_score(
        &config.train_config(),
        &config.schema(),
        &corpus.labeled,
        pseudo,
        config.measurer()?,
        None,
    )?;
    std::fs::create_dir_all(path.parent().expect("has parent"))?;
    write_scores(&path, &scores)?;
    Ok(scores)
}

// ---------------------------------------------------------------------------
// Full pipeline
// ---------------------------------------------------------------------------

/// Runs every stage, reusing cached artifacts. Returns the manifest; a
/// stage failure writes a partial manifest carrying the error.
pub fn run_pipeline(
    root: &ArtifactRoot,
    config: &Config,
    force: bool,
) -> Result<ExperimentManifest, PipelineError> {
    let run_dir = root.run_dir(config);
    let manifest_path = run_dir.join("manifest.json");
    if manifest_path.exists() && !force {
        let existing = ExperimentManifest::load(&manifest_path)?;
        if existing.error.is_none() {
            log::info!("run {} cached; skipping (use force to rerun)", config.hash());
            return Ok(existing);
        }
    }
    std::fs::create_dir_all(&run_dir)?;
    let mut manifest = ExperimentManifest::new(config);

    match run_stages(root, config, &run_dir, &mut manifest) {
        Ok(()) => {
            manifest.save(&manifest_path)?;
            Ok(manifest)
        }
        Err(e) => {
            manifest.error = Some(e.to_string());
            // partial manifest: completed stages stay recorded
            manifest.save(&manifest_path)?;
            Err(e)
        }
    }
}

fn run_stages(
    root: &ArtifactRoot,
    config: &Config,
    run_dir: &Path,
    manifest: &mut ExperimentManifest,
) -> Result<(), PipelineError> {
    let record = |manifest: &mut ExperimentManifest, name: &str, path: &Path, secs: f64| {
        manifest
            .artifacts
            .insert(name.to_string(), path.display().to_string());
        manifest.stage_seconds.insert(name.to_string(), secs);
    };

    let t = Instant::now();
    let corpus = ensure_corpus(root, config)?;
    record(manifest, "corpus_dir", &root.corpus_dir(config), t.elapsed().as_secs_f64());

    let use_pseudo = config.pipeline_use_pseudo && !corpus.unlabeled.is_empty();
    let pseudo: Vec<PairedSample> = if use_pseudo {
        let t = Instant::now();
        let captioner_params = ensure_captioner(root, config, &corpus)?;
        record(
            manifest,
            "captioner_ckpt",
            &root.captioner_ckpt(config),
            t.elapsed().as_secs_f64(),
        );

        let t = Instant::now();
        let pseudo = ensure_pseudo(root, config, &corpus, &captioner_params)?;
        record(manifest, "pseudo_set", &root.pseudo_file(config), t.elapsed().as_secs_f64());
        pseudo
    } else {
        log::info!("generation stage skipped: no unlabeled images or pseudo use disabled");
        Vec::new()
    };

    let plan = match config.curriculum_mode()? {
        CurriculumMode::Off => None,
        CurriculumMode::On(scheduler) => {
            let t = Instant::now();
            let scores = ensure_scores(root, config, &corpus, &pseudo)?;
            record(manifest, "score_table", &root.scores_file(config), t.elapsed().as_secs_f64());
            Some(build_plan(&scores, &config.plan_params(scheduler))?)
        }
    };

    let t = Instant::now();
    let probe = Probe {
        queries: &corpus.test_queries,
        gallery: &corpus.test_gallery,
    };
    let ckpt_dir = run_dir.join("retrieval");
    let output = trainer::train(
        &config.train_config(),
        &config.schema(),
        &corpus.labeled,
        &pseudo,
        plan.as_ref(),
        Some(probe),
        Some(&ckpt_dir),
    )?;
    record(manifest, "retrieval_ckpt", &ckpt_dir.join("final.ckpt"), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let rerank = if config.eval_rerank_top_k == 0 {
        None
    } else {
        Some(config.eval_rerank_top_k)
    };
    let report = evalkit::evaluate(
        &output.params,
        &corpus.test_queries,
        &corpus.test_gallery,
        rerank,
    )?;
    let metrics_path = run_dir.join("metrics.csv");
    report.write_csv(&metrics_path)?;
    std::fs::write(run_dir.join("report.txt"), report.text())?;
    record(manifest, "metrics_csv", &metrics_path, t.elapsed().as_secs_f64());

    manifest.metrics = Some(Metrics::from(&report));
    Ok(())
}

/// Loads the retrieval checkpoint recorded in a manifest.
pub fn load_run_encoder(
    config: &Config,
    manifest: &ExperimentManifest,
) -> Result<EncoderParams, PipelineError> {
    let path = manifest
        .artifacts
        .get("retrieval_ckpt")
        .ok_or_else(|| PipelineError::Artifact("manifest has no retrieval checkpoint".into()))?;
    let bundle = Bundle::load(Path::new(path))?;
    Ok(EncoderParams::from_bundle(
        &config.schema(),
        &Default::default(),
        &bundle,
    )?)
}
