//! Experiment configuration: a flat key-value text document with dotted
//! keys. Unknown keys are errors so sweep typos fail loudly. The canonical
//! rendering (every key in a fixed order) is what gets hashed to identify
//! a run.

use persearch_core::captioner::{Decoder, FinetuneConfig};
use persearch_core::corpus::{AttributeSchema, CorpusSpec};
use persearch_core::curriculum::{Measurer, PlanParams, Scheduler};
use persearch_core::masking::MaskConfig;
use persearch_core::trainer::TrainConfig;
use sha2::{Digest, Sha256};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {0}: expected `key = value`, got {1:?}")]
    BadLine(usize, String),
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("key {key}: cannot parse {value:?} as {wanted}")]
    BadValue {
        key: String,
        value: String,
        wanted: &'static str,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CurriculumMode {
    Off,
    On(Scheduler),
}

impl CurriculumMode {
    pub fn name(&self) -> &'static str {
        match self {
            CurriculumMode::Off => "off",
            CurriculumMode::On(s) => s.name(),
        }
    }
}

/// Everything a pipeline run needs, with the defaults of the full method.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub seed: u64,
    // corpus
    pub corpus_identities: usize,
    pub corpus_test_identities: usize,
    pub corpus_images_per_identity: usize,
    pub corpus_captions_per_image: usize,
    pub corpus_labeled_ratio: f64,
    pub corpus_attributes: usize,
    pub corpus_values: usize,
    pub corpus_patches: usize,
    pub corpus_patch_dim: usize,
    pub corpus_connectives: usize,
    pub corpus_sigma: f64,
    // captioner
    pub caption_epochs: usize,
    pub caption_lr: f64,
    pub caption_batch_size: usize,
    pub caption_decoder: String,
    pub caption_top_p: f64,
    pub caption_texts_per_image: usize,
    // masking
    pub mask_rho_v: f64,
    pub mask_rho_t: f64,
    pub mask_beta_v: f64,
    pub mask_beta_t: f64,
    pub mask_patch_v: bool,
    pub mask_patch_t: bool,
    pub mask_channel_v: bool,
    pub mask_channel_t: bool,
    pub mask_pseudo_only: bool,
    // losses
    pub loss_tau_init: f64,
    pub loss_hard_negatives: bool,
    // curriculum
    pub curriculum_scheduler: String,
    pub curriculum_lambda0: f64,
    pub curriculum_t_grow: usize,
    pub curriculum_measurer: String,
    pub curriculum_buckets: usize,
    pub curriculum_epochs_per_bucket: usize,
    // trainer
    pub train_epochs: usize,
    pub train_batch_size: usize,
    pub train_learning_rate: f64,
    pub train_grad_clip: f64,
    pub train_warmup_epochs: usize,
    pub train_probe_queries: usize,
    pub train_checkpoint_every: usize,
    pub train_augment_jitter: f64,
    // pipeline & eval
    pub pipeline_use_pseudo: bool,
    pub eval_rerank_top_k: usize,
}

impl Default for Config {
    fn default() -> Self {
        Config {
            seed: 7,
            corpus_identities: 300,
            corpus_test_identities: 100,
            corpus_images_per_identity: 4,
            corpus_captions_per_image: 2,
            corpus_labeled_ratio: 0.01,
            corpus_attributes: 6,
            corpus_values: 8,
            corpus_patches: 16,
            corpus_patch_dim: 16,
            corpus_connectives: 12,
            corpus_sigma: 0.25,
            caption_epochs: 30,
            caption_lr: 3e-3,
            caption_batch_size: 16,
            caption_decoder: "sample".into(),
            caption_top_p: 0.9,
            caption_texts_per_image: 1,
            mask_rho_v: 0.2,
            mask_rho_t: 0.1,
            mask_beta_v: 0.1,
            mask_beta_t: 0.1,
            mask_patch_v: true,
            mask_patch_t: true,
            mask_channel_v: true,
            mask_channel_t: true,
            mask_pseudo_only: false,
            loss_tau_init: 0.07,
            loss_hard_negatives: true,
            curriculum_scheduler: "linear".into(),
            curriculum_lambda0: 0.3,
            curriculum_t_grow: 15,
            curriculum_measurer: "blipscore_analog".into(),
            curriculum_buckets: 4,
            curriculum_epochs_per_bucket: 5,
            train_epochs: 20,
            train_batch_size: 64,
            train_learning_rate: 1e-4,
            train_grad_clip: 5.0,
            train_warmup_epochs: 5,
            train_probe_queries: 32,
            train_checkpoint_every: 5,
            train_augment_jitter: 0.0,
            pipeline_use_pseudo: true,
            eval_rerank_top_k: 0,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $kind:tt),+ $(,)?) => {
        impl Config {
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
                match key {
                    $($key => { self.$field = parse_value!($kind, key, value)?; Ok(()) })+
                    _ => Err(ConfigError::UnknownKey(key.to_string())),
                }
            }

            /// Fixed-order rendering used for display and hashing.
            pub fn canonical(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", $key, render_value!($kind, &self.$field)));)+
                out
            }
        }
    };
}

macro_rules! parse_value {
    (usize, $key:expr, $value:expr) => {
        $value.parse::<usize>().map_err(|_| ConfigError::BadValue {
            key: $key.to_string(),
            value: $value.to_string(),
            wanted: "integer",
        })
    };
    (u64, $key:expr, $value:expr) => {
        $value.parse::<u64>().map_err(|_| ConfigError::BadValue {
            key: $key.to_string(),
            value: $value.to_string(),
            wanted: "integer",
        })
    };
    (f64, $key:expr, $value:expr) => {
        $value.parse::<f64>().map_err(|_| ConfigError::BadValue {
            key: $key.to_string(),
            value: $value.to_string(),
            wanted: "number",
        })
    };
    (bool, $key:expr, $value:expr) => {
        match $value {
            "true" | "on" | "1" => Ok(true),
            "false" | "off" | "0" => Ok(false),
            _ => Err(ConfigError::BadValue {
                key: $key.to_string(),
                value: $value.to_string(),
                wanted: "bool",
            }),
        }
    };
    (String, $key:expr, $value:expr) => {
        Ok::<String, ConfigError>($value.to_string())
    };
}

macro_rules! render_value {
    (String, $v:expr) => {
        $v.to_string()
    };
    ($t:tt, $v:expr) => {
        format!("{}", $v)
    };
}

config_keys! {
    "seed" => seed: u64,
    "corpus.identities" => corpus_identities: usize,
    "corpus.test_identities" => corpus_test_identities: usize,
    "corpus.images_per_identity" => corpus_images_per_identity: usize,
    "corpus.captions_per_image" => corpus_captions_per_image: usize,
    "corpus.labeled_ratio" => corpus_labeled_ratio: f64,
    "corpus.attributes" => corpus_attributes: usize,
    "corpus.values" => corpus_values: usize,
    "corpus.patches" => corpus_patches: usize,
    "corpus.patch_dim" => corpus_patch_dim: usize,
    "corpus.connectives" => corpus_connectives: usize,
    "corpus.sigma" => corpus_sigma: f64,
    "caption.epochs" => caption_epochs: usize,
    "caption.lr" => caption_lr: f64,
    "caption.batch_size" => caption_batch_size: usize,
    "caption.decoder" => caption_decoder: String,
    "caption.top_p" => caption_top_p: f64,
    "caption.texts_per_image" => caption_texts_per_image: usize,
    "mask.rho_v" => mask_rho_v: f64,
    "mask.rho_t" => mask_rho_t: f64,
    "mask.beta_v" => mask_beta_v: f64,
    "mask.beta_t" => mask_beta_t: f64,
    "mask.patch_v" => mask_patch_v: bool,
    "mask.patch_t" => mask_patch_t: bool,
    "mask.channel_v" => mask_channel_v: bool,
    "mask.channel_t" => mask_channel_t: bool,
    "mask.pseudo_only" => mask_pseudo_only: bool,
    "loss.tau_init" => loss_tau_init: f64,
    "loss.hard_negatives" => loss_hard_negatives: bool,
    "curriculum.scheduler" => curriculum_scheduler: String,
    "curriculum.lambda0" => curriculum_lambda0: f64,
    "curriculum.t_grow" => curriculum_t_grow: usize,
    "curriculum.measurer" => curriculum_measurer: String,
    "curriculum.buckets" => curriculum_buckets: usize,
    "curriculum.epochs_per_bucket" => curriculum_epochs_per_bucket: usize,
    "train.epochs" => train_epochs: usize,
    "train.batch_size" => train_batch_size: usize,
    "train.learning_rate" => train_learning_rate: f64,
    "train.grad_clip" => train_grad_clip: f64,
    "train.warmup_epochs" => train_warmup_epochs: usize,
    "train.probe_queries" => train_probe_queries: usize,
    "train.checkpoint_every" => train_checkpoint_every: usize,
    "train.augment_jitter" => train_augment_jitter: f64,
    "pipeline.use_pseudo" => pipeline_use_pseudo: bool,
    "eval.rerank_top_k" => eval_rerank_top_k: usize,
}

impl Config {
    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut config = Config::default();
        config.apply(text)?;
        Ok(config)
    }

    /// Applies overrides from the same text format on top of self.
    pub fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::BadLine(lineno + 1, raw.to_string()))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        Config::parse(&std::fs::read_to_string(path)?)
    }

    /// Hex digest identifying this configuration.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.canonical().as_bytes());
        let digest = hasher.finalize();
        hex_prefix(&digest, 16)
    }

    // ---- typed views onto the core crate's config structs ----

    pub fn schema(&self) -> AttributeSchema {
        AttributeSchema {
            attribute_count: self.corpus_attributes,
            values_per_attribute: self.corpus_values,
            patch_count: self.corpus_patches,
            patch_dim: self.corpus_patch_dim,
            connective_count: self.corpus_connectives,
            image_noise: self.corpus_sigma,
        }
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            schema: self.schema(),
            train_identities: self.corpus_identities,
            test_identities: self.corpus_test_identities,
            images_per_identity: self.corpus_images_per_identity,
            captions_per_image: self.corpus_captions_per_image,
            labeled_ratio: self.corpus_labeled_ratio,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            epochs: self.caption_epochs,
            learning_rate: self.caption_lr,
            batch_size: self.caption_batch_size,
            seed: persearch_core::rng::derive_seed(self.seed, "caption-train", 0),
        }
    }

    pub fn decoder(&self) -> Result<Decoder, ConfigError> {
        match self.caption_decoder.as_str() {
            "greedy" => Ok(Decoder::Greedy),
            "sample" => Ok(Decoder::Sample {
                top_p: self.caption_top_p,
            }),
            other => Err(ConfigError::BadValue {
                key: "caption.decoder".into(),
                value: other.into(),
                wanted: "greedy|sample",
            }),
        }
    }

    pub fn mask_config(&self) -> MaskConfig {
        MaskConfig {
            rho_v: self.mask_rho_v,
            rho_t: self.mask_rho_t,
            beta_v: self.mask_beta_v,
            beta_t: self.mask_beta_t,
            patch_image: self.mask_patch_v,
            patch_text: self.mask_patch_t,
            channel_image: self.mask_channel_v,
            channel_text: self.mask_channel_t,
        }
    }

    pub fn curriculum_mode(&self) -> Result<CurriculumMode, ConfigError> {
        match self.curriculum_scheduler.as_str() {
            "off" => Ok(CurriculumMode::Off),
            other => Scheduler::parse(other).map(CurriculumMode::On).ok_or_else(|| {
                ConfigError::BadValue {
                    key: "curriculum.scheduler".into(),
                    value: other.into(),
                    wanted: "linear|baby_step|root2|off",
                }
            }),
        }
    }

    pub fn measurer(&self) -> Result<Measurer, ConfigError> {
        Measurer::parse(&self.curriculum_measurer).ok_or_else(|| ConfigError::BadValue {
            key: "curriculum.measurer".into(),
            value: self.curriculum_measurer.clone(),
            wanted: "blipscore_analog|clipscore_analog|sentence_length|random",
        })
    }

    pub fn plan_params(&self, scheduler: Scheduler) -> PlanParams {
        PlanParams {
            scheduler,
            lambda0: self.curriculum_lambda0,
            t_grow: self.curriculum_t_grow,
            epochs: self.train_epochs,
            buckets: self.curriculum_buckets,
            epochs_per_bucket: self.curriculum_epochs_per_bucket,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train_epochs,
            batch_size: self.train_batch_size,
            learning_rate: self.train_learning_rate,
            seed: persearch_core::rng::derive_seed(self.seed, "retrieval-train", 0),
            mask: self.mask_config(),
            hard_negatives: self.loss_hard_negatives,
            tau_init: self.loss_tau_init,
            grad_clip: self.train_grad_clip,
            mask_pseudo_only: self.mask_pseudo_only,
            augment_jitter: self.train_augment_jitter,
            warmup_epochs: self.train_warmup_epochs,
            encoder: Default::default(),
            probe_queries: self.train_probe_queries,
            checkpoint_every: self.train_checkpoint_every,
        }
    }

    // ---- stage-level sub-hashes for the artifact cache ----

    fn corpus_fields(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}|{}",
            self.seed,
            self.corpus_identities,
            self.corpus_test_identities,
            self.corpus_images_per_identity,
            self.corpus_captions_per_image,
            self.corpus_labeled_ratio,
            self.corpus_attributes,
            self.corpus_values,
            self.corpus_patches,
            self.corpus_patch_dim,
            self.corpus_connectives,
            self.corpus_sigma,
        )
    }

    pub fn corpus_key(&self) -> String {
        short_hash("corpus", &self.corpus_fields())
    }

    fn captioner_fields(&self) -> String {
        format!(
            "{}|{}|{}|{}",
            self.corpus_fields(),
            self.caption_epochs,
            self.caption_lr,
            self.caption_batch_size,
        )
    }

    pub fn captioner_key(&self) -> String {
        short_hash("captioner", &self.captioner_fields())
    }

    fn pseudo_fields(&self) -> String {
        format!(
            "{}|{}|{}|{}",
            self.captioner_fields(),
            self.caption_decoder,
            self.caption_top_p,
            self.caption_texts_per_image,
        )
    }

    pub fn pseudo_key(&self) -> String {
        short_hash("pseudo", &self.pseudo_fields())
    }

    fn warmup_fields(&self) -> String {
        format!(
            "{}|{}|{}|{}|{}|{}|{}",
            self.pseudo_fields(),
            self.train_warmup_epochs,
            self.train_batch_size,
            self.train_learning_rate,
            self.train_grad_clip,
            self.loss_tau_init,
            self.loss_hard_negatives,
        )
    }

    pub fn scores_key(&self) -> String {
        short_hash(
            "scores",
            &format!("{}|{}", self.warmup_fields(), self.curriculum_measurer),
        )
    }
}

fn short_hash(tag: &str, body: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(tag.as_bytes());
    hasher.update(b"\0");
    hasher.update(body.as_bytes());
    hex_prefix(&hasher.finalize(), 12)
}

fn hex_prefix(digest: &[u8], chars: usize) -> String {
    let mut out = String::with_capacity(chars);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
        if out.len() >= chars {
            break;
        }
    }
    out.truncate(chars);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_canonical_form() {
        let config = Config::default();
        let parsed = Config::parse(&config.canonical()).unwrap();
        assert_eq!(config, parsed);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            Config::parse("corpus.identitees = 300"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(matches!(
            Config::parse("mask.rho_v == 0.2"),
            Err(ConfigError::BadValue { .. }) | Err(ConfigError::BadLine(..))
        ));
    }

    #[test]
    fn values_parse_and_comments_are_ignored() {
        let text = "\n# a comment\nseed = 42  # trailing\nmask.patch_v = false\ntrain.epochs = 3\n";
        let config = Config::parse(text).unwrap();
        assert_eq!(config.seed, 42);
        assert!(!config.mask_patch_v);
        assert_eq!(config.train_epochs, 3);
    }

    #[test]
    fn bad_values_name_the_key() {
        match Config::parse("train.epochs = soon") {
            Err(ConfigError::BadValue { key, .. }) => assert_eq!(key, "train.epochs"),
            other => panic!("unexpected: {other:?}"),
        }
    }

    #[test]
    fn hash_tracks_content() {
        let a = Config::default();
        let mut b = Config::default();
        assert_eq!(a.hash(), b.hash());
        b.mask_rho_v = 0.4;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn stage_keys_ignore_downstream_fields() {
        let a = Config::default();
        let mut b = Config::default();
        b.mask_rho_v = 0.4; // a training-stage field
        assert_eq!(a.corpus_key(), b.corpus_key());
        assert_eq!(a.pseudo_key(), b.pseudo_key());
        assert_eq!(a.scores_key(), b.scores_key());
        assert_ne!(a.hash(), b.hash());

        let mut c = Config::default();
        c.corpus_labeled_ratio = 0.05;
        assert_ne!(a.corpus_key(), c.corpus_key());
    }

    #[test]
    fn decoder_and_measurer_views() {
        let mut config = Config::default();
        assert!(matches!(config.decoder().unwrap(), Decoder::Sample { .. }));
        config.caption_decoder = "greedy".into();
        assert!(matches!(config.decoder().unwrap(), Decoder::Greedy));
        config.caption_decoder = "beam".into();
        assert!(config.decoder().is_err());

        config.curriculum_scheduler = "off".into();
        assert_eq!(config.curriculum_mode().unwrap(), CurriculumMode::Off);
        config.curriculum_scheduler = "root2".into();
        assert_eq!(
            config.curriculum_mode().unwrap(),
            CurriculumMode::On(Scheduler::Root2)
        );
    }
}
