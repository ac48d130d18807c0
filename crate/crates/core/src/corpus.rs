//! Synthetic attribute-person corpus.
//!
//! Identities are fixed-length attribute tuples. An image renders each
//! attribute value into a designated patch as a value-specific pattern plus
//! Gaussian observation noise; the remaining patches are background noise.
//! Captions list a shuffled subset of the identity's attributes as value
//! tokens framed by connective tokens. Because attributes are known, every
//! caption carries an oracle corruption rate, which downstream noise
//! measurers can be validated against.

use crate::rng::{derive_seed, stream_rng};
use crate::tape::Matrix;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("labeled_ratio must be in (0, 1], got {0}")]
    BadLabeledRatio(f64),
    #[error("need at least 2 train identities, got {0}")]
    TooFewIdentities(usize),
    #[error("schema invalid: {0}")]
    BadSchema(String),
    #[error("corrupt_caption requires a human caption")]
    NotHumanCaption,
    #[error("corruption rate must be in [0, 1], got {0}")]
    BadRate(f64),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest parse error: {0}")]
    Manifest(String),
}

/// Attribute schema and token vocabulary layout.
///
/// The vocabulary is `[PAD, BOS, EOS, MASK]`, then connective tokens, then
/// one token per (attribute, value) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub attribute_count: usize,
    pub values_per_attribute: usize,
    pub patch_count: usize,
    pub patch_dim: usize,
    pub connective_count: usize,
    pub image_noise: f64,
}

impl Default for AttributeSchema {
    fn default() -> Self {
        // 4 specials + 12 connectives + 6*8 value tokens = 64-token vocabulary
        AttributeSchema {
            attribute_count: 6,
            values_per_attribute: 8,
            patch_count: 16,
            patch_dim: 16,
            connective_count: 12,
            image_noise: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Pad,
    Bos,
    Eos,
    Mask,
    Connective(usize),
    Value { attribute: usize, value: usize },
}

impl AttributeSchema {
    pub const PAD: usize = 0;
    pub const BOS: usize = 1;
    pub const EOS: usize = 2;
    pub const MASK: usize = 3;
    const SPECIALS: usize = 4;

    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.attribute_count == 0 || self.values_per_attribute < 2 {
            return Err(CorpusError::BadSchema(
                "need at least one attribute with two values".into(),
            ));
        }
        if self.attribute_count > self.patch_count {
            return Err(CorpusError::BadSchema(
                "more attributes than designated patches".into(),
            ));
        }
        if self.patch_dim == 0 || self.connective_count == 0 {
            return Err(CorpusError::BadSchema("zero patch_dim or connectives".into()));
        }
        if 2 * self.attribute_count > self.patch_dim {
            return Err(CorpusError::BadSchema(format!(
                "patch_dim {} cannot hold {} orthogonal attribute subspaces",
                self.patch_dim, self.attribute_count
            )));
        }
        if self.image_noise < 0.0 {
            return Err(CorpusError::BadSchema("negative image noise".into()));
        }
        Ok(())
    }

    pub fn connective_token(&self, k: usize) -> usize {
        debug_assert!(k < self.connective_count);
        Self::SPECIALS + k
    }

    pub fn value_token(&self, attribute: usize, value: usize) -> usize {
        debug_assert!(attribute < self.attribute_count && value < self.values_per_attribute);
        Self::SPECIALS + self.connective_count + attribute * self.values_per_attribute + value
    }

    pub fn vocab_size(&self) -> usize {
        Self::SPECIALS + self.connective_count + self.attribute_count * self.values_per_attribute
    }

    pub fn token_kind(&self, token: usize) -> TokenKind {
        match token {
            Self::PAD => TokenKind::Pad,
            Self::BOS => TokenKind::Bos,
            Self::EOS => TokenKind::Eos,
            Self::MASK => TokenKind::Mask,
            t if t < Self::SPECIALS + self.connective_count => {
                TokenKind::Connective(t - Self::SPECIALS)
            }
            t => {
                let rel = t - Self::SPECIALS - self.connective_count;
                TokenKind::Value {
                    attribute: rel / self.values_per_attribute,
                    value: rel % self.values_per_attribute,
                }
            }
        }
    }

    /// Attribute `a` is always rendered into patch `a`.
    pub fn designated_patch(&self, attribute: usize) -> usize {
        attribute
    }

    /// Generation bound: up to `2A + 4` emitted tokens after BOS.
    pub fn max_generated_tokens(&self) -> usize {
        2 * self.attribute_count + 4
    }

    /// Longest token sequence that can appear anywhere: BOS, the emission
    /// bound, and the EOS appended after a truncated generation.
    pub fn max_sequence_len(&self) -> usize {
        self.max_generated_tokens() + 2
    }

    /// Deterministic per-(attribute, value) base patterns, derived from the
    /// corpus seed so the whole corpus is a pure function of (spec, seed).
    ///
    /// Every attribute owns an orthogonal 2-dim subspace of the patch
    /// space and its values sit on a circle inside it. Attributes then do
    /// not interfere with each other, even after mean-pooling over
    /// patches, which keeps the captioning task learnable by a small
    /// model.
    pub fn patterns(&self, corpus_seed: u64) -> Vec<Vec<Vec<f64>>> {
        let basis = orthonormal_vectors(self.patch_dim, 2 * self.attribute_count, corpus_seed);
        let scale = 4.0;
        (0..self.attribute_count)
            .map(|a| {
                (0..self.values_per_attribute)
                    .map(|v| {
                        let theta = 2.0 * std::f64::consts::PI * v as f64
                            / self.values_per_attribute as f64;
                        let (u1, u2) = (&basis[2 * a], &basis[2 * a + 1]);
                        (0..self.patch_dim)
                            .map(|d| scale * (theta.cos() * u1[d] + theta.sin() * u2[d]))
                            .collect()
                    })
                    .collect()
            })
            .collect()
    }
}

/// Gram-Schmidt over seeded Gaussian draws.
fn orthonormal_vectors(dim: usize, count: usize, seed: u64) -> Vec<Vec<f64>> {
    assert!(count <= dim, "cannot fit {count} orthonormal vectors in {dim} dims");
    let mut rng = stream_rng(seed, "pattern-basis", 0);
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(&mut rng)).collect();
        for u in &basis {
            let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, u) in v.iter_mut().zip(u) {
                *x -= proj * u;
            }
        }
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue; // degenerate draw; retry
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
    }
    basis
}

fn gaussian<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; two uniforms per draw keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeIdentity {
    pub id: usize,
    pub attrs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticImage {
    pub identity_id: usize,
    /// patch_count × patch_dim, row per patch.
    pub patches: Matrix,
    pub observation_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Human,
    Pseudo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub tokens: Vec<usize>,
    pub provenance: Provenance,
    pub oracle_corruption_rate: f64,
}

impl Caption {
    /// Positions of non-special (connective or value) tokens.
    pub fn content_positions(&self, schema: &AttributeSchema) -> Vec<usize> {
        self.tokens
            .iter()
            .enumerate()
            .filter(|(_, &t)| {
                matches!(
                    schema.token_kind(t),
                    TokenKind::Connective(_) | TokenKind::Value { .. } | TokenKind::Mask
                )
            })
            .map(|(i, _)| i)
            .collect()
    }

    pub fn content_token_count(&self, schema: &AttributeSchema) -> usize {
        self.content_positions(schema).len()
    }
}

/// One (image, caption) training pair with a stable id used by the
/// curriculum bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSample {
    pub sample_id: usize,
    pub image: SyntheticImage,
    pub caption: Caption,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TestQuery {
    pub caption: Caption,
    pub identity_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub schema: AttributeSchema,
    pub train_identities: usize,
    pub test_identities: usize,
    pub images_per_identity: usize,
    pub captions_per_image: usize,
    pub labeled_ratio: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            schema: AttributeSchema::default(),
            train_identities: 300,
            test_identities: 100,
            images_per_identity: 4,
            captions_per_image: 2,
            labeled_ratio: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub spec: CorpusSpec,
    pub seed: u64,
    pub identities: Vec<AttributeIdentity>,
    pub labeled: Vec<PairedSample>,
    pub unlabeled: Vec<SyntheticImage>,
    pub test_gallery: Vec<SyntheticImage>,
    pub test_queries: Vec<TestQuery>,
}

impl CorpusSplit {
    pub fn attrs_of(&self, identity_id: usize) -> &[usize] {
        &self.identities[identity_id].attrs
    }

    pub fn train_image_count(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }
}

/// Generates the full corpus deterministically from (spec, seed).
pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<CorpusSplit, CorpusError> {
    spec.schema.validate()?;
    if spec.labeled_ratio <= 0.0 || spec.labeled_ratio > 1.0 {
        return Err(CorpusError::BadLabeledRatio(spec.labeled_ratio));
    }
    if spec.train_identities < 2 {
        return Err(CorpusError::TooFewIdentities(spec.train_identities));
    }
    if spec.test_identities == 0 || spec.images_per_identity == 0 || spec.captions_per_image == 0 {
        return Err(CorpusError::BadSchema(
            "test identities, images per identity and captions per image must be positive".into(),
        ));
    }

    let schema = &spec.schema;
    let total_identities = spec.train_identities + spec.test_identities;
    let identities = draw_identities(schema, total_identities, seed)?;
    let patterns = schema.patterns(seed);

    let render = |identity: &AttributeIdentity, obs_seed: u64| -> SyntheticImage {
        render_image(schema, &patterns, identity, obs_seed)
    };

    // Train images and their human captions.
    let mut train_images = Vec::new();
    let mut train_captions: Vec<Vec<Caption>> = Vec::new();
    for id in 0..spec.train_identities {
        for k in 0..spec.images_per_identity {
            let global = id * spec.images_per_identity + k;
            let obs_seed = derive_seed(seed, "train-obs", global as u64);
            train_images.push(render(&identities[id], obs_seed));
            let caps = (0..spec.captions_per_image)
                .map(|c| {
                    let mut rng = stream_rng(
                        seed,
                        "train-caption",
                        (global * spec.captions_per_image + c) as u64,
                    );
                    make_human_caption(schema, &identities[id].attrs, &mut rng)
                })
                .collect();
            train_captions.push(caps);
        }
    }

    // Labeled split: floor of the ratio with a minimum of one labeled image.
    let n_images = train_images.len();
    let n_labeled = ((spec.labeled_ratio * n_images as f64).floor() as usize).max(1);
    let mut pick_rng = stream_rng(seed, "labeled-pick", 0);
    let mut chosen =
        rand::seq::index::sample(&mut pick_rng, n_images, n_labeled.min(n_images)).into_vec();
    chosen.sort_unstable();
    let chosen_set: HashSet<usize> = chosen.iter().copied().collect();

    let mut labeled = Vec::with_capacity(chosen.len());
    for (sample_id, &img_idx) in chosen.iter().enumerate() {
        labeled.push(PairedSample {
            sample_id,
            image: train_images[img_idx].clone(),
            caption: train_captions[img_idx][0].clone(),
        });
    }
    let unlabeled: Vec<SyntheticImage> = train_images
        .iter()
        .enumerate()
        .filter(|(i, _)| !chosen_set.contains(i))
        .map(|(_, img)| img.clone())
        .collect();

    // Test gallery and queries over a disjoint identity range.
    let mut test_gallery = Vec::new();
    let mut test_queries = Vec::new();
    for t in 0..spec.test_identities {
        let id = spec.train_identities + t;
        for k in 0..spec.images_per_identity {
            let global = t * spec.images_per_identity + k;
            let obs_seed = derive_seed(seed, "test-obs", global as u64);
            test_gallery.push(render(&identities[id], obs_seed));
            for c in 0..spec.captions_per_image {
                let mut rng = stream_rng(
                    seed,
                    "test-caption",
                    (global * spec.captions_per_image + c) as u64,
                );
                test_queries.push(TestQuery {
                    caption: make_human_caption(schema, &identities[id].attrs, &mut rng),
                    identity_id: id,
                });
            }
        }
    }

    Ok(CorpusSplit {
        spec: spec.clone(),
        seed,
        identities,
        labeled,
        unlabeled,
        test_gallery,
        test_queries,
    })
}

fn draw_identities(
    schema: &AttributeSchema,
    count: usize,
    seed: u64,
) -> Result<Vec<AttributeIdentity>, CorpusError> {
    let space: f64 = (schema.values_per_attribute as f64).powi(schema.attribute_count as i32);
    if (count as f64) > space {
        return Err(CorpusError::BadSchema(format!(
            "cannot draw {count} distinct identities from {space} attribute tuples"
        )));
    }
    let mut rng = stream_rng(seed, "identities", 0);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let attrs: Vec<usize> = (0..schema.attribute_count)
            .map(|_| rng.gen_range(0..schema.values_per_attribute))
            .collect();
        if seen.insert(attrs.clone()) {
            out.push(AttributeIdentity { id: out.len(), attrs });
        }
    }
    Ok(out)
}

fn render_image(
    schema: &AttributeSchema,
    patterns: &[Vec<Vec<f64>>],
    identity: &AttributeIdentity,
    obs_seed: u64,
) -> SyntheticImage {
    let mut rng = stream_rng(obs_seed, "render", 0);
    let mut patches = Matrix::zeros((schema.patch_count, schema.patch_dim));
    for p in 0..schema.patch_count {
        for d in 0..schema.patch_dim {
            patches[[p, d]] = schema.image_noise * gaussian(&mut rng);
        }
    }
    for (a, &v) in identity.attrs.iter().enumerate() {
        let pos = schema.designated_patch(a);
        for d in 0..schema.patch_dim {
            patches[[pos, d]] += patterns[a][v][d];
        }
    }
    SyntheticImage {
        identity_id: identity.id,
        patches,
        observation_seed: obs_seed,
    }
}

/// Human caption: a shuffled subset of at least A−1 attributes, each value
/// token framed by a connective token.
pub fn make_human_caption<R: Rng>(
    schema: &AttributeSchema,
    attrs: &[usize],
    rng: &mut R,
) -> Caption {
    let a = schema.attribute_count;
    let mut mention: Vec<usize> = (0..a).collect();
    if a > 1 && rng.gen_bool(0.5) {
        let omit = rng.gen_range(0..a);
        mention.remove(omit);
    }
    mention.shuffle(rng);

    let mut tokens = vec![AttributeSchema::BOS];
    for &attr in &mention {
        tokens.push(schema.connective_token(rng.gen_range(0..schema.connective_count)));
        tokens.push(schema.value_token(attr, attrs[attr]));
    }
    tokens.push(AttributeSchema::EOS);
    Caption {
        tokens,
        provenance: Provenance::Human,
        oracle_corruption_rate: 0.0,
    }
}

/// Replaces each attribute-value token with a different value of the same
/// attribute with probability `rate`. Connectives and specials are
/// untouched. The result is a pseudo caption whose oracle corruption rate
/// is the requested rate.
pub fn corrupt_caption(
    schema: &AttributeSchema,
    caption: &Caption,
    rate: f64,
    seed: u64,
) -> Result<Caption, CorpusError> {
    if caption.provenance != Provenance::Human {
        return Err(CorpusError::NotHumanCaption);
    }
    if !(0.0..=1.0).contains(&rate) {
        return Err(CorpusError::BadRate(rate));
    }
    let mut rng = stream_rng(seed, "corrupt", 0);
    let tokens = caption
        .tokens
        .iter()
        .map(|&t| match schema.token_kind(t) {
            TokenKind::Value { attribute, value } if rng.gen_bool(rate) => {
                let offset = rng.gen_range(1..schema.values_per_attribute);
                let new_value = (value + offset) % schema.values_per_attribute;
                schema.value_token(attribute, new_value)
            }
            _ => t,
        })
        .collect();
    Ok(Caption {
        tokens,
        provenance: Provenance::Pseudo,
        oracle_corruption_rate: rate,
    })
}

/// Fraction of value tokens in `caption` that contradict `attrs`; 0.0 when
/// the caption carries no value tokens.
pub fn oracle_corruption(schema: &AttributeSchema, attrs: &[usize], tokens: &[usize]) -> f64 {
    let mut value_tokens = 0usize;
    let mut wrong = 0usize;
    for &t in tokens {
        if let TokenKind::Value { attribute, value } = schema.token_kind(t) {
            value_tokens += 1;
            if attrs[attribute] != value {
                wrong += 1;
            }
        }
    }
    if value_tokens == 0 {
        0.0
    } else {
        wrong as f64 / value_tokens as f64
    }
}

// ---------------------------------------------------------------------------
// Manifest persistence: line-delimited JSON records plus a flat binary blob
// for patch data.
// ---------------------------------------------------------------------------

const BLOB_NAME: &str = "images.bin";
const MANIFEST_NAME: &str = "manifest.jsonl";

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    format: String,
    version: u32,
    spec: CorpusSpec,
    seed: u64,
    blob: String,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ManifestLine {
    Identity {
        id: usize,
        attrs: Vec<usize>,
    },
    Image {
        role: String,
        idx: usize,
        identity: usize,
        obs_seed: u64,
        offset: u64,
        values: usize,
    },
    Caption {
        role: String,
        idx: usize,
        identity: usize,
        sample_id: usize,
        tokens: Vec<usize>,
        provenance: Provenance,
        rate: f64,
    },
}

/// Serializes the manifest (without patch data) to bytes. Byte-identical
/// for identical corpora.
pub fn manifest_bytes(corpus: &CorpusSplit) -> Result<Vec<u8>, CorpusError> {
    let mut blob_offset = 0u64;
    let mut out = Vec::new();
    let header = ManifestHeader {
        format: "corpus-manifest".into(),
        version: 1,
        spec: corpus.spec.clone(),
        seed: corpus.seed,
        blob: BLOB_NAME.into(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("serializable"))?;

    let mut lines: Vec<ManifestLine> = Vec::new();
    for ident in &corpus.identities {
        lines.push(ManifestLine::Identity {
            id: ident.id,
            attrs: ident.attrs.clone(),
        });
    }
    let mut push_image = |lines: &mut Vec<ManifestLine>, role: &str, idx: usize, img: &SyntheticImage| {
        let values = img.patches.len();
        lines.push(ManifestLine::Image {
            role: role.into(),
            idx,
            identity: img.identity_id,
            obs_seed: img.observation_seed,
            offset: blob_offset,
            values,
        });
        blob_offset += (values * 8) as u64;
    };
    for (i, pair) in corpus.labeled.iter().enumerate() {
        push_image(&mut lines, "labeled", i, &pair.image);
    }
    for (i, img) in corpus.unlabeled.iter().enumerate() {
        push_image(&mut lines, "unlabeled", i, img);
    }
    for (i, img) in corpus.test_gallery.iter().enumerate() {
        push_image(&mut lines, "gallery", i, img);
    }
    for (i, pair) in corpus.labeled.iter().enumerate() {
        lines.push(ManifestLine::Caption {
            role: "labeled".into(),
            idx: i,
            identity: pair.image.identity_id,
            sample_id: pair.sample_id,
            tokens: pair.caption.tokens.clone(),
            provenance: pair.caption.provenance,
            rate: pair.caption.oracle_corruption_rate,
        });
    }
    for (i, q) in corpus.test_queries.iter().enumerate() {
        lines.push(ManifestLine::Caption {
            role: "query".into(),
            idx: i,
            identity: q.identity_id,
            sample_id: 0,
            tokens: q.caption.tokens.clone(),
            provenance: q.caption.provenance,
            rate: q.caption.oracle_corruption_rate,
        });
    }
    for line in &lines {
        writeln!(out, "{}", serde_json::to_string(line).expect("serializable"))?;
    }
    Ok(out)
}

/// Writes `manifest.jsonl` and `images.bin` into `dir`.
pub fn write_corpus(dir: &Path, corpus: &CorpusSplit) -> Result<(), CorpusError> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(MANIFEST_NAME), manifest_bytes(corpus)?)?;

    let file = std::fs::File::create(dir.join(BLOB_NAME))?;
    let mut w = std::io::BufWriter::new(file);
    let mut dump = |img: &SyntheticImage| -> std::io::Result<()> {
        for v in img.patches.iter() {
            w.write_f64::<LittleEndian>(*v)?;
        }
        Ok(())
    };
    for pair in &corpus.labeled {
        dump(&pair.image)?;
    }
    for img in &corpus.unlabeled {
        dump(img)?;
    }
    for img in &corpus.test_gallery {
        dump(img)?;
    }
    Ok(())
}

/// Reads a corpus directory written by [`write_corpus`].
pub fn read_corpus(dir: &Path) -> Result<CorpusSplit, CorpusError> {
    let file = std::fs::File::open(dir.join(MANIFEST_NAME))?;
    let mut reader = std::io::BufReader::new(file);
    let mut header_line = String::new();
    reader.read_line(&mut header_line)?;
    let header: ManifestHeader = serde_json::from_str(header_line.trim())
        .map_err(|e| CorpusError::Manifest(format!("bad header: {e}")))?;
    if header.format != "corpus-manifest" || header.version != 1 {
        return Err(CorpusError::Manifest("unknown manifest format".into()));
    }

    let blob = std::fs::read(dir.join(&header.blob))?;
    let read_patches = |offset: u64, values: usize| -> Result<Matrix, CorpusError> {
        let start = offset as usize;
        let end = start + values * 8;
        if end > blob.len() {
            return Err(CorpusError::Manifest("blob offset out of range".into()));
        }
        let mut cursor = &blob[start..end];
        let mut data = vec![0.0; values];
        for v in data.iter_mut() {
            *v = cursor.read_f64::<LittleEndian>()?;
        }
        let schema = &header.spec.schema;
        Matrix::from_shape_vec((schema.patch_count, schema.patch_dim), data)
            .map_err(|e| CorpusError::Manifest(format!("bad patch shape: {e}")))
    };

    let mut identities = Vec::new();
    let mut labeled_images: Vec<Option<SyntheticImage>> = Vec::new();
    let mut labeled_captions: Vec<Option<(usize, Caption)>> = Vec::new();
    let mut unlabeled = Vec::new();
    let mut test_gallery = Vec::new();
    let mut test_queries = Vec::new();

    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: ManifestLine = serde_json::from_str(&line)
            .map_err(|e| CorpusError::Manifest(format!("bad record: {e}")))?;
        match parsed {
            ManifestLine::Identity { id, attrs } => {
                if id != identities.len() {
                    return Err(CorpusError::Manifest("identity ids out of order".into()));
                }
                identities.push(AttributeIdentity { id, attrs });
            }
            ManifestLine::Image {
                role,
                idx,
                identity,
                obs_seed,
                offset,
                values,
            } => {
                let img = SyntheticImage {
                    identity_id: identity,
                    patches: read_patches(offset, values)?,
                    observation_seed: obs_seed,
                };
                match role.as_str() {
                    "labeled" => {
                        if labeled_images.len() <= idx {
                            labeled_images.resize(idx + 1, None);
                        }
                        labeled_images[idx] = Some(img);
                    }
                    "unlabeled" => unlabeled.push(img),
                    "gallery" => test_gallery.push(img),
                    other => {
                        return Err(CorpusError::Manifest(format!("unknown image role {other}")))
                    }
                }
            }
            ManifestLine::Caption {
                role,
                idx,
                identity,
                sample_id,
                tokens,
                provenance,
                rate,
            } => {
                let caption = Caption {
                    tokens,
                    provenance,
                    oracle_corruption_rate: rate,
                };
                match role.as_str() {
                    "labeled" => {
                        if labeled_captions.len() <= idx {
                            labeled_captions.resize(idx + 1, None);
                        }
                        labeled_captions[idx] = Some((sample_id, caption));
                    }
                    "query" => test_queries.push(TestQuery {
                        caption,
                        identity_id: identity,
                    }),
                    other => {
                        return Err(CorpusError::Manifest(format!(
                            "unknown caption role {other}"
                        )))
                    }
                }
            }
        }
    }

    if labeled_images.len() != labeled_captions.len() {
        return Err(CorpusError::Manifest("labeled image/caption count mismatch".into()));
    }
    let mut labeled = Vec::with_capacity(labeled_images.len());
    for (img, cap) in labeled_images.into_iter().zip(labeled_captions) {
        let (img, (sample_id, caption)) = match (img, cap) {
            (Some(i), Some(c)) => (i, c),
            _ => return Err(CorpusError::Manifest("incomplete labeled pair".into())),
        };
        labeled.push(PairedSample {
            sample_id,
            image: img,
            caption,
        });
    }

    Ok(CorpusSplit {
        spec: header.spec,
        seed: header.seed,
        identities,
        labeled,
        unlabeled,
        test_gallery,
        test_queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> CorpusSpec {
        CorpusSpec {
            train_identities: 20,
            test_identities: 8,
            ..CorpusSpec::default()
        }
    }

    #[test]
    fn labeled_split_size_matches_ratio() {
        let spec = CorpusSpec {
            labeled_ratio: 0.01,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec, 7).unwrap();
        // 1% of 300*4 = 1200 images, floored
        assert_eq!(corpus.labeled.len(), 12);
        assert_eq!(corpus.unlabeled.len(), 1188);
        assert_eq!(corpus.test_gallery.len(), 400);
        assert_eq!(corpus.test_queries.len(), 800);
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let a = generate_corpus(&spec, 7).unwrap();
        let b = generate_corpus(&spec, 7).unwrap();
        assert_eq!(manifest_bytes(&a).unwrap(), manifest_bytes(&b).unwrap());
        let c = generate_corpus(&spec, 8).unwrap();
        assert_ne!(manifest_bytes(&a).unwrap(), manifest_bytes(&c).unwrap());
    }

    #[test]
    fn full_ratio_leaves_no_unlabeled() {
        let spec = CorpusSpec {
            labeled_ratio: 1.0,
            ..small_spec()
        };
        let corpus = generate_corpus(&spec, 3).unwrap();
        assert!(corpus.unlabeled.is_empty());
        assert_eq!(corpus.labeled.len(), 20 * 4);
    }

    #[test]
    fn tiny_ratio_keeps_one_labeled_image() {
        let spec = CorpusSpec {
            labeled_ratio: 1e-6,
            ..small_spec()
        };
        let corpus = generate_corpus(&spec, 3).unwrap();
        assert_eq!(corpus.labeled.len(), 1);
    }

    #[test]
    fn rejects_bad_parameters() {
        let mut spec = small_spec();
        spec.labeled_ratio = 0.0;
        assert!(matches!(
            generate_corpus(&spec, 1),
            Err(CorpusError::BadLabeledRatio(_))
        ));
        let mut spec = small_spec();
        spec.labeled_ratio = 1.5;
        assert!(matches!(
            generate_corpus(&spec, 1),
            Err(CorpusError::BadLabeledRatio(_))
        ));
        let mut spec = small_spec();
        spec.train_identities = 1;
        assert!(matches!(
            generate_corpus(&spec, 1),
            Err(CorpusError::TooFewIdentities(1))
        ));
    }

    #[test]
    fn identities_are_distinct_and_in_range() {
        let corpus = generate_corpus(&small_spec(), 11).unwrap();
        let mut seen = HashSet::new();
        for ident in &corpus.identities {
            assert_eq!(ident.attrs.len(), corpus.spec.schema.attribute_count);
            for &v in &ident.attrs {
                assert!(v < corpus.spec.schema.values_per_attribute);
            }
            assert!(seen.insert(ident.attrs.clone()), "duplicate attribute tuple");
        }
    }

    #[test]
    fn human_captions_are_well_formed() {
        let corpus = generate_corpus(&small_spec(), 5).unwrap();
        let schema = &corpus.spec.schema;
        for pair in &corpus.labeled {
            let tokens = &pair.caption.tokens;
            assert_eq!(tokens[0], AttributeSchema::BOS);
            assert_eq!(*tokens.last().unwrap(), AttributeSchema::EOS);
            assert_eq!(pair.caption.oracle_corruption_rate, 0.0);
            let attrs = corpus.attrs_of(pair.image.identity_id);
            let mut mentioned = HashSet::new();
            for &t in &tokens[1..tokens.len() - 1] {
                match schema.token_kind(t) {
                    TokenKind::Connective(_) => {}
                    TokenKind::Value { attribute, value } => {
                        assert_eq!(attrs[attribute], value, "human caption contradicts identity");
                        mentioned.insert(attribute);
                    }
                    other => panic!("unexpected token {other:?} in human caption"),
                }
            }
            assert!(mentioned.len() + 1 >= schema.attribute_count);
        }
    }

    #[test]
    fn corrupt_rate_zero_is_identity() {
        let corpus = generate_corpus(&small_spec(), 5).unwrap();
        let schema = &corpus.spec.schema;
        let human = &corpus.labeled[0].caption;
        let out = corrupt_caption(schema, human, 0.0, 99).unwrap();
        assert_eq!(out.tokens, human.tokens);
        assert_eq!(out.provenance, Provenance::Pseudo);
        assert_eq!(out.oracle_corruption_rate, 0.0);
    }

    #[test]
    fn corrupt_rate_one_replaces_every_value_token() {
        let corpus = generate_corpus(&small_spec(), 5).unwrap();
        let schema = &corpus.spec.schema;
        let human = &corpus.labeled[0].caption;
        let out = corrupt_caption(schema, human, 1.0, 99).unwrap();
        for (&orig, &new) in human.tokens.iter().zip(&out.tokens) {
            match (schema.token_kind(orig), schema.token_kind(new)) {
                (
                    TokenKind::Value { attribute: a0, value: v0 },
                    TokenKind::Value { attribute: a1, value: v1 },
                ) => {
                    assert_eq!(a0, a1, "attribute changed");
                    assert_ne!(v0, v1, "value not replaced at rate 1");
                }
                _ => assert_eq!(orig, new, "non-value token changed"),
            }
        }
    }

    #[test]
    fn corrupt_rejects_pseudo_input_and_bad_rate() {
        let corpus = generate_corpus(&small_spec(), 5).unwrap();
        let schema = &corpus.spec.schema;
        let human = &corpus.labeled[0].caption;
        let pseudo = corrupt_caption(schema, human, 0.5, 1).unwrap();
        assert!(matches!(
            corrupt_caption(schema, &pseudo, 0.5, 1),
            Err(CorpusError::NotHumanCaption)
        ));
        assert!(matches!(
            corrupt_caption(schema, human, 1.5, 1),
            Err(CorpusError::BadRate(_))
        ));
    }

    #[test]
    fn corruption_frequency_converges_to_rate() {
        // Monte Carlo oracle: captions with exactly 5 value tokens, corrupted
        // at rate 0.5, must show empirical replacement frequency 0.5 +- 0.02.
        let schema = AttributeSchema {
            attribute_count: 5,
            ..AttributeSchema::default()
        };
        let attrs: Vec<usize> = vec![1, 2, 3, 4, 5];
        let mut tokens = vec![AttributeSchema::BOS];
        for (a, &v) in attrs.iter().enumerate() {
            tokens.push(schema.connective_token(0));
            tokens.push(schema.value_token(a, v));
        }
        tokens.push(AttributeSchema::EOS);
        let human = Caption {
            tokens,
            provenance: Provenance::Human,
            oracle_corruption_rate: 0.0,
        };

        let trials = 10_000usize;
        let mut replaced = 0usize;
        let mut total = 0usize;
        for i in 0..trials {
            let out = corrupt_caption(&schema, &human, 0.5, i as u64).unwrap();
            for (&orig, &new) in human.tokens.iter().zip(&out.tokens) {
                if matches!(schema.token_kind(orig), TokenKind::Value { .. }) {
                    total += 1;
                    if orig != new {
                        replaced += 1;
                    }
                }
            }
        }
        assert_eq!(total, trials * 5);
        let freq = replaced as f64 / total as f64;
        assert!((freq - 0.5).abs() < 0.02, "empirical frequency {freq}");
    }

    #[test]
    fn noiseless_rendering_is_identity_separable() {
        // With zero observation noise, nearest-neighbor on raw patches must
        // retrieve the correct identity every time.
        let spec = CorpusSpec {
            schema: AttributeSchema {
                image_noise: 0.0,
                ..AttributeSchema::default()
            },
            train_identities: 30,
            test_identities: 10,
            labeled_ratio: 1.0,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec, 17).unwrap();
        let patterns = spec.schema.patterns(17);
        let canonical: Vec<(usize, Matrix)> = corpus
            .identities
            .iter()
            .map(|ident| {
                (ident.id, render_image(&spec.schema, &patterns, ident, 0).patches)
            })
            .collect();
        let mut checked = 0;
        for img in corpus.labeled.iter().map(|p| &p.image).chain(&corpus.test_gallery) {
            let best = canonical
                .iter()
                .min_by(|(_, a), (_, b)| {
                    let da = (&img.patches - a).mapv(|x| x * x).sum();
                    let db = (&img.patches - b).mapv(|x| x * x).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .map(|(id, _)| *id)
                .unwrap();
            assert_eq!(best, img.identity_id);
            checked += 1;
        }
        assert!(checked > 0);
    }

    #[test]
    fn same_identity_same_seed_renders_identically() {
        let spec = small_spec();
        let corpus = generate_corpus(&spec, 21).unwrap();
        let patterns = spec.schema.patterns(21);
        let img = &corpus.labeled[0].image;
        let again = render_image(
            &spec.schema,
            &patterns,
            &corpus.identities[img.identity_id],
            img.observation_seed,
        );
        assert_eq!(img.patches, again.patches);
    }

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(&small_spec(), 13).unwrap();
        write_corpus(dir.path(), &corpus).unwrap();
        let back = read_corpus(dir.path()).unwrap();
        assert_eq!(corpus, back);
    }

    #[test]
    fn oracle_corruption_counts_value_tokens() {
        let schema = AttributeSchema::default();
        let attrs = vec![0, 1, 2, 3, 4, 5];
        let tokens = vec![
            AttributeSchema::BOS,
            schema.connective_token(0),
            schema.value_token(0, 0), // correct
            schema.connective_token(1),
            schema.value_token(1, 5), // wrong
            AttributeSchema::EOS,
        ];
        assert_eq!(oracle_corruption(&schema, &attrs, &tokens), 0.5);
        assert_eq!(
            oracle_corruption(&schema, &attrs, &[AttributeSchema::BOS, AttributeSchema::EOS]),
            0.0
        );
    }
}

#[cfg(test)]
mod learnability {
    use super::*;

    /// The generation stage conditions on the mean-pooled patches, so the
    /// attribute values must stay decodable after pooling. A matched
    /// filter with oracle patterns bounds what any captioner can reach.
    #[test]
    fn pooled_patterns_are_decodable() {
        let spec = CorpusSpec::default();
        let corpus = generate_corpus(&spec, 11).unwrap();
        let schema = &spec.schema;
        let patterns = schema.patterns(11);
        let mut correct = 0usize;
        let mut correct_patch = 0usize;
        let mut total = 0usize;
        for img in corpus.unlabeled.iter().take(300) {
            let attrs = corpus.attrs_of(img.identity_id);
            let pooled = img.patches.sum_axis(ndarray::Axis(0)) / schema.patch_count as f64;
            for a in 0..schema.attribute_count {
                let decode = |x: &[f64]| {
                    (0..schema.values_per_attribute)
                        .max_by(|&v1, &v2| {
                            let s1: f64 = x.iter().zip(&patterns[a][v1]).map(|(x, p)| x * p).sum();
                            let s2: f64 = x.iter().zip(&patterns[a][v2]).map(|(x, p)| x * p).sum();
                            s1.partial_cmp(&s2).unwrap()
                        })
                        .unwrap()
                };
                if decode(pooled.as_slice().unwrap()) == attrs[a] {
                    correct += 1;
                }
                let row = img.patches.row(schema.designated_patch(a)).to_vec();
                if decode(&row) == attrs[a] {
                    correct_patch += 1;
                }
                total += 1;
            }
        }
        let pooled_acc = correct as f64 / total as f64;
        let patch_acc = correct_patch as f64 / total as f64;
        assert!(patch_acc > 0.99, "per-patch decoding degraded: {patch_acc}");
        assert!(pooled_acc > 0.85, "pooled decoding ceiling too low: {pooled_acc}");
    }
}
