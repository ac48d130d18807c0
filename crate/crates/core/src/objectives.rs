//! Retrieval-stage training losses.
//!
//! ITC is a symmetric InfoNCE over the global classification features with
//! a learnable temperature; batches may repeat identities, in which case
//! the targets are soft (uniform over same-identity columns). ITM is a
//! binary match/mismatch cross-entropy over the fused features of the
//! positive pairs plus one mined hard negative per positive per direction,
//! sampled proportionally to the contrastive similarities. The training
//! objective is their unweighted sum, computed on masked features whenever
//! mask outcomes are supplied.

use crate::corpus::PairedSample;
use crate::encoder::{
    self, embed_image, embed_text, encode_image, encode_text, fuse, EmbeddingSequence,
    EncoderParams,
};
use crate::masking::MaskOutcome;
use crate::rng::stream_rng;
use crate::tape::{Binder, Matrix, NodeId, Tape};
use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("mask outcomes ({0}) do not match batch size ({1})")]
    MaskCountMismatch(usize, usize),
    #[error("encoder error: {0}")]
    Encoder(#[from] crate::encoder::EncoderError),
}

/// Soft target matrix: row i is uniform over columns sharing identity i.
fn identity_targets(ids: &[usize]) -> Matrix {
    let b = ids.len();
    let mut q = Matrix::zeros((b, b));
    for i in 0..b {
        let same: Vec<usize> = (0..b).filter(|&j| ids[j] == ids[i]).collect();
        let w = 1.0 / same.len() as f64;
        for j in same {
            q[[i, j]] = w;
        }
    }
    q
}

/// Contrastive loss node over cls feature rows already on the tape.
/// `inv_tau` is a 1×1 node holding 1/τ so the temperature can be learned.
pub fn itc_loss_node(
    tape: &mut Tape,
    v_cls: NodeId,
    t_cls: NodeId,
    inv_tau: NodeId,
    identity_ids: &[usize],
) -> NodeId {
    let b = identity_ids.len();
    let v_n = tape.row_l2_normalize(v_cls);
    let t_n = tape.row_l2_normalize(t_cls);
    let sim = tape.matmul_nt(v_n, t_n); // rows: images, cols: texts
    let logits = tape.scale_by_node(sim, inv_tau);
    let q = identity_targets(identity_ids);

    let lsm_i2t = tape.row_log_softmax(logits);
    let picked_i2t = tape.mul_const(lsm_i2t, q.clone() * (-1.0 / b as f64));
    let loss_i2t = tape.sum_all(picked_i2t);

    let logits_t = tape.transpose(logits);
    let lsm_t2i = tape.row_log_softmax(logits_t);
    // identity equality is symmetric, so the same target matrix applies
    let picked_t2i = tape.mul_const(lsm_t2i, q * (-1.0 / b as f64));
    let loss_t2i = tape.sum_all(picked_t2i);

    let sum = tape.add(loss_i2t, loss_t2i);
    tape.scale(sum, 0.5)
}

/// Contrastive loss over plain feature matrices (rows are normalized
/// internally). The B = 1 case degenerates to zero by normalization.
pub fn itc_loss(
    f_v_cls: &Matrix,
    f_t_cls: &Matrix,
    tau: f64,
    identity_ids: &[usize],
) -> Result<f64, ObjectiveError> {
    if f_v_cls.nrows() == 0 || f_v_cls.nrows() != f_t_cls.nrows() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if tau <= 0.0 {
        return Err(ObjectiveError::BadTemperature(tau));
    }
    let mut tape = Tape::new();
    let v = tape.leaf(f_v_cls.clone());
    let t = tape.leaf(f_t_cls.clone());
    let inv_tau = tape.leaf(Matrix::from_elem((1, 1), 1.0 / tau));
    let node = itc_loss_node(&mut tape, v, t, inv_tau, identity_ids);
    Ok(tape.scalar(node))
}

/// One forward pass over a batch: per-sample embeddings and encoded
/// features (masked when outcomes are given), with the cls rows stacked
/// into B×d nodes.
pub struct BatchForward {
    pub v_cls: NodeId,
    pub t_cls: NodeId,
    pub text_embs: Vec<EmbeddingSequence>,
    pub image_feats: Vec<EmbeddingSequence>,
    pub identity_ids: Vec<usize>,
}

pub fn batch_forward(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &EncoderParams,
    pairs: &[PairedSample],
    masks: Option<&[MaskOutcome]>,
) -> Result<BatchForward, ObjectiveError> {
    if pairs.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    if let Some(m) = masks {
        if m.len() != pairs.len() {
            return Err(ObjectiveError::MaskCountMismatch(m.len(), pairs.len()));
        }
    }
    let mut text_embs = Vec::with_capacity(pairs.len());
    let mut image_feats = Vec::with_capacity(pairs.len());
    let mut v_rows = Vec::with_capacity(pairs.len());
    let mut t_rows = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let mask = masks.map(|m| &m[i]);
        let img_emb = embed_image(tape, binder, params, &pair.image, mask)?;
        let img_enc = encode_image(tape, binder, params, img_emb)?;
        let txt_emb = embed_text(tape, binder, params, &pair.caption, mask)?;
        let txt_enc = encode_text(tape, binder, params, txt_emb)?;
        v_rows.push(encoder::cls_row(tape, img_enc));
        t_rows.push(encoder::cls_row(tape, txt_enc));
        text_embs.push(txt_emb);
        image_feats.push(img_enc);
    }
    Ok(BatchForward {
        v_cls: tape.concat_rows(&v_rows),
        t_cls: tape.concat_rows(&t_rows),
        text_embs,
        image_feats,
        identity_ids: pairs.iter().map(|p| p.image.identity_id).collect(),
    })
}

/// Samples one negative index for each row of `weights` (same-identity
/// columns carry weight zero). Returns None when no row has a valid
/// candidate.
fn sample_negative(weights: &[f64], rng: &mut impl Rng) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    // covers the all-zero case and non-finite weights from diverged params
    if !(total > 0.0) || !total.is_finite() {
        return None;
    }
    let mut draw = rng.gen_range(0.0..total);
    for (j, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if draw < w {
                return Some(j);
            }
            draw -= w;
        }
    }
    weights.iter().rposition(|&w| w > 0.0)
}

fn negative_weights(
    sims: &Matrix,
    row: usize,
    transpose: bool,
    ids: &[usize],
    tau: f64,
    hard: bool,
) -> Vec<f64> {
    let b = ids.len();
    let mut raw: Vec<f64> = (0..b)
        .map(|j| if transpose { sims[[j, row]] } else { sims[[row, j]] })
        .collect();
    let max = raw
        .iter()
        .enumerate()
        .filter(|(j, _)| ids[*j] != ids[row])
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    for (j, w) in raw.iter_mut().enumerate() {
        if ids[j] == ids[row] {
            *w = 0.0;
        } else if hard {
            *w = ((*w - max) / tau).exp();
        } else {
            *w = 1.0;
        }
    }
    raw
}

/// Match/mismatch cross-entropy over fused features: every positive pair
/// plus one mined negative per positive per direction. Returns None (with
/// a warning) when the batch holds a single identity.
pub fn itm_loss_node(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &EncoderParams,
    fwd: &BatchForward,
    hard_negatives: bool,
    seed: u64,
) -> Result<Option<NodeId>, ObjectiveError> {
    let b = fwd.identity_ids.len();
    let ids = &fwd.identity_ids;
    if ids.iter().all(|&id| id == ids[0]) {
        log::warn!("itm skipped: batch holds a single identity, no valid negatives");
        return Ok(None);
    }

    // detached similarities for mining
    let v = tape.value(fwd.v_cls).clone();
    let t = tape.value(fwd.t_cls).clone();
    let normalize = |m: &Matrix| {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            row.mapv_inplace(|x| x / n);
        }
        out
    };
    let sims = normalize(&v).dot(&normalize(&t).t());
    let tau = params.tau_value();

    let mut rng = stream_rng(seed, "itm-negatives", 0);
    let mut picks = Vec::with_capacity(3 * b);
    for i in 0..b {
        // positive pair
        picks.push((i, i, true));
        // hard negative text for image i (row of sims)
        let w = negative_weights(&sims, i, false, ids, tau, hard_negatives);
        if let Some(j) = sample_negative(&w, &mut rng) {
            picks.push((i, j, false));
        }
        // hard negative image for text i (column of sims)
        let w = negative_weights(&sims, i, true, ids, tau, hard_negatives);
        if let Some(j) = sample_negative(&w, &mut rng) {
            picks.push((j, i, false));
        }
    }

    let mut terms = Vec::with_capacity(picks.len());
    for &(img_idx, txt_idx, positive) in &picks {
        let fused = fuse(
            tape,
            binder,
            params,
            fwd.text_embs[txt_idx],
            fwd.image_feats[img_idx],
        )?;
        let logits = encoder::itm_logits(tape, binder, params, fused);
        let lsm = tape.row_log_softmax(logits);
        let pick = if positive {
            Matrix::from_shape_vec((1, 2), vec![0.0, -1.0]).expect("static shape")
        } else {
            Matrix::from_shape_vec((1, 2), vec![-1.0, 0.0]).expect("static shape")
        };
        let picked = tape.mul_const(lsm, pick);
        terms.push(tape.sum_all(picked));
    }
    let stacked = tape.concat_rows(&terms);
    Ok(Some(tape.mean_all(stacked)))
}

/// Scalar ITM loss over a plain batch, without masking.
pub fn itm_loss(
    params: &EncoderParams,
    pairs: &[PairedSample],
    hard_negatives: bool,
    seed: u64,
) -> Result<Option<f64>, ObjectiveError> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let fwd = batch_forward(&mut tape, &mut binder, params, pairs, None)?;
    let node = itm_loss_node(&mut tape, &mut binder, params, &fwd, hard_negatives, seed)?;
    Ok(node.map(|n| tape.scalar(n)))
}

/// The combined loss node plus its components' values.
pub struct TotalLoss {
    pub node: NodeId,
    pub itc_value: f64,
    pub itm_value: Option<f64>,
}

impl TotalLoss {
    pub fn total_value(&self) -> f64 {
        self.itc_value + self.itm_value.unwrap_or(0.0)
    }
}

/// L = L_itc + L_itm on (optionally masked) features.
pub fn total_loss_node(
    tape: &mut Tape,
    binder: &mut Binder,
    params: &EncoderParams,
    pairs: &[PairedSample],
    masks: Option<&[MaskOutcome]>,
    hard_negatives: bool,
    seed: u64,
) -> Result<TotalLoss, ObjectiveError> {
    let tau = params.tau_value();
    if tau <= 0.0 {
        return Err(ObjectiveError::BadTemperature(tau));
    }
    let fwd = batch_forward(tape, binder, params, pairs, masks)?;
    let tau_node = binder.bind(tape, &params.tau);
    let inv_tau = tape.recip(tau_node);
    let itc = itc_loss_node(tape, fwd.v_cls, fwd.t_cls, inv_tau, &fwd.identity_ids);
    let itm = itm_loss_node(tape, binder, params, &fwd, hard_negatives, seed)?;
    let (node, itm_value) = match itm {
        Some(itm_node) => (tape.add(itc, itm_node), Some(tape.scalar(itm_node))),
        None => (itc, None),
    };
    Ok(TotalLoss {
        node,
        itc_value: tape.scalar(itc),
        itm_value,
    })
}

/// Scalar total loss; convenience wrapper over [`total_loss_node`].
pub fn total_loss(
    params: &EncoderParams,
    pairs: &[PairedSample],
    masks: Option<&[MaskOutcome]>,
    hard_negatives: bool,
    seed: u64,
) -> Result<TotalLoss, ObjectiveError> {
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    total_loss_node(&mut tape, &mut binder, params, pairs, masks, hard_negatives, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, CorpusSpec};
    use crate::encoder::EncoderConfig;
    use crate::optim::ParamSet;
    use crate::rng::stream_rng;

    fn unit_rows(rows: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = stream_rng(seed, "rows", 0);
        let mut m = Matrix::from_shape_fn((rows, d), |_| rng.gen_range(-1.0..1.0));
        for mut row in m.rows_mut() {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.mapv_inplace(|x| x / n);
        }
        m
    }

    #[test]
    fn single_candidate_batch_has_zero_loss() {
        let f = unit_rows(1, 8, 1);
        let loss = itc_loss(&f, &f, 0.07, &[0]).unwrap();
        assert!(loss.abs() < 1e-12);
    }

    #[test]
    fn uniform_similarities_give_log_batch_size() {
        // all-equal similarities: softmax is uniform, loss = ln B
        let f_v = Matrix::from_elem((4, 8), 0.5);
        let f_t = Matrix::from_elem((4, 8), 0.25);
        let loss = itc_loss(&f_v, &f_t, 0.07, &[0, 1, 2, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-9, "{loss}");
    }

    #[test]
    fn saturated_diagonal_drives_loss_to_zero() {
        // orthonormal matched rows at tau = 0.07: diagonal logit 1/tau,
        // off-diagonal 0
        let mut f = Matrix::zeros((4, 8));
        for i in 0..4 {
            f[[i, i]] = 1.0;
        }
        let loss = itc_loss(&f, &f, 0.07, &[0, 1, 2, 3]).unwrap();
        assert!(loss < 0.01, "{loss}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let f = unit_rows(2, 4, 2);
        assert!(matches!(
            itc_loss(&Matrix::zeros((0, 4)), &Matrix::zeros((0, 4)), 0.07, &[]),
            Err(ObjectiveError::EmptyBatch)
        ));
        assert!(matches!(
            itc_loss(&f, &f, 0.0, &[0, 1]),
            Err(ObjectiveError::BadTemperature(_))
        ));
    }

    #[test]
    fn duplicate_identities_use_soft_targets() {
        // two samples of the same identity and orthogonal features: each
        // direction's row target is uniform over the two same-id columns
        let mut f = Matrix::zeros((2, 4));
        f[[0, 0]] = 1.0;
        f[[1, 1]] = 1.0;
        let tau = 0.5;
        let loss = itc_loss(&f, &f, tau, &[7, 7]).unwrap();
        // logits row 0: [1/tau, 0]; soft target [0.5, 0.5]
        let z = 1.0 / tau;
        let lse = (z.exp() + 1.0).ln();
        let expected = -0.5 * ((z - lse) + (0.0 - lse));
        assert!((loss - expected).abs() < 1e-9, "{loss} vs {expected}");
    }

    #[test]
    fn itc_is_invariant_under_joint_rotation() {
        let f_v = unit_rows(5, 8, 3);
        let f_t = unit_rows(5, 8, 4);
        let ids = [0, 1, 2, 1, 4];
        let base = itc_loss(&f_v, &f_t, 0.07, &ids).unwrap();

        // random orthogonal matrix via Gram-Schmidt
        let mut rng = stream_rng(5, "rot", 0);
        let mut q = Matrix::from_shape_fn((8, 8), |_| rng.gen_range(-1.0..1.0));
        for i in 0..8 {
            for j in 0..i {
                let proj: f64 = (0..8).map(|k| q[[i, k]] * q[[j, k]]).sum();
                for k in 0..8 {
                    let qj = q[[j, k]];
                    q[[i, k]] -= proj * qj;
                }
            }
            let n: f64 = (0..8).map(|k| q[[i, k]] * q[[i, k]]).sum::<f64>().sqrt();
            for k in 0..8 {
                q[[i, k]] /= n;
            }
        }
        let rotated = itc_loss(&f_v.dot(&q), &f_t.dot(&q), 0.07, &ids).unwrap();
        assert!((base - rotated).abs() < 1e-6, "{base} vs {rotated}");
    }

    #[test]
    fn itc_decreases_when_positive_similarity_rises() {
        let f_v = unit_rows(4, 8, 6);
        let f_t = unit_rows(4, 8, 7);
        let ids = [0, 1, 2, 3];
        let base = itc_loss(&f_v, &f_t, 0.07, &ids).unwrap();
        // nudge text row 0 toward image row 0
        let mut better = f_t.clone();
        for k in 0..8 {
            better[[0, k]] = 0.7 * better[[0, k]] + 0.3 * f_v[[0, k]];
        }
        let improved = itc_loss(&f_v, &better, 0.07, &ids).unwrap();
        assert!(improved < base, "{improved} !< {base}");
    }

    #[test]
    fn itc_is_invariant_under_batch_permutation() {
        let f_v = unit_rows(5, 8, 8);
        let f_t = unit_rows(5, 8, 9);
        let ids = [0, 1, 2, 1, 4];
        let base = itc_loss(&f_v, &f_t, 0.07, &ids).unwrap();
        let perm = [3usize, 0, 4, 1, 2];
        let mut pv = Matrix::zeros((5, 8));
        let mut pt = Matrix::zeros((5, 8));
        let mut pids = [0usize; 5];
        for (new, &old) in perm.iter().enumerate() {
            pv.row_mut(new).assign(&f_v.row(old));
            pt.row_mut(new).assign(&f_t.row(old));
            pids[new] = ids[old];
        }
        let permuted = itc_loss(&pv, &pt, 0.07, &pids).unwrap();
        assert!((base - permuted).abs() < 1e-9);
    }

    // --- ITM ---

    fn toy_setup(seed: u64) -> (EncoderParams, Vec<PairedSample>) {
        let spec = CorpusSpec {
            train_identities: 8,
            test_identities: 2,
            labeled_ratio: 1.0,
            ..CorpusSpec::default()
        };
        let corpus = generate_corpus(&spec, seed).unwrap();
        let mut params =
            EncoderParams::init(&corpus.spec.schema, &EncoderConfig::default(), seed + 1);
        let mut rng = stream_rng(seed + 2, "jitter", 0);
        params.for_each_mut(&mut |_, m| m.mapv_inplace(|x| x + 0.1 * rng.gen_range(-1.0..1.0)));
        (params, corpus.labeled[..6].to_vec())
    }

    #[test]
    fn itm_zero_logits_costs_ln_two() {
        let (mut params, pairs) = toy_setup(41);
        params.itm_w.fill(0.0);
        params.itm_b.fill(0.0);
        let loss = itm_loss(&params, &pairs, true, 1).unwrap().unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12, "{loss}");
    }

    #[test]
    fn itm_saturated_correct_head_costs_nothing() {
        // BCE aggregation at a ±20 logit margin: correct positives and
        // correct negatives both cost under 1e-6.
        let logits = Matrix::from_shape_vec((1, 2), vec![-20.0, 20.0]).unwrap();
        let mut tape = Tape::new();
        let l = tape.leaf(logits);
        let lsm = tape.row_log_softmax(l);
        let pick = Matrix::from_shape_vec((1, 2), vec![0.0, -1.0]).unwrap();
        let picked = tape.mul_const(lsm, pick);
        let loss_node = tape.sum_all(picked);
        let pos_loss = tape.scalar(loss_node);
        assert!(pos_loss < 1e-6);

        let neg_logits = Matrix::from_shape_vec((1, 2), vec![20.0, -20.0]).unwrap();
        let mut tape = Tape::new();
        let l = tape.leaf(neg_logits);
        let lsm = tape.row_log_softmax(l);
        let pick = Matrix::from_shape_vec((1, 2), vec![-1.0, 0.0]).unwrap();
        let picked = tape.mul_const(lsm, pick);
        let loss_node = tape.sum_all(picked);
        assert!(tape.scalar(loss_node) < 1e-6);
    }

    #[test]
    fn itm_skips_single_identity_batches() {
        let (params, pairs) = toy_setup(43);
        let same_id: Vec<PairedSample> = pairs
            .iter()
            .filter(|p| p.image.identity_id == pairs[0].image.identity_id)
            .cloned()
            .collect();
        if same_id.len() >= 2 {
            let out = itm_loss(&params, &same_id, true, 1).unwrap();
            assert!(out.is_none());
        }
        // mixed batch does not skip
        let out = itm_loss(&params, &pairs, true, 1).unwrap();
        assert!(out.is_some());
    }

    #[test]
    fn itm_mines_among_other_identities_only() {
        let (_, pairs) = toy_setup(44);
        let ids: Vec<usize> = pairs.iter().map(|p| p.image.identity_id).collect();
        let sims = Matrix::from_shape_fn((ids.len(), ids.len()), |(r, c)| {
            ((r * 31 + c * 17) % 13) as f64 / 13.0
        });
        for i in 0..ids.len() {
            for hard in [true, false] {
                let w = negative_weights(&sims, i, false, &ids, 0.07, hard);
                for (j, &wj) in w.iter().enumerate() {
                    if ids[j] == ids[i] {
                        assert_eq!(wj, 0.0, "same-identity column got weight");
                    } else {
                        assert!(wj > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn total_is_sum_of_components() {
        let (params, pairs) = toy_setup(45);
        let out = total_loss(&params, &pairs, None, true, 3).unwrap();
        assert!(
            (out.total_value() - (out.itc_value + out.itm_value.unwrap())).abs() < 1e-12
        );
        // and the node value equals the sum of the component values
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let tl = total_loss_node(&mut tape, &mut binder, &params, &pairs, None, true, 3).unwrap();
        let node_value = tape.scalar(tl.node);
        assert!((node_value - tl.total_value()).abs() < 1e-12);
    }

    #[test]
    fn masked_and_unmasked_totals_coincide_when_masking_disabled() {
        use crate::masking::{mask_batch, MaskConfig};
        let (params, pairs) = toy_setup(46);
        let caps: Vec<&crate::corpus::Caption> = pairs.iter().map(|p| &p.caption).collect();
        let outcomes = mask_batch(
            &MaskConfig::disabled(),
            &params.schema,
            &caps,
            params.schema.patch_count,
            params.config.width,
            9,
        )
        .unwrap();
        let masked = total_loss(&params, &pairs, Some(&outcomes), true, 3).unwrap();
        let plain = total_loss(&params, &pairs, None, true, 3).unwrap();
        assert_eq!(masked.total_value(), plain.total_value());
    }

    #[test]
    fn masking_changes_the_loss() {
        use crate::masking::{mask_batch, MaskConfig};
        let (params, pairs) = toy_setup(47);
        let caps: Vec<&crate::corpus::Caption> = pairs.iter().map(|p| &p.caption).collect();
        let outcomes = mask_batch(
            &MaskConfig::default(),
            &params.schema,
            &caps,
            params.schema.patch_count,
            params.config.width,
            9,
        )
        .unwrap();
        let masked = total_loss(&params, &pairs, Some(&outcomes), true, 3).unwrap();
        let plain = total_loss(&params, &pairs, None, true, 3).unwrap();
        assert_ne!(masked.total_value(), plain.total_value());
    }
}
