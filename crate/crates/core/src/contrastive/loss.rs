//! Temperature-scaled contrastive objectives.
//!
//! The cross-projection loss is a sum of two directional terms: image
//! queries (through the optional head `f`) scored against language keys, and
//! language queries (through `g`) scored against image keys. With in-batch
//! negatives the keys are the other tower's live embeddings; in queue mode
//! the keys are the momentum towers' embeddings plus whatever the opposite
//! modality's queue holds, and no gradient reaches the key side.

use crate::encoders::Mlp;
use crate::tensor::{Tape, Tensor, Var};

use super::queue::NegativeQueue;
use super::{ContrastiveError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossMode {
    InBatch,
    Queue,
}

/// Cross-projection loss configuration, including the optional projection
/// heads themselves (their parameters are trained).
#[derive(Debug, Clone)]
pub struct CxLossConfig {
    pub tau: f32,
    pub mode: LossMode,
    pub f_proj: Option<Mlp>,
    pub g_proj: Option<Mlp>,
    pub pred_loss_weight: f32,
}

impl CxLossConfig {
    pub fn in_batch(tau: f32) -> Self {
        CxLossConfig {
            tau,
            mode: LossMode::InBatch,
            f_proj: None,
            g_proj: None,
            pred_loss_weight: 0.0,
        }
    }

    pub fn queue(tau: f32) -> Self {
        CxLossConfig {
            mode: LossMode::Queue,
            ..CxLossConfig::in_batch(tau)
        }
    }
}

fn require_unit_rows(t: &Tensor, what: &'static str) -> Result<()> {
    let cols = *t.shape().last().unwrap_or(&0);
    if cols == 0 {
        return Err(ContrastiveError::Config(format!("{what}: empty rows")));
    }
    for row in t.data().chunks(cols) {
        let norm: f64 = row.iter().map(|v| (*v as f64) * (*v as f64)).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-3 {
            return Err(ContrastiveError::NotNormalized { norm: norm as f32 });
        }
    }
    Ok(())
}

/// Apply a projection head to a batch of embeddings, re-normalizing rows.
/// `None` is the identity.
pub fn apply_head(tape: &mut Tape, head: Option<&Mlp>, z: Var) -> Result<Var> {
    match head {
        None => Ok(z),
        Some(mlp) => {
            let y = mlp.apply(tape, z)?;
            Ok(tape.l2_normalize_rows(y)?)
        }
    }
}

/// InfoNCE with per-row positives and a shared negative set:
/// mean over rows of −log( e^{q·p/τ} / (e^{q·p/τ} + Σ_k e^{q·n_k/τ}) ).
pub fn info_nce_on_tape(
    tape: &mut Tape,
    queries: Var,
    positives: Var,
    negatives: Var,
    tau: f32,
) -> Result<Var> {
    if tau <= 0.0 {
        return Err(ContrastiveError::Config(format!(
            "tau must be positive, got {tau}"
        )));
    }
    let b = tape.shape(queries)[0];
    let pos = tape.rowwise_dot(queries, positives)?;
    let pos_col = tape.reshape(pos, vec![b, 1])?;
    let negs = tape.matmul_tb(queries, negatives)?;
    let logits = tape.concat_cols(&[pos_col, negs])?;
    let scaled = tape.scale(logits, 1.0 / tau)?;
    let targets = vec![0usize; b];
    let active = vec![true; b];
    Ok(tape.cross_entropy_rows(scaled, &targets, &active)?)
}

/// In-batch InfoNCE: row i of `queries` is positive with row i of `keys`,
/// and every other row serves as a negative.
pub fn info_nce_in_batch_on_tape(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    tau: f32,
) -> Result<Var> {
    let b = tape.shape(queries)[0];
    if b < 2 {
        return Err(ContrastiveError::BatchTooSmall { batch: b });
    }
    let logits = tape.matmul_tb(queries, keys)?;
    let scaled = tape.scale(logits, 1.0 / tau)?;
    let targets: Vec<usize> = (0..b).collect();
    let active = vec![true; b];
    Ok(tape.cross_entropy_rows(scaled, &targets, &active)?)
}

/// Standalone InfoNCE over concrete embeddings (rows must be unit-norm).
pub fn info_nce(queries: &Tensor, positives: &Tensor, negatives: &Tensor, tau: f32) -> Result<f64> {
    require_unit_rows(queries, "queries")?;
    require_unit_rows(positives, "positives")?;
    require_unit_rows(negatives, "negatives")?;
    if negatives.shape()[0] == 0 {
        return Err(ContrastiveError::Config("need at least one negative".into()));
    }
    let mut tape = Tape::new();
    let q = tape.leaf(queries);
    let p = tape.leaf(positives);
    let n = tape.leaf(negatives);
    let loss = info_nce_on_tape(&mut tape, q, p, n, tau)?;
    Ok(tape.scalar_value(loss))
}

/// Standalone in-batch InfoNCE over concrete embeddings.
pub fn info_nce_in_batch(queries: &Tensor, keys: &Tensor, tau: f32) -> Result<f64> {
    require_unit_rows(queries, "queries")?;
    require_unit_rows(keys, "keys")?;
    let mut tape = Tape::new();
    let q = tape.leaf(queries);
    let k = tape.leaf(keys);
    let loss = info_nce_in_batch_on_tape(&mut tape, q, k, tau)?;
    Ok(tape.scalar_value(loss))
}

/// Everything one cross-projection evaluation needs on the tape.
pub struct CxTapeInputs<'a> {
    pub image_q: Var,
    pub lang_q: Var,
    /// Momentum-tower embeddings; required in queue mode.
    pub image_k: Option<Var>,
    pub lang_k: Option<Var>,
    /// Queue snapshots registered as constants; `None` when empty.
    pub image_queue: Option<Var>,
    pub lang_queue: Option<Var>,
    pub f_proj: Option<&'a Mlp>,
    pub g_proj: Option<&'a Mlp>,
}

/// Cross-projection loss: InfoNCE(f(image) vs language keys) +
/// InfoNCE(g(language) vs image keys).
pub fn cx_loss_on_tape(
    tape: &mut Tape,
    mode: LossMode,
    tau: f32,
    inputs: CxTapeInputs<'_>,
) -> Result<Var> {
    let fq = apply_head(tape, inputs.f_proj, inputs.image_q)?;
    let gq = apply_head(tape, inputs.g_proj, inputs.lang_q)?;
    let (lang_keys, image_keys) = match mode {
        LossMode::InBatch => (inputs.lang_q, inputs.image_q),
        LossMode::Queue => {
            let lang_k = inputs.lang_k.ok_or_else(|| {
                ContrastiveError::Config("queue mode requires momentum embeddings".into())
            })?;
            let image_k = inputs.image_k.ok_or_else(|| {
                ContrastiveError::Config("queue mode requires momentum embeddings".into())
            })?;
            let lang_keys = match inputs.lang_queue {
                Some(q) => tape.concat_rows(&[lang_k, q])?,
                None => lang_k,
            };
            let image_keys = match inputs.image_queue {
                Some(q) => tape.concat_rows(&[image_k, q])?,
                None => image_k,
            };
            (lang_keys, image_keys)
        }
    };
    let img_to_lang = info_nce_in_batch_on_tape(tape, fq, lang_keys, tau)?;
    let lang_to_img = info_nce_in_batch_on_tape(tape, gq, image_keys, tau)?;
    Ok(tape.add(img_to_lang, lang_to_img)?)
}

/// Standalone cross-projection loss over concrete embeddings.
///
/// `momentum_embeddings` carries the key towers' (image, language) batch
/// embeddings and is required in queue mode; underfull or empty queues
/// contribute whatever they hold.
pub fn cx_loss(
    image_z: &Tensor,
    lang_z: &Tensor,
    cfg: &CxLossConfig,
    queues: Option<(&NegativeQueue, &NegativeQueue)>,
    momentum_embeddings: Option<(&Tensor, &Tensor)>,
) -> Result<f64> {
    require_unit_rows(image_z, "image embeddings")?;
    require_unit_rows(lang_z, "language embeddings")?;
    let mut tape = Tape::new();
    let image_q = tape.leaf(image_z);
    let lang_q = tape.leaf(lang_z);
    let (image_k, lang_k) = match momentum_embeddings {
        Some((i, l)) => (Some(tape.leaf(i)), Some(tape.leaf(l))),
        None => (None, None),
    };
    let (image_queue, lang_queue) = match queues {
        Some((iq, lq)) => {
            if cfg.mode == LossMode::Queue && (iq.dim() != lang_z.shape()[1]) {
                return Err(ContrastiveError::QueueDim {
                    expected: lang_z.shape()[1],
                    got: vec![iq.dim()],
                });
            }
            let to_var = |tape: &mut Tape, q: &NegativeQueue| -> Result<Option<Var>> {
                if q.is_empty() {
                    Ok(None)
                } else {
                    let snap = q.snapshot();
                    Ok(Some(tape.constant(
                        snap.data().to_vec(),
                        snap.shape().to_vec(),
                    )?))
                }
            };
            (to_var(&mut tape, iq)?, to_var(&mut tape, lq)?)
        }
        None => (None, None),
    };
    if cfg.mode == LossMode::Queue && momentum_embeddings.is_none() {
        return Err(ContrastiveError::Config(
            "queue mode requires momentum embeddings".into(),
        ));
    }
    let loss = cx_loss_on_tape(
        &mut tape,
        cfg.mode,
        cfg.tau,
        CxTapeInputs {
            image_q,
            lang_q,
            image_k,
            lang_k,
            image_queue,
            lang_queue,
            f_proj: cfg.f_proj.as_ref(),
            g_proj: cfg.g_proj.as_ref(),
        },
    )?;
    Ok(tape.scalar_value(loss))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(v: &[f32]) -> Vec<f32> {
        let n: f32 = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn rows(rows: &[&[f32]]) -> Tensor {
        let d = rows[0].len();
        let mut data = Vec::new();
        for r in rows {
            data.extend(unit(r));
        }
        Tensor::new(data, vec![rows.len(), d]).unwrap()
    }

    #[test]
    fn all_equal_similarities_give_ln_k_plus_one() {
        // duplicate vectors: positive and negatives all score 1
        for k in [1usize, 7, 255] {
            let q = rows(&[&[1.0, 0.0]]);
            let p = rows(&[&[1.0, 0.0]]);
            let negs: Vec<Vec<f32>> = (0..k).map(|_| vec![1.0, 0.0]).collect();
            let neg_refs: Vec<&[f32]> = negs.iter().map(|v| v.as_slice()).collect();
            let n = rows(&neg_refs);
            let loss = info_nce(&q, &p, &n, 0.07).unwrap();
            let want = ((k + 1) as f64).ln();
            assert!((loss - want).abs() < 1e-6, "K={k}: {loss} vs {want}");
        }
    }

    #[test]
    fn worked_two_negative_value() {
        // q·p/τ = 2 with two negatives at similarity 0:
        // loss = ln(1 + 2e^{-2})
        let tau = 0.5f32;
        let q = rows(&[&[1.0, 0.0]]);
        let p = rows(&[&[1.0, 0.0]]); // q·p = 1, /τ = 2
        let n = rows(&[&[0.0, 1.0], &[0.0, -1.0]]);
        let loss = info_nce(&q, &p, &n, tau).unwrap();
        let want = (1.0 + 2.0 * (-2.0f64).exp()).ln();
        assert!((loss - want).abs() < 1e-5, "{loss} vs {want}");
        assert!((loss - 0.23954).abs() < 2e-5);
    }

    #[test]
    fn perfect_separation_saturates_to_zero() {
        // q·p/τ = 50, negatives at −50
        let tau = 0.02f32;
        let q = rows(&[&[1.0, 0.0]]);
        let p = rows(&[&[1.0, 0.0]]);
        let n = rows(&[&[-1.0, 0.0]]);
        let loss = info_nce(&q, &p, &n, tau).unwrap();
        assert!(loss < 1e-6, "{loss}");
    }

    #[test]
    fn negative_permutation_invariance() {
        let q = rows(&[&[0.6, 0.8]]);
        let p = rows(&[&[0.8, 0.6]]);
        let n1 = rows(&[&[1.0, 0.0], &[0.0, 1.0], &[-0.6, 0.8]]);
        let n2 = rows(&[&[-0.6, 0.8], &[1.0, 0.0], &[0.0, 1.0]]);
        let a = info_nce(&q, &p, &n1, 0.07).unwrap();
        let b = info_nce(&q, &p, &n2, 0.07).unwrap();
        assert!((a - b).abs() < 1e-7);
    }

    #[test]
    fn loss_is_nonnegative_and_ln_k1_only_when_uniform() {
        let q = rows(&[&[1.0, 0.0]]);
        let p = rows(&[&[0.8, 0.6]]);
        let n = rows(&[&[0.0, 1.0]]);
        let loss = info_nce(&q, &p, &n, 0.07).unwrap();
        assert!(loss >= 0.0);
        assert!((loss - (2f64).ln()).abs() > 1e-3);
    }

    #[test]
    fn rejects_unnormalized_rows() {
        let q = Tensor::new(vec![2.0, 0.0], vec![1, 2]).unwrap();
        let p = rows(&[&[1.0, 0.0]]);
        let n = rows(&[&[0.0, 1.0]]);
        assert!(matches!(
            info_nce(&q, &p, &n, 0.07),
            Err(ContrastiveError::NotNormalized { .. })
        ));
    }

    #[test]
    fn cx_identical_orthogonal_pairs_saturate() {
        // image and language embeddings identical row-wise, rows orthogonal:
        // each direction is ln(1 + e^{−1/τ}); the total is twice that.
        let z = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let cfg = CxLossConfig::in_batch(0.07);
        let loss = cx_loss(&z, &z, &cfg, None, None).unwrap();
        let per_dir = (1.0 + (-1.0f64 / 0.07).exp()).ln();
        assert!((loss - 2.0 * per_dir).abs() < 1e-6, "{loss}");
        assert!(loss < 1.3e-6);
    }

    #[test]
    fn cx_is_symmetric_under_side_swap() {
        let a = rows(&[&[0.6, 0.8], &[1.0, 0.0]]);
        let b = rows(&[&[0.0, 1.0], &[0.8, 0.6]]);
        let cfg = CxLossConfig::in_batch(0.07);
        let l1 = cx_loss(&a, &b, &cfg, None, None).unwrap();
        let l2 = cx_loss(&b, &a, &cfg, None, None).unwrap();
        assert!((l1 - l2).abs() < 1e-6);
    }

    #[test]
    fn cx_in_batch_needs_two_pairs() {
        let z = rows(&[&[1.0, 0.0]]);
        let cfg = CxLossConfig::in_batch(0.07);
        assert!(matches!(
            cx_loss(&z, &z, &cfg, None, None),
            Err(ContrastiveError::BatchTooSmall { .. })
        ));
    }

    #[test]
    fn cx_queue_mode_with_empty_queues_falls_back_to_in_batch_keys() {
        let img = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let lang = rows(&[&[0.8, 0.6], &[0.6, -0.8]]);
        let cfg = CxLossConfig::queue(0.07);
        let iq = NegativeQueue::new(8, 2).unwrap();
        let lq = NegativeQueue::new(8, 2).unwrap();
        // momentum embeddings equal the live ones: the loss must match the
        // in-batch value computed on the same keys
        let queue_loss = cx_loss(&img, &lang, &cfg, Some((&iq, &lq)), Some((&img, &lang))).unwrap();
        let in_batch = cx_loss(&img, &lang, &CxLossConfig::in_batch(0.07), None, None).unwrap();
        assert!((queue_loss - in_batch).abs() < 1e-7);
    }

    #[test]
    fn cx_queue_mode_requires_momentum_embeddings() {
        let z = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let cfg = CxLossConfig::queue(0.07);
        let iq = NegativeQueue::new(8, 2).unwrap();
        let lq = NegativeQueue::new(8, 2).unwrap();
        assert!(cx_loss(&z, &z, &cfg, Some((&iq, &lq)), None).is_err());
    }
}
