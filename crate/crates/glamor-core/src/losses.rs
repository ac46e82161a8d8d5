//! Triplet loss with batch-hard mining, label-smoothed softmax loss, and
//! their unweighted combination, all with analytic gradients w.r.t. the
//! embeddings and logits.
//!
//! Mining compares unsquared Euclidean distances; the loss itself uses
//! squared distances. The two agree on argmin/argmax by monotonicity.

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Label-smoothing mode for the softmax loss.
///
/// `Explicit(eps)` is the standard convention: the true class gets `1 - eps`
/// and every other class `eps / (N - 1)`, so targets stay a distribution.
/// `OneOverN` reproduces the reciprocal form exactly as published: true class
/// `1 - 1/N`, every other class `+1/N` (those targets sum to `2 - 2/N`, not
/// 1, and the loss reflects that).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothing {
    None,
    Explicit(f64),
    OneOverN,
}

/// How per-anchor terms are reduced to one scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

/// Margin, smoothing, and identity count for the combined loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub smoothing: Smoothing,
    pub num_identities: usize,
    /// Clamp per-anchor triplet terms at zero. The unclamped form is kept
    /// for fidelity testing but diverges under optimization.
    pub use_hinge: bool,
    pub reduction: Reduction,
}

impl LossConfig {
    pub fn new(margin: f64, smoothing: Smoothing, num_identities: usize) -> Result<Self> {
        if margin < 0.0 {
            return Err(Error::config(format!("margin {margin} must be >= 0")));
        }
        if let Smoothing::Explicit(eps) = smoothing {
            if !(0.0..1.0).contains(&eps) {
                return Err(Error::config(format!("smoothing {eps} outside [0, 1)")));
            }
            let n = num_identities as f64;
            if num_identities >= 2 && eps >= (n - 1.0) / n {
                return Err(Error::config(format!(
                    "smoothing {eps} >= (N-1)/N leaves the true class without the maximal target"
                )));
            }
        }
        if num_identities == 0 {
            return Err(Error::config("num_identities must be positive"));
        }
        Ok(LossConfig {
            margin,
            smoothing,
            num_identities,
            use_hinge: true,
            reduction: Reduction::Mean,
        })
    }

    pub fn with_hinge(mut self, use_hinge: bool) -> Self {
        self.use_hinge = use_hinge;
        self
    }

    pub fn with_reduction(mut self, reduction: Reduction) -> Self {
        self.reduction = reduction;
        self
    }
}

/// One mined triplet: the anchor plus its hardest positive and negative.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnchorTriplet {
    pub anchor: usize,
    pub hardest_positive: usize,
    pub hardest_negative: usize,
    pub d_ap: f64,
    pub d_an: f64,
}

/// Batch-hard selection: exactly one triplet per anchor in the batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchHardResult {
    pub triplets: Vec<AnchorTriplet>,
}

/// Value and input gradients of the combined loss.
#[derive(Debug, Clone)]
pub struct LossValue {
    pub total: f64,
    pub triplet_part: f64,
    pub softmax_part: f64,
    pub embeddings_grad: Matrix,
    pub logits_grad: Matrix,
}

/// Triplet-loss fragment: scalar plus gradient w.r.t. every embedding row.
#[derive(Debug, Clone)]
pub struct TripletFragment {
    pub value: f64,
    pub embeddings_grad: Matrix,
}

/// Softmax-loss fragment: scalar plus gradient w.r.t. every logit row.
#[derive(Debug, Clone)]
pub struct SoftmaxFragment {
    pub value: f64,
    pub logits_grad: Matrix,
}

/// Symmetric Euclidean distance matrix with zero diagonal; the one-set view
/// of [`crate::reid::distance_matrix`], which owns the stable expanded-form
/// computation (radicand clamped at zero).
pub fn pairwise_distances(embeddings: &Matrix) -> Result<Matrix> {
    if embeddings.rows() < 2 {
        return Err(Error::shape("pairwise_distances needs at least 2 rows"));
    }
    crate::reid::distance_matrix(embeddings, embeddings)
}

/// Select, for every anchor, the farthest same-identity sample and the
/// nearest different-identity sample within the batch. Ties break toward the
/// lowest sample index.
pub fn batch_hard_mine(embeddings: &Matrix, identities: &[i64]) -> Result<BatchHardResult> {
    let rows = embeddings.rows();
    if identities.len() != rows {
        return Err(Error::shape(format!(
            "{} identities for {rows} embedding rows",
            identities.len()
        )));
    }
    if rows < 2 {
        return Err(Error::shape("mining needs at least 2 samples"));
    }
    let mut distinct: Vec<i64> = identities.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::SingleIdentityBatch);
    }
    for id in &distinct {
        if identities.iter().filter(|x| *x == id).count() < 2 {
            return Err(Error::UnminableIdentity {
                identity: id.to_string(),
            });
        }
    }
    let dist = pairwise_distances(embeddings)?;
    let mut triplets = Vec::with_capacity(rows);
    for a in 0..rows {
        let mut pos: Option<(usize, f64)> = None;
        let mut neg: Option<(usize, f64)> = None;
        for j in 0..rows {
            if j == a {
                continue;
            }
            let d = dist.get(a, j);
            if identities[j] == identities[a] {
                if pos.map(|(_, best)| d > best).unwrap_or(true) {
                    pos = Some((j, d));
                }
            } else if neg.map(|(_, best)| d < best).unwrap_or(true) {
                neg = Some((j, d));
            }
        }
        let (hardest_positive, d_ap) = pos.expect("validated: every identity has >= 2 instances");
        let (hardest_negative, d_an) = neg.expect("validated: >= 2 identities");
        triplets.push(AnchorTriplet {
            anchor: a,
            hardest_positive,
            hardest_negative,
            d_ap,
            d_an,
        });
    }
    Ok(BatchHardResult { triplets })
}

/// Triplet loss over mined pairs using squared distances:
/// per anchor `d_ap^2 - d_an^2 + margin`, hinged at zero when configured.
/// The selection is treated as constant; gradients flow only through the
/// selected anchor/positive/negative rows.
pub fn triplet_loss(
    embeddings: &Matrix,
    mined: &BatchHardResult,
    config: &LossConfig,
) -> Result<TripletFragment> {
    if mined.triplets.is_empty() {
        return Err(Error::shape("triplet_loss on empty mining result"));
    }
    let dim = embeddings.cols();
    let scale = match config.reduction {
        Reduction::Mean => 1.0 / mined.triplets.len() as f64,
        Reduction::Sum => 1.0,
    };
    let mut value = 0.0;
    let mut grad = Matrix::zeros(embeddings.rows(), dim);
    for t in &mined.triplets {
        let term = t.d_ap * t.d_ap - t.d_an * t.d_an + config.margin;
        let active = if config.use_hinge { term > 0.0 } else { true };
        value += if config.use_hinge { term.max(0.0) } else { term };
        if !active {
            continue;
        }
        for k in 0..dim {
            let ea = embeddings.get(t.anchor, k);
            let ep = embeddings.get(t.hardest_positive, k);
            let en = embeddings.get(t.hardest_negative, k);
            let d_pos = 2.0 * (ea - ep) * scale;
            let d_neg = 2.0 * (ea - en) * scale;
            grad.row_mut(t.anchor)[k] += d_pos - d_neg;
            grad.row_mut(t.hardest_positive)[k] -= d_pos;
            grad.row_mut(t.hardest_negative)[k] += d_neg;
        }
    }
    Ok(TripletFragment {
        value: value * scale,
        embeddings_grad: grad,
    })
}

/// Smoothed target row for one label under the configured mode.
pub fn smoothed_targets(label: usize, config: &LossConfig) -> Result<Vec<f64>> {
    let n = config.num_identities;
    if label >= n {
        return Err(Error::config(format!("label {label} >= num_identities {n}")));
    }
    let mut q = match config.smoothing {
        Smoothing::None => vec![0.0; n],
        Smoothing::Explicit(eps) => vec![eps / (n as f64 - 1.0); n],
        Smoothing::OneOverN => vec![1.0 / n as f64; n],
    };
    q[label] = match config.smoothing {
        Smoothing::None => 1.0,
        Smoothing::Explicit(eps) => 1.0 - eps,
        Smoothing::OneOverN => 1.0 - 1.0 / n as f64,
    };
    Ok(q)
}

/// Cross-entropy against smoothed targets, mean over the batch.
/// Log-probabilities are computed with max-subtracted log-sum-exp.
pub fn smoothed_softmax_loss(
    logits: &Matrix,
    labels: &[usize],
    config: &LossConfig,
) -> Result<SoftmaxFragment> {
    let (rows, cols) = (logits.rows(), logits.cols());
    if cols != config.num_identities {
        return Err(Error::shape(format!(
            "logits have {cols} columns, config expects {}",
            config.num_identities
        )));
    }
    if labels.len() != rows {
        return Err(Error::shape(format!(
            "{} labels for {rows} logit rows",
            labels.len()
        )));
    }
    if rows == 0 {
        return Err(Error::shape("smoothed_softmax_loss on empty batch"));
    }
    let inv_batch = 1.0 / rows as f64;
    let mut value = 0.0;
    let mut grad = Matrix::zeros(rows, cols);
    for r in 0..rows {
        let q = smoothed_targets(labels[r], config)?;
        let target_mass: f64 = q.iter().sum();
        let row = logits.row(r);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let sum_exp: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let lse = max + sum_exp.ln();
        // L = sum_i q_i (lse - z_i)
        let mut row_loss = 0.0;
        for (j, z) in row.iter().enumerate() {
            row_loss += q[j] * (lse - z);
        }
        value += row_loss;
        for (j, z) in row.iter().enumerate() {
            let p = (z - max).exp() / sum_exp;
            grad.set(r, j, (target_mass * p - q[j]) * inv_batch);
        }
    }
    Ok(SoftmaxFragment {
        value: value * inv_batch,
        logits_grad: grad,
    })
}

/// The combined loss: `triplet(batch_hard(embeddings)) + softmax(logits)`,
/// an unweighted sum.
pub fn trisoft_loss(
    embeddings: &Matrix,
    logits: &Matrix,
    identities: &[i64],
    config: &LossConfig,
) -> Result<LossValue> {
    let mined = batch_hard_mine(embeddings, identities)?;
    let triplet = triplet_loss(embeddings, &mined, config)?;
    let labels = class_indices(identities, config.num_identities)?;
    let softmax = smoothed_softmax_loss(logits, &labels, config)?;
    Ok(LossValue {
        total: triplet.value + softmax.value,
        triplet_part: triplet.value,
        softmax_part: softmax.value,
        embeddings_grad: triplet.embeddings_grad,
        logits_grad: softmax.logits_grad,
    })
}

/// Identities used with the softmax head must already be class indices in
/// `[0, num_identities)`.
fn class_indices(identities: &[i64], num_identities: usize) -> Result<Vec<usize>> {
    identities
        .iter()
        .map(|&id| {
            if id < 0 || id as usize >= num_identities {
                Err(Error::config(format!(
                    "identity {id} is not a class index below {num_identities}"
                )))
            } else {
                Ok(id as usize)
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, ClosureFn};
    use crate::rng::SplitMix64;

    /// Independent oracle: exhaustive per-anchor scan over the direct
    /// per-pair distance loop, same lowest-index tie-break.
    fn exhaustive_mine(embeddings: &Matrix, ids: &[i64]) -> Vec<AnchorTriplet> {
        let rows = embeddings.rows();
        let direct = |i: usize, j: usize| -> f64 {
            embeddings
                .row(i)
                .iter()
                .zip(embeddings.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt()
        };
        let mut out = Vec::new();
        for a in 0..rows {
            let mut best_pos = None;
            let mut best_neg = None;
            for j in 0..rows {
                if j == a {
                    continue;
                }
                let d = direct(a, j);
                if ids[j] == ids[a] {
                    best_pos = match best_pos {
                        None => Some((j, d)),
                        Some((_, bd)) if d > bd => Some((j, d)),
                        keep => keep,
                    };
                } else {
                    best_neg = match best_neg {
                        None => Some((j, d)),
                        Some((_, bd)) if d < bd => Some((j, d)),
                        keep => keep,
                    };
                }
            }
            let (p, d_ap) = best_pos.unwrap();
            let (n, d_an) = best_neg.unwrap();
            out.push(AnchorTriplet {
                anchor: a,
                hardest_positive: p,
                hardest_negative: n,
                d_ap,
                d_an,
            });
        }
        out
    }

    fn pk_random_batch(p: usize, k: usize, dim: usize, rng: &mut SplitMix64) -> (Matrix, Vec<i64>) {
        let rows = p * k;
        let emb = Matrix::random(rows, dim, rng);
        let ids: Vec<i64> = (0..rows).map(|i| (i / k) as i64).collect();
        (emb, ids)
    }

    #[test]
    fn pairwise_three_four_five() {
        let emb = Matrix::from_rows(&[vec![0.0, 0.0], vec![3.0, 4.0]]).unwrap();
        let d = pairwise_distances(&emb).unwrap();
        assert_eq!(d.get(0, 1), 5.0);
        assert_eq!(d.get(1, 0), 5.0);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn pairwise_identical_rows_zero() {
        let emb = Matrix::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0], vec![0.0, 0.0]]).unwrap();
        let d = pairwise_distances(&emb).unwrap();
        assert_eq!(d.get(0, 1), 0.0);
    }

    #[test]
    fn pairwise_matches_direct_loop() {
        let mut rng = SplitMix64::new(40);
        let emb = Matrix::random(20, 7, &mut rng);
        let d = pairwise_distances(&emb).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let direct: f64 = emb
                    .row(i)
                    .iter()
                    .zip(emb.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                assert!((d.get(i, j) - direct).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn mining_hand_geometry() {
        let emb = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 1.0],
            vec![10.0, 0.0],
            vec![10.0, 2.0],
        ])
        .unwrap();
        let ids = vec![0, 0, 1, 1];
        let mined = batch_hard_mine(&emb, &ids).unwrap();
        let t0 = &mined.triplets[0];
        assert_eq!(t0.hardest_positive, 1);
        assert_eq!(t0.hardest_negative, 2);
        assert!((t0.d_ap - 1.0).abs() < 1e-12);
        assert!((t0.d_an - 10.0).abs() < 1e-12);
    }

    #[test]
    fn pk_batch_36_yields_36_triplets() {
        let mut rng = SplitMix64::new(77);
        let (emb, ids) = pk_random_batch(6, 6, 8, &mut rng);
        let mined = batch_hard_mine(&emb, &ids).unwrap();
        assert_eq!(mined.triplets.len(), 36);
    }

    #[test]
    fn mining_matches_exhaustive_scan() {
        for seed in 0..60u64 {
            let mut rng = SplitMix64::new(seed);
            let p = 2 + rng.below(5);
            let k = 2 + rng.below(5);
            let (emb, ids) = pk_random_batch(p, k, 4, &mut rng);
            let mined = batch_hard_mine(&emb, &ids).unwrap();
            let oracle = exhaustive_mine(&emb, &ids);
            assert_eq!(mined.triplets.len(), oracle.len());
            for (a, b) in mined.triplets.iter().zip(oracle.iter()) {
                assert_eq!(a.anchor, b.anchor);
                assert_eq!(a.hardest_positive, b.hardest_positive, "seed {seed}");
                assert_eq!(a.hardest_negative, b.hardest_negative, "seed {seed}");
                assert!((a.d_ap - b.d_ap).abs() <= 1e-10);
                assert!((a.d_an - b.d_an).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn mining_tie_break_prefers_lowest_index() {
        // two equidistant positives and negatives
        let emb = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![-1.0, 0.0],
            vec![0.0, 5.0],
            vec![0.0, -5.0],
        ])
        .unwrap();
        let ids = vec![0, 0, 0, 1, 1];
        let mined = batch_hard_mine(&emb, &ids).unwrap();
        assert_eq!(mined.triplets[0].hardest_positive, 1);
        assert_eq!(mined.triplets[0].hardest_negative, 3);
    }

    #[test]
    fn mining_rejects_single_instance_identity() {
        let emb = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let err = batch_hard_mine(&emb, &[7, 7, 9]).unwrap_err();
        match err {
            Error::UnminableIdentity { identity } => assert_eq!(identity, "9"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn mining_rejects_single_identity_batch() {
        let emb = Matrix::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        assert!(matches!(
            batch_hard_mine(&emb, &[3, 3]).unwrap_err(),
            Error::SingleIdentityBatch
        ));
    }

    #[test]
    fn triplet_equal_distances_costs_margin() {
        // every anchor sees d_ap = 1, d_an = 1
        let emb = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        ])
        .unwrap();
        let ids = vec![0, 0, 1, 1];
        let config = LossConfig::new(0.3, Smoothing::None, 2).unwrap();
        let mined = batch_hard_mine(&emb, &ids).unwrap();
        let frag = triplet_loss(&emb, &mined, &config).unwrap();
        assert!((frag.value - 0.3).abs() <= 1e-12);
    }

    #[test]
    fn triplet_satisfied_margin_is_zero() {
        let emb = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![3.0, 0.0],
            vec![3.0, 1.0],
        ])
        .unwrap();
        let ids = vec![0, 0, 1, 1];
        let config = LossConfig::new(0.3, Smoothing::None, 2).unwrap();
        let mined = batch_hard_mine(&emb, &ids).unwrap();
        let frag = triplet_loss(&emb, &mined, &config).unwrap();
        assert_eq!(frag.value, 0.0);
        assert!(frag.embeddings_grad.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn triplet_without_hinge_matches_raw_sum() {
        let mut rng = SplitMix64::new(50);
        let (emb, ids) = pk_random_batch(3, 2, 4, &mut rng);
        let config = LossConfig::new(0.3, Smoothing::None, 3)
            .unwrap()
            .with_hinge(false)
            .with_reduction(Reduction::Sum);
        let mined = batch_hard_mine(&emb, &ids).unwrap();
        let frag = triplet_loss(&emb, &mined, &config).unwrap();
        let direct: f64 = mined
            .triplets
            .iter()
            .map(|t| t.d_ap * t.d_ap - t.d_an * t.d_an + 0.3)
            .sum();
        assert!((frag.value - direct).abs() <= 1e-12);
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        for seed in [60u64, 61, 62] {
            let mut rng = SplitMix64::new(seed);
            let (emb0, ids) = pk_random_batch(3, 3, 5, &mut rng);
            let config = LossConfig::new(0.3, Smoothing::None, 3).unwrap();
            let rows = emb0.rows();
            let cols = emb0.cols();
            let ids_v = ids.clone();
            let value = {
                let ids = ids_v.clone();
                move |p: &[f64]| -> crate::error::Result<f64> {
                    let emb = Matrix::from_vec(rows, cols, p.to_vec())?;
                    let mined = batch_hard_mine(&emb, &ids)?;
                    Ok(triplet_loss(&emb, &mined, &config)?.value)
                }
            };
            let gradient = {
                let ids = ids_v.clone();
                move |p: &[f64]| -> crate::error::Result<Vec<f64>> {
                    let emb = Matrix::from_vec(rows, cols, p.to_vec())?;
                    let mined = batch_hard_mine(&emb, &ids)?;
                    Ok(triplet_loss(&emb, &mined, &config)?
                        .embeddings_grad
                        .data()
                        .to_vec())
                }
            };
            let report =
                grad_check(&ClosureFn { value, gradient }, emb0.data(), 1e-4, 1e-5).unwrap();
            assert!(report.passed, "seed {seed}: {}", report.max_rel_error);
        }
    }

    #[test]
    fn triplet_translation_invariant() {
        let mut rng = SplitMix64::new(70);
        let (emb, ids) = pk_random_batch(4, 3, 6, &mut rng);
        let config = LossConfig::new(0.3, Smoothing::None, 4).unwrap();
        let mined = batch_hard_mine(&emb, &ids).unwrap();
        let base = triplet_loss(&emb, &mined, &config).unwrap().value;
        let shift: Vec<f64> = (0..6).map(|_| rng.normal()).collect();
        let mut shifted = emb.clone();
        for r in 0..shifted.rows() {
            for (v, s) in shifted.row_mut(r).iter_mut().zip(shift.iter()) {
                *v += s;
            }
        }
        let mined2 = batch_hard_mine(&shifted, &ids).unwrap();
        let moved = triplet_loss(&shifted, &mined2, &config).unwrap().value;
        assert!((base - moved).abs() <= 1e-10);
    }

    #[test]
    fn eq3_targets_for_veri_identity_count() {
        let config = LossConfig::new(0.3, Smoothing::OneOverN, 576).unwrap();
        let q = smoothed_targets(3, &config).unwrap();
        assert_eq!(q[3], 1.0 - 1.0 / 576.0);
        for (i, v) in q.iter().enumerate() {
            if i != 3 {
                assert_eq!(*v, 1.0 / 576.0);
            }
        }
    }

    #[test]
    fn explicit_targets_form_distribution_with_unique_max() {
        let config = LossConfig::new(0.3, Smoothing::Explicit(0.2), 10).unwrap();
        let q = smoothed_targets(4, &config).unwrap();
        let sum: f64 = q.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12);
        let max = q.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(q[4], max);
        assert_eq!(q.iter().filter(|v| **v == max).count(), 1);
    }

    #[test]
    fn uniform_logits_cost_log_n() {
        for smoothing in [Smoothing::None, Smoothing::Explicit(0.2)] {
            let config = LossConfig::new(0.3, smoothing, 8).unwrap();
            let logits = Matrix::zeros(3, 8);
            let frag = smoothed_softmax_loss(&logits, &[0, 3, 7], &config).unwrap();
            assert!((frag.value - (8.0f64).ln()).abs() <= 1e-12, "{smoothing:?}");
        }
    }

    #[test]
    fn one_over_n_uniform_logits_cost_scaled_log_n() {
        // targets sum to 2 - 2/N in the reciprocal mode
        let n = 8usize;
        let config = LossConfig::new(0.3, Smoothing::OneOverN, n).unwrap();
        let logits = Matrix::zeros(2, n);
        let frag = smoothed_softmax_loss(&logits, &[1, 2], &config).unwrap();
        let expected = (2.0 - 2.0 / n as f64) * (n as f64).ln();
        assert!((frag.value - expected).abs() <= 1e-12);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let mut rng = SplitMix64::new(90);
        let config = LossConfig::new(0.3, Smoothing::Explicit(0.1), 6).unwrap();
        let logits = Matrix::random(5, 6, &mut rng);
        let labels = [0usize, 2, 5, 1, 3];
        let frag = smoothed_softmax_loss(&logits, &labels, &config).unwrap();
        let mut direct = 0.0;
        for r in 0..5 {
            let q = smoothed_targets(labels[r], &config).unwrap();
            let row = logits.row(r);
            let sum_exp: f64 = row.iter().map(|z| z.exp()).sum();
            for (j, z) in row.iter().enumerate() {
                let p = z.exp() / sum_exp;
                direct -= q[j] * p.ln();
            }
        }
        direct /= 5.0;
        assert!((frag.value - direct).abs() <= 1e-10);
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        for (seed, smoothing) in [
            (91u64, Smoothing::None),
            (92, Smoothing::Explicit(0.15)),
            (93, Smoothing::OneOverN),
        ] {
            let mut rng = SplitMix64::new(seed);
            let logits0 = Matrix::random(4, 5, &mut rng);
            let labels = vec![0usize, 4, 2, 2];
            let config = LossConfig::new(0.3, smoothing, 5).unwrap();
            let value = {
                let labels = labels.clone();
                move |p: &[f64]| -> crate::error::Result<f64> {
                    let logits = Matrix::from_vec(4, 5, p.to_vec())?;
                    Ok(smoothed_softmax_loss(&logits, &labels, &config)?.value)
                }
            };
            let gradient = {
                let labels = labels.clone();
                move |p: &[f64]| -> crate::error::Result<Vec<f64>> {
                    let logits = Matrix::from_vec(4, 5, p.to_vec())?;
                    Ok(smoothed_softmax_loss(&logits, &labels, &config)?
                        .logits_grad
                        .data()
                        .to_vec())
                }
            };
            let report =
                grad_check(&ClosureFn { value, gradient }, logits0.data(), 1e-4, 1e-5).unwrap();
            assert!(report.passed, "{smoothing:?}: {}", report.max_rel_error);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let mut rng = SplitMix64::new(94);
        let config = LossConfig::new(0.3, Smoothing::Explicit(0.1), 7).unwrap();
        let logits = Matrix::random(3, 7, &mut rng);
        let labels = [1usize, 6, 0];
        let base = smoothed_softmax_loss(&logits, &labels, &config).unwrap().value;
        let mut shifted = logits.clone();
        for r in 0..3 {
            let c = rng.normal() * 10.0;
            for v in shifted.row_mut(r) {
                *v += c;
            }
        }
        let moved = smoothed_softmax_loss(&shifted, &labels, &config).unwrap().value;
        assert!((base - moved).abs() <= 1e-10);
    }

    #[test]
    fn softmax_rejects_out_of_range_label() {
        let config = LossConfig::new(0.3, Smoothing::None, 4).unwrap();
        let logits = Matrix::zeros(1, 4);
        assert!(smoothed_softmax_loss(&logits, &[4], &config).is_err());
    }

    #[test]
    fn softmax_is_stable_at_huge_logits() {
        let config = LossConfig::new(0.3, Smoothing::None, 3).unwrap();
        let logits = Matrix::from_rows(&[vec![1000.0, 0.0, -1000.0]]).unwrap();
        let frag = smoothed_softmax_loss(&logits, &[0], &config).unwrap();
        assert!(frag.value.is_finite());
        assert!(frag.value >= 0.0);
    }

    #[test]
    fn trisoft_total_is_sum_of_parts() {
        let mut rng = SplitMix64::new(95);
        let (emb, ids) = pk_random_batch(3, 2, 4, &mut rng);
        let logits = Matrix::random(6, 3, &mut rng);
        let config = LossConfig::new(0.3, Smoothing::Explicit(0.1), 3).unwrap();
        let loss = trisoft_loss(&emb, &logits, &ids, &config).unwrap();
        let mined = batch_hard_mine(&emb, &ids).unwrap();
        let t = triplet_loss(&emb, &mined, &config).unwrap().value;
        let labels: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let s = smoothed_softmax_loss(&logits, &labels, &config).unwrap().value;
        assert!((loss.total - (t + s)).abs() <= 1e-12);
        assert!((loss.triplet_part - t).abs() <= 1e-15);
        assert!((loss.softmax_part - s).abs() <= 1e-15);
    }

    #[test]
    fn trisoft_uniform_logits_and_satisfied_margin() {
        let emb = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![9.0, 0.0],
            vec![9.0, 0.1],
        ])
        .unwrap();
        let ids = vec![0, 0, 1, 1];
        let logits = Matrix::zeros(4, 4);
        let config = LossConfig::new(0.3, Smoothing::None, 4).unwrap();
        let loss = trisoft_loss(&emb, &logits, &ids, &config).unwrap();
        assert!((loss.total - (4.0f64).ln()).abs() <= 1e-12);
        assert_eq!(loss.triplet_part, 0.0);
    }

    #[test]
    fn trisoft_near_zero_when_both_parts_solved() {
        let emb = Matrix::from_rows(&[
            vec![0.0, 0.0],
            vec![0.0, 0.0],
            vec![9.0, 0.0],
            vec![9.0, 0.0],
        ])
        .unwrap();
        let ids = vec![0, 0, 1, 1];
        let mut logits = Matrix::zeros(4, 2);
        for (r, &id) in ids.iter().enumerate() {
            logits.set(r, id as usize, 40.0);
        }
        let config = LossConfig::new(0.3, Smoothing::None, 2).unwrap();
        let loss = trisoft_loss(&emb, &logits, &ids, &config).unwrap();
        assert!(loss.total <= 1e-6, "{}", loss.total);
    }

    #[test]
    fn neck_softmax_composite_gradient() {
        // end-to-end: features -> neck (layer norm) -> fixed projection -> smoothed CE
        use crate::norms::{neck_backward, neck_forward};
        let mut rng = SplitMix64::new(96);
        let rows = 4usize;
        let dim = 6usize;
        let classes = 3usize;
        let features0 = Matrix::random(rows, dim, &mut rng);
        let proj = Matrix::random(classes, dim, &mut rng);
        let labels = vec![0usize, 1, 2, 1];
        let config = LossConfig::new(0.3, Smoothing::Explicit(0.1), classes).unwrap();
        let gamma = vec![1.0; dim];
        let beta = vec![0.0; dim];
        let forward = {
            let proj = proj.clone();
            let labels = labels.clone();
            let (gamma, beta) = (gamma.clone(), beta.clone());
            move |p: &[f64]| -> crate::error::Result<(f64, Vec<f64>)> {
                let feats = Matrix::from_vec(rows, dim, p.to_vec())?;
                let fwd = neck_forward(&feats, &gamma, &beta, 1e-5)?;
                let mut logits = Matrix::zeros(rows, classes);
                for r in 0..rows {
                    for k in 0..classes {
                        let dot: f64 = fwd
                            .output
                            .row(r)
                            .iter()
                            .zip(proj.row(k).iter())
                            .map(|(a, b)| a * b)
                            .sum();
                        logits.set(r, k, dot);
                    }
                }
                let frag = smoothed_softmax_loss(&logits, &labels, &config)?;
                // backprop: logits grad -> neck output grad -> neck input grad
                let mut neck_grad = Matrix::zeros(rows, dim);
                for r in 0..rows {
                    for k in 0..classes {
                        let g = frag.logits_grad.get(r, k);
                        for j in 0..dim {
                            neck_grad.row_mut(r)[j] += g * proj.get(k, j);
                        }
                    }
                }
                let (input_grad, _, _) = neck_backward(&fwd.ctx, &neck_grad)?;
                Ok((frag.value, input_grad.data().to_vec()))
            }
        };
        let value = {
            let forward = forward.clone();
            move |p: &[f64]| forward(p).map(|(v, _)| v)
        };
        let gradient = move |p: &[f64]| forward(p).map(|(_, g)| g);
        let report = grad_check(
            &ClosureFn { value, gradient },
            features0.data(),
            1e-4,
            1e-5,
        )
        .unwrap();
        assert!(report.passed, "{}", report.max_rel_error);
    }
}
