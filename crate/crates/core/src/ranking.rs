//! Listwise Top-1 ranking loss and baselines.
//!
//! A score list induces a distribution over permutations (each item's weight
//! is `exp(score)`); the probability that item `j` ranks first has the closed
//! form `softmax(scores)[j]`. [`top1_probability`] computes the closed form,
//! [`permutation_oracle`] recovers the same distribution by brute-force
//! enumeration of all permutations, and [`listwise_ce_loss`] is the cross
//! entropy between the predicted and ground-truth Top-1 distributions, with
//! its analytic gradient. [`pairwise_hinge_loss`] is the pairwise baseline.

use crate::error::{Error, Result};

/// Probability of each item ranking first, one entry per score.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist {
    pub probs: Vec<f64>,
}

/// Scalar loss plus gradient with respect to each input score.
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub grad: Vec<f64>,
}

/// Top-1 probability of each item: `softmax` of the scores.
///
/// Computed with a max shift, so arbitrarily large score magnitudes stay
/// finite.
pub fn top1_probability(scores: &[f64]) -> Result<ProbDist> {
    if scores.is_empty() {
        return Err(Error::invalid("top1_probability: empty score list"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("top1_probability: scores".into()));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(ProbDist {
        probs: exps.iter().map(|e| e / total).collect(),
    })
}

/// Log of the Top-1 probabilities, in log-sum-exp form.
fn log_top1_probability(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_z = scores
        .iter()
        .map(|s| (s - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    scores.iter().map(|s| s - log_z).collect()
}

/// Maximum list length accepted by [`permutation_oracle`].
pub const ORACLE_MAX_LEN: usize = 8;

/// Brute-force Top-1 distribution via full permutation enumeration.
///
/// Walks every permutation of the list, computing its probability under the
/// sequential-selection model (at each position, an item is drawn with
/// probability `exp(score) / sum(exp(score) over remaining items)`), and sums
/// permutation probabilities by first element. Must agree with
/// [`top1_probability`] to floating-point accuracy; it exists so tests can
/// validate the closed form against the definition.
///
/// Guarded to `n <= 8` (factorial cost).
pub fn permutation_oracle(scores: &[f64]) -> Result<ProbDist> {
    if scores.is_empty() {
        return Err(Error::invalid("permutation_oracle: empty score list"));
    }
    if scores.len() > ORACLE_MAX_LEN {
        return Err(Error::invalid(format!(
            "permutation_oracle: n = {} exceeds the factorial-cost guard ({})",
            scores.len(),
            ORACLE_MAX_LEN
        )));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let phi: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let n = phi.len();
    let mut top1 = vec![0.0; n];
    let mut used = vec![false; n];

    // Depth-first over permutation prefixes, carrying the prefix probability
    // and the sum of phi over unused items.
    fn recurse(
        phi: &[f64],
        used: &mut [bool],
        first: usize,
        prefix_prob: f64,
        remaining_sum: f64,
        top1: &mut [f64],
        depth: usize,
    ) {
        if depth == phi.len() {
            top1[first] += prefix_prob;
            return;
        }
        for i in 0..phi.len() {
            if used[i] {
                continue;
            }
            used[i] = true;
            let p = prefix_prob * phi[i] / remaining_sum;
            let first = if depth == 0 { i } else { first };
            recurse(phi, used, first, p, remaining_sum - phi[i], top1, depth + 1);
            used[i] = false;
        }
    }

    let total: f64 = phi.iter().sum();
    recurse(&phi, &mut used, 0, 1.0, total, &mut top1, 0);
    Ok(ProbDist { probs: top1 })
}

/// Listwise cross-entropy between the Top-1 distributions of predicted and
/// ground-truth scores.
///
/// `value = -sum_j P_gt(j) * log P_pred(j)`, and the gradient with respect to
/// each predicted score is `P_pred(j) - P_gt(j)`. Gradient entries therefore
/// sum to zero.
pub fn listwise_ce_loss(pred: &[f64], gt: &[f64]) -> Result<LossResult> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "listwise_ce_loss: length mismatch {} vs {}",
            pred.len(),
            gt.len()
        )));
    }
    if pred.len() < 2 {
        return Err(Error::invalid("listwise_ce_loss: need at least 2 items"));
    }
    let p_gt = top1_probability(gt)?.probs;
    let p_pred = top1_probability(pred)?.probs;
    let log_pred = log_top1_probability(pred);
    let value = -p_gt
        .iter()
        .zip(log_pred.iter())
        .map(|(py, lz)| py * lz)
        .sum::<f64>();
    let grad = p_pred
        .iter()
        .zip(p_gt.iter())
        .map(|(pz, py)| pz - py)
        .collect();
    Ok(LossResult { value, grad })
}

/// Entropy of the Top-1 distribution of a score list; the lower bound of
/// [`listwise_ce_loss`] against that ground truth (Gibbs' inequality).
pub fn top1_entropy(scores: &[f64]) -> Result<f64> {
    let p = top1_probability(scores)?.probs;
    let log_p = log_top1_probability(scores);
    Ok(-p.iter().zip(log_p.iter()).map(|(a, b)| a * b).sum::<f64>())
}

/// Pairwise hinge loss with unit margin: the preferred view must outscore the
/// other by at least 1.
///
/// `value = max(0, 1 + s_worse - s_better)`; the gradient with respect to
/// `(s_better, s_worse)` is `[-1, +1]` while the margin is violated and zero
/// otherwise.
pub fn pairwise_hinge_loss(s_better: f64, s_worse: f64) -> Result<LossResult> {
    if !s_better.is_finite() || !s_worse.is_finite() {
        return Err(Error::NonFinite("pairwise_hinge_loss: scores".into()));
    }
    let raw = 1.0 + s_worse - s_better;
    if raw > 0.0 {
        Ok(LossResult {
            value: raw,
            grad: vec![-1.0, 1.0],
        })
    } else {
        Ok(LossResult {
            value: 0.0,
            grad: vec![0.0, 0.0],
        })
    }
}

/// Ground-truth score list for a view list sorted best-first: rank `r`
/// (1-based, 1 = best) scores `n - r`, so the best view gets the largest
/// score. Converts ordinal annotations into inputs for [`listwise_ce_loss`].
pub fn rank_order_score(n: usize) -> Result<Vec<f64>> {
    rank_order_score_scaled(n, 1.0)
}

/// [`rank_order_score`] with an explicit scale (temperature) on the linear
/// ordinal-to-score map; larger scales sharpen the induced Top-1
/// distribution.
pub fn rank_order_score_scaled(n: usize, scale: f64) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::invalid("rank_order_score: n must be >= 1"));
    }
    Ok((0..n).map(|r| scale * (n - 1 - r) as f64).collect())
}

/// Spearman rank correlation between two score lists.
///
/// Ties receive average ranks. Returns 0 when either list has no rank
/// variance (and 1 on the degenerate single-item list).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "spearman: length mismatch {} vs {}",
            a.len(),
            b.len()
        )));
    }
    if a.is_empty() {
        return Err(Error::invalid("spearman: empty lists"));
    }
    if a.len() == 1 {
        return Ok(1.0);
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut var_a = 0.0;
    let mut var_b = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - mean;
        let db = rb[i] - mean;
        cov += da * db;
        var_a += da * da;
        var_b += db * db;
    }
    let denom = (var_a * var_b).sqrt();
    if denom == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / denom)
}

/// 1-based ranks with average rank assigned to ties.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).unwrap());
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn top1_uniform_for_equal_scores() {
        let p = top1_probability(&[0.0, 0.0, 0.0]).unwrap().probs;
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn top1_closed_form_on_log_scores() {
        let p = top1_probability(&[1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()])
            .unwrap()
            .probs;
        assert!(max_abs_diff(&p, &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) < 1e-15);
    }

    #[test]
    fn top1_survives_huge_scores() {
        let p = top1_probability(&[1000.0, 1000.0, 1000.0]).unwrap().probs;
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn top1_empty_errors() {
        assert!(top1_probability(&[]).is_err());
    }

    #[test]
    fn oracle_single_item() {
        assert_eq!(permutation_oracle(&[4.2]).unwrap().probs, vec![1.0]);
    }

    #[test]
    fn oracle_symmetric_pair() {
        let p = permutation_oracle(&[0.0, 0.0]).unwrap().probs;
        assert!(max_abs_diff(&p, &[0.5, 0.5]) < 1e-15);
    }

    #[test]
    fn oracle_matches_closed_form_on_spec_example() {
        let s = [0.5, -0.2, 1.1];
        let oracle = permutation_oracle(&s).unwrap().probs;
        let closed = top1_probability(&s).unwrap().probs;
        assert!(max_abs_diff(&oracle, &closed) < 1e-12);
    }

    #[test]
    fn oracle_rejects_long_lists() {
        assert!(permutation_oracle(&[0.0; 9]).is_err());
    }

    #[test]
    fn oracle_matches_closed_form_for_all_small_lengths() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for n in 1..=7 {
            for _ in 0..20 {
                let s: Vec<f64> = (0..n).map(|_| rng.gen_range(-4.0..4.0)).collect();
                let oracle = permutation_oracle(&s).unwrap().probs;
                let closed = top1_probability(&s).unwrap().probs;
                assert!(max_abs_diff(&oracle, &closed) < 1e-12, "n={n}");
            }
        }
    }

    #[test]
    fn ce_loss_at_equality_is_entropy_with_zero_grad() {
        let s = [0.3, -1.2, 0.8, 0.0];
        let res = listwise_ce_loss(&s, &s).unwrap();
        let entropy = top1_entropy(&s).unwrap();
        assert!((res.value - entropy).abs() < 1e-12);
        assert!(res.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn ce_loss_closed_form_example() {
        // P_pred = [.5, .5], P_gt = [.25, .75] -> loss = ln 2, grad [.25, -.25].
        let res = listwise_ce_loss(&[0.0, 0.0], &[0.0, 3.0f64.ln()]).unwrap();
        assert!((res.value - 2.0f64.ln()).abs() < 1e-12);
        assert!(max_abs_diff(&res.grad, &[0.25, -0.25]) < 1e-12);
    }

    #[test]
    fn ce_loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 24;
        let pred: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let gt: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let res = listwise_ce_loss(&pred, &gt).unwrap();
        let step = 1e-5;
        for j in 0..n {
            let mut plus = pred.clone();
            plus[j] += step;
            let mut minus = pred.clone();
            minus[j] -= step;
            let numeric = (listwise_ce_loss(&plus, &gt).unwrap().value
                - listwise_ce_loss(&minus, &gt).unwrap().value)
                / (2.0 * step);
            let rel = (numeric - res.grad[j]).abs() / numeric.abs().max(res.grad[j].abs()).max(1e-9);
            assert!(rel < 1e-6, "score {j}: {numeric} vs {}", res.grad[j]);
        }
    }

    #[test]
    fn ce_loss_argument_errors() {
        assert!(listwise_ce_loss(&[0.0], &[0.0]).is_err());
        assert!(listwise_ce_loss(&[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn hinge_examples() {
        let r = pairwise_hinge_loss(1.0, 1.0).unwrap();
        assert_eq!(r.value, 1.0);
        assert_eq!(r.grad, vec![-1.0, 1.0]);

        let r = pairwise_hinge_loss(2.0, 0.0).unwrap();
        assert_eq!(r.value, 0.0);
        assert_eq!(r.grad, vec![0.0, 0.0]);

        let r = pairwise_hinge_loss(-0.25, 0.25).unwrap();
        assert!((r.value - 1.5).abs() < 1e-15);
    }

    #[test]
    fn rank_order_score_examples() {
        assert_eq!(rank_order_score(3).unwrap(), vec![2.0, 1.0, 0.0]);
        assert_eq!(rank_order_score(1).unwrap(), vec![0.0]);
        let s24 = rank_order_score(24).unwrap();
        assert_eq!(s24.len(), 24);
        assert_eq!(s24[0], 23.0);
        assert_eq!(s24[23], 0.0);
        assert!(rank_order_score(0).is_err());
    }

    #[test]
    fn two_element_gradient_points_toward_gt_argmax() {
        // pred prefers item 0, gt prefers item 1: a descent step must raise
        // s_1 relative to s_0.
        let res = listwise_ce_loss(&[1.0, 0.0], &[0.0, 2.0]).unwrap();
        assert!(res.grad[0] > 0.0); // descent lowers s_0
        assert!(res.grad[1] < 0.0); // descent raises s_1
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(spearman(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    proptest! {
        #[test]
        fn top1_shift_invariance(
            scores in prop::collection::vec(-10.0f64..10.0, 2..12),
            shift in -50.0f64..50.0,
        ) {
            let base = top1_probability(&scores).unwrap().probs;
            let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
            let moved = top1_probability(&shifted).unwrap().probs;
            prop_assert!(max_abs_diff(&base, &moved) < 1e-12);
        }

        #[test]
        fn top1_is_strictly_monotone(
            scores in prop::collection::vec(-10.0f64..10.0, 2..12),
        ) {
            let p = top1_probability(&scores).unwrap().probs;
            for i in 0..scores.len() {
                for j in 0..scores.len() {
                    if scores[i] > scores[j] {
                        prop_assert!(p[i] > p[j]);
                    }
                }
            }
        }

        #[test]
        fn top1_sums_to_one(scores in prop::collection::vec(-10.0f64..10.0, 1..12)) {
            let p = top1_probability(&scores).unwrap().probs;
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0 && v <= 1.0));
        }

        #[test]
        fn ce_loss_respects_gibbs_bound(
            pred in prop::collection::vec(-5.0f64..5.0, 2..10),
            gt in prop::collection::vec(-5.0f64..5.0, 2..10),
        ) {
            let n = pred.len().min(gt.len());
            let res = listwise_ce_loss(&pred[..n], &gt[..n]).unwrap();
            let entropy = top1_entropy(&gt[..n]).unwrap();
            prop_assert!(res.value >= entropy - 1e-12);
        }

        #[test]
        fn ce_grad_sums_to_zero(
            pred in prop::collection::vec(-5.0f64..5.0, 2..10),
            gt in prop::collection::vec(-5.0f64..5.0, 2..10),
        ) {
            let n = pred.len().min(gt.len());
            let res = listwise_ce_loss(&pred[..n], &gt[..n]).unwrap();
            prop_assert!(res.grad.iter().sum::<f64>().abs() < 1e-10);
        }

        #[test]
        fn hinge_shift_invariance(
            a in -10.0f64..10.0,
            b in -10.0f64..10.0,
            shift in -20.0f64..20.0,
        ) {
            let base = pairwise_hinge_loss(a, b).unwrap();
            let moved = pairwise_hinge_loss(a + shift, b + shift).unwrap();
            prop_assert!((base.value - moved.value).abs() < 1e-9);
        }
    }
}
