//! Training losses, all written as quantities to minimize. The
//! classification losses take a trace of per-step probability vectors and
//! hand back gradients with respect to the pre-softmax logits, which is
//! what the backward pass wants. Probabilities are clamped away from 0
//! and 1 before any log or division, so a saturated softmax cannot
//! produce infinities.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Vector;

/// Probabilities are clamped to [PROB_EPS, 1 - PROB_EPS] inside the
/// losses.
pub const PROB_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassLossKind {
    /// Cross entropy averaged over the trained steps.
    Average,
    /// Cross entropy plus a false-positive term whose weight grows
    /// linearly with elapsed time.
    LinearWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FutureLossKind {
    L2,
    SmoothL1,
}

/// Which losses a training run optimizes: a classification term, and
/// optionally a future-state regression term scaled by `lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSelection {
    pub classification: ClassLossKind,
    pub future: Option<FutureLossKind>,
    pub lambda: f64,
}

impl LossSelection {
    pub fn classification_only(kind: ClassLossKind) -> Self {
        LossSelection { classification: kind, future: None, lambda: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.lambda.is_finite() || self.lambda < 0.0 {
            return Err(Error::InvalidArgument("lambda must be finite and >= 0".into()));
        }
        if self.future.is_none() && self.lambda > 0.0 {
            return Err(Error::InvalidArgument(
                "lambda > 0 requires a future loss to be selected".into(),
            ));
        }
        Ok(())
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

fn check_trace(probs: &[Vector], label: usize, steps: usize) -> Result<usize> {
    if steps == 0 {
        return Err(Error::InvalidArgument("loss over zero steps".into()));
    }
    if steps > probs.len() {
        return Err(Error::InvalidArgument(format!(
            "loss over {} steps but trace has {}",
            steps,
            probs.len()
        )));
    }
    let classes = probs[0].dim();
    if classes == 0 {
        return Err(Error::InvalidArgument("empty probability vector".into()));
    }
    if label >= classes {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {classes} classes"
        )));
    }
    for (t, p) in probs.iter().take(steps).enumerate() {
        if p.dim() != classes {
            return Err(Error::DimensionMismatch(format!(
                "probability vector at step {} has dimension {} (expected {})",
                t + 1,
                p.dim(),
                classes
            )));
        }
    }
    Ok(classes)
}

/// Negative log likelihood of the true class, averaged over the first
/// `steps` entries of the trace. Returns the loss and per-step gradients
/// with respect to the pre-softmax logits.
pub fn average_ce(probs: &[Vector], label: usize, steps: usize) -> Result<(f64, Vec<Vector>)> {
    check_trace(probs, label, steps)?;
    let inv = 1.0 / steps as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(steps);
    for p in probs.iter().take(steps) {
        loss -= clamp_prob(p[label]).ln();
        // d loss / d logit_j = (p_j - y_j) / steps for softmax + NLL.
        let mut g = p.clone();
        for v in g.as_mut_slice() {
            *v *= inv;
        }
        g[label] -= inv;
        grads.push(g);
    }
    Ok((loss * inv, grads))
}

/// Weight of the false-positive term at step `t` of a sequence of length
/// `seq_len`: exactly t / T, reaching 1 at the final step.
pub fn false_positive_weight(t: usize, seq_len: usize) -> f64 {
    t as f64 / seq_len as f64
}

/// Cross entropy extended with a time-weighted false-positive term: at
/// step t, each wrong class k additionally pays (t/T) * -log(1 - p_k).
/// Early mistakes are cheap, late false positives are not. Averaged over
/// the first `steps` entries; `seq_len` is the full sequence length T
/// that anchors the weight ramp.
pub fn linear_weighted_ce(
    probs: &[Vector],
    label: usize,
    steps: usize,
    seq_len: usize,
) -> Result<(f64, Vec<Vector>)> {
    let classes = check_trace(probs, label, steps)?;
    if steps > seq_len {
        return Err(Error::InvalidArgument(format!(
            "trained steps {steps} exceed sequence length {seq_len}"
        )));
    }
    let inv = 1.0 / steps as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(steps);
    for (idx, p) in probs.iter().take(steps).enumerate() {
        let t = idx + 1;
        let w = false_positive_weight(t, seq_len);
        let mut step_loss = -clamp_prob(p[label]).ln();
        // dL/dp_k before the softmax Jacobian.
        let mut dp = vec![0.0; classes];
        dp[label] = -1.0 / clamp_prob(p[label]);
        for k in 0..classes {
            if k == label {
                continue;
            }
            let pk = clamp_prob(p[k]);
            step_loss -= w * (1.0 - pk).ln();
            dp[k] = w / (1.0 - pk);
        }
        loss += step_loss;
        // Push through the softmax Jacobian: dz_j = p_j (dp_j - sum_k dp_k p_k).
        let dot: f64 = dp.iter().zip(p.as_slice()).map(|(d, pv)| d * pv).sum();
        let mut g = Vector::zeros(classes);
        for j in 0..classes {
            g[j] = inv * p[j] * (dp[j] - dot);
        }
        grads.push(g);
    }
    Ok((loss * inv, grads))
}

/// Regression loss between a predicted and a target state vector: mean
/// over coordinates of the squared error (`L2`) or of the Huber-style
/// transition (`SmoothL1`, quadratic inside |x| < 1, linear outside).
/// Returns the loss and the gradient with respect to the prediction.
pub fn future_pred_loss(
    kind: FutureLossKind,
    predicted: &Vector,
    target: &Vector,
) -> Result<(f64, Vector)> {
    if predicted.dim() != target.dim() {
        return Err(Error::DimensionMismatch(format!(
            "future prediction {} vs target {}",
            predicted.dim(),
            target.dim()
        )));
    }
    if predicted.dim() == 0 {
        return Err(Error::InvalidArgument("future loss on empty vectors".into()));
    }
    let inv = 1.0 / predicted.dim() as f64;
    let mut loss = 0.0;
    let mut grad = Vector::zeros(predicted.dim());
    for j in 0..predicted.dim() {
        let x = predicted[j] - target[j];
        match kind {
            FutureLossKind::L2 => {
                loss += x * x;
                grad[j] = 2.0 * x * inv;
            }
            FutureLossKind::SmoothL1 => {
                if x.abs() < 1.0 {
                    loss += 0.5 * x * x;
                    grad[j] = x * inv;
                } else {
                    loss += x.abs() - 0.5;
                    grad[j] = x.signum() * inv;
                }
            }
        }
    }
    Ok((loss * inv, grad))
}

/// Composite multi-task loss: classification plus lambda times the mean
/// per-step future-prediction loss over the same trained range.
#[derive(Debug, Clone)]
pub struct FspLoss {
    pub total: f64,
    pub classification: f64,
    /// Mean per-step future loss over the trained range; 0 when no future
    /// loss is selected.
    pub future_mean: f64,
    /// Per-step gradients w.r.t. pre-softmax logits, length `steps`.
    pub d_logits: Vec<Vector>,
    /// Per-step gradients w.r.t. the future predictions, length `steps`;
    /// empty when no future loss is selected.
    pub d_future: Vec<Vector>,
}

/// Evaluate the composite loss over the first `steps` entries of the
/// trace. `future_pred[t]` is the model's prediction at step t+1 and
/// `future_target[t]` the corresponding (constant) target; both must
/// cover at least `steps` entries when a future loss is selected.
pub fn fsp_total(
    selection: &LossSelection,
    probs: &[Vector],
    label: usize,
    future_pred: &[Vector],
    future_target: &[Vector],
    steps: usize,
    seq_len: usize,
) -> Result<FspLoss> {
    selection.validate()?;
    let (classification, d_logits) = match selection.classification {
        ClassLossKind::Average => average_ce(probs, label, steps)?,
        ClassLossKind::LinearWeighted => linear_weighted_ce(probs, label, steps, seq_len)?,
    };

    let Some(kind) = selection.future else {
        return Ok(FspLoss {
            total: classification,
            classification,
            future_mean: 0.0,
            d_logits,
            d_future: Vec::new(),
        });
    };

    if future_pred.len() < steps || future_target.len() < steps {
        return Err(Error::InvalidArgument(format!(
            "future predictions ({}) or targets ({}) do not cover {} trained steps",
            future_pred.len(),
            future_target.len(),
            steps
        )));
    }
    let inv = 1.0 / steps as f64;
    let scale = selection.lambda * inv;
    let mut future_sum = 0.0;
    let mut d_future = Vec::with_capacity(steps);
    for t in 0..steps {
        let (l, mut g) = future_pred_loss(kind, &future_pred[t], &future_target[t])?;
        future_sum += l;
        for v in g.as_mut_slice() {
            *v *= scale;
        }
        d_future.push(g);
    }
    let future_mean = future_sum * inv;
    Ok(FspLoss {
        total: classification + selection.lambda * future_mean,
        classification,
        future_mean,
        d_logits,
        d_future,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::softmax;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    fn prob(v: Vec<f64>) -> Vector {
        Vector::new(v).unwrap()
    }

    #[test]
    fn average_ce_matches_hand_value() {
        let trace = vec![prob(vec![0.5, 0.5]), prob(vec![0.25, 0.75])];
        let (loss, grads) = average_ce(&trace, 0, 2).unwrap();
        assert_close(loss, 1.03972, 1e-5);
        assert_eq!(grads.len(), 2);
    }

    #[test]
    fn average_ce_of_uniform_predictor_is_ln_n() {
        for t_prime in [1usize, 3, 10] {
            let n = 9;
            let trace = vec![prob(vec![1.0 / n as f64; n]); t_prime];
            let (loss, _) = average_ce(&trace, 4, t_prime).unwrap();
            assert_close(loss, (n as f64).ln(), 1e-12);
            assert_close(loss, 2.19722, 1e-5);
        }
    }

    #[test]
    fn false_positive_weight_is_exact() {
        for seq_len in [1usize, 7, 10, 100, 101] {
            for t in 1..=seq_len {
                let w = false_positive_weight(t, seq_len);
                assert_eq!(w.to_bits(), (t as f64 / seq_len as f64).to_bits());
            }
            assert_eq!(false_positive_weight(seq_len, seq_len), 1.0);
        }
    }

    #[test]
    fn linear_weighted_step_contribution_matches_hand_value() {
        // Ten steps; every step except t=5 predicts the true class with
        // certainty, so it contributes (numerically) nothing and the
        // total isolates step 5.
        let mut trace = vec![prob(vec![1.0, 0.0]); 10];
        trace[4] = prob(vec![0.8, 0.2]);
        let (loss, _) = linear_weighted_ce(&trace, 0, 10, 10).unwrap();
        assert_close(loss * 10.0, 0.33471, 1e-4);
    }

    #[test]
    fn linear_weighted_dominates_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(2..6);
            let steps = rng.gen_range(1..8);
            let seq_len = steps + rng.gen_range(0..4);
            let label = rng.gen_range(0..n);
            let trace: Vec<Vector> = (0..steps)
                .map(|_| {
                    let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                    softmax(&z).unwrap()
                })
                .collect();
            let (avg, _) = average_ce(&trace, label, steps).unwrap();
            let (lw, _) = linear_weighted_ce(&trace, label, steps, seq_len).unwrap();
            assert!(lw >= avg - 1e-12, "lw {lw} < avg {avg}");
            assert!(avg >= 0.0 && lw.is_finite());
        }
    }

    #[test]
    fn losses_survive_saturated_probabilities() {
        let trace = vec![prob(vec![0.0, 1.0]); 3];
        let (avg, _) = average_ce(&trace, 0, 3).unwrap();
        let (lw, _) = linear_weighted_ce(&trace, 0, 3, 3).unwrap();
        assert!(avg.is_finite() && lw.is_finite());
        assert_close(avg, -(PROB_EPS.ln()), 1.0);
    }

    #[test]
    fn trace_validation() {
        let trace = vec![prob(vec![0.5, 0.5])];
        assert!(average_ce(&trace, 0, 0).is_err());
        assert!(average_ce(&trace, 0, 2).is_err());
        assert!(average_ce(&trace, 2, 1).is_err());
        assert!(linear_weighted_ce(&trace, 0, 1, 0).is_err());
        let ragged = vec![prob(vec![0.5, 0.5]), prob(vec![1.0])];
        assert!(average_ce(&ragged, 0, 2).is_err());
    }

    #[test]
    fn future_loss_matches_hand_values() {
        let zero = prob(vec![0.0]);
        let (l, _) = future_pred_loss(FutureLossKind::SmoothL1, &prob(vec![0.5]), &zero).unwrap();
        assert_close(l, 0.125, 1e-12);
        let (l, _) = future_pred_loss(FutureLossKind::SmoothL1, &prob(vec![1.0]), &zero).unwrap();
        assert_close(l, 0.5, 1e-12);
        let (l, _) = future_pred_loss(FutureLossKind::SmoothL1, &prob(vec![2.0]), &zero).unwrap();
        assert_close(l, 1.5, 1e-12);
        let (l, _) = future_pred_loss(FutureLossKind::L2, &prob(vec![0.5]), &zero).unwrap();
        assert_close(l, 0.25, 1e-12);
    }

    // The two smooth-L1 branches agree at |x| = 1, and the loss stays
    // continuous just around the joint.
    #[test]
    fn smooth_l1_is_continuous_at_the_joint() {
        let zero = prob(vec![0.0]);
        for x in [1.0 - 1e-9, 1.0, 1.0 + 1e-9, -1.0 - 1e-9, -1.0] {
            let (l, _) =
                future_pred_loss(FutureLossKind::SmoothL1, &prob(vec![x]), &zero).unwrap();
            assert_close(l, 0.5, 1e-8);
        }
    }

    #[test]
    fn fsp_total_combines_terms() {
        let p = (-0.2f64).exp();
        let trace = vec![prob(vec![p, 1.0 - p])];
        let sel = LossSelection {
            classification: ClassLossKind::Average,
            future: Some(FutureLossKind::L2),
            lambda: 10.0,
        };
        // One-dimensional future state with squared error 0.03.
        let pred = vec![prob(vec![0.03f64.sqrt()])];
        let target = vec![prob(vec![0.0])];
        let out = fsp_total(&sel, &trace, 0, &pred, &target, 1, 1).unwrap();
        assert_close(out.classification, 0.2, 1e-12);
        assert_close(out.future_mean, 0.03, 1e-12);
        assert_close(out.total, 0.5, 1e-9);
    }

    #[test]
    fn lambda_zero_reduces_to_classification_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let n = rng.gen_range(2..5);
            let steps = rng.gen_range(1..6);
            let label = rng.gen_range(0..n);
            let trace: Vec<Vector> = (0..steps)
                .map(|_| {
                    let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                    softmax(&z).unwrap()
                })
                .collect();
            let h = 3;
            let preds: Vec<Vector> = (0..steps)
                .map(|_| prob((0..h).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect();
            let targets: Vec<Vector> = (0..steps)
                .map(|_| prob((0..h).map(|_| rng.gen_range(-1.0..1.0)).collect()))
                .collect();
            let sel = LossSelection {
                classification: ClassLossKind::Average,
                future: Some(FutureLossKind::SmoothL1),
                lambda: 0.0,
            };
            let out = fsp_total(&sel, &trace, label, &preds, &targets, steps, steps).unwrap();
            let (cls, _) = average_ce(&trace, label, steps).unwrap();
            assert_eq!(out.total.to_bits(), cls.to_bits());
            assert!(out.d_future.iter().all(|g| g.iter().all(|v| *v == 0.0)));
        }
    }

    #[test]
    fn fsp_validation() {
        let trace = vec![prob(vec![0.5, 0.5]); 2];
        let sel = LossSelection {
            classification: ClassLossKind::Average,
            future: Some(FutureLossKind::L2),
            lambda: 1.0,
        };
        // Future targets shorter than the trained range.
        let one = vec![prob(vec![0.0])];
        assert!(fsp_total(&sel, &trace, 0, &one, &one, 2, 2).is_err());
        // lambda > 0 without a future loss.
        let bad = LossSelection {
            classification: ClassLossKind::Average,
            future: None,
            lambda: 1.0,
        };
        assert!(bad.validate().is_err());
        assert!(fsp_total(&bad, &trace, 0, &[], &[], 2, 2).is_err());
        let negative = LossSelection {
            classification: ClassLossKind::Average,
            future: Some(FutureLossKind::L2),
            lambda: -1.0,
        };
        assert!(negative.validate().is_err());
    }

    // Central finite differences over the logits for both classification
    // losses, and over the prediction for both future losses.
    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        for _ in 0..50 {
            let n = rng.gen_range(2..5);
            let steps = rng.gen_range(1..5);
            let seq_len = steps + rng.gen_range(0..3);
            let label = rng.gen_range(0..n);
            let logits: Vec<Vec<f64>> = (0..steps)
                .map(|_| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let trace = |ls: &[Vec<f64>]| -> Vec<Vector> {
                ls.iter().map(|z| softmax(z).unwrap()).collect()
            };

            for weighted in [false, true] {
                let eval = |ls: &[Vec<f64>]| -> f64 {
                    let tr = trace(ls);
                    if weighted {
                        linear_weighted_ce(&tr, label, steps, seq_len).unwrap().0
                    } else {
                        average_ce(&tr, label, steps).unwrap().0
                    }
                };
                let tr = trace(&logits);
                let grads = if weighted {
                    linear_weighted_ce(&tr, label, steps, seq_len).unwrap().1
                } else {
                    average_ce(&tr, label, steps).unwrap().1
                };
                for t in 0..steps {
                    for j in 0..n {
                        let mut lp = logits.clone();
                        lp[t][j] += h;
                        let mut lm = logits.clone();
                        lm[t][j] -= h;
                        let num = (eval(&lp) - eval(&lm)) / (2.0 * h);
                        let ana = grads[t][j];
                        let rel = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-8);
                        assert!(rel < 1e-4, "weighted={weighted} rel {rel}");
                    }
                }
            }
        }

        for kind in [FutureLossKind::L2, FutureLossKind::SmoothL1] {
            for _ in 0..50 {
                let dim = rng.gen_range(1..5);
                let pred: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let target: Vec<f64> = (0..dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let tv = prob(target.clone());
                let (_, grad) = future_pred_loss(kind, &prob(pred.clone()), &tv).unwrap();
                for j in 0..dim {
                    // Stay off the smooth-L1 joint where the second
                    // derivative jumps.
                    if matches!(kind, FutureLossKind::SmoothL1)
                        && ((pred[j] - target[j]).abs() - 1.0).abs() < 1e-3
                    {
                        continue;
                    }
                    let mut pp = pred.clone();
                    pp[j] += h;
                    let mut pm = pred.clone();
                    pm[j] -= h;
                    let lp = future_pred_loss(kind, &prob(pp), &tv).unwrap().0;
                    let lm = future_pred_loss(kind, &prob(pm), &tv).unwrap().0;
                    let num = (lp - lm) / (2.0 * h);
                    let rel =
                        (grad[j] - num).abs() / grad[j].abs().max(num.abs()).max(1e-8);
                    assert!(rel < 1e-4, "{kind:?} rel {rel}");
                }
            }
        }
    }
}
