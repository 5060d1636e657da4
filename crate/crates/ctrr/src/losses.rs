//! Contrastive pair losses, the confidence-weighted batch objective, cross
//! entropy, and closed-form gradient references used by the gradient audit.
//!
//! Two pair-loss forms exist. The linear form scores a pair by the negative
//! sum of the two cross cosines; its gradient norm shrinks as a pair aligns,
//! so misaligned (often mislabeled) pairs dominate late training. The log
//! form `log(1 - cos)` reverses that ordering. The batch objective uses the
//! log form off-diagonal and keeps the linear form on the diagonal
//! (same-image pairs under two augmentations), with every cosine clamped to
//! `[-1 + margin, 1 - margin]` before any log.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// Default clamp margin for cosine similarities.
pub const DEFAULT_CLAMP_MARGIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Regularization strength. Non-negative.
    pub lambda: f64,
    /// Confidence threshold on inner products of classifier outputs, in [0, 1].
    /// `tau <= 1` guarantees the weight-matrix diagonal survives masking.
    pub tau: f64,
    /// Clamp margin for cosine similarities.
    pub clamp_margin: f64,
}

impl LossConfig {
    pub fn new(lambda: f64, tau: f64) -> Result<Self> {
        let cfg = LossConfig { lambda, tau, clamp_margin: DEFAULT_CLAMP_MARGIN };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidInput(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidInput(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        if !(self.clamp_margin > 0.0 && self.clamp_margin < 1.0) {
            return Err(Error::InvalidInput(format!("clamp_margin must be in (0, 1), got {}", self.clamp_margin)));
        }
        Ok(())
    }
}

/// Which pair-loss form the off-diagonal entries of the batch objective use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairLossForm {
    Linear,
    Log,
}

// --- plain-value pair losses -------------------------------------------------

fn unit(v: &[f64], op: &'static str) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm < crate::graph::MIN_ROW_NORM {
        return Err(Error::ZeroNorm { op, row: 0 });
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

fn cosine(a: &[f64], b: &[f64], op: &'static str) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch { op, detail: format!("{} vs {}", a.len(), b.len()) });
    }
    let ua = unit(a, op)?;
    let ub = unit(b, op)?;
    Ok(ua.iter().zip(&ub).map(|(x, y)| x * y).sum())
}

/// Linear pair loss gated by the label indicator:
/// `-(cos(q_i, z_j) + cos(q_j, z_i))` when the labels agree, else 0.
/// Gradient flows only through the `q` arguments; `z` arguments are treated
/// as stop-gradient values.
pub fn pair_loss_label(qi: &[f64], zj: &[f64], qj: &[f64], zi: &[f64], same_label: bool) -> Result<f64> {
    if !same_label {
        // still validate inputs so a zero vector never silently passes
        cosine(qi, zj, "pair_loss_label")?;
        cosine(qj, zi, "pair_loss_label")?;
        return Ok(0.0);
    }
    Ok(-(cosine(qi, zj, "pair_loss_label")? + cosine(qj, zi, "pair_loss_label")?))
}

/// Probability-product gate `1{p_i . p_j >= tau}`.
pub fn confidence_gate(pi: &[f64], pj: &[f64], tau: f64) -> Result<bool> {
    if pi.len() != pj.len() {
        return Err(Error::ShapeMismatch {
            op: "confidence_gate",
            detail: format!("{} vs {}", pi.len(), pj.len()),
        });
    }
    let prod: f64 = pi.iter().zip(pj).map(|(a, b)| a * b).sum();
    Ok(prod >= tau)
}

/// Linear pair loss gated by the classifier-confidence criterion instead of
/// labels.
pub fn pair_loss_confidence(
    qi: &[f64],
    zj: &[f64],
    qj: &[f64],
    zi: &[f64],
    pi: &[f64],
    pj: &[f64],
    tau: f64,
) -> Result<f64> {
    let gate = confidence_gate(pi, pj, tau)?;
    pair_loss_label(qi, zj, qj, zi, gate)
}

/// Log-form pair loss `(log(1 - s1) + log(1 - s2))` under the confidence
/// gate, with each cosine clamped into `[-1 + margin, 1 - margin]` first, so
/// the log can never blow up.
pub fn pair_loss_log_confidence(
    qi: &[f64],
    zj: &[f64],
    qj: &[f64],
    zi: &[f64],
    pi: &[f64],
    pj: &[f64],
    tau: f64,
    clamp_margin: f64,
) -> Result<f64> {
    let s1 = cosine(qi, zj, "pair_loss_log_confidence")?;
    let s2 = cosine(qj, zi, "pair_loss_log_confidence")?;
    if !confidence_gate(pi, pj, tau)? {
        return Ok(0.0);
    }
    let c = |s: f64| s.max(-1.0 + clamp_margin).min(1.0 - clamp_margin);
    Ok((1.0 - c(s1)).ln() + (1.0 - c(s2)).ln())
}

// --- graph builders (used for gradient audits and training) -------------------

/// Builds `-(cos(qi, sg(zj)) + cos(qj, sg(zi)))` on `g`. Gradient flows only
/// through the `q` nodes.
pub fn build_pair_linear(g: &mut Graph, qi: NodeId, zj: NodeId, qj: NodeId, zi: NodeId) -> Result<NodeId> {
    let zj = g.stop_gradient(zj);
    let zi = g.stop_gradient(zi);
    let qin = g.row_l2_normalize(qi)?;
    let zjn = g.row_l2_normalize(zj)?;
    let qjn = g.row_l2_normalize(qj)?;
    let zin = g.row_l2_normalize(zi)?;
    let d1 = g.dot(qin, zjn)?;
    let d2 = g.dot(qjn, zin)?;
    let s = g.add(d1, d2)?;
    g.scale(s, -1.0)
}

/// Builds `log(1 - clamp(cos(qi, sg(zj)))) + log(1 - clamp(cos(qj, sg(zi))))`.
pub fn build_pair_log(
    g: &mut Graph,
    qi: NodeId,
    zj: NodeId,
    qj: NodeId,
    zi: NodeId,
    clamp_margin: f64,
) -> Result<NodeId> {
    let zj = g.stop_gradient(zj);
    let zi = g.stop_gradient(zi);
    let qin = g.row_l2_normalize(qi)?;
    let zjn = g.row_l2_normalize(zj)?;
    let qjn = g.row_l2_normalize(qj)?;
    let zin = g.row_l2_normalize(zi)?;
    let term = |g: &mut Graph, a: NodeId, b: NodeId| -> Result<NodeId> {
        let d = g.dot(a, b)?;
        let c = g.clamp(d, -1.0 + clamp_margin, 1.0 - clamp_margin)?;
        let one = g.constant(Tensor::scalar(1.0)?);
        let gap = g.sub(one, c)?;
        g.log(gap)
    };
    let t1 = term(g, qin, zjn)?;
    let t2 = term(g, qjn, zin)?;
    g.add(t1, t2)
}

// --- pair weights --------------------------------------------------------------

/// Row-normalized pair weights. Entries are non-negative, every row sums to 1
/// within 1e-12, and the diagonal is strictly positive. The matrix is a plain
/// value, never a graph node: gradients must not flow through it.
#[derive(Debug, Clone)]
pub struct PairWeights {
    matrix: Tensor,
}

impl PairWeights {
    pub fn new(matrix: Tensor) -> Result<Self> {
        let (r, c) = matrix.dims2("pair_weights")?;
        if r != c {
            return Err(Error::ShapeMismatch {
                op: "pair_weights",
                detail: format!("expected square matrix, got {:?}", matrix.shape()),
            });
        }
        for i in 0..r {
            let row = matrix.row(i);
            if row.iter().any(|&v| v < 0.0) {
                return Err(Error::InvalidInput(format!("negative pair weight in row {}", i)));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidInput(format!("pair-weight row {} sums to {}", i, sum)));
            }
            if row[i] <= 0.0 {
                return Err(Error::InvalidInput(format!("zero diagonal pair weight in row {}", i)));
            }
        }
        Ok(PairWeights { matrix })
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn batch_size(&self) -> usize {
        self.matrix.shape()[0]
    }
}

/// Confidence weights from clamped classifier outputs `P` (rows of `P` are
/// clamped probabilities): `S = P P^T` with the diagonal overwritten to 1,
/// entries below `tau` zeroed, each row divided by its row sum. The diagonal
/// equal to 1 with `tau <= 1` guarantees positive row sums.
pub fn confidence_weights(p: &Tensor, tau: f64) -> Result<PairWeights> {
    let (b, _k) = p.dims2("confidence_weights")?;
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::InvalidInput(format!("tau must be in [0, 1], got {}", tau)));
    }
    let mut s = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            if i == j {
                s[i * b + j] = 1.0;
            } else {
                let v: f64 = p.row(i).iter().zip(p.row(j)).map(|(a, c)| a * c).sum();
                s[i * b + j] = if v >= tau { v } else { 0.0 };
            }
        }
    }
    for i in 0..b {
        let sum: f64 = s[i * b..(i + 1) * b].iter().sum();
        for v in &mut s[i * b..(i + 1) * b] {
            *v /= sum;
        }
    }
    PairWeights::new(Tensor::new(vec![b, b], s)?)
}

/// Pair weights from a label indicator: same-label entries share the row mass
/// equally. Used when training against the label-gated linear loss.
pub fn label_weights(labels: &[usize]) -> Result<PairWeights> {
    let b = labels.len();
    if b == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let mut s = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            if labels[i] == labels[j] {
                s[i * b + j] = 1.0;
            }
        }
    }
    for i in 0..b {
        let sum: f64 = s[i * b..(i + 1) * b].iter().sum();
        for v in &mut s[i * b..(i + 1) * b] {
            *v /= sum;
        }
    }
    PairWeights::new(Tensor::new(vec![b, b], s)?)
}

// --- batch objective ------------------------------------------------------------

/// Weighted batch contrastive objective.
///
/// With `C1 = norm(Q1) . norm(Z2)^T` and `C2 = norm(Q2) . norm(Z1)^T`
/// (entries clamped to `[-1 + margin, 1 - margin]`), diagonal entries
/// contribute `-C_ii` and off-diagonal entries contribute the chosen form
/// (`-C_ij` or `log(1 - C_ij)`). Each of the 2B rows is weighted by `w`,
/// row-summed, and the result averaged over the 2B rows.
///
/// `z1`/`z2` must already be stop-gradient nodes; this function wraps them
/// again so gradient flow through them is impossible either way.
pub fn batch_contrastive_objective(
    g: &mut Graph,
    q1: NodeId,
    q2: NodeId,
    z1: NodeId,
    z2: NodeId,
    w: &PairWeights,
    off_diagonal: PairLossForm,
    clamp_margin: f64,
) -> Result<NodeId> {
    let (b, _d) = g.value(q1).dims2("batch_contrastive_objective")?;
    if w.batch_size() != b {
        return Err(Error::ShapeMismatch {
            op: "batch_contrastive_objective",
            detail: format!("weights for batch {}, inputs have {}", w.batch_size(), b),
        });
    }
    let z1 = g.stop_gradient(z1);
    let z2 = g.stop_gradient(z2);
    let q1n = g.row_l2_normalize(q1)?;
    let q2n = g.row_l2_normalize(q2)?;
    let z1n = g.row_l2_normalize(z1)?;
    let z2n = g.row_l2_normalize(z2)?;

    let w_const = g.constant(w.matrix().clone());
    let neg_eye = {
        let mut t = Tensor::eye(b);
        for v in t.data_mut() {
            *v = -*v;
        }
        g.constant(t)
    };
    let mut off_mask = Tensor::ones(vec![b, b]);
    for i in 0..b {
        off_mask.data_mut()[i * b + i] = 0.0;
    }
    let off_mask = g.constant(off_mask);
    let ones = g.constant(Tensor::ones(vec![b, b]));

    let half = |g: &mut Graph, q: NodeId, z: NodeId| -> Result<NodeId> {
        let zt = g.transpose(z)?;
        let cos = g.matmul(q, zt)?;
        let c = g.clamp(cos, -1.0 + clamp_margin, 1.0 - clamp_margin)?;
        let entries = match off_diagonal {
            PairLossForm::Linear => g.scale(c, -1.0)?,
            PairLossForm::Log => {
                let diag_part = g.mul(c, neg_eye)?;
                let gap = g.sub(ones, c)?;
                let lg = g.log(gap)?;
                let off_part = g.mul(lg, off_mask)?;
                g.add(diag_part, off_part)?
            }
        };
        let weighted = g.mul(entries, w_const)?;
        g.sum(weighted)
    };

    let s1 = half(g, q1n, z2n)?;
    let s2 = half(g, q2n, z1n)?;
    let total = g.add(s1, s2)?;
    // mean over the 2B weighted row sums
    g.scale(total, 1.0 / (2.0 * b as f64))
}

// --- cross entropy ----------------------------------------------------------------

/// Checks that every label row sums to 1.
fn validate_label_rows(labels: &Tensor) -> Result<()> {
    let (r, _) = labels.dims2("cross_entropy")?;
    for i in 0..r {
        let sum: f64 = labels.row(i).sum_check();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidInput(format!("label row {} sums to {}", i, sum)));
        }
    }
    Ok(())
}

trait RowSum {
    fn sum_check(&self) -> f64;
}
impl RowSum for [f64] {
    fn sum_check(&self) -> f64 {
        self.iter().sum()
    }
}

/// Mean over the batch of `-sum_k y_k log p_k`. `p` holds clamped
/// probabilities; `labels` rows (hard one-hot or soft) must sum to 1.
pub fn build_cross_entropy(g: &mut Graph, p: NodeId, labels: &Tensor) -> Result<NodeId> {
    validate_label_rows(labels)?;
    let (pb, pk) = g.value(p).dims2("cross_entropy")?;
    if labels.shape() != [pb, pk] {
        return Err(Error::ShapeMismatch {
            op: "cross_entropy",
            detail: format!("p {:?} vs labels {:?}", g.value(p).shape(), labels.shape()),
        });
    }
    let y = g.constant(labels.clone());
    let logp = g.log(p)?;
    let prod = g.mul(y, logp)?;
    let total = g.sum(prod)?;
    g.scale(total, -1.0 / pb as f64)
}

/// Plain-value cross entropy over clamped probabilities.
pub fn cross_entropy(p: &Tensor, labels: &Tensor) -> Result<f64> {
    let mut g = Graph::new();
    let pi = g.constant(p.clone());
    let ce = build_cross_entropy(&mut g, pi, labels)?;
    g.value(ce).item()
}

/// Per-example `-sum_k y_k log p_k` values, used by label correction.
pub fn per_sample_cross_entropy(p: &Tensor, labels: &Tensor) -> Result<Vec<f64>> {
    validate_label_rows(labels)?;
    let (b, k) = p.dims2("per_sample_cross_entropy")?;
    if labels.shape() != [b, k] {
        return Err(Error::ShapeMismatch {
            op: "per_sample_cross_entropy",
            detail: format!("p {:?} vs labels {:?}", p.shape(), labels.shape()),
        });
    }
    let mut out = Vec::with_capacity(b);
    for i in 0..b {
        let mut v = 0.0;
        for (y, pv) in labels.row(i).iter().zip(p.row(i)) {
            if *y != 0.0 {
                if *pv <= 0.0 {
                    return Err(Error::LogDomain { index: i, value: *pv });
                }
                v -= y * pv.ln();
            }
        }
        out.push(v);
    }
    Ok(out)
}

/// One-hot rows for hard labels.
pub fn one_hot(labels: &[usize], num_classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= num_classes {
            return Err(Error::InvalidInput(format!("label {} out of range {}", y, num_classes)));
        }
        data[i * num_classes + y] = 1.0;
    }
    Tensor::new(vec![labels.len(), num_classes], data)
}

/// Total objective `ce + lambda * ctr`.
pub fn total_objective(ce: f64, ctr: f64, lambda: f64) -> Result<f64> {
    if !ce.is_finite() || !ctr.is_finite() || !lambda.is_finite() {
        return Err(Error::NonFinite { op: "total_objective", detail: format!("ce={} ctr={} lambda={}", ce, ctr, lambda) });
    }
    Ok(ce + lambda * ctr)
}

// --- closed-form gradient references ------------------------------------------------

/// Closed-form gradient of the linear pair loss with respect to `q_i`,
/// with the prediction head taken as identity and `z = stopgrad(q)`:
/// `-(1/|q_i|) (u_j - t u_i)` where `u` are unit vectors and `t = u_i . u_j`.
/// Returns the gradient and its squared norm `c_i (1 - t^2)`, `c_i = 1/|q_i|^2`.
pub fn linear_pair_grad(qi: &[f64], qj: &[f64]) -> Result<(Vec<f64>, f64)> {
    let norm_qi = qi.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_qi < crate::graph::MIN_ROW_NORM {
        return Err(Error::ZeroNorm { op: "linear_pair_grad", row: 0 });
    }
    let ui = unit(qi, "linear_pair_grad")?;
    let uj = unit(qj, "linear_pair_grad")?;
    let t: f64 = ui.iter().zip(&uj).map(|(a, b)| a * b).sum();
    let grad: Vec<f64> = ui
        .iter()
        .zip(&uj)
        .map(|(&a, &b)| -(b - t * a) / norm_qi)
        .collect();
    let ci = 1.0 / (norm_qi * norm_qi);
    Ok((grad, ci * (1.0 - t * t)))
}

/// The two closed-form candidates for the squared gradient norm of the
/// log-form pair loss under the same identity-head reduction. The gradient
/// audit reports which candidate the finite-difference oracle matches.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LogPairGradNorms {
    /// `c_i (1 + t)`.
    pub one_plus_t: f64,
    /// `c_i (1 + t) / (1 - t)` from composing the chain rule through
    /// `log(1 - s)`.
    pub ratio: f64,
}

/// Requires `t < 1 - clamp_margin`; at the clamp ceiling the log form is flat
/// and neither candidate applies.
pub fn log_pair_grad_norms(qi: &[f64], qj: &[f64], clamp_margin: f64) -> Result<LogPairGradNorms> {
    let norm_qi = qi.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm_qi < crate::graph::MIN_ROW_NORM {
        return Err(Error::ZeroNorm { op: "log_pair_grad_norms", row: 0 });
    }
    let ui = unit(qi, "log_pair_grad_norms")?;
    let uj = unit(qj, "log_pair_grad_norms")?;
    let t: f64 = ui.iter().zip(&uj).map(|(a, b)| a * b).sum();
    if t >= 1.0 - clamp_margin {
        return Err(Error::InvalidInput(format!(
            "cosine {} is at or beyond the clamp ceiling {}",
            t,
            1.0 - clamp_margin
        )));
    }
    let ci = 1.0 / (norm_qi * norm_qi);
    Ok(LogPairGradNorms { one_plus_t: ci * (1.0 + t), ratio: ci * (1.0 + t) / (1.0 - t) })
}
