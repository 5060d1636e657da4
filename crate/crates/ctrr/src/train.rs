//! Training loop, SGD with momentum and weight decay, evaluation,
//! memorization measurement, and the frozen-encoder linear probe.
//!
//! Every batch draws two strongly augmented views for the contrastive branch
//! and one weakly augmented view for the classification branch. The
//! representations entering the cosine matrices are stop-gradient values, the
//! confidence weights are detached, and the classifier feeds off the shared
//! backbone. Runs are pure functions of their config seed: shuffling,
//! augmentation, and initialization draw from independent derived streams.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{augment_rows, correct_labels, AugmentSpec, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::{
    batch_contrastive_objective, build_cross_entropy, confidence_weights, label_weights, one_hot,
    per_sample_cross_entropy, PairLossForm, DEFAULT_CLAMP_MARGIN,
};
use crate::model::{
    backbone_forward, classifier_forward, encode, init_params, predict_labels, predictor_forward,
    projection_forward, register_params, reinit_classifier, ArchSpec, ModelIds, ModelParams,
};
use crate::rng::{derive_seed, stream, STREAM_AUGMENT, STREAM_SHUFFLE};
use crate::tensor::Tensor;

/// Which contrastive regularizer the run trains with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerKind {
    /// Linear pair loss gated by the (possibly noisy) dataset labels.
    LabelLinear,
    /// Linear pair loss gated by classifier confidence.
    ConfidenceLinear,
    /// Log-form pair loss gated by classifier confidence.
    #[default]
    ConfidenceLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub tau: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default)]
    pub label_correction: bool,
    #[serde(default = "default_correction_start")]
    pub correction_start_epoch: usize,
    #[serde(default)]
    pub regularizer: RegularizerKind,
    #[serde(default = "default_clamp_margin")]
    pub clamp_margin: f64,
    #[serde(default = "AugmentSpec::weak_default")]
    pub weak_augment: AugmentSpec,
    #[serde(default = "AugmentSpec::strong_default")]
    pub strong_augment: AugmentSpec,
}

fn default_correction_start() -> usize {
    10
}

fn default_clamp_margin() -> f64 {
    DEFAULT_CLAMP_MARGIN
}

impl TrainConfig {
    /// Desk-scale defaults: lr 0.02, momentum 0.9, weight decay 5e-4,
    /// batch 256, lambda 50, tau 0.4, 60 epochs, constant learning rate.
    pub fn desk_default(seed: u64) -> Self {
        TrainConfig {
            lambda: 50.0,
            tau: 0.4,
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            batch_size: 256,
            epochs: 60,
            seed,
            label_correction: false,
            correction_start_epoch: default_correction_start(),
            regularizer: RegularizerKind::ConfidenceLog,
            clamp_margin: DEFAULT_CLAMP_MARGIN,
            weak_augment: AugmentSpec::weak_default(),
            strong_augment: AugmentSpec::strong_default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidInput(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidInput(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidInput(format!("weight_decay must be >= 0, got {}", self.weight_decay)));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidInput("batch_size must be >= 2".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidInput("epochs must be >= 1".into()));
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidInput(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::InvalidInput(format!("tau must be in [0, 1], got {}", self.tau)));
        }
        if self.label_correction && self.correction_start_epoch == 0 {
            return Err(Error::InvalidInput("correction_start_epoch must be >= 1".into()));
        }
        if !(self.clamp_margin > 0.0 && self.clamp_margin < 1.0) {
            return Err(Error::InvalidInput(format!("clamp_margin must be in (0, 1), got {}", self.clamp_margin)));
        }
        self.weak_augment.validate()?;
        self.strong_augment.validate()?;
        Ok(())
    }
}

/// Velocity tensors mirroring the parameter layout, initialized to zero.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<(Tensor, Tensor)>,
}

impl SgdState {
    pub fn zeros(params: &ModelParams) -> Self {
        let velocity = params
            .layers()
            .iter()
            .map(|l| (Tensor::zeros(l.weight.shape().to_vec()), Tensor::zeros(l.bias.shape().to_vec())))
            .collect();
        SgdState { velocity }
    }
}

/// One SGD update: `g' = g + weight_decay * theta; v <- momentum * v + g';
/// theta <- theta - lr * v`. Gradients arrive in the fixed layer traversal
/// order as `(weight_grad, bias_grad)` pairs.
pub fn sgd_step(
    params: &mut ModelParams,
    grads: &[(Tensor, Tensor)],
    state: &mut SgdState,
    cfg: &TrainConfig,
) -> Result<()> {
    let names: Vec<String> = params
        .tensors()
        .iter()
        .map(|(group, idx, _, _)| format!("{}.{}", group, idx))
        .collect();
    let layers = params.layers_mut();
    if grads.len() != layers.len() || state.velocity.len() != layers.len() {
        return Err(Error::ShapeMismatch {
            op: "sgd_step",
            detail: format!("{} grads for {} layers", grads.len(), layers.len()),
        });
    }
    for (((layer, grad), vel), name) in layers.into_iter().zip(grads).zip(&mut state.velocity).zip(&names) {
        for (theta, g, v, part) in [
            (&mut layer.weight, &grad.0, &mut vel.0, "weight"),
            (&mut layer.bias, &grad.1, &mut vel.1, "bias"),
        ] {
            if g.shape() != theta.shape() {
                return Err(Error::ShapeMismatch {
                    op: "sgd_step",
                    detail: format!("{}.{}: grad {:?} vs param {:?}", name, part, g.shape(), theta.shape()),
                });
            }
            if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    op: "sgd_step",
                    detail: format!("gradient for {}.{} at flat index {}", name, part, i),
                });
            }
            let td = theta.data_mut();
            let vd = v.data_mut();
            for i in 0..td.len() {
                let gp = g.data()[i] + cfg.weight_decay * td[i];
                vd[i] = cfg.momentum * vd[i] + gp;
                td[i] -= cfg.learning_rate * vd[i];
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub ce_loss: f64,
    pub ctr_loss: f64,
    pub test_accuracy: f64,
    pub memorization: f64,
    pub clean_train_accuracy: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub records: Vec<EpochRecord>,
}

impl RunMetrics {
    pub fn final_record(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn best_by_test_accuracy(&self) -> Option<&EpochRecord> {
        self.records
            .iter()
            .reduce(|best, r| if r.test_accuracy > best.test_accuracy { r } else { best })
    }

    /// CSV with the stable column order
    /// `epoch,train_loss,ce_loss,ctr_loss,test_accuracy,memorization,clean_train_accuracy`;
    /// floats carry 17 significant digits.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "epoch",
            "train_loss",
            "ce_loss",
            "ctr_loss",
            "test_accuracy",
            "memorization",
            "clean_train_accuracy",
        ])?;
        for r in &self.records {
            let f = crate::artifact::fmt_f64;
            w.write_record([
                r.epoch.to_string(),
                f(r.train_loss),
                f(r.ce_loss),
                f(r.ctr_loss),
                f(r.test_accuracy),
                f(r.memorization),
                f(r.clean_train_accuracy),
            ])?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Format(e.to_string()))?)
            .map_err(|e| Error::Format(e.to_string()))
    }
}

const EVAL_CHUNK: usize = 512;

/// Fraction of rows whose predicted class matches `labels`.
pub fn accuracy(params: &ModelParams, features: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, _) = features.dims2("accuracy")?;
    if n == 0 {
        return Err(Error::InvalidInput("accuracy over empty set".into()));
    }
    let mut hits = 0usize;
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = features.gather_rows(chunk)?;
        let preds = predict_labels(params, &x)?;
        for (p, &i) in preds.iter().zip(chunk) {
            if *p == labels[i] {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / n as f64)
}

/// Fraction of flipped examples the classifier predicts as their (wrong)
/// labels. Undefined, hence an error, when nothing is flipped.
pub fn memorization(params: &ModelParams, ds: &Dataset) -> Result<f64> {
    ds.validate()?;
    let flipped: Vec<usize> = (0..ds.len()).filter(|&i| ds.flipped_mask[i]).collect();
    if flipped.is_empty() {
        return Err(Error::InvalidInput("memorization is undefined with zero flipped examples".into()));
    }
    let mut hits = 0usize;
    for chunk in flipped.chunks(EVAL_CHUNK) {
        let x = ds.features.gather_rows(chunk)?;
        let preds = predict_labels(params, &x)?;
        for (p, &i) in preds.iter().zip(chunk) {
            if *p == ds.noisy_labels[i] {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / flipped.len() as f64)
}

/// Mean within-class and between-class cosine similarity of encoder outputs
/// over a dataset, grouped by true labels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct CosineStats {
    pub within_class: f64,
    pub between_class: f64,
}

pub fn representation_cosine_stats(params: &ModelParams, ds: &Dataset) -> Result<CosineStats> {
    ds.validate()?;
    let n = ds.len();
    let mut class_sums: Vec<Vec<f64>> = Vec::new();
    let mut class_counts = vec![0usize; ds.num_classes];
    let idx: Vec<usize> = (0..n).collect();
    let mut dim = 0usize;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let x = ds.features.gather_rows(chunk)?;
        let z = encode(params, &x)?;
        let (rows, d) = z.dims2("representation_cosine_stats")?;
        dim = d;
        if class_sums.is_empty() {
            class_sums = vec![vec![0.0; d]; ds.num_classes];
        }
        for r in 0..rows {
            let row = z.row(r);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < crate::graph::MIN_ROW_NORM {
                return Err(Error::ZeroNorm { op: "representation_cosine_stats", row: chunk[r] });
            }
            let c = ds.true_labels[chunk[r]];
            class_counts[c] += 1;
            for (s, v) in class_sums[c].iter_mut().zip(row) {
                *s += v / norm;
            }
        }
    }
    // pairwise cosine sums recovered from |sum of unit vectors|^2
    let mut within_num = 0.0;
    let mut within_den = 0.0;
    let mut total = vec![0.0; dim];
    let mut sum_sq_class = 0.0;
    let mut sum_sq_count = 0usize;
    for (c, &count) in class_counts.iter().enumerate() {
        let sq: f64 = class_sums[c].iter().map(|v| v * v).sum();
        sum_sq_class += sq;
        sum_sq_count += count * count;
        if count >= 2 {
            within_num += sq - count as f64;
            within_den += (count * (count - 1)) as f64;
        }
        for (t, v) in total.iter_mut().zip(&class_sums[c]) {
            *t += v;
        }
    }
    let total_sq: f64 = total.iter().map(|v| v * v).sum();
    let between_pairs = (n * n - sum_sq_count) as f64;
    Ok(CosineStats {
        within_class: if within_den > 0.0 { within_num / within_den } else { 1.0 },
        between_class: if between_pairs > 0.0 { (total_sq - sum_sq_class) / between_pairs } else { 0.0 },
    })
}

struct StepLosses {
    total: f64,
    ce: f64,
    ctr: f64,
}

/// Graph handles for one batch forward pass of the full model.
pub struct ForwardNodes {
    pub q1: crate::graph::NodeId,
    pub q2: crate::graph::NodeId,
    pub z1: crate::graph::NodeId,
    pub z2: crate::graph::NodeId,
    pub softmax: crate::graph::NodeId,
    pub clamped: crate::graph::NodeId,
}

/// Both strong views through encoder and prediction head (with stop-gradient
/// copies of the projections), the weak view through the classifier.
pub fn build_forward(
    g: &mut Graph,
    ids: &ModelIds,
    strong1: Tensor,
    strong2: Tensor,
    weak: Tensor,
) -> Result<ForwardNodes> {
    let x1 = g.constant(strong1);
    let x2 = g.constant(strong2);
    let f1 = backbone_forward(g, ids, x1)?;
    let f2 = backbone_forward(g, ids, x2)?;
    let e1 = projection_forward(g, ids, f1)?;
    let e2 = projection_forward(g, ids, f2)?;
    let z1 = g.stop_gradient(e1);
    let z2 = g.stop_gradient(e2);
    let q1 = predictor_forward(g, ids, e1)?;
    let q2 = predictor_forward(g, ids, e2)?;
    let x3 = g.constant(weak);
    let f3 = backbone_forward(g, ids, x3)?;
    let (softmax, clamped) = classifier_forward(g, ids, f3)?;
    Ok(ForwardNodes { q1, q2, z1, z2, softmax, clamped })
}

/// Loss nodes for one batch given detached pair weights and label targets.
pub struct LossNodes {
    pub total: crate::graph::NodeId,
    pub ce: crate::graph::NodeId,
    pub ctr: crate::graph::NodeId,
}

pub fn build_losses(
    g: &mut Graph,
    fwd: &ForwardNodes,
    weights: &crate::losses::PairWeights,
    form: PairLossForm,
    targets: &Tensor,
    lambda: f64,
    clamp_margin: f64,
) -> Result<LossNodes> {
    let ctr = batch_contrastive_objective(g, fwd.q1, fwd.q2, fwd.z1, fwd.z2, weights, form, clamp_margin)?;
    let ce = build_cross_entropy(g, fwd.clamped, targets)?;
    let scaled_ctr = g.scale(ctr, lambda)?;
    let total = g.add(ce, scaled_ctr)?;
    Ok(LossNodes { total, ce, ctr })
}

/// Detached pair weights for the configured regularizer.
pub fn pair_weights_for(
    regularizer: RegularizerKind,
    clamped_probs: &Tensor,
    batch_labels: &[usize],
    tau: f64,
) -> Result<(crate::losses::PairWeights, PairLossForm)> {
    Ok(match regularizer {
        RegularizerKind::LabelLinear => (label_weights(batch_labels)?, PairLossForm::Linear),
        RegularizerKind::ConfidenceLinear => {
            (confidence_weights(clamped_probs, tau)?, PairLossForm::Linear)
        }
        RegularizerKind::ConfidenceLog => {
            (confidence_weights(clamped_probs, tau)?, PairLossForm::Log)
        }
    })
}

fn collect_grads(grads: &crate::graph::Gradients, ids: &ModelIds) -> Vec<(Tensor, Tensor)> {
    ids.backbone
        .iter()
        .chain(&ids.projection)
        .chain(&ids.predictor)
        .chain(std::iter::once(&ids.classifier))
        .map(|&(w, b)| (grads.wrt(w).clone(), grads.wrt(b).clone()))
        .collect()
}

fn train_step(
    cfg: &TrainConfig,
    train: &Dataset,
    batch: &[usize],
    epoch: usize,
    params: &mut ModelParams,
    state: &mut SgdState,
) -> Result<StepLosses> {
    let strong1 = augment_rows(
        &train.features,
        batch,
        &cfg.strong_augment,
        derive_seed(cfg.seed, &[STREAM_AUGMENT, epoch as u64, 0]),
    )?;
    let strong2 = augment_rows(
        &train.features,
        batch,
        &cfg.strong_augment,
        derive_seed(cfg.seed, &[STREAM_AUGMENT, epoch as u64, 1]),
    )?;
    let weak = augment_rows(
        &train.features,
        batch,
        &cfg.weak_augment,
        derive_seed(cfg.seed, &[STREAM_AUGMENT, epoch as u64, 2]),
    )?;
    let batch_labels: Vec<usize> = batch.iter().map(|&i| train.noisy_labels[i]).collect();

    let mut g = Graph::new();
    let ids = register_params(&mut g, params);
    let fwd = build_forward(&mut g, &ids, strong1, strong2, weak)?;

    let (weights, form) = pair_weights_for(cfg.regularizer, g.value(fwd.clamped), &batch_labels, cfg.tau)?;
    let onehot = one_hot(&batch_labels, train.num_classes)?;
    let targets = if cfg.label_correction && epoch >= cfg.correction_start_epoch {
        let per_sample = per_sample_cross_entropy(g.value(fwd.clamped), &onehot)?;
        // predictions come from the pre-clamp softmax so rows sum to 1
        correct_labels(&onehot, g.value(fwd.softmax), &per_sample)?
    } else {
        onehot
    };
    let nodes = build_losses(&mut g, &fwd, &weights, form, &targets, cfg.lambda, cfg.clamp_margin)?;

    let losses = StepLosses {
        total: g.value(nodes.total).item()?,
        ce: g.value(nodes.ce).item()?,
        ctr: g.value(nodes.ctr).item()?,
    };
    let grads = g.backward(nodes.total)?;
    let grad_pairs = collect_grads(&grads, &ids);
    sgd_step(params, &grad_pairs, state, cfg)?;
    Ok(losses)
}

fn check_data(arch: &ArchSpec, train: &Dataset, test: &Dataset) -> Result<()> {
    train.validate()?;
    test.validate()?;
    if train.dim() != arch.input_dim || test.dim() != arch.input_dim {
        return Err(Error::ShapeMismatch {
            op: "train_run",
            detail: format!(
                "arch expects input_dim {}, data has {}/{}",
                arch.input_dim,
                train.dim(),
                test.dim()
            ),
        });
    }
    if train.num_classes != arch.num_classes || test.num_classes != arch.num_classes {
        return Err(Error::InvalidInput(format!(
            "arch expects {} classes, data has {}/{}",
            arch.num_classes, train.num_classes, test.num_classes
        )));
    }
    Ok(())
}

fn epoch_record(
    epoch: usize,
    sums: (f64, f64, f64),
    rows: f64,
    params: &ModelParams,
    train: &Dataset,
    test: &Dataset,
) -> Result<EpochRecord> {
    // memorization is reported as 0 when the dataset carries no flips; the
    // standalone metric errors instead because the ratio is undefined
    let mem = if train.flipped_count() > 0 { memorization(params, train)? } else { 0.0 };
    Ok(EpochRecord {
        epoch,
        train_loss: sums.0 / rows,
        ce_loss: sums.1 / rows,
        ctr_loss: sums.2 / rows,
        test_accuracy: accuracy(params, &test.features, &test.true_labels)?,
        memorization: mem,
        clean_train_accuracy: accuracy(params, &train.features, &train.true_labels)?,
    })
}

/// Trains the full objective on `train` and evaluates on `test` each epoch.
/// Deterministic in `cfg.seed`.
pub fn train_run(
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    arch: &ArchSpec,
) -> Result<(ModelParams, RunMetrics)> {
    cfg.validate()?;
    arch.validate()?;
    check_data(arch, train, test)?;
    let mut params = init_params(arch, cfg.seed)?;
    let mut state = SgdState::zeros(&params);
    let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE, &[]);
    let mut metrics = RunMetrics::default();
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut sums = (0.0, 0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            let l = train_step(cfg, train, batch, epoch, &mut params, &mut state)
                .map_err(|e| Error::InvalidInput(format!("epoch {}: {}", epoch, e)))?;
            let b = batch.len() as f64;
            sums.0 += l.total * b;
            sums.1 += l.ce * b;
            sums.2 += l.ctr * b;
        }
        metrics
            .records
            .push(epoch_record(epoch, sums, train.len() as f64, &params, train, test)?);
    }
    Ok((params, metrics))
}

/// Fine-tunes only the (re-initialized) linear classifier with cross entropy
/// on `train`'s noisy labels; the encoder and prediction head stay bitwise
/// frozen. Errors if the probe would be over-parameterized
/// (classifier parameters / sample count >= 1).
pub fn linear_probe(
    frozen: &ModelParams,
    arch: &ArchSpec,
    train: &Dataset,
    test: &Dataset,
    probe_cfg: &TrainConfig,
) -> Result<(ModelParams, RunMetrics)> {
    probe_cfg.validate()?;
    arch.validate()?;
    check_data(arch, train, test)?;
    let ratio = arch.classifier_param_count() as f64 / train.len() as f64;
    if ratio >= 1.0 {
        return Err(Error::InvalidInput(format!(
            "probe is over-parameterized: {} classifier params for {} samples",
            arch.classifier_param_count(),
            train.len()
        )));
    }
    let mut params = frozen.clone();
    reinit_classifier(&mut params, arch, probe_cfg.seed);
    let mut state = SgdState::zeros(&params);
    let mut shuffle_rng = stream(probe_cfg.seed, STREAM_SHUFFLE, &[]);
    let mut metrics = RunMetrics::default();
    for epoch in 1..=probe_cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        let mut sums = (0.0, 0.0, 0.0);
        for batch in order.chunks(probe_cfg.batch_size) {
            let weak = augment_rows(
                &train.features,
                batch,
                &probe_cfg.weak_augment,
                derive_seed(probe_cfg.seed, &[STREAM_AUGMENT, epoch as u64, 2]),
            )?;
            let batch_labels: Vec<usize> = batch.iter().map(|&i| train.noisy_labels[i]).collect();
            let mut g = Graph::new();
            let ids = register_params(&mut g, &params);
            let x = g.constant(weak);
            let f = backbone_forward(&mut g, &ids, x)?;
            let (_, clamped) = classifier_forward(&mut g, &ids, f)?;
            let onehot = one_hot(&batch_labels, train.num_classes)?;
            let ce = build_cross_entropy(&mut g, clamped, &onehot)?;
            let ce_val = g.value(ce).item()?;
            let grads = g.backward(ce)?;
            let grad = (grads.wrt(ids.classifier.0).clone(), grads.wrt(ids.classifier.1).clone());
            probe_sgd_classifier(&mut params, &grad, &mut state, probe_cfg)?;
            let b = batch.len() as f64;
            sums.0 += ce_val * b;
            sums.1 += ce_val * b;
        }
        metrics
            .records
            .push(epoch_record(epoch, sums, train.len() as f64, &params, train, test)?);
    }
    Ok((params, metrics))
}

/// Momentum update applied to the classifier only; frozen layers see neither
/// gradients nor weight decay.
fn probe_sgd_classifier(
    params: &mut ModelParams,
    grad: &(Tensor, Tensor),
    state: &mut SgdState,
    cfg: &TrainConfig,
) -> Result<()> {
    let slot = state.velocity.len() - 1;
    let layer = &mut params.classifier;
    let vel = &mut state.velocity[slot];
    for (theta, g, v) in [
        (&mut layer.weight, &grad.0, &mut vel.0),
        (&mut layer.bias, &grad.1, &mut vel.1),
    ] {
        if let Some(i) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "sgd_step",
                detail: format!("gradient for classifier.0 at flat index {}", i),
            });
        }
        let td = theta.data_mut();
        let vd = v.data_mut();
        for i in 0..td.len() {
            let gp = g.data()[i] + cfg.weight_decay * td[i];
            vd[i] = cfg.momentum * vd[i] + gp;
            td[i] -= cfg.learning_rate * vd[i];
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_blobs;

    fn tiny_arch() -> ArchSpec {
        ArchSpec {
            input_dim: 8,
            backbone_widths: vec![12],
            projection_widths: vec![12, 12, 6],
            prediction_widths: vec![6, 6],
            num_classes: 3,
        }
    }

    fn tiny_cfg(seed: u64, epochs: usize) -> TrainConfig {
        TrainConfig { batch_size: 32, epochs, ..TrainConfig::desk_default(seed) }
    }

    #[test]
    fn sgd_without_momentum_is_plain_descent() {
        let arch = tiny_arch();
        let mut params = init_params(&arch, 1).unwrap();
        let before = params.clone();
        let mut state = SgdState::zeros(&params);
        let cfg = TrainConfig { momentum: 0.0, weight_decay: 0.0, learning_rate: 0.5, ..tiny_cfg(1, 1) };
        let grads: Vec<(Tensor, Tensor)> = params
            .layers()
            .iter()
            .map(|l| (Tensor::ones(l.weight.shape().to_vec()), Tensor::ones(l.bias.shape().to_vec())))
            .collect();
        sgd_step(&mut params, &grads, &mut state, &cfg).unwrap();
        for (a, b) in params.layers().iter().zip(before.layers().iter()) {
            for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
                assert!((x - (y - 0.5)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn weight_decay_shrinks_params_with_zero_gradient() {
        let arch = tiny_arch();
        let mut params = init_params(&arch, 2).unwrap();
        let before = params.clone();
        let mut state = SgdState::zeros(&params);
        let cfg = TrainConfig { momentum: 0.0, weight_decay: 0.1, learning_rate: 1.0, ..tiny_cfg(1, 1) };
        let grads: Vec<(Tensor, Tensor)> = params
            .layers()
            .iter()
            .map(|l| (Tensor::zeros(l.weight.shape().to_vec()), Tensor::zeros(l.bias.shape().to_vec())))
            .collect();
        sgd_step(&mut params, &grads, &mut state, &cfg).unwrap();
        for (a, b) in params.layers().iter().zip(before.layers().iter()) {
            for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
                assert!((x - y * (1.0 - 0.1)).abs() < 1e-15, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn two_momentum_steps_follow_the_recurrence() {
        // constant g = 1, lr = 1, momentum 0.9, theta_0 = 0:
        // v1 = 1, theta_1 = -1; v2 = 1.9, theta_2 = -2.9
        let arch = tiny_arch();
        let mut params = init_params(&arch, 3).unwrap();
        for l in params.layers_mut() {
            l.weight = Tensor::zeros(l.weight.shape().to_vec());
            l.bias = Tensor::zeros(l.bias.shape().to_vec());
        }
        let mut state = SgdState::zeros(&params);
        let cfg = TrainConfig { momentum: 0.9, weight_decay: 0.0, learning_rate: 1.0, ..tiny_cfg(1, 1) };
        let grads: Vec<(Tensor, Tensor)> = params
            .layers()
            .iter()
            .map(|l| (Tensor::ones(l.weight.shape().to_vec()), Tensor::ones(l.bias.shape().to_vec())))
            .collect();
        sgd_step(&mut params, &grads, &mut state, &cfg).unwrap();
        sgd_step(&mut params, &grads, &mut state, &cfg).unwrap();
        assert!((params.classifier.weight.data()[0] + 2.9).abs() < 1e-15);
    }

    #[test]
    fn non_finite_gradient_names_the_parameter() {
        let arch = tiny_arch();
        let mut params = init_params(&arch, 4).unwrap();
        let mut state = SgdState::zeros(&params);
        let cfg = tiny_cfg(1, 1);
        let mut grads: Vec<(Tensor, Tensor)> = params
            .layers()
            .iter()
            .map(|l| (Tensor::zeros(l.weight.shape().to_vec()), Tensor::zeros(l.bias.shape().to_vec())))
            .collect();
        // poison the projection.1 weight gradient; Tensor::new rejects NaN so
        // write through the zero constructor
        let slot = 2;
        let mut t = Tensor::zeros(grads[slot].0.shape().to_vec());
        t.data_mut()[0] = f64::NAN;
        grads[slot].0 = t;
        let err = sgd_step(&mut params, &grads, &mut state, &cfg).unwrap_err().to_string();
        assert!(err.contains("encoder.projection.1"), "{err}");
    }

    #[test]
    fn train_run_is_deterministic() {
        let train = gen_blobs(3, 40, 8, 0.5, 10).unwrap();
        let test = gen_blobs(3, 15, 8, 0.5, 11).unwrap();
        let arch = tiny_arch();
        let cfg = tiny_cfg(5, 3);
        let (p1, m1) = train_run(&cfg, &train, &test, &arch).unwrap();
        let (p2, m2) = train_run(&cfg, &train, &test, &arch).unwrap();
        assert!(p1.bit_eq(&p2));
        assert_eq!(m1.to_csv().unwrap(), m2.to_csv().unwrap());
    }

    #[test]
    fn losses_stay_finite_across_epochs() {
        let train =
            crate::data::inject_symmetric(&gen_blobs(3, 40, 8, 0.5, 12).unwrap(), 0.4, 1).unwrap();
        let test = gen_blobs(3, 15, 8, 0.5, 13).unwrap();
        let (_, metrics) = train_run(&tiny_cfg(6, 4), &train, &test, &tiny_arch()).unwrap();
        for r in &metrics.records {
            assert!(r.train_loss.is_finite() && r.ce_loss.is_finite() && r.ctr_loss.is_finite());
            assert!((0.0..=1.0).contains(&r.test_accuracy));
            assert!((0.0..=1.0).contains(&r.memorization));
        }
    }

    /// Independent oracle: with lambda = 0 the run must match a bare
    /// cross-entropy loop that never builds the contrastive branch but
    /// consumes the same shuffle and weak-augmentation streams.
    #[test]
    fn lambda_zero_matches_a_pure_ce_loop() {
        let train =
            crate::data::inject_symmetric(&gen_blobs(3, 40, 8, 0.5, 14).unwrap(), 0.3, 2).unwrap();
        let test = gen_blobs(3, 15, 8, 0.5, 15).unwrap();
        let arch = tiny_arch();
        let cfg = TrainConfig { lambda: 0.0, ..tiny_cfg(7, 3) };
        let (params_full, metrics_full) = train_run(&cfg, &train, &test, &arch).unwrap();

        let mut params = init_params(&arch, cfg.seed).unwrap();
        let mut state = SgdState::zeros(&params);
        let mut shuffle_rng = stream(cfg.seed, STREAM_SHUFFLE, &[]);
        for epoch in 1..=cfg.epochs {
            let mut order: Vec<usize> = (0..train.len()).collect();
            order.shuffle(&mut shuffle_rng);
            for batch in order.chunks(cfg.batch_size) {
                let weak = augment_rows(
                    &train.features,
                    batch,
                    &cfg.weak_augment,
                    derive_seed(cfg.seed, &[STREAM_AUGMENT, epoch as u64, 2]),
                )
                .unwrap();
                let labels: Vec<usize> = batch.iter().map(|&i| train.noisy_labels[i]).collect();
                let mut g = Graph::new();
                let ids = register_params(&mut g, &params);
                let x = g.constant(weak);
                let f = backbone_forward(&mut g, &ids, x).unwrap();
                let (_, clamped) = classifier_forward(&mut g, &ids, f).unwrap();
                let onehot = one_hot(&labels, train.num_classes).unwrap();
                let ce = build_cross_entropy(&mut g, clamped, &onehot).unwrap();
                let grads = g.backward(ce).unwrap();
                let grad_pairs = collect_grads(&grads, &ids);
                sgd_step(&mut params, &grad_pairs, &mut state, &cfg).unwrap();
            }
        }
        let acc_full = metrics_full.final_record().unwrap().test_accuracy;
        let acc_ce = accuracy(&params, &test.features, &test.true_labels).unwrap();
        assert_eq!(acc_full, acc_ce);
        for (a, b) in params_full.layers().iter().zip(params.layers().iter()) {
            for (x, y) in a.weight.data().iter().zip(b.weight.data()) {
                assert!((x - y).abs() <= 1e-12, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn memorization_endpoints() {
        let ds = crate::data::inject_symmetric(&gen_blobs(3, 30, 8, 0.4, 16).unwrap(), 0.5, 3).unwrap();
        let arch = tiny_arch();
        let params = init_params(&arch, 8).unwrap();
        let preds = predict_labels(&params, &ds.features).unwrap();

        // a model predicting exactly the noisy labels memorizes everything
        let mut all_noisy = ds.clone();
        for i in 0..all_noisy.len() {
            all_noisy.noisy_labels[i] = preds[i];
            all_noisy.true_labels[i] = (preds[i] + 1) % 3;
            all_noisy.flipped_mask[i] = true;
        }
        assert_eq!(memorization(&params, &all_noisy).unwrap(), 1.0);

        // a model predicting exactly the true labels memorizes nothing
        let mut perfect = ds.clone();
        for i in 0..perfect.len() {
            perfect.true_labels[i] = preds[i];
            perfect.noisy_labels[i] = (preds[i] + 1) % 3;
            perfect.flipped_mask[i] = true;
        }
        assert_eq!(memorization(&params, &perfect).unwrap(), 0.0);
    }

    #[test]
    fn memorization_requires_flipped_examples() {
        let ds = gen_blobs(3, 10, 8, 0.5, 17).unwrap();
        let params = init_params(&tiny_arch(), 9).unwrap();
        assert!(memorization(&params, &ds).is_err());
    }

    #[test]
    fn constant_predictor_memorization_is_one_over_k() {
        // argmax over equal logits picks class 0; the noisy label of a
        // flipped example is uniform over the alternatives, so the match
        // frequency is 1/K. Monte Carlo over 10^4 flipped samples.
        let k = 10;
        let ds = crate::data::inject_symmetric(&gen_blobs(k, 1000, 12, 0.5, 18).unwrap(), 1.0, 4).unwrap();
        let arch = ArchSpec { input_dim: 12, num_classes: k, ..tiny_arch() };
        let mut params = init_params(&arch, 10).unwrap();
        params.classifier.weight = Tensor::zeros(params.classifier.weight.shape().to_vec());
        params.classifier.bias = Tensor::zeros(vec![k]);
        let m = memorization(&params, &ds).unwrap();
        assert!((m - 0.1).abs() <= 0.02, "memorization = {m}");
    }

    #[test]
    fn probe_freezes_the_encoder_bitwise() {
        let clean = gen_blobs(3, 50, 8, 0.5, 19).unwrap();
        let noisy = crate::data::inject_symmetric(&clean, 0.4, 5).unwrap();
        let test = gen_blobs(3, 20, 8, 0.5, 20).unwrap();
        let arch = tiny_arch();
        let (trained, _) = train_run(&tiny_cfg(11, 2), &clean, &test, &arch).unwrap();
        let (probed, metrics) = linear_probe(&trained, &arch, &noisy, &test, &tiny_cfg(12, 2)).unwrap();
        for (a, b) in trained.encoder.backbone.iter().zip(&probed.encoder.backbone) {
            assert!(a.weight.bit_eq(&b.weight) && a.bias.bit_eq(&b.bias));
        }
        for (a, b) in trained.encoder.projection.iter().zip(&probed.encoder.projection) {
            assert!(a.weight.bit_eq(&b.weight) && a.bias.bit_eq(&b.bias));
        }
        for (a, b) in trained.predictor.iter().zip(&probed.predictor) {
            assert!(a.weight.bit_eq(&b.weight) && a.bias.bit_eq(&b.bias));
        }
        assert!(!trained.classifier.weight.bit_eq(&probed.classifier.weight));
        assert_eq!(metrics.records.len(), 2);
    }

    #[test]
    fn probe_rejects_over_parameterized_configs() {
        let clean = gen_blobs(3, 2, 8, 0.5, 21).unwrap(); // 6 samples
        let arch = tiny_arch(); // classifier params = (12 + 1) * 3 = 39 > 6
        let params = init_params(&arch, 13).unwrap();
        assert!(linear_probe(&params, &arch, &clean, &clean, &tiny_cfg(14, 1)).is_err());
    }

    #[test]
    fn default_probe_configs_are_under_parameterized() {
        let arch = ArchSpec::desk_default(20, 4);
        let ratio = arch.classifier_param_count() as f64 / 2000.0;
        assert!(ratio < 1.0, "ratio = {ratio}");
    }

    #[test]
    fn metrics_csv_has_stable_columns() {
        let m = RunMetrics {
            records: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                ce_loss: 0.25,
                ctr_loss: -0.5,
                test_accuracy: 0.75,
                memorization: 0.1,
                clean_train_accuracy: 0.8,
            }],
        };
        let csv = m.to_csv().unwrap();
        assert!(csv.starts_with(
            "epoch,train_loss,ce_loss,ctr_loss,test_accuracy,memorization,clean_train_accuracy\n"
        ));
    }
}
