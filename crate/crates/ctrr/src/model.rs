//! The siamese network stack: encoder (backbone + 3-layer projection head),
//! 2-layer prediction head, and a linear softmax classifier that consumes the
//! backbone output. The projection head feeds only the contrastive branch.
//!
//! No batch normalization anywhere: seed-exact reproducibility wins over
//! fidelity to the full-scale recipe, and the regularizer's mechanics do not
//! depend on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::{stream, STREAM_INIT};
use crate::tensor::Tensor;
use rand::Rng;

/// Softmax outputs are clamped into `[PROB_CLAMP, 1 - PROB_CLAMP]` with no
/// re-normalization, so classifier rows may deviate from summing to 1 by up
/// to `2 K PROB_CLAMP`.
pub const PROB_CLAMP: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub input_dim: usize,
    pub backbone_widths: Vec<usize>,
    /// Exactly 3 layers; the topology of the projection head is fixed.
    pub projection_widths: Vec<usize>,
    /// Exactly 2 layers; the last width must equal the last projection width.
    pub prediction_widths: Vec<usize>,
    pub num_classes: usize,
}

impl ArchSpec {
    /// Desk-scale default: backbone `[d -> 64 -> 64]`, projection
    /// `[64 -> 64 -> 64 -> 32]`, prediction `[32 -> 16 -> 32]`.
    pub fn desk_default(input_dim: usize, num_classes: usize) -> Self {
        ArchSpec {
            input_dim,
            backbone_widths: vec![64, 64],
            projection_widths: vec![64, 64, 32],
            prediction_widths: vec![16, 32],
            num_classes,
        }
    }

    /// Full-scale head widths (3-layer projection with 2048-wide layers,
    /// 512->2048 prediction head) on a desk-scale dense backbone. Far too
    /// large for the test harness; shipped as a named preset only.
    pub fn full_scale_heads(input_dim: usize, num_classes: usize) -> Self {
        ArchSpec {
            input_dim,
            backbone_widths: vec![512, 512],
            projection_widths: vec![2048, 2048, 2048],
            prediction_widths: vec![512, 2048],
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidInput("input_dim must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidInput("num_classes must be >= 2".into()));
        }
        if self.projection_widths.len() != 3 {
            return Err(Error::InvalidInput(format!(
                "projection head has exactly 3 layers, got {}",
                self.projection_widths.len()
            )));
        }
        if self.prediction_widths.len() != 2 {
            return Err(Error::InvalidInput(format!(
                "prediction head has exactly 2 layers, got {}",
                self.prediction_widths.len()
            )));
        }
        let all = self
            .backbone_widths
            .iter()
            .chain(&self.projection_widths)
            .chain(&self.prediction_widths);
        for &w in all {
            if w == 0 {
                return Err(Error::InvalidInput("zero-width layer".into()));
            }
        }
        if self.prediction_widths[1] != self.projection_widths[2] {
            return Err(Error::InvalidInput(format!(
                "prediction output width {} must equal projection output width {}",
                self.prediction_widths[1], self.projection_widths[2]
            )));
        }
        Ok(())
    }

    /// Width of the backbone output, which feeds both heads and the classifier.
    pub fn backbone_out(&self) -> usize {
        *self.backbone_widths.last().unwrap_or(&self.input_dim)
    }

    pub fn representation_dim(&self) -> usize {
        self.projection_widths[2]
    }

    /// Parameter count of the linear classifier alone.
    pub fn classifier_param_count(&self) -> usize {
        (self.backbone_out() + 1) * self.num_classes
    }
}

#[derive(Debug, Clone)]
pub struct LayerParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub backbone: Vec<LayerParams>,
    pub projection: Vec<LayerParams>,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub predictor: Vec<LayerParams>,
    pub classifier: LayerParams,
}

impl ModelParams {
    /// All parameter tensors, in the fixed traversal order used everywhere
    /// (checkpoints, optimizer state, gradient collection).
    pub fn tensors(&self) -> Vec<(&'static str, usize, &Tensor, &Tensor)> {
        let mut out = Vec::new();
        for (i, l) in self.encoder.backbone.iter().enumerate() {
            out.push(("encoder.backbone", i, &l.weight, &l.bias));
        }
        for (i, l) in self.encoder.projection.iter().enumerate() {
            out.push(("encoder.projection", i, &l.weight, &l.bias));
        }
        for (i, l) in self.predictor.iter().enumerate() {
            out.push(("predictor", i, &l.weight, &l.bias));
        }
        out.push(("classifier", 0, &self.classifier.weight, &self.classifier.bias));
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut LayerParams> {
        let mut out: Vec<&mut LayerParams> = Vec::new();
        out.extend(self.encoder.backbone.iter_mut());
        out.extend(self.encoder.projection.iter_mut());
        out.extend(self.predictor.iter_mut());
        out.push(&mut self.classifier);
        out
    }

    pub fn layers(&self) -> Vec<&LayerParams> {
        let mut out: Vec<&LayerParams> = Vec::new();
        out.extend(self.encoder.backbone.iter());
        out.extend(self.encoder.projection.iter());
        out.extend(self.predictor.iter());
        out.push(&self.classifier);
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    pub fn bit_eq(&self, other: &ModelParams) -> bool {
        let a = self.layers();
        let b = other.layers();
        a.len() == b.len()
            && a.iter()
                .zip(&b)
                .all(|(x, y)| x.weight.bit_eq(&y.weight) && x.bias.bit_eq(&y.bias))
    }
}

fn init_layer(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> LayerParams {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data: Vec<f64> = (0..fan_in * fan_out)
        .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * bound)
        .collect();
    LayerParams {
        weight: Tensor::new(vec![fan_in, fan_out], data).expect("finite init"),
        bias: Tensor::zeros(vec![fan_out]),
    }
}

/// Uniform `+-sqrt(6 / (fan_in + fan_out))` weights, zero biases,
/// deterministic in `seed`.
pub fn init_params(spec: &ArchSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = stream(seed, STREAM_INIT, &[]);
    let mut dims = vec![spec.input_dim];
    dims.extend(&spec.backbone_widths);
    let backbone = dims.windows(2).map(|w| init_layer(&mut rng, w[0], w[1])).collect();

    let mut pdims = vec![spec.backbone_out()];
    pdims.extend(&spec.projection_widths);
    let projection = pdims.windows(2).map(|w| init_layer(&mut rng, w[0], w[1])).collect();

    let mut hdims = vec![spec.representation_dim()];
    hdims.extend(&spec.prediction_widths);
    let predictor = hdims.windows(2).map(|w| init_layer(&mut rng, w[0], w[1])).collect();

    let classifier = init_layer(&mut rng, spec.backbone_out(), spec.num_classes);
    Ok(ModelParams { encoder: EncoderParams { backbone, projection }, predictor, classifier })
}

/// Re-initializes only the classifier, leaving everything else bitwise intact.
pub fn reinit_classifier(params: &mut ModelParams, spec: &ArchSpec, seed: u64) {
    let mut rng = stream(seed, STREAM_INIT, &[1]);
    params.classifier = init_layer(&mut rng, spec.backbone_out(), spec.num_classes);
}

/// Graph-side handles to one registered parameter set.
#[derive(Debug, Clone)]
pub struct ModelIds {
    pub backbone: Vec<(NodeId, NodeId)>,
    pub projection: Vec<(NodeId, NodeId)>,
    pub predictor: Vec<(NodeId, NodeId)>,
    pub classifier: (NodeId, NodeId),
}

/// Registers every parameter tensor as a leaf on `g`.
pub fn register_params(g: &mut Graph, params: &ModelParams) -> ModelIds {
    let reg = |g: &mut Graph, layers: &[LayerParams]| {
        layers
            .iter()
            .map(|l| (g.leaf(l.weight.clone()), g.leaf(l.bias.clone())))
            .collect::<Vec<_>>()
    };
    let backbone = reg(g, &params.encoder.backbone);
    let projection = reg(g, &params.encoder.projection);
    let predictor = reg(g, &params.predictor);
    let classifier = (g.leaf(params.classifier.weight.clone()), g.leaf(params.classifier.bias.clone()));
    ModelIds { backbone, projection, predictor, classifier }
}

fn mlp(g: &mut Graph, layers: &[(NodeId, NodeId)], x: NodeId, relu_last: bool) -> Result<NodeId> {
    let mut h = x;
    for (i, &(w, b)) in layers.iter().enumerate() {
        let lin = g.matmul(h, w)?;
        h = g.add_row_bias(lin, b)?;
        if relu_last || i + 1 < layers.len() {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Backbone features: ReLU after every layer, so the shared representation
/// fed to the heads and the classifier is post-activation.
pub fn backbone_forward(g: &mut Graph, ids: &ModelIds, x: NodeId) -> Result<NodeId> {
    mlp(g, &ids.backbone, x, true)
}

/// Projection head on backbone features; linear final layer.
pub fn projection_forward(g: &mut Graph, ids: &ModelIds, features: NodeId) -> Result<NodeId> {
    mlp(g, &ids.projection, features, false)
}

/// Prediction head; linear final layer.
pub fn predictor_forward(g: &mut Graph, ids: &ModelIds, z: NodeId) -> Result<NodeId> {
    mlp(g, &ids.predictor, z, false)
}

/// Linear classifier + softmax on backbone features. Returns the softmax node
/// (rows sum to 1) and the clamped node (entries in `[1e-4, 1-1e-4]`, rows
/// not re-normalized).
pub fn classifier_forward(
    g: &mut Graph,
    ids: &ModelIds,
    features: NodeId,
) -> Result<(NodeId, NodeId)> {
    let lin = g.matmul(features, ids.classifier.0)?;
    let logits = g.add_row_bias(lin, ids.classifier.1)?;
    let softmax = g.row_softmax(logits)?;
    let clamped = g.clamp(softmax, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    Ok((softmax, clamped))
}

/// Encoder output `z = projection(backbone(x))` as plain values.
pub fn encode(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let ids = register_params(&mut g, params);
    let xi = g.constant(x.clone());
    let f = backbone_forward(&mut g, &ids, xi)?;
    let z = projection_forward(&mut g, &ids, f)?;
    Ok(g.value(z).clone())
}

/// Prediction-head output `q = h(z)` as plain values.
pub fn predict_head(params: &ModelParams, z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let ids = register_params(&mut g, params);
    let zi = g.constant(z.clone());
    let q = predictor_forward(&mut g, &ids, zi)?;
    Ok(g.value(q).clone())
}

/// Clamped probabilistic output of the classifier on raw inputs.
pub fn classify(params: &ModelParams, x: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let ids = register_params(&mut g, params);
    let xi = g.constant(x.clone());
    let f = backbone_forward(&mut g, &ids, xi)?;
    let (_, clamped) = classifier_forward(&mut g, &ids, f)?;
    Ok(g.value(clamped).clone())
}

/// Row-wise argmax of the classifier output.
pub fn predict_labels(params: &ModelParams, x: &Tensor) -> Result<Vec<usize>> {
    let p = classify(params, x)?;
    let (rows, cols) = p.dims2("predict_labels")?;
    let mut out = Vec::with_capacity(rows);
    for i in 0..rows {
        let row = &p.data()[i * cols..(i + 1) * cols];
        let mut best = 0;
        for j in 1..cols {
            if row[j] > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    Ok(out)
}

// --- checkpoint io ---------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    arch: ArchSpec,
    dtype: String,
    tensors: Vec<TensorEntry>,
}

/// Serializes `(arch, params)` as a JSON header (length-prefixed with a
/// little-endian u64) followed by the raw little-endian f64 data section.
pub fn checkpoint_bytes(arch: &ArchSpec, params: &ModelParams) -> Result<Vec<u8>> {
    let mut entries = Vec::new();
    let mut data = Vec::new();
    let mut offset = 0u64;
    for (group, idx, w, b) in params.tensors() {
        for (suffix, t) in [("weight", w), ("bias", b)] {
            entries.push(TensorEntry {
                name: format!("{}.{}.{}", group, idx, suffix),
                shape: t.shape().to_vec(),
                offset,
            });
            for v in t.data() {
                data.extend_from_slice(&v.to_le_bytes());
            }
            offset += (t.numel() * 8) as u64;
        }
    }
    let header = CheckpointHeader {
        arch: arch.clone(),
        dtype: "f64-le".to_string(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header_json.len() + data.len());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    out.extend_from_slice(&data);
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ArchSpec, ModelParams)> {
    if bytes.len() < 8 {
        return Err(Error::Format("checkpoint too short".into()));
    }
    let hlen = u64::from_le_bytes(bytes[0..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen {
        return Err(Error::Format("checkpoint header truncated".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + hlen])?;
    if header.dtype != "f64-le" {
        return Err(Error::Format(format!("unsupported dtype {}", header.dtype)));
    }
    header.arch.validate()?;
    let data = &bytes[8 + hlen..];

    let read_tensor = |entry: &TensorEntry| -> Result<Tensor> {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + n * 8;
        if end > data.len() {
            return Err(Error::Format(format!("tensor {} out of bounds", entry.name)));
        }
        let vals = data[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(entry.shape.clone(), vals)
    };

    // Rebuild by name so reader and writer agree on layout without relying on order.
    let mut by_name = std::collections::BTreeMap::new();
    for e in &header.tensors {
        by_name.insert(e.name.clone(), read_tensor(e)?);
    }
    let mut take = |name: String| -> Result<Tensor> {
        by_name
            .remove(&name)
            .ok_or_else(|| Error::Format(format!("missing tensor {}", name)))
    };
    let mut layer = |group: &str, idx: usize| -> Result<LayerParams> {
        Ok(LayerParams {
            weight: take(format!("{}.{}.weight", group, idx))?,
            bias: take(format!("{}.{}.bias", group, idx))?,
        })
    };
    let arch = header.arch.clone();
    let backbone = (0..arch.backbone_widths.len())
        .map(|i| layer("encoder.backbone", i))
        .collect::<Result<Vec<_>>>()?;
    let projection = (0..3).map(|i| layer("encoder.projection", i)).collect::<Result<Vec<_>>>()?;
    let predictor = (0..2).map(|i| layer("predictor", i)).collect::<Result<Vec<_>>>()?;
    let classifier = layer("classifier", 0)?;
    Ok((arch, ModelParams { encoder: EncoderParams { backbone, projection }, predictor, classifier }))
}

pub fn save_checkpoint(path: &std::path::Path, arch: &ArchSpec, params: &ModelParams) -> Result<()> {
    crate::artifact::write_atomic(path, &checkpoint_bytes(arch, params)?)
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<(ArchSpec, ModelParams)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> ArchSpec {
        ArchSpec {
            input_dim: 5,
            backbone_widths: vec![6],
            projection_widths: vec![6, 6, 4],
            prediction_widths: vec![4, 4],
            num_classes: 3,
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let a = init_params(&spec(), 42).unwrap();
        let b = init_params(&spec(), 42).unwrap();
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn different_seeds_differ_somewhere() {
        let a = init_params(&spec(), 1).unwrap();
        let b = init_params(&spec(), 2).unwrap();
        assert!(!a.bit_eq(&b));
    }

    #[test]
    fn zero_width_layer_is_rejected() {
        let mut s = spec();
        s.backbone_widths = vec![0];
        assert!(init_params(&s, 1).is_err());
    }

    #[test]
    fn head_topology_is_fixed() {
        let mut s = spec();
        s.projection_widths = vec![6, 4];
        assert!(s.validate().is_err());
        let mut s = spec();
        s.prediction_widths = vec![4, 4, 4];
        assert!(s.validate().is_err());
        let mut s = spec();
        s.prediction_widths = vec![4, 5]; // != projection output 4
        assert!(s.validate().is_err());
    }

    #[test]
    fn zero_weights_encode_to_zero() {
        let mut params = init_params(&spec(), 1).unwrap();
        for l in params.layers_mut() {
            l.weight = Tensor::zeros(l.weight.shape().to_vec());
        }
        let x = Tensor::new(vec![2, 5], vec![1.0; 10]).unwrap();
        let z = encode(&params, &x).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rows_are_independent() {
        let params = init_params(&spec(), 7).unwrap();
        let x2 = Tensor::new(vec![2, 5], vec![0.1, -0.4, 0.9, 1.2, -2.0, 3.0, 1.0, 0.0, -1.0, 0.5]).unwrap();
        let x1 = Tensor::new(vec![1, 5], x2.data()[0..5].to_vec()).unwrap();
        let z2 = encode(&params, &x2).unwrap();
        let z1 = encode(&params, &x1).unwrap();
        assert_eq!(&z2.data()[0..z1.numel()], z1.data());
    }

    #[test]
    fn uniform_logits_classify_to_uniform_clamped_rows() {
        let mut params = init_params(
            &ArchSpec { num_classes: 4, ..spec() },
            3,
        )
        .unwrap();
        params.classifier.weight = Tensor::zeros(params.classifier.weight.shape().to_vec());
        params.classifier.bias = Tensor::zeros(vec![4]);
        let x = Tensor::new(vec![1, 5], vec![0.3; 5]).unwrap();
        let p = classify(&params, &x).unwrap();
        for &v in p.data() {
            assert_eq!(v, 0.25);
        }
    }

    #[test]
    fn identity_predictor_passes_nonnegative_z_through() {
        let mut params = init_params(
            &ArchSpec { prediction_widths: vec![4, 4], ..spec() },
            5,
        )
        .unwrap();
        params.predictor[0].weight = Tensor::eye(4);
        params.predictor[0].bias = Tensor::zeros(vec![4]);
        params.predictor[1].weight = Tensor::eye(4);
        params.predictor[1].bias = Tensor::zeros(vec![4]);
        let z = Tensor::new(vec![2, 4], vec![0.5, 1.0, 0.0, 2.0, 0.1, 0.2, 0.3, 0.4]).unwrap();
        let q = predict_head(&params, &z).unwrap();
        assert_eq!(q.data(), z.data());
    }

    #[test]
    fn clamped_rows_deviate_at_most_2k_delta_and_are_not_renormalized() {
        let mut params = init_params(&spec(), 5).unwrap();
        // huge bias on class 0 pushes the softmax row against the clamp
        params.classifier.weight = Tensor::zeros(params.classifier.weight.shape().to_vec());
        params.classifier.bias = Tensor::from_vec(vec![50.0, 0.0, 0.0]).unwrap();
        let x = Tensor::new(vec![1, 5], vec![0.0; 5]).unwrap();
        let p = classify(&params, &x).unwrap();
        let k = 3.0;
        let sum: f64 = p.data().iter().sum();
        assert!((sum - 1.0).abs() <= 2.0 * k * PROB_CLAMP);
        assert!(sum != 1.0, "clamped row should not be re-normalized, sum = {sum}");
        assert!(p.data().iter().all(|&v| (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&v)));
    }

    #[test]
    fn softmax_rows_sum_to_one_before_clamp() {
        let params = init_params(&spec(), 11).unwrap();
        let x = Tensor::new(vec![4, 5], (0..20).map(|i| (i as f64) * 0.37 - 2.0).collect()).unwrap();
        let mut g = Graph::new();
        let ids = register_params(&mut g, &params);
        let xi = g.constant(x);
        let f = backbone_forward(&mut g, &ids, xi).unwrap();
        let (softmax, _) = classifier_forward(&mut g, &ids, f).unwrap();
        let p = g.value(softmax);
        for i in 0..4 {
            let sum: f64 = p.row(i).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrips_bitwise() {
        let params = init_params(&spec(), 9).unwrap();
        let bytes = checkpoint_bytes(&spec(), &params).unwrap();
        let (arch2, params2) = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(arch2, spec());
        assert!(params.bit_eq(&params2));
    }

    #[test]
    fn random_params_give_finite_outputs() {
        let params = init_params(&spec(), 13).unwrap();
        let x = Tensor::new(vec![3, 5], (0..15).map(|i| ((i * 7) % 5) as f64 - 2.0).collect()).unwrap();
        let z = encode(&params, &x).unwrap();
        let q = predict_head(&params, &z).unwrap();
        let p = classify(&params, &x).unwrap();
        for t in [&z, &q, &p] {
            assert!(t.data().iter().all(|v| v.is_finite()));
        }
    }
}
