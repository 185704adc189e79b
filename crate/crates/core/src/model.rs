//! Fully connected ReLU network with a hand-written backward pass.
//!
//! Parameters live in one flat vector. Each layer contributes two named
//! segments, `fc{l}.weight` (shape `out × in`, row-major) followed by
//! `fc{l}.bias`; segments are the unit that can be frozen or trained.

use std::collections::BTreeSet;
use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::{axpy, dot};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("parameter vector has length {got}, network expects {expected}")]
    ParamLength { expected: usize, got: usize },
    #[error("batch has {got} features, network expects {expected}")]
    FeatureMismatch { expected: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch inputs ({inputs} values) do not form {rows} rows of {features} features")]
    RaggedBatch {
        inputs: usize,
        rows: usize,
        features: usize,
    },
    #[error("batch contains non-finite inputs")]
    NonFiniteInput,
    #[error("target class {target} out of range for {classes} outputs")]
    TargetOutOfRange { target: usize, classes: usize },
    #[error("segment index {index} out of range ({count} segments)")]
    SegmentOutOfRange { index: usize, count: usize },
    #[error("loss is not finite ({0})")]
    NonFiniteLoss(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(layer_widths: Vec<usize>, seed: u64) -> Self {
        Self {
            layer_widths,
            activation: Activation::Relu,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub len: usize,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

/// Flat parameters plus the segment table describing them.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    pub values: Vec<f64>,
    segments: Arc<Vec<Segment>>,
}

impl ParamVector {
    pub fn new(values: Vec<f64>, segments: Arc<Vec<Segment>>) -> Result<Self, ModelError> {
        let expected: usize = segments.iter().map(|s| s.len).sum();
        if values.len() != expected {
            return Err(ModelError::ParamLength {
                expected,
                got: values.len(),
            });
        }
        Ok(Self { values, segments })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment_values(&self, index: usize) -> &[f64] {
        &self.values[self.segments[index].range()]
    }

    /// Splits the flat vector into one owned tensor per segment.
    pub fn unflatten(&self) -> Vec<Vec<f64>> {
        self.segments
            .iter()
            .map(|s| self.values[s.range()].to_vec())
            .collect()
    }

    /// Inverse of [`ParamVector::unflatten`].
    pub fn flatten(
        tensors: &[Vec<f64>],
        segments: Arc<Vec<Segment>>,
    ) -> Result<Self, ModelError> {
        if tensors.len() != segments.len() {
            return Err(ModelError::SegmentOutOfRange {
                index: tensors.len(),
                count: segments.len(),
            });
        }
        let mut values = Vec::with_capacity(segments.iter().map(|s| s.len).sum());
        for (t, s) in tensors.iter().zip(segments.iter()) {
            if t.len() != s.len {
                return Err(ModelError::ParamLength {
                    expected: s.len,
                    got: t.len(),
                });
            }
            values.extend_from_slice(t);
        }
        Self::new(values, segments)
    }
}

/// Which segments receive gradient.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainableMask {
    trainable: BTreeSet<usize>,
    segment_count: usize,
}

impl TrainableMask {
    pub fn all(segment_count: usize) -> Self {
        Self {
            trainable: (0..segment_count).collect(),
            segment_count,
        }
    }

    pub fn none(segment_count: usize) -> Self {
        Self {
            trainable: BTreeSet::new(),
            segment_count,
        }
    }

    pub fn from_segments(
        segments: impl IntoIterator<Item = usize>,
        segment_count: usize,
    ) -> Result<Self, ModelError> {
        let trainable: BTreeSet<usize> = segments.into_iter().collect();
        if let Some(&bad) = trainable.iter().find(|&&i| i >= segment_count) {
            return Err(ModelError::SegmentOutOfRange {
                index: bad,
                count: segment_count,
            });
        }
        Ok(Self {
            trainable,
            segment_count,
        })
    }

    pub fn is_trainable(&self, segment: usize) -> bool {
        self.trainable.contains(&segment)
    }

    pub fn trainable(&self) -> impl Iterator<Item = usize> + '_ {
        self.trainable.iter().copied()
    }

    pub fn is_empty(&self) -> bool {
        self.trainable.is_empty()
    }

    pub fn segment_count(&self) -> usize {
        self.segment_count
    }
}

/// Inputs (row-major, one sample per row) with integer class targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    features: usize,
    inputs: Vec<f64>,
    targets: Vec<usize>,
    // CSR-style index of nonzero input entries; image data is mostly zeros.
    nz_offsets: Vec<usize>,
    nz_columns: Vec<u32>,
}

impl Batch {
    pub fn new(inputs: Vec<f64>, features: usize, targets: Vec<usize>) -> Result<Self, ModelError> {
        if targets.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        if features == 0 || inputs.len() != features * targets.len() {
            return Err(ModelError::RaggedBatch {
                inputs: inputs.len(),
                rows: targets.len(),
                features,
            });
        }
        if inputs.iter().any(|x| !x.is_finite()) {
            return Err(ModelError::NonFiniteInput);
        }
        let mut nz_offsets = Vec::with_capacity(targets.len() + 1);
        let mut nz_columns = Vec::new();
        nz_offsets.push(0);
        for row in inputs.chunks_exact(features) {
            nz_columns.extend(
                row.iter()
                    .enumerate()
                    .filter(|(_, &x)| x != 0.0)
                    .map(|(j, _)| j as u32),
            );
            nz_offsets.push(nz_columns.len());
        }
        Ok(Self {
            features,
            inputs,
            targets,
            nz_offsets,
            nz_columns,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn features(&self) -> usize {
        self.features
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn targets(&self) -> &[usize] {
        &self.targets
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.features..(i + 1) * self.features]
    }

    fn nonzeros(&self, i: usize) -> &[u32] {
        &self.nz_columns[self.nz_offsets[i]..self.nz_offsets[i + 1]]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

/// Network architecture. Holds no parameters.
#[derive(Debug, Clone)]
pub struct Mlp {
    widths: Vec<usize>,
    activation: Activation,
    segments: Arc<Vec<Segment>>,
    param_count: usize,
}

impl Mlp {
    pub fn new(spec: &MlpSpec) -> Result<Self, ModelError> {
        let widths = &spec.layer_widths;
        if widths.len() < 2 {
            return Err(ModelError::InvalidSpec(format!(
                "need at least 2 layer widths, got {}",
                widths.len()
            )));
        }
        if let Some(pos) = widths.iter().position(|&w| w == 0) {
            return Err(ModelError::InvalidSpec(format!("width {pos} is zero")));
        }
        let mut segments = Vec::with_capacity(2 * (widths.len() - 1));
        let mut offset = 0;
        for (l, pair) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            segments.push(Segment {
                name: format!("fc{}.weight", l + 1),
                offset,
                len: fan_in * fan_out,
                shape: vec![fan_out, fan_in],
            });
            offset += fan_in * fan_out;
            segments.push(Segment {
                name: format!("fc{}.bias", l + 1),
                offset,
                len: fan_out,
                shape: vec![fan_out],
            });
            offset += fan_out;
        }
        Ok(Self {
            widths: widths.clone(),
            activation: spec.activation,
            segments: Arc::new(segments),
            param_count: offset,
        })
    }

    pub fn layer_widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    pub fn segment_count(&self) -> usize {
        self.segments.len()
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment_table(&self) -> Arc<Vec<Segment>> {
        Arc::clone(&self.segments)
    }

    pub fn classes(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn input_features(&self) -> usize {
        self.widths[0]
    }

    /// Uniform(-1/√fan_in, 1/√fan_in) weights, zero biases.
    pub fn init_params(&self, seed: u64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut values = vec![0.0; self.param_count];
        for seg in self.segments.iter().step_by(2) {
            let bound = 1.0 / (seg.shape[1] as f64).sqrt();
            for v in &mut values[seg.range()] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        ParamVector {
            values,
            segments: Arc::clone(&self.segments),
        }
    }

    pub fn wrap(&self, values: Vec<f64>) -> Result<ParamVector, ModelError> {
        ParamVector::new(values, Arc::clone(&self.segments))
    }

    /// Mean softmax cross-entropy.
    pub fn loss(&self, params: &[f64], batch: &Batch) -> Result<f64, ModelError> {
        let fwd = self.forward(params, batch)?;
        let loss = fwd.loss;
        check_finite(loss)?;
        Ok(loss)
    }

    /// Mean softmax cross-entropy and its gradient over the full parameter
    /// vector. Entries of frozen segments are exactly zero.
    pub fn loss_and_grad(
        &self,
        params: &[f64],
        batch: &Batch,
        mask: &TrainableMask,
    ) -> Result<(f64, Vec<f64>), ModelError> {
        if mask.segment_count() != self.segment_count() {
            return Err(ModelError::SegmentOutOfRange {
                index: mask.segment_count(),
                count: self.segment_count(),
            });
        }
        let fwd = self.forward(params, batch)?;
        check_finite(fwd.loss)?;
        let mut grad = vec![0.0; self.param_count];
        if !mask.is_empty() {
            self.backward(params, batch, mask, &fwd, &mut grad);
        }
        Ok((fwd.loss, grad))
    }

    /// Loss and argmax accuracy; ties go to the smallest class index.
    pub fn evaluate(&self, params: &[f64], batch: &Batch) -> Result<Evaluation, ModelError> {
        let fwd = self.forward(params, batch)?;
        check_finite(fwd.loss)?;
        let d = self.classes();
        let correct = fwd
            .logits()
            .chunks_exact(d)
            .zip(batch.targets())
            .filter(|(row, &t)| argmax(row) == t)
            .count();
        Ok(Evaluation {
            loss: fwd.loss,
            accuracy: correct as f64 / batch.len() as f64,
        })
    }

    fn validate(&self, params: &[f64], batch: &Batch) -> Result<(), ModelError> {
        if params.len() != self.param_count {
            return Err(ModelError::ParamLength {
                expected: self.param_count,
                got: params.len(),
            });
        }
        if batch.features() != self.input_features() {
            return Err(ModelError::FeatureMismatch {
                expected: self.input_features(),
                got: batch.features(),
            });
        }
        let d = self.classes();
        if let Some(&t) = batch.targets().iter().find(|&&t| t >= d) {
            return Err(ModelError::TargetOutOfRange {
                target: t,
                classes: d,
            });
        }
        Ok(())
    }

    fn forward(&self, params: &[f64], batch: &Batch) -> Result<Forward, ModelError> {
        self.validate(params, batch)?;
        let p = batch.len();
        let layers = self.widths.len() - 1;
        // activations[l] holds the output of layer l (post-ReLU for hidden
        // layers, raw logits for the last one), p rows each.
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(layers);
        for l in 0..layers {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let w = &params[self.segments[2 * l].range()];
            let b = &params[self.segments[2 * l + 1].range()];
            let mut out = vec![0.0; p * fan_out];
            if l == 0 {
                for s in 0..p {
                    let x = batch.row(s);
                    let nz = batch.nonzeros(s);
                    let row = &mut out[s * fan_out..(s + 1) * fan_out];
                    for (o, z) in row.iter_mut().enumerate() {
                        let wo = &w[o * fan_in..(o + 1) * fan_in];
                        let mut acc = b[o];
                        for &j in nz {
                            acc += wo[j as usize] * x[j as usize];
                        }
                        *z = acc;
                    }
                }
            } else {
                let prev = &activations[l - 1];
                for s in 0..p {
                    let a = &prev[s * fan_in..(s + 1) * fan_in];
                    let row = &mut out[s * fan_out..(s + 1) * fan_out];
                    for (o, z) in row.iter_mut().enumerate() {
                        *z = b[o] + dot(&w[o * fan_in..(o + 1) * fan_in], a);
                    }
                }
            }
            if l + 1 < layers {
                match self.activation {
                    Activation::Relu => out.iter_mut().for_each(|z| *z = z.max(0.0)),
                }
            }
            activations.push(out);
        }

        let d = self.classes();
        let logits = activations.last().unwrap();
        let mut total = 0.0;
        for (row, &t) in logits.chunks_exact(d).zip(batch.targets()) {
            total += log_sum_exp(row) - row[t];
        }
        Ok(Forward {
            activations,
            loss: total / p as f64,
            classes: d,
        })
    }

    fn backward(
        &self,
        params: &[f64],
        batch: &Batch,
        mask: &TrainableMask,
        fwd: &Forward,
        grad: &mut [f64],
    ) {
        let p = batch.len();
        let d = self.classes();
        let layers = self.widths.len() - 1;
        let lowest_trainable_layer = mask.trainable().map(|s| s / 2).min().unwrap_or(layers);

        // dL/dlogits = (softmax - onehot) / p
        let inv_p = 1.0 / p as f64;
        let mut delta: Vec<f64> = Vec::with_capacity(p * d);
        for (row, &t) in fwd.logits().chunks_exact(d).zip(batch.targets()) {
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z));
            let denom: f64 = row.iter().map(|&z| (z - max).exp()).sum();
            delta.extend(row.iter().map(|&z| (z - max).exp() / denom * inv_p));
            let last = delta.len() - d + t;
            delta[last] -= inv_p;
        }

        for l in (lowest_trainable_layer..layers).rev() {
            let (fan_in, fan_out) = (self.widths[l], self.widths[l + 1]);
            let w_seg = 2 * l;
            let b_seg = 2 * l + 1;

            if mask.is_trainable(b_seg) {
                let gb = &mut grad[self.segments[b_seg].range()];
                for row in delta.chunks_exact(fan_out) {
                    for (g, &dz) in gb.iter_mut().zip(row) {
                        *g += dz;
                    }
                }
            }
            if mask.is_trainable(w_seg) {
                let gw = &mut grad[self.segments[w_seg].range()];
                if l == 0 {
                    for s in 0..p {
                        let x = batch.row(s);
                        let nz = batch.nonzeros(s);
                        for (o, &dz) in delta[s * fan_out..(s + 1) * fan_out].iter().enumerate() {
                            if dz == 0.0 {
                                continue;
                            }
                            let go = &mut gw[o * fan_in..(o + 1) * fan_in];
                            for &j in nz {
                                go[j as usize] += dz * x[j as usize];
                            }
                        }
                    }
                } else {
                    let a_prev = &fwd.activations[l - 1];
                    for s in 0..p {
                        let a = &a_prev[s * fan_in..(s + 1) * fan_in];
                        for (o, &dz) in delta[s * fan_out..(s + 1) * fan_out].iter().enumerate() {
                            if dz != 0.0 {
                                axpy(dz, a, &mut gw[o * fan_in..(o + 1) * fan_in]);
                            }
                        }
                    }
                }
            }

            if l > lowest_trainable_layer {
                let w = &params[self.segments[w_seg].range()];
                let a_prev = &fwd.activations[l - 1];
                let mut next = vec![0.0; p * fan_in];
                for s in 0..p {
                    let dst = &mut next[s * fan_in..(s + 1) * fan_in];
                    for (o, &dz) in delta[s * fan_out..(s + 1) * fan_out].iter().enumerate() {
                        if dz != 0.0 {
                            axpy(dz, &w[o * fan_in..(o + 1) * fan_in], dst);
                        }
                    }
                    // ReLU'(z) = 1 for z > 0, 0 otherwise (including z = 0).
                    let a = &a_prev[s * fan_in..(s + 1) * fan_in];
                    for (g, &act) in dst.iter_mut().zip(a) {
                        if act <= 0.0 {
                            *g = 0.0;
                        }
                    }
                }
                delta = next;
            }
        }
    }
}

struct Forward {
    activations: Vec<Vec<f64>>,
    loss: f64,
    classes: usize,
}

impl Forward {
    fn logits(&self) -> &[f64] {
        let l = self.activations.last().unwrap();
        debug_assert_eq!(l.len() % self.classes, 0);
        l
    }
}

fn check_finite(loss: f64) -> Result<(), ModelError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(ModelError::NonFiniteLoss(loss))
    }
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z));
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use proptest::prelude::*;

    fn random_batch(features: usize, classes: usize, p: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = (0..p * features).map(|_| rng.gen_range(0.0..1.0)).collect();
        let targets = (0..p).map(|_| rng.gen_range(0..classes)).collect();
        Batch::new(inputs, features, targets).unwrap()
    }

    fn central_difference(mlp: &Mlp, params: &[f64], batch: &Batch, i: usize, h: f64) -> f64 {
        let mut x = params.to_vec();
        x[i] = params[i] + h;
        let up = mlp.loss(&x, batch).unwrap();
        x[i] = params[i] - h;
        let down = mlp.loss(&x, batch).unwrap();
        (up - down) / (2.0 * h)
    }

    #[test]
    fn parameter_counts() {
        let mlp = Mlp::new(&MlpSpec::new(vec![784, 32, 32, 10], 0)).unwrap();
        assert_eq!(784 * 32 + 32 + 32 * 32 + 32 + 32 * 10 + 10, 26_506);
        assert_eq!(mlp.param_count(), 26_506);
        assert_eq!(mlp.segment_count(), 6);
        let names: Vec<_> = mlp.segments().iter().map(|s| s.name.as_str()).collect();
        assert_eq!(
            names,
            ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias", "fc3.weight", "fc3.bias"]
        );

        let tiny = Mlp::new(&MlpSpec::new(vec![2, 1], 0)).unwrap();
        assert_eq!(tiny.param_count(), 3);
    }

    #[test]
    fn invalid_specs() {
        assert!(Mlp::new(&MlpSpec::new(vec![3], 0)).is_err());
        assert!(Mlp::new(&MlpSpec::new(vec![3, 0, 2], 0)).is_err());
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let mlp = Mlp::new(&MlpSpec::new(vec![5, 4, 3], 0)).unwrap();
        let a = mlp.init_params(11);
        let b = mlp.init_params(11);
        assert_eq!(a, b);
        assert_ne!(a, mlp.init_params(12));
        assert!(a.segment_values(1).iter().all(|&v| v == 0.0));
        assert!(a.segment_values(3).iter().all(|&v| v == 0.0));
        let bound = 1.0 / 5f64.sqrt();
        assert!(a.segment_values(0).iter().all(|v| v.abs() < bound));
    }

    #[test]
    fn zero_params_give_uniform_softmax() {
        let mlp = Mlp::new(&MlpSpec::new(vec![6, 5, 10], 0)).unwrap();
        let batch = random_batch(6, 10, 7, 3);
        let zeros = vec![0.0; mlp.param_count()];
        let loss = mlp.loss(&zeros, &batch).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert!((loss - 2.302585).abs() < 1e-6);
    }

    #[test]
    fn zero_params_accuracy_is_class_zero_frequency() {
        let mlp = Mlp::new(&MlpSpec::new(vec![3, 4, 3], 0)).unwrap();
        let batch = random_batch(3, 3, 40, 9);
        let zeros = vec![0.0; mlp.param_count()];
        let eval = mlp.evaluate(&zeros, &batch).unwrap();
        let freq = batch.targets().iter().filter(|&&t| t == 0).count() as f64 / 40.0;
        assert_eq!(eval.accuracy, freq);
    }

    #[test]
    fn separating_params_give_full_accuracy() {
        // Single linear layer: logit_0 = -x, logit_1 = x.
        let mlp = Mlp::new(&MlpSpec::new(vec![1, 2], 0)).unwrap();
        let params = vec![-1.0, 1.0, 0.0, 0.0];
        let batch = Batch::new(vec![-1.0, 1.0], 1, vec![0, 1]).unwrap();
        assert_eq!(mlp.evaluate(&params, &batch).unwrap().accuracy, 1.0);
    }

    #[test]
    fn empty_mask_gives_zero_gradient() {
        let mlp = Mlp::new(&MlpSpec::new(vec![4, 3, 2], 0)).unwrap();
        let params = mlp.init_params(1);
        let batch = random_batch(4, 2, 5, 2);
        let (loss, grad) = mlp
            .loss_and_grad(&params.values, &batch, &TrainableMask::none(4))
            .unwrap();
        assert!(loss > 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn full_gradient_matches_finite_differences() {
        let mlp = Mlp::new(&MlpSpec::new(vec![4, 3, 2], 0)).unwrap();
        let params = mlp.init_params(5);
        let mut values = params.values.clone();
        // nonzero biases so every path is exercised
        for v in values.iter_mut().skip(12).take(3) {
            *v = 0.1;
        }
        let batch = random_batch(4, 2, 20, 6);
        let (_, grad) = mlp
            .loss_and_grad(&values, &batch, &TrainableMask::all(4))
            .unwrap();
        for i in 0..mlp.param_count() {
            let fd = central_difference(&mlp, &values, &batch, i, 1e-5);
            let rel = (fd - grad[i]).abs() / grad[i].abs().max(fd.abs()).max(1e-6);
            assert!(rel <= 1e-5, "coord {i}: analytic {} fd {fd}", grad[i]);
        }
    }

    #[test]
    fn non_finite_loss_is_an_error() {
        let mlp = Mlp::new(&MlpSpec::new(vec![1, 2], 0)).unwrap();
        let params = vec![f64::INFINITY, 0.0, 0.0, 0.0];
        let batch = Batch::new(vec![1.0], 1, vec![1]).unwrap();
        assert!(matches!(
            mlp.loss(&params, &batch),
            Err(ModelError::NonFiniteLoss(_))
        ));
    }

    #[test]
    fn batch_validation() {
        assert_eq!(Batch::new(vec![], 2, vec![]), Err(ModelError::EmptyBatch));
        assert!(matches!(
            Batch::new(vec![1.0; 3], 2, vec![0, 1]),
            Err(ModelError::RaggedBatch { .. })
        ));
        assert_eq!(
            Batch::new(vec![f64::NAN, 1.0], 2, vec![0]),
            Err(ModelError::NonFiniteInput)
        );
        let mlp = Mlp::new(&MlpSpec::new(vec![2, 2], 0)).unwrap();
        let batch = Batch::new(vec![0.0, 1.0], 2, vec![5]).unwrap();
        assert!(matches!(
            mlp.loss(&[0.0; 6], &batch),
            Err(ModelError::TargetOutOfRange { .. })
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn prop_masked_gradient(seed in 0u64..1000, mask_bits in 0u8..64) {
            let mlp = Mlp::new(&MlpSpec::new(vec![4, 3, 3, 2], 0)).unwrap();
            let params = mlp.init_params(seed);
            let batch = random_batch(4, 2, 9, seed + 1);
            let mask = TrainableMask::from_segments((0..6).filter(|i| mask_bits & (1 << i) != 0), 6).unwrap();
            let (_, full) = mlp.loss_and_grad(&params.values, &batch, &TrainableMask::all(6)).unwrap();
            let (_, masked) = mlp.loss_and_grad(&params.values, &batch, &mask).unwrap();
            for (k, seg) in mlp.segments().iter().enumerate() {
                for i in seg.range() {
                    if mask.is_trainable(k) {
                        prop_assert_eq!(masked[i], full[i]);
                    } else {
                        prop_assert_eq!(masked[i], 0.0);
                    }
                }
            }
        }

        #[test]
        fn prop_frozen_segment_changes_loss_not_gradient(seed in 0u64..1000, shift in 0.1f64..1.0) {
            let mlp = Mlp::new(&MlpSpec::new(vec![3, 4, 2], 0)).unwrap();
            let params = mlp.init_params(seed);
            let batch = random_batch(3, 2, 8, seed);
            let mask = TrainableMask::from_segments([0, 1], 4).unwrap();
            let mut moved = params.values.clone();
            // one output row only; a uniform shift of all logits is invisible to softmax
            let off = mlp.segments()[2].offset;
            for v in &mut moved[off..off + 4] {
                *v += shift;
            }
            let (l0, _) = mlp.loss_and_grad(&params.values, &batch, &mask).unwrap();
            let (l1, g1) = mlp.loss_and_grad(&moved, &batch, &mask).unwrap();
            prop_assert!(l0 != l1);
            prop_assert!(g1[mlp.segments()[2].offset..].iter().all(|&g| g == 0.0));
        }

        #[test]
        fn prop_flatten_roundtrip(widths in prop::collection::vec(1usize..6, 2..5), seed in any::<u64>()) {
            let mlp = Mlp::new(&MlpSpec::new(widths, 0)).unwrap();
            let params = mlp.init_params(seed);
            let back = ParamVector::flatten(&params.unflatten(), mlp.segment_table()).unwrap();
            prop_assert_eq!(back, params);
        }
    }
}
