//! Minimal feed-forward network engine: forward pass, cross-entropy,
//! manual backpropagation, and SGD steps.
//!
//! Networks are dense MLPs with rectifier hidden layers and a softmax
//! output, sized by an explicit `layer_dims` list. Two backprop entry
//! points exist: the usual cross-entropy path, and a general path that
//! starts from a gradient with respect to the softmax *output* so a frozen
//! downstream network (the detector) can be composed with an upstream one
//! (the Trojan model).

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Floor applied inside logarithms so cross-entropy stays finite when a
/// predicted probability underflows.
pub const LOG_CLAMP: f64 = 1e-12;

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut T {
        &mut self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A probability vector over `k` classes.
///
/// One-hot labels and model outputs are both `LabelDist` values; entries lie
/// in `[0,1]` and sum to one within a small tolerance.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelDist<T>(Vec<T>);

impl<T: Scalar> LabelDist<T> {
    /// Validates and wraps a probability vector.
    pub fn new(entries: Vec<T>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("label distribution must be nonempty"));
        }
        let mut sum = T::zero();
        for &v in &entries {
            if !(v >= T::zero() && v <= T::one()) {
                return Err(Error::invalid(format!(
                    "label distribution entry {v} outside [0,1]"
                )));
            }
            sum += v;
        }
        let tol = T::of(1e-9).max(T::of_usize(8 * entries.len()) * T::epsilon());
        if (sum - T::one()).abs() > tol {
            return Err(Error::invalid(format!(
                "label distribution sums to {sum}, expected 1"
            )));
        }
        Ok(Self(entries))
    }

    pub fn one_hot(k: usize, class: usize) -> Result<Self> {
        if class >= k {
            return Err(Error::invalid(format!("class {class} out of range for k={k}")));
        }
        let mut v = vec![T::zero(); k];
        v[class] = T::one();
        Ok(Self(v))
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("uniform distribution needs k >= 1"));
        }
        Ok(Self(vec![T::one() / T::of_usize(k); k]))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[T] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<T> {
        self.0
    }
}

/// Numerically stable softmax (max-subtraction before exponentiation).
pub fn softmax<T: Scalar>(logits: &[T]) -> LabelDist<T> {
    assert!(!logits.is_empty(), "softmax over empty logits");
    let max = logits.iter().cloned().fold(logits[0], T::max);
    let mut out: Vec<T> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum = out.iter().fold(T::zero(), |acc, &v| acc + v);
    for v in &mut out {
        *v = *v / sum;
    }
    LabelDist(out)
}

/// Cross-entropy `-sum target_j * ln(max(predicted_j, 1e-12))`.
pub fn cross_entropy<T: Scalar>(target: &LabelDist<T>, predicted: &LabelDist<T>) -> Result<T> {
    if target.len() != predicted.len() {
        return Err(Error::invalid(format!(
            "cross-entropy length mismatch: target {} vs predicted {}",
            target.len(),
            predicted.len()
        )));
    }
    Ok(cross_entropy_probs(target.as_slice(), predicted.as_slice()))
}

/// Cross-entropy over raw probability slices; NaN inputs propagate to the
/// result instead of erroring, so training loops can detect divergence at
/// their own checkpoints.
pub(crate) fn cross_entropy_probs<T: Scalar>(target: &[T], predicted: &[T]) -> T {
    debug_assert_eq!(target.len(), predicted.len());
    let clamp = T::of(LOG_CLAMP);
    let mut loss = T::zero();
    for (&t, &p) in target.iter().zip(predicted) {
        if t > T::zero() {
            let clamped = if p.is_nan() || p > clamp { p } else { clamp };
            loss -= t * clamped.ln();
        }
    }
    loss
}

/// Argmax with ties broken toward the lowest index.
pub fn predict_class<T: Scalar>(p: &LabelDist<T>) -> usize {
    let mut best = 0;
    for (i, &v) in p.as_slice().iter().enumerate().skip(1) {
        if v > p.as_slice()[best] {
            best = i;
        }
    }
    best
}

/// Per-layer activations from one forward pass.
///
/// `activations[0]` is the input; `activations[l+1]` is the post-activation
/// output of layer `l` (rectified for hidden layers, probabilities for the
/// final layer).
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    activations: Vec<Vec<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    /// Final-layer probabilities.
    pub fn output(&self) -> &[T] {
        self.activations.last().expect("trace has output layer")
    }
}

/// Parameter gradients shaped like a model.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    weights: Vec<Matrix<T>>,
    biases: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(model: &Model<T>) -> Self {
        Self {
            weights: model
                .weights
                .iter()
                .map(|w| Matrix::zeros(w.rows, w.cols))
                .collect(),
            biases: model.biases.iter().map(|b| vec![T::zero(); b.len()]).collect(),
        }
    }

    pub fn scale(&mut self, s: T) {
        for w in &mut self.weights {
            for v in &mut w.data {
                *v *= s;
            }
        }
        for b in &mut self.biases {
            for v in b {
                *v *= s;
            }
        }
    }
}

/// Layered feed-forward classifier: rectifier hidden layers, softmax output.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    layer_dims: Vec<usize>,
    weights: Vec<Matrix<T>>,
    biases: Vec<Vec<T>>,
}

impl<T: Scalar> Model<T> {
    /// Initializes a model with weights drawn uniformly from
    /// `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` and zero biases, fully determined
    /// by `seed`.
    pub fn init(layer_dims: &[usize], seed: u64) -> Result<Self> {
        if layer_dims.len() < 2 {
            return Err(Error::invalid(format!(
                "layer_dims needs at least 2 entries, got {}",
                layer_dims.len()
            )));
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid("layer_dims entries must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::with_capacity(layer_dims.len() - 1);
        let mut biases = Vec::with_capacity(layer_dims.len() - 1);
        for pair in layer_dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = T::one() / T::of_usize(fan_in).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            let data: Vec<T> = (0..fan_in * fan_out).map(|_| dist.sample(&mut rng)).collect();
            weights.push(Matrix {
                rows: fan_out,
                cols: fan_in,
                data,
            });
            biases.push(vec![T::zero(); fan_out]);
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("at least two layer dims")
    }

    pub fn weights(&self) -> &[Matrix<T>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<T>] {
        &self.biases
    }

    fn check_input(&self, x: &[T]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::invalid(format!(
                "input length {} does not match model input dim {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass returning class probabilities.
    pub fn forward(&self, x: &[T]) -> Result<LabelDist<T>> {
        let trace = self.forward_trace(x)?;
        Ok(LabelDist(trace.activations.into_iter().last().unwrap()))
    }

    /// Forward pass retaining all intermediate activations for backprop.
    pub fn forward_trace(&self, x: &[T]) -> Result<ForwardTrace<T>> {
        self.check_input(x)?;
        let n_layers = self.weights.len();
        let mut activations = Vec::with_capacity(n_layers + 1);
        activations.push(x.to_vec());
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = vec![T::zero(); w.rows];
            let input = activations.last().unwrap();
            for (o, zo) in z.iter_mut().enumerate() {
                let mut acc = b[o];
                for (wi, xi) in w.row(o).iter().zip(input.iter()) {
                    acc += *wi * *xi;
                }
                *zo = acc;
            }
            if l + 1 < n_layers {
                for v in &mut z {
                    if *v < T::zero() {
                        *v = T::zero();
                    }
                }
                activations.push(z);
            } else {
                activations.push(softmax(&z).into_vec());
            }
        }
        Ok(ForwardTrace { activations })
    }

    /// Predicted class for one input.
    pub fn predict(&self, x: &[T]) -> Result<usize> {
        Ok(predict_class(&self.forward(x)?))
    }

    /// Shared backward pass: takes dL/dz for the output layer's logits and
    /// accumulates parameter gradients; returns dL/d(input).
    fn backprop_logits(
        &self,
        trace: &ForwardTrace<T>,
        mut delta: Vec<T>,
        grads: &mut Gradients<T>,
    ) -> Vec<T> {
        for l in (0..self.weights.len()).rev() {
            let input = &trace.activations[l];
            let w = &self.weights[l];
            let gw = &mut grads.weights[l];
            for (o, &d) in delta.iter().enumerate() {
                grads.biases[l][o] += d;
                let row = &mut gw.data[o * gw.cols..(o + 1) * gw.cols];
                for (g, &xi) in row.iter_mut().zip(input.iter()) {
                    *g += d * xi;
                }
            }
            if l == 0 {
                let mut d_input = vec![T::zero(); w.cols];
                for (o, &d) in delta.iter().enumerate() {
                    for (di, &wi) in d_input.iter_mut().zip(w.row(o)) {
                        *di += wi * d;
                    }
                }
                return d_input;
            }
            // Pull the delta through W and the rectifier of the layer below.
            let below = &trace.activations[l];
            let mut next_delta = vec![T::zero(); w.cols];
            for (o, &d) in delta.iter().enumerate() {
                for (nd, &wi) in next_delta.iter_mut().zip(w.row(o)) {
                    *nd += wi * d;
                }
            }
            for (nd, &a) in next_delta.iter_mut().zip(below.iter()) {
                if a <= T::zero() {
                    *nd = T::zero();
                }
            }
            delta = next_delta;
        }
        unreachable!("model has at least one layer");
    }

    /// Backprop of cross-entropy against `target`, accumulating into `grads`.
    /// Returns the gradient with respect to the input vector.
    pub fn backprop_ce(
        &self,
        trace: &ForwardTrace<T>,
        target: &LabelDist<T>,
        grads: &mut Gradients<T>,
    ) -> Result<Vec<T>> {
        let probs = trace.output();
        if target.len() != probs.len() {
            return Err(Error::invalid(format!(
                "target length {} does not match output dim {}",
                target.len(),
                probs.len()
            )));
        }
        // Softmax + cross-entropy: dL/dz = p - t.
        let delta: Vec<T> = probs
            .iter()
            .zip(target.as_slice())
            .map(|(&p, &t)| p - t)
            .collect();
        Ok(self.backprop_logits(trace, delta, grads))
    }

    /// Backprop from a gradient with respect to the softmax *output*,
    /// accumulating into `grads`. Used to chain a frozen downstream network
    /// onto this one. Returns the gradient with respect to the input vector.
    pub fn backprop_output_grad(
        &self,
        trace: &ForwardTrace<T>,
        d_output: &[T],
        grads: &mut Gradients<T>,
    ) -> Result<Vec<T>> {
        let probs = trace.output();
        if d_output.len() != probs.len() {
            return Err(Error::invalid(format!(
                "output gradient length {} does not match output dim {}",
                d_output.len(),
                probs.len()
            )));
        }
        // Softmax Jacobian: dL/dz_i = p_i * (g_i - sum_j g_j p_j).
        let dot = d_output
            .iter()
            .zip(probs)
            .fold(T::zero(), |acc, (&g, &p)| acc + g * p);
        let delta: Vec<T> = probs
            .iter()
            .zip(d_output)
            .map(|(&p, &g)| p * (g - dot))
            .collect();
        Ok(self.backprop_logits(trace, delta, grads))
    }

    /// Mean cross-entropy gradients over a batch, plus the mean loss.
    pub fn batch_gradients(&self, batch: &[(&[T], &LabelDist<T>)]) -> Result<(Gradients<T>, T)> {
        if batch.is_empty() {
            return Err(Error::invalid("gradient step needs a nonempty batch"));
        }
        let mut grads = Gradients::zeros_like(self);
        let mut loss = T::zero();
        for (x, target) in batch {
            let trace = self.forward_trace(x)?;
            loss += cross_entropy(target, &LabelDist(trace.output().to_vec()))?;
            self.backprop_ce(&trace, target, &mut grads)?;
        }
        let inv = T::one() / T::of_usize(batch.len());
        grads.scale(inv);
        Ok((grads, loss * inv))
    }

    /// Applies `params += scale * grads` in place.
    pub fn apply_gradients(&mut self, grads: &Gradients<T>, scale: T) {
        for (w, gw) in self.weights.iter_mut().zip(&grads.weights) {
            for (v, &g) in w.data.iter_mut().zip(&gw.data) {
                *v += scale * g;
            }
        }
        for (b, gb) in self.biases.iter_mut().zip(&grads.biases) {
            for (v, &g) in b.iter_mut().zip(gb) {
                *v += scale * g;
            }
        }
    }

    /// One SGD step on mean cross-entropy over the batch; in place.
    /// Returns the pre-step mean loss.
    pub fn sgd_step(&mut self, batch: &[(&[T], &LabelDist<T>)], lr: T) -> Result<T> {
        let (grads, loss) = self.batch_gradients(batch)?;
        self.apply_gradients(&grads, -lr);
        Ok(loss)
    }

    /// One SGD step on mean cross-entropy over the batch, returning the
    /// updated model and leaving `self` untouched.
    pub fn grad_step(&self, batch: &[(&[T], &LabelDist<T>)], lr: T) -> Result<Model<T>> {
        let mut next = self.clone();
        next.sgd_step(batch, lr)?;
        Ok(next)
    }

    /// Flattened copy of all parameters (layer-major: W0, b0, W1, b1, ...).
    pub fn params(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(&w.data);
            out.extend_from_slice(b);
        }
        out
    }

    /// Replaces all parameters from a flat vector in `params` order.
    pub fn set_params(&mut self, flat: &[T]) -> Result<()> {
        let expected: usize = self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.data.len() + b.len())
            .sum();
        if flat.len() != expected {
            return Err(Error::invalid(format!(
                "expected {expected} parameters, got {}",
                flat.len()
            )));
        }
        let mut i = 0;
        for (w, b) in self.weights.iter_mut().zip(&mut self.biases) {
            let wlen = w.data.len();
            w.data.copy_from_slice(&flat[i..i + wlen]);
            i += wlen;
            let blen = b.len();
            b.copy_from_slice(&flat[i..i + blen]);
            i += blen;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.data.len() + b.len())
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite)
            && self.biases.iter().flatten().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn batch_loss(model: &Model<f64>, batch: &[(&[f64], &LabelDist<f64>)]) -> f64 {
        let mut total = 0.0;
        for (x, t) in batch {
            let p = model.forward(x).unwrap();
            total += cross_entropy(t, &p).unwrap();
        }
        total / batch.len() as f64
    }

    #[test]
    fn init_is_deterministic() {
        let a = Model::<f64>::init(&[4, 3, 2], 7).unwrap();
        let b = Model::<f64>::init(&[4, 3, 2], 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn init_biases_are_zero() {
        let m = Model::<f64>::init(&[4, 2], 99).unwrap();
        assert!(m.biases().iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn init_weight_scale_bounded_by_fan_in() {
        let m = Model::<f64>::init(&[784, 64, 10], 1).unwrap();
        let limit = 1.0 / (784f64).sqrt();
        assert!(m.weights()[0].data().iter().all(|v| v.abs() <= limit));
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(Model::<f64>::init(&[4], 0).is_err());
        assert!(Model::<f64>::init(&[], 0).is_err());
        assert!(Model::<f64>::init(&[4, 0, 2], 0).is_err());
    }

    #[test]
    fn softmax_symmetry_and_shift_invariance() {
        let p = softmax(&[0.0f64, 0.0]);
        assert_eq!(p.as_slice(), &[0.5, 0.5]);
        for c in [-100.0, 0.0, 3.7] {
            let p = softmax::<f64>(&[c, c, c]);
            for &v in p.as_slice() {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_handles_large_logits_without_overflow() {
        let p = softmax(&[1000.0f64, 0.0]);
        assert!(p.as_slice()[0] > 1.0 - 1e-12);
        assert!(p.as_slice()[1] < 1e-12);
        assert!(p.as_slice().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_zero_model_is_uniform() {
        let mut m = Model::<f64>::init(&[5, 4, 3], 3).unwrap();
        let zeros = vec![0.0; m.param_count()];
        m.set_params(&zeros).unwrap();
        let p = m.forward(&[0.2, 0.9, 0.1, 0.0, 0.4]).unwrap();
        for &v in p.as_slice() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_pure() {
        let m = Model::<f64>::init(&[4, 3, 2], 11).unwrap();
        let x = [0.1, 0.5, 0.9, 0.3];
        assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
    }

    #[test]
    fn forward_rejects_shape_mismatch() {
        let m = Model::<f64>::init(&[4, 3, 2], 11).unwrap();
        assert!(m.forward(&[0.1, 0.5]).is_err());
    }

    #[test]
    fn forward_matches_hand_computation_on_2_2_2() {
        // Unit weights, zero biases: hidden = relu([x1+x2, x1+x2]),
        // logits = [h1+h2, h1+h2], softmax of equal logits = [0.5, 0.5].
        let mut m = Model::<f64>::init(&[2, 2, 2], 0).unwrap();
        m.set_params(&[1.0, 1.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0, 0.0])
            .unwrap();
        let p = m.forward(&[0.3, 0.5]).unwrap();
        assert_eq!(p.as_slice(), &[0.5, 0.5]);

        // Distinct weights, hand-computed:
        // W0 = [[1, -1], [2, 0]], b0 = [0.1, -0.2]
        // W1 = [[1, 2], [0, 1]],  b1 = [0, 0.5]
        // x = (0.5, 0.25):
        //   z0 = [0.5-0.25+0.1, 1.0-0.2] = [0.35, 0.8], relu -> same
        //   z1 = [0.35+1.6, 0.8+0.5] = [1.95, 1.3]
        let mut m = Model::<f64>::init(&[2, 2, 2], 0).unwrap();
        m.set_params(&[1.0, -1.0, 2.0, 0.0, 0.1, -0.2, 1.0, 2.0, 0.0, 1.0, 0.0, 0.5])
            .unwrap();
        let p = m.forward(&[0.5, 0.25]).unwrap();
        let expect = softmax(&[1.95f64, 1.3]);
        for (a, b) in p.as_slice().iter().zip(expect.as_slice()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_zero_when_prediction_is_exact_one_hot() {
        let t = LabelDist::<f64>::one_hot(4, 2).unwrap();
        let p = LabelDist::<f64>::one_hot(4, 2).unwrap();
        assert_eq!(cross_entropy(&t, &p).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_uniform_is_log_k() {
        let u = LabelDist::<f64>::uniform(4).unwrap();
        let ce = cross_entropy(&u, &u).unwrap();
        assert!((ce - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_zero_probability() {
        let t = LabelDist::<f64>::one_hot(3, 0).unwrap();
        let p = LabelDist::new(vec![0.0, 0.5, 0.5]).unwrap();
        let ce = cross_entropy(&t, &p).unwrap();
        assert!((ce - (-(1e-12f64).ln())).abs() < 1e-9);
        assert!(ce.is_finite());
    }

    #[test]
    fn cross_entropy_rejects_length_mismatch() {
        let t = LabelDist::<f64>::one_hot(3, 0).unwrap();
        let p = LabelDist::<f64>::uniform(4).unwrap();
        assert!(cross_entropy(&t, &p).is_err());
    }

    #[test]
    fn grad_step_with_zero_lr_is_identity() {
        let m = Model::<f64>::init(&[4, 3, 2], 5).unwrap();
        let x = [0.1, 0.2, 0.3, 0.4];
        let t = LabelDist::one_hot(2, 1).unwrap();
        let stepped = m.grad_step(&[(&x, &t)], 0.0).unwrap();
        assert_eq!(m, stepped);
    }

    #[test]
    fn grad_step_rejects_empty_batch() {
        let m = Model::<f64>::init(&[4, 3, 2], 5).unwrap();
        assert!(m.grad_step(&[], 0.1).is_err());
    }

    #[test]
    fn repeated_steps_do_not_increase_single_sample_loss() {
        let mut m = Model::<f64>::init(&[4, 3, 2], 5).unwrap();
        let x = [0.7, 0.2, 0.9, 0.1];
        let t = LabelDist::one_hot(2, 0).unwrap();
        let mut prev = batch_loss(&m, &[(&x, &t)]);
        for _ in 0..100 {
            m.sgd_step(&[(&x, &t)], 0.05).unwrap();
            let now = batch_loss(&m, &[(&x, &t)]);
            assert!(now <= prev + 1e-12, "loss increased: {prev} -> {now}");
            prev = now;
        }
    }

    #[test]
    fn backprop_matches_central_finite_differences() {
        // 20 random (model, batch) draws on a 4-3-2 network; h = 1e-4.
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for seed in 0..20u64 {
            let mut m = Model::<f64>::init(&[4, 3, 2], seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
            let dist = Uniform::new(0.0f64, 1.0);
            let xs: Vec<[f64; 4]> = (0..3)
                .map(|_| std::array::from_fn(|_| dist.sample(&mut rng)))
                .collect();
            let ts: Vec<LabelDist<f64>> = (0..3)
                .map(|i| LabelDist::one_hot(2, i % 2).unwrap())
                .collect();
            let batch: Vec<(&[f64], &LabelDist<f64>)> =
                xs.iter().map(|x| x.as_slice()).zip(ts.iter()).collect();

            let (grads, _) = m.batch_gradients(&batch).unwrap();
            let mut analytic = Vec::new();
            for (w, b) in grads.weights.iter().zip(&grads.biases) {
                analytic.extend_from_slice(w.data());
                analytic.extend_from_slice(b);
            }

            let base = m.params();
            for (i, &g) in analytic.iter().enumerate() {
                let mut p = base.clone();
                p[i] = base[i] + h;
                m.set_params(&p).unwrap();
                let up = batch_loss(&m, &batch);
                p[i] = base[i] - h;
                m.set_params(&p).unwrap();
                let down = batch_loss(&m, &batch);
                let numeric = (up - down) / (2.0 * h);
                let scale = g.abs().max(numeric.abs()).max(1.0);
                worst = worst.max((g - numeric).abs() / scale);
            }
            m.set_params(&base).unwrap();
        }
        assert!(worst < 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn composed_output_grad_matches_finite_differences() {
        // d/dparams of f(model(x)) where f reads the softmax output directly.
        let h = 1e-4;
        let m0 = Model::<f64>::init(&[4, 3, 2], 42).unwrap();
        let x = [0.3, 0.8, 0.1, 0.6];
        // f(p) = 2*p0 + p1^2, df/dp = [2, 2*p1]
        let f = |m: &Model<f64>| {
            let p = m.forward(&x).unwrap();
            2.0 * p.as_slice()[0] + p.as_slice()[1].powi(2)
        };
        let trace = m0.forward_trace(&x).unwrap();
        let p = trace.output().to_vec();
        let d_out = vec![2.0, 2.0 * p[1]];
        let mut grads = Gradients::zeros_like(&m0);
        m0.backprop_output_grad(&trace, &d_out, &mut grads).unwrap();
        let mut analytic = Vec::new();
        for (w, b) in grads.weights.iter().zip(&grads.biases) {
            analytic.extend_from_slice(w.data());
            analytic.extend_from_slice(b);
        }

        let base = m0.params();
        let mut m = m0.clone();
        for (i, &g) in analytic.iter().enumerate() {
            let mut pvec = base.clone();
            pvec[i] = base[i] + h;
            m.set_params(&pvec).unwrap();
            let up = f(&m);
            pvec[i] = base[i] - h;
            m.set_params(&pvec).unwrap();
            let down = f(&m);
            let numeric = (up - down) / (2.0 * h);
            let scale: f64 = g.abs().max(numeric.abs()).max(1.0);
            assert!(
                (g - numeric).abs() / scale < 1e-4,
                "param {i}: analytic {g} vs numeric {numeric}"
            );
        }
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let mut m = Model::<f64>::init(&[4, 3, 2], 5).unwrap();
            let x0 = [0.7, 0.2, 0.9, 0.1];
            let x1 = [0.3, 0.4, 0.2, 0.8];
            let t0 = LabelDist::one_hot(2, 0).unwrap();
            let t1 = LabelDist::one_hot(2, 1).unwrap();
            for _ in 0..50 {
                m.sgd_step(&[(&x0, &t0), (&x1, &t1)], 0.1).unwrap();
            }
            m.params()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn predict_class_breaks_ties_low() {
        assert_eq!(predict_class(&LabelDist::new(vec![0.1, 0.7, 0.2]).unwrap()), 1);
        assert_eq!(predict_class(&LabelDist::new(vec![0.5, 0.5]).unwrap()), 0);
        assert_eq!(predict_class(&LabelDist::<f64>::uniform(7).unwrap()), 0);
    }

    #[test]
    fn works_in_f32_too() {
        let m = Model::<f32>::init(&[4, 3, 2], 7).unwrap();
        let p = m.forward(&[0.1f32, 0.2, 0.3, 0.4]).unwrap();
        let sum: f32 = p.as_slice().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn forward_outputs_are_probability_vectors(
            seed in 0u64..500,
            xs in proptest::collection::vec(0.0f64..1.0, 6)
        ) {
            let m = Model::<f64>::init(&[6, 5, 4], seed).unwrap();
            let p = m.forward(&xs).unwrap();
            let sum: f64 = p.as_slice().iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(p.as_slice().iter().all(|&v| v >= 0.0));
        }

        #[test]
        fn cross_entropy_is_nonnegative(
            t in proptest::collection::vec(0.0f64..1.0, 5),
            p in proptest::collection::vec(0.0f64..1.0, 5)
        ) {
            let norm = |v: Vec<f64>| {
                let s: f64 = v.iter().sum();
                let v: Vec<f64> = if s == 0.0 {
                    vec![0.2; 5]
                } else {
                    v.into_iter().map(|x| x / s).collect()
                };
                LabelDist::new(v).unwrap()
            };
            let ce = cross_entropy(&norm(t), &norm(p)).unwrap();
            prop_assert!(ce >= 0.0);
        }
    }
}
