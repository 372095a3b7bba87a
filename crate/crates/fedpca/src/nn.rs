//! Two-layer perceptron with hand-derived gradients.
//!
//! Architecture: `probs = softmax(relu(x·W1ᵀ + b1)·W2ᵀ + b2)` with ReLU
//! hidden activations and a softmax cross-entropy head. Weights are stored
//! row-major as (output_dim × input_dim) so a row holds one output unit's
//! incoming weights. Gradients are written out explicitly rather than pulled
//! from an autodiff framework: the model is small enough that the closed
//! forms stay readable, and tests check them against central differences.
//!
//! The optimizer is SGD with classical momentum and L2 weight decay folded
//! into the gradient:
//!
//! ```text
//! v ← momentum·v + g + weight_decay·θ
//! θ ← θ − learning_rate·v
//! ```

use crate::error::{Error, Result};
use crate::matrix::DenseMatrix;
use rand::Rng;

/// Probabilities are clamped to at least this value inside `log` so that
/// cross-entropy stays finite even when the softmax saturates.
pub const PROB_FLOOR: f64 = 1e-12;

/// Parameters of the two-layer MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    /// Hidden-layer weights, `hidden_dim × input_dim`.
    pub w1: DenseMatrix,
    /// Hidden-layer biases, length `hidden_dim`.
    pub b1: Vec<f64>,
    /// Output-layer weights, `num_classes × hidden_dim`.
    pub w2: DenseMatrix,
    /// Output-layer biases, length `num_classes`.
    pub b2: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// The input batch, `batch × input_dim`.
    pub inputs: DenseMatrix,
    /// Post-ReLU hidden activations, `batch × hidden_dim`.
    pub features: DenseMatrix,
    /// Pre-softmax outputs, `batch × num_classes`.
    pub logits: DenseMatrix,
    /// Softmax probabilities; each row sums to 1.
    pub probs: DenseMatrix,
}

/// Gradients with the same shapes as [`MlpParams`].
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub w1: DenseMatrix,
    pub b1: Vec<f64>,
    pub w2: DenseMatrix,
    pub b2: Vec<f64>,
}

impl GradientSet {
    /// All-zero gradients shaped like `params`.
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            w1: DenseMatrix::zeros(params.w1.rows(), params.w1.cols()),
            b1: vec![0.0; params.b1.len()],
            w2: DenseMatrix::zeros(params.w2.rows(), params.w2.cols()),
            b2: vec![0.0; params.b2.len()],
        }
    }
}

/// SGD hyperparameters plus the momentum buffer.
#[derive(Debug, Clone)]
pub struct SgdState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Momentum buffer, same shapes as the parameters.
    pub velocity: GradientSet,
}

impl SgdState {
    /// Fresh optimizer state with a zeroed momentum buffer.
    pub fn new(
        learning_rate: f64,
        momentum: f64,
        weight_decay: f64,
        params: &MlpParams,
    ) -> Result<Self> {
        if !(learning_rate.is_finite() && learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive and finite, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {momentum}"
            )));
        }
        if !(weight_decay.is_finite() && weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight decay must be non-negative and finite, got {weight_decay}"
            )));
        }
        Ok(Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: GradientSet::zeros_like(params),
        })
    }
}

impl MlpParams {
    /// Initializes every layer uniformly in `[-1/sqrt(fan_in), +1/sqrt(fan_in)]`
    /// (biases included, using the layer's fan-in). Draw order is fixed —
    /// `w1` row-major, `b1`, `w2` row-major, `b2` — so the same RNG stream
    /// always yields the same model.
    pub fn init<R: Rng>(
        input_dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || num_classes == 0 {
            return Err(Error::InvalidArgument(format!(
                "all dimensions must be positive, got input={input_dim} hidden={hidden_dim} classes={num_classes}"
            )));
        }
        let mut draw = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let values: Vec<f64> =
                (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect();
            DenseMatrix::new(rows, cols, values)
        };
        let w1 = draw(hidden_dim, input_dim, input_dim)?;
        let b1 = draw(1, hidden_dim, input_dim)?.values().to_vec();
        let w2 = draw(num_classes, hidden_dim, hidden_dim)?;
        let b2 = draw(1, num_classes, hidden_dim)?.values().to_vec();
        Ok(Self { w1, b1, w2, b2 })
    }

    /// Constructs parameters from explicit pieces, validating shape coherence.
    pub fn from_parts(
        w1: DenseMatrix,
        b1: Vec<f64>,
        w2: DenseMatrix,
        b2: Vec<f64>,
    ) -> Result<Self> {
        if b1.len() != w1.rows() || w2.cols() != w1.rows() || b2.len() != w2.rows() {
            return Err(Error::Shape(format!(
                "incoherent layer shapes: w1 {}x{}, b1 {}, w2 {}x{}, b2 {}",
                w1.rows(),
                w1.cols(),
                b1.len(),
                w2.rows(),
                w2.cols(),
                b2.len()
            )));
        }
        Ok(Self { w1, b1, w2, b2 })
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.w2.rows()
    }
}

/// Runs the batch through the network and keeps every intermediate needed by
/// [`backward`]. A zero-row batch is legal and produces zero-row outputs.
pub fn forward(params: &MlpParams, batch: &DenseMatrix) -> Result<ForwardTrace> {
    if batch.cols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} columns but the model expects {}",
            batch.cols(),
            params.input_dim()
        )));
    }
    let n = batch.rows();
    let hidden = params.hidden_dim();
    let classes = params.num_classes();

    let mut features = DenseMatrix::zeros(n, hidden);
    for i in 0..n {
        let x = batch.row(i);
        let out = features.row_mut(i);
        for (h, slot) in out.iter_mut().enumerate() {
            let w = params.w1.row(h);
            let z = params.b1[h] + dot(w, x);
            *slot = if z > 0.0 { z } else { 0.0 };
        }
    }

    let mut logits = DenseMatrix::zeros(n, classes);
    for i in 0..n {
        let f = features.row(i);
        let out = logits.row_mut(i);
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = params.b2[c] + dot(params.w2.row(c), f);
        }
    }
    logits.check_finite("logits")?;

    let mut probs = logits.clone();
    for i in 0..n {
        softmax_in_place(probs.row_mut(i));
    }

    Ok(ForwardTrace { inputs: batch.clone(), features, logits, probs })
}

/// Mean cross-entropy of the traced batch against integer labels. The picked
/// probability is clamped at [`PROB_FLOOR`] inside the log, so the result is
/// always finite. An empty batch has loss 0.
pub fn cross_entropy(trace: &ForwardTrace, labels: &[usize]) -> Result<f64> {
    let n = trace.probs.rows();
    let classes = trace.probs.cols();
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {n} rows",
            labels.len()
        )));
    }
    if n == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        total -= trace.probs.get(i, y).max(PROB_FLOOR).ln();
    }
    Ok(total / n as f64)
}

/// Analytic gradients of the mean cross-entropy with respect to every
/// parameter. An empty batch yields all-zero gradients (the empty mean).
///
/// With `B` rows, `∂L/∂logits = (probs − onehot(y)) / B`; the rest is the
/// chain rule through the linear layers and the ReLU mask (`features > 0`,
/// i.e. the zero-input kink uses subgradient 0).
pub fn backward(
    params: &MlpParams,
    trace: &ForwardTrace,
    labels: &[usize],
) -> Result<GradientSet> {
    let n = trace.probs.rows();
    let classes = params.num_classes();
    let hidden = params.hidden_dim();
    let input = params.input_dim();
    if trace.inputs.cols() != input
        || trace.features.cols() != hidden
        || trace.probs.cols() != classes
    {
        return Err(Error::Shape(format!(
            "trace shapes ({}x{}, {}x{}, {}x{}) do not match the model (input {input}, hidden {hidden}, classes {classes})",
            trace.inputs.rows(),
            trace.inputs.cols(),
            trace.features.rows(),
            trace.features.cols(),
            trace.probs.rows(),
            trace.probs.cols(),
        )));
    }
    if labels.len() != n {
        return Err(Error::Shape(format!(
            "{} labels for a batch of {n} rows",
            labels.len()
        )));
    }
    let mut grads = GradientSet::zeros_like(params);
    if n == 0 {
        return Ok(grads);
    }
    let scale = 1.0 / n as f64;

    // d_logits = (probs − onehot) / B, one row at a time.
    let mut d_logits = trace.probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {y} out of range for {classes} classes"
            )));
        }
        let row = d_logits.row_mut(i);
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v *= scale;
        }
    }

    // Output layer: dW2 = d_logitsᵀ·features, db2 = column sums of d_logits.
    for i in 0..n {
        let dl = d_logits.row(i);
        let f = trace.features.row(i);
        for c in 0..classes {
            grads.b2[c] += dl[c];
            let wrow = grads.w2.row_mut(c);
            for (h, fv) in f.iter().enumerate() {
                wrow[h] += dl[c] * fv;
            }
        }
    }

    // Hidden layer through the ReLU mask.
    for i in 0..n {
        let dl = d_logits.row(i);
        let f = trace.features.row(i);
        let x = trace.inputs.row(i);
        for h in 0..hidden {
            if f[h] <= 0.0 {
                continue;
            }
            let mut dh = 0.0;
            for c in 0..classes {
                dh += dl[c] * params.w2.get(c, h);
            }
            grads.b1[h] += dh;
            let wrow = grads.w1.row_mut(h);
            for (j, xv) in x.iter().enumerate() {
                wrow[j] += dh * xv;
            }
        }
    }

    Ok(grads)
}

/// One SGD-with-momentum update, in place:
/// `v ← momentum·v + g + weight_decay·θ; θ ← θ − lr·v`.
pub fn sgd_step(params: &mut MlpParams, grads: &GradientSet, state: &mut SgdState) -> Result<()> {
    if grads.w1.rows() != params.w1.rows()
        || grads.w1.cols() != params.w1.cols()
        || grads.w2.rows() != params.w2.rows()
        || grads.w2.cols() != params.w2.cols()
        || grads.b1.len() != params.b1.len()
        || grads.b2.len() != params.b2.len()
    {
        return Err(Error::Shape("gradient shapes do not match parameters".into()));
    }
    let lr = state.learning_rate;
    let momentum = state.momentum;
    let wd = state.weight_decay;
    let update = |theta: &mut [f64], g: &[f64], v: &mut [f64]| {
        for ((t, &gv), vv) in theta.iter_mut().zip(g).zip(v.iter_mut()) {
            *vv = momentum * *vv + gv + wd * *t;
            *t -= lr * *vv;
        }
    };
    update(params.w1.values_mut(), grads.w1.values(), state.velocity.w1.values_mut());
    update(&mut params.b1, &grads.b1, &mut state.velocity.b1);
    update(params.w2.values_mut(), grads.w2.values(), state.velocity.w2.values_mut());
    update(&mut params.b2, &grads.b2, &mut state.velocity.b2);
    params.w1.check_finite("w1 after sgd step")?;
    params.w2.check_finite("w2 after sgd step")?;
    if params.b1.iter().chain(&params.b2).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("bias after sgd step".into()));
    }
    Ok(())
}

/// Predicted class (argmax of the softmax row, ties to the lowest index) and
/// its probability, per batch row.
pub fn predict(params: &MlpParams, batch: &DenseMatrix) -> Result<(Vec<usize>, Vec<f64>)> {
    let trace = forward(params, batch)?;
    let mut classes = Vec::with_capacity(batch.rows());
    let mut confidences = Vec::with_capacity(batch.rows());
    for i in 0..trace.probs.rows() {
        let row = trace.probs.row(i);
        let mut best = 0;
        for (c, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = c;
            }
        }
        classes.push(best);
        confidences.push(row[best]);
    }
    Ok((classes, confidences))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable in-place softmax of one row.
fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    fn small_net(seed: u64, input: usize, hidden: usize, classes: usize) -> MlpParams {
        let mut rng = rng_from_seed(seed);
        MlpParams::init(input, hidden, classes, &mut rng).unwrap()
    }

    fn random_batch(seed: u64, n: usize, d: usize) -> DenseMatrix {
        let mut rng = rng_from_seed(seed ^ 0xFEED);
        let values = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        DenseMatrix::new(n, d, values).unwrap()
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let params = small_net(1, 4, 6, 3);
        let batch = random_batch(1, 9, 4);
        let trace = forward(&params, &batch).unwrap();
        for i in 0..trace.probs.rows() {
            let s: f64 = trace.probs.row(i).iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "row {i} sums to {s}");
        }
    }

    #[test]
    fn uniform_weights_predict_class_zero() {
        // Identical logits in every class: the tie must break to index 0.
        let w1 = DenseMatrix::new(2, 3, vec![0.1; 6]).unwrap();
        let w2 = DenseMatrix::new(4, 2, vec![0.1; 8]).unwrap();
        let params = MlpParams::from_parts(w1, vec![0.1; 2], w2, vec![0.1; 4]).unwrap();
        let batch = random_batch(7, 5, 3);
        let (classes, confidences) = predict(&params, &batch).unwrap();
        assert_eq!(classes, vec![0; 5]);
        for c in confidences {
            assert!((c - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn cross_entropy_is_clamped_for_saturated_softmax() {
        // Extreme logits push the picked class probability to numerical zero;
        // the clamp keeps the loss at −ln(1e-12).
        let logits = DenseMatrix::new(1, 2, vec![1000.0, 0.0]).unwrap();
        let mut probs = logits.clone();
        softmax_in_place(probs.row_mut(0));
        let trace = ForwardTrace {
            inputs: DenseMatrix::zeros(1, 1),
            features: DenseMatrix::zeros(1, 1),
            logits,
            probs,
        };
        let loss = cross_entropy(&trace, &[1]).unwrap();
        assert!((loss - (-(1e-12f64).ln())).abs() < 1e-9);
        assert!(loss.is_finite());
    }

    #[test]
    fn sgd_momentum_accumulates_like_hand_calculation() {
        // Constant gradient g, lr 1, momentum 0.9, no decay:
        // step 1 moves by g, step 2 by 1.9 g, total 2.9 g.
        let w1 = DenseMatrix::new(1, 1, vec![1.0]).unwrap();
        let w2 = DenseMatrix::new(1, 1, vec![1.0]).unwrap();
        let mut params = MlpParams::from_parts(w1, vec![0.0], w2, vec![0.0]).unwrap();
        let mut state = SgdState::new(1.0, 0.9, 0.0, &params).unwrap();
        let mut grads = GradientSet::zeros_like(&params);
        grads.w1.set(0, 0, 0.5);
        sgd_step(&mut params, &grads, &mut state).unwrap();
        sgd_step(&mut params, &grads, &mut state).unwrap();
        assert!((params.w1.get(0, 0) - (1.0 - 2.9 * 0.5)).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_enters_the_velocity() {
        let w1 = DenseMatrix::new(1, 1, vec![2.0]).unwrap();
        let w2 = DenseMatrix::new(1, 1, vec![0.0]).unwrap();
        let mut params = MlpParams::from_parts(w1, vec![0.0], w2, vec![0.0]).unwrap();
        let mut state = SgdState::new(0.1, 0.0, 0.5, &params).unwrap();
        let grads = GradientSet::zeros_like(&params);
        sgd_step(&mut params, &grads, &mut state).unwrap();
        // v = 0.5·2.0 = 1.0, θ = 2.0 − 0.1·1.0.
        assert!((params.w1.get(0, 0) - 1.9).abs() < 1e-12);
    }

    #[test]
    fn backward_matches_central_differences() {
        for trial in 0..5u64 {
            let params = small_net(100 + trial, 3, 5, 4);
            let batch = random_batch(200 + trial, 6, 3);
            let labels: Vec<usize> = (0..6).map(|i| i % 4).collect();
            let trace = forward(&params, &batch).unwrap();
            let analytic = backward(&params, &trace, &labels).unwrap();
            let numeric = numeric_gradients(&params, &batch, &labels);
            compare_grads(&analytic, &numeric);
        }
    }

    #[test]
    fn empty_batch_is_a_no_op() {
        let params = small_net(3, 4, 3, 2);
        let batch = DenseMatrix::zeros(0, 4);
        let trace = forward(&params, &batch).unwrap();
        assert_eq!(trace.probs.rows(), 0);
        assert_eq!(cross_entropy(&trace, &[]).unwrap(), 0.0);
        let grads = backward(&params, &trace, &[]).unwrap();
        assert!(grads.w1.values().iter().all(|&v| v == 0.0));
        assert!(grads.w2.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn contract_violations_error() {
        let params = small_net(4, 4, 3, 2);
        let wide = random_batch(4, 2, 5);
        assert!(forward(&params, &wide).is_err());
        let batch = random_batch(5, 2, 4);
        let trace = forward(&params, &batch).unwrap();
        assert!(cross_entropy(&trace, &[0]).is_err(), "label count mismatch");
        assert!(cross_entropy(&trace, &[0, 2]).is_err(), "label out of range");
        assert!(backward(&params, &trace, &[0, 2]).is_err());
    }

    #[test]
    fn init_is_reproducible_and_bounded() {
        let a = small_net(11, 6, 5, 3);
        let b = small_net(11, 6, 5, 3);
        assert_eq!(a, b);
        let bound = 1.0 / 6f64.sqrt();
        assert!(a.w1.values().iter().all(|v| v.abs() <= bound));
        let bound2 = 1.0 / 5f64.sqrt();
        assert!(a.w2.values().iter().all(|v| v.abs() <= bound2));
    }

    /// Central-difference gradient oracle over every parameter entry.
    fn numeric_gradients(
        params: &MlpParams,
        batch: &DenseMatrix,
        labels: &[usize],
    ) -> GradientSet {
        const EPS: f64 = 1e-5;
        let loss_of = |p: &MlpParams| {
            let trace = forward(p, batch).unwrap();
            cross_entropy(&trace, labels).unwrap()
        };
        let mut numeric = GradientSet::zeros_like(params);
        let mut work = params.clone();
        for piece in 0..4 {
            let len = match piece {
                0 => work.w1.values().len(),
                1 => work.b1.len(),
                2 => work.w2.values().len(),
                _ => work.b2.len(),
            };
            for idx in 0..len {
                let read = |p: &mut MlpParams, delta: f64| -> f64 {
                    let slot = match piece {
                        0 => &mut p.w1.values_mut()[idx],
                        1 => &mut p.b1[idx],
                        2 => &mut p.w2.values_mut()[idx],
                        _ => &mut p.b2[idx],
                    };
                    let old = *slot;
                    *slot = old + delta;
                    old
                };
                let old = read(&mut work, EPS);
                let plus = loss_of(&work);
                *match piece {
                    0 => &mut work.w1.values_mut()[idx],
                    1 => &mut work.b1[idx],
                    2 => &mut work.w2.values_mut()[idx],
                    _ => &mut work.b2[idx],
                } = old - EPS;
                let minus = loss_of(&work);
                *match piece {
                    0 => &mut work.w1.values_mut()[idx],
                    1 => &mut work.b1[idx],
                    2 => &mut work.w2.values_mut()[idx],
                    _ => &mut work.b2[idx],
                } = old;
                let g = (plus - minus) / (2.0 * EPS);
                match piece {
                    0 => numeric.w1.values_mut()[idx] = g,
                    1 => numeric.b1[idx] = g,
                    2 => numeric.w2.values_mut()[idx] = g,
                    _ => numeric.b2[idx] = g,
                }
            }
        }
        numeric
    }

    fn compare_grads(analytic: &GradientSet, numeric: &GradientSet) {
        let check = |a: &[f64], n: &[f64], what: &str| {
            for (i, (x, y)) in a.iter().zip(n).enumerate() {
                let tol = 1e-7 + 1e-4 * y.abs();
                assert!(
                    (x - y).abs() < tol,
                    "{what}[{i}]: analytic {x} vs numeric {y}"
                );
            }
        };
        check(analytic.w1.values(), numeric.w1.values(), "w1");
        check(&analytic.b1, &numeric.b1, "b1");
        check(analytic.w2.values(), numeric.w2.values(), "w2");
        check(&analytic.b2, &numeric.b2, "b2");
    }
}
