//! Feed-forward layers and reverse-mode differentiation.
//!
//! The backward pass never materializes weight gradients on its own: it
//! populates per-layer deltas, and [`layer_gradient`] forms `A_in' * Delta`
//! on demand. Keeping the two factors separate is what lets the exchange
//! strategies ship them (or compressed versions of them) instead of the
//! full gradient.

use crate::error::{Error, Result};
use crate::matrix::{gemm, Matrix};
use crate::rng::Rng;

/// Element-wise activation applied to a layer's pre-activations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
    /// Row-wise softmax; only legal on the final layer, paired with
    /// cross-entropy loss so the fused delta applies.
    SoftmaxOutput,
}

impl Activation {
    /// Applies the activation to one row of pre-activations.
    pub fn apply_row(self, z: &[f64], out: &mut [f64]) {
        match self {
            Activation::Relu => {
                for (o, &v) in out.iter_mut().zip(z) {
                    *o = if v > 0.0 { v } else { 0.0 };
                }
            }
            Activation::Tanh => {
                for (o, &v) in out.iter_mut().zip(z) {
                    *o = v.tanh();
                }
            }
            Activation::Sigmoid => {
                for (o, &v) in out.iter_mut().zip(z) {
                    *o = 1.0 / (1.0 + (-v).exp());
                }
            }
            Activation::Identity => out.copy_from_slice(z),
            Activation::SoftmaxOutput => {
                // Shift by the row max for overflow safety.
                let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for (o, &v) in out.iter_mut().zip(z) {
                    let e = (v - max).exp();
                    *o = e;
                    sum += e;
                }
                for o in out.iter_mut() {
                    *o /= sum;
                }
            }
        }
    }

    /// Derivative evaluated at the pre-activation `z`.
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Sigmoid => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 - s)
            }
            Activation::Identity => 1.0,
            // The softmax Jacobian is not element-wise; the fused
            // softmax+cross-entropy delta bypasses this path entirely.
            Activation::SoftmaxOutput => 1.0,
        }
    }
}

/// Training loss for the final layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Loss {
    SoftmaxCrossEntropy,
    Mse,
}

/// Shape and activation of one dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSpec {
    pub in_dim: usize,
    pub out_dim: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::Config("layer dims must be >= 1".into()));
        }
        Ok(LayerSpec { in_dim, out_dim, activation })
    }
}

/// One dense layer: weights `in_dim x out_dim`, bias `1 x out_dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Matrix,
    pub b: Matrix,
    pub spec: LayerSpec,
}

/// An ordered stack of dense layers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Layer>,
}

impl ModelParams {
    /// Builds a model with Kaiming-uniform style weights (`+-sqrt(6/in_dim)`)
    /// and zero biases, drawn from the given generator. Two sites seeded
    /// identically construct bit-identical models.
    pub fn init(specs: &[LayerSpec], rng: &mut Rng) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("model needs at least one layer".into()));
        }
        for pair in specs.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::Shape(format!(
                    "layer chain broken: out_dim {} feeds in_dim {}",
                    pair[0].out_dim, pair[1].in_dim
                )));
            }
            if pair[0].activation == Activation::SoftmaxOutput {
                return Err(Error::Config("softmax-output only allowed on the final layer".into()));
            }
        }
        let layers = specs
            .iter()
            .map(|spec| {
                let limit = (6.0 / spec.in_dim as f64).sqrt();
                let data = (0..spec.in_dim * spec.out_dim)
                    .map(|_| rng.uniform_range(-limit, limit))
                    .collect();
                Layer {
                    w: Matrix::from_vec(spec.in_dim, spec.out_dim, data).expect("sized above"),
                    b: Matrix::zeros(1, spec.out_dim),
                    spec: *spec,
                }
            })
            .collect();
        Ok(ModelParams { layers })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].spec.in_dim
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().spec.out_dim
    }
}

/// Per-layer forward/backward record: input activations, pre-activations,
/// and (after backward) deltas.
#[derive(Debug, Clone)]
pub struct LayerTape {
    pub a_in: Matrix,
    pub z: Matrix,
    pub delta: Option<Matrix>,
}

impl LayerTape {
    pub fn delta(&self) -> Result<&Matrix> {
        self.delta
            .as_ref()
            .ok_or_else(|| Error::State("backward pass has not populated deltas".into()))
    }
}

/// Forward pass: `Z_i = A_(i-1) W_i + b_i`, `A_i = phi_i(Z_i)`.
///
/// Returns the final activations and one tape entry per layer.
pub fn forward(model: &ModelParams, x: &Matrix) -> Result<(Matrix, Vec<LayerTape>)> {
    if x.cols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "input has {} columns, model expects {}",
            x.cols(),
            model.input_dim()
        )));
    }
    let mut tapes = Vec::with_capacity(model.layers.len());
    let mut a = x.clone();
    for layer in &model.layers {
        let mut z = gemm(&a, &layer.w, false, false)?;
        for r in 0..z.rows() {
            let row = z.row_mut(r);
            for (v, &b) in row.iter_mut().zip(layer.b.data()) {
                *v += b;
            }
        }
        if !z.is_finite() {
            return Err(Error::Numeric("non-finite pre-activation".into()));
        }
        let mut a_next = Matrix::zeros(z.rows(), z.cols());
        for r in 0..z.rows() {
            layer.spec.activation.apply_row(z.row(r), a_next.row_mut(r));
        }
        tapes.push(LayerTape { a_in: a, z, delta: None });
        a = a_next;
    }
    Ok((a, tapes))
}

/// Mean per-sample loss used for reporting (not for gradient scaling).
pub fn mean_loss(loss: Loss, yhat: &Matrix, y: &Matrix) -> f64 {
    let n = yhat.rows() as f64;
    match loss {
        Loss::SoftmaxCrossEntropy => {
            let mut total = 0.0;
            for r in 0..yhat.rows() {
                for (p, t) in yhat.row(r).iter().zip(y.row(r)) {
                    if *t > 0.0 {
                        total -= t * p.max(1e-300).ln();
                    }
                }
            }
            total / n
        }
        Loss::Mse => {
            let mut total = 0.0;
            for (p, t) in yhat.data().iter().zip(y.data()) {
                total += (p - t) * (p - t);
            }
            total / n
        }
    }
}

/// Output-layer delta.
///
/// `effective_batch` is the total sample count the loss is averaged over.
/// In a single-process run this is the batch size `N`; in an `S`-site run
/// it is `S*N`, so that summing factor products across sites directly
/// yields the mean gradient.
pub fn output_delta(
    loss: Loss,
    yhat: &Matrix,
    y: &Matrix,
    z_l: &Matrix,
    final_activation: Activation,
    effective_batch: usize,
) -> Result<Matrix> {
    if yhat.rows() != y.rows() || yhat.cols() != y.cols() {
        return Err(Error::Shape("prediction/target shape mismatch".into()));
    }
    if effective_batch == 0 {
        return Err(Error::Config("effective batch must be >= 1".into()));
    }
    let scale = 1.0 / effective_batch as f64;
    match loss {
        Loss::SoftmaxCrossEntropy => {
            if final_activation != Activation::SoftmaxOutput {
                return Err(Error::Config(
                    "softmax cross-entropy requires a softmax-output final layer".into(),
                ));
            }
            // Fused softmax + CE: delta = (yhat - y) / batch.
            Ok(yhat.sub(y)?.scale(scale))
        }
        Loss::Mse => {
            if final_activation == Activation::SoftmaxOutput {
                return Err(Error::Config("mse does not pair with softmax-output".into()));
            }
            let mut d = yhat.sub(y)?.scale(2.0 * scale);
            for r in 0..d.rows() {
                let z_row = z_l.row(r);
                let d_row = d.row_mut(r);
                for (dv, &zv) in d_row.iter_mut().zip(z_row) {
                    *dv *= final_activation.derivative(zv);
                }
            }
            Ok(d)
        }
    }
}

/// Backward pass: populates every tape's delta via
/// `Delta_i = (Delta_(i+1) W_(i+1)') (.) phi_i'(Z_i)`.
///
/// No weight gradient is formed here; see [`layer_gradient`].
pub fn backward(model: &ModelParams, tapes: &mut [LayerTape], delta_l: Matrix) -> Result<()> {
    if tapes.len() != model.layers.len() {
        return Err(Error::State("tape count does not match model depth".into()));
    }
    let last = tapes.len() - 1;
    let out_shape = (tapes[last].z.rows(), tapes[last].z.cols());
    if (delta_l.rows(), delta_l.cols()) != out_shape {
        return Err(Error::Shape("output delta shape mismatch".into()));
    }
    tapes[last].delta = Some(delta_l);
    for i in (0..last).rev() {
        let upstream = tapes[i + 1].delta().expect("set in previous step");
        let mut d = gemm(upstream, &model.layers[i + 1].w, false, true)?;
        let act = model.layers[i].spec.activation;
        for r in 0..d.rows() {
            let z_row = tapes[i].z.row(r);
            let d_row = d.row_mut(r);
            for (dv, &zv) in d_row.iter_mut().zip(z_row) {
                *dv *= act.derivative(zv);
            }
        }
        tapes[i].delta = Some(d);
    }
    Ok(())
}

/// Weight and bias gradients from a layer's two factors:
/// `gradW = A_in' * Delta`, `gradB = column sums of Delta`.
pub fn layer_gradient(a_in: &Matrix, delta: &Matrix) -> Result<(Matrix, Matrix)> {
    if a_in.rows() != delta.rows() {
        return Err(Error::Shape(format!(
            "factor row mismatch: {} vs {}",
            a_in.rows(),
            delta.rows()
        )));
    }
    let grad_w = gemm(a_in, delta, true, false)?;
    let grad_b = delta.col_sums();
    Ok((grad_w, grad_b))
}
