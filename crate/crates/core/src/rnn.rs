//! Elman recurrent cell with time-stacked tapes.
//!
//! Backpropagation through time reduces to the same factor algebra as the
//! feed-forward case once activations and deltas are stacked along a joint
//! `(batch, time)` dimension: the gradient of a tied weight equals
//! `layer_gradient` on the stacked tape, which in turn equals the sum of
//! per-timestep gradients. That is what lets the exchange strategies treat
//! recurrent weights as just another factor pair of `(N*T)` rows.

use crate::error::{Error, Result};
use crate::matrix::{gemm, Matrix};
use crate::nn::{Activation, LayerSpec, LayerTape, Loss, ModelParams};
use crate::rng::Rng;

/// Single-layer tanh recurrent cell with a dense readout on the final
/// hidden state:
///
/// ```text
/// h_t = tanh(x_t Wx + h_(t-1) Wh + b)
/// yhat = softmax(h_T Wo + bo)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct ElmanModel {
    pub wx: Matrix,
    pub wh: Matrix,
    pub b: Matrix,
    pub readout: ModelParams,
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl ElmanModel {
    pub fn init(input_dim: usize, hidden_dim: usize, classes: usize, rng: &mut Rng) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || classes == 0 {
            return Err(Error::Config("rnn dims must be >= 1".into()));
        }
        let lim_x = (6.0 / input_dim as f64).sqrt();
        let wx = Matrix::from_vec(
            input_dim,
            hidden_dim,
            (0..input_dim * hidden_dim).map(|_| rng.uniform_range(-lim_x, lim_x)).collect(),
        )?;
        let lim_h = (6.0 / hidden_dim as f64).sqrt();
        let wh = Matrix::from_vec(
            hidden_dim,
            hidden_dim,
            (0..hidden_dim * hidden_dim).map(|_| rng.uniform_range(-lim_h, lim_h)).collect(),
        )?;
        let readout = ModelParams::init(
            &[LayerSpec::new(hidden_dim, classes, Activation::SoftmaxOutput)?],
            rng,
        )?;
        Ok(ElmanModel {
            wx,
            wh,
            b: Matrix::zeros(1, hidden_dim),
            readout,
            input_dim,
            hidden_dim,
        })
    }
}

/// Forward/backward record for one batch of sequences. The three stacked
/// matrices have `N*T` rows ordered time-major (block `t` holds samples
/// `0..N`), so `layer_gradient(x_stack, delta_stack)` is the tied gradient
/// of `Wx` and `layer_gradient(h_prev_stack, delta_stack)` that of `Wh`.
#[derive(Debug, Clone)]
pub struct RnnTape {
    pub x_stack: Matrix,
    pub h_prev_stack: Matrix,
    pub z_stack: Matrix,
    pub delta_stack: Option<Matrix>,
    pub readout_tape: LayerTape,
    pub batch: usize,
    pub steps: usize,
}

/// Runs the cell over a sequence, recording the stacked tape.
///
/// `x_seq` holds one `N x input_dim` matrix per timestep, all sharing `N`.
pub fn rnn_forward_bptt(model: &ElmanModel, x_seq: &[Matrix]) -> Result<(Matrix, RnnTape)> {
    if x_seq.is_empty() {
        return Err(Error::Config("empty sequence".into()));
    }
    let n = x_seq[0].rows();
    for (t, x) in x_seq.iter().enumerate() {
        if x.rows() != n || x.cols() != model.input_dim {
            return Err(Error::Shape(format!(
                "timestep {t} has shape {}x{}, expected {}x{}",
                x.rows(),
                x.cols(),
                n,
                model.input_dim
            )));
        }
    }
    let steps = x_seq.len();
    let h = model.hidden_dim;
    let mut x_stack = Matrix::zeros(n * steps, model.input_dim);
    let mut h_prev_stack = Matrix::zeros(n * steps, h);
    let mut z_stack = Matrix::zeros(n * steps, h);
    let mut h_state = Matrix::zeros(n, h);
    for (t, x) in x_seq.iter().enumerate() {
        let mut z = gemm(x, &model.wx, false, false)?;
        let rec = gemm(&h_state, &model.wh, false, false)?;
        for r in 0..n {
            let dst = t * n + r;
            x_stack.row_mut(dst).copy_from_slice(x.row(r));
            h_prev_stack.row_mut(dst).copy_from_slice(h_state.row(r));
            let z_row = z.row_mut(r);
            for ((zv, &rv), &bv) in z_row.iter_mut().zip(rec.row(r)).zip(model.b.data()) {
                *zv += rv + bv;
            }
            z_stack.row_mut(dst).copy_from_slice(z.row(r));
        }
        if !z.is_finite() {
            return Err(Error::Numeric("non-finite recurrent pre-activation".into()));
        }
        for r in 0..n {
            let z_row = z.row(r);
            let h_row = h_state.row_mut(r);
            for (hv, &zv) in h_row.iter_mut().zip(z_row) {
                *hv = zv.tanh();
            }
        }
    }
    let (yhat, mut readout_tapes) = crate::nn::forward(&model.readout, &h_state)?;
    let readout_tape = readout_tapes.pop().expect("single readout layer");
    Ok((
        yhat,
        RnnTape {
            x_stack,
            h_prev_stack,
            z_stack,
            delta_stack: None,
            readout_tape,
            batch: n,
            steps,
        },
    ))
}

/// Backward pass through time: fills `delta_stack` and the readout delta.
///
/// `effective_batch` plays the same role as in [`crate::nn::output_delta`]:
/// the global sample count the loss is averaged over.
pub fn rnn_backward_bptt(
    model: &ElmanModel,
    tape: &mut RnnTape,
    y: &Matrix,
    effective_batch: usize,
) -> Result<f64> {
    let n = tape.batch;
    let steps = tape.steps;
    let h = model.hidden_dim;
    let yhat = {
        let mut out = Matrix::zeros(n, model.readout.output_dim());
        for r in 0..n {
            Activation::SoftmaxOutput.apply_row(tape.readout_tape.z.row(r), out.row_mut(r));
        }
        out
    };
    let loss = crate::nn::mean_loss(Loss::SoftmaxCrossEntropy, &yhat, y);
    let delta_out = crate::nn::output_delta(
        Loss::SoftmaxCrossEntropy,
        &yhat,
        y,
        &tape.readout_tape.z,
        Activation::SoftmaxOutput,
        effective_batch,
    )?;

    // dL/dh_T from the readout, then walk t backwards through the cell.
    let mut dh = gemm(&delta_out, &model.readout.layers[0].w, false, true)?;
    let mut delta_stack = Matrix::zeros(n * steps, h);
    for t in (0..steps).rev() {
        // delta_t = dh (.) tanh'(z_t)
        for r in 0..n {
            let src = t * n + r;
            let z_row = tape.z_stack.row(src);
            let dh_row = dh.row(r);
            let d_row = delta_stack.row_mut(src);
            for ((dv, &zv), &gv) in d_row.iter_mut().zip(z_row).zip(dh_row) {
                let th = zv.tanh();
                *dv = gv * (1.0 - th * th);
            }
        }
        if t > 0 {
            // dL/dh_(t-1) = delta_t Wh'
            let block = Matrix::from_vec(
                n,
                h,
                delta_stack.data()[t * n * h..(t + 1) * n * h].to_vec(),
            )?;
            dh = gemm(&block, &model.wh, false, true)?;
        }
    }
    tape.delta_stack = Some(delta_stack);
    tape.readout_tape.delta = Some(delta_out);
    Ok(loss)
}
