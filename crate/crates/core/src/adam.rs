//! Adam optimizer with bias correction.
//!
//! State is organized as a list of parameter units, each a weight matrix
//! plus an optional bias row, so both dense stacks and tied recurrent
//! weights share the same optimizer.

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::nn::ModelParams;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First/second moment accumulators mirroring the parameter shapes.
#[derive(Debug, Clone)]
pub struct AdamState {
    /// Per unit: (m_w, v_w, m_b, v_b).
    moments: Vec<(Matrix, Matrix, Matrix, Matrix)>,
    step_count: u64,
}

/// One unit's gradient pair as consumed by the optimizer.
#[derive(Debug, Clone)]
pub struct LayerGrad {
    pub w: Matrix,
    pub b: Matrix,
}

impl AdamState {
    /// Builds state for explicit unit shapes: `((w_rows, w_cols), b_cols)`.
    pub fn with_units(units: &[((usize, usize), usize)]) -> Self {
        let moments = units
            .iter()
            .map(|&((r, c), bc)| {
                (
                    Matrix::zeros(r, c),
                    Matrix::zeros(r, c),
                    Matrix::zeros(1, bc),
                    Matrix::zeros(1, bc),
                )
            })
            .collect();
        AdamState { moments, step_count: 0 }
    }

    pub fn new(model: &ModelParams) -> Self {
        let units: Vec<((usize, usize), usize)> = model
            .layers
            .iter()
            .map(|l| ((l.w.rows(), l.w.cols()), l.b.cols()))
            .collect();
        AdamState::with_units(&units)
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// Advances the step counter; the returned value feeds the bias
    /// correction of every unit update in this step.
    pub fn begin_step(&mut self) -> u64 {
        self.step_count += 1;
        self.step_count
    }

    /// Applies the Adam update to one unit's weight matrix and bias row.
    pub fn update_unit(
        &mut self,
        unit: usize,
        w: &mut Matrix,
        b: &mut Matrix,
        grad: &LayerGrad,
        lr: f64,
        t: u64,
    ) -> Result<()> {
        let (m_w, v_w, m_b, v_b) = self
            .moments
            .get_mut(unit)
            .ok_or_else(|| Error::State(format!("optimizer has no unit {unit}")))?;
        update_tensor(w, &grad.w, m_w, v_w, lr, t)?;
        update_tensor(b, &grad.b, m_b, v_b, lr, t)
    }

    /// Weight-only variant for tied units whose bias is owned elsewhere.
    pub fn update_weights_only(
        &mut self,
        unit: usize,
        w: &mut Matrix,
        grad_w: &Matrix,
        lr: f64,
        t: u64,
    ) -> Result<()> {
        let (m_w, v_w, _, _) = self
            .moments
            .get_mut(unit)
            .ok_or_else(|| Error::State(format!("optimizer has no unit {unit}")))?;
        update_tensor(w, grad_w, m_w, v_w, lr, t)
    }
}

fn update_tensor(
    p: &mut Matrix,
    g: &Matrix,
    m: &mut Matrix,
    v: &mut Matrix,
    lr: f64,
    t: u64,
) -> Result<()> {
    if p.rows() != g.rows() || p.cols() != g.cols() {
        return Err(Error::Shape("gradient shape does not mirror parameter".into()));
    }
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    let (pd, gd) = (p.data_mut(), g.data());
    let (md, vd) = (m.data_mut(), v.data_mut());
    for i in 0..pd.len() {
        md[i] = BETA1 * md[i] + (1.0 - BETA1) * gd[i];
        vd[i] = BETA2 * vd[i] + (1.0 - BETA2) * gd[i] * gd[i];
        let m_hat = md[i] / bc1;
        let v_hat = vd[i] / bc2;
        pd[i] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
    }
    Ok(())
}

/// One Adam step over every layer of a dense model. Deterministic: the same
/// params, grads and state always produce bit-identical updates.
pub fn adam_step(
    model: &mut ModelParams,
    grads: &[LayerGrad],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.len() != model.layers.len() {
        return Err(Error::Shape("gradient count does not match layer count".into()));
    }
    let t = state.begin_step();
    for (li, layer) in model.layers.iter_mut().enumerate() {
        state.update_unit(li, &mut layer.w, &mut layer.b, &grads[li], lr, t)?;
    }
    Ok(())
}
