//! Single-modal LSTM: one memory cell unrolled over a feature sequence with
//! a softmax readout at every timestep.

use serde::{Deserialize, Serialize};

use crate::cell::{self, CellGrads, CellView, StepCache};
use crate::dataset::FeatureSequence;
use crate::error::{Error, Result};
use crate::numeric::{argmax, Mat, Rng, Vector};
use crate::params::{Gate, GradSet, ParamSet, TensorRef};

/// Forget-gate bias at initialization.
pub const FORGET_BIAS_INIT: f64 = 1.0;

/// Human-readable description of the initialization, recorded in checkpoints.
pub const INIT_DESCRIPTION: &str =
    "weights uniform(-1/sqrt(d_h), 1/sqrt(d_h)); biases 0 except b_f = 1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams {
    /// Input transforms `W_xg, W_xi, W_xf, W_xo`, each `d_h × d_x`.
    pub w_x: [Mat; 4],
    /// Recurrent transforms `W_hg, W_hi, W_hf, W_ho`, each `d_h × d_h`.
    pub w_h: [Mat; 4],
    /// Biases `b_g, b_i, b_f, b_o`.
    pub b: [Vector; 4],
    /// Readout `W_y`, `K × d_h`.
    pub w_y: Mat,
}

/// Expected parameter count `4·d_h·(d_x + d_h + 1) + K·d_h`.
pub fn param_count_formula(d_x: usize, d_h: usize, k: usize) -> usize {
    4 * d_h * (d_x + d_h + 1) + k * d_h
}

pub(crate) fn init_input_weights(d_x: usize, d_h: usize, rng: &mut Rng) -> ([Mat; 4], [Vector; 4]) {
    let r = 1.0 / (d_h as f64).sqrt();
    let w_x = std::array::from_fn(|_| Mat::uniform(d_h, d_x, r, rng));
    let mut b: [Vector; 4] = std::array::from_fn(|_| Vector::zeros(d_h));
    b[Gate::Forget.index()] = Vector::filled(d_h, FORGET_BIAS_INIT);
    (w_x, b)
}

pub(crate) fn init_recurrent(d_h: usize, rng: &mut Rng) -> [Mat; 4] {
    let r = 1.0 / (d_h as f64).sqrt();
    std::array::from_fn(|_| Mat::uniform(d_h, d_h, r, rng))
}

pub(crate) fn init_readout(d_h: usize, k: usize, rng: &mut Rng) -> Mat {
    Mat::uniform(k, d_h, 1.0 / (d_h as f64).sqrt(), rng)
}

pub(crate) fn check_dims(d_x: usize, d_h: usize, k: usize) -> Result<()> {
    if d_x == 0 || d_h == 0 || k == 0 {
        return Err(Error::invalid(format!(
            "dimensions must be positive (d_x={d_x}, d_h={d_h}, K={k})"
        )));
    }
    Ok(())
}

impl LstmParams {
    pub fn zeros(d_x: usize, d_h: usize, k: usize) -> Self {
        LstmParams {
            w_x: std::array::from_fn(|_| Mat::zeros(d_h, d_x)),
            w_h: std::array::from_fn(|_| Mat::zeros(d_h, d_h)),
            b: std::array::from_fn(|_| Vector::zeros(d_h)),
            w_y: Mat::zeros(k, d_h),
        }
    }

    pub fn init(d_x: usize, d_h: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        check_dims(d_x, d_h, k)?;
        let (w_x, b) = init_input_weights(d_x, d_h, rng);
        let w_h = init_recurrent(d_h, rng);
        let w_y = init_readout(d_h, k, rng);
        Ok(LstmParams { w_x, w_h, b, w_y })
    }

    pub fn d_x(&self) -> usize {
        self.w_x[0].cols()
    }

    pub fn d_h(&self) -> usize {
        self.w_h[0].rows()
    }

    pub fn classes(&self) -> usize {
        self.w_y.rows()
    }

    pub(crate) fn view(&self) -> CellView<'_> {
        CellView {
            w_x: &self.w_x,
            b: &self.b,
            w_h: &self.w_h,
            w_y: &self.w_y,
        }
    }

    pub(crate) fn grads_view(&mut self) -> CellGrads<'_> {
        CellGrads {
            w_x: &mut self.w_x,
            b: &mut self.b,
            w_h: &mut self.w_h,
            w_y: &mut self.w_y,
        }
    }

    fn check_frames(&self, frames: &Mat) -> Result<()> {
        if frames.rows() == 0 {
            return Err(Error::invalid("sequence has zero timesteps"));
        }
        if frames.cols() != self.d_x() {
            return Err(Error::shape(
                "lstm forward",
                format!("d_x {}", self.d_x()),
                format!("frame dim {}", frames.cols()),
            ));
        }
        Ok(())
    }
}

impl ParamSet for LstmParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::with_capacity(13);
        for gate in Gate::ALL {
            let m = &self.w_x[gate.index()];
            out.push(TensorRef {
                name: format!("W_x{}", gate.suffix()),
                rows: m.rows(),
                cols: m.cols(),
                data: m.as_slice(),
            });
        }
        for gate in Gate::ALL {
            let m = &self.w_h[gate.index()];
            out.push(TensorRef {
                name: format!("W_h{}", gate.suffix()),
                rows: m.rows(),
                cols: m.cols(),
                data: m.as_slice(),
            });
        }
        for gate in Gate::ALL {
            let v = &self.b[gate.index()];
            out.push(TensorRef {
                name: format!("b_{}", gate.suffix()),
                rows: v.len(),
                cols: 1,
                data: v.as_slice(),
            });
        }
        out.push(TensorRef {
            name: "W_y".into(),
            rows: self.w_y.rows(),
            cols: self.w_y.cols(),
            data: self.w_y.as_slice(),
        });
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(13);
        out.extend(self.w_x.iter_mut().map(|m| m.as_mut_slice()));
        out.extend(self.w_h.iter_mut().map(|m| m.as_mut_slice()));
        out.extend(self.b.iter_mut().map(|v| v.as_mut_slice()));
        out.push(self.w_y.as_mut_slice());
        out
    }
}

/// Gate activations and new state from one [`cell_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub g: Vector,
    pub i: Vector,
    pub f: Vector,
    pub o: Vector,
    pub c: Vector,
    pub h: Vector,
}

pub fn cell_step(p: &LstmParams, x: &Vector, h_prev: &Vector, c_prev: &Vector) -> Result<CellState> {
    if x.len() != p.d_x() {
        return Err(Error::shape("cell_step", format!("d_x {}", p.d_x()), format!("x len {}", x.len())));
    }
    if h_prev.len() != p.d_h() || c_prev.len() != p.d_h() {
        return Err(Error::shape(
            "cell_step",
            format!("d_h {}", p.d_h()),
            format!("h_prev len {}, C_prev len {}", h_prev.len(), c_prev.len()),
        ));
    }
    let s = p.view().step(x.as_slice(), h_prev.as_slice(), c_prev.as_slice());
    Ok(CellState {
        g: s.g.into(),
        i: s.i.into(),
        f: s.f.into(),
        o: s.o.into(),
        c: s.c.into(),
        h: s.h.into(),
    })
}

/// Per-timestep activations of one unrolled stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub(crate) steps: Vec<StepCache>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[StepCache] {
        &self.steps
    }

    pub fn output(&self, t: usize) -> &[f64] {
        &self.steps[t].y
    }

    pub fn last_output(&self) -> &[f64] {
        &self.steps[self.steps.len() - 1].y
    }

    /// Argmax of `y_t` for every timestep.
    pub fn proposals(&self) -> Vec<usize> {
        self.steps.iter().map(|s| argmax(&s.y)).collect()
    }

    /// `Σ_t weights[t] · CE(y_t, labels[t])`.
    pub fn loss(&self, labels: &[usize], weights: &[f64]) -> Result<f64> {
        check_supervision(self.len(), labels, weights, self.steps[0].y.len())?;
        Ok(cell::stream_loss(&self.steps, labels, weights))
    }
}

pub(crate) fn check_supervision(t: usize, labels: &[usize], weights: &[f64], k: usize) -> Result<()> {
    if labels.len() != t || weights.len() != t {
        return Err(Error::shape(
            "supervision",
            format!("T = {t}"),
            format!("{} labels, {} loss weights", labels.len(), weights.len()),
        ));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("label {l} out of range for {k} classes")));
    }
    Ok(())
}

pub fn forward(p: &LstmParams, seq: &FeatureSequence) -> Result<ForwardTrace> {
    forward_frames(p, &seq.frames)
}

pub fn forward_frames(p: &LstmParams, frames: &Mat) -> Result<ForwardTrace> {
    p.check_frames(frames)?;
    Ok(ForwardTrace {
        steps: p.view().run(frames),
    })
}

pub fn backward(
    p: &LstmParams,
    trace: &ForwardTrace,
    labels: &[usize],
    loss_weights: &[f64],
) -> Result<GradSet<LstmParams>> {
    check_supervision(trace.len(), labels, loss_weights, p.classes())?;
    let mut grads = GradSet::zeros_for(p);
    cell::backprop(&p.view(), &trace.steps, labels, loss_weights, grads.inner_mut().grads_view());
    Ok(grads)
}

/// Uniform per-timestep weights `1/T`.
pub fn uniform_weights(t: usize) -> Vec<f64> {
    vec![1.0 / t as f64; t]
}

/// Class of the final output `y_T`.
pub fn predict_last(p: &LstmParams, seq: &FeatureSequence) -> Result<usize> {
    let trace = forward(p, seq)?;
    Ok(argmax(trace.last_output()))
}
