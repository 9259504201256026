//! The gated recurrence shared by the single-modal and multimodal cells.
//!
//! A cell is described by borrowed weight views so the multimodal model can
//! hand the same shared matrices to every modality without copying them.

use serde::{Deserialize, Serialize};

use crate::numeric::{ce_unchecked, sigmoid_scalar, softmax_in_place, Mat, Vector};

/// Borrowed weights for one modality stream.
#[derive(Clone, Copy)]
pub(crate) struct CellView<'a> {
    pub w_x: &'a [Mat; 4],
    pub b: &'a [Vector; 4],
    pub w_h: &'a [Mat; 4],
    pub w_y: &'a Mat,
}

/// Mutable gradient slots for one modality stream.
pub(crate) struct CellGrads<'a> {
    pub w_x: &'a mut [Mat; 4],
    pub b: &'a mut [Vector; 4],
    pub w_h: &'a mut [Mat; 4],
    pub w_y: &'a mut Mat,
}

/// Activations cached at one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepCache {
    pub x: Vec<f64>,
    pub g: Vec<f64>,
    pub i: Vec<f64>,
    pub f: Vec<f64>,
    pub o: Vec<f64>,
    pub c: Vec<f64>,
    pub h: Vec<f64>,
    pub y: Vec<f64>,
}

impl<'a> CellView<'a> {
    pub fn d_h(&self) -> usize {
        self.w_h[0].rows()
    }

    /// Gates, memory and output for one step; `y` is left empty.
    pub fn step(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> StepCache {
        let d_h = self.d_h();
        let mut pre: [Vec<f64>; 4] = std::array::from_fn(|k| self.b[k].as_slice().to_vec());
        for (k, a) in pre.iter_mut().enumerate() {
            self.w_x[k].gemv_acc(x, a);
            self.w_h[k].gemv_acc(h_prev, a);
        }
        let [mut g, mut i, mut f, mut o] = pre;
        g.iter_mut().for_each(|v| *v = v.tanh());
        for gate in [&mut i, &mut f, &mut o] {
            gate.iter_mut().for_each(|v| *v = sigmoid_scalar(*v));
        }
        let mut c = vec![0.0; d_h];
        let mut h = vec![0.0; d_h];
        for r in 0..d_h {
            c[r] = f[r] * c_prev[r] + i[r] * g[r];
            h[r] = o[r] * c[r].tanh();
        }
        StepCache {
            x: x.to_vec(),
            g,
            i,
            f,
            o,
            c,
            h,
            y: Vec::new(),
        }
    }

    pub fn output(&self, h: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.w_y.rows()];
        self.w_y.gemv_acc(h, &mut y);
        softmax_in_place(&mut y);
        y
    }

    /// Unrolls the cell over `frames` (one row per timestep) from a zero state.
    pub fn run(&self, frames: &Mat) -> Vec<StepCache> {
        let d_h = self.d_h();
        let mut h = vec![0.0; d_h];
        let mut c = vec![0.0; d_h];
        let mut steps = Vec::with_capacity(frames.rows());
        for t in 0..frames.rows() {
            let mut s = self.step(frames.row(t), &h, &c);
            s.y = self.output(&s.h);
            h.clone_from(&s.h);
            c.clone_from(&s.c);
            steps.push(s);
        }
        steps
    }
}

/// Weighted cross-entropy of a cached stream.
pub(crate) fn stream_loss(steps: &[StepCache], labels: &[usize], weights: &[f64]) -> f64 {
    steps
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((s, &l), &w)| if w == 0.0 { 0.0 } else { w * ce_unchecked(&s.y, l) })
        .sum()
}

/// Backpropagation through time for one stream, accumulating into `grads`.
///
/// Loss is `Σ_t weights[t] · CE(y_t, labels[t])`.
pub(crate) fn backprop(
    view: &CellView<'_>,
    steps: &[StepCache],
    labels: &[usize],
    weights: &[f64],
    grads: CellGrads<'_>,
) {
    let d_h = view.d_h();
    let k = view.w_y.rows();
    let mut dh_next = vec![0.0; d_h];
    let mut dc_next = vec![0.0; d_h];
    let zeros = vec![0.0; d_h];
    let mut dz = vec![0.0; k];
    let mut dh = vec![0.0; d_h];
    let mut da: [Vec<f64>; 4] = std::array::from_fn(|_| vec![0.0; d_h]);

    for t in (0..steps.len()).rev() {
        let s = &steps[t];
        let (h_prev, c_prev) = if t == 0 {
            (&zeros[..], &zeros[..])
        } else {
            (&steps[t - 1].h[..], &steps[t - 1].c[..])
        };

        dh.copy_from_slice(&dh_next);
        let w = weights[t];
        if w != 0.0 {
            for (j, d) in dz.iter_mut().enumerate() {
                *d = w * s.y[j];
            }
            dz[labels[t]] -= w;
            grads.w_y.outer_acc(&dz, &s.h);
            view.w_y.gemv_t_acc(&dz, &mut dh);
        }

        for r in 0..d_h {
            let tc = s.c[r].tanh();
            let d_o = dh[r] * tc;
            let dc = dh[r] * s.o[r] * (1.0 - tc * tc) + dc_next[r];
            let d_f = dc * c_prev[r];
            let d_i = dc * s.g[r];
            let d_g = dc * s.i[r];
            dc_next[r] = dc * s.f[r];
            da[0][r] = d_g * (1.0 - s.g[r] * s.g[r]);
            da[1][r] = d_i * s.i[r] * (1.0 - s.i[r]);
            da[2][r] = d_f * s.f[r] * (1.0 - s.f[r]);
            da[3][r] = d_o * s.o[r] * (1.0 - s.o[r]);
        }

        dh_next.iter_mut().for_each(|v| *v = 0.0);
        for (gate, a) in da.iter().enumerate() {
            grads.w_x[gate].outer_acc(a, &s.x);
            grads.w_h[gate].outer_acc(a, h_prev);
            for (b, &v) in grads.b[gate].as_mut_slice().iter_mut().zip(a) {
                *b += v;
            }
            view.w_h[gate].gemv_t_acc(a, &mut dh_next);
        }
    }
}
