//! Per-frame linear softmax classifier, labelled by averaging the frame
//! probabilities over a sequence.

use serde::{Deserialize, Serialize};

use crate::dataset::FeatureSequence;
use crate::error::{Error, Result};
use crate::numeric::{argmax, ce_unchecked, softmax_in_place, Mat, Rng, Vector};
use crate::params::{GradSet, ParamSet, TensorRef};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// `K × d`.
    pub w: Mat,
    pub b: Vector,
}

impl LinearClassifier {
    pub fn zeros(d: usize, k: usize) -> Self {
        LinearClassifier {
            w: Mat::zeros(k, d),
            b: Vector::zeros(k),
        }
    }

    /// Weights uniform in `±1/sqrt(d)`, zero bias.
    pub fn init(d: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        if d == 0 || k == 0 {
            return Err(Error::invalid("linear classifier needs d ≥ 1 and K ≥ 1"));
        }
        Ok(LinearClassifier {
            w: Mat::uniform(k, d, 1.0 / (d as f64).sqrt(), rng),
            b: Vector::zeros(k),
        })
    }

    pub fn d_x(&self) -> usize {
        self.w.cols()
    }

    pub fn classes(&self) -> usize {
        self.w.rows()
    }

    fn check(&self, seq: &FeatureSequence) -> Result<()> {
        if seq.dim() != self.d_x() {
            return Err(Error::shape(
                "linear classifier",
                format!("W {}x{}", self.w.rows(), self.w.cols()),
                format!("frame dim {}", seq.dim()),
            ));
        }
        Ok(())
    }

    fn frame_probs(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.b.as_slice().to_vec();
        self.w.gemv_acc(x, &mut z);
        softmax_in_place(&mut z);
        z
    }

    /// Class distribution of every frame.
    pub fn frame_probabilities(&self, seq: &FeatureSequence) -> Result<Vec<Vec<f64>>> {
        self.check(seq)?;
        Ok((0..seq.steps()).map(|t| self.frame_probs(seq.frame(t))).collect())
    }

    /// Decision on a single frame.
    pub fn classify_frame(&self, x: &[f64]) -> Result<usize> {
        if x.len() != self.d_x() {
            return Err(Error::shape("linear classifier", format!("d {}", self.d_x()), format!("frame dim {}", x.len())));
        }
        Ok(argmax(&self.frame_probs(x)))
    }

    /// Mean per-frame cross-entropy against `label`.
    pub fn loss(&self, seq: &FeatureSequence, label: usize) -> Result<f64> {
        self.loss_grad_impl(seq, label, None)
    }

    /// Mean per-frame cross-entropy and its gradient.
    pub fn loss_grad(&self, seq: &FeatureSequence, label: usize) -> Result<(f64, GradSet<LinearClassifier>)> {
        let mut g = GradSet::zeros_for(self);
        let loss = self.loss_grad_impl(seq, label, Some(g.inner_mut()))?;
        Ok((loss, g))
    }

    fn loss_grad_impl(&self, seq: &FeatureSequence, label: usize, mut grad: Option<&mut LinearClassifier>) -> Result<f64> {
        self.check(seq)?;
        if label >= self.classes() {
            return Err(Error::invalid(format!("label {label} out of range for {} classes", self.classes())));
        }
        let w = 1.0 / seq.steps() as f64;
        let mut loss = 0.0;
        for t in 0..seq.steps() {
            let x = seq.frame(t);
            let mut p = self.frame_probs(x);
            loss += w * ce_unchecked(&p, label);
            if let Some(g) = grad.as_deref_mut() {
                p[label] -= 1.0;
                p.iter_mut().for_each(|v| *v *= w);
                g.w.outer_acc(&p, x);
                for (gb, d) in g.b.as_mut_slice().iter_mut().zip(&p) {
                    *gb += d;
                }
            }
        }
        Ok(loss)
    }
}

impl ParamSet for LinearClassifier {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        vec![
            TensorRef {
                name: "W".into(),
                rows: self.w.rows(),
                cols: self.w.cols(),
                data: self.w.as_slice(),
            },
            TensorRef {
                name: "b".into(),
                rows: self.b.len(),
                cols: 1,
                data: self.b.as_slice(),
            },
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.w.as_mut_slice(), self.b.as_mut_slice()]
    }
}

/// Argmax of the mean over frames of the per-frame softmax.
pub fn frame_average_baseline(seq: &FeatureSequence, clf: &LinearClassifier) -> Result<usize> {
    let probs = clf.frame_probabilities(seq)?;
    let mut mean = vec![0.0; clf.classes()];
    for p in &probs {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let t = probs.len() as f64;
    mean.iter_mut().for_each(|v| *v /= t);
    Ok(argmax(&mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn seq(rows: &[&[f64]]) -> FeatureSequence {
        FeatureSequence::new(0, 0, Mat::from_rows(rows).unwrap()).unwrap()
    }

    fn identity_clf() -> LinearClassifier {
        LinearClassifier {
            w: Mat::identity(2),
            b: Vector::zeros(2),
        }
    }

    #[test]
    fn single_frame_matches_frame_decision() {
        let clf = identity_clf();
        let s = seq(&[&[0.3, 1.2]]);
        assert_eq!(frame_average_baseline(&s, &clf).unwrap(), clf.classify_frame(&[0.3, 1.2]).unwrap());
        let rep = seq(&[&[0.3, 1.2], &[0.3, 1.2], &[0.3, 1.2]]);
        assert_eq!(frame_average_baseline(&rep, &clf).unwrap(), 1);
    }

    #[test]
    fn crafted_two_frame_case() {
        // Frame 1 logits (3, 0): p = (0.952574, 0.047426), votes class 0.
        // Frame 2 logits (0, 0.5): p = (0.377541, 0.622459), votes class 1.
        // Mean = (0.665058, 0.334942), so class 0 wins by probability mass.
        let clf = identity_clf();
        let s = seq(&[&[3.0, 0.0], &[0.0, 0.5]]);
        let probs = clf.frame_probabilities(&s).unwrap();
        assert_abs_diff_eq!(probs[0][0], 0.9525741268224334, epsilon = 1e-12);
        assert_abs_diff_eq!(probs[1][1], 0.6224593312018546, epsilon = 1e-12);
        assert_eq!(clf.classify_frame(s.frame(1)).unwrap(), 1);
        assert_eq!(frame_average_baseline(&s, &clf).unwrap(), 0);

        // Swing frame 2 far enough and the mean flips.
        let s = seq(&[&[3.0, 0.0], &[0.0, 6.0]]);
        assert_eq!(frame_average_baseline(&s, &clf).unwrap(), 1);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let clf = LinearClassifier::zeros(3, 2);
        assert!(frame_average_baseline(&seq(&[&[1.0, 2.0]]), &clf).is_err());
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut rng = Rng::new(5);
        let clf = LinearClassifier::init(3, 4, &mut rng).unwrap();
        let data: Vec<f64> = (0..15).map(|_| rng.normal()).collect();
        let s = FeatureSequence::new(0, 2, Mat::from_vec(5, 3, data).unwrap()).unwrap();
        let (_, g) = clf.loss_grad(&s, 2).unwrap();
        let analytic = g.inner().flatten();
        let eps = 1e-6;
        let mut probe = clf.clone();
        let mut idx = 0;
        for ti in 0..2 {
            let len = probe.tensors_mut()[ti].len();
            for j in 0..len {
                let orig = probe.tensors_mut()[ti][j];
                probe.tensors_mut()[ti][j] = orig + eps;
                let lp = probe.loss(&s, 2).unwrap();
                probe.tensors_mut()[ti][j] = orig - eps;
                let lm = probe.loss(&s, 2).unwrap();
                probe.tensors_mut()[ti][j] = orig;
                assert_abs_diff_eq!(analytic[idx], (lp - lm) / (2.0 * eps), epsilon = 1e-8);
                idx += 1;
            }
        }
    }
}
