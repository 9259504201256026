//! Central-difference check of analytic gradients.

use serde::Serialize;

use super::{Architecture, Trainable};
use crate::baseline::LinearClassifier;
use crate::dataset::{FeatureSequence, MultimodalSample};
use crate::error::{Error, Result};
use crate::lstm::LstmParams;
use crate::multimodal::MultimodalParams;
use crate::numeric::{Mat, Rng};
use crate::params::{GradSet, ParamSet};

/// Denominator floor for the relative error, so entries whose true
/// gradient is ~0 are judged on absolute error instead.
pub const REL_ERROR_FLOOR: f64 = 1e-4;

/// Above this many parameters only a random 5% of entries is probed.
pub const FULL_PROBE_LIMIT: usize = 10_000;

/// `|a − n| / max(|a|, |n|, REL_ERROR_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Worst entry by relative error.
    pub tensor: String,
    pub row: usize,
    pub col: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub total: usize,
}

pub fn grad_check<P: Trainable>(model: &P, ex: &P::Example, eps: f64) -> Result<GradCheckReport> {
    let (_, analytic) = model.loss_grad(ex)?;
    grad_check_against(model, ex, &analytic, eps)
}

/// Compares a supplied gradient against central differences of the loss.
pub fn grad_check_against<P: Trainable>(
    model: &P,
    ex: &P::Example,
    analytic: &GradSet<P>,
    eps: f64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("finite-difference step must be positive, got {eps}")));
    }
    if !analytic.is_congruent(model) {
        return Err(Error::shape(
            "grad_check",
            format!("{} parameters", model.param_count()),
            format!("{} gradient entries", analytic.inner().param_count()),
        ));
    }
    let layout = model.layout();
    let grads: Vec<Vec<f64>> = analytic.inner().tensors().into_iter().map(|t| t.data.to_vec()).collect();
    let total = model.param_count();
    let mut sampler = (total > FULL_PROBE_LIMIT).then(|| Rng::new(0x9c_4ec4));
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        tensor: layout.first().map(|l| l.0.clone()).unwrap_or_default(),
        row: 0,
        col: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        total,
    };
    for (ti, (name, _rows, cols)) in layout.iter().enumerate() {
        for j in 0..grads[ti].len() {
            if let Some(rng) = sampler.as_mut() {
                if !rng.bernoulli(0.05) {
                    continue;
                }
            }
            let orig = probe.tensors_mut()[ti][j];
            probe.tensors_mut()[ti][j] = orig + eps;
            let plus = probe.loss(ex)?;
            probe.tensors_mut()[ti][j] = orig - eps;
            let minus = probe.loss(ex)?;
            probe.tensors_mut()[ti][j] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = grads[ti][j];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = rel;
                report.tensor = name.clone();
                report.row = j / cols;
                report.col = j % cols;
                report.analytic = a;
                report.numeric = numeric;
            }
            report.checked += 1;
        }
    }
    if !report.max_rel_error.is_finite() {
        return Err(Error::Numeric("gradient check produced a non-finite error".into()));
    }
    Ok(report)
}

/// One randomly drawn small configuration and its check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckCase {
    pub arch: Architecture,
    pub d_x: Vec<usize>,
    pub d_h: usize,
    pub classes: usize,
    pub steps: usize,
    pub report: GradCheckReport,
}

fn random_sequence(rng: &mut Rng, modality: usize, identity: usize, t: usize, d: usize) -> Result<FeatureSequence> {
    let data = (0..t * d).map(|_| rng.normal()).collect();
    FeatureSequence::new(modality, identity, Mat::from_vec(t, d, data)?)
}

/// Multiplies the largest-magnitude gradient entry by `1 + rel`.
fn corrupt<P: ParamSet>(g: &mut GradSet<P>, rel: f64) {
    let mut best: Option<(usize, usize, f64)> = None;
    for (ti, t) in g.inner().tensors().iter().enumerate() {
        for (j, v) in t.data.iter().enumerate() {
            if best.is_none_or(|b| v.abs() > b.2) {
                best = Some((ti, j, v.abs()));
            }
        }
    }
    if let Some((ti, j, _)) = best {
        g.inner_mut().tensors_mut()[ti][j] *= 1.0 + rel;
    }
}

fn check_model<P: Trainable>(model: &P, ex: &P::Example, eps: f64, corrupt_rel: Option<f64>) -> Result<GradCheckReport> {
    let (_, mut g) = model.loss_grad(ex)?;
    if let Some(rel) = corrupt_rel {
        corrupt(&mut g, rel);
    }
    grad_check_against(model, ex, &g, eps)
}

/// Draws a small random model of `arch` (d_x ≤ 6, d_h ≤ 8, T ≤ 5, 2 ≤ K ≤ 4)
/// and checks its gradient. `corrupt_rel` perturbs the largest analytic
/// entry first, as a self-test of the checker.
pub fn random_case(
    arch: Architecture,
    modalities: usize,
    rng: &mut Rng,
    eps: f64,
    corrupt_rel: Option<f64>,
) -> Result<GradCheckCase> {
    let d_h = 1 + rng.below(8);
    let classes = 2 + rng.below(3);
    let steps = 1 + rng.below(5);
    let n = if arch.variant().is_some() { modalities } else { 1 };
    if n == 0 {
        return Err(Error::invalid("need at least one modality"));
    }
    let d_x: Vec<usize> = (0..n).map(|_| 1 + rng.below(6)).collect();
    let label = rng.below(classes);
    let report = match arch {
        Architecture::Single => {
            let p = LstmParams::init(d_x[0], d_h, classes, rng)?;
            let ex = random_sequence(rng, 0, label, steps, d_x[0])?;
            check_model(&p, &ex, eps, corrupt_rel)?
        }
        Architecture::Linear => {
            let p = LinearClassifier::init(d_x[0], classes, rng)?;
            let ex = random_sequence(rng, 0, label, steps, d_x[0])?;
            check_model(&p, &ex, eps, corrupt_rel)?
        }
        arch => {
            let variant = arch.variant().expect("multimodal architecture");
            let p = MultimodalParams::build(variant, &d_x, d_h, classes, rng)?;
            let seqs = d_x
                .iter()
                .enumerate()
                .map(|(s, &d)| random_sequence(rng, s, label, steps, d))
                .collect::<Result<Vec<_>>>()?;
            let ex = MultimodalSample::new(seqs, label, false)?;
            check_model(&p, &ex, eps, corrupt_rel)?
        }
    };
    Ok(GradCheckCase {
        arch,
        d_x,
        d_h: if arch == Architecture::Linear { 0 } else { d_h },
        classes,
        steps,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multimodal::SharingVariant;

    fn seq(rng: &mut Rng, modality: usize, identity: usize, t: usize, d: usize) -> FeatureSequence {
        let data = (0..t * d).map(|_| rng.normal()).collect();
        FeatureSequence::new(modality, identity, Mat::from_vec(t, d, data).unwrap()).unwrap()
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 1e-5).abs() < 1e-15);
    }

    #[test]
    fn fresh_models_pass() {
        let mut rng = Rng::new(11);
        for _ in 0..5 {
            let (d_x, d_h, k, t) = (1 + rng.below(6), 1 + rng.below(8), 1 + rng.below(4), 1 + rng.below(5));
            let p = LstmParams::init(d_x, d_h, k, &mut rng).unwrap();
            let id = rng.below(k);
            let s = seq(&mut rng, 0, id, t, d_x);
            let r = grad_check(&p, &s, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-5, "{r:?}");
            assert_eq!(r.checked, r.total);
        }
        for v in SharingVariant::ALL {
            let p = MultimodalParams::build(v, &[3, 2], 4, 3, &mut rng).unwrap();
            let sample = MultimodalSample::new(vec![seq(&mut rng, 0, 1, 4, 3), seq(&mut rng, 1, 1, 4, 2)], 1, false).unwrap();
            let r = grad_check(&p, &sample, 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-5, "{v}: {r:?}");
        }
        let lin = LinearClassifier::init(3, 4, &mut rng).unwrap();
        let r = grad_check(&lin, &seq(&mut rng, 0, 2, 3, 3), 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn corrupted_entry_is_detected_and_located() {
        let mut rng = Rng::new(12);
        let p = LstmParams::init(3, 4, 3, &mut rng).unwrap();
        let s = seq(&mut rng, 0, 2, 4, 3);
        let (_, mut g) = p.loss_grad(&s).unwrap();
        // Corrupt the largest entry of W_hf by 1%.
        let layout = p.layout();
        let ti = layout.iter().position(|l| l.0 == "W_hf").unwrap();
        let cols = layout[ti].2;
        let entries = g.inner_mut().tensors_mut().swap_remove(ti);
        let j = (0..entries.len())
            .max_by(|&a, &b| entries[a].abs().total_cmp(&entries[b].abs()))
            .unwrap();
        entries[j] *= 1.01;
        let r = grad_check_against(&p, &s, &g, 1e-5).unwrap();
        assert!(r.max_rel_error > 1e-3, "{r:?}");
        assert_eq!((r.tensor.as_str(), r.row, r.col), ("W_hf", j / cols, j % cols));
    }

    #[test]
    fn eps_sweep_is_v_shaped() {
        let mut rng = Rng::new(13);
        let p = MultimodalParams::build(SharingVariant::Full, &[3, 2], 5, 3, &mut rng).unwrap();
        let sample = MultimodalSample::new(vec![seq(&mut rng, 0, 0, 5, 3), seq(&mut rng, 1, 0, 5, 2)], 0, false).unwrap();
        let (_, g) = p.loss_grad(&sample).unwrap();
        let eps: Vec<f64> = (1..=10).map(|e| 10f64.powi(-e)).collect();
        let errs: Vec<f64> = eps
            .iter()
            .map(|&e| grad_check_against(&p, &sample, &g, e).unwrap().max_abs_error)
            .collect();
        let best = (0..errs.len()).min_by(|&a, &b| errs[a].total_cmp(&errs[b])).unwrap();
        assert!(best > 0 && best < errs.len() - 1, "{errs:?}");
        assert!(errs[0] > 100.0 * errs[best] && errs[errs.len() - 1] > 100.0 * errs[best], "{errs:?}");
        // Truncation error falls on the large-step side, round-off grows on the small-step side.
        assert!(errs[1] < errs[0] && errs[errs.len() - 2] < errs[errs.len() - 1], "{errs:?}");
    }

    #[test]
    fn random_cases_pass_and_corruption_fails() {
        let mut rng = Rng::new(15);
        for arch in [Architecture::Single, Architecture::Full, Architecture::Half, Architecture::None] {
            for _ in 0..3 {
                let case = random_case(arch, 2, &mut rng, 1e-5, None).unwrap();
                assert!(case.report.max_rel_error < 1e-5, "{case:?}");
                let bad = random_case(arch, 2, &mut rng, 1e-5, Some(0.01)).unwrap();
                assert!(bad.report.max_rel_error > 1e-3, "{bad:?}");
            }
        }
        let three = random_case(Architecture::Full, 3, &mut rng, 1e-5, None).unwrap();
        assert_eq!(three.d_x.len(), 3);
    }

    #[test]
    fn large_models_are_subsampled() {
        let mut rng = Rng::new(14);
        let p = LstmParams::init(40, 40, 3, &mut rng).unwrap();
        assert!(p.param_count() > FULL_PROBE_LIMIT);
        let r = grad_check(&p, &seq(&mut rng, 0, 1, 2, 40), 1e-5).unwrap();
        let frac = r.checked as f64 / r.total as f64;
        assert!((0.03..0.07).contains(&frac), "{frac}");
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }
}
