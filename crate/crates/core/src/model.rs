//! A trained model of any supported architecture.

use crate::baseline::{frame_average_baseline, LinearClassifier};
use crate::dataset::{MultimodalSample, Pool};
use crate::error::{Error, Result};
use crate::evaluator::ProposalModel;
use crate::lstm::{predict_last, LstmParams};
use crate::multimodal::MultimodalParams;
use crate::numeric::{argmax, Rng};
use crate::params::ParamSet;
use crate::trainer::{self, Architecture, EpochMetrics, TrainConfig};

/// Salt mixed into the seed for initialization, keeping it independent
/// of the training stream.
const INIT_SALT: u64 = 0x1a17_5eed;

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Single { params: LstmParams, modality: usize },
    Linear { clf: LinearClassifier, modality: usize },
    Multimodal(MultimodalParams),
}

impl Model {
    /// Fresh model for `cfg.arch` over frames of the given per-modality dims.
    pub fn init(cfg: &TrainConfig, dims: &[usize], classes: usize) -> Result<Model> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed ^ INIT_SALT);
        let single_dim = || {
            dims.get(cfg.modality).copied().ok_or_else(|| {
                Error::invalid(format!("modality {} requested but data has {}", cfg.modality, dims.len()))
            })
        };
        Ok(match cfg.arch {
            Architecture::Single => Model::Single {
                params: LstmParams::init(single_dim()?, cfg.d_h, classes, &mut rng)?,
                modality: cfg.modality,
            },
            Architecture::Linear => Model::Linear {
                clf: LinearClassifier::init(single_dim()?, classes, &mut rng)?,
                modality: cfg.modality,
            },
            arch => Model::Multimodal(MultimodalParams::build(
                arch.variant().expect("multimodal architecture"),
                dims,
                cfg.d_h,
                classes,
                &mut rng,
            )?),
        })
    }

    /// Zero-valued model with the given shape.
    pub fn zeros(arch: Architecture, dims: &[usize], d_h: usize, classes: usize, modality: usize) -> Result<Model> {
        let single_dim = || {
            dims.get(modality)
                .copied()
                .ok_or_else(|| Error::invalid(format!("modality {modality} out of range for dims {dims:?}")))
        };
        Ok(match arch {
            Architecture::Single => Model::Single {
                params: LstmParams::zeros(single_dim()?, d_h, classes),
                modality,
            },
            Architecture::Linear => Model::Linear {
                clf: LinearClassifier::zeros(single_dim()?, classes),
                modality,
            },
            arch => {
                let mut params = MultimodalParams::build(
                    arch.variant().expect("multimodal architecture"),
                    dims,
                    d_h,
                    classes,
                    &mut Rng::new(0),
                )?;
                for t in params.tensors_mut() {
                    t.fill(0.0);
                }
                Model::Multimodal(params)
            }
        })
    }

    pub fn architecture(&self) -> Architecture {
        match self {
            Model::Single { .. } => Architecture::Single,
            Model::Linear { .. } => Architecture::Linear,
            Model::Multimodal(p) => p.variant().into(),
        }
    }

    /// Modality a single-modal model reads.
    pub fn modality(&self) -> Option<usize> {
        match self {
            Model::Single { modality, .. } | Model::Linear { modality, .. } => Some(*modality),
            Model::Multimodal(_) => None,
        }
    }

    /// Frame dimensions: one entry for single-modal models.
    pub fn d_x(&self) -> Vec<usize> {
        match self {
            Model::Single { params, .. } => vec![params.d_x()],
            Model::Linear { clf, .. } => vec![clf.d_x()],
            Model::Multimodal(p) => p.d_x(),
        }
    }

    /// Hidden size; zero for the linear classifier.
    pub fn d_h(&self) -> usize {
        match self {
            Model::Single { params, .. } => params.d_h(),
            Model::Linear { .. } => 0,
            Model::Multimodal(p) => p.d_h(),
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            Model::Single { params, .. } => params.classes(),
            Model::Linear { clf, .. } => clf.classes(),
            Model::Multimodal(p) => p.classes(),
        }
    }

    pub fn layout(&self) -> Vec<(String, usize, usize)> {
        match self {
            Model::Single { params, .. } => params.layout(),
            Model::Linear { clf, .. } => clf.layout(),
            Model::Multimodal(p) => p.layout(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        match self {
            Model::Single { params, .. } => params.flatten(),
            Model::Linear { clf, .. } => clf.flatten(),
            Model::Multimodal(p) => p.flatten(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, r, c)| r * c).sum()
    }

    /// Overwrites every parameter from a flat vector in layout order.
    pub fn load_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.param_count() {
            return Err(Error::shape(
                "load_flat",
                format!("{} parameters", self.param_count()),
                format!("{} values", values.len()),
            ));
        }
        let tensors = match self {
            Model::Single { params, .. } => params.tensors_mut(),
            Model::Linear { clf, .. } => clf.tensors_mut(),
            Model::Multimodal(p) => p.tensors_mut(),
        };
        let mut offset = 0;
        for t in tensors {
            t.copy_from_slice(&values[offset..offset + t.len()]);
            offset += t.len();
        }
        Ok(())
    }

    pub fn as_multimodal(&self) -> Result<&MultimodalParams> {
        match self {
            Model::Multimodal(p) => Ok(p),
            other => Err(Error::invalid(format!(
                "a multimodal model is required, found '{}'",
                other.architecture()
            ))),
        }
    }

    /// Held-out accuracy as logged during training.
    pub fn accuracy(&self, pool: &Pool, limit: usize) -> Result<f64> {
        use trainer::Trainable;
        match self {
            Model::Single { params, modality } => params.accuracy(pool, *modality, limit),
            Model::Linear { clf, modality } => clf.accuracy(pool, *modality, limit),
            Model::Multimodal(p) => p.accuracy(pool, 0, limit),
        }
    }

    /// Predicted class of a recorded sample. Single-modal models read only
    /// their own modality; the LSTM uses its last output, the linear
    /// classifier the mean frame distribution and multimodal models the
    /// mean of all output distributions.
    pub fn predict(&self, sample: &MultimodalSample) -> Result<usize> {
        let pick = |m: usize| {
            sample
                .sequences
                .get(m)
                .ok_or_else(|| Error::invalid(format!("sample has no modality {m}")))
        };
        match self {
            Model::Single { params, modality } => predict_last(params, pick(*modality)?),
            Model::Linear { clf, modality } => frame_average_baseline(pick(*modality)?, clf),
            Model::Multimodal(p) => {
                let outputs = p.stream_outputs(sample)?;
                let mut mean = vec![0.0; p.classes()];
                for y in outputs.iter().flatten() {
                    mean.iter_mut().zip(y).for_each(|(m, v)| *m += v);
                }
                Ok(argmax(&mean))
            }
        }
    }
}

/// Trains any model, dispatching on its architecture.
pub fn train_model(
    model: Model,
    train_pool: &Pool,
    test_pool: Option<&Pool>,
    cfg: &TrainConfig,
    on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<(Model, Vec<EpochMetrics>)> {
    if model.architecture() != cfg.arch {
        return Err(Error::invalid(format!(
            "config selects '{}' but the model is '{}'",
            cfg.arch,
            model.architecture()
        )));
    }
    Ok(match model {
        Model::Single { params, modality } => {
            let out = trainer::train(params, train_pool, test_pool, cfg, on_epoch)?;
            (Model::Single { params: out.params, modality }, out.history)
        }
        Model::Linear { clf, modality } => {
            let out = trainer::train(clf, train_pool, test_pool, cfg, on_epoch)?;
            (Model::Linear { clf: out.params, modality }, out.history)
        }
        Model::Multimodal(p) => {
            let out = trainer::train(p, train_pool, test_pool, cfg, on_epoch)?;
            (Model::Multimodal(out.params), out.history)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_selects_architecture() {
        for arch in [
            Architecture::Single,
            Architecture::Linear,
            Architecture::Full,
            Architecture::Half,
            Architecture::None,
        ] {
            let cfg = TrainConfig {
                arch,
                d_h: 4,
                ..TrainConfig::default()
            };
            let m = Model::init(&cfg, &[5, 3], 4).unwrap();
            assert_eq!(m.architecture(), arch);
            assert_eq!(m.classes(), 4);
            let z = Model::zeros(arch, &[5, 3], 4, 4, 0).unwrap();
            assert_eq!(z.layout(), m.layout());
            assert!(z.flatten().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn flat_round_trip() {
        let cfg = TrainConfig {
            arch: Architecture::Half,
            d_h: 3,
            ..TrainConfig::default()
        };
        let m = Model::init(&cfg, &[2, 2], 3).unwrap();
        let mut z = Model::zeros(Architecture::Half, &[2, 2], 3, 3, 0).unwrap();
        z.load_flat(&m.flatten()).unwrap();
        assert_eq!(z, m);
        assert!(z.load_flat(&[1.0]).is_err());
    }

    #[test]
    fn init_is_seeded() {
        let cfg = TrainConfig::default();
        assert_eq!(Model::init(&cfg, &[3, 2], 2).unwrap(), Model::init(&cfg, &[3, 2], 2).unwrap());
        let other = TrainConfig { seed: 1, ..cfg.clone() };
        assert_ne!(Model::init(&cfg, &[3, 2], 2).unwrap(), Model::init(&other, &[3, 2], 2).unwrap());
    }
}
