//! Synthetic identity task with cross-modal temporal coupling.
//!
//! Every identity `k` owns one prototype per modality. A recorded sample
//! draws one latent random walk `z` shared by all of its modalities and
//! emits frames `μ_k^s · (1 + α·z_t) + N(0, σ_n²)`. With probability
//! `p_deg` a frame is replaced by pure `N(0, 1)` noise.

use serde::{Deserialize, Serialize};

use super::{FeatureSequence, Pool, FACE, VOICE};
use crate::error::{Error, Result};
use crate::evaluator::scene::{Candidate, Scene, SceneWindow, SMALL_WINDOW_SECS, WINDOW_STRIDE_SECS};
use crate::numeric::{Mat, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    /// Number of identities `K`.
    pub classes: usize,
    /// Frame dimension per modality.
    pub dims: Vec<usize>,
    /// Timesteps per sequence.
    pub steps: usize,
    /// Additive noise standard deviation `σ_n`.
    pub noise: f64,
    /// Latent coupling strength `α`.
    pub coupling: f64,
    /// Per-frame degradation probability `p_deg`.
    pub degrade: f64,
    /// Variance of each latent random-walk increment.
    pub latent_step_var: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 5,
            dims: vec![16, 8],
            steps: 20,
            noise: 0.6,
            coupling: 1.0,
            degrade: 0.15,
            latent_step_var: 0.1,
            train_per_class: 2000,
            test_per_class: 2000,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::invalid(format!("synthetic task needs K >= 2, got {}", self.classes)));
        }
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(Error::invalid("every modality needs a positive frame dimension"));
        }
        if self.steps == 0 {
            return Err(Error::invalid("sequences need at least one timestep"));
        }
        if !(0.0..=1.0).contains(&self.degrade) {
            return Err(Error::invalid(format!("degradation probability {} outside [0, 1]", self.degrade)));
        }
        for (name, v) in [
            ("noise", self.noise),
            ("coupling", self.coupling),
            ("latent_step_var", self.latent_step_var),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::invalid("per-class sample counts must be positive"));
        }
        Ok(())
    }
}

/// Prototypes plus the generative process, fixed by the config seed.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    cfg: SynthConfig,
    /// `prototypes[k][s]`
    prototypes: Vec<Vec<Vec<f64>>>,
}

impl SynthWorld {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::new(cfg.seed);
        let prototypes = (0..cfg.classes)
            .map(|_| {
                cfg.dims
                    .iter()
                    .map(|&d| (0..d).map(|_| rng.normal()).collect())
                    .collect()
            })
            .collect();
        Ok(SynthWorld { cfg, prototypes })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn prototype(&self, identity: usize, modality: usize) -> &[f64] {
        &self.prototypes[identity][modality]
    }

    /// `z_1 = 0`, `z_t = z_{t-1} + N(0, latent_step_var)`.
    pub fn latent_walk(&self, rng: &mut Rng) -> Vec<f64> {
        let sd = self.cfg.latent_step_var.sqrt();
        let mut z = Vec::with_capacity(self.cfg.steps);
        let mut cur = 0.0;
        for t in 0..self.cfg.steps {
            if t > 0 {
                cur += sd * rng.normal();
            }
            z.push(cur);
        }
        z
    }

    /// One modality's frames driven by the given latent walk.
    pub fn sequence(&self, identity: usize, modality: usize, latent: &[f64], rng: &mut Rng) -> FeatureSequence {
        let mu = &self.prototypes[identity][modality];
        let d = mu.len();
        let mut data = Vec::with_capacity(latent.len() * d);
        for &z in latent {
            if rng.bernoulli(self.cfg.degrade) {
                data.extend((0..d).map(|_| rng.normal()));
            } else {
                let gain = 1.0 + self.cfg.coupling * z;
                data.extend(mu.iter().map(|&m| m * gain + self.cfg.noise * rng.normal()));
            }
        }
        let frames = Mat::from_vec(latent.len(), d, data).expect("synthetic frames are finite");
        FeatureSequence {
            modality,
            identity,
            frames,
        }
    }

    /// A recorded sample: every modality shares one latent walk.
    pub fn sample(&self, identity: usize, rng: &mut Rng) -> Vec<FeatureSequence> {
        let z = self.latent_walk(rng);
        (0..self.cfg.dims.len())
            .map(|s| self.sequence(identity, s, &z, rng))
            .collect()
    }

    fn pool(&self, per_class: usize, rng: &mut Rng) -> Result<Pool> {
        let n = self.cfg.dims.len();
        let mut modalities: Vec<Vec<FeatureSequence>> = vec![Vec::with_capacity(per_class * self.cfg.classes); n];
        for k in 0..self.cfg.classes {
            for _ in 0..per_class {
                for (s, seq) in self.sample(k, rng).into_iter().enumerate() {
                    modalities[s].push(seq);
                }
            }
        }
        Pool::new(modalities)
    }

    /// Disjoint train and test pools drawn from the same prototypes.
    pub fn generate(&self) -> Result<(Pool, Pool)> {
        let mut rng = Rng::new(self.cfg.seed ^ 0x5eed_da7a);
        let mut train_rng = rng.fork();
        let mut test_rng = rng.fork();
        let train = self.pool(self.cfg.train_per_class, &mut train_rng)?;
        let test = self.pool(self.cfg.test_per_class, &mut test_rng)?;
        Ok((train, test))
    }

    /// Synthetic scenes of `windows` consecutive small windows each. The
    /// speaker's face (when present) shares the voice latent; distractor
    /// faces get their own.
    pub fn scenes(
        &self,
        count: usize,
        windows: usize,
        absent_rate: f64,
        max_distractors: usize,
        rng: &mut Rng,
    ) -> Result<Vec<Scene>> {
        if self.cfg.dims.len() != 2 {
            return Err(Error::invalid("scenes need a face/voice world"));
        }
        let k = self.cfg.classes;
        let mut scenes = Vec::with_capacity(count);
        for _ in 0..count {
            let speaker = rng.below(k);
            let present = !rng.bernoulli(absent_rate);
            let mut others: Vec<usize> = (0..k).filter(|&c| c != speaker).collect();
            rng.shuffle(&mut others);
            let n_distractors = rng.below(max_distractors.min(others.len()) + 1);
            let mut ids: Vec<usize> = others[..n_distractors].to_vec();
            if present {
                ids.push(speaker);
            }
            rng.shuffle(&mut ids);
            let mut ws = Vec::with_capacity(windows);
            for w in 0..windows {
                let z = self.latent_walk(rng);
                let voice = self.sequence(speaker, VOICE, &z, rng);
                let candidates = ids
                    .iter()
                    .map(|&id| {
                        let face = if id == speaker {
                            self.sequence(id, FACE, &z, rng)
                        } else {
                            let own = self.latent_walk(rng);
                            self.sequence(id, FACE, &own, rng)
                        };
                        Candidate { id, face }
                    })
                    .collect();
                let start = w as f64 * WINDOW_STRIDE_SECS;
                ws.push(SceneWindow {
                    start,
                    end: start + SMALL_WINDOW_SECS,
                    candidates,
                    voice: Some(voice),
                    truth: Some(speaker),
                });
            }
            scenes.push(Scene::new(ws)?);
        }
        Ok(scenes)
    }
}

/// Generates train/test pools for `cfg`.
pub fn synth_generate(cfg: &SynthConfig) -> Result<(Pool, Pool)> {
    SynthWorld::new(cfg.clone())?.generate()
}
