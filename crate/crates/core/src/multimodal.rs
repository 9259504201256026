//! Multimodal LSTM with cross-modal weight sharing.
//!
//! Each modality keeps its own input transforms, biases and memory line.
//! Depending on the [`SharingVariant`], the recurrent transforms `W_h*` and
//! the readout `W_y` are stored once and referenced by every modality, or
//! stored per modality.
//!
//! | variant | `W_h*`         | `W_y`          |
//! |---------|----------------|----------------|
//! | Full    | one shared set | one shared     |
//! | Half    | one shared set | one per stream |
//! | None    | one per stream | one per stream |

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cell::{self, CellGrads, CellView};
use crate::dataset::MultimodalSample;
use crate::error::{Error, Result};
use crate::lstm::{self, check_supervision, ForwardTrace, LstmParams};
use crate::numeric::{Mat, Rng, Vector};
use crate::params::{Gate, GradSet, ParamSet, TensorRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SharingVariant {
    Full,
    Half,
    None,
}

impl SharingVariant {
    pub const ALL: [SharingVariant; 3] = [SharingVariant::Full, SharingVariant::Half, SharingVariant::None];

    pub fn tag(self) -> &'static str {
        match self {
            SharingVariant::Full => "full",
            SharingVariant::Half => "half",
            SharingVariant::None => "none",
        }
    }

    fn shares_recurrent(self) -> bool {
        !matches!(self, SharingVariant::None)
    }

    fn shares_readout(self) -> bool {
        matches!(self, SharingVariant::Full)
    }
}

impl fmt::Display for SharingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for SharingVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SharingVariant::Full),
            "half" => Ok(SharingVariant::Half),
            "none" => Ok(SharingVariant::None),
            other => Err(Error::invalid(format!("unknown sharing variant '{other}'"))),
        }
    }
}

/// Modality-private input transforms and biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityInput {
    pub w_x: [Mat; 4],
    pub b: [Vector; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalParams {
    variant: SharingVariant,
    inputs: Vec<ModalityInput>,
    /// One entry when `W_h*` is shared, otherwise one per modality.
    recurrent: Vec<[Mat; 4]>,
    /// One entry when `W_y` is shared, otherwise one per modality.
    readout: Vec<Mat>,
}

/// `Σ_s [4·d_h·d_x^s + 4·d_h] + R·4·d_h² + Q·K·d_h`, with `R` recurrent and
/// `Q` readout copies implied by the variant.
pub fn param_count_formula(variant: SharingVariant, d_x: &[usize], d_h: usize, k: usize) -> usize {
    let n = d_x.len();
    let inputs: usize = d_x.iter().map(|&d| 4 * d_h * d + 4 * d_h).sum();
    let r = if variant.shares_recurrent() { 1 } else { n };
    let q = if variant.shares_readout() { 1 } else { n };
    inputs + r * 4 * d_h * d_h + q * k * d_h
}

impl MultimodalParams {
    /// Builds a randomly initialized model; same scheme as [`LstmParams::init`].
    pub fn build(variant: SharingVariant, d_x: &[usize], d_h: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        if d_x.is_empty() {
            return Err(Error::invalid("a multimodal model needs at least one modality"));
        }
        for &d in d_x {
            lstm::check_dims(d, d_h, k)?;
        }
        let n = d_x.len();
        let inputs = d_x
            .iter()
            .map(|&d| {
                let (w_x, b) = lstm::init_input_weights(d, d_h, rng);
                ModalityInput { w_x, b }
            })
            .collect();
        let r = if variant.shares_recurrent() { 1 } else { n };
        let q = if variant.shares_readout() { 1 } else { n };
        let recurrent = (0..r).map(|_| lstm::init_recurrent(d_h, rng)).collect();
        let readout = (0..q).map(|_| lstm::init_readout(d_h, k, rng)).collect();
        Ok(MultimodalParams {
            variant,
            inputs,
            recurrent,
            readout,
        })
    }

    /// Assembles a model from per-modality single-modal cells. For shared
    /// slots the first modality's matrices are used.
    pub fn from_single(variant: SharingVariant, cells: &[LstmParams]) -> Result<Self> {
        let first = cells
            .first()
            .ok_or_else(|| Error::invalid("a multimodal model needs at least one modality"))?;
        if cells.iter().any(|c| c.d_h() != first.d_h() || c.classes() != first.classes()) {
            return Err(Error::invalid("all modalities must share d_h and K"));
        }
        let inputs = cells
            .iter()
            .map(|c| ModalityInput {
                w_x: c.w_x.clone(),
                b: c.b.clone(),
            })
            .collect();
        let recurrent = if variant.shares_recurrent() {
            vec![first.w_h.clone()]
        } else {
            cells.iter().map(|c| c.w_h.clone()).collect()
        };
        let readout = if variant.shares_readout() {
            vec![first.w_y.clone()]
        } else {
            cells.iter().map(|c| c.w_y.clone()).collect()
        };
        Ok(MultimodalParams {
            variant,
            inputs,
            recurrent,
            readout,
        })
    }

    pub fn variant(&self) -> SharingVariant {
        self.variant
    }

    pub fn modalities(&self) -> usize {
        self.inputs.len()
    }

    pub fn d_h(&self) -> usize {
        self.recurrent[0][0].rows()
    }

    pub fn d_x(&self) -> Vec<usize> {
        self.inputs.iter().map(|m| m.w_x[0].cols()).collect()
    }

    pub fn classes(&self) -> usize {
        self.readout[0].rows()
    }

    /// Storage slot of the recurrent transforms used by modality `s`.
    pub fn recurrent_slot(&self, s: usize) -> usize {
        if self.variant.shares_recurrent() {
            0
        } else {
            s
        }
    }

    /// Storage slot of the readout used by modality `s`.
    pub fn readout_slot(&self, s: usize) -> usize {
        if self.variant.shares_readout() {
            0
        } else {
            s
        }
    }

    pub fn input(&self, s: usize) -> &ModalityInput {
        &self.inputs[s]
    }

    pub fn input_mut(&mut self, s: usize) -> &mut ModalityInput {
        &mut self.inputs[s]
    }

    /// Recurrent transform of `gate` as seen by modality `s`.
    pub fn recurrent_for(&self, s: usize, gate: Gate) -> &Mat {
        &self.recurrent[self.recurrent_slot(s)][gate.index()]
    }

    pub fn recurrent_for_mut(&mut self, s: usize, gate: Gate) -> &mut Mat {
        let slot = self.recurrent_slot(s);
        &mut self.recurrent[slot][gate.index()]
    }

    pub fn readout_for(&self, s: usize) -> &Mat {
        &self.readout[self.readout_slot(s)]
    }

    pub fn readout_for_mut(&mut self, s: usize) -> &mut Mat {
        let slot = self.readout_slot(s);
        &mut self.readout[slot]
    }

    /// Number of stored recurrent sets and readouts.
    pub fn storage_copies(&self) -> (usize, usize) {
        (self.recurrent.len(), self.readout.len())
    }

    /// The cell modality `s` runs, as a standalone single-modal parameter set.
    pub fn modality_params(&self, s: usize) -> LstmParams {
        LstmParams {
            w_x: self.inputs[s].w_x.clone(),
            w_h: self.recurrent[self.recurrent_slot(s)].clone(),
            b: self.inputs[s].b.clone(),
            w_y: self.readout_for(s).clone(),
        }
    }

    fn view(&self, s: usize) -> CellView<'_> {
        CellView {
            w_x: &self.inputs[s].w_x,
            b: &self.inputs[s].b,
            w_h: &self.recurrent[self.recurrent_slot(s)],
            w_y: &self.readout[self.readout_slot(s)],
        }
    }

    fn grads_view(&mut self, s: usize) -> CellGrads<'_> {
        let r = self.recurrent_slot(s);
        let q = self.readout_slot(s);
        let input = &mut self.inputs[s];
        CellGrads {
            w_x: &mut input.w_x,
            b: &mut input.b,
            w_h: &mut self.recurrent[r],
            w_y: &mut self.readout[q],
        }
    }

    fn check_sample(&self, sample: &MultimodalSample) -> Result<()> {
        let n = self.modalities();
        if sample.sequences.len() != n {
            return Err(Error::shape(
                "mm_forward",
                format!("{n} modalities"),
                format!("{} sequences", sample.sequences.len()),
            ));
        }
        let t = sample.sequences[0].steps();
        for (s, seq) in sample.sequences.iter().enumerate() {
            if seq.steps() != t {
                return Err(Error::shape(
                    "mm_forward",
                    format!("T = {t} (modality 0)"),
                    format!("T = {} (modality {s})", seq.steps()),
                ));
            }
            if seq.dim() != self.inputs[s].w_x[0].cols() {
                return Err(Error::shape(
                    "mm_forward",
                    format!("d_x = {} (modality {s})", self.inputs[s].w_x[0].cols()),
                    format!("frame dim {}", seq.dim()),
                ));
            }
        }
        if t == 0 {
            return Err(Error::invalid("sample has zero timesteps"));
        }
        Ok(())
    }
}

fn push_gate_set<'a>(out: &mut Vec<TensorRef<'a>>, prefix: &str, kind: &str, mats: &'a [Mat; 4]) {
    for gate in Gate::ALL {
        let m = &mats[gate.index()];
        out.push(TensorRef {
            name: format!("{prefix}W_{kind}{}", gate.suffix()),
            rows: m.rows(),
            cols: m.cols(),
            data: m.as_slice(),
        });
    }
}

impl ParamSet for MultimodalParams {
    fn tensors(&self) -> Vec<TensorRef<'_>> {
        let mut out = Vec::new();
        for (s, m) in self.inputs.iter().enumerate() {
            let prefix = format!("m{s}.");
            push_gate_set(&mut out, &prefix, "x", &m.w_x);
            for gate in Gate::ALL {
                let v = &m.b[gate.index()];
                out.push(TensorRef {
                    name: format!("{prefix}b_{}", gate.suffix()),
                    rows: v.len(),
                    cols: 1,
                    data: v.as_slice(),
                });
            }
        }
        let shared_h = self.recurrent.len() == 1 && self.variant.shares_recurrent();
        for (slot, set) in self.recurrent.iter().enumerate() {
            let prefix = if shared_h { String::new() } else { format!("m{slot}.") };
            push_gate_set(&mut out, &prefix, "h", set);
        }
        for (slot, m) in self.readout.iter().enumerate() {
            let name = if self.variant.shares_readout() {
                "W_y".to_string()
            } else {
                format!("m{slot}.W_y")
            };
            out.push(TensorRef {
                name,
                rows: m.rows(),
                cols: m.cols(),
                data: m.as_slice(),
            });
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for m in self.inputs.iter_mut() {
            out.extend(m.w_x.iter_mut().map(|w| w.as_mut_slice()));
            out.extend(m.b.iter_mut().map(|b| b.as_mut_slice()));
        }
        for set in self.recurrent.iter_mut() {
            out.extend(set.iter_mut().map(|w| w.as_mut_slice()));
        }
        out.extend(self.readout.iter_mut().map(|w| w.as_mut_slice()));
        out
    }
}

/// One independent [`ForwardTrace`] per modality; memory lines are never shared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultimodalTrace {
    pub streams: Vec<ForwardTrace>,
}

impl MultimodalTrace {
    pub fn steps(&self) -> usize {
        self.streams[0].len()
    }

    /// `proposals[s][t] = argmax y_t^s`.
    pub fn proposals(&self) -> Vec<Vec<usize>> {
        self.streams.iter().map(|s| s.proposals()).collect()
    }

    /// Loss with the same label stream and weights applied to every modality.
    pub fn loss(&self, labels: &[usize], weights: &[f64]) -> Result<f64> {
        let mut total = 0.0;
        for s in &self.streams {
            total += s.loss(labels, weights)?;
        }
        Ok(total)
    }
}

pub fn mm_forward(p: &MultimodalParams, sample: &MultimodalSample) -> Result<MultimodalTrace> {
    p.check_sample(sample)?;
    let streams = sample
        .sequences
        .iter()
        .enumerate()
        .map(|(s, seq)| ForwardTrace {
            steps: p.view(s).run(&seq.frames),
        })
        .collect();
    Ok(MultimodalTrace { streams })
}

/// Gradient of `Σ_s Σ_t loss_weights[t] · CE(y_t^s, labels[t])`. Shared
/// matrices accumulate contributions from every modality.
pub fn mm_backward(
    p: &MultimodalParams,
    trace: &MultimodalTrace,
    labels: &[usize],
    loss_weights: &[f64],
) -> Result<GradSet<MultimodalParams>> {
    if trace.streams.len() != p.modalities() {
        return Err(Error::shape(
            "mm_backward",
            format!("{} modalities", p.modalities()),
            format!("{} traced streams", trace.streams.len()),
        ));
    }
    for stream in &trace.streams {
        check_supervision(stream.len(), labels, loss_weights, p.classes())?;
    }
    let mut grads = GradSet::zeros_for(p);
    for (s, stream) in trace.streams.iter().enumerate() {
        cell::backprop(&p.view(s), &stream.steps, labels, loss_weights, grads.inner_mut().grads_view(s));
    }
    Ok(grads)
}

/// Per-modality, per-timestep label proposals.
pub fn mm_predict(p: &MultimodalParams, sample: &MultimodalSample) -> Result<Vec<Vec<usize>>> {
    Ok(mm_forward(p, sample)?.proposals())
}

/// Weights `1/(n·T)` so the total loss is the mean over modalities and timesteps.
pub fn mean_weights(n: usize, t: usize) -> Vec<f64> {
    vec![1.0 / (n * t) as f64; t]
}
