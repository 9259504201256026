//! Distractor rejection by temporal label agreement, threshold sweeps,
//! window voting and scene-level scoring.

pub mod scene;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::MultimodalSample;
use crate::error::{Error, Result};
use crate::multimodal::{mm_forward, MultimodalParams};
use crate::numeric::{argmax, Rng};
use scene::Scene;

pub use scene::{small_windows_in, Candidate, SceneWindow};

/// Outcome of classifying one sample or window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Decision {
    Rejected,
    Label(usize),
}

/// How accepted samples are labelled from the per-timestep outputs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Averaging {
    /// Argmax of the mean probability vector over all streams and steps.
    #[default]
    Probabilities,
    /// Majority over the per-step proposals.
    OneHot,
}

/// Which genuine-sample outcomes count as false alarms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FalseAlarmMode {
    RejectionOnly,
    #[default]
    RejectionOrMislabel,
}

/// Anything that emits per-modality, per-timestep class distributions.
pub trait ProposalModel: Sync {
    /// `outputs[s][t]` is the probability vector of modality `s` at step `t`.
    fn stream_outputs(&self, sample: &MultimodalSample) -> Result<Vec<Vec<Vec<f64>>>>;
}

impl ProposalModel for MultimodalParams {
    fn stream_outputs(&self, sample: &MultimodalSample) -> Result<Vec<Vec<Vec<f64>>>> {
        let trace = mm_forward(self, sample)?;
        Ok(trace
            .streams
            .into_iter()
            .map(|s| s.steps.into_iter().map(|c| c.y).collect())
            .collect())
    }
}

/// Number of timesteps whose proposals differ.
pub fn disagreement_count(a: &[usize], b: &[usize]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(Error::shape(
            "disagreement_count",
            format!("{} proposals", a.len()),
            format!("{} proposals", b.len()),
        ));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x != y).count())
}

/// Disagreement count and fallback label of one two-stream sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleScore {
    pub disagreements: usize,
    pub label: usize,
    pub steps: usize,
}

impl SampleScore {
    pub fn decide(&self, m: usize) -> Decision {
        if self.disagreements > m {
            Decision::Rejected
        } else {
            Decision::Label(self.label)
        }
    }
}

/// Scores two streams of probability vectors.
pub fn score_outputs(outputs: &[Vec<Vec<f64>>], averaging: Averaging) -> Result<SampleScore> {
    if outputs.len() != 2 {
        return Err(Error::invalid(format!(
            "rejection needs exactly two modalities, got {}",
            outputs.len()
        )));
    }
    let steps = outputs[0].len();
    let a: Vec<usize> = outputs[0].iter().map(|y| argmax(y)).collect();
    let b: Vec<usize> = outputs[1].iter().map(|y| argmax(y)).collect();
    let disagreements = disagreement_count(&a, &b)?;
    let k = outputs[0].first().map_or(0, Vec::len);
    if k == 0 || steps == 0 {
        return Err(Error::invalid("empty output streams"));
    }
    let mut mean = vec![0.0; k];
    match averaging {
        Averaging::Probabilities => {
            for y in outputs.iter().flatten() {
                for (m, v) in mean.iter_mut().zip(y) {
                    *m += v;
                }
            }
        }
        Averaging::OneHot => {
            for &l in a.iter().chain(&b) {
                mean[l] += 1.0;
            }
        }
    }
    let total = (2 * steps) as f64;
    mean.iter_mut().for_each(|v| *v /= total);
    Ok(SampleScore {
        disagreements,
        label: argmax(&mean),
        steps,
    })
}

pub fn score_sample<M: ProposalModel + ?Sized>(
    model: &M,
    sample: &MultimodalSample,
    averaging: Averaging,
) -> Result<SampleScore> {
    score_outputs(&model.stream_outputs(sample)?, averaging)
}

/// Rejects when more than `m` timesteps disagree; otherwise labels by
/// averaging all `2T` output distributions.
pub fn classify_with_rejection<M: ProposalModel + ?Sized>(
    model: &M,
    sample: &MultimodalSample,
    m: usize,
) -> Result<Decision> {
    if m > sample.steps() {
        return Err(Error::invalid(format!("threshold m = {m} exceeds T = {}", sample.steps())));
    }
    Ok(score_sample(model, sample, Averaging::Probabilities)?.decide(m))
}

/// Scores every sample, in input order.
pub fn score_all<M: ProposalModel + ?Sized>(
    model: &M,
    samples: &[MultimodalSample],
    averaging: Averaging,
    parallel: bool,
) -> Result<Vec<SampleScore>> {
    if parallel {
        samples.par_iter().map(|s| score_sample(model, s, averaging)).collect()
    } else {
        samples.iter().map(|s| score_sample(model, s, averaging)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub m: usize,
    pub false_alarm_rate: f64,
    /// Genuine samples labelled correctly plus distractors rejected, over all samples.
    pub accuracy: f64,
    pub genuine_rejection_rate: f64,
    pub distractor_acceptance_rate: f64,
}

/// Sweep options.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RocOptions {
    pub averaging: Averaging,
    pub false_alarm: FalseAlarmMode,
}

/// Builds one [`RocPoint`] per threshold from precomputed scores.
pub fn roc_from_scores(
    scores: &[SampleScore],
    samples: &[MultimodalSample],
    ms: &[usize],
    mode: FalseAlarmMode,
) -> Result<Vec<RocPoint>> {
    if scores.is_empty() || scores.len() != samples.len() {
        return Err(Error::invalid("ROC sweep needs a non-empty, fully scored test set"));
    }
    let genuine = samples.iter().filter(|s| !s.is_distractor).count();
    let distractors = samples.len() - genuine;
    if genuine == 0 || distractors == 0 {
        return Err(Error::invalid("ROC sweep needs both genuine and distractor samples"));
    }
    let mut points = Vec::with_capacity(ms.len());
    for &m in ms {
        let (mut g_rejected, mut g_wrong, mut d_accepted) = (0usize, 0usize, 0usize);
        for (score, sample) in scores.iter().zip(samples) {
            match (score.decide(m), sample.is_distractor) {
                (Decision::Rejected, false) => g_rejected += 1,
                (Decision::Label(l), false) if l != sample.label => g_wrong += 1,
                (Decision::Label(_), true) => d_accepted += 1,
                _ => {}
            }
        }
        let false_alarms = match mode {
            FalseAlarmMode::RejectionOnly => g_rejected,
            FalseAlarmMode::RejectionOrMislabel => g_rejected + g_wrong,
        };
        let correct = (genuine - g_rejected - g_wrong) + (distractors - d_accepted);
        points.push(RocPoint {
            m,
            false_alarm_rate: false_alarms as f64 / genuine as f64,
            accuracy: correct as f64 / samples.len() as f64,
            genuine_rejection_rate: g_rejected as f64 / genuine as f64,
            distractor_acceptance_rate: d_accepted as f64 / distractors as f64,
        });
    }
    check_monotone(&points)?;
    Ok(points)
}

/// Genuine rejection must not increase with `m`; distractor acceptance must not decrease.
pub fn check_monotone(points: &[RocPoint]) -> Result<()> {
    let mut sorted: Vec<&RocPoint> = points.iter().collect();
    sorted.sort_by_key(|p| p.m);
    for w in sorted.windows(2) {
        if w[1].genuine_rejection_rate > w[0].genuine_rejection_rate
            || w[1].distractor_acceptance_rate < w[0].distractor_acceptance_rate
        {
            return Err(Error::Numeric(format!(
                "ROC monotonicity violated between m = {} and m = {}",
                w[0].m, w[1].m
            )));
        }
    }
    Ok(())
}

pub fn roc_sweep<M: ProposalModel + ?Sized>(
    model: &M,
    testset: &[MultimodalSample],
    ms: &[usize],
    opts: RocOptions,
) -> Result<Vec<RocPoint>> {
    if testset.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let scores = score_all(model, testset, opts.averaging, true)?;
    roc_from_scores(&scores, testset, ms, opts.false_alarm)
}

/// Area under the best-accuracy-within-false-alarm-budget curve over
/// FAR ∈ [0, 1]: for budget `x`, the highest accuracy among points with
/// FAR ≤ `x` (zero before the first point).
pub fn roc_area(points: &[RocPoint]) -> f64 {
    let mut sorted: Vec<(f64, f64)> = points.iter().map(|p| (p.false_alarm_rate, p.accuracy)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut area = 0.0;
    let mut best = 0.0f64;
    for (i, &(far, acc)) in sorted.iter().enumerate() {
        best = best.max(acc);
        let next = sorted.get(i + 1).map_or(1.0, |p| p.0).min(1.0);
        area += best * (next - far).max(0.0);
    }
    area
}

/// Majority over non-rejected decisions; rejected when rejections are a
/// strict majority. Label ties go to the smallest index.
pub fn window_vote(decisions: &[Decision]) -> Result<Decision> {
    if decisions.is_empty() {
        return Err(Error::invalid("no window decisions to vote on"));
    }
    let rejected = decisions.iter().filter(|d| **d == Decision::Rejected).count();
    if 2 * rejected > decisions.len() {
        return Ok(Decision::Rejected);
    }
    let mut counts: Vec<usize> = Vec::new();
    for d in decisions {
        if let Decision::Label(l) = *d {
            if counts.len() <= l {
                counts.resize(l + 1, 0);
            }
            counts[l] += 1;
        }
    }
    if counts.is_empty() {
        return Ok(Decision::Rejected);
    }
    let mut best = 0;
    for (l, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = l;
        }
    }
    Ok(Decision::Label(best))
}

/// Per-window decisions for every candidate of every scene:
/// `out[scene][candidate][window]`.
pub fn scene_decisions<M: ProposalModel + ?Sized>(
    model: &M,
    scenes: &[Scene],
    m: usize,
) -> Result<Vec<Vec<Vec<Decision>>>> {
    scenes
        .par_iter()
        .map(|scene| {
            let n_cand = scene.windows[0].candidates.len();
            (0..n_cand)
                .map(|c| {
                    scene
                        .windows
                        .iter()
                        .map(|w| match &w.voice {
                            None => Ok(Decision::Rejected),
                            Some(voice) => {
                                let face = &w.candidates[c].face;
                                let sample = MultimodalSample::aligned(
                                    vec![face.clone(), voice.clone()],
                                    voice.identity,
                                    face.identity != voice.identity,
                                )?;
                                classify_with_rejection(model, &sample, m)
                            }
                        })
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect()
}

/// Success of one scene given each candidate's final decision.
pub fn scene_success(scene: &Scene, decisions: &[Decision]) -> bool {
    let truth = scene.truth();
    scene
        .candidate_ids()
        .iter()
        .zip(decisions)
        .all(|(&id, &d)| match truth {
            Some(t) if id == t => d == Decision::Label(t),
            _ => d == Decision::Rejected,
        })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneReport {
    pub windows: usize,
    pub accuracy: f64,
    pub successes: usize,
    pub scenes: usize,
    /// Scenes with no voice and no candidates, counted as successes.
    pub trivial: usize,
}

/// Scores scenes from precomputed window decisions using the first
/// `windows` small windows of every scene.
pub fn score_scenes(scenes: &[Scene], decisions: &[Vec<Vec<Decision>>], windows: usize) -> Result<SceneReport> {
    if scenes.is_empty() {
        return Err(Error::invalid("no scenes to score"));
    }
    let mut successes = 0;
    let mut trivial = 0;
    for (scene, per_cand) in scenes.iter().zip(decisions) {
        if scene.windows.len() < windows {
            return Err(Error::invalid(format!(
                "scene has {} windows, vote needs {windows}",
                scene.windows.len()
            )));
        }
        let voiceless = scene.windows.iter().all(|w| w.voice.is_none());
        if voiceless && per_cand.is_empty() {
            trivial += 1;
            successes += 1;
            continue;
        }
        let finals = per_cand
            .iter()
            .map(|d| window_vote(&d[..windows]))
            .collect::<Result<Vec<_>>>()?;
        if scene_success(scene, &finals) {
            successes += 1;
        }
    }
    Ok(SceneReport {
        windows,
        accuracy: successes as f64 / scenes.len() as f64,
        successes,
        scenes: scenes.len(),
        trivial,
    })
}

/// Scene accuracy with voting over a window of `vote_secs` seconds.
pub fn scene_accuracy<M: ProposalModel + ?Sized>(
    model: &M,
    scenes: &[Scene],
    m: usize,
    vote_secs: f64,
) -> Result<SceneReport> {
    let windows = small_windows_in(vote_secs)?;
    let decisions = scene_decisions(model, scenes, m)?;
    score_scenes(scenes, &decisions, windows)
}

/// Chance level by shuffling candidate decision tracks across all
/// candidates of all scenes, averaged over `rounds` permutations.
pub fn shuffled_chance(
    scenes: &[Scene],
    decisions: &[Vec<Vec<Decision>>],
    windows: usize,
    rounds: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let mut pool: Vec<&Vec<Decision>> = decisions.iter().flatten().collect();
    let mut total = 0.0;
    for _ in 0..rounds.max(1) {
        rng.shuffle(&mut pool);
        let mut it = pool.iter();
        let shuffled: Vec<Vec<Vec<Decision>>> = decisions
            .iter()
            .map(|per_cand| per_cand.iter().map(|_| (*it.next().expect("same size")).clone()).collect())
            .collect();
        total += score_scenes(scenes, &shuffled, windows)?.accuracy;
    }
    Ok(total / rounds.max(1) as f64)
}
