//! Scene windows for speaker identification: candidate face tracks, an
//! optional voice stream and the ground-truth speaker.

use crate::dataset::FeatureSequence;
use crate::error::{Error, Result};

/// Length of one classification window in seconds.
pub const SMALL_WINDOW_SECS: f64 = 0.5;
/// Hop between consecutive classification windows in seconds.
pub const WINDOW_STRIDE_SECS: f64 = 0.25;

/// Number of small windows inside a voting window of `vote_secs` seconds,
/// `(vote − 0.5) / 0.25 + 1`. A 2.0 s window holds 7.
pub fn small_windows_in(vote_secs: f64) -> Result<usize> {
    let steps = (vote_secs - SMALL_WINDOW_SECS) / WINDOW_STRIDE_SECS;
    if !steps.is_finite() || steps < -1e-9 || (steps - steps.round()).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "vote window {vote_secs}s is not 0.5s plus a multiple of 0.25s"
        )));
    }
    Ok(steps.round() as usize + 1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Identity of the person the face track belongs to.
    pub id: usize,
    pub face: FeatureSequence,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneWindow {
    pub start: f64,
    pub end: f64,
    pub candidates: Vec<Candidate>,
    pub voice: Option<FeatureSequence>,
    /// Speaking identity, which may or may not be among the candidates.
    pub truth: Option<usize>,
}

/// Consecutive small windows over one scene with a fixed candidate set.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub windows: Vec<SceneWindow>,
}

impl Scene {
    pub fn new(windows: Vec<SceneWindow>) -> Result<Self> {
        let first = windows.first().ok_or_else(|| Error::invalid("scene has no windows"))?;
        let ids: Vec<usize> = first.candidates.iter().map(|c| c.id).collect();
        for w in &windows {
            if w.truth != first.truth {
                return Err(Error::invalid("ground truth changes within a scene"));
            }
            if w.candidates.iter().map(|c| c.id).ne(ids.iter().copied()) {
                return Err(Error::invalid("candidate list changes within a scene"));
            }
        }
        Ok(Scene { windows })
    }

    pub fn truth(&self) -> Option<usize> {
        self.windows[0].truth
    }

    pub fn candidate_ids(&self) -> Vec<usize> {
        self.windows[0].candidates.iter().map(|c| c.id).collect()
    }

    /// Whether the speaking identity is one of the candidates.
    pub fn speaker_present(&self) -> bool {
        self.truth().is_some_and(|t| self.candidate_ids().contains(&t))
    }
}
