//! Sequence containers, time alignment, runtime pairing and distractor
//! construction.

mod io;
mod synth;

use std::collections::BTreeMap;

pub use io::{
    load_features, load_pool, load_scenes, read_features, save_features, save_pool, save_scenes, write_atomic,
    write_features,
};
pub use synth::{synth_generate, SynthConfig, SynthWorld};

use crate::error::{Error, Result};
use crate::numeric::{Mat, Rng};

/// Modality index of face streams in two-modality data.
pub const FACE: usize = 0;
/// Modality index of voice streams in two-modality data.
pub const VOICE: usize = 1;

/// One modality's `T × d` frame sequence with its identity label.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub modality: usize,
    pub identity: usize,
    pub frames: Mat,
}

impl FeatureSequence {
    pub fn new(modality: usize, identity: usize, frames: Mat) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::invalid("feature sequence needs at least one frame"));
        }
        if let Some(pos) = frames.as_slice().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "non-finite feature at frame {}, column {}",
                pos / frames.cols().max(1),
                pos % frames.cols().max(1)
            )));
        }
        Ok(FeatureSequence {
            modality,
            identity,
            frames,
        })
    }

    pub fn steps(&self) -> usize {
        self.frames.rows()
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }
}

/// Aligned per-modality sequences forming one model input.
#[derive(Debug, Clone, PartialEq)]
pub struct MultimodalSample {
    pub sequences: Vec<FeatureSequence>,
    /// Identity used for supervision and scoring. For distractors this is
    /// the voice identity.
    pub label: usize,
    pub is_distractor: bool,
}

impl MultimodalSample {
    pub fn new(sequences: Vec<FeatureSequence>, label: usize, is_distractor: bool) -> Result<Self> {
        let first = sequences
            .first()
            .ok_or_else(|| Error::invalid("sample needs at least one modality"))?;
        let t = first.steps();
        if let Some(bad) = sequences.iter().find(|s| s.steps() != t) {
            return Err(Error::shape(
                "MultimodalSample",
                format!("T = {t}"),
                format!("T = {} in modality {}", bad.steps(), bad.modality),
            ));
        }
        if is_distractor {
            if sequences.iter().all(|s| s.identity == first.identity) {
                return Err(Error::invalid("distractor sources must have differing identities"));
            }
        } else if let Some(bad) = sequences.iter().find(|s| s.identity != label) {
            return Err(Error::invalid(format!(
                "genuine sample labelled {label} contains identity {} in modality {}",
                bad.identity, bad.modality
            )));
        }
        Ok(MultimodalSample {
            sequences,
            label,
            is_distractor,
        })
    }

    pub fn steps(&self) -> usize {
        self.sequences[0].steps()
    }

    /// Builds a sample from sequences of possibly different lengths by
    /// stretching every modality to the longest one with [`duplicate_evenly`].
    pub fn aligned(sequences: Vec<FeatureSequence>, label: usize, is_distractor: bool) -> Result<Self> {
        let target = sequences.iter().map(FeatureSequence::steps).max().unwrap_or(0);
        let sequences = sequences
            .into_iter()
            .map(|s| if s.steps() == target { Ok(s) } else { duplicate_evenly(&s, target) })
            .collect::<Result<Vec<_>>>()?;
        MultimodalSample::new(sequences, label, is_distractor)
    }
}

/// Source frame used for output frame `j` when stretching `t` frames to `target`.
pub fn duplicate_index(j: usize, t: usize, target: usize) -> usize {
    j * t / target
}

/// Stretches a sequence to `target` frames by repeating frames as evenly as
/// possible: output frame `j` is input frame `⌊j·T/target⌋`.
pub fn duplicate_evenly(seq: &FeatureSequence, target: usize) -> Result<FeatureSequence> {
    let t = seq.steps();
    if target < t {
        return Err(Error::invalid(format!(
            "cannot duplicate {t} frames down to {target}"
        )));
    }
    let d = seq.dim();
    let mut data = Vec::with_capacity(target * d);
    for j in 0..target {
        data.extend_from_slice(seq.frame(duplicate_index(j, t, target)));
    }
    FeatureSequence::new(seq.modality, seq.identity, Mat::from_vec(target, d, data)?)
}

/// Per-modality sequence collections. When every modality holds the same
/// number of sequences with matching identities, entry `i` across
/// modalities is one recorded sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    modalities: Vec<Vec<FeatureSequence>>,
    by_identity: Vec<BTreeMap<usize, Vec<usize>>>,
    aligned: bool,
}

impl Pool {
    pub fn new(modalities: Vec<Vec<FeatureSequence>>) -> Result<Self> {
        if modalities.is_empty() {
            return Err(Error::invalid("pool needs at least one modality"));
        }
        let mut by_identity = Vec::with_capacity(modalities.len());
        for (s, seqs) in modalities.iter().enumerate() {
            if seqs.is_empty() {
                return Err(Error::invalid(format!("modality {s} of the pool is empty")));
            }
            let d = seqs[0].dim();
            let mut index: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for (i, seq) in seqs.iter().enumerate() {
                if seq.dim() != d {
                    return Err(Error::shape(
                        "Pool",
                        format!("d = {d} in modality {s}"),
                        format!("d = {} at entry {i}", seq.dim()),
                    ));
                }
                index.entry(seq.identity).or_default().push(i);
            }
            by_identity.push(index);
        }
        let n = modalities[0].len();
        let aligned = modalities.iter().all(|m| m.len() == n)
            && (0..n).all(|i| modalities.iter().all(|m| m[i].identity == modalities[0][i].identity));
        Ok(Pool {
            modalities,
            by_identity,
            aligned,
        })
    }

    pub fn modality_count(&self) -> usize {
        self.modalities.len()
    }

    pub fn modality(&self, s: usize) -> &[FeatureSequence] {
        &self.modalities[s]
    }

    pub fn dims(&self) -> Vec<usize> {
        self.modalities.iter().map(|m| m[0].dim()).collect()
    }

    /// Identities present in every modality, ascending.
    pub fn identities(&self) -> Vec<usize> {
        self.by_identity[0]
            .keys()
            .copied()
            .filter(|k| self.by_identity.iter().all(|idx| idx.contains_key(k)))
            .collect()
    }

    /// Number of classes implied by the largest identity label.
    pub fn class_count(&self) -> usize {
        self.by_identity
            .iter()
            .filter_map(|idx| idx.keys().next_back())
            .max()
            .map_or(0, |&k| k + 1)
    }

    pub fn indices_of(&self, s: usize, identity: usize) -> &[usize] {
        self.by_identity[s].get(&identity).map_or(&[], Vec::as_slice)
    }

    /// Whether entry `i` of every modality belongs to one recorded sample.
    pub fn is_aligned(&self) -> bool {
        self.aligned
    }

    /// Number of recorded samples; only meaningful for aligned pools.
    pub fn len(&self) -> usize {
        self.modalities[0].len()
    }

    pub fn is_empty(&self) -> bool {
        self.modalities[0].is_empty()
    }

    /// The recorded sample at index `i` of an aligned pool.
    pub fn recorded(&self, i: usize) -> Result<MultimodalSample> {
        if !self.is_aligned() {
            return Err(Error::invalid("pool is not aligned across modalities"));
        }
        let seqs: Vec<FeatureSequence> = self.modalities.iter().map(|m| m[i].clone()).collect();
        let label = seqs[0].identity;
        MultimodalSample::aligned(seqs, label, false)
    }

    /// Per-identity counts for modality `s`.
    pub fn class_counts(&self, s: usize) -> Vec<(usize, usize)> {
        self.by_identity[s].iter().map(|(&k, v)| (k, v.len())).collect()
    }
}

/// Pairs a uniformly drawn sequence of `identity` from every modality.
pub fn pair_runtime(pool: &Pool, identity: usize, rng: &mut Rng) -> Result<MultimodalSample> {
    let mut seqs = Vec::with_capacity(pool.modality_count());
    for s in 0..pool.modality_count() {
        let candidates = pool.indices_of(s, identity);
        if candidates.is_empty() {
            return Err(Error::invalid(format!(
                "no sequence of identity {identity} in modality {s}"
            )));
        }
        seqs.push(pool.modality(s)[candidates[rng.below(candidates.len())]].clone());
    }
    MultimodalSample::aligned(seqs, identity, false)
}

/// An ill-paired face/voice sample: uniform over all (face, voice) pairs
/// whose identities differ. The label is the voice identity.
pub fn make_distractor(pool: &Pool, rng: &mut Rng) -> Result<MultimodalSample> {
    if pool.modality_count() != 2 {
        return Err(Error::invalid("distractors are defined for face/voice pools"));
    }
    let face_ids: Vec<usize> = pool.by_identity[FACE].keys().copied().collect();
    let voice_ids: Vec<usize> = pool.by_identity[VOICE].keys().copied().collect();
    if !face_ids.iter().any(|a| voice_ids.iter().any(|b| a != b)) {
        return Err(Error::invalid("distractors need at least two identities"));
    }
    let faces = pool.modality(FACE);
    let voices = pool.modality(VOICE);
    loop {
        let face = &faces[rng.below(faces.len())];
        let voice = &voices[rng.below(voices.len())];
        if face.identity != voice.identity {
            let label = voice.identity;
            return MultimodalSample::aligned(vec![face.clone(), voice.clone()], label, true);
        }
    }
}

/// Balanced genuine/distractor test set. Genuine samples are the recorded
/// pairs of an aligned pool, drawn round-robin over identities.
pub fn balanced_test_set(pool: &Pool, per_kind: usize, rng: &mut Rng) -> Result<Vec<MultimodalSample>> {
    let ids = pool.identities();
    if ids.len() < 2 {
        return Err(Error::invalid("balanced test set needs at least two identities"));
    }
    let mut shuffled: Vec<Vec<usize>> = ids
        .iter()
        .map(|&k| {
            let mut v = pool.indices_of(FACE, k).to_vec();
            rng.shuffle(&mut v);
            v
        })
        .collect();
    let mut out = Vec::with_capacity(2 * per_kind);
    let mut cursor = vec![0usize; ids.len()];
    let mut c = 0;
    while out.len() < per_kind {
        let slot = c % ids.len();
        c += 1;
        let list = &mut shuffled[slot];
        if cursor[slot] >= list.len() {
            rng.shuffle(list);
            cursor[slot] = 0;
        }
        let i = list[cursor[slot]];
        cursor[slot] += 1;
        out.push(pool.recorded(i)?);
    }
    for _ in 0..per_kind {
        out.push(make_distractor(pool, rng)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(modality: usize, identity: usize, t: usize, d: usize) -> FeatureSequence {
        let data = (0..t * d).map(|v| (v / d) as f64).collect();
        FeatureSequence::new(modality, identity, Mat::from_vec(t, d, data).unwrap()).unwrap()
    }

    fn source_counts(t: usize, target: usize) -> Vec<usize> {
        let mut counts = vec![0; t];
        for j in 0..target {
            counts[duplicate_index(j, t, target)] += 1;
        }
        counts
    }

    #[test]
    fn twelve_to_forty_nine() {
        let counts = source_counts(12, 49);
        assert_eq!(counts.iter().sum::<usize>(), 49);
        assert!(counts.iter().all(|&c| c == 4 || c == 5));
        // Enumerated: 49 = 12·4 + 1, so exactly one source frame repeats five times.
        assert_eq!(counts.iter().filter(|&&c| c == 5).count(), 1);
        let out = duplicate_evenly(&ramp(0, 3, 12, 2), 49).unwrap();
        assert_eq!(out.steps(), 49);
        assert_eq!(out.identity, 3);
    }

    #[test]
    fn duplicate_identity_and_single_frame() {
        let s = ramp(0, 0, 7, 3);
        assert_eq!(duplicate_evenly(&s, 7).unwrap(), s);
        let one = ramp(1, 0, 1, 2);
        let out = duplicate_evenly(&one, 5).unwrap();
        for t in 0..5 {
            assert_eq!(out.frame(t), one.frame(0));
        }
        assert!(duplicate_evenly(&s, 6).is_err());
    }

    #[test]
    fn duplicate_exhaustive_sweep() {
        let mut violations = 0;
        for t in 1..=200 {
            for target in t..=200 {
                let counts = source_counts(t, target);
                let mono = (1..target).all(|j| duplicate_index(j - 1, t, target) <= duplicate_index(j, t, target));
                let (lo, hi) = (counts.iter().min().unwrap(), counts.iter().max().unwrap());
                if counts.iter().sum::<usize>() != target || !mono || *lo == 0 || hi - lo > 1 {
                    violations += 1;
                }
            }
        }
        assert_eq!(violations, 0);
    }

    fn pool_of(ids: &[usize], per: usize) -> Pool {
        let mut faces = Vec::new();
        let mut voices = Vec::new();
        for &k in ids {
            for j in 0..per {
                faces.push(FeatureSequence::new(FACE, k, Mat::from_vec(2, 1, vec![j as f64, k as f64]).unwrap()).unwrap());
                voices.push(FeatureSequence::new(VOICE, k, Mat::from_vec(3, 1, vec![j as f64; 3]).unwrap()).unwrap());
            }
        }
        Pool::new(vec![faces, voices]).unwrap()
    }

    #[test]
    fn pairing_unique_and_reproducible() {
        let pool = pool_of(&[0, 1], 1);
        let s = pair_runtime(&pool, 1, &mut Rng::new(0)).unwrap();
        assert_eq!(s.label, 1);
        assert!(!s.is_distractor);
        // Face stretched from 2 to 3 frames.
        assert_eq!(s.steps(), 3);

        let pool = pool_of(&[0, 1], 5);
        let a = pair_runtime(&pool, 0, &mut Rng::new(42)).unwrap();
        let b = pair_runtime(&pool, 0, &mut Rng::new(42)).unwrap();
        assert_eq!(a, b);
        assert!(pair_runtime(&pool, 9, &mut Rng::new(0)).is_err());
    }

    #[test]
    fn pairing_is_uniform() {
        let pool = pool_of(&[0], 4);
        let mut rng = Rng::new(1);
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            let s = pair_runtime(&pool, 0, &mut rng).unwrap();
            counts[s.sequences[FACE].frame(0)[0] as usize] += 1;
        }
        for c in counts {
            let freq = c as f64 / draws as f64;
            assert!((freq - 0.25).abs() < 0.02, "{counts:?}");
        }
        let expected = draws as f64 / 4.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
        // 99.9th percentile of chi-square with 3 degrees of freedom.
        assert!(chi2 < 16.27, "chi2 = {chi2}");
    }

    #[test]
    fn distractors_always_cross_identities() {
        let pool = pool_of(&[0, 1], 3);
        let mut rng = Rng::new(5);
        for _ in 0..1000 {
            let s = make_distractor(&pool, &mut rng).unwrap();
            assert_ne!(s.sequences[FACE].identity, s.sequences[VOICE].identity);
            assert_eq!(s.label, s.sequences[VOICE].identity);
            assert!(s.is_distractor);
        }
        let pool = pool_of(&[0, 1, 2, 3], 2);
        for _ in 0..100_000 {
            let s = make_distractor(&pool, &mut rng).unwrap();
            assert_ne!(s.sequences[FACE].identity, s.sequences[VOICE].identity);
        }
        assert!(make_distractor(&pool_of(&[2], 3), &mut rng).is_err());
    }

    #[test]
    fn balanced_set_has_equal_counts() {
        let pool = pool_of(&[0, 1, 2], 4);
        let set = balanced_test_set(&pool, 20, &mut Rng::new(2)).unwrap();
        assert_eq!(set.iter().filter(|s| s.is_distractor).count(), 20);
        assert_eq!(set.iter().filter(|s| !s.is_distractor).count(), 20);
    }

    #[test]
    fn sample_invariants_enforced() {
        let a = ramp(0, 0, 3, 2);
        let b = ramp(1, 0, 4, 2);
        assert!(MultimodalSample::new(vec![a.clone(), b.clone()], 0, false).is_err());
        assert!(MultimodalSample::aligned(vec![a.clone(), b.clone()], 0, false).is_ok());
        assert!(MultimodalSample::aligned(vec![a.clone(), b], 0, true).is_err());
        let c = ramp(1, 1, 3, 2);
        assert!(MultimodalSample::new(vec![a.clone(), c.clone()], 0, false).is_err());
        assert!(MultimodalSample::new(vec![a, c], 1, true).is_ok());
    }
}
