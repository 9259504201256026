//! On-disk formats.
//!
//! Feature file: one ASCII header line
//! `MMSEQ v1 modality=<id> T=<int> d=<int> identity=<int>` terminated by
//! `\n`, followed by `T·d` little-endian f64 values in row-major order.
//!
//! Pool manifest: `MMPOOL v1 modalities=<n> count=<N>` then `N` lines of
//! `n` whitespace-separated feature-file paths, relative to the manifest.
//! Entries on one line form one recorded sample.
//!
//! Scene manifest: `MMSCENE v1 scenes=<S>`, then for every scene a line
//! `scene truth=<id|ABSENT> windows=<W>` followed by `W` lines
//! `window start=<s> end=<e> voice=<path|NONE> faces=<id>:<path>,...`
//! (`faces=` is empty when the window has no candidates).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{FeatureSequence, Pool};
use crate::error::{Error, Result};
use crate::evaluator::scene::{Candidate, Scene, SceneWindow};
use crate::numeric::Mat;

const MAGIC: &str = "MMSEQ";
const POOL_MAGIC: &str = "MMPOOL";
const SCENE_MAGIC: &str = "MMSCENE";

/// Encodes a sequence in the feature-file format.
pub fn write_features(seq: &FeatureSequence) -> Vec<u8> {
    let header = format!(
        "{MAGIC} v1 modality={} T={} d={} identity={}\n",
        seq.modality,
        seq.steps(),
        seq.dim(),
        seq.identity
    );
    let mut out = Vec::with_capacity(header.len() + seq.frames.as_slice().len() * 8);
    out.extend_from_slice(header.as_bytes());
    for v in seq.frames.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn header_field<'a>(path: &Path, token: Option<&'a str>, key: &str) -> Result<&'a str> {
    let token = token.ok_or_else(|| Error::format(path, "header", format!("missing field '{key}'")))?;
    token
        .strip_prefix(key)
        .and_then(|t| t.strip_prefix('='))
        .ok_or_else(|| Error::format(path, "header", format!("expected '{key}=...', found '{token}'")))
}

fn parse_usize(path: &Path, text: &str, key: &str) -> Result<usize> {
    text.parse()
        .map_err(|_| Error::format(path, "header", format!("field '{key}' is not an integer: '{text}'")))
}

/// Decodes a feature file. `path` is used for error messages only.
pub fn read_features(path: &Path, bytes: &[u8]) -> Result<FeatureSequence> {
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format(path, "byte 0", "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..newline])
        .map_err(|_| Error::format(path, "header", "header is not ASCII"))?;
    let mut tokens = header.split_ascii_whitespace();
    if tokens.next() != Some(MAGIC) {
        return Err(Error::format(path, "header", format!("expected magic '{MAGIC}'")));
    }
    match tokens.next() {
        Some("v1") => {}
        other => {
            return Err(Error::format(
                path,
                "header",
                format!("unsupported version {}", other.unwrap_or("<missing>")),
            ))
        }
    }
    let modality = parse_usize(path, header_field(path, tokens.next(), "modality")?, "modality")?;
    let t = parse_usize(path, header_field(path, tokens.next(), "T")?, "T")?;
    let d = parse_usize(path, header_field(path, tokens.next(), "d")?, "d")?;
    let identity = parse_usize(path, header_field(path, tokens.next(), "identity")?, "identity")?;
    if let Some(extra) = tokens.next() {
        return Err(Error::format(path, "header", format!("unexpected token '{extra}'")));
    }
    if t == 0 {
        return Err(Error::format(path, "header", "T must be at least 1"));
    }

    let body = &bytes[newline + 1..];
    let expected = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| Error::format(path, "header", "T·d overflows"))?;
    if body.len() != expected {
        return Err(Error::format(
            path,
            format!("byte {}", newline + 1 + body.len().min(expected)),
            format!("expected {expected} data bytes, found {}", body.len()),
        ));
    }
    let mut data = Vec::with_capacity(t * d);
    for (i, chunk) in body.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().expect("chunk of 8"));
        if !v.is_finite() {
            return Err(Error::format(
                path,
                format!("byte {}", newline + 1 + 8 * i),
                format!("non-finite value at frame {}, column {}", i / d, i % d),
            ));
        }
        data.push(v);
    }
    FeatureSequence::new(modality, identity, Mat::from_vec(t, d, data)?)
}

pub fn save_features(path: &Path, seq: &FeatureSequence) -> Result<()> {
    fs::write(path, write_features(seq)).map_err(|e| Error::io(path, e))
}

pub fn load_features(path: &Path) -> Result<FeatureSequence> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_features(path, &bytes)
}

fn base_dir(manifest: &Path) -> PathBuf {
    manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Writes every sequence of an aligned pool under `dir/<stem>/` and a
/// manifest at `dir/<stem>.pool`. Returns the manifest path.
pub fn save_pool(dir: &Path, stem: &str, pool: &Pool) -> Result<PathBuf> {
    if !pool.is_aligned() {
        return Err(Error::invalid("only aligned pools can be written as a manifest"));
    }
    let data_dir = dir.join(stem);
    fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    let n = pool.modality_count();
    let mut manifest = format!("{POOL_MAGIC} v1 modalities={n} count={}\n", pool.len());
    for i in 0..pool.len() {
        let mut line = Vec::with_capacity(n);
        for s in 0..n {
            let rel = format!("{stem}/m{s}_{i:06}.mmseq");
            save_features(&dir.join(&rel), &pool.modality(s)[i])?;
            line.push(rel);
        }
        manifest.push_str(&line.join(" "));
        manifest.push('\n');
    }
    let path = dir.join(format!("{stem}.pool"));
    write_atomic(&path, manifest.as_bytes())?;
    Ok(path)
}

pub fn load_pool(manifest: &Path) -> Result<Pool> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(manifest, "line 1", "empty pool manifest"))?;
    let mut tokens = header.split_ascii_whitespace();
    if tokens.next() != Some(POOL_MAGIC) || tokens.next() != Some("v1") {
        return Err(Error::format(manifest, "line 1", format!("expected '{POOL_MAGIC} v1'")));
    }
    let n = parse_usize(manifest, header_field(manifest, tokens.next(), "modalities")?, "modalities")?;
    let count = parse_usize(manifest, header_field(manifest, tokens.next(), "count")?, "count")?;
    let base = base_dir(manifest);
    let mut modalities: Vec<Vec<FeatureSequence>> = vec![Vec::with_capacity(count); n];
    let mut seen = 0;
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let paths: Vec<&str> = line.split_ascii_whitespace().collect();
        if paths.len() != n {
            return Err(Error::format(
                manifest,
                format!("line {}", lineno + 2),
                format!("expected {n} paths, found {}", paths.len()),
            ));
        }
        for (s, p) in paths.iter().enumerate() {
            modalities[s].push(load_features(&base.join(p))?);
        }
        seen += 1;
    }
    if seen != count {
        return Err(Error::format(manifest, "end", format!("header declares {count} entries, found {seen}")));
    }
    Pool::new(modalities)
}

/// Writes scenes under `dir/<stem>/` with a manifest at `dir/<stem>.scenes`.
pub fn save_scenes(dir: &Path, stem: &str, scenes: &[Scene]) -> Result<PathBuf> {
    let data_dir = dir.join(stem);
    fs::create_dir_all(&data_dir).map_err(|e| Error::io(&data_dir, e))?;
    let mut manifest = format!("{SCENE_MAGIC} v1 scenes={}\n", scenes.len());
    for (si, scene) in scenes.iter().enumerate() {
        let truth = scene.truth().map_or("ABSENT".to_string(), |t| t.to_string());
        manifest.push_str(&format!("scene truth={truth} windows={}\n", scene.windows.len()));
        for (wi, w) in scene.windows.iter().enumerate() {
            let voice = match &w.voice {
                Some(v) => {
                    let rel = format!("{stem}/s{si:04}_w{wi:02}_voice.mmseq");
                    save_features(&dir.join(&rel), v)?;
                    rel
                }
                None => "NONE".to_string(),
            };
            let mut faces = Vec::with_capacity(w.candidates.len());
            for (ci, c) in w.candidates.iter().enumerate() {
                let rel = format!("{stem}/s{si:04}_w{wi:02}_c{ci}.mmseq");
                save_features(&dir.join(&rel), &c.face)?;
                faces.push(format!("{}:{rel}", c.id));
            }
            manifest.push_str(&format!(
                "window start={} end={} voice={voice} faces={}\n",
                w.start,
                w.end,
                faces.join(",")
            ));
        }
    }
    let path = dir.join(format!("{stem}.scenes"));
    write_atomic(&path, manifest.as_bytes())?;
    Ok(path)
}

pub fn load_scenes(manifest: &Path) -> Result<Vec<Scene>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let base = base_dir(manifest);
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(manifest, "line 1", "empty scene manifest"))?;
    let mut tokens = header.split_ascii_whitespace();
    if tokens.next() != Some(SCENE_MAGIC) || tokens.next() != Some("v1") {
        return Err(Error::format(manifest, "line 1", format!("expected '{SCENE_MAGIC} v1'")));
    }
    let count = parse_usize(manifest, header_field(manifest, tokens.next(), "scenes")?, "scenes")?;
    let mut scenes = Vec::with_capacity(count);
    for _ in 0..count {
        let (lineno, line) = lines
            .next()
            .ok_or_else(|| Error::format(manifest, "end", "fewer scenes than declared"))?;
        let at = |msg: String| Error::format(manifest, format!("line {}", lineno + 1), msg);
        let mut tokens = line.split_ascii_whitespace();
        if tokens.next() != Some("scene") {
            return Err(at("expected a 'scene' line".into()));
        }
        let truth = match header_field(manifest, tokens.next(), "truth")? {
            "ABSENT" => None,
            v => Some(parse_usize(manifest, v, "truth")?),
        };
        let n_windows = parse_usize(manifest, header_field(manifest, tokens.next(), "windows")?, "windows")?;
        let mut windows = Vec::with_capacity(n_windows);
        for _ in 0..n_windows {
            let (lineno, line) = lines
                .next()
                .ok_or_else(|| Error::format(manifest, "end", "fewer windows than declared"))?;
            let at = |msg: String| Error::format(manifest, format!("line {}", lineno + 1), msg);
            let mut tokens = line.split_ascii_whitespace();
            if tokens.next() != Some("window") {
                return Err(at("expected a 'window' line".into()));
            }
            let parse_f = |s: &str| s.parse::<f64>().map_err(|_| at(format!("bad time '{s}'")));
            let start = parse_f(header_field(manifest, tokens.next(), "start")?)?;
            let end = parse_f(header_field(manifest, tokens.next(), "end")?)?;
            let voice = match header_field(manifest, tokens.next(), "voice")? {
                "NONE" => None,
                p => Some(load_features(&base.join(p))?),
            };
            let faces = header_field(manifest, tokens.next(), "faces")?;
            let mut candidates = Vec::new();
            for entry in faces.split(',').filter(|e| !e.is_empty()) {
                let (id, p) = entry
                    .split_once(':')
                    .ok_or_else(|| at(format!("candidate '{entry}' is not '<id>:<path>'")))?;
                let id = id.parse().map_err(|_| at(format!("bad candidate id '{id}'")))?;
                candidates.push(Candidate {
                    id,
                    face: load_features(&base.join(p))?,
                });
            }
            windows.push(SceneWindow {
                start,
                end,
                candidates,
                voice,
                truth,
            });
        }
        scenes.push(Scene::new(windows)?);
    }
    Ok(scenes)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::SynthConfig;
    use crate::dataset::SynthWorld;
    use crate::numeric::Rng;
    use proptest::prelude::*;

    #[test]
    fn hand_written_single_value_file() {
        let mut bytes = b"MMSEQ v1 modality=1 T=1 d=1 identity=4\n".to_vec();
        bytes.extend_from_slice(&2.5f64.to_le_bytes());
        let seq = read_features(Path::new("fixture"), &bytes).unwrap();
        assert_eq!((seq.modality, seq.identity, seq.steps(), seq.dim()), (1, 4, 1, 1));
        assert_eq!(seq.frame(0), &[2.5]);
    }

    #[test]
    fn malformed_inputs_rejected_with_position() {
        let p = Path::new("x.mmseq");
        let err = read_features(p, b"").unwrap_err().to_string();
        assert!(err.contains("missing header"), "{err}");
        let err = read_features(p, b"MMSEQ v2 modality=0 T=1 d=1 identity=0\n").unwrap_err().to_string();
        assert!(err.contains("version"), "{err}");
        let err = read_features(p, b"MMSEQ v1 modality=0 T=x d=1 identity=0\n").unwrap_err().to_string();
        assert!(err.contains("'T'"), "{err}");

        let mut truncated = b"MMSEQ v1 modality=0 T=2 d=1 identity=0\n".to_vec();
        truncated.extend_from_slice(&1.0f64.to_le_bytes());
        let err = read_features(p, &truncated).unwrap_err().to_string();
        assert!(err.contains("expected 16 data bytes, found 8"), "{err}");

        let mut nan = b"MMSEQ v1 modality=0 T=2 d=1 identity=0\n".to_vec();
        nan.extend_from_slice(&1.0f64.to_le_bytes());
        nan.extend_from_slice(&f64::NAN.to_le_bytes());
        let err = read_features(p, &nan).unwrap_err().to_string();
        assert!(err.contains("frame 1, column 0") && err.contains("byte 47"), "{err}");
    }

    #[test]
    fn empty_file_on_disk_is_a_header_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.mmseq");
        fs::write(&path, b"").unwrap();
        assert!(matches!(load_features(&path), Err(Error::Format { .. })));
    }

    proptest! {
        #[test]
        fn feature_round_trip_is_bit_exact(
            t in 1usize..6, d in 1usize..5, modality in 0usize..3, identity in 0usize..9,
            seed in any::<u64>(),
        ) {
            let mut rng = Rng::new(seed);
            let data: Vec<f64> = (0..t * d).map(|_| rng.normal() * 1e3).collect();
            let seq = FeatureSequence::new(modality, identity, Mat::from_vec(t, d, data).unwrap()).unwrap();
            let back = read_features(Path::new("mem"), &write_features(&seq)).unwrap();
            prop_assert_eq!(back, seq);
        }
    }

    #[test]
    fn pool_and_scene_round_trip() {
        let cfg = SynthConfig {
            classes: 3,
            dims: vec![3, 2],
            steps: 4,
            train_per_class: 2,
            test_per_class: 1,
            ..SynthConfig::default()
        };
        let world = SynthWorld::new(cfg).unwrap();
        let (train, _) = world.generate().unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_pool(dir.path(), "train", &train).unwrap();
        assert_eq!(load_pool(&manifest).unwrap(), train);

        let scenes = world.scenes(4, 3, 0.5, 2, &mut Rng::new(3)).unwrap();
        let path = save_scenes(dir.path(), "scenes", &scenes).unwrap();
        assert_eq!(load_scenes(&path).unwrap(), scenes);
    }

    #[test]
    fn pool_manifest_count_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pool");
        fs::write(&path, "MMPOOL v1 modalities=2 count=3\n").unwrap();
        let err = load_pool(&path).unwrap_err().to_string();
        assert!(err.contains("declares 3"), "{err}");
    }
}
