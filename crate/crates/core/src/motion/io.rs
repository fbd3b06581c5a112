//! Text file formats for motions, audio features and dataset manifests.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::sequence::{AudioFeatureSequence, MotionSequence};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

fn format_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn push_row(out: &mut String, row: &[f64]) {
    for (i, v) in row.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        // `{}` prints the shortest string that parses back to the same f64
        write!(out, "{v}").unwrap();
    }
    out.push('\n');
}

/// Parses `key=value` fields after a magic prefix.
fn header_fields<'a>(path: &Path, line: &'a str, magic: &str) -> Result<Vec<(&'a str, &'a str)>> {
    let rest = line
        .strip_prefix(magic)
        .ok_or_else(|| format_err(path, 1, format!("expected header starting with `{magic}`")))?;
    rest.split_whitespace()
        .map(|kv| {
            kv.split_once('=')
                .ok_or_else(|| format_err(path, 1, format!("header field `{kv}` is not key=value")))
        })
        .collect()
}

fn field<'a>(path: &Path, fields: &[(&str, &'a str)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| format_err(path, 1, format!("header is missing `{key}`")))
}

fn parse_row(path: &Path, line_no: usize, line: &str, width: usize) -> Result<Vec<f64>> {
    let row = line
        .split_whitespace()
        .map(|tok| {
            tok.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| format_err(path, line_no, format!("`{tok}` is not a finite number")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if row.len() != width {
        return Err(format_err(
            path,
            line_no,
            format!("row has {} values, expected {width}", row.len()),
        ));
    }
    Ok(row)
}

pub fn motion_to_string(m: &MotionSequence) -> String {
    let mut s = format!("UDEMOTION v1 fps={} joints={}\n", m.fps(), m.joints());
    for t in 0..m.frames() {
        push_row(&mut s, m.frame(t));
    }
    s
}

pub fn save_motion(path: &Path, m: &MotionSequence) -> Result<()> {
    write_atomic(path, motion_to_string(m).as_bytes())
}

pub fn parse_motion(path: &Path, text: &str) -> Result<MotionSequence> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| format_err(path, 1, "empty file"))?;
    let fields = header_fields(path, header, "UDEMOTION v1")?;
    let fps: f64 = field(path, &fields, "fps")?
        .parse()
        .map_err(|_| format_err(path, 1, "fps is not a number"))?;
    let joints: usize = field(path, &fields, "joints")?
        .parse()
        .map_err(|_| format_err(path, 1, "joints is not an integer"))?;
    if !(fps > 0.0 && fps.is_finite()) || joints == 0 {
        return Err(format_err(path, 1, "fps and joints must be positive"));
    }
    let mut data = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        data.extend(parse_row(path, i + 2, line, joints * 3)?);
    }
    if data.is_empty() {
        return Err(format_err(path, 2, "motion has no frames"));
    }
    MotionSequence::new(fps, joints, data)
}

pub fn load_motion(path: &Path) -> Result<MotionSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_motion(path, &text)
}

pub fn features_to_string(f: &AudioFeatureSequence) -> String {
    let mut s = format!("UDEFEAT v1 rate={} dims={}\n", f.frame_rate, f.dims());
    for t in 0..f.frames() {
        push_row(&mut s, f.features().row(t));
    }
    if let Some(beats) = &f.beat_times {
        s.push_str("beats:");
        for b in beats {
            write!(s, " {b}").unwrap();
        }
        s.push('\n');
    }
    s
}

pub fn save_features(path: &Path, f: &AudioFeatureSequence) -> Result<()> {
    write_atomic(path, features_to_string(f).as_bytes())
}

pub fn parse_features(path: &Path, text: &str) -> Result<AudioFeatureSequence> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| format_err(path, 1, "empty file"))?;
    let fields = header_fields(path, header, "UDEFEAT v1")?;
    let rate: f64 = field(path, &fields, "rate")?
        .parse()
        .map_err(|_| format_err(path, 1, "rate is not a number"))?;
    let dims: usize = field(path, &fields, "dims")?
        .parse()
        .map_err(|_| format_err(path, 1, "dims is not an integer"))?;
    if !(rate > 0.0 && rate.is_finite()) || dims == 0 {
        return Err(format_err(path, 1, "rate and dims must be positive"));
    }
    let mut data = Vec::new();
    let mut beats = None;
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if line.trim().is_empty() {
            continue;
        }
        if beats.is_some() {
            return Err(format_err(path, line_no, "content after the beats line"));
        }
        if let Some(rest) = line.strip_prefix("beats:") {
            let b = rest
                .split_whitespace()
                .map(|tok| {
                    tok.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| format_err(path, line_no, format!("bad beat time `{tok}`")))
                })
                .collect::<Result<Vec<f64>>>()?;
            beats = Some(b);
            continue;
        }
        data.extend(parse_row(path, line_no, line, dims)?);
    }
    if data.is_empty() {
        return Err(format_err(path, 2, "feature file has no frames"));
    }
    let frames = data.len() / dims;
    AudioFeatureSequence::new(rate, Tensor::new(&[frames, dims], data)?, beats)
}

pub fn load_features(path: &Path) -> Result<AudioFeatureSequence> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_features(path, &text)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Text,
    Audio,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest line. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub modality: Modality,
    pub motion: String,
    pub cond: String,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn count(&self, modality: Modality, split: Split) -> usize {
        self.entries
            .iter()
            .filter(|e| e.modality == modality && e.split == split)
            .count()
    }

    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    /// Parses and checks that ids are unique and referenced files exist under `root`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().unwrap_or(Path::new("."));
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry =
                serde_json::from_str(line).map_err(|err| format_err(path, i + 1, err.to_string()))?;
            if !seen.insert(e.id.clone()) {
                return Err(format_err(path, i + 1, format!("duplicate id `{}`", e.id)));
            }
            for f in [&e.motion, &e.cond] {
                if !root.join(f).is_file() {
                    return Err(format_err(path, i + 1, format!("referenced file `{f}` does not exist")));
                }
            }
            entries.push(e);
        }
        Ok(DatasetManifest { entries })
    }
}

/// Conditioning payload of a sample.
#[derive(Clone, Debug, PartialEq)]
pub enum Condition {
    Text(String),
    Audio(AudioFeatureSequence),
}

impl Condition {
    pub fn modality(&self) -> Modality {
        match self {
            Condition::Text(_) => Modality::Text,
            Condition::Audio(_) => Modality::Audio,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub split: Split,
    pub motion: MotionSequence,
    pub cond: Condition,
}

/// Reads every sample listed in a manifest.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<Sample>> {
    let manifest = DatasetManifest::load(manifest_path)?;
    let root: PathBuf = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    manifest
        .entries
        .iter()
        .map(|e| {
            let motion = load_motion(&root.join(&e.motion))?;
            let cond_path = root.join(&e.cond);
            let cond = match e.modality {
                Modality::Text => Condition::Text(
                    std::fs::read_to_string(&cond_path)
                        .map_err(|err| Error::io(&cond_path, err))?
                        .trim()
                        .to_string(),
                ),
                Modality::Audio => Condition::Audio(load_features(&cond_path)?),
            };
            Ok(Sample {
                id: e.id.clone(),
                split: e.split,
                motion,
                cond,
            })
        })
        .collect()
}
