//! Feature files, corpus listings and mixture manifests.
//!
//! Feature file layout (little endian): `b"SOTF"`, `u32` version, `u32` rows,
//! `u32` cols, then `rows * cols` `f32` values row-major.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::mix::{Component, MixtureSample};
use super::synth::Utterance;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::vocab::Vocabulary;

pub const FEATURE_MAGIC: &[u8; 4] = b"SOTF";
pub const FEATURE_VERSION: u32 = 1;

pub fn write_features(path: &Path, m: &Matrix<f64>) -> Result<()> {
    let mut bytes = Vec::with_capacity(16 + 4 * m.as_slice().len());
    bytes.extend_from_slice(FEATURE_MAGIC);
    bytes.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(m.rows() as u32).to_le_bytes());
    bytes.extend_from_slice(&(m.cols() as u32).to_le_bytes());
    for &x in m.as_slice() {
        bytes.extend_from_slice(&(x as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Matrix<f64>> {
    let mut bytes = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::format(path, "not a feature file (bad magic)"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported feature file version {version}"),
        ));
    }
    let (rows, cols) = (word(8) as usize, word(12) as usize);
    let body = &bytes[16..];
    if body.len() != rows * cols * 4 {
        return Err(Error::format(
            path,
            format!("expected {} data bytes, found {}", rows * cols * 4, body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok(Matrix::from_vec(rows, cols, data))
}

/// Round trip through single precision, as stored on disk.
pub fn quantize(m: &Matrix<f64>) -> Matrix<f64> {
    m.map(|x| x as f32 as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestComponent {
    pub utt_id: String,
    pub transcript: String,
    pub start_frame: usize,
    pub weight: f64,
    pub loudness_gain: f64,
    pub gender: u8,
    pub content_length: usize,
    pub overlapped_frames: usize,
}

/// One JSON line of a mixture manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub n_speakers: usize,
    pub components: Vec<ManifestComponent>,
    /// Relative to the manifest's directory.
    pub feature_path: String,
}

/// One JSON line of a corpus listing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub transcript: String,
    pub loudness_gain: f64,
    pub gender: u8,
    pub duration_frames: usize,
    pub feature_path: String,
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
        out.push(item);
    }
    Ok(out)
}

/// Writes a manifest and one feature file per mixture under
/// `<manifest dir>/<feature_dir>/`.
pub fn write_manifest(path: &Path, feature_dir: &str, samples: &[MixtureSample], vocab: &Vocabulary) -> Result<()> {
    let dir = base_dir(path).join(feature_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let rel = format!("{feature_dir}/{}.sotf", s.id);
        write_features(&base_dir(path).join(&rel), &s.features)?;
        entries.push(ManifestEntry {
            id: s.id.clone(),
            n_speakers: s.components.len(),
            components: s
                .components
                .iter()
                .map(|c| ManifestComponent {
                    utt_id: c.utt_id.clone(),
                    transcript: vocab.decode(&c.transcript),
                    start_frame: c.start_frame,
                    weight: c.weight,
                    loudness_gain: c.loudness_gain,
                    gender: c.gender,
                    content_length: c.content_length,
                    overlapped_frames: c.overlapped_frames,
                })
                .collect(),
            feature_path: rel,
        });
    }
    write_jsonl(path, &entries)
}

/// Reads a manifest and its feature files.
pub fn read_manifest(path: &Path, vocab: &Vocabulary) -> Result<Vec<MixtureSample>> {
    let entries: Vec<ManifestEntry> = read_jsonl(path)?;
    let base = base_dir(path);
    entries
        .into_iter()
        .map(|e| {
            if e.n_speakers != e.components.len() {
                return Err(Error::format(
                    path,
                    format!("{}: n_speakers does not match components", e.id),
                ));
            }
            let features = read_features(&base.join(&e.feature_path))?;
            let components = e
                .components
                .into_iter()
                .map(|c| {
                    let transcript = vocab
                        .encode_transcript(&c.transcript)
                        .map_err(|err| Error::format(path, format!("{}: {err}", e.id)))?;
                    Ok(Component {
                        utt_id: c.utt_id,
                        transcript,
                        start_frame: c.start_frame,
                        weight: c.weight,
                        loudness_gain: c.loudness_gain,
                        gender: c.gender,
                        content_length: c.content_length,
                        overlapped_frames: c.overlapped_frames,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(MixtureSample {
                id: e.id,
                features,
                components,
            })
        })
        .collect()
}

pub fn write_corpus(path: &Path, feature_dir: &str, utts: &[Utterance], vocab: &Vocabulary) -> Result<()> {
    let dir = base_dir(path).join(feature_dir);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut entries = Vec::with_capacity(utts.len());
    for u in utts {
        let rel = format!("{feature_dir}/{}.sotf", u.id);
        write_features(&base_dir(path).join(&rel), &u.features)?;
        entries.push(CorpusEntry {
            id: u.id.clone(),
            transcript: vocab.decode(&u.transcript),
            loudness_gain: u.loudness_gain,
            gender: u.gender,
            duration_frames: u.duration_frames,
            feature_path: rel,
        });
    }
    write_jsonl(path, &entries)
}

pub fn read_corpus(path: &Path, vocab: &Vocabulary) -> Result<Vec<Utterance>> {
    let entries: Vec<CorpusEntry> = read_jsonl(path)?;
    let base = base_dir(path);
    entries
        .into_iter()
        .map(|e| {
            let features = read_features(&base.join(&e.feature_path))?;
            if features.rows() != e.duration_frames {
                return Err(Error::format(
                    path,
                    format!("{}: duration does not match feature rows", e.id),
                ));
            }
            let transcript = vocab
                .encode_transcript(&e.transcript)
                .map_err(|err| Error::format(path, format!("{}: {err}", e.id)))?;
            Ok(Utterance {
                id: e.id,
                transcript,
                features,
                loudness_gain: e.loudness_gain,
                gender: e.gender,
                duration_frames: e.duration_frames,
            })
        })
        .collect()
}
