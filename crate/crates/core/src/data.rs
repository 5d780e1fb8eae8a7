//! Dataset ingestion, silence-trim + same-instrument-concatenation
//! augmentation, training-segment sampling, and the synthetic toy corpus.

pub mod synth;
pub mod wav;

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;
pub const TARGET_SAMPLE_RATE: u32 = 16_000;

/// Default silence threshold in dBFS over 25 ms RMS frames.
pub const TRIM_THRESHOLD_DB: f64 = -60.0;
const TRIM_FRAME: usize = 400; // 25 ms at 16 kHz

/// Training segments span 3 to 5 seconds.
pub const SEGMENT_MIN: usize = 48_000;
pub const SEGMENT_MAX: usize = 80_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// One manifest line.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestRecord {
    pub path: String,
    pub sample_id: String,
    pub instrument: String,
    pub family: String,
    pub pitch: u8,
    pub velocity: u8,
    pub source: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub style: Option<String>,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ManifestHeader {
    schema_version: u32,
}

/// JSON-lines manifest: a header object with `schema_version` followed by
/// one record per line. Paths are relative to the manifest's directory.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub records: Vec<ManifestRecord>,
    pub root: PathBuf,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header = ManifestHeader {
            schema_version: MANIFEST_SCHEMA_VERSION,
        };
        writeln!(file, "{}", serde_json::to_string(&header)?)?;
        for r in &self.records {
            writeln!(file, "{}", serde_json::to_string(r)?)?;
        }
        Ok(())
    }

    /// Load and validate: schema version known, paths unique, files exist.
    pub fn load(path: &Path) -> Result<Manifest> {
        let root = path
            .parent()
            .map(|p| p.to_path_buf())
            .unwrap_or_else(|| PathBuf::from("."));
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut lines = file.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::format("empty manifest"))??;
        let header: ManifestHeader = serde_json::from_str(&header_line)
            .map_err(|e| Error::format(format!("bad manifest header: {e}")))?;
        if header.schema_version != MANIFEST_SCHEMA_VERSION {
            return Err(Error::format(format!(
                "unsupported manifest schema version {}",
                header.schema_version
            )));
        }
        let mut records = Vec::new();
        let mut seen = BTreeSet::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: ManifestRecord = serde_json::from_str(&line)?;
            if !seen.insert(r.path.clone()) {
                return Err(Error::data(format!("duplicate path in manifest: {}", r.path)));
            }
            if !root.join(&r.path).exists() {
                return Err(Error::data(format!("missing audio file: {}", r.path)));
            }
            records.push(r);
        }
        Ok(Manifest { records, root })
    }

    /// Canonical content hash (records serialized in path order).
    pub fn content_hash(&self) -> String {
        let mut sorted = self.records.clone();
        sorted.sort_by(|a, b| a.path.cmp(&b.path));
        let mut hasher = Sha256::new();
        for r in &sorted {
            hasher.update(serde_json::to_string(r).unwrap().as_bytes());
            hasher.update(b"\n");
        }
        hex_digest(hasher)
    }

    /// Read a record's audio as mono 16 kHz samples.
    pub fn load_wave(&self, record: &ManifestRecord) -> Result<Vec<f32>> {
        wav::read_mono_16k(&self.root.join(&record.path))
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// No instrument may cross the train/test boundary.
    pub fn check_open_set(&self) -> Result<()> {
        let train: BTreeSet<&str> = self
            .split(Split::Train)
            .map(|r| r.instrument.as_str())
            .collect();
        for r in self.split(Split::Test) {
            if train.contains(r.instrument.as_str()) {
                return Err(Error::data(format!(
                    "instrument '{}' appears in both train and test splits",
                    r.instrument
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn hex_digest(hasher: Sha256) -> String {
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

fn frame_rms_db(frame: &[f32]) -> f64 {
    let sum: f64 = frame.iter().map(|&v| (v as f64) * (v as f64)).sum();
    let rms = (sum / frame.len() as f64).sqrt();
    20.0 * (rms + 1e-12).log10()
}

/// Remove leading and trailing sub-threshold regions (25 ms RMS frames).
/// Returns `None` when every frame is below the threshold.
pub fn trim_silence(wave: &[f32], threshold_db: f64) -> Result<Option<Vec<f32>>> {
    if wave.is_empty() {
        return Err(Error::input("cannot trim an empty waveform"));
    }
    let n_frames = wave.len().div_ceil(TRIM_FRAME);
    let mut first = None;
    let mut last = None;
    for f in 0..n_frames {
        let lo = f * TRIM_FRAME;
        let hi = (lo + TRIM_FRAME).min(wave.len());
        if frame_rms_db(&wave[lo..hi]) >= threshold_db {
            if first.is_none() {
                first = Some(lo);
            }
            last = Some(hi);
        }
    }
    match (first, last) {
        (Some(lo), Some(hi)) => Ok(Some(wave[lo..hi].to_vec())),
        _ => Ok(None),
    }
}

/// A waveform with the labels needed by the training sampler.
#[derive(Debug, Clone)]
pub struct AudioSample {
    pub wave: Vec<f32>,
    pub instrument: String,
    pub family: String,
    pub augmented: bool,
}

/// Concatenate trimmed waves of the same instrument in seeded-random
/// order. Mixed instruments are a contract error.
pub fn concat_same_instrument<R: Rng>(
    samples: &[AudioSample],
    rng: &mut R,
) -> Result<AudioSample> {
    if samples.len() < 2 {
        return Err(Error::input("concatenation needs at least two samples"));
    }
    let instrument = &samples[0].instrument;
    if samples.iter().any(|s| &s.instrument != instrument) {
        return Err(Error::data(
            "concat_same_instrument received mixed instruments",
        ));
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    let mut wave = Vec::new();
    for idx in order {
        match trim_silence(&samples[idx].wave, TRIM_THRESHOLD_DB)? {
            Some(trimmed) => wave.extend_from_slice(&trimmed),
            None => log::warn!("dropping all-silent sample from concatenation"),
        }
    }
    if wave.is_empty() {
        return Err(Error::data("all concatenation inputs were silent"));
    }
    Ok(AudioSample {
        wave,
        instrument: instrument.clone(),
        family: samples[0].family.clone(),
        augmented: true,
    })
}

/// Draw a training segment: uniform random duration in [3 s, 5 s], uniform
/// random offset, zero-padded at the end when the source is shorter.
pub fn draw_training_segment<R: Rng>(wave: &[f32], rng: &mut R) -> Vec<f32> {
    let duration = rng.gen_range(SEGMENT_MIN..=SEGMENT_MAX);
    draw_segment_with(wave, duration, rng)
}

/// Same as [`draw_training_segment`] but with the duration chosen by the
/// caller (used to keep training batches rectangular).
pub fn draw_segment_with<R: Rng>(wave: &[f32], duration: usize, rng: &mut R) -> Vec<f32> {
    if wave.len() <= duration {
        let mut out = wave.to_vec();
        out.resize(duration, 0.0);
        out
    } else {
        let offset = rng.gen_range(0..=wave.len() - duration);
        wave[offset..offset + duration].to_vec()
    }
}
