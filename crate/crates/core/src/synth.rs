//! Planted-motif synthetic corpus.
//!
//! Benign files are a mixture of zero runs, ASCII text and code-like bytes
//! in which bytes at or above 0xC0 only ever appear in isolation, so no
//! motif trigram can occur by chance. Malicious files share that
//! background and carry one contiguous payload of motif trigrams, usually
//! near the end of the file.

use std::collections::HashSet;
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::parallel;
use crate::preprocess::{sha256_hex, Label};
use crate::train::{DatasetManifest, ManifestEntry, Split};

/// Lowest byte value of the motif alphabet.
pub const HIGH_BYTE: u8 = 0xC0;

/// Regeneration attempts before giving up on a rejected or duplicate file.
pub const MAX_ATTEMPTS: usize = 100;

pub const DEFAULT_MOTIFS: [[u8; 3]; 8] = [
    [0xE8, 0xC3, 0xFF],
    [0xFF, 0xD0, 0xC9],
    [0xCD, 0xEB, 0xFE],
    [0xC7, 0xF3, 0xE9],
    [0xF7, 0xD8, 0xC1],
    [0xEB, 0xFE, 0xCC],
    [0xD1, 0xE0, 0xF2],
    [0xC3, 0xCC, 0xE8],
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusConfig {
    pub per_class: usize,
    pub min_length: usize,
    pub max_length: usize,
    pub motifs: Vec<[u8; 3]>,
    /// Payload length as a fraction of the file length.
    pub payload_fraction: f64,
    pub min_payload: usize,
    /// Probability that the payload starts in the tail window.
    pub tail_probability: f64,
    /// Tail window as fractions of the file length.
    pub tail_window: (f64, f64),
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticCorpusConfig {
    fn default() -> Self {
        SyntheticCorpusConfig {
            per_class: 1000,
            min_length: 4 << 10,
            max_length: 1 << 20,
            motifs: DEFAULT_MOTIFS.to_vec(),
            payload_fraction: 0.02,
            min_payload: 192,
            tail_probability: 0.85,
            tail_window: (0.55, 0.95),
            validation_fraction: 0.25,
            seed: 0,
        }
    }
}

impl SyntheticCorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.per_class == 0 {
            return bad("per-class count must be positive");
        }
        if self.min_length < 64 || self.min_length > self.max_length {
            return bad("length range must satisfy 64 ≤ min ≤ max");
        }
        if self.motifs.is_empty() || self.motifs.iter().flatten().any(|&b| b < HIGH_BYTE) {
            return bad("motifs must be non-empty trigrams of bytes ≥ 0xC0");
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return bad("validation fraction must lie in [0, 1)");
        }
        if self.min_payload < 3 || self.min_payload * 2 > self.min_length {
            return bad("payload must fit in half the shortest file");
        }
        let (a, b) = self.tail_window;
        if !(0.0 <= a && a < b && b <= 1.0) {
            return bad("tail window must satisfy 0 ≤ start < end ≤ 1");
        }
        Ok(())
    }

    fn payload_length(&self, len: usize) -> usize {
        let p = ((len as f64 * self.payload_fraction) as usize).max(self.min_payload);
        (p / 3 * 3).min(len / 2)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub bytes: Vec<u8>,
    pub label: Label,
    /// Byte range of the planted payload.
    pub payload: Option<Range<usize>>,
}

fn background(len: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let mut out = Vec::with_capacity(len);
    while out.len() < len {
        let seg = rng.gen_range(256..8192).min(len - out.len());
        match rng.gen_range(0..10) {
            0..=1 => out.extend(std::iter::repeat(0u8).take(seg)),
            2..=4 => {
                for _ in 0..seg {
                    let b = if rng.gen_bool(0.08) { b'\n' } else { rng.gen_range(0x20..0x7F) };
                    out.push(b);
                }
            }
            _ => {
                for _ in 0..seg {
                    let prev_high = out.last().is_some_and(|&b| b >= HIGH_BYTE);
                    let b = if !prev_high && rng.gen_bool(0.03) {
                        rng.gen_range(HIGH_BYTE..=0xFF)
                    } else {
                        rng.gen_range(0..HIGH_BYTE)
                    };
                    out.push(b);
                }
            }
        }
    }
    out
}

/// First offset at which any motif occurs.
pub fn find_motif(bytes: &[u8], motifs: &[[u8; 3]]) -> Option<usize> {
    bytes.windows(3).position(|w| motifs.iter().any(|m| m == w))
}

/// One sample drawn from `rng`; benign draws containing a motif are rejected
/// and redrawn.
pub fn generate_sample(config: &SyntheticCorpusConfig, label: Label, rng: &mut ChaCha8Rng) -> Result<SyntheticSample> {
    let (lo, hi) = (config.min_length as f64, config.max_length as f64);
    for _ in 0..MAX_ATTEMPTS {
        let len = (lo.ln() + rng.gen::<f64>() * (hi.ln() - lo.ln())).exp().round() as usize;
        let len = len.clamp(config.min_length, config.max_length);
        let mut bytes = background(len, rng);
        let payload = match label {
            Label::Malicious => {
                let plen = config.payload_length(len);
                let last = len - plen;
                let (a, b) = config.tail_window;
                let start = if rng.gen_bool(config.tail_probability) {
                    let from = ((len as f64 * a) as usize).min(last);
                    let to = ((len as f64 * b) as usize).saturating_sub(plen).clamp(from, last);
                    rng.gen_range(from..=to)
                } else {
                    rng.gen_range(0..=last)
                };
                for chunk in bytes[start..start + plen].chunks_mut(3) {
                    let m = config.motifs.choose(rng).expect("validated motifs");
                    chunk.copy_from_slice(&m[..chunk.len()]);
                }
                Some(start..start + plen)
            }
            _ => None,
        };
        if payload.is_none() && find_motif(&bytes, &config.motifs).is_some() {
            continue;
        }
        return Ok(SyntheticSample {
            bytes,
            label,
            payload,
        });
    }
    Err(Error::InvalidConfig(format!(
        "no acceptable {label} sample after {MAX_ATTEMPTS} attempts"
    )))
}

/// Ground truth for one written file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthRow {
    pub path: String,
    pub label: Label,
    pub digest: String,
    pub length: usize,
    pub payload_offset: Option<usize>,
    pub payload_length: Option<usize>,
    pub split: Split,
}

#[derive(Clone, Debug)]
pub struct CorpusSummary {
    pub train: DatasetManifest,
    pub validation: DatasetManifest,
    pub truth: Vec<TruthRow>,
}

pub const TRAIN_MANIFEST: &str = "train.tsv";
pub const VALIDATION_MANIFEST: &str = "validation.tsv";
pub const TRUTH_FILE: &str = "ground_truth.csv";

fn sample_rng(seed: u64, index: u64, attempt: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((attempt << 32) | index);
    rng
}

/// Writes `per_class` files per class under `dir/{benign,malicious}/`, the
/// two manifests and a ground-truth table. The output depends only on the
/// configuration.
pub fn write_corpus(config: &SyntheticCorpusConfig, dir: &Path) -> Result<CorpusSummary> {
    config.validate()?;
    let jobs: Vec<(usize, Label)> = [Label::Benign, Label::Malicious]
        .into_iter()
        .flat_map(|l| (0..config.per_class).map(move |i| (i, l)))
        .collect();
    for l in [Label::Benign, Label::Malicious] {
        let d = dir.join(l.as_str());
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let total = jobs.len() as u64;
    let index_of = |i: usize, label: Label| label.class_index().unwrap() as u64 * config.per_class as u64 + i as u64;
    let emit = |i: usize, label: Label, s: SyntheticSample| -> Result<TruthRow> {
        let rel = format!("{}/{:05}.bin", label.as_str(), i);
        let path = dir.join(&rel);
        fs::write(&path, &s.bytes).map_err(|e| Error::io(&path, e))?;
        Ok(TruthRow {
            path: rel,
            label,
            digest: sha256_hex(&s.bytes),
            length: s.bytes.len(),
            payload_offset: s.payload.as_ref().map(|p| p.start),
            payload_length: s.payload.as_ref().map(|p| p.len()),
            split: Split::Train,
        })
    };
    let mut rows = Vec::with_capacity(jobs.len());
    // Chunking keeps at most a few files in memory per worker.
    for chunk in jobs.chunks(64) {
        for r in parallel::map(chunk, |&(i, label)| {
            emit(i, label, generate_sample(config, label, &mut sample_rng(config.seed, index_of(i, label), 0))?)
        }) {
            rows.push(r?);
        }
    }
    let mut seen = HashSet::new();
    for (row, &(i, label)) in rows.iter_mut().zip(&jobs) {
        let mut attempt = 1;
        while !seen.insert(row.digest.clone()) {
            if attempt >= MAX_ATTEMPTS as u64 {
                return Err(Error::InvalidConfig(format!(
                    "digest collision persisted after {MAX_ATTEMPTS} attempts"
                )));
            }
            let mut rng = sample_rng(config.seed, index_of(i, label) + total * attempt, attempt);
            *row = emit(i, label, generate_sample(config, label, &mut rng)?)?;
            attempt += 1;
        }
    }

    // stratified split
    let mut rng = sample_rng(config.seed, u32::MAX as u64, 0);
    for label in [Label::Benign, Label::Malicious] {
        let mut idx: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].label == label).collect();
        idx.shuffle(&mut rng);
        let n_val = (idx.len() as f64 * config.validation_fraction).round() as usize;
        for &i in &idx[..n_val] {
            rows[i].split = Split::Validation;
        }
    }
    let manifest = |split| {
        DatasetManifest::new(
            split,
            rows.iter()
                .filter(|r| r.split == split)
                .map(|r| ManifestEntry {
                    path: dir.join(&r.path),
                    label: r.label,
                    digest: r.digest.clone(),
                })
                .collect(),
        )
    };
    let train = manifest(Split::Train)?;
    let validation = manifest(Split::Validation)?;
    train.write(&dir.join(TRAIN_MANIFEST), dir)?;
    validation.write(&dir.join(VALIDATION_MANIFEST), dir)?;
    write_truth(&rows, &dir.join(TRUTH_FILE))?;
    Ok(CorpusSummary {
        train,
        validation,
        truth: rows,
    })
}

fn write_truth(rows: &[TruthRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_truth(path: &Path) -> Result<Vec<TruthRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Resolves a truth row's path against the corpus directory.
pub fn truth_path(dir: &Path, row: &TruthRow) -> PathBuf {
    dir.join(&row.path)
}

/// Fraction of malicious files whose first motif lies past half the file.
pub fn tail_fraction<'a>(files: impl IntoIterator<Item = &'a [u8]>, motifs: &[[u8; 3]]) -> f64 {
    let (mut hits, mut n) = (0usize, 0usize);
    for f in files {
        n += 1;
        if let Some(off) = f
            .windows(3)
            .enumerate()
            .rev()
            .find(|(_, w)| motifs.iter().any(|m| m == w))
            .map(|(i, _)| i)
        {
            if off * 2 > f.len() {
                hits += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        hits as f64 / n as f64
    }
}
