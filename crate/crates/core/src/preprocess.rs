//! Sequence characterization: raw bytes → `[-1, 1]` reals → fixed length.
//!
//! Normalization happens before resampling so interpolation works on real
//! values rather than integer bytes. Resampling is endpoint-aligned linear
//! interpolation; [`resample_adjoint`] is its exact transpose and carries
//! gradients from the resampled sequence back to byte positions.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Fixed model input length, 2^18.
pub const DEFAULT_TARGET_LENGTH: usize = 1 << 18;

const CACHE_MAGIC: &[u8; 8] = b"SEQNORM\0";
const CACHE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malicious,
    Unknown,
}

impl Label {
    /// Class index used throughout: 0 = benign, 1 = malicious.
    pub fn class_index(self) -> Option<usize> {
        match self {
            Label::Benign => Some(0),
            Label::Malicious => Some(1),
            Label::Unknown => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malicious => "malicious",
            Label::Unknown => "unknown",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "benign" | "0" => Ok(Label::Benign),
            "malicious" | "1" => Ok(Label::Malicious),
            "unknown" => Ok(Label::Unknown),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Hex SHA-256 of a byte string.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RawSample {
    pub bytes: Vec<u8>,
    pub label: Label,
    pub digest: String,
    pub source_path: String,
}

impl RawSample {
    pub fn new(bytes: Vec<u8>, label: Label, source_path: impl Into<String>) -> Result<Self> {
        if bytes.is_empty() {
            return Err(Error::EmptyBinary);
        }
        let digest = sha256_hex(&bytes);
        Ok(RawSample {
            bytes,
            label,
            digest,
            source_path: source_path.into(),
        })
    }

    pub fn read(path: &Path, label: Label) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        RawSample::new(bytes, label, path.display().to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedSequence {
    pub values: Vec<f64>,
    pub original_length: usize,
    pub target_length: usize,
}

/// Maps byte `b` to `b / 127.5 − 1`, so 0x00 → −1 and 0xFF → +1.
pub fn normalize_bytes(bytes: &[u8]) -> Result<Vec<f64>> {
    if bytes.is_empty() {
        return Err(Error::EmptyBinary);
    }
    Ok(bytes.iter().map(|&b| normalize_byte(b)).collect())
}

#[inline]
pub fn normalize_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Inverse of [`normalize_byte`], rounded and clamped to a byte.
#[inline]
pub fn quantize(v: f64) -> u8 {
    (127.5 * (v + 1.0)).round().clamp(0.0, 255.0) as u8
}

/// Source position of output `j` as `(index, numerator, denominator)`:
/// the exact position is `index + numerator / denominator`.
#[inline]
fn tap(j: usize, from: usize, to: usize) -> (usize, u64, u64) {
    let (num, den) = if to == 1 {
        ((from - 1) as u64, 2u64)
    } else {
        (j as u64 * (from - 1) as u64, (to - 1) as u64)
    };
    ((num / den) as usize, num % den, den)
}

/// Endpoint-aligned linear interpolation of `v` to `target` samples.
pub fn resample_linear(v: &[f64], target: usize) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Geometry("cannot resample an empty sequence".into()));
    }
    if target == 0 {
        return Err(Error::Geometry("target length must be positive".into()));
    }
    if v.len() == target {
        return Ok(v.to_vec());
    }
    let l = v.len();
    Ok((0..target)
        .map(|j| {
            let (i, num, den) = tap(j, l, target);
            if num == 0 {
                return v[i];
            }
            let (a, b) = (v[i], v[i + 1]);
            let f = num as f64 / den as f64;
            (a + f * (b - a)).clamp(a.min(b), a.max(b))
        })
        .collect())
}

/// Transpose of [`resample_linear`]: maps a gradient over `g.len()` output
/// positions back onto `source_len` input positions.
pub fn resample_adjoint(g: &[f64], source_len: usize) -> Result<Vec<f64>> {
    if source_len == 0 || g.is_empty() {
        return Err(Error::Geometry(format!(
            "adjoint needs positive lengths, got source {source_len}, output {}",
            g.len()
        )));
    }
    if g.len() == source_len {
        return Ok(g.to_vec());
    }
    let mut out = vec![0.0; source_len];
    let m = g.len();
    for (j, &gj) in g.iter().enumerate() {
        let (i, num, den) = tap(j, source_len, m);
        if num == 0 {
            out[i] += gj;
        } else {
            let f = num as f64 / den as f64;
            out[i] += gj * (1.0 - f);
            out[i + 1] += gj * f;
        }
    }
    Ok(out)
}

/// Normalize then resample a sample to `target_length`.
pub fn preprocess(sample: &RawSample, target_length: usize) -> Result<NormalizedSequence> {
    preprocess_bytes(&sample.bytes, target_length)
}

pub fn preprocess_bytes(bytes: &[u8], target_length: usize) -> Result<NormalizedSequence> {
    let v = normalize_bytes(bytes)?;
    let values = resample_linear(&v, target_length)?;
    Ok(NormalizedSequence {
        values,
        original_length: bytes.len(),
        target_length,
    })
}

/// Writes a cached sequence: magic, version, original and target lengths,
/// then the values as little-endian doubles.
pub fn write_cache(seq: &NormalizedSequence, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(28 + 8 * seq.values.len());
    buf.extend_from_slice(CACHE_MAGIC);
    buf.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(seq.original_length as u64).to_le_bytes());
    buf.extend_from_slice(&(seq.target_length as u64).to_le_bytes());
    for v in &seq.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<NormalizedSequence> {
    let mut buf = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    if buf.len() < 28 || &buf[..8] != CACHE_MAGIC {
        return Err(Error::Format(format!("{}: not a sequence cache", path.display())));
    }
    let version = u32::from_le_bytes(buf[8..12].try_into().unwrap());
    if version != CACHE_VERSION {
        return Err(Error::Format(format!("unsupported cache version {version}")));
    }
    let original_length = u64::from_le_bytes(buf[12..20].try_into().unwrap()) as usize;
    let target_length = u64::from_le_bytes(buf[20..28].try_into().unwrap()) as usize;
    let body = &buf[28..];
    if body.len() != 8 * target_length {
        return Err(Error::Format(format!(
            "cache truncated: {} value bytes for length {target_length}",
            body.len()
        )));
    }
    let values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(NormalizedSequence {
        values,
        original_length,
        target_length,
    })
}
