//! Phonetic posteriorgram data model, file formats, greedy decoding and
//! token construction for the three embedding modes.

mod decode;
mod io;
pub mod tokens;

pub use decode::{greedy_decode, run_length_encode};
pub use io::{
    parse_alignment, parse_inventory, parse_manifest, parse_ppg_file, write_alignment,
    write_inventory, write_manifest, write_ppg_file,
};
pub use tokens::{average_ppg, build_tokens, TokenContent, TokenizedInput};

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Tolerance on a row sum of a stored posteriorgram.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Ordered, unique phone labels; the position of a label is its index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhoneInventory {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl PhoneInventory {
    pub fn new(symbols: Vec<String>) -> Result<Self> {
        if symbols.len() < 2 {
            return Err(Error::Input(format!(
                "phone inventory needs at least 2 symbols, got {}",
                symbols.len()
            )));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if s.is_empty() || s.chars().any(char::is_whitespace) {
                return Err(Error::Input(format!("invalid phone symbol `{s}`")));
            }
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::Input(format!("duplicate phone symbol `{s}`")));
            }
        }
        Ok(Self { symbols, index })
    }

    /// Inventory of `n` generated symbols `p0 .. p{n-1}`.
    pub fn numbered(n: usize) -> Result<Self> {
        Self::new((0..n).map(|i| format!("p{i}")).collect())
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(String::as_str)
    }

    pub fn index_of(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }
}

/// A T×P matrix of per-frame phone posteriors, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorGram {
    frames: usize,
    phones: usize,
    values: Vec<f64>,
    frame_shift_ms: f64,
}

impl PosteriorGram {
    /// Builds a posteriorgram, checking that every row is a probability vector.
    pub fn new(frames: usize, phones: usize, values: Vec<f64>, frame_shift_ms: f64) -> Result<Self> {
        if frames == 0 {
            return Err(Error::Input("posteriorgram has no frames".into()));
        }
        if phones < 2 {
            return Err(Error::Input("posteriorgram needs at least 2 phones".into()));
        }
        if values.len() != frames * phones {
            return Err(Error::Input(format!(
                "posteriorgram data has {} values, expected {}",
                values.len(),
                frames * phones
            )));
        }
        if !(frame_shift_ms.is_finite() && frame_shift_ms > 0.0) {
            return Err(Error::Input(format!("invalid frame shift {frame_shift_ms}")));
        }
        for (t, row) in values.chunks_exact(phones).enumerate() {
            if let Some(v) = row.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::Input(format!("frame {t}: value {v} outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Input(format!("frame {t}: row sum {sum}")));
            }
        }
        Ok(Self {
            frames,
            phones,
            values,
            frame_shift_ms,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], frame_shift_ms: f64) -> Result<Self> {
        let phones = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != phones) {
            return Err(Error::Input("ragged posteriorgram rows".into()));
        }
        Self::new(rows.len(), phones, rows.concat(), frame_shift_ms)
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn phones(&self) -> usize {
        self.phones
    }

    pub fn frame_shift_ms(&self) -> f64 {
        self.frame_shift_ms
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.phones..(t + 1) * self.phones]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.phones)
    }

    /// Frames `[start, end)` as a new posteriorgram.
    pub fn slice(&self, start: usize, end: usize) -> PosteriorGram {
        assert!(start < end && end <= self.frames, "frame range out of bounds");
        PosteriorGram {
            frames: end - start,
            phones: self.phones,
            values: self.values[start * self.phones..end * self.phones].to_vec(),
            frame_shift_ms: self.frame_shift_ms,
        }
    }
}

/// A phone occupying frames `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PhoneSegment {
    pub phone: usize,
    pub start: usize,
    pub end: usize,
}

impl PhoneSegment {
    pub fn new(phone: usize, start: usize, end: usize) -> Self {
        Self { phone, start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }
}

/// Checks that `segs` tile `[0, frames)` in order with no gap or overlap and
/// that every phone index is below `phones`.
pub fn validate_segments(segs: &[PhoneSegment], frames: usize, phones: usize) -> Result<()> {
    if segs.is_empty() {
        return Err(Error::Alignment("empty segment list".into()));
    }
    let mut cursor = 0;
    for (i, s) in segs.iter().enumerate() {
        if s.phone >= phones {
            return Err(Error::Alignment(format!(
                "segment {i}: phone index {} out of range",
                s.phone
            )));
        }
        if s.start >= s.end {
            return Err(Error::Alignment(format!(
                "segment {i}: empty range [{}, {})",
                s.start, s.end
            )));
        }
        if s.start > cursor {
            return Err(Error::Alignment(format!(
                "gap between frame {cursor} and {} at segment {i}",
                s.start
            )));
        }
        if s.start < cursor {
            return Err(Error::Alignment(format!(
                "segment {i} starting at {} overlaps previous segment ending at {cursor}",
                s.start
            )));
        }
        if s.end > frames {
            return Err(Error::Alignment(format!(
                "segment {i} ends at {} beyond {frames} frames",
                s.end
            )));
        }
        cursor = s.end;
    }
    if cursor != frames {
        return Err(Error::Alignment(format!(
            "segments end at frame {cursor}, expected {frames}"
        )));
    }
    Ok(())
}

/// Token embedding strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// One token per frame, content is the frame's posterior vector.
    PpgFrm,
    /// One token per phone segment, content is a vocabulary id.
    PhoneEmb,
    /// One token per phone segment, content is the segment-averaged posterior.
    AvPpg,
}

impl EmbeddingMode {
    pub fn is_vector(self) -> bool {
        !matches!(self, EmbeddingMode::PhoneEmb)
    }

    pub fn needs_segments(self) -> bool {
        !matches!(self, EmbeddingMode::PpgFrm)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingMode::PpgFrm => "ppg_frm",
            EmbeddingMode::PhoneEmb => "phone_emb",
            EmbeddingMode::AvPpg => "avppg",
        }
    }
}

impl fmt::Display for EmbeddingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EmbeddingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ppg_frm" => Ok(EmbeddingMode::PpgFrm),
            "phone_emb" => Ok(EmbeddingMode::PhoneEmb),
            "avppg" => Ok(EmbeddingMode::AvPpg),
            other => Err(Error::Config(format!(
                "unknown embedding `{other}` (expected ppg_frm, phone_emb or avppg)"
            ))),
        }
    }
}

/// One row of a data manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub id: String,
    pub label: usize,
    pub ppg_path: PathBuf,
    pub align_path: Option<PathBuf>,
}
