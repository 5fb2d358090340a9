//! Per-modality feature sequences and the `MMFT` binary feature-file format.
//!
//! Layout (little-endian): magic `MMFT`, version `u32`, modality tag `u8`,
//! `num_steps u32`, `dim u32`, `num_steps * dim` `f32` values in row-major
//! order, then `num_steps` `u64` timestamps in milliseconds.

use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::binio::{put_u32, put_u64, write_atomic, Reader};
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: [u8; 4] = *b"MMFT";
pub const FEATURE_VERSION: u32 = 1;

/// Input modality of a feature stream or pooled vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[serde(rename = "visual_2d")]
    Visual2D,
    #[serde(rename = "visual_3d")]
    Visual3D,
    /// 2D and 3D visual vectors concatenated, 2D first.
    VisualConcat,
    Audio,
    Text,
}

impl Modality {
    pub fn tag(self) -> u8 {
        match self {
            Modality::Visual2D => 0,
            Modality::Visual3D => 1,
            Modality::Audio => 2,
            Modality::Text => 3,
            Modality::VisualConcat => 4,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            0 => Modality::Visual2D,
            1 => Modality::Visual3D,
            2 => Modality::Audio,
            3 => Modality::Text,
            4 => Modality::VisualConcat,
            other => return Err(Error::InvalidFile(format!("unknown modality tag {other}"))),
        })
    }

    /// Key used for this modality in manifests.
    pub fn key(self) -> &'static str {
        match self {
            Modality::Visual2D => "visual_2d",
            Modality::Visual3D => "visual_3d",
            Modality::VisualConcat => "visual_concat",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// A time-ordered sequence of fixed-dimension feature vectors for one clip
/// and one modality. Rows are time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub modality: Modality,
    pub values: Array2<f64>,
    pub timestamps_ms: Vec<u64>,
}

impl FeatureSequence {
    pub fn new(modality: Modality, values: Array2<f64>, timestamps_ms: Vec<u64>) -> Result<Self> {
        if timestamps_ms.len() != values.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} timestamps for {} steps",
                timestamps_ms.len(),
                values.nrows()
            )));
        }
        Ok(FeatureSequence {
            modality,
            values,
            timestamps_ms,
        })
    }

    /// Builds a sequence with timestamps `0, step_ms, 2*step_ms, ...`.
    pub fn uniform(modality: Modality, values: Array2<f64>, step_ms: u64) -> Self {
        let timestamps_ms = (0..values.nrows() as u64).map(|i| i * step_ms).collect();
        FeatureSequence {
            modality,
            values,
            timestamps_ms,
        }
    }

    /// Sequence from nested rows, timestamps one second apart.
    pub fn from_rows(modality: Modality, rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let values = Array2::from_shape_vec((rows.len(), dim), flat)
            .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        Ok(Self::uniform(modality, values, 1000))
    }

    pub fn num_steps(&self) -> usize {
        self.values.nrows()
    }

    pub fn dim(&self) -> usize {
        self.values.ncols()
    }

    /// Steps whose timestamps fall in the half-open window `[start_ms, end_ms)`.
    /// When no step falls inside, the single step nearest the window midpoint
    /// is returned (earliest on ties), so short spans still see their content.
    pub fn slice_time(&self, start_ms: u64, end_ms: u64) -> FeatureSequence {
        let idx: Vec<usize> = self
            .timestamps_ms
            .iter()
            .enumerate()
            .filter(|(_, &ts)| ts >= start_ms && ts < end_ms)
            .map(|(i, _)| i)
            .collect();
        let idx = if idx.is_empty() && !self.timestamps_ms.is_empty() {
            let mid = (start_ms + end_ms) as f64 / 2.0;
            let nearest = self
                .timestamps_ms
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da = (**a as f64 - mid).abs();
                    let db = (**b as f64 - mid).abs();
                    da.total_cmp(&db)
                })
                .map(|(i, _)| i)
                .unwrap();
            vec![nearest]
        } else {
            idx
        };
        self.select_steps(&idx)
    }

    pub(crate) fn select_steps(&self, idx: &[usize]) -> FeatureSequence {
        FeatureSequence {
            modality: self.modality,
            values: self.values.select(ndarray::Axis(0), idx),
            timestamps_ms: idx.iter().map(|&i| self.timestamps_ms[i]).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (steps, dim) = self.values.dim();
        let mut out = Vec::with_capacity(17 + steps * dim * 4 + steps * 8);
        out.extend_from_slice(&FEATURE_MAGIC);
        put_u32(&mut out, FEATURE_VERSION);
        out.push(self.modality.tag());
        put_u32(&mut out, steps as u32);
        put_u32(&mut out, dim as u32);
        for &v in self.values.iter() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &ts in &self.timestamps_ms {
            put_u64(&mut out, ts);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "feature file");
        let magic = r.magic()?;
        if magic != FEATURE_MAGIC {
            return Err(Error::BadMagic {
                expected: FEATURE_MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != FEATURE_VERSION {
            return Err(Error::VersionMismatch {
                expected: FEATURE_VERSION,
                found: version,
            });
        }
        let modality = Modality::from_tag(r.u8()?)?;
        let steps = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let count = steps
            .checked_mul(dim)
            .ok_or_else(|| Error::InvalidFile("feature shape overflows".into()))?;
        // Length check before allocating for a possibly corrupt header.
        if bytes.len() < 17 + count * 4 + steps * 8 {
            return Err(Error::TruncatedFile(format!(
                "feature file declares {steps}x{dim} values but has {} bytes",
                bytes.len()
            )));
        }
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            values.push(r.f32()? as f64);
        }
        let mut timestamps_ms = Vec::with_capacity(steps);
        for _ in 0..steps {
            timestamps_ms.push(r.u64()?);
        }
        if !r.is_empty() {
            return Err(Error::InvalidFile("trailing bytes after feature payload".into()));
        }
        let values = Array2::from_shape_vec((steps, dim), values)
            .map_err(|e| Error::InvalidFile(e.to_string()))?;
        FeatureSequence::new(modality, values, timestamps_ms)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// A single pooled vector tagged with its modality.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledFeature {
    pub modality: Modality,
    pub values: Array1<f64>,
}

impl PooledFeature {
    pub fn new(modality: Modality, values: Array1<f64>) -> Self {
        PooledFeature { modality, values }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}
