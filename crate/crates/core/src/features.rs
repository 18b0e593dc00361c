//! Dense row-major feature tables.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[repr(u8)]
pub enum FeatureRole {
    TokenHidden = 0,
    ImageEmbedding = 1,
    SentenceCls = 2,
    /// Probability rows, one distribution per row.
    Probability = 3,
}

impl FeatureRole {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(Self::TokenHidden),
            1 => Some(Self::ImageEmbedding),
            2 => Some(Self::SentenceCls),
            3 => Some(Self::Probability),
            _ => None,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("feature table has {len} values, expected {rows} x {dim}")]
    Shape { rows: usize, dim: usize, len: usize },
    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },
}

/// Feature rows stored at 32-bit precision.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: usize,
    dim: usize,
    role: FeatureRole,
    values: Vec<f32>,
}

impl FeatureMatrix {
    pub fn new(
        rows: usize,
        dim: usize,
        role: FeatureRole,
        values: Vec<f32>,
    ) -> Result<Self, FeatureError> {
        if values.len() != rows * dim {
            return Err(FeatureError::Shape {
                rows,
                dim,
                len: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite {
                row: i / dim.max(1),
                col: i % dim.max(1),
            });
        }
        Ok(Self {
            rows,
            dim,
            role,
            values,
        })
    }

    /// Builds a matrix from 64-bit rows, rounding each value to 32 bits.
    pub fn from_rows_f64(rows: &[Vec<f64>], role: FeatureRole) -> Result<Self, FeatureError> {
        let dim = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(FeatureError::Shape {
                    rows: rows.len(),
                    dim,
                    len: values.len() + r.len(),
                });
            }
            values.extend(r.iter().map(|&v| v as f32));
        }
        Self::new(rows.len(), dim, role, values)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn role(&self) -> FeatureRole {
        self.role
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_f64(&self, i: usize) -> Vec<f64> {
        self.row(i).iter().map(|&v| f64::from(v)).collect()
    }

    /// Rows `start..end` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> FeatureMatrix {
        FeatureMatrix {
            rows: end - start,
            dim: self.dim,
            role: self.role,
            values: self.values[start * self.dim..end * self.dim].to_vec(),
        }
    }
}
