//! Wire formats for matrices, flags, orthogonal systems, flag curves, and
//! transport results.
//!
//! Every payload is JSON built from one shared matrix encoding:
//!
//! ```json
//! {"rows": 2, "cols": 2, "data": [[1.0, 0.0], [0.0, -0.5], [0.0, 0.5], [1.0, 0.0]]}
//! ```
//!
//! `data` lists `[re, im]` pairs in row-major order and must contain exactly
//! `rows * cols` entries, all finite. Flags are `{"dim": m, "projections":
//! [matrix, ...]}`, orthogonal systems `{"blocks": [matrix, ...]}`, curves
//! `{"template": flag, "samples": [flag, ...]}`, and transport results
//! `{"u": matrix, "max_vertical_residual": r, "final_flag_residual": s}`.
//!
//! This module checks syntax and shape only: parsers reject malformed JSON,
//! unknown fields, size mismatches, and non-finite entries, and hand back raw
//! matrices. Whether those matrices actually form idempotents, flags, or
//! orthogonal chains is the business of the constructors in [`crate::flag`]
//! and [`crate::idempotent`], so callers can tell a broken file from sound
//! JSON describing out-of-domain data.

use nalgebra::{Complex, DMatrix};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flag::Flag;
use crate::scalar::RealScalar;
use crate::stiefel::Transport;
use crate::CMatrix;

/// Shape-level failures while decoding a payload.
#[derive(Debug, Error)]
pub enum JsonError {
    /// The text is not valid JSON for the expected shape.
    #[error("malformed JSON: {0}")]
    Syntax(#[from] serde_json::Error),
    /// `data` does not hold exactly `rows * cols` entries.
    #[error("matrix data holds {got} entries, expected {rows} x {cols} = {expected}")]
    LengthMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
        got: usize,
    },
    /// An entry is NaN or infinite.
    #[error("matrix entry {index} is not finite")]
    NonFinite { index: usize },
    /// A matrix with zero rows or columns.
    #[error("matrix must have at least one row and one column")]
    EmptyMatrix,
    /// A flag with no projections.
    #[error("flag must list at least one projection")]
    EmptyFlag,
    /// An orthogonal system with no blocks.
    #[error("orthogonal system must list at least one block")]
    EmptySystem,
    /// A curve with no samples.
    #[error("curve must list at least one sample")]
    EmptyCurve,
    /// A projection or block whose shape disagrees with the declared
    /// ambient dimension.
    #[error("entry {index} is {rows} x {cols}, expected {dim} x {dim}")]
    ShapeMismatch {
        index: usize,
        rows: usize,
        cols: usize,
        dim: usize,
    },
}

/// Shared matrix encoding: row-major `[re, im]` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixJson {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<[f64; 2]>,
}

impl MatrixJson {
    /// Encode a matrix. Entries are carried through `f64`, which is exact
    /// for both supported scalars.
    pub fn from_matrix<S: RealScalar>(m: &CMatrix<S>) -> Self {
        let mut data = Vec::with_capacity(m.nrows() * m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                let z = m[(i, j)];
                data.push([z.re.as_f64(), z.im.as_f64()]);
            }
        }
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    /// Decode into a dense matrix, rejecting size mismatches and
    /// non-finite entries.
    pub fn to_matrix<S: RealScalar>(&self) -> Result<CMatrix<S>, JsonError> {
        if self.rows == 0 || self.cols == 0 {
            return Err(JsonError::EmptyMatrix);
        }
        let expected = self.rows * self.cols;
        if self.data.len() != expected {
            return Err(JsonError::LengthMismatch {
                rows: self.rows,
                cols: self.cols,
                expected,
                got: self.data.len(),
            });
        }
        for (index, [re, im]) in self.data.iter().enumerate() {
            if !re.is_finite() || !im.is_finite() {
                return Err(JsonError::NonFinite { index });
            }
        }
        Ok(DMatrix::from_fn(self.rows, self.cols, |i, j| {
            let [re, im] = self.data[i * self.cols + j];
            Complex::new(S::from_double(re), S::from_double(im))
        }))
    }
}

/// A flag as its chain of projections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlagJson {
    pub dim: usize,
    pub projections: Vec<MatrixJson>,
}

impl FlagJson {
    pub fn from_flag<S: RealScalar>(flag: &Flag<S>) -> Self {
        Self {
            dim: flag.dim(),
            projections: flag.projections().iter().map(MatrixJson::from_matrix).collect(),
        }
    }

    /// Decode the projection chain as raw matrices, checking each is
    /// `dim x dim`. Idempotency and chain order are left to
    /// [`crate::flag::make_flag`].
    pub fn to_projection_matrices<S: RealScalar>(&self) -> Result<Vec<CMatrix<S>>, JsonError> {
        if self.dim == 0 {
            return Err(JsonError::EmptyMatrix);
        }
        if self.projections.is_empty() {
            return Err(JsonError::EmptyFlag);
        }
        self.projections
            .iter()
            .enumerate()
            .map(|(index, p)| {
                if p.rows != self.dim || p.cols != self.dim {
                    return Err(JsonError::ShapeMismatch {
                        index,
                        rows: p.rows,
                        cols: p.cols,
                        dim: self.dim,
                    });
                }
                p.to_matrix()
            })
            .collect()
    }
}

/// A complete orthogonal system as its list of blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemJson {
    pub blocks: Vec<MatrixJson>,
}

impl SystemJson {
    pub fn from_blocks<S: RealScalar>(blocks: &[CMatrix<S>]) -> Self {
        Self {
            blocks: blocks.iter().map(MatrixJson::from_matrix).collect(),
        }
    }

    /// Decode the blocks as raw square matrices of one common dimension.
    pub fn to_block_matrices<S: RealScalar>(&self) -> Result<Vec<CMatrix<S>>, JsonError> {
        if self.blocks.is_empty() {
            return Err(JsonError::EmptySystem);
        }
        let dim = self.blocks[0].rows;
        self.blocks
            .iter()
            .enumerate()
            .map(|(index, b)| {
                if b.rows != dim || b.cols != dim {
                    return Err(JsonError::ShapeMismatch {
                        index,
                        rows: b.rows,
                        cols: b.cols,
                        dim,
                    });
                }
                b.to_matrix()
            })
            .collect()
    }
}

/// A sampled curve of flags, all sharing the template's signature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurveJson {
    pub template: FlagJson,
    pub samples: Vec<FlagJson>,
}

impl CurveJson {
    pub fn validate(&self) -> Result<(), JsonError> {
        if self.samples.is_empty() {
            return Err(JsonError::EmptyCurve);
        }
        Ok(())
    }
}

/// Transport output: the carried frame plus its diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransportJson {
    pub u: MatrixJson,
    pub max_vertical_residual: f64,
    pub final_flag_residual: f64,
}

impl TransportJson {
    pub fn from_transport<S: RealScalar>(t: &Transport<S>) -> Self {
        Self {
            u: MatrixJson::from_matrix(&t.u),
            max_vertical_residual: t.max_vertical_residual.as_f64(),
            final_flag_residual: t.final_flag_residual.as_f64(),
        }
    }
}

/// Parse a matrix payload from text.
pub fn matrix_from_str<S: RealScalar>(text: &str) -> Result<CMatrix<S>, JsonError> {
    serde_json::from_str::<MatrixJson>(text)?.to_matrix()
}

/// Encode a matrix as a JSON string. Infallible for finite entries, which
/// is every matrix this library produces.
pub fn matrix_to_string<S: RealScalar>(m: &CMatrix<S>) -> String {
    serde_json::to_string(&MatrixJson::from_matrix(m)).expect("matrix serialization cannot fail")
}

/// Parse a flag payload from text into its raw projection matrices.
pub fn flag_from_str<S: RealScalar>(text: &str) -> Result<Vec<CMatrix<S>>, JsonError> {
    serde_json::from_str::<FlagJson>(text)?.to_projection_matrices()
}

/// Parse a curve payload from text, keeping the wire structure. Sample
/// count is checked; everything else is decoded lazily by the caller.
pub fn curve_from_str(text: &str) -> Result<CurveJson, JsonError> {
    let curve: CurveJson = serde_json::from_str(text)?;
    curve.validate()?;
    Ok(curve)
}
