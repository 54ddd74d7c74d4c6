//! Dense symmetric matrices and their on-disk format.
//!
//! File layout: the 4 bytes `HESS`, the order `M` as a little-endian `u32`,
//! 8 reserved zero bytes (16-byte header in total), then `M * M`
//! little-endian IEEE-754 doubles in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"HESS";
const HEADER_LEN: usize = 16;

/// Tolerance used by the symmetry invariant: `max|A - A^T| <= SYMMETRY_TOL * (1 + max|A|)`.
pub const SYMMETRY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseSymmetric {
    data: Array2<f64>,
    /// Largest `|A_ij - A_ji|` seen before symmetrization.
    asymmetry: f64,
}

impl DenseSymmetric {
    /// Symmetrizes `a` as `(A + A^T) / 2`, recording the defect.
    pub fn from_square(a: Array2<f64>) -> Result<Self> {
        let (r, c) = a.dim();
        if r != c {
            return Err(Error::DimensionMismatch {
                expected: r,
                actual: c,
                context: "square matrix",
            });
        }
        let mut data = a;
        let mut defect = 0.0f64;
        for i in 0..r {
            for j in (i + 1)..r {
                let (x, y) = (data[[i, j]], data[[j, i]]);
                defect = defect.max((x - y).abs());
                let avg = 0.5 * (x + y);
                data[[i, j]] = avg;
                data[[j, i]] = avg;
            }
        }
        Ok(DenseSymmetric {
            data,
            asymmetry: defect,
        })
    }

    pub fn zeros(order: usize) -> Self {
        DenseSymmetric {
            data: Array2::zeros((order, order)),
            asymmetry: 0.0,
        }
    }

    pub fn identity(order: usize) -> Self {
        DenseSymmetric {
            data: Array2::eye(order),
            asymmetry: 0.0,
        }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut data = Array2::zeros((diag.len(), diag.len()));
        for (i, &d) in diag.iter().enumerate() {
            data[[i, i]] = d;
        }
        DenseSymmetric { data, asymmetry: 0.0 }
    }

    pub fn order(&self) -> usize {
        self.data.nrows()
    }

    pub fn asymmetry(&self) -> f64 {
        self.asymmetry
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.data.view()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[[i, j]]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        self.data.diag().sum()
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        self.data.dot(&ndarray::ArrayView1::from(v)).to_vec()
    }

    /// `self - other`.
    pub fn sub(&self, other: &DenseSymmetric) -> Result<DenseSymmetric> {
        if self.order() != other.order() {
            return Err(Error::DimensionMismatch {
                expected: self.order(),
                actual: other.order(),
                context: "matrix order",
            });
        }
        Ok(DenseSymmetric {
            data: &self.data - &other.data,
            asymmetry: 0.0,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let order = u32::try_from(self.order())
            .map_err(|_| Error::InvalidArgument("matrix order exceeds u32".into()))?;
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        w.write_all(&order.to_le_bytes())?;
        w.write_all(&[0u8; HEADER_LEN - 8])?;
        for v in self.data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a matrix written by [`DenseSymmetric::write`], re-symmetrizing
    /// and recording any asymmetry found in the file.
    pub fn read(path: &Path) -> Result<Self> {
        let parse_err = |offset: u64, message: String| Error::Parse {
            path: path.to_path_buf(),
            offset,
            message,
        };
        let mut bytes = Vec::new();
        BufReader::new(File::open(path)?).read_to_end(&mut bytes)?;
        if bytes.len() < HEADER_LEN {
            return Err(parse_err(bytes.len() as u64, "truncated header".into()));
        }
        if &bytes[..4] != MAGIC {
            return Err(parse_err(0, "bad magic, expected HESS".into()));
        }
        let order = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let expected = HEADER_LEN + order * order * 8;
        if bytes.len() != expected {
            return Err(parse_err(
                bytes.len().min(expected) as u64,
                format!("expected {expected} bytes for order {order}, found {}", bytes.len()),
            ));
        }
        let values: Vec<f64> = bytes[HEADER_LEN..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        DenseSymmetric::from_square(Array2::from_shape_vec((order, order), values).unwrap())
    }
}
