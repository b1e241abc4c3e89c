use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    n_rows: usize,
    dim: usize,
    values: Vec<f64>,
}

impl EmbeddingMatrix {
    pub fn new(n_rows: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        let expected = n_rows
            .checked_mul(dim)
            .ok_or_else(|| Error::invalid("matrix dimensions overflow"))?;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                context: "matrix value count",
                expected,
                found: values.len(),
            });
        }
        Ok(Self {
            n_rows,
            dim,
            values,
        })
    }

    pub fn zeros(n_rows: usize, dim: usize) -> Self {
        Self {
            n_rows,
            dim,
            values: vec![0.0; n_rows * dim],
        }
    }

    /// Build from row vectors; an empty slice gives a 0×0 matrix.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let mut values = Vec::with_capacity(rows.len() * dim);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != dim {
                return Err(Error::Ragged {
                    row: i,
                    expected: dim,
                    found: r.len(),
                });
            }
            values.extend_from_slice(r);
        }
        Self::new(rows.len(), dim, values)
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        (0..self.n_rows).map(move |i| self.row(i))
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.dim + col]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.rows().map(|r| r[j]).collect()
    }

    /// New matrix holding the given rows, in order.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.dim);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            n_rows: indices.len(),
            dim: self.dim,
            values,
        }
    }

    /// Append the rows of `other` below `self`.
    pub fn vstack(&self, other: &EmbeddingMatrix) -> Result<Self> {
        if self.n_rows > 0 && other.n_rows > 0 && self.dim != other.dim {
            return Err(Error::DimensionMismatch {
                context: "vstack",
                expected: self.dim,
                found: other.dim,
            });
        }
        let dim = if self.n_rows > 0 { self.dim } else { other.dim };
        let mut values = self.values.clone();
        values.extend_from_slice(&other.values);
        Self::new(self.n_rows + other.n_rows, dim, values)
    }

    pub fn transpose(&self) -> Self {
        let mut values = vec![0.0; self.values.len()];
        for i in 0..self.n_rows {
            for j in 0..self.dim {
                values[j * self.n_rows + i] = self.values[i * self.dim + j];
            }
        }
        Self {
            n_rows: self.dim,
            dim: self.n_rows,
            values,
        }
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &EmbeddingMatrix) -> Result<Self> {
        if self.dim != rhs.n_rows {
            return Err(Error::DimensionMismatch {
                context: "matmul inner dimension",
                expected: self.dim,
                found: rhs.n_rows,
            });
        }
        let mut out = Self::zeros(self.n_rows, rhs.dim);
        for i in 0..self.n_rows {
            let lhs = self.row(i);
            let acc = &mut out.values[i * rhs.dim..(i + 1) * rhs.dim];
            for (k, &a) in lhs.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &w) in acc.iter_mut().zip(rhs.row(k)) {
                    *o += a * w;
                }
            }
        }
        Ok(out)
    }

    /// First non-finite entry, if any.
    pub fn find_non_finite(&self) -> Option<(usize, usize)> {
        if self.dim == 0 {
            return None;
        }
        self.values
            .iter()
            .position(|v| !v.is_finite())
            .map(|p| (p / self.dim, p % self.dim))
    }

    pub fn ensure_finite(&self) -> Result<()> {
        match self.find_non_finite() {
            Some((row, col)) => Err(Error::NonFinite { row, col }),
            None => Ok(()),
        }
    }
}
