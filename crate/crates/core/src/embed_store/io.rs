//! Matrix persistence.
//!
//! `bin`: magic `ICRLEMB1`, then `n_rows` and `dim` as little-endian `u64`,
//! then row-major little-endian IEEE-754 `f64`. Lossless.
//!
//! `csv`: no header, `,` separator, one row per line. Values are written in
//! shortest round-trip form, so reloading is also bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use super::EmbeddingMatrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ICRLEMB1";
const HEADER_LEN: usize = 24;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Csv,
    Bin,
}

impl MatrixFormat {
    /// `.csv` → Csv, anything else → Bin.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => MatrixFormat::Csv,
            _ => MatrixFormat::Bin,
        }
    }
}

impl FromStr for MatrixFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "bin" => Ok(Self::Bin),
            other => Err(Error::invalid(format!("unknown matrix format {other:?}"))),
        }
    }
}

pub fn load_matrix(path: impl AsRef<Path>, format: MatrixFormat) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    match format {
        MatrixFormat::Bin => decode_bin(&bytes),
        MatrixFormat::Csv => {
            let text = std::str::from_utf8(&bytes).map_err(|e| Error::Malformed {
                row: 0,
                message: format!("not utf-8: {e}"),
            })?;
            parse_csv(text)
        }
    }
}

pub fn save_matrix(m: &EmbeddingMatrix, path: impl AsRef<Path>, format: MatrixFormat) -> Result<()> {
    let path = path.as_ref();
    let bytes = match format {
        MatrixFormat::Bin => encode_bin(m),
        MatrixFormat::Csv => render_csv(m).into_bytes(),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Load with the format inferred from the extension.
pub fn load_matrix_auto(path: impl AsRef<Path>) -> Result<EmbeddingMatrix> {
    let path = path.as_ref();
    load_matrix(path, MatrixFormat::from_path(path))
}

pub fn save_matrix_auto(m: &EmbeddingMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    save_matrix(m, path, MatrixFormat::from_path(path))
}

pub fn encode_bin(m: &EmbeddingMatrix) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.values().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.n_rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.dim() as u64).to_le_bytes());
    for v in m.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_bin(bytes: &[u8]) -> Result<EmbeddingMatrix> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != MAGIC {
        return Err(Error::Malformed {
            row: 0,
            message: "missing ICRLEMB1 header".into(),
        });
    }
    let read_u64 = |at: usize| u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
    let (n_rows, dim) = (read_u64(8), read_u64(16));
    let payload = &bytes[HEADER_LEN..];
    let expected = n_rows
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(8))
        .filter(|&n| n == payload.len() as u64);
    if expected.is_none() {
        return Err(Error::Malformed {
            row: 0,
            message: format!(
                "payload of {} bytes does not hold {n_rows}x{dim} values",
                payload.len()
            ),
        });
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let m = EmbeddingMatrix::new(n_rows as usize, dim as usize, values)?;
    m.ensure_finite()?;
    Ok(m)
}

pub fn parse_csv(text: &str) -> Result<EmbeddingMatrix> {
    let mut values = Vec::new();
    let mut dim = None;
    let mut n_rows = 0;
    for (row, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut count = 0;
        for (col, field) in line.split(',').enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| Error::Malformed {
                row,
                message: format!("cannot parse {field:?} as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::NonFinite { row, col });
            }
            values.push(v);
            count += 1;
        }
        match dim {
            None => dim = Some(count),
            Some(d) if d != count => {
                return Err(Error::Ragged {
                    row,
                    expected: d,
                    found: count,
                })
            }
            _ => {}
        }
        n_rows += 1;
    }
    EmbeddingMatrix::new(n_rows, dim.unwrap_or(0), values)
}

pub fn render_csv(m: &EmbeddingMatrix) -> String {
    let mut out = String::new();
    for row in m.rows() {
        for (j, v) in row.iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v:?}").unwrap();
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn csv_direct_transcription() {
        let m = parse_csv("1.0,2.0\n3.0,4.0").unwrap();
        assert_eq!(m, EmbeddingMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap());
    }

    #[test]
    fn csv_nan_rejected_at_row_zero() {
        let err = parse_csv("nan,1.0\n2.0,3.0").unwrap_err();
        assert!(matches!(err, Error::NonFinite { row: 0, col: 0 }), "{err}");
    }

    #[test]
    fn csv_ragged_names_row() {
        let err = parse_csv("1,2\n3\n").unwrap_err();
        assert!(matches!(err, Error::Ragged { row: 1, expected: 2, found: 1 }));
    }

    #[test]
    fn csv_garbage_is_malformed() {
        assert!(matches!(parse_csv("1,x").unwrap_err(), Error::Malformed { row: 0, .. }));
    }

    #[test]
    fn bin_layout_is_pinned() {
        let m = EmbeddingMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        let bytes = encode_bin(&m);
        assert_eq!(&bytes[..8], b"ICRLEMB1");
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &2u64.to_le_bytes());
        assert_eq!(&bytes[24..32], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 24 + 32);
        assert_eq!(decode_bin(&bytes).unwrap(), m);
    }

    #[test]
    fn bin_empty_matrix_keeps_dims() {
        let m = EmbeddingMatrix::zeros(0, 7);
        let back = decode_bin(&encode_bin(&m)).unwrap();
        assert_eq!((back.n_rows(), back.dim()), (0, 7));
    }

    #[test]
    fn bin_rejects_non_finite_and_truncation() {
        let mut bytes = encode_bin(&EmbeddingMatrix::from_rows(&[[1.0], [2.0]]).unwrap());
        bytes[32..40].copy_from_slice(&f64::INFINITY.to_le_bytes());
        assert!(matches!(decode_bin(&bytes).unwrap_err(), Error::NonFinite { row: 1, col: 0 }));
        bytes.pop();
        assert!(decode_bin(&bytes).is_err());
    }

    #[test]
    fn save_to_unwritable_path_fails() {
        let m = EmbeddingMatrix::from_rows(&[[1.0]]).unwrap();
        let err = save_matrix(&m, "/nonexistent-dir/x/m.bin", MatrixFormat::Bin).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn file_round_trip_one_by_three() {
        let dir = tempfile::tempdir().unwrap();
        let m = EmbeddingMatrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        for (name, fmt) in [("m.bin", MatrixFormat::Bin), ("m.csv", MatrixFormat::Csv)] {
            let p = dir.path().join(name);
            save_matrix(&m, &p, fmt).unwrap();
            assert_eq!(load_matrix(&p, fmt).unwrap(), m);
            assert_eq!(MatrixFormat::from_path(&p), fmt);
        }
    }

    fn finite_matrix() -> impl Strategy<Value = EmbeddingMatrix> {
        (0usize..6, 1usize..6).prop_flat_map(|(n, d)| {
            proptest::collection::vec(
                prop_oneof![
                    any::<f64>().prop_filter("finite", |v| v.is_finite()),
                    -1e3f64..1e3,
                ],
                n * d,
            )
            .prop_map(move |v| EmbeddingMatrix::new(n, d, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn bin_round_trip_is_bit_exact(m in finite_matrix()) {
            let back = decode_bin(&encode_bin(&m)).unwrap();
            let a: Vec<u64> = m.values().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = back.values().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!((back.n_rows(), back.dim()), (m.n_rows(), m.dim()));
        }

        #[test]
        fn csv_round_trip_is_exact(m in finite_matrix()) {
            prop_assume!(m.n_rows() > 0);
            let back = parse_csv(&render_csv(&m)).unwrap();
            prop_assert_eq!(back, m);
        }
    }
}
