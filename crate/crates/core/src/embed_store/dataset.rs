//! Labeled datasets.
//!
//! On disk a dataset is a CSV file with a header row: `id`, `label`, an
//! optional `text` column, then zero or more embedding columns (any names,
//! conventionally `e0`, `e1`, ...). Fields containing `,` or `"` are quoted.

use std::collections::HashSet;
use std::fs::File;
use std::path::Path;

use super::EmbeddingMatrix;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    ids: Vec<String>,
    raw_texts: Option<Vec<String>>,
    embeddings: EmbeddingMatrix,
    labels: Vec<f64>,
}

impl LabeledDataset {
    pub fn new(
        ids: Vec<String>,
        raw_texts: Option<Vec<String>>,
        embeddings: EmbeddingMatrix,
        labels: Vec<f64>,
    ) -> Result<Self> {
        let n = embeddings.n_rows();
        let check = |context, found| {
            if found != n {
                Err(Error::DimensionMismatch {
                    context,
                    expected: n,
                    found,
                })
            } else {
                Ok(())
            }
        };
        check("dataset ids", ids.len())?;
        check("dataset labels", labels.len())?;
        if let Some(texts) = &raw_texts {
            check("dataset raw texts", texts.len())?;
        }
        let mut seen = HashSet::with_capacity(n);
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::invalid(format!("duplicate id {id:?}")));
            }
        }
        if let Some(row) = labels.iter().position(|l| !l.is_finite()) {
            return Err(Error::NonFinite { row, col: 0 });
        }
        embeddings.ensure_finite()?;
        Ok(Self {
            ids,
            raw_texts,
            embeddings,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn raw_texts(&self) -> Option<&[String]> {
        self.raw_texts.as_deref()
    }

    pub fn embeddings(&self) -> &EmbeddingMatrix {
        &self.embeddings
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Rows `indices`, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        let pick = |v: &[String]| indices.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
        Self::new(
            pick(&self.ids),
            self.raw_texts.as_deref().map(pick),
            self.embeddings.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
        )
    }

    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file)
    }

    pub fn read_csv(reader: impl std::io::Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::Malformed {
                row: 0,
                message: e.to_string(),
            })?
            .clone();
        if headers.get(0) != Some("id") || headers.get(1) != Some("label") {
            return Err(Error::Malformed {
                row: 0,
                message: "header must start with `id,label`".into(),
            });
        }
        let has_text = headers.get(2) == Some("text");
        let emb_start = if has_text { 3 } else { 2 };
        let dim = headers.len() - emb_start;

        let (mut ids, mut texts, mut labels, mut values) = (vec![], vec![], vec![], vec![]);
        for (row, record) in rdr.records().enumerate() {
            let record = record.map_err(|e| Error::Malformed {
                row,
                message: e.to_string(),
            })?;
            if record.len() != headers.len() {
                return Err(Error::Ragged {
                    row,
                    expected: headers.len(),
                    found: record.len(),
                });
            }
            let num = |col: usize| -> Result<f64> {
                let field = &record[col];
                let v: f64 = field.trim().parse().map_err(|_| Error::Malformed {
                    row,
                    message: format!("cannot parse {field:?} as a number"),
                })?;
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(Error::NonFinite { row, col })
                }
            };
            ids.push(record[0].to_string());
            labels.push(num(1)?);
            if has_text {
                texts.push(record[2].to_string());
            }
            for col in emb_start..headers.len() {
                values.push(num(col)?);
            }
        }
        let embeddings = EmbeddingMatrix::new(ids.len(), dim, values)?;
        Self::new(ids, has_text.then_some(texts), embeddings, labels)
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file).map_err(|e| Error::io(path, e))
    }

    pub fn write_csv(&self, writer: impl std::io::Write) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string(), "label".to_string()];
        if self.raw_texts.is_some() {
            header.push("text".into());
        }
        header.extend((0..self.embeddings.dim()).map(|j| format!("e{j}")));
        w.write_record(&header)?;
        for i in 0..self.len() {
            let mut rec = vec![self.ids[i].clone(), format!("{:?}", self.labels[i])];
            if let Some(t) = &self.raw_texts {
                rec.push(t[i].clone());
            }
            rec.extend(self.embeddings.row(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
        w.flush()
    }
}
