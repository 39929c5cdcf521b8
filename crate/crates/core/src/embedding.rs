//! Row-major embedding matrices and their on-disk form: a raw little-endian
//! `f32` file plus a JSON sidecar listing the record of each row.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::DatasetRecord;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    rows: usize,
    dim: usize,
    data: Vec<f32>,
}

impl Embeddings {
    pub fn new(rows: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * dim {
            return Err(Error::Shape(format!("{} values for a {rows} x {dim} matrix", data.len())));
        }
        Ok(Self { rows, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Shape(format!("row {bad} has length {} instead of {dim}", rows[bad].len())));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        let data = rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        Self { rows: rows.len(), dim: self.dim, data }
    }

    pub fn append(&mut self, other: &Embeddings) -> Result<()> {
        if self.rows > 0 && other.rows > 0 && other.dim != self.dim {
            return Err(Error::Shape(format!("cannot append {}-d rows to {}-d rows", other.dim, self.dim)));
        }
        if self.rows == 0 {
            self.dim = other.dim;
        }
        self.rows += other.rows;
        self.data.extend_from_slice(&other.data);
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    rows: usize,
    dim: usize,
    dtype: String,
    byte_order: String,
    records: Vec<DatasetRecord>,
}

/// `embeddings.bin` -> `embeddings.json`.
pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn write_embeddings(bin: &Path, emb: &Embeddings, records: &[DatasetRecord]) -> Result<()> {
    if records.len() != emb.rows {
        return Err(Error::Shape(format!("{} records for {} embedding rows", records.len(), emb.rows)));
    }
    let bytes: Vec<u8> = emb.data.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(bin, bytes).map_err(|e| Error::io(bin, e))?;
    let sidecar = Sidecar {
        rows: emb.rows,
        dim: emb.dim,
        dtype: "f32".into(),
        byte_order: "little".into(),
        records: records.to_vec(),
    };
    let json_path = sidecar_path(bin);
    let text = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::json(json_path.display().to_string(), e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))
}

pub fn read_embeddings(bin: &Path) -> Result<(Embeddings, Vec<DatasetRecord>)> {
    let json_path = sidecar_path(bin);
    let text = fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sidecar: Sidecar = serde_json::from_str(&text).map_err(|e| Error::json(json_path.display().to_string(), e))?;
    let bytes = fs::read(bin).map_err(|e| Error::io(bin, e))?;
    let expected = sidecar.rows * sidecar.dim * 4;
    if bytes.len() != expected || sidecar.records.len() != sidecar.rows {
        return Err(Error::Shape(format!(
            "{}: {} bytes and {} records, expected {expected} bytes and {} records",
            bin.display(),
            bytes.len(),
            sidecar.records.len(),
            sidecar.rows
        )));
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((Embeddings::new(sidecar.rows, sidecar.dim, data)?, sidecar.records))
}
