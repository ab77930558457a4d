//! `MODL1` container: string metadata plus named dense tensors.
//!
//! Layout (little-endian): magic `MODL1`, `u32` metadata count, then per
//! entry a key and a value string; `u32` tensor count, then per tensor a name
//! string, `u32 rows`, `u32 cols` and `rows*cols` row-major `f64` values.
//! Strings are a `u32` byte length followed by UTF-8.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::datasets::io_support::LeReader;
use crate::error::{Error, Result};
use crate::flatconf::FlatConfig;

pub const MODEL_MAGIC: &[u8; 5] = b"MODL1";

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Container {
    pub meta: FlatConfig,
    tensors: Vec<(String, DMatrix<f64>)>,
}

impl Container {
    pub fn new(meta: FlatConfig) -> Self {
        Self { meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: DMatrix<f64>) {
        self.tensors.push((name.into(), tensor));
    }

    pub fn tensor(&self, name: &str) -> Result<&DMatrix<f64>> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Usage(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn has_tensor(&self, name: &str) -> bool {
        self.tensors.iter().any(|(n, _)| n == name)
    }

    /// Tensor names in insertion order; the weight manifest.
    pub fn manifest(&self) -> Vec<(&str, usize, usize)> {
        self.tensors
            .iter()
            .map(|(n, t)| (n.as_str(), t.nrows(), t.ncols()))
            .collect()
    }

    /// Append another container's metadata and tensors.
    pub fn merge(&mut self, other: Container) {
        for key in other.meta.keys() {
            self.meta.set(key, other.meta.raw(key).unwrap_or_default());
        }
        self.tensors.extend(other.tensors);
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        out.write_all(MODEL_MAGIC)?;
        let keys: Vec<&str> = self.meta.keys().collect();
        write_u32(&mut out, keys.len())?;
        for key in keys {
            write_str(&mut out, key)?;
            write_str(&mut out, self.meta.raw(key).unwrap_or_default())?;
        }
        write_u32(&mut out, self.tensors.len())?;
        for (name, t) in &self.tensors {
            write_str(&mut out, name)?;
            write_u32(&mut out, t.nrows())?;
            write_u32(&mut out, t.ncols())?;
            for i in 0..t.nrows() {
                for j in 0..t.ncols() {
                    out.write_all(&t[(i, j)].to_le_bytes())?;
                }
            }
        }
        out.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = LeReader::new(BufReader::new(File::open(path)?), path);
        if &r.bytes::<5>()? != MODEL_MAGIC {
            return Err(r.malformed("bad magic, expected MODL1"));
        }
        let mut meta = FlatConfig::new();
        for _ in 0..r.u32()? {
            let key = r.string()?;
            let value = r.string()?;
            meta.set(&key, value);
        }
        let mut container = Container::new(meta);
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let mut values = Vec::with_capacity(rows * cols);
            for _ in 0..rows * cols {
                values.push(r.f64()?);
            }
            container.push(name, DMatrix::from_row_slice(rows, cols, &values));
        }
        r.expect_end()?;
        Ok(container)
    }
}

fn write_u32<W: Write>(out: &mut W, x: usize) -> Result<()> {
    let x = u32::try_from(x).map_err(|_| Error::Usage(format!("{x} exceeds u32 range")))?;
    out.write_all(&x.to_le_bytes())?;
    Ok(())
}

fn write_str<W: Write>(out: &mut W, s: &str) -> Result<()> {
    write_u32(out, s.len())?;
    out.write_all(s.as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        let mut meta = FlatConfig::new();
        meta.set("model.d_in", 3);
        let mut c = Container::new(meta);
        c.push("w", DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, -1e-300]));
        c.push("empty", DMatrix::zeros(0, 4));
        c.save(&path).unwrap();
        let back = Container::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.manifest(), vec![("w", 2, 3), ("empty", 0, 4)]);
    }

    #[test]
    fn rejects_feature_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.bin");
        std::fs::write(&path, b"ALCV1\0\0\0\0").unwrap();
        assert!(matches!(Container::load(&path).unwrap_err(), Error::Format { .. }));
    }
}
