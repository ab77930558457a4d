//! On-disk feature formats.
//!
//! CSV: header `id,label,f0,...,f{d-1}`, label empty for unlabeled rows.
//!
//! Binary (little-endian): magic `ALCV1`, `u32 n`, `u32 d`, `u8 has_labels`,
//! `n*d` `f32` values, then `n` `u16` labels when labeled, then `n` ids each
//! as a `u32` byte length followed by UTF-8 bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use super::FeatureMatrix;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 5] = b"ALCV1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    Csv,
    Binary,
}

impl FeatureFormat {
    /// `.csv` is CSV, anything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => FeatureFormat::Csv,
            _ => FeatureFormat::Binary,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            FeatureFormat::Csv => "csv",
            FeatureFormat::Binary => "bin",
        }
    }
}

impl FromStr for FeatureFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "csv" => Ok(FeatureFormat::Csv),
            "binary" | "bin" => Ok(FeatureFormat::Binary),
            other => Err(Error::Config(format!("unknown feature format {other:?}; valid: csv, binary"))),
        }
    }
}

pub fn save_features(data: &FeatureMatrix, path: &Path, format: FeatureFormat) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    match format {
        FeatureFormat::Csv => write_csv(data, &mut out)?,
        FeatureFormat::Binary => write_binary(data, &mut out)?,
    }
    out.flush()?;
    Ok(())
}

pub fn load_features(path: &Path, format: FeatureFormat) -> Result<FeatureMatrix> {
    let file = File::open(path)?;
    match format {
        FeatureFormat::Csv => read_csv(BufReader::new(file)),
        FeatureFormat::Binary => read_binary(BufReader::new(file), path),
    }
}

fn write_csv<W: Write>(data: &FeatureMatrix, out: &mut W) -> Result<()> {
    let mut header = String::from("id,label");
    for j in 0..data.d() {
        header.push_str(&format!(",f{j}"));
    }
    writeln!(out, "{header}")?;
    for i in 0..data.n() {
        let id = &data.ids()[i];
        if id.contains([',', '"', '\n', '\r']) {
            return Err(Error::Ingestion {
                row: i,
                message: format!("id {id:?} cannot be written to CSV unquoted"),
            });
        }
        write!(out, "{id},")?;
        if let Some(labels) = data.labels() {
            write!(out, "{}", labels[i])?;
        }
        for v in data.row(i) {
            // Display prints the shortest string that parses back to the same f64.
            write!(out, ",{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

fn read_csv<R: Read>(input: R) -> Result<FeatureMatrix> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(input);
    let header = reader
        .headers()
        .map_err(|e| Error::Ingestion { row: 0, message: format!("unreadable header: {e}") })?
        .clone();
    if header.len() < 2 || &header[0] != "id" || &header[1] != "label" {
        return Err(Error::Ingestion {
            row: 0,
            message: "header must start with id,label".into(),
        });
    }
    let d = header.len() - 2;
    let mut ids = Vec::new();
    let mut values = Vec::new();
    let mut labels: Vec<Option<usize>> = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Ingestion { row, message: e.to_string() })?;
        if record.len() != d + 2 {
            return Err(Error::Ingestion {
                row,
                message: format!("expected {d} features, found {}", record.len().saturating_sub(2)),
            });
        }
        ids.push(record[0].to_string());
        let label = record[1].trim();
        labels.push(if label.is_empty() {
            None
        } else {
            Some(label.parse().map_err(|_| Error::Ingestion {
                row,
                message: format!("unparseable label {label:?}"),
            })?)
        });
        for field in record.iter().skip(2) {
            values.push(field.trim().parse::<f64>().map_err(|_| Error::Ingestion {
                row,
                message: format!("unparseable feature value {field:?}"),
            })?);
        }
    }
    let labels = match labels.iter().position(Option::is_none) {
        None if !labels.is_empty() => Some(labels.into_iter().flatten().collect()),
        None => None,
        Some(_) if labels.iter().all(Option::is_none) => None,
        Some(_) => {
            let row = labels.iter().position(Option::is_some).unwrap_or(0);
            return Err(Error::Ingestion {
                row,
                message: "file mixes labeled and unlabeled rows".into(),
            });
        }
    };
    FeatureMatrix::new(d, values, ids, labels)
}

fn write_binary<W: Write>(data: &FeatureMatrix, out: &mut W) -> Result<()> {
    let to_u32 = |x: usize, what: &str| {
        u32::try_from(x).map_err(|_| Error::Usage(format!("{what} {x} exceeds u32 range")))
    };
    out.write_all(FEATURE_MAGIC)?;
    out.write_all(&to_u32(data.n(), "row count")?.to_le_bytes())?;
    out.write_all(&to_u32(data.d(), "dimension")?.to_le_bytes())?;
    out.write_all(&[u8::from(data.labels().is_some())])?;
    for &v in data.values() {
        out.write_all(&(v as f32).to_le_bytes())?;
    }
    if let Some(labels) = data.labels() {
        for (row, &y) in labels.iter().enumerate() {
            let y = u16::try_from(y).map_err(|_| Error::Ingestion {
                row,
                message: format!("label {y} does not fit in u16"),
            })?;
            out.write_all(&y.to_le_bytes())?;
        }
    }
    for id in data.ids() {
        out.write_all(&to_u32(id.len(), "id length")?.to_le_bytes())?;
        out.write_all(id.as_bytes())?;
    }
    Ok(())
}

pub(crate) struct LeReader<R> {
    inner: R,
    path: std::path::PathBuf,
}

impl<R: Read> LeReader<R> {
    pub(crate) fn new(inner: R, path: &Path) -> Self {
        Self { inner, path: path.to_path_buf() }
    }

    pub(crate) fn malformed(&self, message: impl Into<String>) -> Error {
        Error::Format { path: self.path.clone(), message: message.into() }
    }

    pub(crate) fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.malformed("unexpected end of file"))?;
        Ok(buf)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    pub(crate) fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.bytes()?))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    pub(crate) fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let mut buf = vec![0u8; len];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| self.malformed("unexpected end of file in string"))?;
        String::from_utf8(buf).map_err(|_| self.malformed("string is not UTF-8"))
    }

    pub(crate) fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(self.malformed("trailing bytes after payload")),
        }
    }
}

fn read_binary<R: Read>(input: R, path: &Path) -> Result<FeatureMatrix> {
    let mut r = LeReader::new(input, path);
    if &r.bytes::<5>()? != FEATURE_MAGIC {
        return Err(r.malformed("bad magic, expected ALCV1"));
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let has_labels = match r.u8()? {
        0 => false,
        1 => true,
        other => return Err(r.malformed(format!("has_labels flag {other} is not 0 or 1"))),
    };
    let mut values = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        values.push(f64::from(r.f32()?));
    }
    let labels = if has_labels {
        Some((0..n).map(|_| r.u16().map(usize::from)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    let ids = (0..n).map(|_| r.string()).collect::<Result<Vec<_>>>()?;
    r.expect_end()?;
    FeatureMatrix::new(d, values, ids, labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::{generate_mixture, DatasetSpec};

    #[test]
    fn binary_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let data = generate_mixture(&DatasetSpec { n_per_class: 20, ..DatasetSpec::default() }).unwrap();
        save_features(&data, &path, FeatureFormat::Binary).unwrap();
        assert_eq!(load_features(&path, FeatureFormat::Binary).unwrap(), data);
    }

    #[test]
    fn csv_round_trip_within_tolerance() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        let data = FeatureMatrix::with_generated_ids(2, vec![0.1, -2.5e-7, 3.0, 1.0 / 3.0], None).unwrap();
        save_features(&data, &path, FeatureFormat::Csv).unwrap();
        let back = load_features(&path, FeatureFormat::Csv).unwrap();
        assert_eq!(back.ids(), data.ids());
        assert!(back.labels().is_none());
        for (a, b) in back.values().iter().zip(data.values()) {
            assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn csv_two_rows_two_features() {
        let text = "id,label,f0,f1\na,0,1.5,2\nb,1,-1,0\n";
        let m = read_csv(text.as_bytes()).unwrap();
        assert_eq!((m.n(), m.d()), (2, 2));
        assert_eq!(m.labels(), Some(&[0, 1][..]));
        assert_eq!(m.row(0), &[1.5, 2.0]);
    }

    #[test]
    fn csv_short_row_names_row() {
        let text = "id,label,f0,f1\na,0,1.5,2\nb,1,-1\n";
        match read_csv(text.as_bytes()).unwrap_err() {
            Error::Ingestion { row, .. } => assert_eq!(row, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_bad_label_and_duplicate_id() {
        let bad_label = "id,label,f0\na,x,1\n";
        assert!(matches!(read_csv(bad_label.as_bytes()).unwrap_err(), Error::Ingestion { row: 0, .. }));
        let dup = "id,label,f0\na,0,1\na,1,2\n";
        assert!(matches!(read_csv(dup.as_bytes()).unwrap_err(), Error::Ingestion { row: 1, .. }));
    }

    #[test]
    fn csv_empty_labels_mean_unlabeled() {
        let text = "id,label,f0\na,,1\nb,,2\n";
        assert!(read_csv(text.as_bytes()).unwrap().labels().is_none());
    }

    #[test]
    fn binary_truncation_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let data = FeatureMatrix::with_generated_ids(2, vec![1.0, 2.0], Some(vec![3])).unwrap();
        save_features(&data, &path, FeatureFormat::Binary).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(
            load_features(&path, FeatureFormat::Binary).unwrap_err(),
            Error::Format { .. }
        ));
    }

    #[test]
    fn binary_layout_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.bin");
        let data = FeatureMatrix::new(1, vec![0.5], vec!["ab".into()], Some(vec![7])).unwrap();
        save_features(&data, &path, FeatureFormat::Binary).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut want = b"ALCV1".to_vec();
        want.extend(1u32.to_le_bytes());
        want.extend(1u32.to_le_bytes());
        want.push(1);
        want.extend(0.5f32.to_le_bytes());
        want.extend(7u16.to_le_bytes());
        want.extend(2u32.to_le_bytes());
        want.extend(b"ab");
        assert_eq!(bytes, want);
    }
}
