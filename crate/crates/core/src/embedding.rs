//! Representation matrices: stimuli as rows, features as columns.
//!
//! Two on-disk formats are supported. CSV files carry a header row whose
//! first cell names the id column; every later row is `id,v1,...,vk`.
//! Binary files are little-endian:
//!
//! ```text
//! magic   b"RSEMB001"
//! u32     rows
//! u32     cols
//! rows x  (u32 byte length, utf-8 stimulus id)
//! cols x  (u32 byte length, utf-8 feature name)
//! rows*cols f64, row-major
//! ```

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"RSEMB001";

/// On-disk encoding of an embedding file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingFormat {
    Csv,
    Binary,
}

impl EmbeddingFormat {
    /// `.csv` files are CSV; everything else is treated as binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => EmbeddingFormat::Csv,
            _ => EmbeddingFormat::Binary,
        }
    }
}

/// A validated stimuli x features matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    stimulus_ids: Vec<String>,
    feature_names: Vec<String>,
    values: DMatrix<f64>,
    index: HashMap<String, usize>,
}

impl EmbeddingMatrix {
    /// Build and validate. Fails on shape mismatch, duplicate ids or non-finite values.
    pub fn new(
        stimulus_ids: Vec<String>,
        feature_names: Vec<String>,
        values: DMatrix<f64>,
    ) -> Result<Self> {
        if values.nrows() != stimulus_ids.len() {
            return Err(Error::DimensionMismatch {
                expected: stimulus_ids.len(),
                got: values.nrows(),
            });
        }
        if values.ncols() != feature_names.len() {
            return Err(Error::DimensionMismatch {
                expected: feature_names.len(),
                got: values.ncols(),
            });
        }
        let mut index = HashMap::with_capacity(stimulus_ids.len());
        for (i, id) in stimulus_ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Validation(format!("duplicate stimulus id '{id}'")));
            }
        }
        for r in 0..values.nrows() {
            for c in 0..values.ncols() {
                let v = values[(r, c)];
                if !v.is_finite() {
                    return Err(Error::Validation(format!(
                        "non-finite value {v} at row '{}' column '{}'",
                        stimulus_ids[r], feature_names[c]
                    )));
                }
            }
        }
        Ok(Self {
            stimulus_ids,
            feature_names,
            values,
            index,
        })
    }

    pub fn stimulus_ids(&self) -> &[String] {
        &self.stimulus_ids
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn n_stimuli(&self) -> usize {
        self.stimulus_ids.len()
    }

    pub fn n_features(&self) -> usize {
        self.feature_names.len()
    }

    pub fn row_of(&self, stimulus_id: &str) -> Option<usize> {
        self.index.get(stimulus_id).copied()
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|f| f == name)
    }

    /// Values of one named feature, in row order.
    pub fn feature_column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self
            .feature_index(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown feature '{name}'")))?;
        Ok(self.values.column(c).iter().copied().collect())
    }

    /// Rows for the given stimuli, in the given order.
    pub fn select_rows<S: AsRef<str>>(&self, ids: &[S]) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(ids.len(), self.n_features());
        for (i, id) in ids.iter().enumerate() {
            let r = self.row_of(id.as_ref()).ok_or_else(|| {
                Error::Validation(format!("stimulus '{}' missing from embedding", id.as_ref()))
            })?;
            out.row_mut(i).copy_from(&self.values.row(r));
        }
        Ok(out)
    }

    /// Same stimuli reordered to `ids`; the id sets must be equal.
    pub fn aligned_to(&self, ids: &[String]) -> Result<DMatrix<f64>> {
        if ids.len() != self.n_stimuli() {
            return Err(Error::Validation(format!(
                "stimulus sets differ in size: {} vs {}",
                ids.len(),
                self.n_stimuli()
            )));
        }
        self.select_rows(ids)
    }

    /// Load from a file in the given format.
    pub fn load(path: &Path, format: EmbeddingFormat) -> Result<Self> {
        match format {
            EmbeddingFormat::Csv => Self::load_csv(path),
            EmbeddingFormat::Binary => Self::load_binary(path),
        }
    }

    pub fn save(&self, path: &Path, format: EmbeddingFormat) -> Result<()> {
        match format {
            EmbeddingFormat::Csv => self.save_csv(path),
            EmbeddingFormat::Binary => self.save_binary(path),
        }
    }

    fn load_csv(path: &Path) -> Result<Self> {
        let file = fs::File::open(path)?;
        Self::read_csv(file, &path.display().to_string())
    }

    /// Parse CSV from any reader; `origin` labels error positions.
    pub fn read_csv<R: Read>(reader: R, origin: &str) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header = rdr.headers().map_err(|e| csv_error(origin, e))?.clone();
        if header.len() < 2 {
            return Err(Error::Parse {
                location: format!("{origin}:1"),
                message: "header needs an id column and at least one feature".into(),
            });
        }
        let feature_names: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut ids = Vec::new();
        let mut data = Vec::new();
        for record in rdr.records() {
            let record = record.map_err(|e| csv_error(origin, e))?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            if record.len() != header.len() {
                return Err(Error::Parse {
                    location: format!("{origin}:{line}"),
                    message: format!("expected {} fields, found {}", header.len(), record.len()),
                });
            }
            ids.push(record[0].to_string());
            for (c, field) in record.iter().skip(1).enumerate() {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    location: format!("{origin}:{line}"),
                    message: format!("column '{}': cannot parse '{field}'", feature_names[c]),
                })?;
                data.push(v);
            }
        }
        let values = DMatrix::from_row_slice(ids.len(), feature_names.len(), &data);
        Self::new(ids, feature_names, values)
    }

    fn save_csv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path)?;
        self.write_csv(file)
    }

    fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["id".to_string()];
        header.extend(self.feature_names.iter().cloned());
        w.write_record(&header).map_err(|e| csv_error("write", e))?;
        for (r, id) in self.stimulus_ids.iter().enumerate() {
            let mut row = vec![id.clone()];
            row.extend(self.values.row(r).iter().map(|v| format!("{v:?}")));
            w.write_record(&row).map_err(|e| csv_error("write", e))?;
        }
        w.flush()?;
        Ok(())
    }

    fn load_binary(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    /// Decode the binary format.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = ByteCursor { bytes, offset: 0 };
        let magic = cur.take(8)?;
        if magic != MAGIC {
            return Err(Error::Parse {
                location: "offset 0".into(),
                message: "bad magic bytes".into(),
            });
        }
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let mut ids = Vec::with_capacity(rows);
        for _ in 0..rows {
            ids.push(cur.string()?);
        }
        let mut names = Vec::with_capacity(cols);
        for _ in 0..cols {
            names.push(cur.string()?);
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(f64::from_le_bytes(cur.take(8)?.try_into().unwrap()));
        }
        if cur.offset != bytes.len() {
            return Err(Error::Parse {
                location: format!("offset {}", cur.offset),
                message: "trailing bytes".into(),
            });
        }
        Self::new(ids, names, DMatrix::from_row_slice(rows, cols, &data))
    }

    /// Encode in the binary format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.values.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.n_stimuli() as u32).to_le_bytes());
        out.extend_from_slice(&(self.n_features() as u32).to_le_bytes());
        for s in self.stimulus_ids.iter().chain(self.feature_names.iter()) {
            out.extend_from_slice(&(s.len() as u32).to_le_bytes());
            out.extend_from_slice(s.as_bytes());
        }
        for r in 0..self.values.nrows() {
            for c in 0..self.values.ncols() {
                out.extend_from_slice(&self.values[(r, c)].to_le_bytes());
            }
        }
        out
    }

    fn save_binary(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }
}

fn csv_error(origin: &str, e: csv::Error) -> Error {
    let location = match e.position() {
        Some(p) => format!("{origin}:{}", p.line()),
        None => origin.to_string(),
    };
    Error::Parse {
        location,
        message: e.to_string(),
    }
}

struct ByteCursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> ByteCursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Parse {
                location: format!("offset {}", self.offset),
                message: format!("unexpected end of file (wanted {n} bytes)"),
            });
        }
        let s = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let at = self.offset;
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::Parse {
            location: format!("offset {at}"),
            message: "invalid utf-8 in identifier".into(),
        })
    }
}

/// Named representation files, as listed in a JSON manifest
/// (`{"name": "path/to/file.csv", ...}`). Relative paths resolve against the
/// manifest's directory.
#[derive(Debug, Clone, Default)]
pub struct RepresentationManifest {
    pub entries: BTreeMap<String, PathBuf>,
}

impl RepresentationManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let raw: BTreeMap<String, PathBuf> = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        let entries = raw
            .into_iter()
            .map(|(k, p)| {
                let p = if p.is_absolute() { p } else { base.join(p) };
                (k, p)
            })
            .collect();
        Ok(Self { entries })
    }

    /// Load every listed matrix, keyed by name (sorted).
    pub fn load_all(&self) -> Result<Vec<(String, EmbeddingMatrix)>> {
        self.entries
            .iter()
            .map(|(name, path)| {
                EmbeddingMatrix::load(path, EmbeddingFormat::from_path(path))
                    .map(|m| (name.clone(), m))
                    .map_err(|e| e.in_representation(name))
            })
            .collect()
    }
}

/// Check that every id in `ids` is present in the embedding.
pub fn ensure_covers<'a, I: IntoIterator<Item = &'a str>>(
    embedding: &EmbeddingMatrix,
    ids: I,
) -> Result<()> {
    let mut seen = HashSet::new();
    for id in ids {
        if seen.insert(id) && embedding.row_of(id).is_none() {
            return Err(Error::Validation(format!("stimulus '{id}' missing from embedding")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = rng_from_seed(seed);
        let values = DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1e3..1e3));
        EmbeddingMatrix::new(
            (0..rows).map(|i| format!("s{i}")).collect(),
            (0..cols).map(|j| format!("f{j}")).collect(),
            values,
        )
        .unwrap()
    }

    #[test]
    fn parses_small_csv() {
        let text = "id,f1,f2\na,1,2\nb,3,4\nc,5.5,-6\n";
        let m = EmbeddingMatrix::read_csv(text.as_bytes(), "inline").unwrap();
        assert_eq!(m.stimulus_ids(), ["a", "b", "c"]);
        assert_eq!(m.feature_names(), ["f1", "f2"]);
        assert_eq!(m.values()[(2, 1)], -6.0);
    }

    #[test]
    fn nan_is_rejected_with_location() {
        let text = "id,f1,f2\na,1,2\nb,NaN,4\n";
        let err = EmbeddingMatrix::read_csv(text.as_bytes(), "inline").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Validation(_)));
        assert!(msg.contains("'b'") && msg.contains("'f1'"), "{msg}");
    }

    #[test]
    fn malformed_csv_reports_line() {
        let text = "id,f1\na,1\nb,xyz\n";
        match EmbeddingMatrix::read_csv(text.as_bytes(), "inline").unwrap_err() {
            Error::Parse { location, .. } => assert_eq!(location, "inline:3"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let text = "id,f1\na,1\na,2\n";
        assert!(matches!(
            EmbeddingMatrix::read_csv(text.as_bytes(), "inline"),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn binary_round_trip_is_bitwise() {
        let m = random_matrix(10, 5, 11);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        m.save(&path, EmbeddingFormat::Binary).unwrap();
        let back = EmbeddingMatrix::load(&path, EmbeddingFormat::Binary).unwrap();
        assert_eq!(back.stimulus_ids(), m.stimulus_ids());
        for (a, b) in back.values().iter().zip(m.values().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn csv_round_trip_within_tolerance() {
        let m = random_matrix(10, 5, 12);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        m.save(&path, EmbeddingFormat::Csv).unwrap();
        let back = EmbeddingMatrix::load(&path, EmbeddingFormat::Csv).unwrap();
        for (a, b) in back.values().iter().zip(m.values().iter()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn truncated_binary_is_a_parse_error() {
        let bytes = random_matrix(3, 2, 1).to_bytes();
        let err = EmbeddingMatrix::from_bytes(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Parse { .. }));
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        random_matrix(4, 2, 3)
            .save(&dir.path().join("a.csv"), EmbeddingFormat::Csv)
            .unwrap();
        random_matrix(4, 3, 4)
            .save(&dir.path().join("b.bin"), EmbeddingFormat::Binary)
            .unwrap();
        fs::write(dir.path().join("reps.json"), r#"{"b": "b.bin", "a": "a.csv"}"#).unwrap();
        let manifest = RepresentationManifest::load(&dir.path().join("reps.json")).unwrap();
        let reps = manifest.load_all().unwrap();
        assert_eq!(reps[0].0, "a");
        assert_eq!(reps[1].1.n_features(), 3);
    }
}
