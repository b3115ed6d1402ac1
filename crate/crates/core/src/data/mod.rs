//! Feature records and their JSONL encoding, the prompt template, synthetic
//! datasets and splitting.

mod prompt;
mod synthetic;

pub use prompt::{build_prompt, MAX_OBJECTS};
pub use synthetic::{gen_synthetic, train_test_split, SyntheticSpec};

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FeatureBatch, FeatureTriple, Stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One sample: label, the three encoder outputs and optional metadata text.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureRecord {
    pub id: String,
    pub label: usize,
    pub e_v: Vec<f32>,
    pub e_c: Vec<f32>,
    pub e_p: Vec<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub objects: Option<Vec<String>>,
}

impl FeatureRecord {
    pub fn stream(&self, s: Stream) -> &[f32] {
        match s {
            Stream::Vision => &self.e_v,
            Stream::Caption => &self.e_c,
            Stream::Prompt => &self.e_p,
        }
    }

    pub fn triple<S: Scalar>(&self) -> FeatureTriple<S> {
        let cast = |v: &[f32]| v.iter().map(|&x| S::from_f64_lossy(x as f64)).collect();
        FeatureTriple {
            e_v: cast(&self.e_v),
            e_c: cast(&self.e_c),
            e_p: cast(&self.e_p),
        }
    }

    fn check(&self, d_e: usize) -> std::result::Result<(), String> {
        for s in Stream::ALL {
            let v = self.stream(s);
            let field = format!("e_{}", s.key());
            if v.len() != d_e {
                return Err(format!(
                    "field {field} has length {}, expected {d_e}",
                    v.len()
                ));
            }
            if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                return Err(format!("field {field} has a non-finite entry at index {i}"));
            }
        }
        Ok(())
    }
}

/// An ordered collection of records with unique ids and a common width.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<FeatureRecord>,
}

impl Dataset {
    /// Validates widths and id uniqueness.
    pub fn new(records: Vec<FeatureRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        let d_e = records.first().map(|r| r.e_v.len());
        for (i, r) in records.iter().enumerate() {
            if let Some(d) = d_e {
                r.check(d)
                    .map_err(|m| Error::Dataset(format!("record {i} ({}): {m}", r.id)))?;
            }
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate id '{}'", r.id)));
            }
        }
        Ok(Dataset { records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Encoder width, `None` for an empty dataset.
    pub fn d_e(&self) -> Option<usize> {
        self.records.first().map(|r| r.e_v.len())
    }

    pub fn labels(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn max_label(&self) -> Option<usize> {
        self.records.iter().map(|r| r.label).max()
    }

    /// Stacks the records at `indices` into a batch.
    pub fn batch<S: Scalar>(&self, indices: &[usize]) -> Result<FeatureBatch<S>> {
        let Some(&first) = indices.first() else {
            return Err(Error::Usage("empty batch".into()));
        };
        let d_e = self.records[first].e_v.len();
        let stack = |s: Stream| {
            let mut data = Vec::with_capacity(indices.len() * d_e);
            for &i in indices {
                data.extend(
                    self.records[i]
                        .stream(s)
                        .iter()
                        .map(|&x| S::from_f64_lossy(x as f64)),
                );
            }
            Tensor::new(vec![indices.len(), d_e], data)
        };
        Ok(FeatureBatch {
            e_v: stack(Stream::Vision)?,
            e_c: stack(Stream::Caption)?,
            e_p: stack(Stream::Prompt)?,
        })
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            records: indices.iter().map(|&i| self.records[i].clone()).collect(),
        }
    }
}

/// Reads one record per non-blank line. With `d_e` set every vector must
/// have that length; otherwise the first record fixes it.
pub fn read_jsonl(path: &Path, d_e: Option<usize>) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records: Vec<FeatureRecord> = Vec::new();
    let mut seen = HashSet::new();
    let mut width = d_e;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |message: String| Error::Data {
            line: line_no,
            message,
        };
        let rec: FeatureRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        let d = *width.get_or_insert(rec.e_v.len());
        rec.check(d).map_err(bad)?;
        if !seen.insert(rec.id.clone()) {
            return Err(bad(format!("duplicate id '{}'", rec.id)));
        }
        records.push(rec);
    }
    Ok(Dataset { records })
}

pub fn write_jsonl(dataset: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in &dataset.records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(id: &str, label: usize, d: usize) -> FeatureRecord {
        FeatureRecord {
            id: id.into(),
            label,
            e_v: (0..d).map(|i| i as f32 * 0.1).collect(),
            e_c: vec![1.0; d],
            e_p: vec![-0.5; d],
            caption: Some("a dog on a beach".into()),
            scene: None,
            objects: None,
        }
    }

    fn write_lines(lines: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for l in lines {
            writeln!(f, "{l}").unwrap();
        }
        f
    }

    #[test]
    fn empty_file_is_an_empty_dataset() {
        let f = write_lines(&[]);
        assert!(read_jsonl(f.path(), None).unwrap().is_empty());
    }

    #[test]
    fn short_vector_names_field_and_line() {
        let mut bad = record("b", 0, 512);
        bad.e_v.pop();
        let f = write_lines(&[
            serde_json::to_string(&record("a", 0, 512)).unwrap(),
            serde_json::to_string(&bad).unwrap(),
        ]);
        match read_jsonl(f.path(), Some(512)) {
            Err(Error::Data { line, message }) => {
                assert_eq!(line, 2);
                assert!(
                    message.contains("e_v") && message.contains("511"),
                    "{message}"
                );
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn missing_field_and_duplicates_are_data_errors() {
        let f = write_lines(&[r#"{"id":"x","label":1,"e_v":[1.0],"e_c":[1.0]}"#.into()]);
        assert!(matches!(
            read_jsonl(f.path(), None),
            Err(Error::Data { line: 1, .. })
        ));
        let line = serde_json::to_string(&record("a", 0, 4)).unwrap();
        let f = write_lines(&[line.clone(), String::new(), line]);
        assert!(matches!(
            read_jsonl(f.path(), None),
            Err(Error::Data { line: 3, .. })
        ));
        let f =
            write_lines(&[r#"{"id":"x","label":-1,"e_v":[1.0],"e_c":[1.0],"e_p":[1.0]}"#.into()]);
        assert!(matches!(
            read_jsonl(f.path(), None),
            Err(Error::Data { line: 1, .. })
        ));
    }

    #[test]
    fn batch_stacks_rows() {
        let ds = Dataset::new(vec![record("a", 0, 3), record("b", 2, 3)]).unwrap();
        let b = ds.batch::<f64>(&[1, 0]).unwrap();
        assert_eq!(b.e_v.shape(), &[2, 3]);
        assert_eq!(b.e_p.get(0, 2), -0.5);
        assert!((b.e_v.get(1, 2) - 0.2).abs() < 1e-7);
        assert!(Dataset::new(vec![record("a", 0, 3), record("a", 1, 3)]).is_err());
    }
}
