//! Accuracy, macro-F1, confusion matrices and embedding export.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{SentiFormer, SentimentDistribution};
use crate::scalar::Scalar;
use crate::tensor::Tape;

/// Batch size used for inference passes.
pub const INFERENCE_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub accuracy: f64,
    /// Unweighted mean of per-class F1; classes never seen score 0.
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl EvalReport {
    pub fn from_predictions(predicted: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Usage("cannot evaluate an empty dataset".into()));
        }
        if predicted.len() != labels.len() {
            return Err(Error::Usage(format!(
                "{} predictions for {} labels",
                predicted.len(),
                labels.len()
            )));
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&p, &y) in predicted.iter().zip(labels) {
            if y >= classes || p >= classes {
                return Err(Error::Dataset(format!(
                    "class index {} outside [0, {classes})",
                    y.max(p)
                )));
            }
            confusion[y][p] += 1;
        }
        let n = labels.len();
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let per_class_f1: Vec<f64> = (0..classes)
            .map(|c| {
                let tp = confusion[c][c];
                let actual: usize = confusion[c].iter().sum();
                let predicted: usize = confusion.iter().map(|row| row[c]).sum();
                // 2tp / (2tp + fp + fn); 0 when the class never appears
                let denom = actual + predicted;
                if denom == 0 {
                    0.0
                } else {
                    2.0 * tp as f64 / denom as f64
                }
            })
            .collect();
        Ok(EvalReport {
            n,
            accuracy: correct as f64 / n as f64,
            macro_f1: per_class_f1.iter().sum::<f64>() / classes as f64,
            per_class_f1,
            confusion,
        })
    }
}

/// Class distributions for every record, in order.
pub fn predict<S: Scalar>(
    model: &SentiFormer<S>,
    dataset: &Dataset,
) -> Result<Vec<SentimentDistribution>> {
    check_compatible(model, dataset)?;
    let mut out = Vec::with_capacity(dataset.len());
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(INFERENCE_BATCH) {
        out.extend(model.predict(&dataset.batch(chunk)?)?);
    }
    Ok(out)
}

/// Fails with a config mismatch when the data cannot belong to the model.
pub fn check_compatible<S: Scalar>(model: &SentiFormer<S>, dataset: &Dataset) -> Result<()> {
    let cfg = model.config();
    if let Some(max) = dataset.max_label() {
        if max >= cfg.classes {
            return Err(Error::ConfigMismatch(format!(
                "data has label {max} (needs L >= {}) but the model has L = {}",
                max + 1,
                cfg.classes
            )));
        }
    }
    if let Some(d) = dataset.d_e() {
        if d != cfg.d_e {
            return Err(Error::ConfigMismatch(format!(
                "data vectors have width {d} but the model has d_e = {}",
                cfg.d_e
            )));
        }
    }
    Ok(())
}

/// Argmax predictions (lowest index on ties) scored against the labels.
pub fn evaluate<S: Scalar>(model: &SentiFormer<S>, dataset: &Dataset) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty dataset".into()));
    }
    let predicted: Vec<usize> = predict(model, dataset)?
        .iter()
        .map(|d| d.argmax())
        .collect();
    EvalReport::from_predictions(&predicted, &dataset.labels(), model.config().classes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingStage {
    /// The three encoder outputs concatenated, width `3 * d_e`.
    Pre,
    /// Final extra-token state, width `d_h`.
    Post,
}

impl std::str::FromStr for EmbeddingStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre" => Ok(EmbeddingStage::Pre),
            "post" => Ok(EmbeddingStage::Post),
            _ => Err(Error::Usage(format!(
                "stage must be 'pre' or 'post', got '{s}'"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub id: String,
    pub label: usize,
    pub vector: Vec<f32>,
}

/// One embedding per record, in dataset order.
pub fn embeddings<S: Scalar>(
    model: &SentiFormer<S>,
    dataset: &Dataset,
    stage: EmbeddingStage,
) -> Result<Vec<EmbeddingRow>> {
    let mut rows = Vec::with_capacity(dataset.len());
    match stage {
        EmbeddingStage::Pre => {
            for r in &dataset.records {
                let mut vector = r.e_v.clone();
                vector.extend_from_slice(&r.e_c);
                vector.extend_from_slice(&r.e_p);
                rows.push(EmbeddingRow {
                    id: r.id.clone(),
                    label: r.label,
                    vector,
                });
            }
        }
        EmbeddingStage::Post => {
            check_compatible(model, dataset)?;
            let indices: Vec<usize> = (0..dataset.len()).collect();
            for chunk in indices.chunks(INFERENCE_BATCH) {
                let mut tape = Tape::new();
                let acts = model.forward(&mut tape, &dataset.batch(chunk)?)?;
                let pooled = tape.value(acts.pooled);
                for (k, &i) in chunk.iter().enumerate() {
                    let r = &dataset.records[i];
                    rows.push(EmbeddingRow {
                        id: r.id.clone(),
                        label: r.label,
                        vector: pooled
                            .row(k)
                            .iter()
                            .map(|v| v.to_f64_lossy() as f32)
                            .collect(),
                    });
                }
            }
        }
    }
    Ok(rows)
}

pub fn export_embeddings<S: Scalar>(
    model: &SentiFormer<S>,
    dataset: &Dataset,
    stage: EmbeddingStage,
    path: &Path,
) -> Result<usize> {
    let rows = embeddings(model, dataset, stage)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in &rows {
        serde_json::to_writer(&mut w, row).map_err(|e| Error::io(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let y = [0, 1, 2, 2, 1];
        let r = EvalReport::from_predictions(&y, &y, 3).unwrap();
        assert_eq!((r.accuracy, r.macro_f1), (1.0, 1.0));
    }

    #[test]
    fn all_class_zero_on_balanced_pair() {
        let r = EvalReport::from_predictions(&[0, 0, 0, 0], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(r.accuracy, 0.5);
        // precision 1/2, recall 1 -> F1 = 2/3
        assert!((r.per_class_f1[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(r.per_class_f1[1], 0.0);
        assert!((r.macro_f1 - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn absent_class_counts_as_zero() {
        let r = EvalReport::from_predictions(&[0, 1], &[0, 1], 3).unwrap();
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_is_a_usage_error() {
        assert!(matches!(
            EvalReport::from_predictions(&[], &[], 2),
            Err(Error::Usage(_))
        ));
    }
}
