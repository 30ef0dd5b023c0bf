use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::{ParameterSet, Real, Tape, Tensor};
use crate::dataset::{Corpus, Split, NUM_CLASSES};
use super::batch::clean_view;
use crate::features::{N_FRAMES, N_MELS};
use crate::fsutil::write_atomic;
use crate::model::KeywordModel;
use crate::{Error, Result};

const FEATURE_LEN: usize = N_FRAMES * N_MELS;

/// Unaugmented features of one split, computed once and reused every epoch.
#[derive(Clone, Debug)]
pub struct FeatureCache {
    pub indices: Vec<usize>,
    pub labels: Vec<usize>,
    feats: Vec<f32>,
}

impl FeatureCache {
    pub fn build(corpus: &Corpus, split: Split) -> Result<Self> {
        let indices = corpus.indices(split);
        let rows = indices
            .par_iter()
            .map(|&i| clean_view(corpus.wave(i)))
            .collect::<Result<Vec<_>>>()?;
        let feats = rows.iter().flat_map(|m| m.data.iter().map(|&v| v as f32)).collect();
        Ok(FeatureCache {
            labels: indices.iter().map(|&i| corpus.label(i)).collect(),
            indices,
            feats,
        })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn batch(&self, start: usize, end: usize) -> Tensor<f32> {
        let data = self.feats[start * FEATURE_LEN..end * FEATURE_LEN].to_vec();
        Tensor::new(vec![end - start, N_FRAMES, N_MELS], data).expect("cache rows are full frames")
    }
}

/// Rows are true classes, columns predictions.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    /// Predictions are the argmax of each logit row; ties go to the lowest index.
    pub fn from_logits<T: Real>(logits: &[T], labels: &[usize]) -> Result<Self> {
        if logits.len() != labels.len() * NUM_CLASSES {
            return Err(Error::Shape {
                op: "confusion_matrix",
                lhs: vec![logits.len()],
                rhs: vec![labels.len(), NUM_CLASSES],
            });
        }
        let mut cm = ConfusionMatrix::default();
        for (row, &label) in logits.chunks(NUM_CLASSES).zip(labels) {
            cm.counts[label][argmax(row)] += 1;
        }
        Ok(cm)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_sums(&self) -> [u64; NUM_CLASSES] {
        self.counts.map(|r| r.iter().sum())
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    /// One comma-separated line per true class.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

pub(crate) fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

fn forward_batches<R: Send>(
    cache: &FeatureCache,
    batch_size: usize,
    f: impl Fn(Tensor<f32>) -> Result<R> + Sync,
) -> Result<Vec<R>> {
    if cache.is_empty() {
        return Err(Error::InvalidInput("cannot evaluate an empty split".into()));
    }
    let starts: Vec<usize> = (0..cache.len()).step_by(batch_size.max(1)).collect();
    starts
        .par_iter()
        .map(|&s| f(cache.batch(s, (s + batch_size).min(cache.len()))))
        .collect()
}

/// Accuracy and confusion matrix with no augmentation.
pub fn evaluate(
    model: &KeywordModel,
    params: &ParameterSet<f32>,
    cache: &FeatureCache,
    batch_size: usize,
) -> Result<EvalReport> {
    let parts = forward_batches(cache, batch_size, |feats| {
        let tape = Tape::new();
        let bound = tape.bind(params)?;
        let x = tape.constant(feats)?;
        let emb = model.encoder_forward(&tape, &bound, x)?;
        let logits = model.classifier_forward(&tape, &bound, emb)?;
        let v = tape.value(logits);
        Ok(v.data().to_vec())
    })?;
    let logits: Vec<f32> = parts.into_iter().flatten().collect();
    let confusion = ConfusionMatrix::from_logits(&logits, &cache.labels)?;
    Ok(EvalReport {
        accuracy: confusion.accuracy(),
        confusion,
    })
}

/// Encoder outputs for every cached entry, in cache order.
pub fn embeddings(
    model: &KeywordModel,
    params: &ParameterSet<f32>,
    cache: &FeatureCache,
    batch_size: usize,
) -> Result<Vec<Vec<f32>>> {
    let d = model.config.embed_dim();
    let parts = forward_batches(cache, batch_size, |feats| {
        let tape = Tape::new();
        let bound = tape.bind(params)?;
        let x = tape.constant(feats)?;
        let emb = model.encoder_forward(&tape, &bound, x)?;
        let v = tape.value(emb);
        Ok(v.data().chunks(d).map(<[f32]>::to_vec).collect::<Vec<_>>())
    })?;
    Ok(parts.into_iter().flatten().collect())
}

/// Writes `label,e_1,...,e_D` per entry in manifest order and returns the record count.
pub fn export_embeddings(
    model: &KeywordModel,
    params: &ParameterSet<f32>,
    cache: &FeatureCache,
    batch_size: usize,
    path: &Path,
) -> Result<usize> {
    let rows = embeddings(model, params, cache, batch_size)?;
    let mut out = String::new();
    for (label, e) in cache.labels.iter().zip(&rows) {
        write!(out, "{label}").expect("string write");
        for v in e {
            write!(out, ",{v}").expect("string write");
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())?;
    Ok(rows.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_logits_score_perfectly() {
        let labels = [3usize, 0, 9, 3];
        let mut logits = vec![0.0f64; labels.len() * NUM_CLASSES];
        for (r, &k) in labels.iter().enumerate() {
            logits[r * NUM_CLASSES + k] = 10.0;
        }
        let cm = ConfusionMatrix::from_logits(&logits, &labels).unwrap();
        assert_eq!(cm.accuracy(), 1.0);
        assert_eq!(cm.row_sums()[3], 2);
    }

    #[test]
    fn ties_go_to_the_lowest_index() {
        assert_eq!(argmax(&[1.0f32, 3.0, 3.0, 0.0]), 1);
        assert_eq!(argmax(&[0.0f32; 10]), 0);
    }

    #[test]
    fn csv_has_one_line_per_class() {
        let mut cm = ConfusionMatrix::default();
        cm.counts[2][5] = 4;
        let csv = cm.to_csv();
        assert_eq!(csv.lines().count(), NUM_CLASSES);
        assert_eq!(csv.lines().nth(2).unwrap(), "0,0,0,0,0,4,0,0,0,0");
    }

    #[test]
    fn trace_over_total_is_accuracy() {
        let mut cm = ConfusionMatrix::default();
        cm.counts[0][0] = 3;
        cm.counts[0][1] = 1;
        cm.counts[4][4] = 4;
        assert_eq!(cm.accuracy(), 7.0 / 8.0);
        let mut other = cm.clone();
        other.merge(&cm);
        assert_eq!(other.total(), 16);
    }
}
