//! Confusion matrices and the accuracy / F1 / IoU summaries derived from them.

use crate::data::ClassTaxonomy;
use crate::error::{Error, Result};

/// `K×K` pixel counts; rows are ground truth, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::invalid("confusion", format!("{} counts for {classes} classes", counts.len())));
        }
        Ok(Self { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one count per pixel at `[truth][pred]`.
    pub fn accumulate(&mut self, pred: &[usize], truth: &[usize]) -> Result<()> {
        if pred.len() != truth.len() {
            return Err(Error::shape("accumulate_confusion", &[pred.len()], &[truth.len()]));
        }
        let k = self.classes;
        if let Some(&bad) = pred.iter().chain(truth).find(|&&v| v >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        for (&p, &t) in pred.iter().zip(truth) {
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("merge_confusion", &[self.classes], &[other.classes]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Per-class scores in percent. `None` marks a class absent from both ground
/// truth and prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClassScores {
    /// Share of the class's ground-truth pixels predicted correctly.
    pub accuracy: Option<f64>,
    pub f1: Option<f64>,
    pub iou: Option<f64>,
}

/// Summary scores in percent.
#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// Overall accuracy over all classes, background included.
    pub oa: f64,
    /// Means over the foreground classes that occur.
    pub mf1: f64,
    pub miou: f64,
    pub per_class: Vec<ClassScores>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn metrics(cm: &ConfusionMatrix, taxonomy: &ClassTaxonomy) -> Result<Metrics> {
    let k = cm.classes();
    if k != taxonomy.len() {
        return Err(Error::invalid("metrics", format!("{k} classes in matrix, {} in taxonomy", taxonomy.len())));
    }
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("metrics", "empty confusion matrix"));
    }
    let trace: u64 = (0..k).map(|i| cm.get(i, i)).sum();
    let per_class: Vec<ClassScores> = (0..k)
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let row: u64 = (0..k).map(|p| cm.get(c, p)).sum();
            let col: u64 = (0..k).map(|t| cm.get(t, c)).sum();
            let (fn_, fp) = (row as f64 - tp, col as f64 - tp);
            if row == 0 && col == 0 {
                return ClassScores { accuracy: None, f1: None, iou: None };
            }
            ClassScores {
                accuracy: (row > 0).then(|| 100.0 * tp / row as f64),
                f1: Some(100.0 * 2.0 * tp / (2.0 * tp + fp + fn_)),
                iou: Some(100.0 * tp / (tp + fp + fn_)),
            }
        })
        .collect();
    let fg = taxonomy.foreground_indices();
    Ok(Metrics {
        oa: 100.0 * trace as f64 / total as f64,
        mf1: mean(fg.iter().filter_map(|&c| per_class[c].f1)),
        miou: mean(fg.iter().filter_map(|&c| per_class[c].iou)),
        per_class,
    })
}
