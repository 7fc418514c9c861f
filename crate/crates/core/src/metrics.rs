//! Confusion matrices, accuracy, macro-F1 and the evaluation report.
//!
//! Rows of a confusion matrix are true classes, columns predictions. A class
//! with no true and no predicted samples is reported as absent; its F1 is 0
//! and it still counts towards the macro average. Precision (recall) is 0 when
//! nothing was predicted as (labelled with) that class.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { k: num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Config("confusion matrix must be square and non-empty".into()));
        }
        Ok(Self { k, counts: rows.concat() })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        for c in [truth, predicted] {
            if c >= self.k {
                return Err(Error::Label { label: c, num_classes: self.k });
            }
        }
        self.counts[truth * self.k + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    /// Element-wise sum; used to pool LOSO folds.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Config(format!("cannot pool {}-class and {}-class matrices", self.k, other.k)));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.k).map(|c| self.get(c, c)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k).map(<[u64]>::to_vec).collect()
    }

    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.correct() as f64 / n as f64,
        }
    }

    pub fn class_metrics(&self, c: usize) -> ClassMetrics {
        let tp = self.get(c, c) as f64;
        let support: u64 = (0..self.k).map(|p| self.get(c, p)).sum();
        let predicted: u64 = (0..self.k).map(|t| self.get(t, c)).sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let recall = if support == 0 { 0.0 } else { tp / support as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        ClassMetrics { precision, recall, f1, support, absent: support == 0 && predicted == 0 }
    }

    pub fn macro_f1(&self) -> f64 {
        (0..self.k).map(|c| self.class_metrics(c).f1).sum::<f64>() / self.k as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    pub absent: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    #[serde(flatten)]
    pub metrics: ClassMetrics,
}

/// Evaluation summary, written as TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub scope: String,
    pub samples: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub absent_classes: Vec<String>,
    pub confusion: Vec<Vec<u64>>,
    pub class: Vec<ClassEntry>,
}

impl EvalReport {
    pub fn new(cm: &ConfusionMatrix, class_names: &[String], config_digest: &str, scope: &str) -> Self {
        let class: Vec<ClassEntry> = class_names
            .iter()
            .enumerate()
            .map(|(c, name)| ClassEntry { name: name.clone(), metrics: cm.class_metrics(c) })
            .collect();
        Self {
            config_digest: config_digest.to_string(),
            scope: scope.to_string(),
            samples: cm.total(),
            accuracy: cm.accuracy(),
            macro_f1: cm.macro_f1(),
            absent_classes: class.iter().filter(|c| c.metrics.absent).map(|c| c.name.clone()).collect(),
            confusion: cm.rows(),
            class,
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("report always serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(e.to_string().replace('\n', " ")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let mut cm = ConfusionMatrix::new(3);
        for c in 0..3 {
            cm.add(c, c).unwrap();
        }
        assert_eq!(cm.accuracy(), 1.0);
        assert_eq!(cm.macro_f1(), 1.0);
    }

    #[test]
    fn absent_class_is_flagged_and_scores_zero() {
        let mut cm = ConfusionMatrix::new(3);
        cm.add(0, 0).unwrap();
        cm.add(1, 1).unwrap();
        let names: Vec<String> = ["a", "b", "c"].map(String::from).to_vec();
        let r = EvalReport::new(&cm, &names, "00", "pooled");
        assert_eq!(r.absent_classes, ["c"]);
        assert_eq!(r.class[2].metrics.f1, 0.0);
        assert!((r.macro_f1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(EvalReport::from_toml(&r.to_toml()).unwrap(), r);
    }

    #[test]
    fn out_of_range_label() {
        assert!(matches!(ConfusionMatrix::new(2).add(2, 0), Err(Error::Label { .. })));
    }
}
