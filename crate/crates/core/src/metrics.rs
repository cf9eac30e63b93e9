//! Confusion matrices and the accuracy figures derived from them.
//!
//! Rows are ground truth, columns are predictions. Accuracies are fractions
//! in `[0, 1]`; the prediction table is in percent. A class with no samples
//! has no defined accuracy: it is reported as `None` and left out of the
//! class mean (with a warning), never counted as zero.
//!
//! Rounding to two decimals happens only in [`round2`], at presentation time.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
    names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn zeros(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("confusion matrix needs at least one class".into()));
        }
        Ok(Self {
            n,
            counts: vec![0; n * n],
            names: (0..n).map(|c| format!("class{c}")).collect(),
        })
    }

    /// Builds a matrix from explicit `counts[truth][pred]`.
    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let mut cm = Self::zeros(rows.len())?;
        for (t, row) in rows.iter().enumerate() {
            if row.len() != cm.n {
                return Err(Error::InvalidArgument(format!(
                    "row {t} has {} entries, expected {}",
                    row.len(),
                    cm.n
                )));
            }
            cm.counts[t * cm.n..(t + 1) * cm.n].copy_from_slice(row);
        }
        Ok(cm)
    }

    pub fn with_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n {
            return Err(Error::InvalidArgument(format!(
                "{} class names for {} classes",
                names.len(),
                self.n
            )));
        }
        self.names = names;
        Ok(self)
    }

    pub fn num_classes(&self) -> usize {
        self.n
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.n + pred]
    }

    pub fn row(&self, truth: usize) -> &[u64] {
        &self.counts[truth * self.n..(truth + 1) * self.n]
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        for label in [truth, pred] {
            if label >= self.n {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: self.n,
                });
            }
        }
        self.counts[truth * self.n + pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.n).map(|c| self.get(c, c)).sum()
    }

    pub fn row_total(&self, truth: usize) -> u64 {
        self.row(truth).iter().sum()
    }
}

pub fn confusion_matrix(truth: &[usize], pred: &[usize], n: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::InvalidArgument(format!(
            "{} labels but {} predictions",
            truth.len(),
            pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(n)?;
    for (&t, &p) in truth.iter().zip(pred) {
        cm.record(t, p)?;
    }
    Ok(cm)
}

/// `trace / total`.
pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    match cm.total() {
        0 => Err(Error::EmptyDataset),
        total => Ok(cm.trace() as f64 / total as f64),
    }
}

/// Recall of each class; `None` for classes without samples.
pub fn per_class_accuracy(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.num_classes())
        .map(|c| match cm.row_total(c) {
            0 => None,
            total => Some(cm.get(c, c) as f64 / total as f64),
        })
        .collect()
}

/// Arithmetic mean of the defined entries. Missing entries are skipped with
/// a warning.
pub fn mean_of_defined(values: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = values.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let missing = values.len() - defined.len();
    if missing > 0 {
        log::warn!("{missing} class(es) without samples excluded from the class mean");
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Unweighted mean of per-class recalls.
pub fn mean_class_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    mean_of_defined(&per_class_accuracy(cm))
}

/// Row-normalized counts in percent; `None` rows have no samples.
pub fn prediction_percentage_table(cm: &ConfusionMatrix) -> Vec<Option<Vec<f64>>> {
    (0..cm.num_classes())
        .map(|t| match cm.row_total(t) {
            0 => None,
            total => Some(
                cm.row(t)
                    .iter()
                    .map(|&c| 100.0 * c as f64 / total as f64)
                    .collect(),
            ),
        })
        .collect()
}

/// Two-decimal presentation rounding (half away from zero).
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub confusion: ConfusionMatrix,
    pub accuracy: f64,
    pub mean_class_accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub row_percentages: Vec<Option<Vec<f64>>>,
}

const MISSING: &str = "NA";

impl EvalReport {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            accuracy: overall_accuracy(&confusion)?,
            mean_class_accuracy: mean_class_accuracy(&confusion)?,
            per_class_accuracy: per_class_accuracy(&confusion),
            row_percentages: prediction_percentage_table(&confusion),
            confusion,
        })
    }

    pub fn from_predictions(truth: &[usize], pred: &[usize], n: usize) -> Result<Self> {
        Self::from_confusion(confusion_matrix(truth, pred, n)?)
    }

    /// Confusion grid: header `truth,<class names>`, one row per true class.
    pub fn confusion_csv(&self) -> Result<String> {
        let cm = &self.confusion;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(std::iter::once("truth").chain(cm.names().iter().map(String::as_str)))?;
        for t in 0..cm.num_classes() {
            let mut rec = vec![cm.names()[t].clone()];
            rec.extend(cm.row(t).iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }

    /// Percentage table in the same layout, rounded to two decimals.
    pub fn percentages_csv(&self) -> Result<String> {
        let cm = &self.confusion;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(std::iter::once("truth").chain(cm.names().iter().map(String::as_str)))?;
        for (t, row) in self.row_percentages.iter().enumerate() {
            let mut rec = vec![cm.names()[t].clone()];
            match row {
                Some(r) => rec.extend(r.iter().map(|v| format!("{:.2}", round2(*v)))),
                None => rec.extend(std::iter::repeat_n(MISSING.to_string(), cm.num_classes())),
            }
            w.write_record(&rec)?;
        }
        finish_csv(w)
    }

    /// Flat `key,value` table of the scalar metrics (full precision).
    pub fn metrics_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["key", "value"])?;
        w.write_record(["samples", &self.confusion.total().to_string()])?;
        w.write_record(["accuracy", &self.accuracy.to_string()])?;
        w.write_record(["mean_class_accuracy", &self.mean_class_accuracy.to_string()])?;
        for (name, acc) in self.confusion.names().iter().zip(&self.per_class_accuracy) {
            let v = acc.map_or_else(|| MISSING.to_string(), |a| a.to_string());
            w.write_record([format!("accuracy.{name}"), v])?;
        }
        finish_csv(w)
    }

    /// Writes `confusion.csv`, `percentages.csv` and `metrics.csv` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [
            ("confusion.csv", self.confusion_csv()?),
            ("percentages.csv", self.percentages_csv()?),
            ("metrics.csv", self.metrics_csv()?),
        ] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidArgument(format!("csv flush failed: {}", e.error())))?;
    String::from_utf8(bytes).map_err(|e| Error::InvalidArgument(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_and_single_column() {
        let truth = [0, 1, 2, 2, 1];
        let cm = confusion_matrix(&truth, &truth, 3).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(t, p) > 0, t == p);
            }
        }
        let r = EvalReport::from_confusion(cm).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.mean_class_accuracy, 1.0);
        for (t, row) in r.row_percentages.iter().enumerate() {
            let row = row.as_ref().unwrap();
            for (p, &v) in row.iter().enumerate() {
                assert_eq!(v, if t == p { 100.0 } else { 0.0 });
            }
        }

        let cm = confusion_matrix(&truth, &[0; 5], 3).unwrap();
        for t in 0..3 {
            for p in 1..3 {
                assert_eq!(cm.get(t, p), 0);
            }
        }
    }

    #[test]
    fn out_of_range_and_empty() {
        assert!(matches!(
            confusion_matrix(&[0, 3], &[0, 1], 3),
            Err(Error::LabelOutOfRange { label: 3, .. })
        ));
        let cm = ConfusionMatrix::zeros(3).unwrap();
        assert!(matches!(overall_accuracy(&cm), Err(Error::EmptyDataset)));
        assert!(matches!(mean_class_accuracy(&cm), Err(Error::EmptyDataset)));
    }

    #[test]
    fn empty_class_is_missing_not_zero() {
        let cm = confusion_matrix(&[0, 0, 2], &[0, 1, 2], 3).unwrap();
        let acc = per_class_accuracy(&cm);
        assert_eq!(acc, vec![Some(0.5), None, Some(1.0)]);
        assert_eq!(mean_class_accuracy(&cm).unwrap(), 0.75);
        assert!(prediction_percentage_table(&cm)[1].is_none());
        let r = EvalReport::from_confusion(cm).unwrap();
        assert!(r.metrics_csv().unwrap().contains("accuracy.class1,NA"));
    }

    #[test]
    fn csv_layout() {
        let cm = ConfusionMatrix::from_counts(&[vec![3, 1], vec![0, 2]])
            .unwrap()
            .with_names(vec!["a".into(), "b".into()])
            .unwrap();
        let r = EvalReport::from_confusion(cm).unwrap();
        assert_eq!(r.confusion_csv().unwrap(), "truth,a,b\na,3,1\nb,0,2\n");
        assert_eq!(r.percentages_csv().unwrap(), "truth,a,b\na,75.00,25.00\nb,0.00,100.00\n");
    }
}
