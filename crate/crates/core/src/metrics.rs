//! Pixel confusion counts and the derived segmentation metrics.

use std::io::Write;
use std::ops::{Add, AddAssign};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionMatrix {
    pub fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(self, other: Self) -> Self {
        self + other
    }
}

impl Add for ConfusionMatrix {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self::new(
            self.tp + o.tp,
            self.fp + o.fp,
            self.fn_ + o.fn_,
            self.tn + o.tn,
        )
    }
}

impl AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

impl std::iter::Sum for ConfusionMatrix {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Counts pixels with `pred >= threshold` as positive and `gt >= 0.5` as
/// foreground.
pub fn confusion(pred: &[f64], gt: &[f64], threshold: f64) -> Result<ConfusionMatrix> {
    if pred.len() != gt.len() {
        return Err(Error::dim(format!(
            "prediction has {} pixels but ground truth has {}",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = ConfusionMatrix::default();
    for (&p, &t) in pred.iter().zip(gt) {
        match (p >= threshold, t >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub sensitivity: f64,
    /// `TN / (TN + FP)`. Some write-ups print `TN / (TN + FN)`, which is not
    /// a specificity; it is not used here.
    pub specificity: f64,
    pub f_measure: f64,
    pub jaccard: f64,
    pub mcc: f64,
    /// Same as `f_measure`.
    pub dice: f64,
    /// Metrics whose denominator was zero and which were reported as 0.
    pub undefined: Vec<String>,
}

fn ratio(num: f64, den: f64, name: &str, undefined: &mut Vec<String>) -> f64 {
    if den == 0.0 {
        undefined.push(name.to_string());
        0.0
    } else {
        num / den
    }
}

pub fn metric_suite(c: &ConfusionMatrix) -> Metrics {
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let mut undefined = Vec::new();
    let accuracy = ratio(tp + tn, tp + tn + fp + fn_, "accuracy", &mut undefined);
    let precision = ratio(tp, tp + fp, "precision", &mut undefined);
    let recall = ratio(tp, tp + fn_, "recall", &mut undefined);
    let specificity = ratio(tn, tn + fp, "specificity", &mut undefined);
    let f_measure = ratio(2.0 * tp, 2.0 * tp + fp + fn_, "f_measure", &mut undefined);
    let jaccard = ratio(tp, tp + fp + fn_, "jaccard", &mut undefined);
    let den = ((tp + fp) * (tp + fn_) * (tn + fp) * (tn + fn_)).sqrt();
    let mcc = ratio(tp * tn - fp * fn_, den, "mcc", &mut undefined).clamp(-1.0, 1.0);
    if undefined.iter().any(|n| n == "recall") {
        undefined.push("sensitivity".into());
    }
    Metrics {
        accuracy,
        precision,
        recall,
        sensitivity: recall,
        specificity,
        f_measure,
        jaccard,
        mcc,
        dice: f_measure,
        undefined,
    }
}

/// One row of a metric report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub id: String,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub f_measure: f64,
    pub jaccard: f64,
    pub mcc: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl MetricRecord {
    pub fn new(id: impl Into<String>, c: &ConfusionMatrix) -> Self {
        let m = metric_suite(c);
        Self {
            id: id.into(),
            accuracy: m.accuracy,
            precision: m.precision,
            recall: m.recall,
            sensitivity: m.sensitivity,
            specificity: m.specificity,
            f_measure: m.f_measure,
            jaccard: m.jaccard,
            mcc: m.mcc,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub samples: Vec<MetricRecord>,
    /// Metrics over the pooled confusion matrix of all samples.
    pub aggregate: MetricRecord,
}

impl MetricReport {
    pub fn from_confusions(items: &[(String, ConfusionMatrix)]) -> Self {
        let total: ConfusionMatrix = items.iter().map(|(_, c)| *c).sum();
        Self {
            samples: items
                .iter()
                .map(|(id, c)| MetricRecord::new(id.clone(), c))
                .collect(),
            aggregate: MetricRecord::new("aggregate", &total),
        }
    }

    /// Per-sample rows followed by an `aggregate` row.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in self.samples.iter().chain(std::iter::once(&self.aggregate)) {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json<W: Write>(&self, out: W) -> Result<()> {
        serde_json::to_writer_pretty(out, self)?;
        Ok(())
    }

    /// Writes `metrics.csv` and `metrics.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("metrics.csv"))?)?;
        self.write_json(std::fs::File::create(dir.join("metrics.json"))?)?;
        Ok(())
    }
}
