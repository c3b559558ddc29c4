//! Confusion matrix, accuracy, per-class precision/recall, macro AUC.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
    class_names: Vec<String>,
}

pub fn confusion(true_labels: &[usize], predicted: &[usize], class_names: &[String]) -> Result<ConfusionMatrix> {
    let k = class_names.len();
    if true_labels.len() != predicted.len() {
        return Err(Error::Data(format!(
            "{} true labels but {} predictions",
            true_labels.len(),
            predicted.len()
        )));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (&t, &p) in true_labels.iter().zip(predicted) {
        if t >= k || p >= k {
            return Err(Error::Data(format!("label pair ({t}, {p}) outside {k} classes")));
        }
        counts[t][p] += 1;
    }
    Ok(ConfusionMatrix {
        counts,
        class_names: class_names.to_vec(),
    })
}

impl ConfusionMatrix {
    /// Builds a matrix from explicit counts.
    pub fn from_counts(counts: Vec<Vec<u64>>, class_names: &[String]) -> Result<Self> {
        let k = class_names.len();
        if counts.len() != k || counts.iter().any(|r| r.len() != k) {
            return Err(Error::Data(format!("confusion counts must be {k}x{k}")));
        }
        Ok(ConfusionMatrix {
            counts,
            class_names: class_names.to_vec(),
        })
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        self.counts.iter().map(|r| r[j]).sum()
    }

    /// `None` when the matrix is empty.
    pub fn accuracy(&self) -> Option<f64> {
        ratio(self.trace(), self.total())
    }

    /// Undefined for a class that was never predicted.
    pub fn precision(&self, j: usize) -> Option<f64> {
        ratio(self.counts[j][j], self.col_sum(j))
    }

    /// Undefined for a class absent from the true labels.
    pub fn recall(&self, i: usize) -> Option<f64> {
        ratio(self.counts[i][i], self.row_sum(i))
    }

    /// Header row and column carry class names.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\predicted");
        for n in &self.class_names {
            let _ = write!(s, ",{n}");
        }
        s.push('\n');
        for (n, row) in self.class_names.iter().zip(&self.counts) {
            s.push_str(n);
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Per-class AUCs plus their mean over the classes where it is defined.
#[derive(Debug, Clone, PartialEq)]
pub struct AucReport {
    pub per_class: Vec<Option<f64>>,
    pub macro_auc: Option<f64>,
    /// Set when at least one class had no positives or no negatives.
    pub partial: bool,
}

/// One-vs-rest AUC of `scores` for the positives flagged in `positive`,
/// via the rank-sum formula with average ranks for ties.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Doubled ranks keep tie averages integral.
    let mut rank_sum2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg2 = (i + 1 + j + 1) as u128;
        for &idx in &order[i..=j] {
            if positive[idx] {
                rank_sum2 += avg2;
            }
        }
        i = j + 1;
    }
    let n_pos = n_pos as u128;
    let u2 = rank_sum2 - n_pos * (n_pos + 1);
    Some(u2 as f64 / (2 * n_pos * n_neg as u128) as f64)
}

/// Unweighted one-vs-rest macro AUC over the columns of `[n, k]` scores.
pub fn macro_auc<T: Scalar>(scores: &Tensor<T>, true_labels: &[usize]) -> Result<AucReport> {
    let (n, k) = scores.dims2()?;
    if true_labels.len() != n {
        return Err(Error::Data(format!("{n} score rows but {} labels", true_labels.len())));
    }
    if let Some(&bad) = true_labels.iter().find(|&&l| l >= k) {
        return Err(Error::Data(format!("label {bad} outside {k} classes")));
    }
    let data = scores.data();
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let col: Vec<f64> = (0..n).map(|i| data[i * k + c].to_f64()).collect();
        let pos: Vec<bool> = true_labels.iter().map(|&l| l == c).collect();
        per_class.push(binary_auc(&col, &pos));
    }
    let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(AucReport {
        partial: defined.len() < k,
        per_class,
        macro_auc,
    })
}

/// Index of the largest entry in each row; ties go to the lowest index.
pub fn argmax_rows<T: Scalar>(scores: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, k) = scores.dims2()?;
    let d = scores.data();
    Ok((0..n)
        .map(|i| {
            let row = &d[i * k..(i + 1) * k];
            let mut best = 0;
            for j in 1..k {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Everything reported for one split.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mean_loss: f64,
    pub accuracy: Option<f64>,
    pub precision: Vec<Option<f64>>,
    pub recall: Vec<Option<f64>>,
    pub auc: AucReport,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn new<T: Scalar>(probabilities: &Tensor<T>, labels: &[usize], mean_loss: f64, class_names: &[String]) -> Result<Self> {
        let predicted = argmax_rows(probabilities)?;
        let cm = confusion(labels, &predicted, class_names)?;
        let k = cm.k();
        Ok(MetricsReport {
            mean_loss,
            accuracy: cm.accuracy(),
            precision: (0..k).map(|j| cm.precision(j)).collect(),
            recall: (0..k).map(|i| cm.recall(i)).collect(),
            auc: macro_auc(probabilities, labels)?,
            confusion: cm,
        })
    }
}

/// Marker written for undefined values.
pub const UNDEFINED: &str = "NA";

pub fn format_metric(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => UNDEFINED.to_string(),
    }
}

/// `epoch,split,loss,accuracy,precision_<c>...,recall_<c>...,macro_auc`.
pub fn metrics_header(class_names: &[String]) -> String {
    let mut s = String::from("epoch,split,loss,accuracy");
    for n in class_names {
        let _ = write!(s, ",precision_{n}");
    }
    for n in class_names {
        let _ = write!(s, ",recall_{n}");
    }
    s.push_str(",macro_auc");
    s
}

pub fn metrics_row(epoch: usize, split: &str, r: &MetricsReport) -> String {
    let mut s = format!("{epoch},{split},{:.6},{}", r.mean_loss, format_metric(r.accuracy));
    for p in r.precision.iter().chain(&r.recall) {
        s.push(',');
        s.push_str(&format_metric(*p));
    }
    s.push(',');
    s.push_str(&format_metric(r.auc.macro_auc));
    s
}

/// Human-readable block printed by `eval`.
pub fn render_report(r: &MetricsReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "samples   {}", r.confusion.total());
    let _ = writeln!(s, "loss      {:.6}", r.mean_loss);
    let _ = writeln!(s, "accuracy  {}", format_metric(r.accuracy));
    for (j, n) in r.confusion.class_names().iter().enumerate() {
        let _ = writeln!(
            s,
            "{n:<20} precision {}  recall {}  auc {}",
            format_metric(r.precision[j]),
            format_metric(r.recall[j]),
            format_metric(r.auc.per_class[j])
        );
    }
    let _ = write!(s, "macro_auc {}", format_metric(r.auc.macro_auc));
    if r.auc.partial {
        s.push_str(" (over classes present only)");
    }
    s.push('\n');
    s
}
