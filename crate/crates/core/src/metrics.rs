//! Classification metrics: accuracy, confusion matrix, one-vs-rest ROC.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::model::SqueezeNet;
use crate::tensor::Tensor;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        assert!(truth < self.k && predicted < self.k, "class index out of range");
        self.counts[truth * self.k + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.k..(truth + 1) * self.k].iter().sum()
    }

    /// Fraction on the diagonal; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.correct() as f64 / n as f64,
        }
    }

    pub fn to_csv(&self, class_names: &[String]) -> String {
        let name = |i: usize| class_names.get(i).cloned().unwrap_or_else(|| i.to_string());
        let mut out = String::from("true\\predicted");
        for j in 0..self.k {
            write!(out, ",{}", name(j)).unwrap();
        }
        out.push('\n');
        for i in 0..self.k {
            out.push_str(&name(i));
            for j in 0..self.k {
                write!(out, ",{}", self.get(i, j)).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Predictions over one split: per-sample class probabilities plus truth.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub num_classes: usize,
    /// Row-major `samples × num_classes` probabilities.
    pub probs: Vec<f32>,
    pub labels: Vec<usize>,
    pub confusion: ConfusionMatrix,
}

impl Evaluation {
    pub fn from_probs(num_classes: usize, probs: Vec<f32>, labels: Vec<usize>) -> Result<Self> {
        if num_classes == 0 || probs.len() != labels.len() * num_classes {
            return Err(Error::invalid(format!(
                "{} probabilities for {} samples of {num_classes} classes",
                probs.len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::invalid("evaluation needs at least one sample"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
        }
        let mut confusion = ConfusionMatrix::new(num_classes);
        for (row, &label) in probs.chunks(num_classes).zip(&labels) {
            confusion.record(label, argmax(row));
        }
        Ok(Evaluation {
            num_classes,
            probs,
            labels,
            confusion,
        })
    }

    pub fn accuracy(&self) -> f64 {
        self.confusion.accuracy()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.probs.chunks(self.num_classes).map(argmax).collect()
    }

    /// One-vs-rest curve for `class` using its softmax probability as score.
    pub fn roc(&self, class: usize) -> Result<RocCurve> {
        let scores: Vec<f64> = self.probs.chunks(self.num_classes).map(|r| f64::from(r[class])).collect();
        let labels: Vec<bool> = self.labels.iter().map(|&l| l == class).collect();
        roc_curve(&scores, &labels)
    }

    /// Per-class curves; classes absent from the split (or the only class present) are skipped.
    pub fn roc_curves(&self) -> Vec<(usize, RocCurve)> {
        (0..self.num_classes).filter_map(|c| self.roc(c).ok().map(|r| (c, r))).collect()
    }

    pub fn probs_csv(&self, class_names: &[String]) -> String {
        let mut out = String::from("index,label");
        for c in 0..self.num_classes {
            let name = class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            write!(out, ",p_{name}").unwrap();
        }
        out.push('\n');
        for (i, (row, label)) in self.probs.chunks(self.num_classes).zip(&self.labels).enumerate() {
            write!(out, "{i},{label}").unwrap();
            for p in row {
                write!(out, ",{p:.6}").unwrap();
            }
            out.push('\n');
        }
        out
    }
}

/// Runs the model in evaluation mode over `(images, labels)` batches.
pub fn evaluate<I>(model: &SqueezeNet, batches: I) -> Result<Evaluation>
where
    I: IntoIterator<Item = Result<(Tensor, Vec<usize>)>>,
{
    let mut probs = Vec::new();
    let mut labels = Vec::new();
    for batch in batches {
        let (images, batch_labels) = batch?;
        probs.extend_from_slice(model.predict(&images)?.data());
        labels.extend(batch_labels);
    }
    Evaluation::from_probs(model.spec().num_classes, probs, labels)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Scores `>= threshold` are called positive; `+inf` for the origin.
    pub threshold: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

impl RocCurve {
    /// Point maximizing `tpr - fpr` (Youden's J); the first one wins ties.
    pub fn youden(&self) -> &RocPoint {
        let mut best = &self.points[0];
        for p in &self.points {
            if p.tpr - p.fpr > best.tpr - best.fpr {
                best = p;
            }
        }
        best
    }
}

/// Threshold sweep from the highest score down, one point per distinct score.
pub fn roc_curve(scores: &[f64], labels: &[bool]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::invalid(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("ROC scores contain NaN"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::invalid("ROC needs both positive and negative samples"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));

    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < order.len() {
        let threshold = scores[order[i]];
        while i < order.len() && scores[order[i]] == threshold {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let prev = points.last().unwrap();
        let (fpr, tpr) = (fp as f64 / neg as f64, tp as f64 / pos as f64);
        auc += (fpr - prev.fpr) * (tpr + prev.tpr) / 2.0;
        points.push(RocPoint { fpr, tpr, threshold });
    }
    Ok(RocCurve { points, auc })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MacroRoc {
    pub auc: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

/// Unweighted means over classes, each at its Youden-optimal threshold.
pub fn macro_roc(curves: &[RocCurve]) -> Result<MacroRoc> {
    if curves.len() < 2 {
        return Err(Error::invalid("macro ROC needs at least two class curves"));
    }
    let n = curves.len() as f64;
    let mut m = MacroRoc {
        auc: 0.0,
        sensitivity: 0.0,
        specificity: 0.0,
    };
    for c in curves {
        let p = c.youden();
        m.auc += c.auc / n;
        m.sensitivity += p.tpr / n;
        m.specificity += (1.0 - p.fpr) / n;
    }
    Ok(m)
}

pub fn roc_points_csv(curves: &[(usize, RocCurve)], class_names: &[String]) -> String {
    let mut out = String::from("class,fpr,tpr,threshold\n");
    for (c, curve) in curves {
        let name = class_names.get(*c).cloned().unwrap_or_else(|| c.to_string());
        for p in &curve.points {
            writeln!(out, "{name},{:.6},{:.6},{:.6}", p.fpr, p.tpr, p.threshold).unwrap();
        }
    }
    out
}

pub fn summary_csv(accuracy: f64, m: &MacroRoc) -> String {
    format!(
        "accuracy,macro_auc,sensitivity,specificity\n{accuracy:.6},{:.6},{:.6},{:.6}\n",
        m.auc, m.sensitivity, m.specificity
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_from_counts() {
        let mut cm = ConfusionMatrix::new(2);
        for i in 0..1000 {
            cm.record(0, usize::from(i >= 962));
        }
        assert!((cm.accuracy() - 0.962).abs() < 1e-12);
        assert_eq!(cm.row_sum(0), 1000);
    }

    #[test]
    fn perfect_and_swapped_rankings() {
        let s = [0.9, 0.8, 0.3, 0.1];
        assert_eq!(roc_curve(&s, &[true, true, false, false]).unwrap().auc, 1.0);
        assert_eq!(roc_curve(&s, &[true, false, true, false]).unwrap().auc, 0.75);
    }

    #[test]
    fn constant_scores_give_diagonal() {
        let r = roc_curve(&[0.4; 6], &[true, false, true, false, false, true]).unwrap();
        assert_eq!(r.points.len(), 2);
        assert_eq!(r.auc, 0.5);
    }

    #[test]
    fn single_class_rejected() {
        assert!(roc_curve(&[0.1, 0.2], &[true, true]).is_err());
        assert!(roc_curve(&[0.1, 0.2], &[false, false]).is_err());
    }

    #[test]
    fn macro_means() {
        let perfect = roc_curve(&[0.9, 0.1], &[true, false]).unwrap();
        let m = macro_roc(&[perfect.clone(), perfect.clone()]).unwrap();
        assert_eq!((m.auc, m.sensitivity, m.specificity), (1.0, 1.0, 1.0));
        let mut weak = perfect.clone();
        weak.auc = 0.6;
        assert!((macro_roc(&[weak, perfect]).unwrap().auc - 0.8).abs() < 1e-12);
        assert!(macro_roc(&[roc_curve(&[0.9, 0.1], &[true, false]).unwrap()]).is_err());
    }

    #[test]
    fn evaluation_rejects_bad_shapes() {
        assert!(Evaluation::from_probs(2, vec![0.5; 3], vec![0, 1]).is_err());
        assert!(Evaluation::from_probs(2, vec![], vec![]).is_err());
        assert!(Evaluation::from_probs(2, vec![0.5; 2], vec![2]).is_err());
    }
}
