//! Confusion matrices and the classification metrics derived from them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub classes: Vec<String>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>, classes: Vec<String>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::Data("confusion matrix must be square and non-empty".into()));
        }
        if classes.len() != k {
            return Err(Error::Data(format!("{} class names for a {k}x{k} matrix", classes.len())));
        }
        Ok(Self { counts, classes })
    }

    pub fn zeros(classes: Vec<String>) -> Self {
        let k = classes.len();
        Self {
            counts: vec![vec![0; k]; k],
            classes,
        }
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        let k = self.k();
        if truth >= k || pred >= k {
            return Err(Error::Data(format!("label pair ({truth}, {pred}) outside 0..{k}")));
        }
        self.counts[truth][pred] += 1;
        Ok(())
    }

    /// Elementwise sum; class lists must agree.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Data("cannot merge matrices over different classes".into()));
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
        Ok(())
    }
}

pub fn confusion_matrix(truths: &[usize], preds: &[usize], classes: &[String]) -> Result<ConfusionMatrix> {
    if truths.len() != preds.len() {
        return Err(Error::Data(format!(
            "{} truths but {} predictions",
            truths.len(),
            preds.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::Data("no labels to tabulate".into()));
    }
    let mut m = ConfusionMatrix::zeros(classes.to_vec());
    for (&t, &p) in truths.iter().zip(preds) {
        m.record(t, p)?;
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Names the metrics that hit a zero denominator and were set to 0.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: f64,
    /// Set when chance agreement is 1 and the ratio is undefined.
    pub degenerate: bool,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn per_class_metrics(m: &ConfusionMatrix) -> Result<(Vec<ClassMetrics>, MacroMetrics, f64)> {
    let total = m.total();
    if total == 0 {
        return Err(Error::Data("confusion matrix is empty".into()));
    }
    let per_class: Vec<ClassMetrics> = (0..m.k())
        .map(|c| {
            let tp = m.counts[c][c];
            let mut flags = Vec::new();
            let precision = ratio(tp, m.col_sum(c)).unwrap_or_else(|| {
                flags.push("precision".to_string());
                0.0
            });
            let recall = ratio(tp, m.row_sum(c)).unwrap_or_else(|| {
                flags.push("recall".to_string());
                0.0
            });
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                flags.push("f1".to_string());
                0.0
            };
            ClassMetrics {
                precision,
                recall,
                f1,
                support: m.row_sum(c),
                flags,
            }
        })
        .collect();
    let supported: Vec<&ClassMetrics> = per_class.iter().filter(|c| c.support > 0).collect();
    let n = supported.len() as f64;
    let macro_avg = MacroMetrics {
        precision: supported.iter().map(|c| c.precision).sum::<f64>() / n,
        recall: supported.iter().map(|c| c.recall).sum::<f64>() / n,
        f1: supported.iter().map(|c| c.f1).sum::<f64>() / n,
    };
    let accuracy = m.trace() as f64 / total as f64;
    Ok((per_class, macro_avg, accuracy))
}

pub fn cohens_kappa(m: &ConfusionMatrix) -> Result<Kappa> {
    let total = m.total();
    if total == 0 {
        return Err(Error::Data("confusion matrix is empty".into()));
    }
    let t = total as f64;
    let p_o = m.trace() as f64 / t;
    let p_e = (0..m.k())
        .map(|c| m.row_sum(c) as f64 * m.col_sum(c) as f64)
        .sum::<f64>()
        / (t * t);
    if p_e == 1.0 {
        return Ok(Kappa {
            value: if p_o == 1.0 { 1.0 } else { 0.0 },
            degenerate: true,
        });
    }
    Ok(Kappa {
        value: (p_o - p_e) / (1.0 - p_e),
        degenerate: false,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub confusion: Vec<Vec<u64>>,
    pub classes: Vec<String>,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
    pub accuracy: f64,
    pub kappa: f64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub kappa_degenerate: bool,
    pub total: u64,
}

impl EvaluationReport {
    pub fn from_matrix(m: &ConfusionMatrix) -> Result<Self> {
        let (per_class, macro_avg, accuracy) = per_class_metrics(m)?;
        let kappa = cohens_kappa(m)?;
        Ok(Self {
            confusion: m.counts.clone(),
            classes: m.classes.clone(),
            per_class,
            macro_avg,
            accuracy,
            kappa: kappa.value,
            kappa_degenerate: kappa.degenerate,
            total: m.total(),
        })
    }

    pub fn matrix(&self) -> Result<ConfusionMatrix> {
        ConfusionMatrix::from_counts(self.confusion.clone(), self.classes.clone())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Per-class precision/recall/F1 rows plus an Average row, 3 decimals.
    pub fn render_table(&self) -> String {
        let width = self.classes.iter().map(String::len).max().unwrap_or(0).max("Average".len());
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:>9}  {:>6}  {:>8}  {:>7}", "Class", "Precision", "Recall", "F1-score", "Support");
        for (name, c) in self.classes.iter().zip(&self.per_class) {
            let _ = writeln!(
                out,
                "{:<width$}  {:>9}  {:>6}  {:>8}  {:>7}",
                name,
                round3(c.precision),
                round3(c.recall),
                round3(c.f1),
                c.support
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>9}  {:>6}  {:>8}  {:>7}",
            "Average",
            round3(self.macro_avg.precision),
            round3(self.macro_avg.recall),
            round3(self.macro_avg.f1),
            self.total
        );
        let _ = writeln!(out, "Accuracy {}  Kappa {}", round3(self.accuracy), round3(self.kappa));
        out
    }
}

/// Three decimals, ties to even in the thousandths digit.
pub fn round3(x: f64) -> String {
    format!("{:.3}", (x * 1000.0).round_ties_even() / 1000.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn m2(counts: [[u64; 2]; 2]) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(counts.iter().map(|r| r.to_vec()).collect(), names(2)).unwrap()
    }

    #[test]
    fn hand_counted_matrix() {
        let m = confusion_matrix(&[0, 0, 1], &[0, 1, 1], &names(2)).unwrap();
        assert_eq!(m.counts, vec![vec![1, 1], vec![0, 1]]);
        assert!(confusion_matrix(&[], &[], &names(2)).is_err());
        assert!(confusion_matrix(&[2], &[0], &names(2)).is_err());
    }

    #[test]
    fn two_class_example() {
        let m = m2([[40, 10], [20, 30]]);
        let (pc, _, acc) = per_class_metrics(&m).unwrap();
        assert_eq!(acc, 0.7);
        assert!((pc[0].precision - 40.0 / 60.0).abs() < 1e-15);
        assert_eq!(pc[1].precision, 0.75);
        assert_eq!(pc[0].recall, 0.8);
        assert_eq!(pc[1].recall, 0.6);
        let k = cohens_kappa(&m).unwrap();
        assert!((k.value - 0.4).abs() < 1e-12);
        assert_eq!(cohens_kappa(&m2([[25, 25], [25, 25]])).unwrap().value, 0.0);
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let m = m2([[5, 0], [5, 0]]);
        let (pc, macro_avg, _) = per_class_metrics(&m).unwrap();
        assert_eq!(pc[1].precision, 0.0);
        assert!(pc[1].flags.contains(&"precision".to_string()));
        assert!(macro_avg.precision.is_finite());
    }

    #[test]
    fn unsupported_class_excluded_from_macro() {
        let m = ConfusionMatrix::from_counts(vec![vec![3, 0, 0], vec![0, 2, 0], vec![0, 0, 0]], names(3)).unwrap();
        let (_, macro_avg, _) = per_class_metrics(&m).unwrap();
        assert_eq!(macro_avg.recall, 1.0);
        assert_eq!(macro_avg.precision, 1.0);
    }

    #[test]
    fn degenerate_kappa() {
        let m = m2([[7, 0], [0, 0]]);
        let k = cohens_kappa(&m).unwrap();
        assert!(k.degenerate);
        assert_eq!(k.value, 1.0);
    }

    #[test]
    fn rounding_and_table() {
        assert_eq!(round3(0.9648), "0.965");
        assert_eq!(round3(1.0), "1.000");
        let m = ConfusionMatrix::from_counts(
            (0..6).map(|i| (0..6).map(|j| if i == j { 4 } else { 0 }).collect()).collect(),
            names(6),
        )
        .unwrap();
        let report = EvaluationReport::from_matrix(&m).unwrap();
        let table = report.render_table();
        let avg = table.lines().find(|l| l.starts_with("Average")).unwrap();
        assert_eq!(avg.matches("1.000").count(), 3, "{avg}");
        let back = EvaluationReport::from_json(&report.to_json().unwrap()).unwrap();
        assert_eq!(back.render_table(), table);
        assert_eq!(back, report);
    }

    #[test]
    fn report_json_schema() {
        let report = EvaluationReport::from_matrix(&m2([[40, 10], [20, 30]])).unwrap();
        let v: serde_json::Value = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        for key in ["confusion", "classes", "per_class", "macro", "accuracy", "kappa", "total"] {
            assert!(v.get(key).is_some(), "{key}");
        }
    }

    fn pairs(k: usize) -> impl Strategy<Value = Vec<(usize, usize)>> {
        prop::collection::vec((0..k, 0..k), 1..200)
    }

    proptest! {
        #[test]
        fn brute_force_recount(p in pairs(6)) {
            let (t, q): (Vec<_>, Vec<_>) = p.iter().copied().unzip();
            let m = confusion_matrix(&t, &q, &names(6)).unwrap();
            let (pc, _, acc) = per_class_metrics(&m).unwrap();
            let correct = p.iter().filter(|(a, b)| a == b).count();
            prop_assert_eq!(acc, correct as f64 / p.len() as f64);
            for c in 0..6 {
                let tp = p.iter().filter(|&&(a, b)| a == c && b == c).count();
                let predicted = p.iter().filter(|&&(_, b)| b == c).count();
                let actual = p.iter().filter(|&&(a, _)| a == c).count();
                let prec = if predicted > 0 { tp as f64 / predicted as f64 } else { 0.0 };
                let rec = if actual > 0 { tp as f64 / actual as f64 } else { 0.0 };
                prop_assert_eq!(pc[c].precision, prec);
                prop_assert_eq!(pc[c].recall, rec);
                prop_assert_eq!(pc[c].support, actual as u64);
            }
            // accuracy is the support-weighted mean recall
            let weighted: f64 = pc.iter().map(|c| c.recall * c.support as f64).sum::<f64>() / p.len() as f64;
            prop_assert!((weighted - acc).abs() < 1e-12);
        }

        #[test]
        fn kappa_bounds(p in pairs(4)) {
            let (t, q): (Vec<_>, Vec<_>) = p.iter().copied().unzip();
            let m = confusion_matrix(&t, &q, &names(4)).unwrap();
            let k = cohens_kappa(&m).unwrap();
            let p_o = m.trace() as f64 / m.total() as f64;
            prop_assert!(k.value <= p_o + 1e-12);
            let diagonal = t == q;
            prop_assert_eq!(k.value == 1.0, diagonal);
        }

        #[test]
        fn permutation_invariance(p in pairs(4), perm in Just([0usize, 1, 2, 3]).prop_shuffle()) {
            let (t, q): (Vec<_>, Vec<_>) = p.iter().copied().unzip();
            let m = confusion_matrix(&t, &q, &names(4)).unwrap();
            let tp: Vec<_> = t.iter().map(|&x| perm[x]).collect();
            let qp: Vec<_> = q.iter().map(|&x| perm[x]).collect();
            let mp = confusion_matrix(&tp, &qp, &names(4)).unwrap();
            let (a, _, acc_a) = per_class_metrics(&m).unwrap();
            let (b, _, acc_b) = per_class_metrics(&mp).unwrap();
            prop_assert_eq!(acc_a, acc_b);
            prop_assert!((cohens_kappa(&m).unwrap().value - cohens_kappa(&mp).unwrap().value).abs() < 1e-12);
            for c in 0..4 {
                prop_assert_eq!(&a[c], &b[perm[c]]);
            }
        }
    }
}
