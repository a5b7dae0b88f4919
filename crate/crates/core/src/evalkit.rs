//! Confusion matrices, accuracy and macro-averaged precision/recall/F1.
//!
//! Any ratio with a zero denominator is taken as 0 and still counts towards
//! the macro mean.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::io::{self, BufRead};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("predictions ({preds}) and truths ({truths}) differ in length")]
    LengthMismatch { preds: usize, truths: usize },
    #[error("no labels to evaluate")]
    Empty,
    #[error("sample id {0:?} missing from one side")]
    MissingId(String),
    #[error("sample id {0:?} appears more than once")]
    DuplicateId(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Rows are true classes, columns predicted classes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes.len()).map(|i| self.counts[i][i]).sum()
    }
}

/// Tally predictions against truths over the sorted union of labels.
pub fn confusion<S: AsRef<str>>(preds: &[S], truths: &[S]) -> Result<ConfusionMatrix, EvalError> {
    if preds.len() != truths.len() {
        return Err(EvalError::LengthMismatch {
            preds: preds.len(),
            truths: truths.len(),
        });
    }
    if preds.is_empty() {
        return Err(EvalError::Empty);
    }
    let classes: Vec<String> = preds
        .iter()
        .chain(truths)
        .map(|s| s.as_ref().to_string())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: HashMap<&str, usize> = classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let mut counts = vec![vec![0u64; classes.len()]; classes.len()];
    for (p, t) in preds.iter().zip(truths) {
        counts[index[t.as_ref()]][index[p.as_ref()]] += 1;
    }
    Ok(ConfusionMatrix { classes, counts })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub per_class: BTreeMap<String, ClassMetrics>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

pub fn macro_metrics(m: &ConfusionMatrix) -> MetricReport {
    let k = m.classes.len();
    let mut per_class = BTreeMap::new();
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = m.counts[c][c] as f64;
        let predicted: u64 = (0..k).map(|r| m.counts[r][c]).sum();
        let support: u64 = m.counts[c].iter().sum();
        let precision = ratio(tp, predicted as f64);
        let recall = ratio(tp, support as f64);
        let f1 = ratio(2.0 * precision * recall, precision + recall);
        sp += precision;
        sr += recall;
        sf += f1;
        per_class.insert(
            m.classes[c].clone(),
            ClassMetrics {
                precision,
                recall,
                f1,
                support,
            },
        );
    }
    let kf = k.max(1) as f64;
    MetricReport {
        accuracy: ratio(m.trace() as f64, m.total() as f64),
        macro_precision: sp / kf,
        macro_recall: sr / kf,
        macro_f1: sf / kf,
        per_class,
    }
}

/// Macro metrics straight from label lists.
pub fn evaluate_labels<S: AsRef<str>>(preds: &[S], truths: &[S]) -> Result<MetricReport, EvalError> {
    Ok(macro_metrics(&confusion(preds, truths)?))
}

/// One line of a predictions or truths file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledId {
    pub sample_id: String,
    pub label: String,
}

/// Read `{sample_id, label}` lines. Blank lines and lines without a
/// `sample_id` (artifact headers) are skipped; repeated ids are an error.
pub fn read_labels_jsonl<R: BufRead>(input: R) -> Result<Vec<LabeledId>, EvalError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |e: serde_json::Error| EvalError::Parse {
            line: n + 1,
            msg: e.to_string(),
        };
        let value: serde_json::Value = serde_json::from_str(&line).map_err(parse_err)?;
        if value.get("sample_id").is_none() {
            continue;
        }
        let rec: LabeledId = serde_json::from_value(value).map_err(parse_err)?;
        if !seen.insert(rec.sample_id.clone()) {
            return Err(EvalError::DuplicateId(rec.sample_id));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Join predictions to truths by sample id and compute the report.
pub fn evaluate_run(preds: &[LabeledId], truths: &[LabeledId]) -> Result<MetricReport, EvalError> {
    let mut by_id: BTreeMap<&str, &str> = BTreeMap::new();
    for p in preds {
        if by_id.insert(&p.sample_id, &p.label).is_some() {
            return Err(EvalError::DuplicateId(p.sample_id.clone()));
        }
    }
    let mut truth_ids = BTreeSet::new();
    let mut pairs: Vec<(&str, &str, &str)> = Vec::with_capacity(truths.len());
    for t in truths {
        if !truth_ids.insert(t.sample_id.as_str()) {
            return Err(EvalError::DuplicateId(t.sample_id.clone()));
        }
        let p = by_id
            .get(t.sample_id.as_str())
            .ok_or_else(|| EvalError::MissingId(t.sample_id.clone()))?;
        pairs.push((&t.sample_id, p, &t.label));
    }
    if let Some(extra) = by_id.keys().find(|id| !truth_ids.contains(*id)) {
        return Err(EvalError::MissingId(extra.to_string()));
    }
    // id order keeps the report independent of file line order
    pairs.sort_unstable();
    let p: Vec<&str> = pairs.iter().map(|x| x.1).collect();
    let t: Vec<&str> = pairs.iter().map(|x| x.2).collect();
    evaluate_labels(&p, &t)
}

/// Fixed-width text table of a report.
pub fn render_text(report: &MetricReport) -> String {
    let width = report
        .per_class
        .keys()
        .map(|k| k.chars().count())
        .max()
        .unwrap_or(0)
        .max(5);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<width$}  {:>9}  {:>9}  {:>9}  {:>7}",
        "class", "precision", "recall", "f1", "support"
    );
    for (name, m) in &report.per_class {
        let _ = writeln!(
            s,
            "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
            name, m.precision, m.recall, m.f1, m.support
        );
    }
    let support: u64 = report.per_class.values().map(|m| m.support).sum();
    let _ = writeln!(
        s,
        "{:<width$}  {:>9.4}  {:>9.4}  {:>9.4}  {:>7}",
        "macro", report.macro_precision, report.macro_recall, report.macro_f1, support
    );
    let _ = writeln!(s, "accuracy {:.4}", report.accuracy);
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn ids(pairs: &[(&str, &str)]) -> Vec<LabeledId> {
        pairs
            .iter()
            .map(|(i, l)| LabeledId {
                sample_id: i.to_string(),
                label: l.to_string(),
            })
            .collect()
    }

    #[test]
    fn diagonal_confusion() {
        let m = confusion(&["a", "b"], &["a", "b"]).unwrap();
        assert_eq!(m.counts, vec![vec![1, 0], vec![0, 1]]);
        let r = macro_metrics(&m);
        assert_eq!((r.accuracy, r.macro_precision, r.macro_recall, r.macro_f1), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn off_diagonal_cell() {
        let m = confusion(&["a", "a"], &["a", "b"]).unwrap();
        assert_eq!(m.counts[1][0], 1);
    }

    #[test]
    fn prediction_only_label_gets_row_and_col() {
        let m = confusion(&["z", "a"], &["a", "a"]).unwrap();
        assert_eq!(m.classes, vec!["a", "z"]);
        assert_eq!(m.counts, vec![vec![1, 1], vec![0, 0]]);
        let r = macro_metrics(&m);
        assert_eq!(r.per_class["z"].f1, 0.0);
        assert_eq!(r.per_class["z"].support, 0);
    }

    #[test]
    fn errors() {
        assert!(matches!(confusion(&["a"], &["a", "b"]), Err(EvalError::LengthMismatch { .. })));
        assert!(matches!(confusion::<&str>(&[], &[]), Err(EvalError::Empty)));
    }

    #[test]
    fn two_class_hand_case() {
        let m = ConfusionMatrix {
            classes: vec!["a".into(), "b".into()],
            counts: vec![vec![8, 2], vec![3, 7]],
        };
        let r = macro_metrics(&m);
        assert_abs_diff_eq!(r.per_class["a"].precision, 8.0 / 11.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.per_class["a"].recall, 0.8, epsilon = 1e-15);
        assert_abs_diff_eq!(r.per_class["a"].f1, 16.0 / 21.0, epsilon = 1e-12);
        assert_abs_diff_eq!(r.per_class["b"].precision, 7.0 / 9.0, epsilon = 1e-15);
        assert_abs_diff_eq!(r.per_class["b"].recall, 0.7, epsilon = 1e-15);
        assert_abs_diff_eq!(r.per_class["b"].f1, 0.736842105, epsilon = 1e-9);
        assert_abs_diff_eq!(r.macro_f1, 0.7494, epsilon = 1e-4);
        assert_eq!(r.accuracy, 0.75);
    }

    #[test]
    fn absent_class_counts_as_zero() {
        let m = ConfusionMatrix {
            classes: vec!["a".into(), "ghost".into()],
            counts: vec![vec![4, 0], vec![0, 0]],
        };
        let r = macro_metrics(&m);
        assert_eq!(r.per_class["ghost"].precision, 0.0);
        assert_eq!(r.macro_f1, 0.5);
    }

    #[test]
    fn run_join() {
        let truths = ids(&[("1", "a"), ("2", "b"), ("3", "a")]);
        assert_eq!(evaluate_run(&truths, &truths).unwrap().accuracy, 1.0);

        let shuffled = ids(&[("3", "a"), ("1", "a"), ("2", "b")]);
        assert_eq!(evaluate_run(&shuffled, &truths).unwrap(), evaluate_run(&truths, &truths).unwrap());

        let missing = ids(&[("1", "a"), ("3", "a")]);
        match evaluate_run(&missing, &truths) {
            Err(EvalError::MissingId(id)) => assert_eq!(id, "2"),
            other => panic!("{other:?}"),
        }
        let dup = ids(&[("1", "a"), ("1", "a"), ("2", "b"), ("3", "a")]);
        assert!(matches!(evaluate_run(&dup, &truths), Err(EvalError::DuplicateId(_))));
    }

    #[test]
    fn reader_rejects_duplicates_and_skips_headers() {
        let text = "{\"artifact\":{}}\n{\"sample_id\":\"1\",\"label\":\"a\"}\n\n";
        assert_eq!(read_labels_jsonl(text.as_bytes()).unwrap().len(), 1);
        let dup = "{\"sample_id\":\"1\",\"label\":\"a\"}\n{\"sample_id\":\"1\",\"label\":\"b\"}\n";
        assert!(matches!(read_labels_jsonl(dup.as_bytes()), Err(EvalError::DuplicateId(_))));
    }

    #[test]
    fn text_table_has_macro_row() {
        let r = evaluate_labels(&["a", "b"], &["a", "a"]).unwrap();
        let t = render_text(&r);
        assert!(t.contains("macro"));
        assert!(t.contains("accuracy 0.5000"));
    }
}
