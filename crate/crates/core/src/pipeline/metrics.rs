//! Accuracy / macro-F1 evaluation with per-task breakdown, and the
//! explanation plausibility score.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pipeline::dataset::Task;

/// One scored prediction joined with its gold label.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalEntry {
    pub id: String,
    pub p_hat: f64,
    pub pred_label: u8,
    pub gold_label: u8,
    pub task: Option<Task>,
}

/// Confusion counts, rows = gold, cols = predicted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    fn add(&mut self, gold: u8, pred: u8) {
        match (gold, pred) {
            (1, 1) => self.tp += 1,
            (0, 0) => self.tn += 1,
            (0, 1) => self.fp += 1,
            _ => self.fn_ += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// Unweighted mean of the per-class F1 scores; a class with zero
    /// precision + recall contributes 0.
    pub fn macro_f1(&self) -> f64 {
        let f1 = |tp: u64, fp: u64, fn_: u64| -> f64 {
            let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        };
        // Class 1 as positive, then class 0 as positive.
        (f1(self.tp, self.fp, self.fn_) + f1(self.tn, self.fn_, self.fp)) / 2.0
    }
}

/// Scores for one task group, percentages in [0, 100].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskScores {
    pub accuracy_pct: f64,
    pub macro_f1_pct: f64,
    pub confusion: Confusion,
    pub count: u64,
}

impl TaskScores {
    fn from_confusion(c: Confusion) -> TaskScores {
        TaskScores {
            accuracy_pct: 100.0 * c.accuracy(),
            macro_f1_pct: 100.0 * c.macro_f1(),
            confusion: c,
            count: c.total(),
        }
    }
}

/// Per-task scores plus their unweighted macro-average. Records without a
/// task fall into the pseudo-task "unspecified" and participate in the
/// average like any other group.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall_accuracy_pct: f64,
    pub overall_macro_f1_pct: f64,
    pub per_task: BTreeMap<String, TaskScores>,
    pub total: u64,
}

/// Evaluate predictions against gold labels. Overall scores are the
/// unweighted mean over the task groups present.
pub fn evaluate(entries: &[EvalEntry]) -> Result<EvalReport> {
    if entries.is_empty() {
        return Err(Error::Data("evaluate over an empty prediction set".into()));
    }
    let mut by_task: BTreeMap<String, Confusion> = BTreeMap::new();
    for e in entries {
        if e.gold_label > 1 || e.pred_label > 1 {
            return Err(Error::Data(format!(
                "prediction '{}' carries a non-binary label",
                e.id
            )));
        }
        let key = e.task.map_or("unspecified".to_string(), |t| t.name().to_string());
        by_task.entry(key).or_default().add(e.gold_label, e.pred_label);
    }
    let per_task: BTreeMap<String, TaskScores> = by_task
        .into_iter()
        .map(|(k, c)| (k, TaskScores::from_confusion(c)))
        .collect();
    let n_tasks = per_task.len() as f64;
    let overall_accuracy_pct =
        per_task.values().map(|t| t.accuracy_pct).sum::<f64>() / n_tasks;
    let overall_macro_f1_pct =
        per_task.values().map(|t| t.macro_f1_pct).sum::<f64>() / n_tasks;
    Ok(EvalReport {
        overall_accuracy_pct,
        overall_macro_f1_pct,
        per_task,
        total: entries.len() as u64,
    })
}

impl EvalReport {
    /// Aligned text table, one row per task plus the overall line.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<16} {:>8} {:>10} {:>8} {:>6} {:>6} {:>6} {:>6}\n",
            "task", "acc(%)", "macroF1(%)", "count", "tp", "tn", "fp", "fn"
        ));
        for (name, t) in &self.per_task {
            out.push_str(&format!(
                "{:<16} {:>8.2} {:>10.2} {:>8} {:>6} {:>6} {:>6} {:>6}\n",
                name,
                t.accuracy_pct,
                t.macro_f1_pct,
                t.count,
                t.confusion.tp,
                t.confusion.tn,
                t.confusion.fp,
                t.confusion.fn_
            ));
        }
        out.push_str(&format!(
            "{:<16} {:>8.2} {:>10.2} {:>8}\n",
            "overall", self.overall_accuracy_pct, self.overall_macro_f1_pct, self.total
        ));
        out
    }
}

/// Lower-case, strip punctuation to spaces, split on whitespace.
fn eps_tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() { c } else { ' ' })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

/// Explanation plausibility: cosine similarity of token-count vectors over
/// the union vocabulary of the two strings. Count vectors are nonnegative,
/// so the score lies in [0, 1].
pub fn eps(explanation: &str, gold_rationale: &str) -> Result<f64> {
    let a = eps_tokens(explanation);
    let b = eps_tokens(gold_rationale);
    if a.is_empty() || b.is_empty() {
        return Err(Error::Data(
            "eps over an empty string after normalization".into(),
        ));
    }
    let mut counts: BTreeMap<&str, (f64, f64)> = BTreeMap::new();
    for t in &a {
        counts.entry(t).or_default().0 += 1.0;
    }
    for t in &b {
        counts.entry(t).or_default().1 += 1.0;
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (ca, cb) in counts.values() {
        dot += ca * cb;
        na += ca * ca;
        nb += cb * cb;
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, pred: u8, gold: u8, task: Option<Task>) -> EvalEntry {
        EvalEntry {
            id: id.into(),
            p_hat: if pred == 1 { 0.9 } else { 0.1 },
            pred_label: pred,
            gold_label: gold,
            task,
        }
    }

    #[test]
    fn all_correct_is_hundred() {
        let entries = vec![
            entry("a", 1, 1, None),
            entry("b", 0, 0, None),
            entry("c", 1, 1, None),
        ];
        let r = evaluate(&entries).unwrap();
        assert_eq!(r.overall_accuracy_pct, 100.0);
        assert_eq!(r.overall_macro_f1_pct, 100.0);
    }

    #[test]
    fn all_predict_one_on_balanced_labels() {
        let entries = vec![
            entry("a", 1, 1, None),
            entry("b", 1, 0, None),
            entry("c", 1, 1, None),
            entry("d", 1, 0, None),
        ];
        let r = evaluate(&entries).unwrap();
        assert!((r.overall_accuracy_pct - 50.0).abs() < 1e-9);
        // Hand-computed: class1 F1 = 2/3, class0 F1 = 0, macro = 1/3.
        assert!((r.overall_macro_f1_pct - 100.0 / 3.0).abs() < 0.01);
    }

    /// Independent confusion-matrix implementation for the oracle check.
    pub(crate) fn oracle_scores(entries: &[EvalEntry]) -> (f64, f64) {
        let mut groups: BTreeMap<String, Vec<&EvalEntry>> = BTreeMap::new();
        for e in entries {
            let k = e.task.map_or("unspecified".into(), |t| t.name().to_string());
            groups.entry(k).or_default().push(e);
        }
        let mut accs = Vec::new();
        let mut f1s = Vec::new();
        for (_, es) in groups {
            let n = es.len() as f64;
            let correct = es.iter().filter(|e| e.pred_label == e.gold_label).count() as f64;
            accs.push(100.0 * correct / n);
            let mut class_f1 = Vec::new();
            for class in [1u8, 0u8] {
                let tp = es
                    .iter()
                    .filter(|e| e.pred_label == class && e.gold_label == class)
                    .count() as f64;
                let pred_pos = es.iter().filter(|e| e.pred_label == class).count() as f64;
                let gold_pos = es.iter().filter(|e| e.gold_label == class).count() as f64;
                let p = if pred_pos == 0.0 { 0.0 } else { tp / pred_pos };
                let r = if gold_pos == 0.0 { 0.0 } else { tp / gold_pos };
                class_f1.push(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) });
            }
            f1s.push(100.0 * (class_f1[0] + class_f1[1]) / 2.0);
        }
        (
            accs.iter().sum::<f64>() / accs.len() as f64,
            f1s.iter().sum::<f64>() / f1s.len() as f64,
        )
    }

    #[test]
    fn evaluate_matches_independent_oracle_on_random_sets() {
        let mut rng = crate::numerics::Rng::new(99);
        let tasks = [
            None,
            Some(Task::Harmfulness),
            Some(Task::Hatefulness),
            Some(Task::Misogyny),
            Some(Task::Offensiveness),
            Some(Task::Sarcasm),
        ];
        for round in 0..200 {
            let n = 2 + rng.below(40);
            let entries: Vec<EvalEntry> = (0..n)
                .map(|i| {
                    entry(
                        &format!("r{round}_{i}"),
                        rng.below(2) as u8,
                        rng.below(2) as u8,
                        tasks[rng.below(tasks.len())],
                    )
                })
                .collect();
            let r = evaluate(&entries).unwrap();
            let (acc, f1) = oracle_scores(&entries);
            assert!((r.overall_accuracy_pct - acc).abs() < 1e-9);
            assert!((r.overall_macro_f1_pct - f1).abs() < 1e-9);
        }
    }

    #[test]
    fn evaluate_rejects_empty() {
        assert!(evaluate(&[]).is_err());
    }

    #[test]
    fn eps_identical_and_disjoint() {
        assert!((eps("Detected pepe symbol", "detected PEPE symbol!").unwrap() - 1.0).abs() < 1e-12);
        assert!(eps("alpha beta", "gamma delta").unwrap().abs() < 1e-12);
        assert!(eps("...", "x").is_err());
    }

    #[test]
    fn eps_matches_count_vector_oracle() {
        let a = "detected pepe symbol";
        let b = "pepe symbol detected clearly";
        let got = eps(a, b).unwrap();
        // Hand-built count vectors over the union vocabulary
        // {clearly, detected, pepe, symbol}: a = [0,1,1,1], b = [1,1,1,1].
        let dot = 3.0;
        let na = (3.0f64).sqrt();
        let nb = (4.0f64).sqrt();
        assert!((got - dot / (na * nb)).abs() < 1e-12);
    }

    #[test]
    fn table_render_is_stable() {
        let entries = vec![
            entry("a", 1, 1, Some(Task::Sarcasm)),
            entry("b", 0, 1, Some(Task::Misogyny)),
        ];
        let r = evaluate(&entries).unwrap();
        let table = r.to_table();
        assert!(table.contains("sarcasm"));
        assert!(table.contains("misogyny"));
        assert!(table.contains("overall"));
    }
}
