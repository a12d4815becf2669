#![allow(dead_code)]
//! Brute-force reference implementations, written without the library's
//! helpers.

use symrefine::corpus::SymptomLabel;

pub const LABELS: [SymptomLabel; 3] = [SymptomLabel::Absent, SymptomLabel::Unknown, SymptomLabel::Present];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleScores {
    pub accuracy: f64,
    pub precision: [f64; 3],
    pub recall: [f64; 3],
    pub f1: [f64; 3],
    pub macro_f1: f64,
}

fn safe_div(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        0.0
    } else {
        a / b
    }
}

/// `None` predictions are wrong for every class and never count as a
/// prediction of any class.
pub fn score(pairs: &[(SymptomLabel, Option<SymptomLabel>)]) -> OracleScores {
    let n = pairs.len() as f64;
    let correct = pairs.iter().filter(|(t, p)| Some(*t) == *p).count() as f64;
    let mut precision = [0.0; 3];
    let mut recall = [0.0; 3];
    let mut f1 = [0.0; 3];
    for (i, class) in LABELS.iter().enumerate() {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fneg = 0.0;
        for (t, p) in pairs {
            let predicted = *p == Some(*class);
            let actual = t == class;
            match (actual, predicted) {
                (true, true) => tp += 1.0,
                (false, true) => fp += 1.0,
                (true, false) => fneg += 1.0,
                (false, false) => {}
            }
        }
        precision[i] = safe_div(tp, tp + fp);
        recall[i] = safe_div(tp, tp + fneg);
        f1[i] = safe_div(2.0 * precision[i] * recall[i], precision[i] + recall[i]);
    }
    OracleScores {
        accuracy: safe_div(correct, n),
        precision,
        recall,
        f1,
        macro_f1: f1.iter().sum::<f64>() / 3.0,
    }
}

/// Exhaustive nearest neighbours: every entry scored, fully sorted, cut.
pub fn knn(entries: &[(String, Vec<f64>)], query: &[f64], k: usize) -> Vec<(String, f64)> {
    let qn = query.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut all: Vec<(String, f64)> = entries
        .iter()
        .map(|(id, v)| {
            let dot: f64 = v.iter().zip(query).map(|(a, b)| a * b).sum();
            let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            (id.clone(), dot / (vn * qn))
        })
        .collect();
    all.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}
