//! Three-class scoring over {-1, 0, 1}.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::corpus::{LabeledPrediction, SymptomLabel};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("no predictions to score")]
    Empty,
    #[error("no ground truth for note `{0}`")]
    MissingTruth(String),
}

/// Counts indexed by (truth, predicted) in label order -1, 0, 1.
///
/// Unparseable predictions land in `unparsed[truth]`: they count towards
/// the row total (and so towards recall denominators and `n`) but never
/// towards a column.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix3 {
    pub counts: [[u64; 3]; 3],
    pub unparsed: [u64; 3],
}

impl ConfusionMatrix3 {
    pub fn record(&mut self, truth: SymptomLabel, predicted: Option<SymptomLabel>) {
        match predicted {
            Some(p) => self.counts[truth.index()][p.index()] += 1,
            None => self.unparsed[truth.index()] += 1,
        }
    }

    pub fn get(&self, truth: SymptomLabel, predicted: SymptomLabel) -> u64 {
        self.counts[truth.index()][predicted.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum::<u64>() + self.unparsed.iter().sum::<u64>()
    }

    pub fn trace(&self) -> u64 {
        (0..3).map(|i| self.counts[i][i]).sum()
    }

    fn row_total(&self, i: usize) -> u64 {
        self.counts[i].iter().sum::<u64>() + self.unparsed[i]
    }

    fn column_total(&self, j: usize) -> u64 {
        (0..3).map(|i| self.counts[i][j]).sum()
    }
}

pub fn confusion(
    preds: &[LabeledPrediction],
    truths: &HashMap<String, SymptomLabel>,
) -> Result<ConfusionMatrix3, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut matrix = ConfusionMatrix3::default();
    for pred in preds {
        let truth = truths
            .get(&pred.note_id)
            .ok_or_else(|| MetricsError::MissingTruth(pred.note_id.clone()))?;
        matrix.record(*truth, pred.predicted);
    }
    Ok(matrix)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(into = "FlatScoreReport", from = "FlatScoreReport")]
pub struct ScoreReport {
    pub accuracy: f64,
    /// Indexed like the matrix: absent, unknown, present.
    pub per_class: [ClassScore; 3],
    pub macro_f1: f64,
    pub n: u64,
}

impl ScoreReport {
    pub fn class(&self, label: SymptomLabel) -> ClassScore {
        self.per_class[label.index()]
    }

    pub fn metric(&self, metric: PrimaryMetric) -> f64 {
        match metric {
            PrimaryMetric::Accuracy => self.accuracy,
            PrimaryMetric::MacroF1 => self.macro_f1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrimaryMetric {
    #[default]
    Accuracy,
    MacroF1,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Scores a matrix. Zero denominators yield 0 and every class takes part
/// in the macro average, present in the batch or not.
///
/// F1 is 2tp / (row + column), which equals the harmonic mean of precision
/// and recall. The macro average is summed as an exact fraction and
/// rounded once.
pub fn score(matrix: &ConfusionMatrix3) -> ScoreReport {
    let n = matrix.total();
    let mut per_class = [ClassScore::default(); 3];
    let mut fractions = [(0u128, 1u128); 3];
    for (i, class) in per_class.iter_mut().enumerate() {
        let tp = matrix.counts[i][i];
        let den = matrix.column_total(i) + matrix.row_total(i);
        if tp > 0 {
            fractions[i] = (2 * tp as u128, den as u128);
        }
        *class = ClassScore {
            precision: ratio(tp, matrix.column_total(i)),
            recall: ratio(tp, matrix.row_total(i)),
            f1: ratio(2 * tp, if tp > 0 { den } else { 0 }),
        };
    }
    let [(a, da), (b, db), (c, dc)] = fractions;
    let num = a * db * dc + b * da * dc + c * da * db;
    let macro_f1 = num as f64 / (3 * da * db * dc) as f64;
    ScoreReport {
        accuracy: ratio(matrix.trace(), n),
        per_class,
        macro_f1,
        n,
    }
}

pub fn score_predictions(
    preds: &[LabeledPrediction],
    truths: &HashMap<String, SymptomLabel>,
) -> Result<ScoreReport, MetricsError> {
    confusion(preds, truths).map(|m| score(&m))
}

#[derive(Serialize, Deserialize)]
struct FlatScoreReport {
    accuracy: f64,
    macro_f1: f64,
    n: u64,
    precision_absent: f64,
    recall_absent: f64,
    f1_absent: f64,
    precision_unknown: f64,
    recall_unknown: f64,
    f1_unknown: f64,
    precision_present: f64,
    recall_present: f64,
    f1_present: f64,
}

impl From<ScoreReport> for FlatScoreReport {
    fn from(r: ScoreReport) -> Self {
        let [a, u, p] = r.per_class;
        Self {
            accuracy: r.accuracy,
            macro_f1: r.macro_f1,
            n: r.n,
            precision_absent: a.precision,
            recall_absent: a.recall,
            f1_absent: a.f1,
            precision_unknown: u.precision,
            recall_unknown: u.recall,
            f1_unknown: u.f1,
            precision_present: p.precision,
            recall_present: p.recall,
            f1_present: p.f1,
        }
    }
}

impl From<FlatScoreReport> for ScoreReport {
    fn from(f: FlatScoreReport) -> Self {
        let class = |precision, recall, f1| ClassScore {
            precision,
            recall,
            f1,
        };
        Self {
            accuracy: f.accuracy,
            macro_f1: f.macro_f1,
            n: f.n,
            per_class: [
                class(f.precision_absent, f.recall_absent, f.f1_absent),
                class(f.precision_unknown, f.recall_unknown, f.f1_unknown),
                class(f.precision_present, f.recall_present, f.f1_present),
            ],
        }
    }
}
