//! Evaluation metrics: per-tag P/R/F1 with macro average, token error rate,
//! turn segmentation with exact-match turn-level P/R/F, and accuracy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagScore {
    pub tag: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagReport {
    pub per_tag: Vec<TagScore>,
    pub macro_f1: f64,
}

/// One-vs-rest precision/recall/F1 per tag id. The macro average runs over
/// tags with gold support > 0 only; tags that are merely predicted still get
/// a row but no macro term.
pub fn per_tag_f1(pred: &[usize], gold: &[usize]) -> Result<TagReport> {
    per_tag_f1_named(pred, gold, |id| id.to_string())
}

pub fn per_tag_f1_named(
    pred: &[usize],
    gold: &[usize],
    name: impl Fn(usize) -> String,
) -> Result<TagReport> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gold.len(),
        });
    }
    let mut tags: Vec<usize> = pred.iter().chain(gold).copied().collect();
    tags.sort_unstable();
    tags.dedup();

    let mut per_tag = Vec::with_capacity(tags.len());
    let mut macro_sum = 0.0;
    let mut macro_n = 0usize;
    for &t in &tags {
        let tp = pred
            .iter()
            .zip(gold)
            .filter(|&(&p, &g)| p == t && g == t)
            .count() as f64;
        let fp = pred
            .iter()
            .zip(gold)
            .filter(|&(&p, &g)| p == t && g != t)
            .count() as f64;
        let fne = pred
            .iter()
            .zip(gold)
            .filter(|&(&p, &g)| p != t && g == t)
            .count() as f64;
        let support = (tp + fne) as usize;
        let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let recall = if tp + fne > 0.0 { tp / (tp + fne) } else { 0.0 };
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        if support > 0 {
            macro_sum += f1;
            macro_n += 1;
        }
        per_tag.push(TagScore {
            tag: name(t),
            precision,
            recall,
            f1,
            support,
        });
    }
    let macro_f1 = if macro_n > 0 {
        macro_sum / macro_n as f64
    } else {
        0.0
    };
    Ok(TagReport { per_tag, macro_f1 })
}

/// Percentage of positions where pred differs from gold.
pub fn token_error_rate(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gold.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("token_error_rate"));
    }
    let wrong = pred.iter().zip(gold).filter(|&(p, g)| p != g).count();
    Ok(100.0 * wrong as f64 / pred.len() as f64)
}

/// A maximal run of identical role labels; end is inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub start: usize,
    pub end: usize,
    pub label: usize,
}

/// Maximal same-label runs, in order, covering every token.
pub fn segment_turns(labels: &[usize]) -> Vec<Turn> {
    let mut turns = Vec::new();
    if labels.is_empty() {
        return turns;
    }
    let mut start = 0;
    for i in 1..labels.len() {
        if labels[i] != labels[start] {
            turns.push(Turn {
                start,
                end: i - 1,
                label: labels[start],
            });
            start = i;
        }
    }
    turns.push(Turn {
        start,
        end: labels.len() - 1,
        label: labels[start],
    });
    turns
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub detected: usize,
    pub actual: usize,
}

/// Exact-match turn scoring: a predicted turn counts iff a reference turn
/// with the same (start, end, label) exists. F = 2PR/(P+R).
pub fn turn_prf(pred_turns: &[Turn], ref_turns: &[Turn]) -> Result<TurnReport> {
    let span = |turns: &[Turn]| turns.last().map(|t| t.end + 1).unwrap_or(0);
    if span(pred_turns) != span(ref_turns) {
        return Err(Error::LengthMismatch {
            left: span(pred_turns),
            right: span(ref_turns),
        });
    }
    let refset: std::collections::HashSet<Turn> = ref_turns.iter().copied().collect();
    let correct = pred_turns.iter().filter(|t| refset.contains(t)).count();
    let detected = pred_turns.len();
    let actual = ref_turns.len();
    let precision = if detected > 0 {
        correct as f64 / detected as f64
    } else {
        0.0
    };
    let recall = if actual > 0 {
        correct as f64 / actual as f64
    } else {
        0.0
    };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    Ok(TurnReport {
        precision,
        recall,
        f1,
        correct,
        detected,
        actual,
    })
}

impl std::hash::Hash for Turn {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.start.hash(state);
        self.end.hash(state);
        self.label.hash(state);
    }
}

/// Percentage of positions where pred equals gold.
pub fn accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gold.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    let right = pred.iter().zip(gold).filter(|&(p, g)| p == g).count();
    Ok(100.0 * right as f64 / pred.len() as f64)
}

/// Percentage of samples where both components match.
pub fn joint_accuracy(pred: &[(usize, usize)], gold: &[(usize, usize)]) -> Result<f64> {
    if pred.len() != gold.len() {
        return Err(Error::LengthMismatch {
            left: pred.len(),
            right: gold.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("joint_accuracy"));
    }
    let right = pred.iter().zip(gold).filter(|&(p, g)| p == g).count();
    Ok(100.0 * right as f64 / pred.len() as f64)
}
