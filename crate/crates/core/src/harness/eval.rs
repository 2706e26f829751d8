use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::{bucket_index, bucket_label, DEFAULT_EVAL_BUCKETS};
use crate::decoder::{gold_set, Extracted, Task};
use crate::error::Result;
use crate::par;
use crate::tagging::SentenceRecord;

use super::Model;

/// Matched/predicted/gold counts with derived micro scores.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub label: String,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Counts {
    fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            ..Self::default()
        }
    }

    fn finish(&mut self) {
        let (p, r, f) = prf(self.correct, self.predicted, self.gold);
        self.precision = p;
        self.recall = r;
        self.f1 = f;
    }
}

/// Micro precision, recall and F1; any 0/0 is 0.
pub fn prf(correct: usize, predicted: usize, gold: usize) -> (f64, f64, f64) {
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let (p, r) = (ratio(correct, predicted), ratio(correct, gold));
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub num_sentences: usize,
    pub triplet_precision: f64,
    pub triplet_recall: f64,
    pub triplet_f1: f64,
    pub sentence_exact_match_rate: f64,
    pub overall: Counts,
    /// Counts by aspect-opinion distance.
    pub buckets: Vec<Counts>,
    /// Counts for single-word pairs, multi-word aspects and multi-word
    /// opinions (a pair with both multi-word spans counts in both).
    pub span_types: Vec<Counts>,
}

pub const SPAN_TYPES: [&str; 3] = ["single", "multi-aspect", "multi-opinion"];

fn span_types(e: &Extracted) -> [bool; 3] {
    let (ma, mo) = (e.aspect.len() > 1, e.opinion.len() > 1);
    [!ma && !mo, ma, mo]
}

/// Scores predicted sets against gold sets, sentence by sentence.
pub fn score(task: Task, gold: &[BTreeSet<Extracted>], predicted: &[BTreeSet<Extracted>]) -> EvalReport {
    assert_eq!(gold.len(), predicted.len(), "one prediction set per sentence");
    let mut overall = Counts::new("all");
    let mut buckets: Vec<Counts> = DEFAULT_EVAL_BUCKETS
        .iter()
        .map(|&(lo, hi)| Counts::new(bucket_label(lo, hi)))
        .collect();
    let mut types: Vec<Counts> = SPAN_TYPES.iter().map(|s| Counts::new(*s)).collect();
    let mut exact = 0;
    for (g, p) in gold.iter().zip(predicted) {
        if g == p {
            exact += 1;
        }
        for e in g {
            overall.gold += 1;
            let hit = p.contains(e);
            overall.correct += hit as usize;
            if let Some(b) = bucket_index(e.distance(), &DEFAULT_EVAL_BUCKETS) {
                buckets[b].gold += 1;
                buckets[b].correct += hit as usize;
            }
            for (t, on) in span_types(e).into_iter().enumerate() {
                if on {
                    types[t].gold += 1;
                    types[t].correct += hit as usize;
                }
            }
        }
        for e in p {
            overall.predicted += 1;
            if let Some(b) = bucket_index(e.distance(), &DEFAULT_EVAL_BUCKETS) {
                buckets[b].predicted += 1;
            }
            for (t, on) in span_types(e).into_iter().enumerate() {
                if on {
                    types[t].predicted += 1;
                }
            }
        }
    }
    overall.finish();
    buckets.iter_mut().for_each(Counts::finish);
    types.iter_mut().for_each(Counts::finish);
    let n = gold.len();
    EvalReport {
        task,
        num_sentences: n,
        triplet_precision: overall.precision,
        triplet_recall: overall.recall,
        triplet_f1: overall.f1,
        sentence_exact_match_rate: if n == 0 { 0.0 } else { exact as f64 / n as f64 },
        overall,
        buckets,
        span_types: types,
    }
}

/// Runs the model over every record (in parallel when enabled) and scores it.
pub fn evaluate(model: &Model, records: &[SentenceRecord]) -> Result<EvalReport> {
    let task = model.config.task;
    let predicted: Vec<BTreeSet<Extracted>> = par::map(records, |r| model.predict(&r.tokens))
        .into_iter()
        .map(|p| p.map(|v| v.into_iter().collect()))
        .collect::<Result<_>>()?;
    let gold: Vec<_> = records.iter().map(|r| gold_set(&r.triplets, task)).collect();
    Ok(score(task, &gold, &predicted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagging::{Polarity, Span};

    fn ex(a: usize, o: usize) -> Extracted {
        Extracted {
            aspect: Span::single(a),
            opinion: Span::single(o),
            polarity: Some(Polarity::Pos),
        }
    }

    fn set(v: &[Extracted]) -> BTreeSet<Extracted> {
        v.iter().copied().collect()
    }

    #[test]
    fn perfect_predictions() {
        let g = vec![set(&[ex(0, 2), ex(4, 9)]), set(&[])];
        let r = score(Task::Aste, &g, &g);
        assert_eq!((r.triplet_precision, r.triplet_recall, r.triplet_f1), (1.0, 1.0, 1.0));
        assert_eq!(r.sentence_exact_match_rate, 1.0);
        assert_eq!(r.buckets[0].f1, 1.0);
        assert_eq!(r.buckets[1].f1, 1.0);
        assert_eq!(r.buckets[1].gold, 1);
    }

    #[test]
    fn empty_predictions() {
        let r = score(Task::Aste, &[set(&[ex(0, 2)])], &[set(&[])]);
        assert_eq!((r.triplet_precision, r.triplet_recall, r.triplet_f1), (0.0, 0.0, 0.0));
        assert_eq!(r.sentence_exact_match_rate, 0.0);
    }

    #[test]
    fn half_right() {
        let r = score(Task::Aste, &[set(&[ex(0, 2), ex(1, 3)])], &[set(&[ex(0, 2), ex(3, 3)])]);
        assert_eq!((r.triplet_precision, r.triplet_recall, r.triplet_f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn f1_identity() {
        for (c, p, g) in [(3, 7, 5), (1, 1, 9), (0, 4, 4), (5, 5, 5)] {
            let (pr, re, f) = prf(c, p, g);
            if pr + re > 0.0 {
                assert_eq!(f, 2.0 * pr * re / (pr + re));
                assert!(f <= pr.max(re) && f >= pr.min(re));
            }
        }
        assert_eq!(prf(0, 0, 0), (0.0, 0.0, 0.0));
    }
}
