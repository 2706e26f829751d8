//! Vertex prediction, candidate rectangles, region classification, losses
//! and triplet extraction.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, ParameterStore, Tensor, Var};
use crate::tagging::{Polarity, Region, Span, TableLabels, Triplet};

/// Vertex class indices in the 2-way vertex heads.
pub const NONE: usize = 0;
pub const VERTEX: usize = 1;

pub const DEFAULT_MAX_CANDIDATES: usize = 512;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Triplets: `{Pos, Neu, Neg, Invalid}`.
    #[default]
    Aste,
    /// Pairs: `{Valid, Invalid}`.
    Aope,
}

impl Task {
    pub fn num_classes(self) -> usize {
        match self {
            Task::Aste => 4,
            Task::Aope => 2,
        }
    }

    pub fn invalid_class(self) -> usize {
        self.num_classes() - 1
    }

    /// Class index for a gold region.
    pub fn class_of(self, polarity: Polarity) -> usize {
        match self {
            Task::Aste => polarity.index(),
            Task::Aope => 0,
        }
    }
}

/// A decoded aspect/opinion pair; `polarity` is `None` in pair extraction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Extracted {
    pub aspect: Span,
    pub opinion: Span,
    pub polarity: Option<Polarity>,
}

impl Extracted {
    pub fn from_triplet(t: &Triplet, task: Task) -> Self {
        Self {
            aspect: t.aspect,
            opinion: t.opinion,
            polarity: match task {
                Task::Aste => Some(t.polarity),
                Task::Aope => None,
            },
        }
    }

    pub fn distance(&self) -> usize {
        crate::tagging::distance(&self.aspect, &self.opinion)
    }
}

pub fn gold_set(triplets: &[Triplet], task: Task) -> BTreeSet<Extracted> {
    triplets.iter().map(|t| Extracted::from_triplet(t, task)).collect()
}

pub mod ids {
    pub const TL_W: &str = "dec.tl.w";
    pub const TL_B: &str = "dec.tl.b";
    pub const BR_W: &str = "dec.br.w";
    pub const BR_B: &str = "dec.br.b";
    pub const SENT_W: &str = "dec.sent.w";
    pub const SENT_B: &str = "dec.sent.b";
}

pub fn init_params(d_prime: usize, task: Task, store: &mut ParameterStore) -> Result<()> {
    store.init_uniform(ids::TL_W, &[d_prime, 2])?;
    store.init_zeros(ids::TL_B, &[2])?;
    store.init_uniform(ids::BR_W, &[d_prime, 2])?;
    store.init_zeros(ids::BR_B, &[2])?;
    store.init_uniform(ids::SENT_W, &[3 * d_prime, task.num_classes()])?;
    store.init_zeros(ids::SENT_B, &[task.num_classes()])?;
    Ok(())
}

/// TL and BR logits, each `[n, n, 2]`.
#[derive(Clone, Copy, Debug)]
pub struct VertexPredictions {
    pub p_tl: Var,
    pub p_br: Var,
}

pub fn predict_vertices(g: &mut Graph, store: &ParameterStore, r_final: Var) -> Result<VertexPredictions> {
    let (w, b) = (g.param(store, ids::TL_W)?, g.param(store, ids::TL_B)?);
    let p_tl = g.linear(r_final, w, Some(b))?;
    let (w, b) = (g.param(store, ids::BR_W)?, g.param(store, ids::BR_B)?);
    let p_br = g.linear(r_final, w, Some(b))?;
    Ok(VertexPredictions { p_tl, p_br })
}

/// Mean cross-entropy over the `n²` cells for TL plus the same for BR.
/// Vertex cells are weighted by `pos_weight`; the denominator stays `n²`.
pub fn vertex_loss(g: &mut Graph, preds: &VertexPredictions, gold: &TableLabels, pos_weight: f64) -> Result<Var> {
    let n = gold.n;
    if g.shape(preds.p_tl) != [n, n, 2] || g.shape(preds.p_br) != [n, n, 2] {
        return Err(Error::Dimension {
            op: "vertex_loss",
            lhs: g.shape(preds.p_tl).to_vec(),
            rhs: vec![n, n, 2],
        });
    }
    let cells = (n * n) as f64;
    let mut term = |logits: Var, grid: &[u8]| -> Result<Var> {
        let targets: Vec<usize> = grid.iter().map(|&v| v as usize).collect();
        let weights: Vec<f64> = grid
            .iter()
            .map(|&v| if v as usize == VERTEX { pos_weight } else { 1.0 })
            .collect();
        g.weighted_cross_entropy(logits, &targets, &weights, cells)
    };
    let tl = term(preds.p_tl, &gold.tl)?;
    let br = term(preds.p_br, &gold.br)?;
    g.add(tl, br)
}

pub type Cell = (usize, usize);

/// Top-left/bottom-right pair with the top-left weakly above-left.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Candidate {
    pub tl: Cell,
    pub br: Cell,
}

impl Candidate {
    pub fn new(tl: Cell, br: Cell) -> Result<Self> {
        if tl.0 > br.0 || tl.1 > br.1 {
            return Err(Error::Geometry(format!(
                "top-left {tl:?} is not above-left of bottom-right {br:?}"
            )));
        }
        Ok(Self { tl, br })
    }

    pub fn to_extracted(&self, polarity: Option<Polarity>) -> Extracted {
        Extracted {
            aspect: Span {
                start: self.tl.0,
                end: self.br.0,
            },
            opinion: Span {
                start: self.tl.1,
                end: self.br.1,
            },
            polarity,
        }
    }
}

/// All valid pairings, row-major by TL then BR, truncated at `max_candidates`.
pub fn enumerate_candidates(tl_cells: &BTreeSet<Cell>, br_cells: &BTreeSet<Cell>, max_candidates: usize) -> Vec<Candidate> {
    let mut out = Vec::new();
    for &tl in tl_cells {
        for &br in br_cells {
            if tl.0 <= br.0 && tl.1 <= br.1 {
                if out.len() == max_candidates {
                    return out;
                }
                out.push(Candidate { tl, br });
            }
        }
    }
    out
}

/// Training candidates: every gold region first, then predicted pairings not
/// already present, truncated at `max_candidates` (gold is never dropped).
pub fn training_candidates(
    pred_tl: &BTreeSet<Cell>,
    pred_br: &BTreeSet<Cell>,
    gold: &[Region],
    max_candidates: usize,
) -> Vec<Candidate> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for r in gold {
        let c = Candidate { tl: r.tl, br: r.br };
        if seen.insert(c) {
            out.push(c);
        }
    }
    let limit = max_candidates.max(out.len());
    for c in enumerate_candidates(pred_tl, pred_br, max_candidates) {
        if out.len() >= limit {
            break;
        }
        if seen.insert(c) {
            out.push(c);
        }
    }
    out
}

/// Cells whose argmax class is [`VERTEX`] in an `[n, n, 2]` logit tensor.
pub fn vertex_cells(logits: &Tensor) -> BTreeSet<Cell> {
    let n = logits.shape()[1];
    (0..logits.rows())
        .filter(|&i| {
            let row = logits.row(i);
            row[VERTEX] > row[NONE]
        })
        .map(|i| (i / n, i % n))
        .collect()
}

/// `[m, 3d']`: TL cell ⊕ BR cell ⊕ max-pool over the rectangle.
pub fn rectangle_repr(g: &mut Graph, r_final: Var, cands: &[Candidate]) -> Result<Var> {
    let s = g.shape(r_final).to_vec();
    let (n, dp) = (s[1], s[2]);
    for c in cands {
        if c.br.0 >= s[0] || c.br.1 >= n || c.tl.0 > c.br.0 || c.tl.1 > c.br.1 {
            return Err(Error::Geometry(format!("candidate {c:?} outside {n}x{n} table")));
        }
    }
    let m = cands.len();
    let tl_idx = Arc::new(cands.iter().map(|c| Some(c.tl.0 * n + c.tl.1)).collect());
    let br_idx = Arc::new(cands.iter().map(|c| Some(c.br.0 * n + c.br.1)).collect());
    let tl = g.gather(r_final, tl_idx, &[m, dp])?;
    let br = g.gather(r_final, br_idx, &[m, dp])?;
    let rects: Vec<_> = cands.iter().map(|c| (c.tl.0, c.tl.1, c.br.0, c.br.1)).collect();
    let pooled = g.rect_max_pool(r_final, &rects)?;
    g.concat(&[tl, br, pooled])
}

pub fn sentiment_logits(g: &mut Graph, store: &ParameterStore, repr: Var) -> Result<Var> {
    let (w, b) = (g.param(store, ids::SENT_W)?, g.param(store, ids::SENT_B)?);
    g.linear(repr, w, Some(b))
}

/// Gold class of each candidate; anything not matching a gold region on
/// both vertices is Invalid.
pub fn candidate_labels(cands: &[Candidate], gold: &[Region], task: Task) -> Vec<usize> {
    cands
        .iter()
        .map(|c| {
            gold.iter()
                .find(|r| r.tl == c.tl && r.br == c.br)
                .map(|r| task.class_of(r.polarity))
                .unwrap_or(task.invalid_class())
        })
        .collect()
}

/// Mean cross-entropy over candidates; `None` logits (no candidates) give a
/// constant zero.
pub fn sentiment_loss(g: &mut Graph, logits: Option<Var>, labels: &[usize]) -> Result<Var> {
    match logits {
        Some(l) => g.cross_entropy(l, labels),
        None => Ok(g.constant(Tensor::scalar(0.0))),
    }
}

pub fn total_loss(g: &mut Graph, vertex: Var, sentiment: Var) -> Result<Var> {
    g.add(vertex, sentiment)
}

/// Keeps candidates whose argmax class is not Invalid, deduplicated.
pub fn extract_triplets(cands: &[Candidate], logits: &Tensor, task: Task) -> Vec<Extracted> {
    let invalid = task.invalid_class();
    let mut out = BTreeSet::new();
    for (i, c) in cands.iter().enumerate() {
        let row = logits.row(i);
        let cls = argmax(row);
        if cls == invalid {
            continue;
        }
        let polarity = match task {
            Task::Aste => Polarity::from_index(cls),
            Task::Aope => None,
        };
        out.insert(c.to_extracted(polarity));
    }
    out.into_iter().collect()
}

/// First index of the maximum (ties resolve to the lower class).
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagging::{encode_labels, SentenceRecord};

    fn set(cells: &[Cell]) -> BTreeSet<Cell> {
        cells.iter().copied().collect()
    }

    #[test]
    fn candidate_enumeration_examples() {
        assert_eq!(
            enumerate_candidates(&set(&[(1, 3)]), &set(&[(1, 4)]), 512),
            vec![Candidate { tl: (1, 3), br: (1, 4) }]
        );
        assert!(enumerate_candidates(&set(&[(2, 2)]), &set(&[(1, 1)]), 512).is_empty());
        assert_eq!(enumerate_candidates(&set(&[(0, 0)]), &set(&[(0, 0), (2, 2)]), 512).len(), 2);
        assert_eq!(enumerate_candidates(&set(&[(0, 0)]), &set(&[(0, 0), (2, 2)]), 1).len(), 1);
    }

    #[test]
    fn training_candidates_put_gold_first() {
        let gold = vec![Region {
            tl: (3, 3),
            br: (3, 3),
            polarity: Polarity::Pos,
        }];
        let c = training_candidates(&set(&[(0, 0), (3, 3)]), &set(&[(1, 1), (3, 3)]), &gold, 2);
        assert_eq!(c[0], Candidate { tl: (3, 3), br: (3, 3) });
        assert_eq!(c.len(), 2);
        assert_eq!(c[1], Candidate { tl: (0, 0), br: (1, 1) });
    }

    #[test]
    fn rectangle_repr_single_cell_and_width() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..3 * 3 * 2).map(|v| v as f64).collect();
        let r = g.input(Tensor::new(vec![3, 3, 2], data).unwrap());
        let rep = rectangle_repr(&mut g, r, &[Candidate { tl: (1, 2), br: (1, 2) }]).unwrap();
        assert_eq!(g.shape(rep), &[1, 6]);
        let cell = g.value(r).row(5).to_vec();
        let row = g.value(rep).row(0);
        assert_eq!(&row[0..2], &cell[..]);
        assert_eq!(&row[2..4], &cell[..]);
        assert_eq!(&row[4..6], &cell[..]);
    }

    #[test]
    fn rectangle_pool_matches_loop_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for n in 1..=6 {
            let data: Vec<f64> = (0..n * n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let table = Tensor::new(vec![n, n, 3], data).unwrap();
            let all: BTreeSet<Cell> = (0..n).flat_map(|r| (0..n).map(move |c| (r, c))).collect();
            let cands = enumerate_candidates(&all, &all, usize::MAX);
            let mut g = Graph::new();
            let r = g.input(table.clone());
            let rep = rectangle_repr(&mut g, r, &cands).unwrap();
            for (k, c) in cands.iter().enumerate() {
                for ch in 0..3 {
                    let mut m = f64::NEG_INFINITY;
                    for rr in c.tl.0..=c.br.0 {
                        for cc in c.tl.1..=c.br.1 {
                            m = m.max(table.data()[(rr * n + cc) * 3 + ch]);
                        }
                    }
                    assert_eq!(g.value(rep).row(k)[6 + ch], m);
                }
            }
        }
    }

    #[test]
    fn rectangle_repr_rejects_bad_geometry() {
        let mut g = Graph::new();
        let r = g.input(Tensor::zeros(&[3, 3, 2]));
        let bad = Candidate { tl: (2, 2), br: (1, 1) };
        assert!(matches!(rectangle_repr(&mut g, r, &[bad]), Err(Error::Geometry(_))));
        assert!(Candidate::new((2, 2), (1, 1)).is_err());
    }

    #[test]
    fn vertex_loss_uniform_logits() {
        let rec = SentenceRecord::new(
            vec!["a".into(); 4],
            vec![Triplet::new(Span::single(0), Span::single(2), Polarity::Pos)],
        )
        .unwrap();
        let labels = encode_labels(&rec).unwrap();
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[4, 4, 2]));
        let preds = VertexPredictions { p_tl: z, p_br: z };
        let l = vertex_loss(&mut g, &preds, &labels, 1.0).unwrap();
        assert!((g.scalar(l) - 2.0 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn sentiment_loss_cases() {
        let mut g = Graph::new();
        let l = g.input(Tensor::zeros(&[1, 4]));
        let loss = sentiment_loss(&mut g, Some(l), &[3]).unwrap();
        assert!((g.scalar(loss) - 4f64.ln()).abs() < 1e-12);
        let empty = sentiment_loss(&mut g, None, &[]).unwrap();
        assert_eq!(g.scalar(empty), 0.0);
        let a = g.constant(Tensor::scalar(1.5));
        let b = g.constant(Tensor::scalar(0.5));
        let t = total_loss(&mut g, a, b).unwrap();
        assert_eq!(g.scalar(t), 2.0);
    }

    #[test]
    fn candidate_labels_require_exact_pair() {
        let gold = vec![Region {
            tl: (0, 2),
            br: (1, 3),
            polarity: Polarity::Neg,
        }];
        let cands = vec![
            Candidate { tl: (0, 2), br: (1, 3) },
            Candidate { tl: (0, 2), br: (1, 4) },
        ];
        assert_eq!(candidate_labels(&cands, &gold, Task::Aste), vec![2, 3]);
        assert_eq!(candidate_labels(&cands, &gold, Task::Aope), vec![0, 1]);
    }

    #[test]
    fn invalid_candidates_are_dropped() {
        let cands = vec![
            Candidate { tl: (0, 1), br: (0, 1) },
            Candidate { tl: (0, 1), br: (2, 2) },
        ];
        let logits = Tensor::new(vec![2, 4], vec![0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0, 5.0]).unwrap();
        let out = extract_triplets(&cands, &logits, Task::Aste);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].polarity, Some(Polarity::Neg));
        assert!(extract_triplets(&[], &Tensor::zeros(&[1, 4]), Task::Aste).is_empty());
    }
}
