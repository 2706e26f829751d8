//! Boundary tagging of triplets on an `n x n` table.
//!
//! Rows index aspect positions and columns index opinion positions. A triplet
//! with aspect `[x, y]` and opinion `[m, n']` covers the rectangle whose
//! top-left vertex is `(x, m)` and bottom-right vertex is `(y, n')`.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Inclusive token span, serialized as `[start, end]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "(usize, usize)", try_from = "(usize, usize)")]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl From<Span> for (usize, usize) {
    fn from(s: Span) -> Self {
        (s.start, s.end)
    }
}

impl TryFrom<(usize, usize)> for Span {
    type Error = Error;

    fn try_from((start, end): (usize, usize)) -> Result<Self> {
        Span::new(start, end)
    }
}

impl Span {
    pub fn new(start: usize, end: usize) -> Result<Self> {
        if start > end {
            return Err(Error::Geometry(format!("span start {start} > end {end}")));
        }
        Ok(Self { start, end })
    }

    pub fn single(i: usize) -> Self {
        Self { start: i, end: i }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn overlaps(&self, other: &Span) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Polarity {
    #[serde(rename = "POS")]
    Pos,
    #[serde(rename = "NEU")]
    Neu,
    #[serde(rename = "NEG")]
    Neg,
}

impl Polarity {
    pub const ALL: [Polarity; 3] = [Polarity::Pos, Polarity::Neu, Polarity::Neg];

    pub fn index(self) -> usize {
        match self {
            Polarity::Pos => 0,
            Polarity::Neu => 1,
            Polarity::Neg => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Polarity::Pos => "POS",
            Polarity::Neu => "NEU",
            Polarity::Neg => "NEG",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "POS" => Some(Polarity::Pos),
            "NEU" => Some(Polarity::Neu),
            "NEG" => Some(Polarity::Neg),
            _ => None,
        }
    }
}

impl fmt::Display for Polarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Triplet {
    pub aspect: Span,
    pub opinion: Span,
    pub polarity: Polarity,
}

impl Triplet {
    pub fn new(aspect: Span, opinion: Span, polarity: Polarity) -> Self {
        Self {
            aspect,
            opinion,
            polarity,
        }
    }

    /// Top-left vertex `(aspect.start, opinion.start)`.
    pub fn tl(&self) -> (usize, usize) {
        (self.aspect.start, self.opinion.start)
    }

    /// Bottom-right vertex `(aspect.end, opinion.end)`.
    pub fn br(&self) -> (usize, usize) {
        (self.aspect.end, self.opinion.end)
    }

    /// Nearest-end distance: `min |i - j|` over aspect token `i` and opinion
    /// token `j`. Zero when the spans overlap.
    pub fn distance(&self) -> usize {
        distance(&self.aspect, &self.opinion)
    }
}

/// Nearest-end distance between two spans (shared by the generator and the
/// evaluation buckets).
pub fn distance(a: &Span, b: &Span) -> usize {
    if a.overlaps(b) {
        0
    } else if a.end < b.start {
        b.start - a.end
    } else {
        a.start - b.end
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub tokens: Vec<String>,
    pub triplets: Vec<Triplet>,
}

impl SentenceRecord {
    pub fn new(tokens: Vec<String>, triplets: Vec<Triplet>) -> Result<Self> {
        let r = Self { tokens, triplets };
        r.validate()?;
        Ok(r)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks span bounds and rejects two triplets that share both vertices
    /// but disagree on polarity.
    pub fn validate(&self) -> Result<()> {
        let n = self.tokens.len();
        if n == 0 {
            return Err(Error::Validation("sentence has no tokens".into()));
        }
        for t in &self.triplets {
            for (what, s) in [("aspect", t.aspect), ("opinion", t.opinion)] {
                if s.start > s.end || s.end >= n {
                    return Err(Error::Validation(format!(
                        "{what} span [{}, {}] outside sentence of length {n}",
                        s.start, s.end
                    )));
                }
            }
        }
        for (i, a) in self.triplets.iter().enumerate() {
            for b in &self.triplets[i + 1..] {
                if a.aspect == b.aspect && a.opinion == b.opinion && a.polarity != b.polarity {
                    return Err(Error::Validation(format!(
                        "conflicting polarities {} / {} for the same region",
                        a.polarity, b.polarity
                    )));
                }
            }
        }
        Ok(())
    }
}

/// A labelled rectangle: top-left cell, bottom-right cell, polarity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Region {
    pub tl: (usize, usize),
    pub br: (usize, usize),
    pub polarity: Polarity,
}

/// Vertex grids and region list for one sentence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TableLabels {
    pub n: usize,
    /// Row-major `n x n`, 1 where a top-left vertex sits.
    pub tl: Vec<u8>,
    /// Row-major `n x n`, 1 where a bottom-right vertex sits.
    pub br: Vec<u8>,
    pub regions: Vec<Region>,
}

impl TableLabels {
    pub fn tl_at(&self, r: usize, c: usize) -> u8 {
        self.tl[r * self.n + c]
    }

    pub fn br_at(&self, r: usize, c: usize) -> u8 {
        self.br[r * self.n + c]
    }
}

pub fn encode_labels(record: &SentenceRecord) -> Result<TableLabels> {
    record.validate()?;
    let n = record.len();
    let mut tl = vec![0u8; n * n];
    let mut br = vec![0u8; n * n];
    let mut regions = Vec::with_capacity(record.triplets.len());
    let mut seen = BTreeSet::new();
    for t in &record.triplets {
        let (x, m) = t.tl();
        let (y, n2) = t.br();
        tl[x * n + m] = 1;
        br[y * n + n2] = 1;
        // exact duplicates collapse to one region
        if seen.insert((t.tl(), t.br(), t.polarity)) {
            regions.push(Region {
                tl: (x, m),
                br: (y, n2),
                polarity: t.polarity,
            });
        }
    }
    Ok(TableLabels { n, tl, br, regions })
}

pub fn decode_regions(labels: &TableLabels) -> Result<Vec<Triplet>> {
    labels
        .regions
        .iter()
        .map(|r| {
            let ((x, m), (y, n2)) = (r.tl, r.br);
            if x > y || m > n2 {
                return Err(Error::Geometry(format!(
                    "top-left ({x},{m}) is not above-left of bottom-right ({y},{n2})"
                )));
            }
            Ok(Triplet::new(
                Span { start: x, end: y },
                Span { start: m, end: n2 },
                r.polarity,
            ))
        })
        .collect()
}

/// Smallest multiple of `b` that is at least `n`.
pub fn pad_length(n: usize, b: usize) -> usize {
    assert!(n >= 1 && b >= 1, "pad_length needs n >= 1 and b >= 1");
    n.div_ceil(b) * b
}
