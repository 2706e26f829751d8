//! Corpus loading (JSONL and `####` hash format) and a seeded synthetic
//! corpus generator.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tagging::{Polarity, SentenceRecord, Span, Triplet};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Jsonl,
    Hash,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusFile {
    pub records: Vec<SentenceRecord>,
    pub format: CorpusFormat,
}

impl CorpusFile {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn num_triplets(&self) -> usize {
        self.records.iter().map(|r| r.triplets.len()).sum()
    }

    /// 80/10/10 train/dev/test split keyed on a hash of each record index.
    pub fn split(&self) -> Split {
        let mut s = Split::default();
        for (i, r) in self.records.iter().enumerate() {
            match split_of(i) {
                Part::Train => s.train.push(r.clone()),
                Part::Dev => s.dev.push(r.clone()),
                Part::Test => s.test.push(r.clone()),
            }
        }
        s
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<SentenceRecord>,
    pub dev: Vec<SentenceRecord>,
    pub test: Vec<SentenceRecord>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Train,
    Dev,
    Test,
}

/// SplitMix64 finalizer over the record index.
pub fn split_of(index: usize) -> Part {
    let mut z = (index as u64).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    match z % 10 {
        0..=7 => Part::Train,
        8 => Part::Dev,
        _ => Part::Test,
    }
}

/// Picks the loader from the extension: `.jsonl`/`.json` or anything else as
/// hash format.
pub fn load_corpus(path: &Path) -> Result<CorpusFile> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") | Some("json") => load_jsonl(path),
        _ => load_hash_format(path),
    }
}

pub fn load_jsonl(path: &Path) -> Result<CorpusFile> {
    parse_jsonl(&fs::read_to_string(path)?)
}

pub fn parse_jsonl(text: &str) -> Result<CorpusFile> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let data_err = |msg: String| Error::Data { line: i + 1, msg };
        let rec: SentenceRecord = serde_json::from_str(line).map_err(|e| data_err(e.to_string()))?;
        rec.validate().map_err(|e| data_err(e.to_string()))?;
        records.push(rec);
    }
    Ok(CorpusFile {
        records,
        format: CorpusFormat::Jsonl,
    })
}

pub fn to_jsonl(records: &[SentenceRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[SentenceRecord]) -> Result<()> {
    fs::write(path, to_jsonl(records)?)?;
    Ok(())
}

pub const HASH_DELIMITER: &str = "####";

pub fn load_hash_format(path: &Path) -> Result<CorpusFile> {
    parse_hash_format(&fs::read_to_string(path)?)
}

pub fn parse_hash_format(text: &str) -> Result<CorpusFile> {
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec = parse_hash_line(line).map_err(|msg| Error::Data { line: i + 1, msg })?;
        records.push(rec);
    }
    Ok(CorpusFile {
        records,
        format: CorpusFormat::Hash,
    })
}

fn parse_hash_line(line: &str) -> std::result::Result<SentenceRecord, String> {
    let (sentence, literal) = line
        .split_once(HASH_DELIMITER)
        .ok_or_else(|| format!("missing `{HASH_DELIMITER}` delimiter"))?;
    let tokens: Vec<String> = sentence.split_whitespace().map(str::to_string).collect();
    // The triplet list is a Python literal of tuples; rewritten to JSON arrays
    // it parses with serde.
    let json: String = literal
        .trim()
        .chars()
        .map(|c| match c {
            '(' => '[',
            ')' => ']',
            '\'' => '"',
            c => c,
        })
        .collect();
    let raw: Vec<(Vec<usize>, Vec<usize>, String)> =
        serde_json::from_str(&json).map_err(|e| format!("unparsable triplet list: {e}"))?;
    let mut triplets = Vec::with_capacity(raw.len());
    for (a, o, p) in raw {
        let polarity = Polarity::parse(&p).ok_or_else(|| format!("unknown polarity `{p}`"))?;
        triplets.push(Triplet::new(contiguous(&a)?, contiguous(&o)?, polarity));
    }
    SentenceRecord::new(tokens, triplets).map_err(|e| e.to_string())
}

fn contiguous(idx: &[usize]) -> std::result::Result<Span, String> {
    let (&first, &last) = match (idx.first(), idx.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err("empty index list".into()),
    };
    if idx.windows(2).any(|w| w[1] != w[0] + 1) {
        return Err(format!("index list {idx:?} is not contiguous"));
    }
    Ok(Span { start: first, end: last })
}

pub fn to_hash_format(records: &[SentenceRecord]) -> Result<String> {
    let mut out = String::new();
    for (i, r) in records.iter().enumerate() {
        if r.tokens.iter().any(|t| t.contains(char::is_whitespace) || t.contains(HASH_DELIMITER)) {
            return Err(Error::Data {
                line: i + 1,
                msg: "token contains whitespace or the delimiter".into(),
            });
        }
        out.push_str(&r.tokens.join(" "));
        out.push_str(HASH_DELIMITER);
        out.push('[');
        for (k, t) in r.triplets.iter().enumerate() {
            if k > 0 {
                out.push_str(", ");
            }
            let _ = write!(
                out,
                "({}, {}, '{}')",
                index_list(t.aspect),
                index_list(t.opinion),
                t.polarity
            );
        }
        out.push_str("]\n");
    }
    Ok(out)
}

fn index_list(s: Span) -> String {
    let items: Vec<String> = (s.start..=s.end).map(|i| i.to_string()).collect();
    format!("[{}]", items.join(", "))
}

pub fn write_hash_format(path: &Path, records: &[SentenceRecord]) -> Result<()> {
    fs::write(path, to_hash_format(records)?)?;
    Ok(())
}

/// Evaluation distance buckets: inclusive `lo..=hi`, open-ended when `hi` is
/// `None`.
pub const DEFAULT_EVAL_BUCKETS: [(usize, Option<usize>); 4] = [(1, Some(3)), (4, Some(6)), (7, Some(9)), (10, None)];

pub fn bucket_label(lo: usize, hi: Option<usize>) -> String {
    match hi {
        Some(hi) => format!("{lo}-{hi}"),
        None => format!("{lo}+"),
    }
}

pub fn bucket_index(distance: usize, buckets: &[(usize, Option<usize>)]) -> Option<usize> {
    buckets
        .iter()
        .position(|&(lo, hi)| distance >= lo && hi.map_or(true, |hi| distance <= hi))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceBucket {
    pub lo: usize,
    pub hi: usize,
    pub weight: f64,
}

impl DistanceBucket {
    pub fn new(lo: usize, hi: usize, weight: f64) -> Self {
        Self { lo, hi, weight }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_sentences: usize,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub min_triplets: usize,
    pub max_triplets: usize,
    pub distance_buckets: Vec<DistanceBucket>,
    /// Chance that an aspect or opinion span has two tokens instead of one.
    pub multiword_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_sentences: 2000,
            vocab_size: 200,
            min_len: 5,
            max_len: 12,
            min_triplets: 1,
            max_triplets: 2,
            distance_buckets: vec![
                DistanceBucket::new(1, 3, 3.0),
                DistanceBucket::new(4, 6, 2.0),
                DistanceBucket::new(7, 9, 1.0),
            ],
            multiword_prob: 0.2,
            seed: 7,
        }
    }
}

impl SynthConfig {
    /// Corpus where every gold pair sits at distance 7 or more.
    pub fn long_distance(seed: u64) -> Self {
        Self {
            num_sentences: 1000,
            min_len: 8,
            max_len: 10,
            min_triplets: 1,
            max_triplets: 1,
            distance_buckets: vec![DistanceBucket::new(7, 8, 1.0)],
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.vocab_size < LEXICON_CLASSES {
            return cfg(format!("vocab_size must be at least {LEXICON_CLASSES}"));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return cfg(format!("bad length range {}..={}", self.min_len, self.max_len));
        }
        if self.min_triplets == 0 || self.min_triplets > self.max_triplets {
            return cfg(format!(
                "bad triplet range {}..={}",
                self.min_triplets, self.max_triplets
            ));
        }
        if !(0.0..=1.0).contains(&self.multiword_prob) {
            return cfg("multiword_prob must lie in [0, 1]".into());
        }
        if self.distance_buckets.is_empty() {
            return cfg("no distance buckets".into());
        }
        for b in &self.distance_buckets {
            if b.lo == 0 || b.lo > b.hi || !(b.weight >= 0.0) || !b.weight.is_finite() {
                return cfg(format!("bad distance bucket {b:?}"));
            }
        }
        if !self.distance_buckets.iter().any(|b| b.weight > 0.0) {
            return cfg("all distance buckets have zero weight".into());
        }
        // One single-token pair at distance `lo` needs `lo + 1` tokens.
        for b in self.distance_buckets.iter().filter(|b| b.weight > 0.0) {
            if b.lo + 1 > self.max_len {
                return cfg(format!(
                    "distance bucket {}..={} cannot fit in sentences of at most {} tokens",
                    b.lo, b.hi, self.max_len
                ));
            }
        }
        Ok(())
    }
}

const LEXICON_CLASSES: usize = 6;

/// Disjoint token classes. Opinion words carry the polarity; "link" fillers
/// sit between an aspect and its opinion and "gap" fillers between pairs.
#[derive(Clone, Debug)]
struct Lexicon {
    aspect: Vec<String>,
    opinion: [Vec<String>; 3],
    link: Vec<String>,
    gap: Vec<String>,
}

impl Lexicon {
    fn new(vocab_size: usize) -> Self {
        let share = |f: f64| ((vocab_size as f64 * f) as usize).max(1);
        let (na, no, nl) = (share(0.25), share(0.1), share(0.15));
        let ng = vocab_size.saturating_sub(na + 3 * no + nl).max(1);
        let words = |prefix: &str, k: usize| (0..k).map(|i| format!("{prefix}{i}")).collect::<Vec<_>>();
        Self {
            aspect: words("asp", na),
            opinion: [words("pos", no), words("neu", no), words("neg", no)],
            link: words("lnk", nl),
            gap: words("gap", ng),
        }
    }
}

struct Pair {
    aspect_len: usize,
    opinion_len: usize,
    distance: usize,
    aspect_first: bool,
    polarity: Polarity,
}

impl Pair {
    fn width(&self) -> usize {
        self.aspect_len + self.opinion_len + self.distance - 1
    }
}

const MAX_ATTEMPTS: usize = 1000;

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<CorpusFile> {
    cfg.validate()?;
    let lex = Lexicon::new(cfg.vocab_size);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let total_weight: f64 = cfg.distance_buckets.iter().map(|b| b.weight).sum();
    let mut records = Vec::with_capacity(cfg.num_sentences);
    for _ in 0..cfg.num_sentences {
        records.push(generate_one(cfg, &lex, total_weight, &mut rng)?);
    }
    Ok(CorpusFile {
        records,
        format: CorpusFormat::Synthetic,
    })
}

fn sample_bucket<'a>(cfg: &'a SynthConfig, total: f64, rng: &mut ChaCha8Rng) -> &'a DistanceBucket {
    let mut x = rng.gen_range(0.0..total);
    for b in &cfg.distance_buckets {
        if x < b.weight {
            return b;
        }
        x -= b.weight;
    }
    cfg.distance_buckets.iter().rev().find(|b| b.weight > 0.0).expect("validated")
}

fn generate_one(cfg: &SynthConfig, lex: &Lexicon, total: f64, rng: &mut ChaCha8Rng) -> Result<SentenceRecord> {
    for _ in 0..MAX_ATTEMPTS {
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let k = rng.gen_range(cfg.min_triplets..=cfg.max_triplets);
        let mut pairs: Vec<Pair> = (0..k)
            .map(|_| {
                let b = sample_bucket(cfg, total, rng);
                let mut span_len = || if rng.gen_bool(cfg.multiword_prob) { 2 } else { 1 };
                let (aspect_len, opinion_len) = (span_len(), span_len());
                Pair {
                    aspect_len,
                    opinion_len,
                    distance: rng.gen_range(b.lo..=b.hi),
                    aspect_first: rng.gen_bool(0.5),
                    polarity: Polarity::ALL[rng.gen_range(0..3)],
                }
            })
            .collect();
        // Pairs are separated by at least one gap token.
        let needed = |p: &[Pair]| p.iter().map(Pair::width).sum::<usize>() + p.len().saturating_sub(1);
        while pairs.len() > cfg.min_triplets && needed(&pairs) > len {
            pairs.pop();
        }
        if needed(&pairs) > len {
            continue;
        }
        return Ok(layout(&pairs, len, lex, rng));
    }
    Err(Error::Config(format!(
        "could not place the requested pairs in sentences of {}..={} tokens",
        cfg.min_len, cfg.max_len
    )))
}

fn layout(pairs: &[Pair], len: usize, lex: &Lexicon, rng: &mut ChaCha8Rng) -> SentenceRecord {
    let used: usize = pairs.iter().map(Pair::width).sum();
    // Spread the free tokens over the k + 1 slots around the pairs; inner
    // slots get one mandatory separator.
    let k = pairs.len();
    let mut slots = vec![0usize; k + 1];
    for s in slots.iter_mut().take(k).skip(1) {
        *s = 1;
    }
    for _ in 0..len - used - (k - 1) {
        slots[rng.gen_range(0..=k)] += 1;
    }
    let pick = |v: &Vec<String>, rng: &mut ChaCha8Rng| v.choose(rng).expect("non-empty lexicon").clone();
    let mut tokens = Vec::with_capacity(len);
    let mut triplets = Vec::with_capacity(k);
    for (i, p) in pairs.iter().enumerate() {
        for _ in 0..slots[i] {
            tokens.push(pick(&lex.gap, rng));
        }
        let words = |n: usize, class: &Vec<String>, tokens: &mut Vec<String>, rng: &mut ChaCha8Rng| {
            let start = tokens.len();
            for _ in 0..n {
                tokens.push(pick(class, rng));
            }
            Span {
                start,
                end: tokens.len() - 1,
            }
        };
        let opinion_class = &lex.opinion[p.polarity.index()];
        let (aspect, opinion);
        if p.aspect_first {
            aspect = words(p.aspect_len, &lex.aspect, &mut tokens, rng);
            words(p.distance - 1, &lex.link, &mut tokens, rng);
            opinion = words(p.opinion_len, opinion_class, &mut tokens, rng);
        } else {
            opinion = words(p.opinion_len, opinion_class, &mut tokens, rng);
            words(p.distance - 1, &lex.link, &mut tokens, rng);
            aspect = words(p.aspect_len, &lex.aspect, &mut tokens, rng);
        }
        triplets.push(Triplet::new(aspect, opinion, p.polarity));
    }
    for _ in 0..slots[k] {
        tokens.push(pick(&lex.gap, rng));
    }
    debug_assert_eq!(tokens.len(), len);
    SentenceRecord { tokens, triplets }
}
