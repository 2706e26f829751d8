//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test -p tt-core --test acceptance -- 1 4 7` runs a subset; with no
//! numbers every criterion runs. The training criteria (8 to 11) take tens of
//! minutes on one core.

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tt_core::data::SynthConfig;
use tt_core::decoder::{
    candidate_labels, enumerate_candidates, extract_triplets, gold_set, vertex_cells, Task, NONE, VERTEX,
};
use tt_core::harness::{
    checkpoint, evaluate, load_split, run_bench, train, BenchPoint, BenchSettings, Model, RunConfig,
};
use tt_core::numerics::{grad_check, Graph, InitScheme, ParameterStore, Tensor};
use tt_core::stripe_attention::{
    block_mates, full_attention_forward, loop_shift_tensor, loop_unshift_tensor, neighbor_indices,
    build_stripe_mask, stripe_attention_forward, AttentionMode, AttnParamIds, BlockGrid, FlopLedger,
    StripeConfig, WrapMode,
};
use tt_core::table_encoder::Vocabulary;
use tt_core::tagging::{decode_regions, encode_labels, Polarity, SentenceRecord, Span, Triplet};
use tt_core::tt_encoder::{self, tt_forward, TTConfig, TTLayerParams};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, t: Instant) -> Result<(), String> {
    let e = t.elapsed();
    ensure(e <= limit, || format!("took {:.1}s, limit {}s", e.as_secs_f64(), limit.as_secs()))
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

const D_PRIME: usize = 8;
const HEADS: usize = 2;

fn attn_store(seed: u64) -> (AttnParamIds, ParameterStore) {
    let ids = AttnParamIds::new("acc.attn");
    let mut store = ParameterStore::new(seed);
    ids.init(D_PRIME, &mut store).unwrap();
    (ids, store)
}

fn odd_up_to(l: usize) -> impl Iterator<Item = usize> {
    (1..=l).step_by(2)
}

fn c1_stripe_matches_masked_full() -> Outcome {
    let t = Instant::now();
    let mut worst = 0.0f64;
    let mut cases = 0;
    for n in [4, 6, 8] {
        for b in [1, 2] {
            let l = n / b;
            for w in odd_up_to(l) {
                for wrap in [WrapMode::Flattened, WrapMode::Torus] {
                    let mask = Arc::new(build_stripe_mask(n, b, w, wrap).map_err(|e| e.to_string())?);
                    let cfg = StripeConfig { b, w, heads: HEADS, wrap };
                    for seed in 0..20 {
                        let (ids, store) = attn_store(seed);
                        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
                        let x = random_tensor(&mut rng, &[n, n, D_PRIME]);
                        let mut g = Graph::new();
                        let xv = g.constant(x);
                        let mut ledger = FlopLedger::default();
                        let s = stripe_attention_forward(&mut g, &store, xv, &ids, &cfg, &mut ledger)
                            .map_err(|e| e.to_string())?;
                        let f = full_attention_forward(&mut g, &store, xv, &ids, HEADS, Some(mask.clone()), &mut ledger)
                            .map_err(|e| e.to_string())?;
                        worst = worst.max(g.value(s).max_abs_diff(g.value(f)));
                        cases += 1;
                    }
                }
            }
        }
    }
    ensure(worst < 1e-9, || format!("max abs diff {worst:e}"))?;
    within(Duration::from_secs(10), t)?;
    Ok(format!("{cases} cases, max abs diff {worst:.1e}"))
}

fn c2_window_spanning_table_is_full_attention() -> Outcome {
    let mut worst = 0.0f64;
    let mut cases = 0;
    for (n, b) in [(1, 1), (3, 1), (5, 1), (7, 1), (6, 2), (10, 2), (9, 3)] {
        let l = n / b;
        for wrap in [WrapMode::Flattened, WrapMode::Torus] {
            let cfg = StripeConfig { b, w: l, heads: HEADS, wrap };
            for seed in 0..5 {
                let (ids, store) = attn_store(seed);
                let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
                let x = random_tensor(&mut rng, &[n, n, D_PRIME]);
                let mut g = Graph::new();
                let xv = g.constant(x);
                let mut ledger = FlopLedger::default();
                let s = stripe_attention_forward(&mut g, &store, xv, &ids, &cfg, &mut ledger)
                    .map_err(|e| e.to_string())?;
                let f = full_attention_forward(&mut g, &store, xv, &ids, HEADS, None, &mut ledger)
                    .map_err(|e| e.to_string())?;
                worst = worst.max(g.value(s).max_abs_diff(g.value(f)));
                cases += 1;
            }
        }
    }
    ensure(worst < 1e-9, || format!("max abs diff {worst:e}"))?;
    Ok(format!("{cases} cases, max abs diff {worst:.1e}"))
}

fn c3_ledger_ratios() -> Outcome {
    let t = Instant::now();
    let points: Vec<BenchPoint> = [
        (16, 1, 1),
        (16, 1, 3),
        (16, 1, 5),
        (16, 2, 1),
        (16, 2, 3),
        (16, 2, 5),
        (16, 4, 1),
        (16, 4, 3),
        (8, 1, 3),
        (8, 2, 3),
        (12, 2, 3),
        (12, 3, 3),
    ]
    .into_iter()
    .map(|(n, b, w)| BenchPoint { n, b, w })
    .collect();
    let settings = BenchSettings {
        reps: 1,
        ..BenchSettings::default()
    };
    let rows = run_bench(&points, &settings).map_err(|e| e.to_string())?;
    let find = |mode, p: &BenchPoint| {
        rows.iter()
            .find(|r| r.mode == mode && r.n == p.n && r.b == p.b && r.w == p.w)
            .map(|r| (r.score_macs, r.value_macs))
            .ok_or_else(|| format!("missing bench row {mode:?} {p:?}"))
    };
    for p in &points {
        let (ss, sv) = find(AttentionMode::Stripe, p)?;
        let (fs, fv) = find(AttentionMode::Full, p)?;
        let (num, den) = ((p.w * p.w * p.b * p.b) as u64, (p.n * p.n) as u64);
        // exact rational comparison, then the float the CSV would show
        ensure(ss * den == fs * num && sv * den == fv * num, || {
            format!("{p:?}: stripe {ss} full {fs} not in ratio {num}/{den}")
        })?;
        ensure(ss as f64 / fs as f64 == num as f64 / den as f64, || format!("{p:?}: float ratio drift"))?;
    }
    let example = find(AttentionMode::Stripe, &points[7])?.0 as f64 / find(AttentionMode::Full, &points[7])?.0 as f64;
    ensure(example == 0.5625, || format!("n=16 b=4 w=3 ratio {example}"))?;
    for w in [1, 3] {
        for b in [1, 2] {
            let small = find(AttentionMode::Stripe, &BenchPoint { n: 16, b, w })?.0;
            let big = find(AttentionMode::Stripe, &BenchPoint { n: 16, b: 2 * b, w })?.0;
            ensure(big == 4 * small, || format!("w={w} b={b}: {small} -> {big}"))?;
        }
    }
    within(Duration::from_secs(30), t)?;
    Ok(format!("12 points exact, n=16 b=4 w=3 ratio {example}"))
}

fn c4_neighbor_sets() -> Outcome {
    let example: BTreeSet<usize> = neighbor_indices(0, 4, 3, WrapMode::Flattened)
        .map_err(|e| e.to_string())?
        .into_iter()
        .collect();
    ensure(example == BTreeSet::from([0, 1, 3, 4, 5, 11, 12, 13, 15]), || {
        format!("l=4 w=3 i=0 gave {example:?}")
    })?;
    let mut checked = 0;
    for wrap in [WrapMode::Flattened, WrapMode::Torus] {
        for l in 1..=8 {
            for w in odd_up_to(l) {
                let sets: Vec<BTreeSet<usize>> = (0..l * l)
                    .map(|i| neighbor_indices(i, l, w, wrap).map(|v| v.into_iter().collect()))
                    .collect::<Result<_, _>>()
                    .map_err(|e| e.to_string())?;
                for (i, s) in sets.iter().enumerate() {
                    ensure(s.len() == w * w, || format!("{wrap:?} l={l} w={w} i={i}: |N|={}", s.len()))?;
                    for &j in s {
                        ensure(sets[j].contains(&i), || format!("{wrap:?} l={l} w={w}: {j} in N({i}) only"))?;
                    }
                    checked += 1;
                }
            }
        }
    }
    Ok(format!("{checked} neighbor sets, example matches"))
}

fn zero_branches(cfg: &TTConfig, store: &mut ParameterStore) {
    for i in 0..cfg.num_layers {
        for id in TTLayerParams::new(i).branch_ids() {
            let shape = store.value(id).unwrap().shape().to_vec();
            store.set_value(id, Tensor::zeros(&shape)).unwrap();
        }
    }
}

fn c5_loop_shift_algebra() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for n in 1..=16 {
        let x = random_tensor(&mut rng, &[n, n, 2]);
        for s in 0..n {
            ensure(loop_unshift_tensor(&loop_shift_tensor(&x, s), s) == x, || format!("n={n} s={s}"))?;
            ensure(loop_shift_tensor(&loop_unshift_tensor(&x, s), s) == x, || format!("n={n} s={s} (rev)"))?;
        }
    }

    for (layers, b, w, n) in [(2, 2, 1, 4), (2, 2, 3, 6), (4, 3, 1, 6), (6, 2, 3, 8), (4, 4, 1, 8)] {
        let cfg = TTConfig {
            num_layers: layers,
            ffn_width: 8,
            ..TTConfig::new(4, 2, b, w)
        };
        let mut store = ParameterStore::new(9);
        tt_encoder::init_params(&cfg, &mut store).map_err(|e| e.to_string())?;
        zero_branches(&cfg, &mut store);
        let x = random_tensor(&mut rng, &[n, n, 4]);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = tt_forward(&mut g, &store, xv, &cfg, &mut FlopLedger::default()).map_err(|e| e.to_string())?;
        ensure(g.value(y) == &x, || format!("{layers} zero layers, b={b}: not identity"))?;
    }

    for b in 1..=4 {
        let grid = BlockGrid::new(4 * b, b).map_err(|e| e.to_string())?;
        let s = b / 2;
        // cells on a block boundary (first row or column of a block)
        let boundary = (0..grid.n_padded)
            .flat_map(|r| (0..grid.n_padded).map(move |c| (r, c)))
            .filter(|&(r, c)| r % b == 0 || c % b == 0);
        for (r, c) in boundary {
            let same = block_mates(&grid, r, c, 0) == block_mates(&grid, r, c, s);
            ensure(same == (b == 1), || format!("b={b} cell ({r},{c}): membership unchanged={same}"))?;
        }
    }
    Ok("shift/unshift, zero stacks and partitions all hold".into())
}

fn scaled_tiny_model() -> (Model, SentenceRecord) {
    let cfg = RunConfig {
        d: 4,
        d_prime: 8,
        heads: 2,
        ffn_width: 8,
        num_layers: 2,
        b: 2,
        w: 1,
        seed: 5,
        init: InitScheme::Fixed,
        ..RunConfig::default()
    };
    let tokens: Vec<String> = ["the", "soup", "was", "cold"].iter().map(|s| s.to_string()).collect();
    let vocab = Vocabulary::build(tokens.iter().map(String::as_str));
    let rec = SentenceRecord::new(
        tokens,
        vec![Triplet::new(Span::single(1), Span::new(2, 3).unwrap(), Polarity::Neg)],
    )
    .unwrap();
    let mut model = Model::new(cfg, vocab).unwrap();
    // Spread weights so pooled maxima sit far apart relative to eps, and pin
    // the vertex heads away from ties so the candidate set is fixed.
    for p in model.store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v *= 5.0);
    }
    (model, rec)
}

fn c6_gradients() -> Outcome {
    let mut worst = 0.0f64;
    let mut entries = 0;
    for bias in [[1.0, -1.0], [-1.0, 1.0]] {
        let (mut model, rec) = scaled_tiny_model();
        for id in ["dec.tl.b", "dec.br.b"] {
            model.store.set_value(id, Tensor::from_vec(bias.to_vec())).unwrap();
        }
        let f = |g: &mut Graph, s: &ParameterStore| {
            let mut m = model.clone();
            m.store = s.clone();
            Ok(m.loss(g, &rec, &mut FlopLedger::default())?.total)
        };
        let report = grad_check(f, &model.store, 1e-5).map_err(|e| e.to_string())?;
        worst = worst.max(report.max_rel_error);
        entries += report.entries_checked;
    }
    ensure(worst < 1e-4, || format!("max rel err {worst:e}"))?;
    Ok(format!("{entries} entries, max rel err {worst:.2e}"))
}

fn random_record(rng: &mut ChaCha8Rng) -> SentenceRecord {
    let n = rng.gen_range(1..=16);
    let k = rng.gen_range(0..=4);
    let span = |rng: &mut ChaCha8Rng| {
        let s = rng.gen_range(0..n);
        Span::new(s, rng.gen_range(s..n.min(s + 3))).unwrap()
    };
    let mut triplets: Vec<Triplet> = Vec::new();
    for _ in 0..k {
        let t = Triplet::new(span(rng), span(rng), Polarity::from_index(rng.gen_range(0..3)).unwrap());
        if !triplets.iter().any(|u| u.aspect == t.aspect && u.opinion == t.opinion) {
            triplets.push(t);
        }
    }
    SentenceRecord::new((0..n).map(|i| format!("w{i}")).collect(), triplets).unwrap()
}

fn c7_round_trips() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for i in 0..1000 {
        let rec = random_record(&mut rng);
        let labels = encode_labels(&rec).map_err(|e| e.to_string())?;
        let decoded: BTreeSet<Triplet> = decode_regions(&labels).map_err(|e| e.to_string())?.into_iter().collect();
        let gold: BTreeSet<Triplet> = rec.triplets.iter().copied().collect();
        ensure(decoded == gold, || format!("fixture {i}: decode mismatch"))?;

        for task in [Task::Aste, Task::Aope] {
            let n = labels.n;
            let vertex_logits = |grid: &[u8]| {
                let data = grid
                    .iter()
                    .flat_map(|&v| if v == 1 { [-3.0, 3.0] } else { [3.0, -3.0] })
                    .collect();
                Tensor::new(vec![n, n, 2], data).unwrap()
            };
            let tl = vertex_cells(&vertex_logits(&labels.tl));
            let br = vertex_cells(&vertex_logits(&labels.br));
            let cands = enumerate_candidates(&tl, &br, usize::MAX);
            let classes = candidate_labels(&cands, &labels.regions, task);
            let k = task.num_classes();
            let mut logits = Tensor::zeros(&[cands.len().max(1), k]);
            for (row, &cls) in classes.iter().enumerate() {
                logits.data_mut()[row * k + cls] = 5.0;
            }
            let got: BTreeSet<_> = extract_triplets(&cands, &logits, task).into_iter().collect();
            ensure(got == gold_set(&rec.triplets, task), || format!("fixture {i}: {task:?} extraction mismatch"))?;
        }
    }
    // keep the class constants honest
    ensure(NONE == 0 && VERTEX == 1, || "vertex class order changed".into())?;
    Ok("1000 fixtures, both tasks".into())
}

fn train_and_test(cfg: &RunConfig) -> Result<f64, String> {
    let split = load_split(cfg).map_err(|e| e.to_string())?;
    let out = train(cfg, &split).map_err(|e| e.to_string())?;
    Ok(evaluate(&out.model, &split.test).map_err(|e| e.to_string())?.triplet_f1)
}

fn c8_learnability() -> Outcome {
    let t = Instant::now();
    let cfg = RunConfig::default();
    let f1 = train_and_test(&cfg)?;
    ensure(f1 >= 0.90, || format!("test triplet F1 {f1:.4}"))?;
    within(Duration::from_secs(600), t)?;
    Ok(format!("test triplet F1 {f1:.4} in {:.0}s", t.elapsed().as_secs_f64()))
}

/// Long-distance corpus and the training settings used for the ablation.
fn long_distance_config(seed: u64) -> RunConfig {
    RunConfig {
        seed,
        synth: SynthConfig::long_distance(seed),
        ..RunConfig::long_distance()
    }
}

fn c9_ablation_direction() -> Outcome {
    let t = Instant::now();
    let mut wins = 0;
    let mut detail = Vec::new();
    for seed in 1..=5 {
        let full = long_distance_config(seed);
        let no_shift = RunConfig {
            loop_shift: false,
            ..full.clone()
        };
        let (a, b) = (train_and_test(&full)?, train_and_test(&no_shift)?);
        if a >= b {
            wins += 1;
        }
        detail.push(format!("{a:.3}/{b:.3}"));
    }
    ensure(wins >= 4, || format!("full >= no-shift in {wins}/5 seeds ({})", detail.join(" ")))?;
    within(Duration::from_secs(1800), t)?;
    Ok(format!("{wins}/5 seeds, full/no-shift F1 {}", detail.join(" ")))
}

fn c10_aope() -> Outcome {
    let cfg = RunConfig {
        task: Task::Aope,
        ..RunConfig::default()
    };
    let f1 = train_and_test(&cfg)?;
    ensure(f1 >= 0.90, || format!("pair F1 {f1:.4}"))?;
    Ok(format!("pair F1 {f1:.4}"))
}

fn c11_determinism() -> Outcome {
    let cfg = RunConfig {
        epochs: 2,
        synth: SynthConfig {
            num_sentences: 200,
            ..SynthConfig::default()
        },
        ..RunConfig::default()
    };
    let run = || -> Result<(Vec<u8>, String), String> {
        let split = load_split(&cfg).map_err(|e| e.to_string())?;
        let out = train(&cfg, &split).map_err(|e| e.to_string())?;
        let bytes = checkpoint::to_bytes(&out.model).map_err(|e| e.to_string())?;
        let report = evaluate(&out.model, &split.test).map_err(|e| e.to_string())?;
        Ok((bytes, serde_json::to_string(&report).map_err(|e| e.to_string())?))
    };
    let (a, b) = (run()?, run()?);
    ensure(a.0 == b.0, || "checkpoints differ".into())?;
    ensure(a.1 == b.1, || "eval reports differ".into())?;
    Ok(format!("{} checkpoint bytes identical", a.0.len()))
}

/// Criteria that are statistical expectations rather than guarantees. Their
/// FAIL lines are printed but do not fail the run.
const STATISTICAL: [usize; 1] = [9];

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("stripe equals masked full attention", c1_stripe_matches_masked_full),
        ("w = l degenerates to full attention", c2_window_spanning_table_is_full_attention),
        ("ledger ratio w²b²/n²", c3_ledger_ratios),
        ("neighbor-set properties", c4_neighbor_sets),
        ("loop-shift algebra", c5_loop_shift_algebra),
        ("end-to-end gradient check", c6_gradients),
        ("tagging/decoding round trips", c7_round_trips),
        ("learnability on the default corpus", c8_learnability),
        ("long-distance ablation direction (statistical)", c9_ablation_direction),
        ("AOPE pair F1", c10_aope),
        ("bit-identical reruns", c11_determinism),
    ];
    let wanted: BTreeSet<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let (mut run, mut passed, mut blocking) = (0, 0, 0);
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        run += 1;
        let t = Instant::now();
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => {
                passed += 1;
                println!("criterion {id:>2} PASS  {name}: {msg} [{secs:.1}s]");
            }
            Err(msg) => {
                if !STATISTICAL.contains(&id) {
                    blocking += 1;
                }
                println!("criterion {id:>2} FAIL  {name}: {msg} [{secs:.1}s]");
            }
        }
    }
    println!(
        "{passed}/{run} criteria passed; {} statistical failure(s) reported, not fatal",
        run - passed - blocking
    );
    if blocking == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
