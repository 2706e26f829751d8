use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::{Graph, ParameterStore, Tensor};
use crate::stripe_attention::{
    flops, full_attention_forward, stripe_attention_forward, AttentionMode, AttnParamIds, FlopLedger, StripeConfig,
    WrapMode,
};

/// One sweep point: table side `n` (already a multiple of `b`), block width
/// and window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchPoint {
    pub n: usize,
    pub b: usize,
    pub w: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub mode: AttentionMode,
    pub n: usize,
    pub b: usize,
    pub w: usize,
    pub heads: usize,
    pub d_prime: usize,
    pub score_macs: u64,
    pub value_macs: u64,
    pub median_ms: f64,
}

pub const CSV_HEADER: &str = "mode,n,b,w,heads,d_prime,score_macs,value_macs,median_ms";

impl BenchRow {
    pub fn csv_line(&self) -> String {
        let mode = match self.mode {
            AttentionMode::Stripe => "stripe",
            AttentionMode::Full => "full",
        };
        format!(
            "{mode},{},{},{},{},{},{},{},{:.4}",
            self.n, self.b, self.w, self.heads, self.d_prime, self.score_macs, self.value_macs, self.median_ms
        )
    }
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.csv_line());
    }
    s
}

/// Default sweep: `b` and `w` at fixed `n`, then growing `n`.
pub fn default_sweep() -> Vec<BenchPoint> {
    let mut v = Vec::new();
    for b in [1, 2, 4] {
        for w in [1, 3] {
            v.push(BenchPoint { n: 16, b, w });
        }
    }
    for n in [8, 12, 20, 24] {
        v.push(BenchPoint { n, b: 2, w: 3 });
    }
    v
}

pub struct BenchSettings {
    pub heads: usize,
    pub d_prime: usize,
    pub wrap: WrapMode,
    pub reps: usize,
    pub modes: Vec<AttentionMode>,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            heads: 4,
            d_prime: 48,
            wrap: WrapMode::Flattened,
            reps: 5,
            modes: vec![AttentionMode::Stripe, AttentionMode::Full],
            seed: 0,
        }
    }
}

/// Times one attention forward per mode and point; MAC columns come from the
/// ledger and are checked against the closed form.
pub fn run_bench(points: &[BenchPoint], s: &BenchSettings) -> Result<Vec<BenchRow>> {
    let ids = AttnParamIds::new("bench.attn");
    let mut store = ParameterStore::new(s.seed);
    ids.init(s.d_prime, &mut store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let mut rows = Vec::new();
    for p in points {
        let cfg = StripeConfig {
            b: p.b,
            w: p.w,
            heads: s.heads,
            wrap: s.wrap,
        };
        cfg.validate(p.n, s.d_prime)?;
        let data: Vec<f64> = (0..p.n * p.n * s.d_prime).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![p.n, p.n, s.d_prime], data)?;
        for &mode in &s.modes {
            let mut times = Vec::with_capacity(s.reps);
            let mut ledger = FlopLedger::default();
            for _ in 0..s.reps.max(1) {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                ledger = FlopLedger::default();
                let t = Instant::now();
                match mode {
                    AttentionMode::Stripe => {
                        stripe_attention_forward(&mut g, &store, xv, &ids, &cfg, &mut ledger)?;
                    }
                    AttentionMode::Full => {
                        full_attention_forward(&mut g, &store, xv, &ids, s.heads, None, &mut ledger)?;
                    }
                }
                times.push(t.elapsed().as_secs_f64() * 1e3);
            }
            debug_assert_eq!(ledger, flops(p.n, p.b, p.w, s.heads, s.d_prime, mode)?);
            times.sort_by(f64::total_cmp);
            rows.push(BenchRow {
                mode,
                n: p.n,
                b: p.b,
                w: p.w,
                heads: s.heads,
                d_prime: s.d_prime,
                score_macs: ledger.score_macs,
                value_macs: ledger.value_macs,
                median_ms: times[times.len() / 2],
            });
        }
    }
    Ok(rows)
}
