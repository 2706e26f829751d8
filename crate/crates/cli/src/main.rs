//! `tt`: train, evaluate, benchmark and ablate the stripe-attention triplet
//! extractor.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tt_core::data::{self, DistanceBucket, SynthConfig};
use tt_core::decoder::Task;
use tt_core::harness::{self, ablate, bench, checkpoint, BenchPoint, BenchSettings, RunConfig, Variant};
use tt_core::numerics::InitScheme;
use tt_core::stripe_attention::{AttentionMode, WrapMode};
use tt_core::tt_encoder::GateMode;
use tt_core::Error;

#[derive(Parser)]
#[command(name = "tt", version, about = "Stripe-attention table tagging for triplet extraction")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on the test split of the corpus it was trained on
    /// (flags and `--config` override the stored settings).
    Eval(EvalArgs),
    /// Time stripe and full attention over a sweep and print CSV.
    Bench(BenchArgs),
    /// Train the ablation variants on one split and print CSV.
    Ablate(AblateArgs),
    /// Write a synthetic corpus.
    GenData(GenArgs),
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct BenchArgs {
    /// Table sides to sweep (multiples of every block width).
    #[arg(long, value_delimiter = ',')]
    sweep_n: Vec<usize>,
    /// Block widths to sweep; defaults to `--b`.
    #[arg(long, value_delimiter = ',')]
    sweep_b: Vec<usize>,
    /// Window widths to sweep; defaults to `--w`.
    #[arg(long, value_delimiter = ',')]
    sweep_w: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, value_delimiter = ',', default_values = ["stripe", "full"])]
    modes: Vec<ModeArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_delimiter = ',')]
    variants: Vec<VariantArg>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = FormatArg::Jsonl)]
    format: FormatArg,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Jsonl,
    Hash,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Stripe,
    Full,
}

impl From<ModeArg> for AttentionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Stripe => AttentionMode::Stripe,
            ModeArg::Full => AttentionMode::Full,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum WrapArg {
    Flattened,
    Torus,
}

#[derive(Clone, Copy, ValueEnum)]
enum GateArg {
    Scalar,
    Channel,
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Aste,
    Aope,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Glorot,
    Fixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Full,
    NoLoopShift,
    NoStripe,
    NormalLayers,
    NoRelationEncoder,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Full => Variant::Full,
            VariantArg::NoLoopShift => Variant::NoLoopShift,
            VariantArg::NoStripe => Variant::NoStripe,
            VariantArg::NormalLayers => Variant::NormalLayers,
            VariantArg::NoRelationEncoder => Variant::NoRelationEncoder,
        }
    }
}

/// Overrides for every [`RunConfig`] field. Precedence: flag, then `TT_SEED`
/// for the seed, then the `--config` file, then defaults.
#[derive(Args, Default)]
struct ConfigArgs {
    /// JSON file with RunConfig fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    d_bilinear: Option<usize>,
    #[arg(long)]
    d_prime: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    ffn_width: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    /// Block width.
    #[arg(long)]
    b: Option<usize>,
    /// Window width in blocks (odd).
    #[arg(long)]
    w: Option<usize>,
    #[arg(long, value_enum)]
    attention: Option<ModeArg>,
    #[arg(long)]
    loop_shift: Option<bool>,
    #[arg(long, value_enum)]
    wrap: Option<WrapArg>,
    #[arg(long, value_enum)]
    gate: Option<GateArg>,
    #[arg(long)]
    tt_enabled: Option<bool>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    beta1: Option<f64>,
    #[arg(long)]
    beta2: Option<f64>,
    #[arg(long)]
    eps: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long, env = "TT_SEED")]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    task: Option<TaskArg>,
    #[arg(long)]
    pos_weight: Option<f64>,
    #[arg(long)]
    max_candidates: Option<usize>,
    #[arg(long)]
    train_path: Option<PathBuf>,
    #[arg(long)]
    dev_path: Option<PathBuf>,
    #[arg(long)]
    test_path: Option<PathBuf>,
    #[arg(long)]
    checkpoint_path: Option<PathBuf>,
    #[arg(long)]
    log_path: Option<PathBuf>,
    #[arg(long)]
    num_sentences: Option<usize>,
    #[arg(long)]
    vocab_size: Option<usize>,
    #[arg(long)]
    min_len: Option<usize>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    min_triplets: Option<usize>,
    #[arg(long)]
    max_triplets: Option<usize>,
    /// Distance buckets as `lo-hi:weight`, comma separated.
    #[arg(long, value_delimiter = ',', value_parser = parse_bucket)]
    distance_buckets: Option<Vec<DistanceBucket>>,
    #[arg(long)]
    multiword_prob: Option<f64>,
    #[arg(long)]
    synth_seed: Option<u64>,
}

fn parse_bucket(s: &str) -> Result<DistanceBucket, String> {
    let bad = || format!("expected lo-hi:weight, got `{s}`");
    let (range, weight) = s.split_once(':').ok_or_else(bad)?;
    let (lo, hi) = range.split_once('-').ok_or_else(bad)?;
    Ok(DistanceBucket::new(
        lo.trim().parse().map_err(|_| bad())?,
        hi.trim().parse().map_err(|_| bad())?,
        weight.trim().parse().map_err(|_| bad())?,
    ))
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v.into();
        }
    };
}

impl ConfigArgs {
    fn resolve(&self) -> tt_core::Result<RunConfig> {
        self.resolve_onto(RunConfig::default())
    }

    /// Like [`resolve`](Self::resolve) with `base` standing in for the
    /// defaults when no `--config` file is given.
    fn resolve_onto(&self, base: RunConfig) -> tt_core::Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::from_json_file(p)?,
            None => base,
        };
        set!(c.d, self.d);
        if self.d_bilinear.is_some() {
            c.d_bilinear = self.d_bilinear;
        }
        set!(c.d_prime, self.d_prime);
        set!(c.heads, self.heads);
        set!(c.ffn_width, self.ffn_width);
        set!(c.num_layers, self.num_layers);
        set!(c.b, self.b);
        set!(c.w, self.w);
        set!(c.attention, self.attention);
        set!(c.loop_shift, self.loop_shift);
        if let Some(w) = self.wrap {
            c.wrap = match w {
                WrapArg::Flattened => WrapMode::Flattened,
                WrapArg::Torus => WrapMode::Torus,
            };
        }
        if let Some(g) = self.gate {
            c.gate = match g {
                GateArg::Scalar => GateMode::Scalar,
                GateArg::Channel => GateMode::Channel,
            };
        }
        set!(c.tt_enabled, self.tt_enabled);
        if let Some(i) = self.init {
            c.init = match i {
                InitArg::Glorot => InitScheme::Glorot,
                InitArg::Fixed => InitScheme::Fixed,
            };
        }
        set!(c.lr, self.lr);
        set!(c.beta1, self.beta1);
        set!(c.beta2, self.beta2);
        set!(c.eps, self.eps);
        set!(c.weight_decay, self.weight_decay);
        set!(c.epochs, self.epochs);
        set!(c.batch_size, self.batch_size);
        set!(c.seed, self.seed);
        if let Some(t) = self.task {
            c.task = match t {
                TaskArg::Aste => Task::Aste,
                TaskArg::Aope => Task::Aope,
            };
        }
        set!(c.pos_weight, self.pos_weight);
        set!(c.max_candidates, self.max_candidates);
        for (dst, src) in [
            (&mut c.train_path, &self.train_path),
            (&mut c.dev_path, &self.dev_path),
            (&mut c.test_path, &self.test_path),
            (&mut c.checkpoint_path, &self.checkpoint_path),
            (&mut c.log_path, &self.log_path),
        ] {
            if src.is_some() {
                dst.clone_from(src);
            }
        }
        let s: &mut SynthConfig = &mut c.synth;
        set!(s.num_sentences, self.num_sentences);
        set!(s.vocab_size, self.vocab_size);
        set!(s.min_len, self.min_len);
        set!(s.max_len, self.max_len);
        set!(s.min_triplets, self.min_triplets);
        set!(s.max_triplets, self.max_triplets);
        set!(s.distance_buckets, self.distance_buckets.clone());
        set!(s.multiword_prob, self.multiword_prob);
        set!(s.seed, self.synth_seed);
        c.validate()?;
        Ok(c)
    }
}

fn write_or_print(path: Option<&Path>, text: &str) -> tt_core::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn run(cli: Cli) -> tt_core::Result<()> {
    match cli.command {
        Command::Train(a) => {
            let cfg = a.cfg.resolve()?;
            let split = harness::load_split(&cfg)?;
            let out = harness::train(&cfg, &split)?;
            let ckpt = cfg.checkpoint_path.clone().unwrap_or_else(|| PathBuf::from("tt.ckpt"));
            checkpoint::save(&out.model, &ckpt)?;
            if let Some(p) = &cfg.log_path {
                std::fs::write(p, serde_json::to_string_pretty(&out.log)?)?;
            }
            for e in &out.log.epochs {
                eprintln!(
                    "epoch {:>3}  loss {:.4}  dev f1 {:.4}  {:.0} ms",
                    e.epoch, e.mean_loss, e.dev_f1, e.wall_ms
                );
            }
            let report = harness::evaluate(&out.model, &split.test)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Eval(a) => {
            let model = checkpoint::load(&a.checkpoint)?;
            let cfg = a.cfg.resolve_onto(model.config.clone())?;
            let split = harness::load_split(&cfg)?;
            let report = harness::evaluate(&model, &split.test)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Bench(a) => {
            let cfg = a.cfg.resolve()?;
            let points = if a.sweep_n.is_empty() && a.sweep_b.is_empty() && a.sweep_w.is_empty() {
                bench::default_sweep()
            } else {
                let or = |v: &Vec<usize>, d: usize| if v.is_empty() { vec![d] } else { v.clone() };
                let mut pts = Vec::new();
                for &n in &or(&a.sweep_n, 16) {
                    for &b in &or(&a.sweep_b, cfg.b) {
                        for &w in &or(&a.sweep_w, cfg.w) {
                            pts.push(BenchPoint { n, b, w });
                        }
                    }
                }
                pts
            };
            let settings = BenchSettings {
                heads: cfg.heads,
                d_prime: cfg.d_prime,
                wrap: cfg.wrap,
                reps: a.reps,
                modes: a.modes.iter().map(|&m| m.into()).collect(),
                seed: cfg.seed,
            };
            let rows = harness::run_bench(&points, &settings).map_err(|e| match e {
                Error::Geometry(m) => Error::Config(m),
                e => e,
            })?;
            write_or_print(a.out.as_deref(), &bench::to_csv(&rows))?;
        }
        Command::Ablate(a) => {
            let cfg = a.cfg.resolve()?;
            let split = harness::load_split(&cfg)?;
            let variants: Vec<Variant> = if a.variants.is_empty() {
                Variant::ALL.to_vec()
            } else {
                a.variants.iter().map(|&v| v.into()).collect()
            };
            let rows = harness::ablate(&cfg, &split, &variants)?;
            write_or_print(a.out.as_deref(), &ablate::to_csv(&rows))?;
        }
        Command::GenData(a) => {
            let cfg = a.cfg.resolve()?;
            let corpus = data::generate_synthetic(&cfg.synth)?;
            match a.format {
                FormatArg::Jsonl => data::write_jsonl(&a.out, &corpus.records)?,
                FormatArg::Hash => data::write_hash_format(&a.out, &corpus.records)?,
            }
            eprintln!(
                "wrote {} sentences, {} triplets to {}",
                corpus.len(),
                corpus.num_triplets(),
                a.out.display()
            );
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Geometry(_) | Error::Padding { .. } => 2,
        Error::Data { .. } | Error::Validation(_) | Error::Vocabulary { .. } | Error::Checkpoint(_) | Error::Io(_) => 3,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
