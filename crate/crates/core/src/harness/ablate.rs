use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::Split;
use crate::error::Result;
use crate::stripe_attention::AttentionMode;

use super::{evaluate, train, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    NoLoopShift,
    /// Dense attention (every cell sees every cell), shifts kept.
    NoStripe,
    /// Dense attention without shifts.
    NormalLayers,
    /// Layer stack bypassed; the decoder sees the conv output.
    NoRelationEncoder,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoLoopShift,
        Variant::NoStripe,
        Variant::NormalLayers,
        Variant::NoRelationEncoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLoopShift => "no-loop-shift",
            Variant::NoStripe => "no-stripe",
            Variant::NormalLayers => "normal-layers",
            Variant::NoRelationEncoder => "no-relation-encoder",
        }
    }

    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoLoopShift => c.loop_shift = false,
            Variant::NoStripe => c.attention = AttentionMode::Full,
            Variant::NormalLayers => {
                c.attention = AttentionMode::Full;
                c.loop_shift = false;
            }
            Variant::NoRelationEncoder => c.tt_enabled = false,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub num_params: usize,
    pub triplet_f1: f64,
    pub delta_f1: f64,
    pub sentence_exact_match: f64,
    /// Attention score MACs summed over the final training epoch.
    pub score_macs: u64,
}

pub const CSV_HEADER: &str = "variant,num_params,triplet_f1,delta_f1,sentence_exact_match,score_macs";

pub fn to_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{:.6},{:.6},{:.6},{}",
            r.variant.name(),
            r.num_params,
            r.triplet_f1,
            r.delta_f1,
            r.sentence_exact_match,
            r.score_macs
        );
    }
    s
}

/// Trains and tests each variant on the same split and seed; deltas are
/// relative to the first variant listed.
pub fn ablate(base: &RunConfig, split: &Split, variants: &[Variant]) -> Result<Vec<AblationRow>> {
    let mut rows: Vec<AblationRow> = Vec::new();
    for &v in variants {
        let cfg = v.apply(base);
        let out = train(&cfg, split)?;
        let report = evaluate(&out.model, &split.test)?;
        let reference = rows.first().map_or(report.triplet_f1, |r| r.triplet_f1);
        rows.push(AblationRow {
            variant: v,
            num_params: out.model.num_params(),
            triplet_f1: report.triplet_f1,
            delta_f1: report.triplet_f1 - reference,
            sentence_exact_match: report.sentence_exact_match_rate,
            score_macs: out.log.epochs.last().map_or(0, |e| e.ledger.score_macs),
        });
    }
    Ok(rows)
}
