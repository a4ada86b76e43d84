//! Threshold-based head scores computed from attention traces.
//!
//! Six base scores read one head's attention weights `A`, value states `V`
//! or head outputs `Z = A·V`, restricted to the unpadded positions:
//!
//! | id     | value                                   | inactive when |
//! |--------|-----------------------------------------|---------------|
//! | AWFT   | mean over queries of `A[i, 0]`          | `> τ`         |
//! | AEQD   | mean over queries of `Ent(A[i, 0..=i])` | `< τ`         |
//! | FTVVN  | `‖V[0]‖₂`                               | `< τ`         |
//! | AVVN   | mean over positions of `‖V[i]‖₂`        | `< τ`         |
//! | LTHON  | `‖Z[last]‖₂`                            | `< τ`         |
//! | AHON   | mean over positions of `‖Z[i]‖₂`        | `< τ`         |
//!
//! Each has a `_LN` variant dividing by the mean of that score over all heads
//! of the layer (the head itself included). `LTHON_HN` divides `‖Z[last]‖₂` by
//! the mean per-position output norm of the same head.
//!
//! Accumulation happens in `f64` regardless of the trace scalar type.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::l2_norm;
use crate::trace::{AttentionTrace, DegenerateFlag, HeadSlice, ScoreMatrix};

/// Comparison that marks a head inactive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    GreaterThan,
    LessThan,
}

impl Direction {
    /// Strict comparison; a score equal to `tau` is never flagged.
    pub fn is_inactive(self, score: f64, tau: f64) -> bool {
        match self {
            Direction::GreaterThan => score > tau,
            Direction::LessThan => score < tau,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScoreFn {
    #[serde(rename = "AWFT")]
    Awft,
    #[serde(rename = "AEQD")]
    Aeqd,
    #[serde(rename = "FTVVN")]
    Ftvvn,
    #[serde(rename = "AVVN")]
    Avvn,
    #[serde(rename = "LTHON")]
    Lthon,
    #[serde(rename = "AHON")]
    Ahon,
    #[serde(rename = "AWFT_LN")]
    AwftLn,
    #[serde(rename = "AEQD_LN")]
    AeqdLn,
    #[serde(rename = "FTVVN_LN")]
    FtvvnLn,
    #[serde(rename = "AVVN_LN")]
    AvvnLn,
    #[serde(rename = "LTHON_LN")]
    LthonLn,
    #[serde(rename = "AHON_LN")]
    AhonLn,
    #[serde(rename = "LTHON_HN")]
    LthonHn,
}

impl ScoreFn {
    pub const ALL: [ScoreFn; 13] = [
        ScoreFn::Awft,
        ScoreFn::Aeqd,
        ScoreFn::Ftvvn,
        ScoreFn::Avvn,
        ScoreFn::Lthon,
        ScoreFn::Ahon,
        ScoreFn::AwftLn,
        ScoreFn::AeqdLn,
        ScoreFn::FtvvnLn,
        ScoreFn::AvvnLn,
        ScoreFn::LthonLn,
        ScoreFn::AhonLn,
        ScoreFn::LthonHn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ScoreFn::Awft => "AWFT",
            ScoreFn::Aeqd => "AEQD",
            ScoreFn::Ftvvn => "FTVVN",
            ScoreFn::Avvn => "AVVN",
            ScoreFn::Lthon => "LTHON",
            ScoreFn::Ahon => "AHON",
            ScoreFn::AwftLn => "AWFT_LN",
            ScoreFn::AeqdLn => "AEQD_LN",
            ScoreFn::FtvvnLn => "FTVVN_LN",
            ScoreFn::AvvnLn => "AVVN_LN",
            ScoreFn::LthonLn => "LTHON_LN",
            ScoreFn::AhonLn => "AHON_LN",
            ScoreFn::LthonHn => "LTHON_HN",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            ScoreFn::Awft | ScoreFn::AwftLn => Direction::GreaterThan,
            _ => Direction::LessThan,
        }
    }

    /// The unnormalized score this function is derived from.
    pub fn base(self) -> ScoreFn {
        match self {
            ScoreFn::AwftLn => ScoreFn::Awft,
            ScoreFn::AeqdLn => ScoreFn::Aeqd,
            ScoreFn::FtvvnLn => ScoreFn::Ftvvn,
            ScoreFn::AvvnLn => ScoreFn::Avvn,
            ScoreFn::LthonLn | ScoreFn::LthonHn => ScoreFn::Lthon,
            ScoreFn::AhonLn => ScoreFn::Ahon,
            base => base,
        }
    }

    pub fn is_layer_normalized(self) -> bool {
        matches!(
            self,
            ScoreFn::AwftLn
                | ScoreFn::AeqdLn
                | ScoreFn::FtvvnLn
                | ScoreFn::AvvnLn
                | ScoreFn::LthonLn
                | ScoreFn::AhonLn
        )
    }
}

impl fmt::Display for ScoreFn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreFn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScoreFn::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Unknown(s.to_string()))
    }
}

/// Mean attention weight on the first key, `n × n` row-major input.
pub fn awft<T: Scalar>(attn: &[T], n: usize) -> f64 {
    (0..n).map(|i| attn[i * n].as_f64()).sum::<f64>() / n as f64
}

/// Mean natural-log entropy of each query row over its causal support.
pub fn aeqd<T: Scalar>(attn: &[T], n: usize) -> f64 {
    let total: f64 = (0..n)
        .map(|i| {
            attn[i * n..i * n + i + 1]
                .iter()
                .map(|w| w.as_f64())
                .filter(|&w| w > 0.0)
                .map(|w| -w * w.ln())
                .sum::<f64>()
        })
        .sum();
    total / n as f64
}

/// Norm of the first position's value vector.
pub fn ftvvn<T: Scalar>(values: &[T], d_head: usize) -> f64 {
    l2_norm(&values[..d_head])
}

/// Mean row norm of an `n × d_head` matrix.
fn mean_row_norm<T: Scalar>(m: &[T], d_head: usize) -> f64 {
    let n = m.len() / d_head;
    m.chunks_exact(d_head).map(l2_norm).sum::<f64>() / n as f64
}

pub fn avvn<T: Scalar>(values: &[T], d_head: usize) -> f64 {
    mean_row_norm(values, d_head)
}

/// Norm of the last position's head output.
pub fn lthon<T: Scalar>(head_out: &[T], d_head: usize) -> f64 {
    l2_norm(&head_out[head_out.len() - d_head..])
}

pub fn ahon<T: Scalar>(head_out: &[T], d_head: usize) -> f64 {
    mean_row_norm(head_out, d_head)
}

/// `lthon` divided by the head's mean per-position output norm.
/// Returns `(1.0, true)` when that mean is zero.
pub fn lthon_hn<T: Scalar>(head_out: &[T], d_head: usize) -> (f64, bool) {
    let denom = mean_row_norm(head_out, d_head);
    if denom == 0.0 {
        (1.0, true)
    } else {
        (lthon(head_out, d_head) / denom, false)
    }
}

/// Divides each head's score by the layer mean. A zero mean yields all ones
/// and `true` for the degenerate flag.
pub fn layer_normalize(raw: &[f64]) -> (Vec<f64>, bool) {
    assert!(!raw.is_empty(), "layer must contain at least one head");
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    if mean == 0.0 {
        (vec![1.0; raw.len()], true)
    } else {
        (raw.iter().map(|v| v / mean).collect(), false)
    }
}

fn base_score<T: Scalar>(slice: &HeadSlice<'_, T>, base: ScoreFn) -> f64 {
    match base {
        ScoreFn::Awft => awft(&slice.attn, slice.n),
        ScoreFn::Aeqd => aeqd(&slice.attn, slice.n),
        ScoreFn::Ftvvn => ftvvn(&slice.values, slice.d_head),
        ScoreFn::Avvn => avvn(&slice.values, slice.d_head),
        ScoreFn::Lthon => lthon(&slice.head_out, slice.d_head),
        ScoreFn::Ahon => ahon(&slice.head_out, slice.d_head),
        other => unreachable!("{other} is not a base score"),
    }
}

/// Scores every head of `trace` under `score_fn`.
pub fn score_all_heads<T: Scalar>(trace: &AttentionTrace<T>, score_fn: ScoreFn) -> ScoreMatrix<T> {
    let cfg = trace.config();
    let (n_layers, n_heads) = (cfg.n_layers, cfg.n_q_heads);
    let mut values = Vec::with_capacity(n_layers * n_heads);
    let mut degenerate = Vec::new();
    for layer in 0..n_layers {
        let slices: Vec<_> = (0..n_heads).map(|h| trace.head_slice(layer, h)).collect();
        if score_fn == ScoreFn::LthonHn {
            for (head, s) in slices.iter().enumerate() {
                let (v, degen) = lthon_hn(&s.head_out, s.d_head);
                if degen {
                    degenerate.push(DegenerateFlag::ZeroHeadMean { layer, head });
                }
                values.push(T::of(v));
            }
            continue;
        }
        let raw: Vec<f64> = slices
            .iter()
            .map(|s| base_score(s, score_fn.base()))
            .collect();
        if score_fn.is_layer_normalized() {
            let (normed, degen) = layer_normalize(&raw);
            if degen {
                degenerate.push(DegenerateFlag::ZeroLayerMean { layer });
            }
            values.extend(normed.into_iter().map(T::of));
        } else {
            values.extend(raw.into_iter().map(T::of));
        }
    }
    ScoreMatrix {
        score_fn,
        n_layers,
        n_heads,
        values,
        sequence_id: trace.sequence_id().to_string(),
        degenerate,
    }
}

/// Scores `trace` under several functions.
pub fn score_many<T: Scalar>(trace: &AttentionTrace<T>, fns: &[ScoreFn]) -> Vec<ScoreMatrix<T>> {
    fns.iter().map(|&f| score_all_heads(trace, f)).collect()
}

pub fn parse_score_fns(ids: &[impl AsRef<str>]) -> Result<Vec<ScoreFn>> {
    ids.iter().map(|s| s.as_ref().parse()).collect()
}
