//! Zero-out interventions on the reference transformer.
//!
//! Each sequence gets one unablated forward pass (its scores and baseline
//! logits) and one masked pass per evaluated policy. Performance is measured
//! against the unablated model: top-1 agreement of argmax logits, or mean
//! KL(baseline ‖ ablated) over positions. Both are averaged per sequence and
//! then over sequences.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Read;
use std::str::FromStr;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    build_mask, quantile_threshold, ScorePool, ThresholdPolicy, DEFAULT_QUANTILE_GRID,
};
use crate::error::{Error, Result};
use crate::model::TransformerWeights;
use crate::scalar::{compensated_mean, Scalar};
use crate::scores::{score_all_heads, ScoreFn};
use crate::tensor::Mat;
use crate::trace::{AttentionTrace, HeadMask, MaskProvenance, ScoreMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// Fraction of positions whose ablated argmax matches the baseline argmax.
    Agreement,
    /// Mean KL(baseline ‖ ablated) of the softmaxed logits.
    Kl,
}

impl Metric {
    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Agreement => "agreement",
            Metric::Kl => "kl",
        }
    }

    /// Whether larger values mean the ablated model behaves more like the baseline.
    pub fn higher_is_better(self) -> bool {
        matches!(self, Metric::Agreement)
    }

    /// Value of the metric for an unablated model.
    pub fn baseline(self) -> f64 {
        match self {
            Metric::Agreement => 1.0,
            Metric::Kl => 0.0,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "agreement" => Ok(Metric::Agreement),
            "kl" => Ok(Metric::Kl),
            other => Err(Error::Unknown(other.to_string())),
        }
    }
}

pub const RANDOM_LABEL: &str = "random";

/// One point of a performance-vs-heads-zeroed curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    /// Score function id, or `random` for the random baseline.
    #[serde(rename = "fn")]
    pub label: String,
    /// Quantile (score functions) or requested fraction (random), in percent.
    pub p: Option<f64>,
    pub tau: Option<f64>,
    pub percent_zeroed: f64,
    pub metric_id: String,
    pub performance: f64,
    pub n_sequences: usize,
    /// Present on imported rows that carry a model column.
    #[serde(default)]
    pub model: Option<String>,
}

impl EvalRecord {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if !(0.0..=100.0).contains(&self.percent_zeroed) {
            return bad(format!(
                "percent_zeroed {} outside [0, 100]",
                self.percent_zeroed
            ));
        }
        if !self.performance.is_finite() {
            return bad(format!("performance {} is not finite", self.performance));
        }
        match self.metric_id.as_str() {
            "agreement" if !(0.0..=1.0).contains(&self.performance) => {
                bad(format!("agreement {} outside [0, 1]", self.performance))
            }
            "kl" if self.performance < 0.0 => bad(format!("KL {} is negative", self.performance)),
            _ => Ok(()),
        }
    }
}

/// Records for one score function (or the random baseline), sorted by
/// `percent_zeroed` with duplicate x values collapsed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub label: String,
    pub points: Vec<EvalRecord>,
}

impl Curve {
    /// Sorts by `percent_zeroed`; among points with equal x, keeps the one with
    /// the largest threshold (points without a threshold rank lowest).
    pub fn new(label: impl Into<String>, mut points: Vec<EvalRecord>) -> Self {
        let key = |r: &EvalRecord| r.tau.unwrap_or(f64::NEG_INFINITY);
        points.sort_by(|a, b| {
            a.percent_zeroed
                .total_cmp(&b.percent_zeroed)
                .then(key(a).total_cmp(&key(b)))
        });
        let mut deduped: Vec<EvalRecord> = Vec::with_capacity(points.len());
        for p in points {
            match deduped.last_mut() {
                Some(last) if last.percent_zeroed == p.percent_zeroed => *last = p,
                _ => deduped.push(p),
            }
        }
        Self {
            label: label.into(),
            points: deduped,
        }
    }

    pub fn xs(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.percent_zeroed).collect()
    }
}

/// Trapezoidal area under performance vs `percent_zeroed`, divided by the x
/// span. `None` when the curve has fewer than two distinct x values.
pub fn normalized_auc(curve: &Curve) -> Option<f64> {
    let pts = &curve.points;
    let (first, last) = (pts.first()?, pts.last()?);
    let span = last.percent_zeroed - first.percent_zeroed;
    if pts.len() < 2 || span <= 0.0 {
        return None;
    }
    let area: f64 = pts
        .windows(2)
        .map(|w| {
            (w[1].percent_zeroed - w[0].percent_zeroed) * (w[0].performance + w[1].performance)
                / 2.0
        })
        .sum();
    Some(area / span)
}

/// Largest `percent_zeroed` whose performance is no worse than `baseline` by
/// more than `tolerance` (absolute units of the metric); 0 if no point
/// qualifies. Improvements over the baseline always qualify.
pub fn max_zeroed_within_tolerance(
    curve: &Curve,
    baseline: f64,
    tolerance: f64,
    higher_is_better: bool,
) -> f64 {
    curve
        .points
        .iter()
        .filter(|p| {
            if higher_is_better {
                p.performance >= baseline - tolerance
            } else {
                p.performance <= baseline + tolerance
            }
        })
        .map(|p| p.percent_zeroed)
        .fold(0.0, f64::max)
}

/// Curves ranked by normalized AUC, best first. Curves without a defined AUC
/// are dropped. `higher_is_better` follows the metric.
pub fn rank_by_auc(curves: &[Curve], higher_is_better: bool) -> Vec<(String, f64)> {
    let mut ranked: Vec<(String, f64)> = curves
        .iter()
        .filter_map(|c| normalized_auc(c).map(|a| (c.label.clone(), a)))
        .collect();
    ranked.sort_by(|a, b| {
        let ord = a.1.total_cmp(&b.1);
        (if higher_is_better { ord.reverse() } else { ord }).then_with(|| a.0.cmp(&b.0))
    });
    ranked
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Per-sequence metric between baseline and ablated logits.
pub fn compare_logits<T: Scalar>(baseline: &Mat<T>, ablated: &Mat<T>, metric: Metric) -> f64 {
    let n = baseline.rows();
    let rows = |m: &Mat<T>, i: usize| m.row(i).iter().map(|v| v.as_f64()).collect::<Vec<_>>();
    let per_pos = (0..n).map(|i| {
        let (b, a) = (rows(baseline, i), rows(ablated, i));
        match metric {
            Metric::Agreement => f64::from(u8::from(argmax(&b) == argmax(&a))),
            Metric::Kl => {
                let (lb, la) = (log_softmax(&b), log_softmax(&a));
                let kl: f64 = lb.iter().zip(&la).map(|(p, q)| p.exp() * (p - q)).sum();
                kl.max(0.0)
            }
        }
    });
    compensated_mean(per_pos).unwrap_or(0.0)
}

struct SequenceBaseline<T> {
    logits: Mat<T>,
    scores: BTreeMap<ScoreFn, ScoreMatrix<T>>,
}

/// Baseline forward passes for a dataset, reused across many interventions.
pub struct InterventionSession<'w, T> {
    weights: &'w TransformerWeights<T>,
    dataset: Vec<Vec<u32>>,
    baselines: Vec<SequenceBaseline<T>>,
}

impl<'w, T: Scalar> InterventionSession<'w, T> {
    /// Runs the unablated pass on every sequence and keeps the scores for `fns`.
    pub fn new(
        weights: &'w TransformerWeights<T>,
        dataset: &[Vec<u32>],
        fns: &[ScoreFn],
    ) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::Empty("dataset".into()));
        }
        let baselines = dataset
            .par_iter()
            .enumerate()
            .map(|(i, tokens)| {
                let out = weights.forward(tokens, None)?;
                let trace = out.trace.with_sequence_id(format!("seq_{i}"));
                let scores = fns
                    .iter()
                    .map(|&f| (f, score_all_heads(&trace, f)))
                    .collect();
                Ok(SequenceBaseline {
                    logits: out.logits,
                    scores,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            weights,
            dataset: dataset.to_vec(),
            baselines,
        })
    }

    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    fn scores(&self, score_fn: ScoreFn) -> Result<Vec<&ScoreMatrix<T>>> {
        self.baselines
            .iter()
            .map(|b| {
                b.scores.get(&score_fn).ok_or_else(|| {
                    Error::Unknown(format!("{score_fn} was not scored in this session"))
                })
            })
            .collect()
    }

    /// Pool of baseline scores over the session's dataset.
    pub fn pool(&self, score_fn: ScoreFn) -> Result<ScorePool> {
        let matrices: Vec<ScoreMatrix<T>> = self.scores(score_fn)?.into_iter().cloned().collect();
        ScorePool::from_matrices(&matrices, format!("{} sequences", self.len()))
    }

    /// Per-sequence masks for `policy`.
    pub fn masks(&self, policy: &ThresholdPolicy) -> Result<Vec<HeadMask>> {
        self.scores(policy.score_fn)?
            .into_iter()
            .map(|s| build_mask(s, policy))
            .collect()
    }

    /// Evaluates one mask per sequence; returns (percent zeroed, performance).
    pub fn evaluate_masks(&self, masks: &[HeadMask], metric: Metric) -> Result<(f64, f64)> {
        if masks.len() != self.len() {
            return Err(Error::Shape(format!(
                "{} masks for {} sequences",
                masks.len(),
                self.len()
            )));
        }
        let perf = self
            .dataset
            .par_iter()
            .zip(masks.par_iter())
            .zip(self.baselines.par_iter())
            .map(|((tokens, mask), base)| {
                let ablated = self.weights.forward_logits(tokens, Some(mask))?;
                Ok(compare_logits(&base.logits, &ablated, metric))
            })
            .collect::<Result<Vec<f64>>>()?;
        let performance = compensated_mean(perf).unwrap_or(0.0);
        Ok((crate::calibration::percent_zeroed(masks), performance))
    }

    pub fn evaluate_policy(&self, policy: &ThresholdPolicy, metric: Metric) -> Result<EvalRecord> {
        let masks = self.masks(policy)?;
        let (percent_zeroed, performance) = self.evaluate_masks(&masks, metric)?;
        Ok(EvalRecord {
            label: policy.score_fn.to_string(),
            p: policy.quantile_p,
            tau: Some(policy.tau),
            percent_zeroed,
            metric_id: metric.to_string(),
            performance,
            n_sequences: self.len(),
            model: None,
        })
    }

    /// Masks with `round(fraction · total / 100)` heads drawn uniformly without
    /// replacement, independently per sequence.
    pub fn random_masks(&self, fraction: f64, seed: u64) -> Result<Vec<HeadMask>> {
        if !(0.0..=100.0).contains(&fraction) {
            return Err(Error::OutOfRange(format!(
                "fraction {fraction} outside [0, 100]"
            )));
        }
        let cfg = self.weights.config;
        let total = cfg.total_heads();
        let k = (fraction * total as f64 / 100.0).round() as usize;
        Ok((0..self.len())
            .map(|i| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(i as u64);
                let mut mask = HeadMask::none(&cfg);
                for idx in index::sample(&mut rng, total, k) {
                    mask.flags[idx] = true;
                }
                mask.provenance = MaskProvenance::Random { fraction, seed };
                mask
            })
            .collect())
    }

    pub fn random_baseline(&self, fraction: f64, seed: u64, metric: Metric) -> Result<EvalRecord> {
        let masks = self.random_masks(fraction, seed)?;
        let (percent_zeroed, performance) = self.evaluate_masks(&masks, metric)?;
        Ok(EvalRecord {
            label: RANDOM_LABEL.into(),
            p: Some(fraction),
            tau: None,
            percent_zeroed,
            metric_id: metric.to_string(),
            performance,
            n_sequences: self.len(),
            model: None,
        })
    }

    /// One record per grid point, each threshold calibrated on this dataset.
    /// An empty grid means the default one.
    pub fn accuracy_curve(&self, score_fn: ScoreFn, grid: &[f64], metric: Metric) -> Result<Curve> {
        let grid = if grid.is_empty() {
            &DEFAULT_QUANTILE_GRID[..]
        } else {
            grid
        };
        let pool = self.pool(score_fn)?;
        let points = grid
            .iter()
            .map(|&p| self.evaluate_policy(&quantile_threshold(&pool, p)?, metric))
            .collect::<Result<Vec<_>>>()?;
        Ok(Curve::new(score_fn.to_string(), points))
    }

    /// Random-baseline curve at the given fractions, averaging performance over seeds.
    pub fn random_curve(&self, fractions: &[f64], seeds: &[u64], metric: Metric) -> Result<Curve> {
        if seeds.is_empty() {
            return Err(Error::Empty("random baseline seeds".into()));
        }
        let points = fractions
            .iter()
            .map(|&f| {
                let recs = seeds
                    .iter()
                    .map(|&s| self.random_baseline(f, s, metric))
                    .collect::<Result<Vec<_>>>()?;
                let mut rec = recs[0].clone();
                rec.percent_zeroed =
                    compensated_mean(recs.iter().map(|r| r.percent_zeroed)).unwrap_or(0.0);
                rec.performance =
                    compensated_mean(recs.iter().map(|r| r.performance)).unwrap_or(0.0);
                Ok(rec)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Curve::new(RANDOM_LABEL, points))
    }
}

/// Baseline passes, per-sequence masks from `policy`, and one masked pass per sequence.
pub fn evaluate_with_intervention<T: Scalar>(
    weights: &TransformerWeights<T>,
    dataset: &[Vec<u32>],
    policy: &ThresholdPolicy,
    metric: Metric,
) -> Result<EvalRecord> {
    InterventionSession::new(weights, dataset, &[policy.score_fn])?.evaluate_policy(policy, metric)
}

pub fn random_baseline<T: Scalar>(
    weights: &TransformerWeights<T>,
    dataset: &[Vec<u32>],
    fraction: f64,
    seed: u64,
    metric: Metric,
) -> Result<EvalRecord> {
    InterventionSession::new(weights, dataset, &[])?.random_baseline(fraction, seed, metric)
}

/// Curve over `grid` (defaults to 0, 5, …, 30 when empty).
pub fn accuracy_curve<T: Scalar>(
    weights: &TransformerWeights<T>,
    dataset: &[Vec<u32>],
    score_fn: ScoreFn,
    grid: &[f64],
    metric: Metric,
) -> Result<Curve> {
    InterventionSession::new(weights, dataset, &[score_fn])?.accuracy_curve(score_fn, grid, metric)
}

/// Percentage of flagged heads per layer, averaged over traces.
pub fn layerwise_inactive_fraction<T: Scalar>(
    traces: &[AttentionTrace<T>],
    policy: &ThresholdPolicy,
) -> Result<Vec<f64>> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Empty("trace set".into()))?;
    let cfg = *first.config();
    let masks = traces
        .iter()
        .map(|t| {
            if t.config() != &cfg {
                return Err(Error::Shape(format!(
                    "trace `{}` has a different model config",
                    t.sequence_id()
                )));
            }
            build_mask(&score_all_heads(t, policy.score_fn), policy)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..cfg.n_layers)
        .map(|l| {
            compensated_mean(masks.iter().map(|m| {
                100.0 * (0..cfg.n_q_heads).filter(|&h| m.get(l, h)).count() as f64
                    / cfg.n_q_heads as f64
            }))
            .unwrap_or(0.0)
        })
        .collect())
}

/// Percentage of flagged heads on each prefix of `sequence`.
pub fn seqlen_sweep<T: Scalar>(
    weights: &TransformerWeights<T>,
    sequence: &[u32],
    policy: &ThresholdPolicy,
    prefix_lengths: &[usize],
) -> Result<Vec<(usize, f64)>> {
    prefix_lengths
        .par_iter()
        .map(|&len| {
            if len == 0 || len > sequence.len() {
                return Err(Error::OutOfRange(format!(
                    "prefix length {len} for a sequence of {}",
                    sequence.len()
                )));
            }
            let trace = weights.forward(&sequence[..len], None)?.trace;
            let mask = build_mask(&score_all_heads(&trace, policy.score_fn), policy)?;
            Ok((len, 100.0 * mask.count() as f64 / mask.total() as f64))
        })
        .collect()
}

/// Writes records using the interchange columns
/// `fn,p,tau,percent_zeroed,metric_id,performance,n_sequences`.
pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let mut out = String::from("fn,p,tau,percent_zeroed,metric_id,performance,n_sequences\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.label,
            opt(r.p),
            opt(r.tau),
            r.percent_zeroed,
            r.metric_id,
            r.performance,
            r.n_sequences
        ));
    }
    out
}

/// Reads records in the interchange schema. An optional `model` column is
/// accepted; lines starting with `#` are ignored.
pub fn read_records_csv<R: Read>(source: R) -> Result<Vec<EvalRecord>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(source);
    let mut out = Vec::new();
    for row in reader.deserialize::<EvalRecord>() {
        let rec = row?;
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

/// Groups records into curves keyed by `(model, fn, metric_id)`.
pub fn curves_from_records(records: &[EvalRecord]) -> BTreeMap<(String, String, String), Curve> {
    let mut groups: BTreeMap<(String, String, String), Vec<EvalRecord>> = BTreeMap::new();
    for r in records {
        let key = (
            r.model.clone().unwrap_or_default(),
            r.label.clone(),
            r.metric_id.clone(),
        );
        groups.entry(key).or_default().push(r.clone());
    }
    groups
        .into_iter()
        .map(|(k, pts)| (k.clone(), Curve::new(k.1, pts)))
        .collect()
}
