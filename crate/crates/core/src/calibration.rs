//! Quantile thresholds over pooled head scores and per-pass mask construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scores::{score_all_heads, ScoreFn};
use crate::trace::{AttentionTrace, HeadMask, MaskProvenance, ScoreMatrix};

/// Default quantile grid, in percent.
pub const DEFAULT_QUANTILE_GRID: [f64; 7] = [0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    #[serde(rename = "fn")]
    pub score_fn: ScoreFn,
    pub tau: f64,
    pub quantile_p: Option<f64>,
    /// Free-form description of the calibration data, including pool size.
    pub source: String,
}

impl ThresholdPolicy {
    pub fn fixed(score_fn: ScoreFn, tau: f64) -> Result<Self> {
        if !tau.is_finite() {
            return Err(Error::InvalidConfig(format!("tau {tau} is not finite")));
        }
        Ok(Self {
            score_fn,
            tau,
            quantile_p: None,
            source: "fixed".into(),
        })
    }
}

/// Head scores pooled over every head of every calibration sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScorePool {
    pub score_fn: ScoreFn,
    samples: Vec<f64>,
    pub source: String,
}

impl ScorePool {
    pub fn new(score_fn: ScoreFn, samples: Vec<f64>, source: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("score pool".into()));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{score_fn} pool")));
        }
        Ok(Self {
            score_fn,
            samples,
            source: source.into(),
        })
    }

    pub fn from_matrices<T: Scalar>(
        matrices: &[ScoreMatrix<T>],
        source: impl Into<String>,
    ) -> Result<Self> {
        let first = matrices
            .first()
            .ok_or_else(|| Error::Empty("score matrices".into()))?;
        if let Some(m) = matrices.iter().find(|m| m.score_fn != first.score_fn) {
            return Err(Error::FunctionMismatch {
                scores: m.score_fn.to_string(),
                policy: first.score_fn.to_string(),
            });
        }
        let samples = matrices
            .iter()
            .flat_map(|m| m.values.iter().map(|v| v.as_f64()))
            .collect();
        Self::new(first.score_fn, samples, source)
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn sorted(&self) -> Vec<f64> {
        let mut s = self.samples.clone();
        s.sort_by(f64::total_cmp);
        s
    }
}

/// Scores every trace and pools the results. All traces must share a model config.
pub fn collect_scores<T: Scalar>(
    traces: &[AttentionTrace<T>],
    score_fn: ScoreFn,
) -> Result<ScorePool> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Empty("trace set".into()))?;
    if let Some(t) = traces.iter().find(|t| t.config() != first.config()) {
        return Err(Error::Shape(format!(
            "trace `{}` has a different model config",
            t.sequence_id()
        )));
    }
    let matrices: Vec<_> = traces
        .iter()
        .map(|t| score_all_heads(t, score_fn))
        .collect();
    ScorePool::from_matrices(&matrices, format!("{} traces", traces.len()))
}

/// Quantile `q ∈ [0, 1]` of sorted data, interpolating linearly between the
/// closest order statistics (position `q·(n−1)`).
pub fn linear_quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (sorted[hi] - sorted[lo]) * frac
    }
}

/// Threshold expected to flag about `p` percent of pooled heads: the `p`-th
/// quantile for less-than scores and the `(100 − p)`-th for greater-than scores.
pub fn quantile_threshold(pool: &ScorePool, p: f64) -> Result<ThresholdPolicy> {
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::OutOfRange(format!(
            "quantile p = {p} outside [0, 100]"
        )));
    }
    if pool.is_empty() {
        return Err(Error::Empty("score pool".into()));
    }
    let q = match pool.score_fn.direction() {
        crate::scores::Direction::LessThan => p / 100.0,
        crate::scores::Direction::GreaterThan => (100.0 - p) / 100.0,
    };
    let tau = linear_quantile(&pool.sorted(), q);
    Ok(ThresholdPolicy {
        score_fn: pool.score_fn,
        tau,
        quantile_p: Some(p),
        source: format!("{}; pool size {}", pool.source, pool.len()),
    })
}

/// Flags every head whose score passes the policy's strict comparison.
pub fn build_mask<T: Scalar>(
    scores: &ScoreMatrix<T>,
    policy: &ThresholdPolicy,
) -> Result<HeadMask> {
    if scores.score_fn != policy.score_fn {
        return Err(Error::FunctionMismatch {
            scores: scores.score_fn.to_string(),
            policy: policy.score_fn.to_string(),
        });
    }
    let dir = policy.score_fn.direction();
    Ok(HeadMask {
        n_layers: scores.n_layers,
        n_heads: scores.n_heads,
        flags: scores
            .values
            .iter()
            .map(|v| dir.is_inactive(v.as_f64(), policy.tau))
            .collect(),
        provenance: MaskProvenance::Policy(policy.clone()),
    })
}

/// Mean percentage of flagged heads over `masks`; zero for an empty slice.
pub fn percent_zeroed(masks: &[HeadMask]) -> f64 {
    if masks.is_empty() {
        return 0.0;
    }
    crate::scalar::compensated_mean(
        masks
            .iter()
            .map(|m| 100.0 * m.count() as f64 / m.total() as f64),
    )
    .unwrap_or(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::DegenerateFlag;

    fn matrix(score_fn: ScoreFn, values: Vec<f64>, n_heads: usize) -> ScoreMatrix<f64> {
        ScoreMatrix {
            score_fn,
            n_layers: values.len() / n_heads,
            n_heads,
            values,
            sequence_id: "s".into(),
            degenerate: Vec::<DegenerateFlag>::new(),
        }
    }

    #[test]
    fn pool_counts_and_multiset() {
        let m = matrix(ScoreFn::Ahon, vec![1.0, 2.0, 3.0, 4.0], 2);
        let pool = ScorePool::from_matrices(std::slice::from_ref(&m), "x").unwrap();
        assert_eq!(pool.len(), 4);
        let twice = ScorePool::from_matrices(&[m.clone(), m], "x").unwrap();
        assert_eq!(twice.sorted(), vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0]);
    }

    #[test]
    fn quantile_hand_values() {
        let pool =
            ScorePool::new(ScoreFn::Ahon, (0..100).map(f64::from).collect(), "grid").unwrap();
        let p10 = quantile_threshold(&pool, 10.0).unwrap();
        assert!((p10.tau - 9.9).abs() < 1e-12);
        assert_eq!(quantile_threshold(&pool, 0.0).unwrap().tau, 0.0);
        assert!(quantile_threshold(&pool, 101.0).is_err());

        let awft =
            ScorePool::new(ScoreFn::Awft, (0..100).map(f64::from).collect(), "grid").unwrap();
        let t = quantile_threshold(&awft, 10.0).unwrap();
        assert!(
            (t.tau - 89.1).abs() < 1e-12,
            "90th percentile, got {}",
            t.tau
        );
        assert_eq!(t.quantile_p, Some(10.0));
        assert!(t.source.contains("100"));
    }

    #[test]
    fn empty_pool_is_an_error() {
        assert!(matches!(
            ScorePool::new(ScoreFn::Ahon, vec![], "x"),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn mask_is_strict_and_direction_aware() {
        let m = matrix(ScoreFn::Ahon, vec![0.1, 0.5, 0.9, 0.5], 2);
        let policy = ThresholdPolicy::fixed(ScoreFn::Ahon, 0.5).unwrap();
        assert_eq!(
            build_mask(&m, &policy).unwrap().flags,
            vec![true, false, false, false]
        );
        let below = ThresholdPolicy::fixed(ScoreFn::Ahon, 0.0).unwrap();
        assert_eq!(build_mask(&m, &below).unwrap().count(), 0);

        let a = matrix(ScoreFn::Awft, vec![0.1, 0.5, 0.9, 0.5], 2);
        let pa = ThresholdPolicy::fixed(ScoreFn::Awft, 0.5).unwrap();
        assert_eq!(
            build_mask(&a, &pa).unwrap().flags,
            vec![false, false, true, false]
        );
        assert!(matches!(
            build_mask(&a, &policy),
            Err(Error::FunctionMismatch { .. })
        ));
    }

    #[test]
    fn percent_zeroed_examples() {
        let cfg = crate::trace::ModelConfig {
            n_layers: 2,
            n_q_heads: 2,
            n_kv_heads: 2,
            d_model: 4,
            d_head: 2,
            vocab_size: 4,
            max_seq_len: 4,
        };
        assert_eq!(
            percent_zeroed(&[HeadMask::none(&cfg), HeadMask::none(&cfg)]),
            0.0
        );
        let half = HeadMask::from_heads(&cfg, &[(0, 0), (1, 1)]).unwrap();
        assert_eq!(percent_zeroed(std::slice::from_ref(&half)), 50.0);
        assert_eq!(percent_zeroed(&[half, HeadMask::all(&cfg)]), 75.0);
    }
}
