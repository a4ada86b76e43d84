//! Agreement between score functions, distances between score
//! distributions, and PCA of attention matrices.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calibration::{build_mask, quantile_threshold, ScorePool};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::scalar::{CompensatedSum, Scalar};
use crate::scores::{score_all_heads, ScoreFn};
use crate::trace::{AttentionTrace, HeadMask};

fn check_shapes(a: &HeadMask, b: &HeadMask) -> Result<()> {
    if a.same_shape(b) {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "masks {}×{} and {}×{}",
            a.n_layers, a.n_heads, b.n_layers, b.n_heads
        )))
    }
}

/// |A∩B| / |A∪B|, or 1 when both masks are empty.
pub fn iou(a: &HeadMask, b: &HeadMask) -> Result<f64> {
    check_shapes(a, b)?;
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.flags.iter().zip(&b.flags) {
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// |pred∩truth| / |pred|, or 1 when `pred` is empty.
pub fn precision(pred: &HeadMask, truth: &HeadMask) -> Result<f64> {
    check_shapes(pred, truth)?;
    let n_pred = pred.count();
    if n_pred == 0 {
        return Ok(1.0);
    }
    let hit = pred
        .flags
        .iter()
        .zip(&truth.flags)
        .filter(|(&p, &t)| p && t)
        .count();
    Ok(hit as f64 / n_pred as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgreementKind {
    Iou,
    Precision,
}

impl fmt::Display for AgreementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AgreementKind::Iou => "iou",
            AgreementKind::Precision => "precision",
        })
    }
}

/// Square matrix indexed by score function. For precision, the row is the
/// prediction and the column the reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementMatrix {
    pub kind: AgreementKind,
    pub fns: Vec<ScoreFn>,
    pub values: Vec<f64>,
    pub target_fraction: f64,
}

impl AgreementMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.fns.len() + col]
    }

    pub fn to_csv_string(&self) -> String {
        let labels: Vec<String> = self.fns.iter().map(|f| f.to_string()).collect();
        square_csv(&self.kind.to_string(), &labels, &self.values)
    }
}

fn square_csv(corner: &str, labels: &[String], values: &[f64]) -> String {
    let n = labels.len();
    let mut out = format!("{corner},{}\n", labels.join(","));
    for (i, label) in labels.iter().enumerate() {
        let row: Vec<String> = values[i * n..(i + 1) * n]
            .iter()
            .map(|v| v.to_string())
            .collect();
        out.push_str(&format!("{label},{}\n", row.join(",")));
    }
    out
}

/// IoU and precision matrices between score functions. Each function gets one
/// threshold at `target_fraction` percent of the pooled scores over `traces`;
/// masks are then compared per trace and the entries averaged.
pub fn agreement_study<T: Scalar>(
    traces: &[AttentionTrace<T>],
    fns: &[ScoreFn],
    target_fraction: f64,
) -> Result<(AgreementMatrix, AgreementMatrix)> {
    let first = traces
        .first()
        .ok_or_else(|| Error::Empty("trace set".into()))?;
    if fns.is_empty() {
        return Err(Error::Empty("score function list".into()));
    }
    if let Some(t) = traces.iter().find(|t| t.config() != first.config()) {
        return Err(Error::Shape(format!(
            "trace `{}` has a different model config",
            t.sequence_id()
        )));
    }
    // masks[f][t]
    let masks = fns
        .par_iter()
        .map(|&f| {
            let scores: Vec<_> = traces.iter().map(|t| score_all_heads(t, f)).collect();
            let pool = ScorePool::from_matrices(&scores, format!("{} traces", traces.len()))?;
            let policy = quantile_threshold(&pool, target_fraction)?;
            scores
                .iter()
                .map(|s| build_mask(s, &policy))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let k = fns.len();
    let cells: Vec<(usize, usize)> = (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).collect();
    let averaged = |metric: fn(&HeadMask, &HeadMask) -> Result<f64>| -> Result<Vec<f64>> {
        cells
            .par_iter()
            .map(|&(i, j)| {
                let mut acc = CompensatedSum::new();
                for (a, b) in masks[i].iter().zip(&masks[j]) {
                    acc.add(metric(a, b)?);
                }
                Ok(acc.total() / traces.len() as f64)
            })
            .collect()
    };
    let make = |kind, values| AgreementMatrix {
        kind,
        fns: fns.to_vec(),
        values,
        target_fraction,
    };
    Ok((
        make(AgreementKind::Iou, averaged(iou)?),
        make(AgreementKind::Precision, averaged(precision)?),
    ))
}

/// W₁ between the empirical distributions of two samples: the exact integral
/// of |F_a − F_b|. For equal counts this is the mean absolute difference of
/// the sorted samples.
pub fn wasserstein1(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("W1 sample".into()));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("W1 sample".into()));
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (na, nb) = (sa.len(), sb.len());
    if na == nb {
        let mut acc = CompensatedSum::new();
        for (x, y) in sa.iter().zip(&sb) {
            acc.add((x - y).abs());
        }
        return Ok(acc.total() / na as f64);
    }
    // Sweep the merged support; between consecutive points both CDFs are constant.
    let (mut i, mut j) = (0usize, 0usize);
    let mut acc = CompensatedSum::new();
    let mut prev = sa[0].min(sb[0]);
    while i < na || j < nb {
        let next = match (sa.get(i), sb.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        let fa = i as f64 / na as f64;
        let fb = j as f64 / nb as f64;
        acc.add((fa - fb).abs() * (next - prev));
        while i < na && sa[i] == next {
            i += 1;
        }
        while j < nb && sb[j] == next {
            j += 1;
        }
        prev = next;
    }
    Ok(acc.total())
}

/// How per-model pools were assembled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingMode {
    /// One sample per head per sequence.
    PerHeadPerSequence,
    /// One sample per head, averaged over sequences.
    PerHeadAverage,
    /// Pools supplied externally with unknown construction.
    External,
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingMode::PerHeadPerSequence => "per_head_per_sequence",
            PoolingMode::PerHeadAverage => "per_head_average",
            PoolingMode::External => "external",
        })
    }
}

/// Per-head means over sequences; all matrices must share a shape and function.
pub fn per_head_average_pool<T: Scalar>(
    matrices: &[crate::trace::ScoreMatrix<T>],
    source: impl Into<String>,
) -> Result<ScorePool> {
    let first = matrices
        .first()
        .ok_or_else(|| Error::Empty("score matrices".into()))?;
    if matrices
        .iter()
        .any(|m| m.values.len() != first.values.len() || m.score_fn != first.score_fn)
    {
        return Err(Error::Shape(
            "score matrices differ in shape or function".into(),
        ));
    }
    let samples = (0..first.values.len())
        .map(|k| {
            crate::scalar::compensated_mean(matrices.iter().map(|m| m.values[k].as_f64()))
                .unwrap_or(0.0)
        })
        .collect();
    ScorePool::new(first.score_fn, samples, source)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    #[serde(rename = "fn")]
    pub score_fn: ScoreFn,
    pub models: Vec<String>,
    pub values: Vec<f64>,
    pub pooling: PoolingMode,
}

impl DistanceMatrix {
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.models.len() + col]
    }

    pub fn to_csv_string(&self) -> String {
        let corner = format!("W1[{}; {}]", self.score_fn, self.pooling);
        square_csv(&corner, &self.models, &self.values)
    }
}

/// Pairwise W₁ between models' pools for one score function.
pub fn distribution_study(
    pools: &[(String, ScorePool)],
    score_fn: ScoreFn,
    pooling: PoolingMode,
) -> Result<DistanceMatrix> {
    if pools.is_empty() {
        return Err(Error::Empty("model pool list".into()));
    }
    if let Some((name, p)) = pools.iter().find(|(_, p)| p.score_fn != score_fn) {
        return Err(Error::FunctionMismatch {
            scores: format!("{} ({name})", p.score_fn),
            policy: score_fn.to_string(),
        });
    }
    let k = pools.len();
    let upper: Vec<(usize, usize)> = (0..k)
        .flat_map(|i| (i + 1..k).map(move |j| (i, j)))
        .collect();
    let dists = upper
        .par_iter()
        .map(|&(i, j)| wasserstein1(pools[i].1.samples(), pools[j].1.samples()))
        .collect::<Result<Vec<_>>>()?;
    let mut values = vec![0.0; k * k];
    for (&(i, j), d) in upper.iter().zip(dists) {
        values[i * k + j] = d;
        values[j * k + i] = d;
    }
    Ok(DistanceMatrix {
        score_fn,
        models: pools.iter().map(|(n, _)| n.clone()).collect(),
        values,
        pooling,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaSummary {
    pub n_components: usize,
    /// Side length of the attention matrices.
    pub seq_len: usize,
    pub population: usize,
    pub explained_variance_ratio: Vec<f64>,
    /// `n_components` unit vectors of length `seq_len²`, concatenated.
    pub components: Vec<f64>,
    /// Total variance was zero; ratios and components are all zero.
    pub degenerate: bool,
}

impl PcaSummary {
    pub fn component(&self, k: usize) -> &[f64] {
        let d = self.seq_len * self.seq_len;
        &self.components[k * d..(k + 1) * d]
    }

    pub fn to_container(&self, extra_meta: &BTreeMap<String, String>) -> Result<Container> {
        let mut c = Container::new();
        let d = self.seq_len * self.seq_len;
        c.insert(
            "components",
            vec![self.n_components, self.seq_len, self.seq_len],
            self.components.iter().map(|&v| v as f32).collect(),
        )?;
        c.insert(
            "explained_variance_ratio",
            vec![self.n_components],
            self.explained_variance_ratio
                .iter()
                .map(|&v| v as f32)
                .collect(),
        )?;
        debug_assert_eq!(self.components.len(), self.n_components * d);
        c.set_meta("population", self.population);
        c.set_meta("degenerate", self.degenerate);
        for (k, v) in extra_meta {
            c.set_meta(k.clone(), v);
        }
        Ok(c)
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// eigenvalues in descending order and the matching eigenvectors as columns
/// of a row-major `n × n` matrix.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(matrix.len(), n * n);
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j].powi(2))
            .sum();
        if off.sqrt() <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (new, &old) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + new] = v[k * n + old];
        }
    }
    (values, vectors)
}

/// PCA over every head's attention matrix (restricted to unpadded positions),
/// each matrix one observation, centered across the population.
pub fn attention_pca<T: Scalar>(
    traces: &[AttentionTrace<T>],
    n_components: usize,
) -> Result<PcaSummary> {
    if n_components == 0 {
        return Err(Error::InvalidConfig("n_components must be positive".into()));
    }
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut seq_len = None;
    for t in traces {
        let cfg = t.config();
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_q_heads {
                let s = t.head_slice(l, h);
                match seq_len {
                    None => seq_len = Some(s.n),
                    Some(n) if n != s.n => {
                        return Err(Error::Shape(format!(
                            "attention matrices of size {n} and {} cannot be pooled",
                            s.n
                        )))
                    }
                    _ => {}
                }
                rows.push(s.attn.iter().map(|v| v.as_f64()).collect());
            }
        }
    }
    let m = rows.len();
    if m < 2 {
        return Err(Error::Empty(format!("PCA population of {m} matrices")));
    }
    let n = seq_len.unwrap_or(0);
    let d = n * n;
    if n_components > d {
        return Err(Error::OutOfRange(format!(
            "{n_components} components for dimension {d}"
        )));
    }
    let raw_energy: f64 = rows.iter().flatten().map(|x| x * x).sum::<f64>() / (m - 1) as f64;
    let mean: Vec<f64> = (0..d)
        .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / m as f64)
        .collect();
    for r in &mut rows {
        for (x, mu) in r.iter_mut().zip(&mean) {
            *x -= mu;
        }
    }
    let total: f64 = rows.iter().flatten().map(|x| x * x).sum::<f64>() / (m - 1) as f64;
    // Centering identical rows leaves only rounding residue.
    if total <= 1e-24 * raw_energy {
        return Ok(PcaSummary {
            n_components,
            seq_len: n,
            population: m,
            explained_variance_ratio: vec![0.0; n_components],
            components: vec![0.0; n_components * d],
            degenerate: true,
        });
    }

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let (eigvals, components) = if d <= m {
        // Covariance in feature space.
        let cov: Vec<f64> = (0..d * d)
            .into_par_iter()
            .map(|ij| {
                let (i, j) = (ij / d, ij % d);
                rows.iter().map(|r| r[i] * r[j]).sum::<f64>() / (m - 1) as f64
            })
            .collect();
        let (vals, vecs) = symmetric_eigen(&cov, d);
        let comps = (0..n_components)
            .flat_map(|k| (0..d).map(move |i| (i, k)))
            .map(|(i, k)| vecs[i * d + k])
            .collect();
        (vals, comps)
    } else {
        // Gram matrix in observation space; directions are Xᵀu / ‖Xᵀu‖.
        let gram: Vec<f64> = (0..m * m)
            .into_par_iter()
            .map(|ij| dot(&rows[ij / m], &rows[ij % m]) / (m - 1) as f64)
            .collect();
        let (vals, vecs) = symmetric_eigen(&gram, m);
        let mut comps = Vec::with_capacity(n_components * d);
        for k in 0..n_components {
            let mut dir = vec![0.0; d];
            for (r, row) in rows.iter().enumerate() {
                let u = vecs[r * m + k];
                for (x, v) in dir.iter_mut().zip(row) {
                    *x += u * v;
                }
            }
            let norm = dot(&dir, &dir).sqrt();
            if vals.get(k).copied().unwrap_or(0.0) > 1e-12 * total && norm > 0.0 {
                dir.iter_mut().for_each(|x| *x /= norm);
            } else {
                dir.iter_mut().for_each(|x| *x = 0.0);
            }
            comps.extend(dir);
        }
        (vals, comps)
    };
    let mut ratios: Vec<f64> = (0..n_components)
        .map(|k| (eigvals.get(k).copied().unwrap_or(0.0) / total).max(0.0))
        .collect();
    for k in 1..ratios.len() {
        ratios[k] = ratios[k].min(ratios[k - 1]);
    }
    Ok(PcaSummary {
        n_components,
        seq_len: n,
        population: m,
        explained_variance_ratio: ratios,
        components,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_q_heads: 2,
            n_kv_heads: 2,
            d_model: 4,
            d_head: 2,
            vocab_size: 4,
            max_seq_len: 4,
        }
    }

    #[test]
    fn iou_and_precision_examples() {
        let c = cfg();
        let a = HeadMask::from_heads(&c, &[(0, 0), (0, 1)]).unwrap();
        let b = HeadMask::from_heads(&c, &[(0, 1), (1, 1)]).unwrap();
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let none = HeadMask::none(&c);
        assert_eq!(iou(&none, &none).unwrap(), 1.0);
        let d = HeadMask::from_heads(&c, &[(1, 0)]).unwrap();
        assert_eq!(iou(&a, &d).unwrap(), 0.0);
        assert_eq!(precision(&none, &a).unwrap(), 1.0);
        assert_eq!(precision(&d, &a).unwrap(), 0.0);
        let sub = HeadMask::from_heads(&c, &[(0, 1)]).unwrap();
        assert_eq!(precision(&sub, &a).unwrap(), 1.0);
        assert_eq!(precision(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn w1_examples() {
        assert_eq!(wasserstein1(&[0.0, 1.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(wasserstein1(&[3.0], &[-1.0]).unwrap(), 4.0);
        assert_eq!(
            wasserstein1(&[0.5, 0.2, 0.9], &[0.9, 0.5, 0.2]).unwrap(),
            0.0
        );
        // Uniform on {0, 1} vs point mass at 0.5.
        assert!((wasserstein1(&[0.0, 1.0], &[0.5]).unwrap() - 0.5).abs() < 1e-15);
        // {0} vs {0, 0, 3}: a third of the mass moves 3.
        assert!((wasserstein1(&[0.0], &[0.0, 0.0, 3.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!(wasserstein1(&[], &[1.0]).is_err());
    }

    #[test]
    fn jacobi_diagonalizes() {
        let m = [4.0, 1.0, 0.0, 1.0, 3.0, 1.0, 0.0, 1.0, 2.0];
        let (vals, vecs) = symmetric_eigen(&m, 3);
        assert!(vals.windows(2).all(|w| w[0] >= w[1]));
        for k in 0..3 {
            for i in 0..3 {
                let mv: f64 = (0..3).map(|j| m[i * 3 + j] * vecs[j * 3 + k]).sum();
                assert!((mv - vals[k] * vecs[i * 3 + k]).abs() < 1e-12);
            }
        }
        assert!((vals.iter().sum::<f64>() - 9.0).abs() < 1e-12);
    }

    #[test]
    fn distance_matrix_is_symmetric() {
        let p = |v: Vec<f64>| ScorePool::new(ScoreFn::Ahon, v, "x").unwrap();
        let pools = vec![
            ("a".into(), p(vec![0.0, 1.0])),
            ("b".into(), p(vec![1.0, 2.0])),
            ("c".into(), p(vec![5.0])),
        ];
        let m = distribution_study(&pools, ScoreFn::Ahon, PoolingMode::External).unwrap();
        assert_eq!(m.get(0, 1), 1.0);
        assert_eq!(m.get(1, 0), 1.0);
        assert_eq!(m.get(2, 2), 0.0);
        assert!(m.to_csv_string().starts_with("W1[AHON; external],a,b,c\n"));
        assert!(distribution_study(&pools, ScoreFn::Awft, PoolingMode::External).is_err());
    }
}
