//! Naive reference implementations used as test oracles. Written directly
//! against the flat trace layout, sharing no code with the library.

#![allow(dead_code)]

use std::collections::BTreeSet;

use headprobe::{AttentionTrace, HeadMask, Scalar, TransformerWeights};

/// Score of every head, layer-major, for the function named `id`.
pub fn naive_scores<T: Scalar>(trace: &AttentionTrace<T>, id: &str) -> Vec<f64> {
    let cfg = *trace.config();
    let (l_n, h_n, d) = (cfg.n_layers, cfg.n_q_heads, cfg.d_head);
    let n = trace.seq_len();
    let attn: Vec<f64> = trace.attn_all().iter().map(|v| v.as_f64()).collect();
    let vals: Vec<f64> = trace.values_all().iter().map(|v| v.as_f64()).collect();
    let outs: Vec<f64> = trace.head_out_all().iter().map(|v| v.as_f64()).collect();
    let real: Vec<usize> = (0..n).filter(|&i| trace.padding_mask()[i]).collect();
    let m = real.len() as f64;

    let a = |l: usize, h: usize, i: usize, j: usize| attn[((l * h_n + h) * n + i) * n + j];
    let norm = |buf: &Vec<f64>, l: usize, h: usize, i: usize| {
        let mut s = 0.0;
        for c in 0..d {
            let x = buf[((l * h_n + h) * n + i) * d + c];
            s += x * x;
        }
        s.sqrt()
    };

    let base_id = id.trim_end_matches("_LN").trim_end_matches("_HN");
    let mut base = vec![0.0; l_n * h_n];
    for l in 0..l_n {
        for h in 0..h_n {
            let mut s = 0.0;
            match base_id {
                "AWFT" => {
                    for &i in &real {
                        s += a(l, h, i, real[0]);
                    }
                    s /= m;
                }
                "AEQD" => {
                    for &i in &real {
                        let mut e = 0.0;
                        for &j in &real {
                            let p = a(l, h, i, j);
                            if p > 0.0 {
                                e -= p * p.ln();
                            }
                        }
                        s += e;
                    }
                    s /= m;
                }
                "FTVVN" => s = norm(&vals, l, h, real[0]),
                "AVVN" => {
                    for &i in &real {
                        s += norm(&vals, l, h, i);
                    }
                    s /= m;
                }
                "LTHON" => s = norm(&outs, l, h, *real.last().unwrap()),
                "AHON" => {
                    for &i in &real {
                        s += norm(&outs, l, h, i);
                    }
                    s /= m;
                }
                other => panic!("unknown id {other}"),
            }
            base[l * h_n + h] = s;
        }
    }

    if id == "LTHON_HN" {
        let mut out = base.clone();
        for l in 0..l_n {
            for h in 0..h_n {
                let mut mean = 0.0;
                for &i in &real {
                    mean += norm(&outs, l, h, i);
                }
                mean /= m;
                out[l * h_n + h] = if mean == 0.0 {
                    1.0
                } else {
                    base[l * h_n + h] / mean
                };
            }
        }
        return out;
    }
    if id.ends_with("_LN") {
        let mut out = base.clone();
        for l in 0..l_n {
            let mean: f64 = (0..h_n).map(|h| base[l * h_n + h]).sum::<f64>() / h_n as f64;
            for h in 0..h_n {
                out[l * h_n + h] = if mean == 0.0 {
                    1.0
                } else {
                    base[l * h_n + h] / mean
                };
            }
        }
        return out;
    }
    base
}

fn set_of(mask: &HeadMask) -> BTreeSet<(usize, usize)> {
    let mut s = BTreeSet::new();
    for l in 0..mask.n_layers {
        for h in 0..mask.n_heads {
            if mask.flags[l * mask.n_heads + h] {
                s.insert((l, h));
            }
        }
    }
    s
}

pub fn set_iou(a: &HeadMask, b: &HeadMask) -> f64 {
    let (sa, sb) = (set_of(a), set_of(b));
    let union = sa.union(&sb).count();
    if union == 0 {
        1.0
    } else {
        sa.intersection(&sb).count() as f64 / union as f64
    }
}

pub fn set_precision(pred: &HeadMask, truth: &HeadMask) -> f64 {
    let (sp, st) = (set_of(pred), set_of(truth));
    if sp.is_empty() {
        1.0
    } else {
        sp.intersection(&st).count() as f64 / sp.len() as f64
    }
}

/// Mean absolute difference of sorted samples of equal length.
pub fn sorted_difference_w1(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sb.sort_by(|x, y| x.partial_cmp(y).unwrap());
    sa.iter().zip(&sb).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Explained-variance ratios of the sample covariance of `rows`, descending.
pub fn covariance_pca_ratios(rows: &[Vec<f64>]) -> Vec<f64> {
    let m = rows.len();
    let d = rows[0].len();
    let mean: Vec<f64> = (0..d)
        .map(|k| rows.iter().map(|r| r[k]).sum::<f64>() / m as f64)
        .collect();
    let cov = nalgebra::DMatrix::from_fn(d, d, |i, j| {
        rows.iter()
            .map(|r| (r[i] - mean[i]) * (r[j] - mean[j]))
            .sum::<f64>()
            / (m - 1) as f64
    });
    let total = cov.trace();
    let mut vals: Vec<f64> = nalgebra::SymmetricEigen::new(cov)
        .eigenvalues
        .iter()
        .copied()
        .collect();
    vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
    vals.into_iter().map(|v| (v / total).max(0.0)).collect()
}

fn rms(x: &[f64], gain: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().zip(gain).map(|(v, g)| v * inv * g).collect()
}

fn vecmat(x: &[f64], m: &headprobe::Mat<f64>) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (r, &xr) in x.iter().enumerate() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += xr * m.get(r, c);
        }
    }
    out
}

/// Logits of a model whose attention blocks contribute nothing: embeddings
/// followed by the MLP blocks only, position by position.
pub fn attention_free_logits(w: &TransformerWeights<f64>, tokens: &[u32]) -> Vec<Vec<f64>> {
    let d = w.config.d_model;
    tokens
        .iter()
        .enumerate()
        .map(|(i, &t)| {
            let mut x: Vec<f64> = (0..d)
                .map(|c| w.token_embedding.get(t as usize, c) + w.position_embedding.get(i, c))
                .collect();
            for layer in &w.layers {
                let hidden: Vec<f64> = vecmat(&rms(&x, &layer.mlp_norm), &layer.w_up)
                    .into_iter()
                    .map(|u| {
                        0.5 * u
                            * (1.0
                                + ((2.0 / std::f64::consts::PI).sqrt()
                                    * (u + 0.044715 * u.powi(3)))
                                .tanh())
                    })
                    .collect();
                let down = vecmat(&hidden, &layer.w_down);
                for (xc, dc) in x.iter_mut().zip(down) {
                    *xc += dc;
                }
            }
            vecmat(&rms(&x, &w.final_norm), &w.unembedding)
        })
        .collect()
}
