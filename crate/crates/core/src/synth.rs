//! Seeded random traces with valid causal attention, for tests and calibration studies.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::scalar::Scalar;
use crate::trace::{AttentionTrace, ModelConfig};

#[derive(Debug, Clone, Copy)]
pub struct SynthOptions {
    /// Standard deviation of the pre-softmax logits.
    pub logit_scale: f64,
    /// Padded positions placed before the real tokens.
    pub leading_pad: usize,
    /// Padded positions placed after the real tokens.
    pub trailing_pad: usize,
}

impl Default for SynthOptions {
    fn default() -> Self {
        Self {
            logit_scale: 2.0,
            leading_pad: 0,
            trailing_pad: 0,
        }
    }
}

/// A trace with `n_real` unpadded positions whose attention rows are softmaxes
/// of Gaussian logits over the causal prefix and whose values are Gaussian.
/// Head outputs are computed as `A·V`.
pub fn random_trace<T: Scalar, R: Rng + ?Sized>(
    config: ModelConfig,
    n_real: usize,
    opts: SynthOptions,
    rng: &mut R,
) -> AttentionTrace<T> {
    assert!(n_real >= 1);
    let n = opts.leading_pad + n_real + opts.trailing_pad;
    let mask: Vec<bool> = (0..n)
        .map(|i| i >= opts.leading_pad && i < opts.leading_pad + n_real)
        .collect();
    let heads = config.total_heads();
    let d = config.d_head;
    let mut attn = vec![T::zero(); heads * n * n];
    let mut values = vec![T::zero(); heads * n * d];
    for k in 0..heads {
        let value_scale = 0.25 + 2.0 * rng.random::<f64>();
        for i in 0..n {
            if !mask[i] {
                continue;
            }
            for c in 0..d {
                let z: f64 = StandardNormal.sample(rng);
                values[k * n * d + i * d + c] = T::of(z * value_scale);
            }
            let keys: Vec<usize> = (0..=i).filter(|&j| mask[j]).collect();
            let logits: Vec<f64> = keys
                .iter()
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * opts.logit_scale
                })
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            for (&j, e) in keys.iter().zip(exps) {
                attn[k * n * n + i * n + j] = T::of(e / sum);
            }
        }
    }
    AttentionTrace::new(config, "synthetic", attn, values, None, mask)
        .expect("synthetic trace is valid")
}
