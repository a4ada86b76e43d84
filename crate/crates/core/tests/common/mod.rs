#![allow(dead_code)]

pub mod oracles;

use headprobe::synth::{random_trace, SynthOptions};
use headprobe::{AttentionTrace, ModelConfig, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn config(n_layers: usize, n_q_heads: usize, n_kv_heads: usize, d_head: usize) -> ModelConfig {
    ModelConfig {
        n_layers,
        n_q_heads,
        n_kv_heads,
        d_model: n_q_heads * d_head,
        d_head,
        vocab_size: 32,
        max_seq_len: 128,
    }
}

pub fn trace_with<T: Scalar>(
    cfg: ModelConfig,
    n: usize,
    opts: SynthOptions,
    seed: u64,
) -> AttentionTrace<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random_trace(cfg, n, opts, &mut rng)
}

pub fn trace<T: Scalar>(cfg: ModelConfig, n: usize, seed: u64) -> AttentionTrace<T> {
    trace_with(cfg, n, SynthOptions::default(), seed)
}

/// Same trace with the heads of `layer` reordered so that new head `h` is old head `perm[h]`.
pub fn permute_heads<T: Scalar>(
    t: &AttentionTrace<T>,
    layer: usize,
    perm: &[usize],
) -> AttentionTrace<T> {
    let cfg = *t.config();
    let (h_n, n, d) = (cfg.n_q_heads, t.seq_len(), cfg.d_head);
    let remap = |buf: &[T], per_head: usize| {
        let mut out = buf.to_vec();
        for (h, &from) in perm.iter().enumerate() {
            let dst = (layer * h_n + h) * per_head;
            let src = (layer * h_n + from) * per_head;
            out[dst..dst + per_head].copy_from_slice(&buf[src..src + per_head]);
        }
        out
    };
    AttentionTrace::new(
        cfg,
        t.sequence_id(),
        remap(t.attn_all(), n * n),
        remap(t.values_all(), n * d),
        Some(remap(t.head_out_all(), n * d)),
        t.padding_mask().to_vec(),
    )
    .expect("permuted trace is valid")
}

/// Same trace with `extra` padded positions appended.
pub fn append_padding<T: Scalar>(t: &AttentionTrace<T>, extra: usize) -> AttentionTrace<T> {
    let cfg = *t.config();
    let (n, d) = (t.seq_len(), cfg.d_head);
    let m = n + extra;
    let heads = cfg.total_heads();
    let mut attn = vec![T::zero(); heads * m * m];
    let mut values = vec![T::zero(); heads * m * d];
    let mut outs = vec![T::zero(); heads * m * d];
    for k in 0..heads {
        for i in 0..n {
            for j in 0..n {
                attn[(k * m + i) * m + j] = t.attn_all()[(k * n + i) * n + j];
            }
            for c in 0..d {
                values[(k * m + i) * d + c] = t.values_all()[(k * n + i) * d + c];
                outs[(k * m + i) * d + c] = t.head_out_all()[(k * n + i) * d + c];
            }
        }
    }
    let mut mask = t.padding_mask().to_vec();
    mask.resize(m, false);
    AttentionTrace::new(cfg, t.sequence_id(), attn, values, Some(outs), mask)
        .expect("padded trace is valid")
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    (a - b).abs() <= rel * a.abs().max(b.abs()).max(1e-12)
}
