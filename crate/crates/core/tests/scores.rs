mod common;

use common::oracles::naive_scores;
use common::{append_padding, config, permute_heads, rel_close, trace, trace_with};
use headprobe::synth::SynthOptions;
use headprobe::{score_all_heads, AttentionTrace, ScoreFn};
use proptest::prelude::*;

fn scores_f64<T: headprobe::Scalar>(t: &AttentionTrace<T>, f: ScoreFn) -> Vec<f64> {
    score_all_heads(t, f)
        .values
        .iter()
        .map(|v| v.as_f64())
        .collect()
}

#[test]
fn all_functions_match_naive_loops() {
    let cfg = config(2, 4, 4, 8);
    for seed in 0..100u64 {
        let n = [1, 2, 17, 64][seed as usize % 4];
        let t = trace::<f64>(cfg, n, seed);
        for f in ScoreFn::ALL {
            let got = scores_f64(&t, f);
            let want = naive_scores(&t, f.as_str());
            for (k, (g, w)) in got.iter().zip(&want).enumerate() {
                assert!(
                    rel_close(*g, *w, 1e-6),
                    "{f} seed {seed} head {k}: {g} vs {w}"
                );
            }
        }
    }
}

#[test]
fn single_precision_traces_match_oracle() {
    let cfg = config(2, 4, 2, 4);
    for seed in 0..12u64 {
        let t = trace::<f32>(cfg, 1 + seed as usize * 5, seed);
        for f in ScoreFn::ALL {
            for (g, w) in scores_f64(&t, f).iter().zip(naive_scores(&t, f.as_str())) {
                assert!(rel_close(*g, w, 1e-6), "{f}: {g} vs {w}");
            }
        }
    }
}

#[test]
fn leading_padding_uses_first_real_token() {
    let cfg = config(1, 2, 2, 4);
    let opts = SynthOptions {
        leading_pad: 3,
        trailing_pad: 2,
        ..Default::default()
    };
    let t = trace_with::<f64>(cfg, 6, opts, 7);
    for f in ScoreFn::ALL {
        for (g, w) in scores_f64(&t, f).iter().zip(naive_scores(&t, f.as_str())) {
            assert!(rel_close(*g, w, 1e-9), "{f}");
        }
    }
}

#[test]
fn identical_heads_normalize_to_one() {
    let cfg = config(2, 3, 1, 4);
    let base = trace::<f64>(cfg, 9, 3);
    let n = base.seq_len();
    let d = cfg.d_head;
    // Copy head 0 of each layer into every head.
    let copy = |buf: &[f64], per: usize| {
        let mut out = buf.to_vec();
        for l in 0..cfg.n_layers {
            for h in 1..cfg.n_q_heads {
                let (src, dst) = (l * cfg.n_q_heads * per, (l * cfg.n_q_heads + h) * per);
                out.copy_within(src..src + per, dst);
            }
        }
        out
    };
    let t = AttentionTrace::new(
        cfg,
        "same",
        copy(base.attn_all(), n * n),
        copy(base.values_all(), n * d),
        None,
        base.padding_mask().to_vec(),
    )
    .unwrap();
    for f in [
        ScoreFn::AhonLn,
        ScoreFn::AwftLn,
        ScoreFn::AvvnLn,
        ScoreFn::LthonLn,
    ] {
        for v in scores_f64(&t, f) {
            assert!((v - 1.0).abs() < 1e-12, "{f}: {v}");
        }
    }
}

#[test]
fn zero_layer_sets_degenerate_flag() {
    let cfg = config(2, 2, 2, 2);
    let mut t = trace::<f64>(cfg, 5, 11);
    t.scale_layer_values(1, 0.0);
    let m = score_all_heads(&t, ScoreFn::AhonLn);
    assert_eq!(m.layer(1), &[1.0, 1.0]);
    assert!(!m.degenerate.is_empty());
    let hn = score_all_heads(&t, ScoreFn::LthonHn);
    assert_eq!(hn.layer(1), &[1.0, 1.0]);
    assert!(!hn.degenerate.is_empty());
}

fn shape() -> impl Strategy<Value = (usize, usize, usize, usize)> {
    (1usize..=3, 1usize..=4, 1usize..=4, 1usize..=24)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scores_stay_in_range((layers, heads, d, n) in shape(), seed in any::<u64>()) {
        let t = trace::<f64>(config(layers, heads, heads, d), n, seed);
        for f in ScoreFn::ALL {
            for v in scores_f64(&t, f) {
                prop_assert!(v.is_finite() && v >= 0.0, "{f}: {v}");
                match f {
                    ScoreFn::Awft => prop_assert!(v <= 1.0 + 1e-12),
                    ScoreFn::Aeqd => prop_assert!(v <= (n as f64).ln() + 1e-12),
                    _ => {}
                }
            }
        }
    }

    #[test]
    fn value_scaling_is_covariant((layers, heads, d, n) in shape(), seed in any::<u64>(), c in 0.01f64..100.0) {
        let cfg = config(layers, heads, heads, d);
        let t = trace::<f64>(cfg, n, seed);
        let layer = seed as usize % layers;
        let mut scaled = t.clone();
        scaled.scale_layer_values(layer, c);
        for f in ScoreFn::ALL {
            let (a, b) = (score_all_heads(&t, f), score_all_heads(&scaled, f));
            let factor = match f {
                ScoreFn::Avvn | ScoreFn::Ftvvn | ScoreFn::Ahon | ScoreFn::Lthon => c,
                _ => 1.0,
            };
            for (x, y) in a.layer(layer).iter().zip(b.layer(layer)) {
                prop_assert!(rel_close(x * factor, *y, 1e-6), "{f}: {x}·{factor} vs {y}");
            }
        }
    }

    #[test]
    fn head_permutation_permutes_scores((layers, heads, d, n) in shape(), seed in any::<u64>(), shift in 0usize..4) {
        let cfg = config(layers, heads, heads, d);
        let t = trace::<f64>(cfg, n, seed);
        let perm: Vec<usize> = (0..heads).map(|h| (h + shift) % heads).collect();
        let layer = (seed >> 7) as usize % layers;
        let p = permute_heads(&t, layer, &perm);
        for f in ScoreFn::ALL {
            let (a, b) = (score_all_heads(&t, f), score_all_heads(&p, f));
            for (h, &src) in perm.iter().enumerate() {
                prop_assert!(rel_close(b.get(layer, h), a.get(layer, src), 1e-12), "{f}");
            }
        }
    }

    #[test]
    fn padding_changes_no_score((layers, heads, d, n) in shape(), seed in any::<u64>(), extra in 1usize..6) {
        let t = trace::<f64>(config(layers, heads, heads, d), n, seed);
        let padded = append_padding(&t, extra);
        for f in ScoreFn::ALL {
            prop_assert_eq!(scores_f64(&t, f), scores_f64(&padded, f), "{}", f);
        }
    }
}
