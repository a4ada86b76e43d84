mod common;

use std::collections::BTreeMap;

use common::{config, trace, trace_with};
use headprobe::container::Container;
use headprobe::synth::SynthOptions;
use headprobe::{expand_kv_heads, read_trace, write_trace, AttentionTrace, Error, Mat};
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn bytes_of<T: headprobe::Scalar>(t: &AttentionTrace<T>) -> Vec<u8> {
    let mut buf = Vec::new();
    write_trace(t, &mut buf).unwrap();
    buf
}

#[test]
fn header_layout() {
    let t = trace::<f32>(config(1, 2, 1, 2), 3, 1);
    let buf = bytes_of(&t);
    let len = u64::from_le_bytes(buf[..8].try_into().unwrap()) as usize;
    assert_eq!(len % 8, 0);
    let index: serde_json::Value = serde_json::from_slice(&buf[8..8 + len]).unwrap();
    let attn = &index["attn"];
    assert_eq!(attn["dtype"], "F32");
    assert_eq!(attn["shape"], serde_json::json!([1, 2, 3, 3]));
    assert_eq!(index["values"]["shape"], serde_json::json!([1, 2, 3, 2]));
    assert_eq!(index["padding_mask"]["shape"], serde_json::json!([3]));
    assert_eq!(index["__metadata__"]["n_kv_heads"], "1");
    let end = index["padding_mask"]["byte_range"][1].as_u64().unwrap() as usize;
    assert!(end <= buf.len() - 8 - len);
}

#[test]
fn writing_is_deterministic() {
    let t = trace::<f32>(config(2, 2, 2, 4), 9, 5);
    let a = Sha256::digest(bytes_of(&t));
    let b = Sha256::digest(bytes_of(&t.clone()));
    assert_eq!(hex::encode(a), hex::encode(b));
}

#[test]
fn truncated_and_corrupt_files_fail() {
    let t = trace::<f32>(config(1, 1, 1, 2), 4, 2);
    let buf = bytes_of(&t);
    assert!(read_trace::<f32, _>(&buf[..buf.len() - 1]).is_err());
    assert!(read_trace::<f32, _>(&buf[..4]).is_err());
    let mut huge = buf.clone();
    huge[..8].copy_from_slice(&u64::MAX.to_le_bytes());
    assert!(read_trace::<f32, _>(&huge[..]).is_err());
    let mut bad_json = buf.clone();
    bad_json[8] = b'!';
    assert!(read_trace::<f32, _>(&bad_json[..]).is_err());
}

#[test]
fn missing_required_tensor_fails() {
    let t = trace::<f32>(config(1, 1, 1, 2), 4, 2);
    let mut c = t.to_container(&BTreeMap::new()).unwrap();
    let mut stripped = Container::new();
    stripped.metadata = c.metadata.clone();
    for (name, entry) in std::mem::take(&mut c.tensors) {
        if name != "values" {
            stripped.insert(name, entry.shape, entry.data).unwrap();
        }
    }
    let bytes = stripped.to_bytes().unwrap();
    assert!(read_trace::<f32, _>(&bytes[..]).is_err());
}

#[test]
fn non_stochastic_rows_fail_on_load() {
    let t = trace::<f32>(config(1, 1, 1, 2), 3, 4);
    let mut c = t.to_container(&BTreeMap::new()).unwrap();
    c.tensors.get_mut("attn").unwrap().data[0] = 0.5;
    let bytes = c.to_bytes().unwrap();
    assert!(matches!(
        read_trace::<f32, _>(&bytes[..]),
        Err(Error::Validation(_))
    ));
}

#[test]
fn head_outputs_are_optional() {
    let t = trace::<f32>(config(1, 2, 2, 3), 5, 8);
    let mut c = t.to_container(&BTreeMap::new()).unwrap();
    c.tensors.remove("head_out");
    let back: AttentionTrace<f32> = read_trace(&c.to_bytes().unwrap()[..]).unwrap();
    for (a, b) in back.head_out_all().iter().zip(t.head_out_all()) {
        assert!((a - b).abs() <= 1e-6);
    }
}

#[test]
fn expand_kv_idempotent_and_row_commuting() {
    let cfg = config(1, 4, 4, 2);
    let v: Vec<Mat<f64>> = (0..4)
        .map(|h| Mat::from_fn(3, 2, |i, c| (h * 10 + i * 2 + c) as f64))
        .collect();
    assert_eq!(expand_kv_heads(&v, &cfg).unwrap(), v);

    let gqa = config(1, 4, 2, 2);
    let kv: Vec<Mat<f64>> = v[..2].to_vec();
    let rows = [2usize, 0];
    let select = |m: &Mat<f64>| Mat::from_fn(rows.len(), m.cols(), |r, c| m.get(rows[r], c));
    let expand_then_select: Vec<_> = expand_kv_heads(&kv, &gqa)
        .unwrap()
        .iter()
        .map(select)
        .collect();
    let select_then_expand =
        expand_kv_heads(&kv.iter().map(select).collect::<Vec<_>>(), &gqa).unwrap();
    assert_eq!(expand_then_select, select_then_expand);
    assert!(expand_kv_heads(&kv, &config(1, 3, 2, 2)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn round_trip_preserves_bits(
        layers in 1usize..=3,
        heads in 1usize..=4,
        d in 1usize..=5,
        n in 1usize..=20,
        lead in 0usize..3,
        trail in 0usize..3,
        seed in any::<u64>(),
    ) {
        let opts = SynthOptions { leading_pad: lead, trailing_pad: trail, ..Default::default() };
        let t = trace_with::<f32>(config(layers, heads, heads, d), n, opts, seed).with_sequence_id(format!("s{seed}"));
        let back: AttentionTrace<f32> = read_trace(&bytes_of(&t)[..]).unwrap();
        prop_assert_eq!(back.sequence_id(), t.sequence_id());
        prop_assert_eq!(back.padding_mask(), t.padding_mask());
        let bits = |x: &[f32]| x.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(back.attn_all()), bits(t.attn_all()));
        prop_assert_eq!(bits(back.values_all()), bits(t.values_all()));
        prop_assert_eq!(bits(back.head_out_all()), bits(t.head_out_all()));
    }

    #[test]
    fn loaded_traces_satisfy_consistency(n in 1usize..=30, seed in any::<u64>()) {
        let t = trace::<f32>(config(2, 2, 2, 4), n, seed);
        let back: AttentionTrace<f32> = read_trace(&bytes_of(&t)[..]).unwrap();
        let cfg = *back.config();
        for l in 0..cfg.n_layers {
            for h in 0..cfg.n_q_heads {
                let s = back.head_slice(l, h);
                for i in 0..s.n {
                    let row_sum: f64 = s.attn_row(i).iter().map(|&v| v as f64).sum();
                    prop_assert!((row_sum - 1.0).abs() <= 1e-5);
                    for c in 0..s.d_head {
                        let av: f64 = (0..s.n).map(|j| s.attn_row(i)[j] as f64 * s.value_row(j)[c] as f64).sum();
                        prop_assert!((av - s.head_out_row(i)[c] as f64).abs() <= 1e-4);
                    }
                }
            }
        }
    }
}
