//! Desk-scale decoder-only transformer used to generate traces and to run
//! head-zeroing interventions.
//!
//! Pre-norm residual blocks with RMS normalization, learned absolute position
//! embeddings, causal softmax attention with optional grouped key/value heads,
//! and a GELU MLP. No biases anywhere, so an attention block whose heads are
//! all zeroed contributes exactly nothing to the residual stream.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Mat;
use crate::trace::{AttentionTrace, HeadMask, ModelConfig};

const RMS_EPS: f64 = 1e-6;
/// Magnitude of the first-position feature installed by sink plants.
pub const SINK_FEATURE_MAGNITUDE: f64 = 1e4;
/// First-token logit margin a planted sink is calibrated to reach on every probe query.
pub const SINK_LOGIT_MARGIN: f64 = 24.0;
const SINK_PROBE_SEQUENCES: usize = 4;
const SINK_PROBE_LEN: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: Vec<T>,
    /// `d_model × (n_q_heads · d_head)`
    pub w_q: Mat<T>,
    /// `d_model × (n_kv_heads · d_head)`
    pub w_k: Mat<T>,
    /// `d_model × (n_kv_heads · d_head)`
    pub w_v: Mat<T>,
    /// `d_model × d_model`; rows `h·d_head .. (h+1)·d_head` belong to head `h`.
    pub w_o: Mat<T>,
    pub mlp_norm: Vec<T>,
    /// `d_model × 4·d_model`
    pub w_up: Mat<T>,
    /// `4·d_model × d_model`
    pub w_down: Mat<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights<T> {
    pub config: ModelConfig,
    pub token_embedding: Mat<T>,
    pub position_embedding: Mat<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    /// `d_model × vocab_size`
    pub unembedding: Mat<T>,
    pub rng_seed: u64,
}

/// Draws every matrix from a seeded standard Gaussian scaled by `1/√d_model`.
/// Normalization gains start at one.
pub fn init_model<T: Scalar>(config: ModelConfig, seed: u64) -> Result<TransformerWeights<T>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (config.d_model as f64).sqrt();
    let mut gaussian = |rows: usize, cols: usize| {
        Mat::from_fn(rows, cols, |_, _| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::of(z * scale)
        })
    };
    let d = config.d_model;
    let kv = config.n_kv_heads * config.d_head;
    let token_embedding = gaussian(config.vocab_size, d);
    let position_embedding = gaussian(config.max_seq_len, d);
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights {
            attn_norm: vec![T::one(); d],
            w_q: gaussian(d, d),
            w_k: gaussian(d, kv),
            w_v: gaussian(d, kv),
            w_o: gaussian(d, d),
            mlp_norm: vec![T::one(); d],
            w_up: gaussian(d, 4 * d),
            w_down: gaussian(4 * d, d),
        })
        .collect();
    let unembedding = gaussian(d, config.vocab_size);
    Ok(TransformerWeights {
        config,
        token_embedding,
        position_embedding,
        layers,
        final_norm: vec![T::one(); d],
        unembedding,
        rng_seed: seed,
    })
}

/// Result of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// `N × vocab_size`
    pub logits: Mat<T>,
    /// Attention trace with unzeroed head outputs.
    pub trace: AttentionTrace<T>,
    /// Per-layer attention block output `H·W_O` (after masking, before the residual add).
    pub attn_block_outputs: Vec<Mat<T>>,
    /// Heads that were zeroed, if a mask was supplied.
    pub zeroed: Option<HeadMask>,
}

fn rms_norm<T: Scalar>(x: &Mat<T>, gain: &[T]) -> Mat<T> {
    let mut out = x.clone();
    let d = x.cols();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>() / d as f64;
        let inv = T::of(1.0 / (ms + RMS_EPS).sqrt());
        for (v, &g) in row.iter_mut().zip(gain) {
            *v = *v * inv * g;
        }
    }
    out
}

fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + T::of(0.044715) * x * x * x)).tanh())
}

/// Causal softmax of `scores` (row-major `n × n`) in place; entries `j > i` become zero.
fn causal_softmax<T: Scalar>(scores: &mut [T], n: usize) {
    for i in 0..n {
        let row = &mut scores[i * n..(i + 1) * n];
        let max = row[..=i].iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let mut sum = T::zero();
        for v in &mut row[..=i] {
            *v = (*v - max).exp();
            sum = sum + *v;
        }
        for v in &mut row[..=i] {
            *v = *v / sum;
        }
        for v in &mut row[i + 1..] {
            *v = T::zero();
        }
    }
}

impl<T: Scalar> TransformerWeights<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_inputs(&self, tokens: &[u32], mask: Option<&HeadMask>) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("token sequence".into()));
        }
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::OutOfRange(format!(
                "sequence length {} exceeds max_seq_len {}",
                tokens.len(),
                self.config.max_seq_len
            )));
        }
        if let Some(&bad) = tokens
            .iter()
            .find(|&&t| t as usize >= self.config.vocab_size)
        {
            return Err(Error::OutOfRange(format!(
                "token id {bad} >= vocab_size {}",
                self.config.vocab_size
            )));
        }
        if let Some(m) = mask {
            if !m.matches(&self.config) {
                return Err(Error::Shape(format!(
                    "mask is {}x{}, model has {} layers x {} heads",
                    m.n_layers, m.n_heads, self.config.n_layers, self.config.n_q_heads
                )));
            }
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Mat<T> {
        let d = self.config.d_model;
        Mat::from_fn(tokens.len(), d, |i, c| {
            self.token_embedding.get(tokens[i] as usize, c) + self.position_embedding.get(i, c)
        })
    }

    fn mlp(&self, layer: &LayerWeights<T>, x: &Mat<T>) -> Mat<T> {
        let mut hidden = rms_norm(x, &layer.mlp_norm).matmul(&layer.w_up);
        for v in hidden.as_mut_slice() {
            *v = gelu(*v);
        }
        hidden.matmul(&layer.w_down)
    }

    /// Forward pass; heads flagged in `mask` have their output replaced by zero
    /// before concatenation and the output projection.
    pub fn forward(&self, tokens: &[u32], mask: Option<&HeadMask>) -> Result<ForwardOutput<T>> {
        self.check_inputs(tokens, mask)?;
        let (logits, recorded) = self.run(tokens, mask, true, None);
        let recorded = recorded.expect("recording requested");
        Ok(ForwardOutput {
            logits,
            trace: recorded.trace,
            attn_block_outputs: recorded.attn_block_outputs,
            zeroed: mask.cloned(),
        })
    }

    /// Forward pass returning logits only.
    pub fn forward_logits(&self, tokens: &[u32], mask: Option<&HeadMask>) -> Result<Mat<T>> {
        self.check_inputs(tokens, mask)?;
        Ok(self.run(tokens, mask, false, None).0)
    }

    /// Normalized attention-block input of every layer.
    fn attention_inputs(&self, tokens: &[u32]) -> Vec<Mat<T>> {
        let mut inputs = Vec::with_capacity(self.config.n_layers);
        self.run(tokens, None, false, Some(&mut inputs));
        inputs
    }

    fn run(
        &self,
        tokens: &[u32],
        mask: Option<&HeadMask>,
        record: bool,
        mut capture_inputs: Option<&mut Vec<Mat<T>>>,
    ) -> (Mat<T>, Option<Recorded<T>>) {
        let cfg = &self.config;
        let (n, dh) = (tokens.len(), cfg.d_head);
        let group = cfg.group_size();
        let inv_sqrt = T::of(1.0 / (dh as f64).sqrt());
        let heads = cfg.total_heads();

        let mut rec = record.then(|| RecordBuffers {
            attn: Vec::with_capacity(heads * n * n),
            values: Vec::with_capacity(heads * n * dh),
            head_out: Vec::with_capacity(heads * n * dh),
            block_out: Vec::with_capacity(cfg.n_layers),
        });

        let mut x = self.embed(tokens);
        for (l, layer) in self.layers.iter().enumerate() {
            let xn = rms_norm(&x, &layer.attn_norm);
            if let Some(c) = capture_inputs.as_deref_mut() {
                c.push(xn.clone());
            }
            let q = xn.matmul(&layer.w_q);
            let k = xn.matmul(&layer.w_k);
            let v = xn.matmul(&layer.w_v);
            let mut concat = Mat::zeros(n, cfg.d_model);
            for h in 0..cfg.n_q_heads {
                let g = h / group;
                let mut a = vec![T::zero(); n * n];
                for i in 0..n {
                    let qi = &q.row(i)[h * dh..(h + 1) * dh];
                    for j in 0..=i {
                        let kj = &k.row(j)[g * dh..(g + 1) * dh];
                        let dot = qi.iter().zip(kj).fold(T::zero(), |s, (&p, &r)| s + p * r);
                        a[i * n + j] = dot * inv_sqrt;
                    }
                }
                causal_softmax(&mut a, n);
                let vh = v.col_block(g * dh, dh);
                let a = Mat::from_vec(n, n, a);
                let z = a.matmul(&vh);
                let zeroed = mask.is_some_and(|m| m.get(l, h));
                if !zeroed {
                    for i in 0..n {
                        concat.row_mut(i)[h * dh..(h + 1) * dh].copy_from_slice(z.row(i));
                    }
                }
                if let Some(r) = rec.as_mut() {
                    r.attn.extend_from_slice(a.as_slice());
                    r.values.extend_from_slice(vh.as_slice());
                    r.head_out.extend_from_slice(z.as_slice());
                }
            }
            let attn_out = concat.matmul(&layer.w_o);
            x.add_assign(&attn_out);
            if let Some(r) = rec.as_mut() {
                r.block_out.push(attn_out);
            }
            let m = self.mlp(layer, &x);
            x.add_assign(&m);
        }
        let logits = rms_norm(&x, &self.final_norm).matmul(&self.unembedding);
        let recorded = rec.map(|r| Recorded {
            trace: AttentionTrace::from_parts_unchecked(
                *cfg,
                String::new(),
                r.attn,
                r.values,
                r.head_out,
                vec![true; n],
            ),
            attn_block_outputs: r.block_out,
        });
        (logits, recorded)
    }

    /// Checkpoint in the named-tensor container; tensor names carry a `w.` prefix.
    pub fn to_container(&self, extra_meta: &BTreeMap<String, String>) -> Result<Container> {
        let mut c = Container::new();
        let f32s = |m: &Mat<T>| m.as_slice().iter().map(|v| v.as_f32()).collect::<Vec<_>>();
        let vec32 = |v: &[T]| v.iter().map(|x| x.as_f32()).collect::<Vec<_>>();
        let mut put = |name: String, m: &Mat<T>| c.insert(name, vec![m.rows(), m.cols()], f32s(m));
        put("w.token_embedding".into(), &self.token_embedding)?;
        put("w.position_embedding".into(), &self.position_embedding)?;
        put("w.unembedding".into(), &self.unembedding)?;
        for (l, layer) in self.layers.iter().enumerate() {
            put(format!("w.layers.{l}.w_q"), &layer.w_q)?;
            put(format!("w.layers.{l}.w_k"), &layer.w_k)?;
            put(format!("w.layers.{l}.w_v"), &layer.w_v)?;
            put(format!("w.layers.{l}.w_o"), &layer.w_o)?;
            put(format!("w.layers.{l}.w_up"), &layer.w_up)?;
            put(format!("w.layers.{l}.w_down"), &layer.w_down)?;
        }
        let d = self.config.d_model;
        for (l, layer) in self.layers.iter().enumerate() {
            c.insert(
                format!("w.layers.{l}.attn_norm"),
                vec![d],
                vec32(&layer.attn_norm),
            )?;
            c.insert(
                format!("w.layers.{l}.mlp_norm"),
                vec![d],
                vec32(&layer.mlp_norm),
            )?;
        }
        c.insert("w.final_norm", vec![d], vec32(&self.final_norm))?;
        for (k, v) in extra_meta {
            c.set_meta(k.clone(), v);
        }
        self.config.to_container_meta(&mut c);
        c.set_meta("rng_seed", self.rng_seed);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = ModelConfig::from_meta(c)?;
        let rng_seed = c.meta_parse("rng_seed")?;
        let mat = |name: String, rows: usize, cols: usize| -> Result<Mat<T>> {
            let t = c.require(&name)?;
            if t.shape != [rows, cols] {
                return Err(Error::Shape(format!(
                    "`{name}` has shape {:?}, expected [{rows}, {cols}]",
                    t.shape
                )));
            }
            Ok(Mat::from_vec(
                rows,
                cols,
                t.data.iter().map(|&v| T::of(v as f64)).collect(),
            ))
        };
        let vector = |name: String, len: usize| -> Result<Vec<T>> {
            let t = c.require(&name)?;
            if t.shape != [len] {
                return Err(Error::Shape(format!(
                    "`{name}` has shape {:?}, expected [{len}]",
                    t.shape
                )));
            }
            Ok(t.data.iter().map(|&v| T::of(v as f64)).collect())
        };
        let d = config.d_model;
        let kv = config.n_kv_heads * config.d_head;
        let layers = (0..config.n_layers)
            .map(|l| {
                Ok(LayerWeights {
                    attn_norm: vector(format!("w.layers.{l}.attn_norm"), d)?,
                    w_q: mat(format!("w.layers.{l}.w_q"), d, d)?,
                    w_k: mat(format!("w.layers.{l}.w_k"), d, kv)?,
                    w_v: mat(format!("w.layers.{l}.w_v"), d, kv)?,
                    w_o: mat(format!("w.layers.{l}.w_o"), d, d)?,
                    mlp_norm: vector(format!("w.layers.{l}.mlp_norm"), d)?,
                    w_up: mat(format!("w.layers.{l}.w_up"), d, 4 * d)?,
                    w_down: mat(format!("w.layers.{l}.w_down"), 4 * d, d)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config,
            token_embedding: mat("w.token_embedding".into(), config.vocab_size, d)?,
            position_embedding: mat("w.position_embedding".into(), config.max_seq_len, d)?,
            layers,
            final_norm: vector("w.final_norm".into(), d)?,
            unembedding: mat("w.unembedding".into(), d, config.vocab_size)?,
            rng_seed,
        })
    }

    pub fn cast<U: Scalar>(&self) -> TransformerWeights<U> {
        let v = |x: &[T]| x.iter().map(|y| U::of(y.as_f64())).collect::<Vec<U>>();
        TransformerWeights {
            config: self.config,
            token_embedding: self.token_embedding.cast(),
            position_embedding: self.position_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    attn_norm: v(&l.attn_norm),
                    w_q: l.w_q.cast(),
                    w_k: l.w_k.cast(),
                    w_v: l.w_v.cast(),
                    w_o: l.w_o.cast(),
                    mlp_norm: v(&l.mlp_norm),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            final_norm: v(&self.final_norm),
            unembedding: self.unembedding.cast(),
            rng_seed: self.rng_seed,
        }
    }
}

struct RecordBuffers<T> {
    attn: Vec<T>,
    values: Vec<T>,
    head_out: Vec<T>,
    block_out: Vec<Mat<T>>,
}

struct Recorded<T> {
    trace: AttentionTrace<T>,
    attn_block_outputs: Vec<Mat<T>>,
}

/// Direct residual-stream contribution of one head: `Z_h · W_O^(h)`, where
/// `W_O^(h)` is the head's `d_head × d_model` row block of the output projection.
pub fn circuit_head_contribution<T: Scalar>(
    trace: &AttentionTrace<T>,
    weights: &TransformerWeights<T>,
    layer: usize,
    head: usize,
) -> Result<Mat<T>> {
    let cfg = &weights.config;
    if layer >= cfg.n_layers || head >= cfg.n_q_heads {
        return Err(Error::OutOfRange(format!("head ({layer},{head})")));
    }
    if trace.config() != cfg {
        return Err(Error::Shape(
            "trace and weights disagree on model config".into(),
        ));
    }
    let dh = cfg.d_head;
    let z = Mat::from_vec(trace.seq_len(), dh, trace.head_out(layer, head).to_vec());
    Ok(z.matmul(&weights.layers[layer].w_o.row_block(head * dh, dh)))
}

/// Sum of per-head circuit contributions for one layer, skipping heads flagged in `mask`.
pub fn circuit_attention_output<T: Scalar>(
    trace: &AttentionTrace<T>,
    weights: &TransformerWeights<T>,
    layer: usize,
    mask: Option<&HeadMask>,
) -> Result<Mat<T>> {
    let mut total = Mat::zeros(trace.seq_len(), weights.config.d_model);
    for head in 0..weights.config.n_q_heads {
        if mask.is_some_and(|m| m.get(layer, head)) {
            continue;
        }
        total.add_assign(&circuit_head_contribution(trace, weights, layer, head)?);
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantKind {
    /// Value projection scaled so the head's outputs are near zero.
    NearZeroOutput,
    /// First position dominates the head's attention; its value is scaled down.
    FirstTokenSink,
}

fn default_plant_scale() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    /// `(layer, query head)` pairs.
    pub targets: Vec<(usize, usize)>,
    pub kind: PlantKind,
    #[serde(default = "default_plant_scale")]
    pub scale: f64,
}

impl PlantSpec {
    pub fn new(kind: PlantKind, targets: Vec<(usize, usize)>) -> Self {
        Self {
            targets,
            kind,
            scale: default_plant_scale(),
        }
    }

    pub fn with_scale(mut self, scale: f64) -> Self {
        self.scale = scale;
        self
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        if !self.scale.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "plant scale {} is not finite",
                self.scale
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &(l, h) in &self.targets {
            if l >= config.n_layers || h >= config.n_q_heads {
                return Err(Error::OutOfRange(format!("plant target ({l},{h})")));
            }
            if !seen.insert((l, h)) {
                return Err(Error::InvalidConfig(format!(
                    "plant target ({l},{h}) listed twice"
                )));
            }
        }
        if self.kind == PlantKind::FirstTokenSink && config.d_model < 3 {
            return Err(Error::InvalidConfig("sink plants need d_model >= 3".into()));
        }
        Ok(())
    }
}

/// Residual coordinates reserved by sink plants: `(bias, sink)`.
pub fn sink_channels(config: &ModelConfig) -> (usize, usize) {
    (config.d_model - 2, config.d_model - 1)
}

/// Reserves two residual coordinates: one constant at every position and one
/// non-zero only at position 0. Nothing writes to either coordinate after the
/// embedding, so both survive every layer unchanged. Idempotent.
fn install_sink_channels<T: Scalar>(w: &mut TransformerWeights<T>) {
    let (bias, sink) = sink_channels(&w.config);
    for t in 0..w.config.vocab_size {
        w.token_embedding.set(t, bias, T::one());
        w.token_embedding.set(t, sink, T::zero());
    }
    for p in 0..w.config.max_seq_len {
        w.position_embedding.set(p, bias, T::zero());
        let v = if p == 0 {
            T::of(SINK_FEATURE_MAGNITUDE)
        } else {
            T::zero()
        };
        w.position_embedding.set(p, sink, v);
    }
    for layer in &mut w.layers {
        for r in 0..layer.w_o.rows() {
            layer.w_o.set(r, bias, T::zero());
            layer.w_o.set(r, sink, T::zero());
        }
        for r in 0..layer.w_down.rows() {
            layer.w_down.set(r, bias, T::zero());
            layer.w_down.set(r, sink, T::zero());
        }
    }
}

fn sink_probe_tokens<T: Scalar>(w: &TransformerWeights<T>) -> Vec<Vec<u32>> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(w.rng_seed ^ 0x5141_4e4b_5052_4f42);
    let len = SINK_PROBE_LEN.min(w.config.max_seq_len);
    (0..SINK_PROBE_SEQUENCES)
        .map(|_| {
            (0..len)
                .map(|_| rng.random_range(0..w.config.vocab_size as u32))
                .collect()
        })
        .collect()
}

/// Rewrites the first axis of head `h`'s query/key subspace so queries read
/// the constant channel and only position 0 carries a key along that axis,
/// then sets the key gain so every probe query prefers position 0 by at
/// least [`SINK_LOGIT_MARGIN`]. The value read from position 0 is scaled by `scale`.
fn plant_sink_head<T: Scalar>(
    w: &mut TransformerWeights<T>,
    l: usize,
    h: usize,
    scale: T,
    inputs: &[&Mat<T>],
) {
    let cfg = w.config;
    let dh = cfg.d_head;
    let g = cfg.kv_head_of(h);
    let (bias, sink) = sink_channels(&cfg);
    let layer = &mut w.layers[l];
    let (qc, kc) = (h * dh, g * dh);
    for r in 0..cfg.d_model {
        layer
            .w_q
            .set(r, qc, if r == bias { T::one() } else { T::zero() });
        layer
            .w_k
            .set(r, kc, if r == sink { T::one() } else { T::zero() });
    }
    for c in 0..dh {
        layer
            .w_v
            .set(sink, kc + c, layer.w_v.get(sink, kc + c) * scale);
    }

    // With unit key gain, logit(i, 0) = G·a_i·b/√dh + rest(i, 0), where
    // a_i = x̂_i[bias], b = x̂_0[sink], and rest covers the other head axes.
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let mut gain = 0.0f64;
    for xn in inputs {
        let q = xn.matmul(&layer.w_q.col_block(qc, dh));
        let k = xn.matmul(&layer.w_k.col_block(kc, dh));
        let rest = |i: usize, j: usize| {
            (1..dh)
                .map(|c| q.get(i, c).as_f64() * k.get(j, c).as_f64())
                .sum::<f64>()
                * inv_sqrt
        };
        let b = xn.get(0, sink).as_f64();
        for i in 1..xn.rows() {
            let a = xn.get(i, bias).as_f64();
            let competitor = (1..=i)
                .map(|j| rest(i, j))
                .fold(f64::NEG_INFINITY, f64::max);
            let need = (SINK_LOGIT_MARGIN - rest(i, 0) + competitor) / (a * b * inv_sqrt);
            gain = gain.max(need);
        }
    }
    layer.w_k.set(sink, kc, T::of(gain.max(0.0)));
}

/// Returns a copy of `weights` with the requested heads planted.
///
/// With grouped key/value heads, value and key edits land on the shared
/// key/value head and therefore affect every query head of the group.
pub fn plant_heads<T: Scalar>(
    weights: &TransformerWeights<T>,
    spec: &PlantSpec,
) -> Result<TransformerWeights<T>> {
    spec.validate(&weights.config)?;
    let mut w = weights.clone();
    if spec.targets.is_empty() {
        return Ok(w);
    }
    let cfg = w.config;
    let dh = cfg.d_head;
    let scale = T::of(spec.scale);
    match spec.kind {
        PlantKind::NearZeroOutput => {
            for &(l, h) in &spec.targets {
                let g = cfg.kv_head_of(h);
                let wv = &mut w.layers[l].w_v;
                for r in 0..wv.rows() {
                    for c in g * dh..(g + 1) * dh {
                        wv.set(r, c, wv.get(r, c) * scale);
                    }
                }
            }
        }
        PlantKind::FirstTokenSink => {
            install_sink_channels(&mut w);
            let probes = sink_probe_tokens(&w);
            let mut by_layer: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
            for &(l, h) in &spec.targets {
                by_layer.entry(l).or_default().push(h);
            }
            for (l, heads) in by_layer {
                // Inputs to layer `l` already reflect sinks planted in earlier layers.
                let inputs: Vec<Vec<Mat<T>>> =
                    probes.iter().map(|t| w.attention_inputs(t)).collect();
                let layer_inputs: Vec<&Mat<T>> =
                    inputs.iter().map(|per_layer| &per_layer[l]).collect();
                for h in heads {
                    plant_sink_head(&mut w, l, h, scale, &layer_inputs);
                }
            }
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            n_q_heads: 2,
            n_kv_heads: 2,
            d_model: 8,
            d_head: 4,
            vocab_size: 11,
            max_seq_len: 16,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a: TransformerWeights<f64> = init_model(small(), 3).unwrap();
        let b: TransformerWeights<f64> = init_model(small(), 3).unwrap();
        let c: TransformerWeights<f64> = init_model(small(), 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.config.d_model / a.config.n_q_heads, 4);
    }

    #[test]
    fn rejects_bad_inputs() {
        let w: TransformerWeights<f32> = init_model(small(), 0).unwrap();
        assert!(w.forward(&[], None).is_err());
        assert!(w.forward(&[11], None).is_err());
        let mut other = small();
        other.n_layers = 3;
        assert!(w.forward(&[1, 2], Some(&HeadMask::none(&other))).is_err());
    }

    #[test]
    fn softmax_rows_are_causal() {
        let mut s = vec![1.0f64, 9.0, 9.0, 2.0, 0.5, 9.0, 0.0, 0.0, 0.0];
        causal_softmax(&mut s, 3);
        assert_eq!(&s[..3], &[1.0, 0.0, 0.0]);
        assert_eq!(s[5], 0.0);
        assert!((s[6..].iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip() {
        let w: TransformerWeights<f32> = init_model(small(), 9).unwrap();
        let c = w.to_container(&BTreeMap::new()).unwrap();
        let bytes = c.to_bytes().unwrap();
        let back =
            TransformerWeights::<f32>::from_container(&Container::from_bytes(&bytes).unwrap())
                .unwrap();
        assert_eq!(back, w);
        assert!(c.tensors.keys().all(|k| k.starts_with("w.")));
    }

    #[test]
    fn plant_validation() {
        let w: TransformerWeights<f64> = init_model(small(), 1).unwrap();
        let dup = PlantSpec::new(PlantKind::NearZeroOutput, vec![(0, 1), (0, 1)]);
        assert!(plant_heads(&w, &dup).is_err());
        let oob = PlantSpec::new(PlantKind::NearZeroOutput, vec![(2, 0)]);
        assert!(plant_heads(&w, &oob).is_err());
        let empty = PlantSpec::new(PlantKind::FirstTokenSink, vec![]);
        assert_eq!(plant_heads(&w, &empty).unwrap(), w);
    }
}
