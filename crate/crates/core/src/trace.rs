//! Attention traces, score matrices and head masks, plus trace container I/O.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::calibration::ThresholdPolicy;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::scores::ScoreFn;
use crate::tensor::Mat;

/// Row sums of unpadded attention rows must be within this of 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;
/// Allowed ∞-norm gap between stored head outputs and `A·V`.
pub const HEAD_OUTPUT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    /// Query heads per layer.
    pub n_q_heads: usize,
    /// Key/value heads per layer before grouped-query expansion.
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_layers == 0 || self.n_q_heads == 0 || self.n_kv_heads == 0 {
            return bad("layer and head counts must be positive".into());
        }
        if !self.n_q_heads.is_multiple_of(self.n_kv_heads) {
            return bad(format!(
                "n_q_heads {} is not a multiple of n_kv_heads {}",
                self.n_q_heads, self.n_kv_heads
            ));
        }
        if self.d_head * self.n_q_heads != self.d_model {
            return bad(format!(
                "d_head {} x n_q_heads {} != d_model {}",
                self.d_head, self.n_q_heads, self.d_model
            ));
        }
        if self.vocab_size == 0 || self.max_seq_len == 0 {
            return bad("vocab_size and max_seq_len must be positive".into());
        }
        Ok(())
    }

    pub fn total_heads(&self) -> usize {
        self.n_layers * self.n_q_heads
    }

    /// Query heads sharing one key/value head.
    pub fn group_size(&self) -> usize {
        self.n_q_heads / self.n_kv_heads
    }

    pub fn kv_head_of(&self, q_head: usize) -> usize {
        q_head / self.group_size()
    }

    fn write_meta(&self, c: &mut Container) {
        c.set_meta("n_layers", self.n_layers);
        c.set_meta("n_q_heads", self.n_q_heads);
        c.set_meta("n_kv_heads", self.n_kv_heads);
        c.set_meta("d_model", self.d_model);
        c.set_meta("d_head", self.d_head);
        c.set_meta("vocab_size", self.vocab_size);
        c.set_meta("max_seq_len", self.max_seq_len);
    }

    pub(crate) fn from_meta(c: &Container) -> Result<Self> {
        let cfg = ModelConfig {
            n_layers: c.meta_parse("n_layers")?,
            n_q_heads: c.meta_parse("n_q_heads")?,
            n_kv_heads: c.meta_parse("n_kv_heads")?,
            d_model: c.meta_parse("d_model")?,
            d_head: c.meta_parse("d_head")?,
            vocab_size: c.meta_parse("vocab_size")?,
            max_seq_len: c.meta_parse("max_seq_len")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub(crate) fn to_container_meta(self, c: &mut Container) {
        self.write_meta(c)
    }
}

/// Replicates each key/value head across its group of query heads, in order.
pub fn expand_kv_heads<T: Scalar>(values: &[Mat<T>], config: &ModelConfig) -> Result<Vec<Mat<T>>> {
    if config.n_kv_heads == 0 || !config.n_q_heads.is_multiple_of(config.n_kv_heads) {
        return Err(Error::InvalidConfig(format!(
            "cannot expand {} kv heads to {} query heads",
            config.n_kv_heads, config.n_q_heads
        )));
    }
    if values.len() != config.n_kv_heads {
        return Err(Error::Shape(format!(
            "expected {} kv heads, got {}",
            config.n_kv_heads,
            values.len()
        )));
    }
    let group = config.group_size();
    Ok(values
        .iter()
        .flat_map(|m| std::iter::repeat_n(m.clone(), group))
        .collect())
}

/// Per-head attention weights, value states and head outputs for one sequence.
///
/// Tensors are stored layer-major: `[layer][q_head][position][...]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTrace<T> {
    config: ModelConfig,
    seq_len: usize,
    sequence_id: String,
    attn: Vec<T>,
    values: Vec<T>,
    head_out: Vec<T>,
    padding_mask: Vec<bool>,
}

/// One head's data restricted to the unpadded positions.
#[derive(Debug, Clone)]
pub struct HeadSlice<'a, T: Clone> {
    /// Number of real tokens.
    pub n: usize,
    pub d_head: usize,
    /// `n × n`, row-major.
    pub attn: Cow<'a, [T]>,
    /// `n × d_head`, row-major.
    pub values: Cow<'a, [T]>,
    /// `n × d_head`, row-major.
    pub head_out: Cow<'a, [T]>,
}

impl<T: Scalar> HeadSlice<'_, T> {
    pub fn attn_row(&self, i: usize) -> &[T] {
        &self.attn[i * self.n..(i + 1) * self.n]
    }

    pub fn value_row(&self, i: usize) -> &[T] {
        &self.values[i * self.d_head..(i + 1) * self.d_head]
    }

    pub fn head_out_row(&self, i: usize) -> &[T] {
        &self.head_out[i * self.d_head..(i + 1) * self.d_head]
    }
}

impl<T: Scalar> AttentionTrace<T> {
    /// Builds and validates a trace. When `head_out` is `None` it is computed as `A·V`.
    pub fn new(
        config: ModelConfig,
        sequence_id: impl Into<String>,
        attn: Vec<T>,
        values: Vec<T>,
        head_out: Option<Vec<T>>,
        padding_mask: Vec<bool>,
    ) -> Result<Self> {
        config.validate()?;
        let n = padding_mask.len();
        let heads = config.total_heads();
        if n == 0 {
            return Err(Error::Validation(
                "sequence length must be at least 1".into(),
            ));
        }
        if attn.len() != heads * n * n {
            return Err(Error::Shape(format!(
                "attn holds {} values, expected {}",
                attn.len(),
                heads * n * n
            )));
        }
        if values.len() != heads * n * config.d_head {
            return Err(Error::Shape(format!(
                "values hold {} values, expected {}",
                values.len(),
                heads * n * config.d_head
            )));
        }
        let recompute = head_out.is_none();
        let head_out = match head_out {
            Some(z) => {
                if z.len() != values.len() {
                    return Err(Error::Shape(format!(
                        "head_out holds {} values, expected {}",
                        z.len(),
                        values.len()
                    )));
                }
                z
            }
            None => Vec::new(),
        };
        let mut trace = Self {
            config,
            seq_len: n,
            sequence_id: sequence_id.into(),
            attn,
            values,
            head_out,
            padding_mask,
        };
        if recompute {
            trace.head_out = trace.compute_head_outputs();
        }
        trace.validate()?;
        Ok(trace)
    }

    /// Construction path for traces produced internally whose invariants hold by construction.
    pub(crate) fn from_parts_unchecked(
        config: ModelConfig,
        sequence_id: String,
        attn: Vec<T>,
        values: Vec<T>,
        head_out: Vec<T>,
        padding_mask: Vec<bool>,
    ) -> Self {
        let seq_len = padding_mask.len();
        debug_assert_eq!(attn.len(), config.total_heads() * seq_len * seq_len);
        Self {
            config,
            seq_len,
            sequence_id,
            attn,
            values,
            head_out,
            padding_mask,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn sequence_id(&self) -> &str {
        &self.sequence_id
    }

    pub fn with_sequence_id(mut self, id: impl Into<String>) -> Self {
        self.sequence_id = id.into();
        self
    }

    pub fn padding_mask(&self) -> &[bool] {
        &self.padding_mask
    }

    pub fn unpadded_positions(&self) -> Vec<usize> {
        (0..self.seq_len)
            .filter(|&i| self.padding_mask[i])
            .collect()
    }

    pub fn n_unpadded(&self) -> usize {
        self.padding_mask.iter().filter(|&&m| m).count()
    }

    fn head_index(&self, layer: usize, head: usize) -> usize {
        assert!(
            layer < self.config.n_layers && head < self.config.n_q_heads,
            "head ({layer},{head}) out of range"
        );
        layer * self.config.n_q_heads + head
    }

    /// Full `N × N` attention matrix for one head, including padded rows/columns.
    pub fn attn(&self, layer: usize, head: usize) -> &[T] {
        let n = self.seq_len;
        let k = self.head_index(layer, head);
        &self.attn[k * n * n..(k + 1) * n * n]
    }

    pub fn values(&self, layer: usize, head: usize) -> &[T] {
        let span = self.seq_len * self.config.d_head;
        let k = self.head_index(layer, head);
        &self.values[k * span..(k + 1) * span]
    }

    pub fn head_out(&self, layer: usize, head: usize) -> &[T] {
        let span = self.seq_len * self.config.d_head;
        let k = self.head_index(layer, head);
        &self.head_out[k * span..(k + 1) * span]
    }

    pub fn attn_all(&self) -> &[T] {
        &self.attn
    }

    pub fn values_all(&self) -> &[T] {
        &self.values
    }

    pub fn head_out_all(&self) -> &[T] {
        &self.head_out
    }

    /// Multiplies every value state and head output of `layer` by `factor`.
    pub fn scale_layer_values(&mut self, layer: usize, factor: T) {
        let span = self.config.n_q_heads * self.seq_len * self.config.d_head;
        for v in &mut self.values[layer * span..(layer + 1) * span] {
            *v = *v * factor;
        }
        for v in &mut self.head_out[layer * span..(layer + 1) * span] {
            *v = *v * factor;
        }
    }

    /// One head restricted to unpadded positions; borrows when nothing is padded.
    pub fn head_slice(&self, layer: usize, head: usize) -> HeadSlice<'_, T> {
        let d = self.config.d_head;
        let (a, v, z) = (
            self.attn(layer, head),
            self.values(layer, head),
            self.head_out(layer, head),
        );
        if self.padding_mask.iter().all(|&m| m) {
            return HeadSlice {
                n: self.seq_len,
                d_head: d,
                attn: Cow::Borrowed(a),
                values: Cow::Borrowed(v),
                head_out: Cow::Borrowed(z),
            };
        }
        let keep = self.unpadded_positions();
        let n = self.seq_len;
        let mut attn = Vec::with_capacity(keep.len() * keep.len());
        for &i in &keep {
            attn.extend(keep.iter().map(|&j| a[i * n + j]));
        }
        let gather = |src: &[T]| {
            keep.iter()
                .flat_map(|&i| src[i * d..(i + 1) * d].iter().copied())
                .collect::<Vec<_>>()
        };
        HeadSlice {
            n: keep.len(),
            d_head: d,
            attn: Cow::Owned(attn),
            values: Cow::Owned(gather(v)),
            head_out: Cow::Owned(gather(z)),
        }
    }

    fn compute_head_outputs(&self) -> Vec<T> {
        let (n, d) = (self.seq_len, self.config.d_head);
        let mut out = vec![T::zero(); self.values.len()];
        for k in 0..self.config.total_heads() {
            let a = Mat::from_vec(n, n, self.attn[k * n * n..(k + 1) * n * n].to_vec());
            let v = Mat::from_vec(n, d, self.values[k * n * d..(k + 1) * n * d].to_vec());
            out[k * n * d..(k + 1) * n * d].copy_from_slice(a.matmul(&v).as_slice());
        }
        out
    }

    /// Checks every trace invariant: causal row-stochastic attention over the
    /// unpadded prefix, zeroed padding, finiteness, and `A·V ≈ Z`.
    pub fn validate(&self) -> Result<()> {
        let (n, d) = (self.seq_len, self.config.d_head);
        if self.n_unpadded() == 0 {
            return Err(Error::Validation("trace has no unpadded positions".into()));
        }
        for (name, data) in [
            ("attn", &self.attn),
            ("values", &self.values),
            ("head_out", &self.head_out),
        ] {
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(name.into()));
            }
        }
        let expected = self.compute_head_outputs();
        for layer in 0..self.config.n_layers {
            for head in 0..self.config.n_q_heads {
                let a = self.attn(layer, head);
                let v = self.values(layer, head);
                for i in 0..n {
                    let row = &a[i * n..(i + 1) * n];
                    if !self.padding_mask[i] {
                        if row.iter().any(|&w| w != T::zero()) {
                            return Err(Error::Validation(format!(
                                "layer {layer} head {head}: padded row {i} has non-zero attention"
                            )));
                        }
                        if v[i * d..(i + 1) * d].iter().any(|&x| x != T::zero()) {
                            return Err(Error::Validation(format!(
                                "layer {layer} head {head}: padded position {i} has a non-zero value vector"
                            )));
                        }
                        continue;
                    }
                    let mut sum = 0.0;
                    for (j, &w) in row.iter().enumerate() {
                        let w = w.as_f64();
                        if !(0.0..=1.0 + ROW_SUM_TOLERANCE).contains(&w) {
                            return Err(Error::Validation(format!(
                                "layer {layer} head {head}: weight A[{i},{j}] = {w} outside [0,1]"
                            )));
                        }
                        if (j > i || !self.padding_mask[j]) && w != 0.0 {
                            return Err(Error::Validation(format!(
                                "layer {layer} head {head}: non-zero weight A[{i},{j}] on a future or padded key"
                            )));
                        }
                        sum += w;
                    }
                    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                        return Err(Error::Validation(format!(
                            "layer {layer} head {head}: row {i} sums to {sum}, not 1"
                        )));
                    }
                }
                let z = self.head_out(layer, head);
                let span = n * d;
                let k = layer * self.config.n_q_heads + head;
                let gap = z
                    .iter()
                    .zip(&expected[k * span..(k + 1) * span])
                    .fold(0.0f64, |m, (&a, &b)| m.max((a.as_f64() - b.as_f64()).abs()));
                if gap > HEAD_OUTPUT_TOLERANCE {
                    return Err(Error::Validation(format!(
                        "layer {layer} head {head}: head outputs differ from A·V by {gap:e}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> AttentionTrace<U> {
        let cast = |v: &[T]| v.iter().map(|x| U::of(x.as_f64())).collect();
        AttentionTrace {
            config: self.config,
            seq_len: self.seq_len,
            sequence_id: self.sequence_id.clone(),
            attn: cast(&self.attn),
            values: cast(&self.values),
            head_out: cast(&self.head_out),
            padding_mask: self.padding_mask.clone(),
        }
    }

    /// Encodes the trace in the named-tensor container.
    pub fn to_container(&self, extra_meta: &BTreeMap<String, String>) -> Result<Container> {
        let (l, h, n, d) = (
            self.config.n_layers,
            self.config.n_q_heads,
            self.seq_len,
            self.config.d_head,
        );
        let f32s = |v: &[T]| v.iter().map(|x| x.as_f32()).collect::<Vec<f32>>();
        let mut c = Container::new();
        c.insert("attn", vec![l, h, n, n], f32s(&self.attn))?;
        c.insert("values", vec![l, h, n, d], f32s(&self.values))?;
        c.insert("head_out", vec![l, h, n, d], f32s(&self.head_out))?;
        c.insert(
            "padding_mask",
            vec![n],
            self.padding_mask
                .iter()
                .map(|&m| if m { 1.0 } else { 0.0 })
                .collect(),
        )?;
        for (k, v) in extra_meta {
            c.set_meta(k.clone(), v);
        }
        self.config.write_meta(&mut c);
        c.set_meta("sequence_id", &self.sequence_id);
        Ok(c)
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let config = ModelConfig::from_meta(c)?;
        let sequence_id = c.meta("sequence_id").unwrap_or("").to_string();
        let mask = c.require("padding_mask")?;
        if mask.shape.len() != 1 {
            return Err(Error::Shape(format!(
                "padding_mask must be 1-D, got {:?}",
                mask.shape
            )));
        }
        let n = mask.shape[0];
        let padding_mask = mask
            .data
            .iter()
            .map(|&m| match m {
                1.0 => Ok(true),
                0.0 => Ok(false),
                other => Err(Error::Format(format!(
                    "padding_mask entries must be 0 or 1, got {other}"
                ))),
            })
            .collect::<Result<Vec<_>>>()?;
        let (l, h, d) = (config.n_layers, config.n_q_heads, config.d_head);
        let check = |name: &str, want: Vec<usize>| -> Result<Vec<T>> {
            let t = c.require(name)?;
            if t.shape != want {
                return Err(Error::Shape(format!(
                    "tensor `{name}` has shape {:?}, config implies {want:?}",
                    t.shape
                )));
            }
            Ok(t.data.iter().map(|&x| T::of(x as f64)).collect())
        };
        let attn = check("attn", vec![l, h, n, n])?;
        let values = check("values", vec![l, h, n, d])?;
        let head_out = match c.get("head_out") {
            Some(_) => Some(check("head_out", vec![l, h, n, d])?),
            None => None,
        };
        Self::new(config, sequence_id, attn, values, head_out, padding_mask)
    }
}

/// Writes `trace` to `sink` as a container; identical traces give identical bytes.
pub fn write_trace<T: Scalar, W: Write>(trace: &AttentionTrace<T>, sink: W) -> Result<()> {
    trace.to_container(&BTreeMap::new())?.write_to(sink)
}

/// Reads and validates a trace container, recomputing head outputs when absent.
pub fn read_trace<T: Scalar, R: Read>(source: R) -> Result<AttentionTrace<T>> {
    AttentionTrace::from_container(&Container::read_from(source)?)
}

/// Why a normalized score fell back to 1.0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DegenerateFlag {
    /// Layer mean was zero; every head in the layer was set to 1.0.
    ZeroLayerMean { layer: usize },
    /// Head's mean per-position output norm was zero.
    ZeroHeadMean { layer: usize, head: usize },
}

/// Per-head scores for one sequence under one score function.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix<T> {
    pub score_fn: ScoreFn,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Layer-major: `values[layer * n_heads + head]`.
    pub values: Vec<T>,
    pub sequence_id: String,
    pub degenerate: Vec<DegenerateFlag>,
}

impl<T: Scalar> ScoreMatrix<T> {
    pub fn get(&self, layer: usize, head: usize) -> T {
        self.values[layer * self.n_heads + head]
    }

    pub fn layer(&self, layer: usize) -> &[T] {
        &self.values[layer * self.n_heads..(layer + 1) * self.n_heads]
    }

    pub fn matches(&self, config: &ModelConfig) -> bool {
        self.n_layers == config.n_layers && self.n_heads == config.n_q_heads
    }

    /// CSV with one row per head and one column per layer.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("head");
        for l in 0..self.n_layers {
            out.push_str(&format!(",layer_{l}"));
        }
        out.push('\n');
        for h in 0..self.n_heads {
            out.push_str(&h.to_string());
            for l in 0..self.n_layers {
                out.push_str(&format!(",{}", self.get(l, h)));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskProvenance {
    Policy(ThresholdPolicy),
    Random { fraction: f64, seed: u64 },
    Explicit,
}

/// Heads to zero during one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMask {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Layer-major: `flags[layer * n_heads + head]`.
    pub flags: Vec<bool>,
    pub provenance: MaskProvenance,
}

impl HeadMask {
    pub fn none(config: &ModelConfig) -> Self {
        Self::filled(config, false)
    }

    pub fn all(config: &ModelConfig) -> Self {
        Self::filled(config, true)
    }

    fn filled(config: &ModelConfig, v: bool) -> Self {
        Self {
            n_layers: config.n_layers,
            n_heads: config.n_q_heads,
            flags: vec![v; config.total_heads()],
            provenance: MaskProvenance::Explicit,
        }
    }

    pub fn from_heads(config: &ModelConfig, heads: &[(usize, usize)]) -> Result<Self> {
        let mut m = Self::none(config);
        for &(l, h) in heads {
            if l >= config.n_layers || h >= config.n_q_heads {
                return Err(Error::OutOfRange(format!("head ({l},{h})")));
            }
            m.set(l, h, true);
        }
        Ok(m)
    }

    pub fn get(&self, layer: usize, head: usize) -> bool {
        self.flags[layer * self.n_heads + head]
    }

    pub fn set(&mut self, layer: usize, head: usize, v: bool) {
        self.flags[layer * self.n_heads + head] = v;
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn total(&self) -> usize {
        self.flags.len()
    }

    pub fn flagged(&self) -> Vec<(usize, usize)> {
        (0..self.n_layers)
            .flat_map(|l| (0..self.n_heads).map(move |h| (l, h)))
            .filter(|&(l, h)| self.get(l, h))
            .collect()
    }

    pub fn matches(&self, config: &ModelConfig) -> bool {
        self.n_layers == config.n_layers && self.n_heads == config.n_q_heads
    }

    pub fn same_shape(&self, other: &HeadMask) -> bool {
        self.n_layers == other.n_layers && self.n_heads == other.n_heads
    }
}
