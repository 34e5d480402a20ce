//! Byte-level toy decoder-only transformer with a mixed-precision KV cache.
//!
//! Prefill runs the model block by block. In each block the block's
//! normalized input is cut into chunks, each routable chunk is sent to the
//! router (subject to freezing and sharing), and the block's K/V rows for
//! that chunk are stored at the voted bit-width. Attention always runs on the
//! dequantized K/V. Trailing tokens that do not fill a chunk stay in a
//! half-precision tail until decoding fills it.

use std::hash::{Hash, Hasher};

use half::f16;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{argmax, dot, matmul, silu, softmax_in_place, Matrix};
use crate::quant::{
    dequantize, packed_bytes, quantize_chunk, ModelShape, PackedTensor, QuantSpec, DEFAULT_GROUP_SIZE,
};
use crate::router::{Origin, PlanConfig, RoutingPolicy, StrategyEntry, StrategyMap, StrategyPlanner};

pub const VOCAB: usize = 256;
const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub max_seq: usize,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self { layers: 4, heads: 4, head_dim: 16, ffn_dim: 256, max_seq: 512 }
    }
}

impl ToyConfig {
    pub fn dim(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape { layers: self.layers, heads: self.heads, head_dim: self.head_dim }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.head_dim == 0 || self.ffn_dim == 0 || self.max_seq == 0 {
            return Err(Error::Parameter(format!("degenerate model config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub attn_norm: Vec<f64>,
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ffn_norm: Vec<f64>,
    pub w_up: Matrix,
    pub w_down: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyTransformer {
    pub config: ToyConfig,
    pub tok_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<LayerWeights>,
    pub final_norm: Vec<f64>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

/// Where a block's freshly projected K/V go before attention reads them.
pub trait KvStore {
    /// Receives block `layer`'s normalized input and its K/V projections for
    /// the whole prompt; returns the K/V attention should actually use.
    fn store(&mut self, layer: usize, normed: &Matrix, k: Matrix, v: Matrix) -> Result<(Matrix, Matrix)>;
}

/// Keeps K/V at full precision.
pub struct FullPrecision;

impl KvStore for FullPrecision {
    fn store(&mut self, _: usize, _: &Matrix, k: Matrix, v: Matrix) -> Result<(Matrix, Matrix)> {
        Ok((k, v))
    }
}

pub struct ForwardPass {
    /// `T×VOCAB` next-token logits.
    pub logits: Matrix,
    /// Final normalized hidden states, the readout's input.
    pub features: Matrix,
    /// Per layer, per head `T×T` attention weights (only when requested).
    pub attention: Vec<Vec<Matrix>>,
}

fn rms_norm(x: &Matrix, gain: &[f64]) -> Matrix {
    let mut out = x.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
        let inv = 1.0 / (ms + NORM_EPS).sqrt();
        for (v, g) in row.iter_mut().zip(gain) {
            *v *= inv * g;
        }
    }
    out
}

fn round_to_half(m: &Matrix) -> Matrix {
    m.map(|v| f16::from_f64(v).to_f64())
}

impl ToyTransformer {
    /// Seeded random weights, except for one previous-token head in layer 0.
    /// The readout starts near zero, so an untrained model predicts an almost
    /// uniform byte distribution.
    pub fn seeded(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim();
        let f = config.ffn_dim;
        let sd = 1.0 / (d as f64).sqrt();
        let tok_emb = Matrix::random_normal(VOCAB, d, 1.0, &mut rng);
        let pos_emb = Matrix::random_normal(config.max_seq, d, 0.5, &mut rng);
        let layers = (0..config.layers)
            .map(|_| LayerWeights {
                attn_norm: vec![1.0; d],
                wq: Matrix::random_normal(d, d, sd, &mut rng),
                wk: Matrix::random_normal(d, d, sd, &mut rng),
                wv: Matrix::random_normal(d, d, sd, &mut rng),
                wo: Matrix::random_normal(d, d, 0.125 * sd, &mut rng),
                ffn_norm: vec![1.0; d],
                w_up: Matrix::random_normal(d, f, sd, &mut rng),
                w_down: Matrix::random_normal(f, d, 0.5 / (f as f64).sqrt(), &mut rng),
            })
            .collect();
        let w_out = Matrix::random_normal(d, VOCAB, 0.02, &mut rng);
        let mut model =
            Self { config, tok_emb, pos_emb, layers, final_norm: vec![1.0; d], w_out, b_out: vec![0.0; VOCAB] };
        model.install_previous_token_head(&mut rng);
        Ok(model)
    }

    /// Turns layer 0 head 0 into a head that attends to the previous token.
    ///
    /// The last `p` embedding dims carry sinusoidal positions only. The head's
    /// query rotates them one step back so its dot product with the key peaks
    /// at `t - 1`; its value reads the token part of the embedding.
    fn install_previous_token_head(&mut self, rng: &mut ChaCha8Rng) {
        const SHARPNESS: f64 = 8.0;
        const VALUE_SCALE: f64 = 0.2;
        let d = self.dim();
        let hd = self.config.head_dim;
        let p = 16usize.min(hd).min(d / 4) & !1;
        if p == 0 {
            return;
        }
        let base = d - p;
        let omegas: Vec<f64> = (0..p / 2).map(|f| 2.9 * 0.7f64.powi(f as i32)).collect();
        for t in 0..self.config.max_seq {
            let row = self.pos_emb.row_mut(t);
            for (f, w) in omegas.iter().enumerate() {
                row[base + 2 * f] = (w * t as f64).cos();
                row[base + 2 * f + 1] = (w * t as f64).sin();
            }
        }
        for v in 0..VOCAB {
            self.tok_emb.row_mut(v)[base..].fill(0.0);
        }
        let l0 = &mut self.layers[0];
        for r in 0..d {
            for c in 0..hd {
                l0.wq.set(r, c, 0.0);
                l0.wk.set(r, c, 0.0);
            }
        }
        for (f, w) in omegas.iter().enumerate() {
            let (cos, sin) = (SHARPNESS * w.cos(), SHARPNESS * w.sin());
            let (a, b) = (base + 2 * f, base + 2 * f + 1);
            l0.wq.set(a, 2 * f, cos);
            l0.wq.set(b, 2 * f, sin);
            l0.wq.set(a, 2 * f + 1, -sin);
            l0.wq.set(b, 2 * f + 1, cos);
            l0.wk.set(a, 2 * f, 1.0);
            l0.wk.set(b, 2 * f + 1, 1.0);
        }
        let wv = Matrix::random_normal(base, hd, 1.0 / (base as f64).sqrt(), rng);
        let wo = Matrix::random_normal(hd, base, VALUE_SCALE / (hd as f64).sqrt(), rng);
        for r in 0..d {
            for c in 0..hd {
                l0.wv.set(r, c, if r < base { wv.get(r, c) } else { 0.0 });
            }
        }
        for r in 0..hd {
            for c in 0..d {
                l0.wo.set(r, c, if c < base { wo.get(r, c) } else { 0.0 });
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.config.dim()
    }

    /// Hash over every weight bit; equal checksums mean untouched weights.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        let mut feed = |s: &[f64]| s.iter().for_each(|v| v.to_bits().hash(&mut h));
        feed(self.tok_emb.data());
        feed(self.pos_emb.data());
        for l in &self.layers {
            feed(&l.attn_norm);
            for m in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w_up, &l.w_down] {
                feed(m.data());
            }
            feed(&l.ffn_norm);
        }
        feed(&self.final_norm);
        feed(self.w_out.data());
        feed(&self.b_out);
        h.finish()
    }

    fn check_tokens(&self, tokens: &[u8], start_pos: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty token sequence".into()));
        }
        if start_pos + tokens.len() > self.config.max_seq {
            return Err(Error::Input(format!(
                "sequence of {} tokens exceeds the model's {} positions",
                start_pos + tokens.len(),
                self.config.max_seq
            )));
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u8], start_pos: usize) -> Matrix {
        let d = self.dim();
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            let row = x.row_mut(i);
            for ((o, &e), &p) in row.iter_mut().zip(self.tok_emb.row(t as usize)).zip(self.pos_emb.row(start_pos + i)) {
                *o = e + p;
            }
        }
        x
    }

    /// Causal multi-head attention of `q` (rows at absolute positions
    /// `q_offset..`) against all rows of `k`/`v`.
    fn attend(&self, q: &Matrix, k: &Matrix, v: &Matrix, q_offset: usize, record: Option<&mut Vec<Matrix>>) -> Matrix {
        let (hd, heads) = (self.config.head_dim, self.config.heads);
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Matrix::zeros(q.rows(), q.cols());
        let mut weights = record.as_ref().map(|_| vec![Matrix::zeros(q.rows(), k.rows()); heads]);
        let mut scores = vec![0.0; k.rows()];
        for h in 0..heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..q.rows() {
                let visible = (q_offset + i + 1).min(k.rows());
                let qi = &q.row(i)[cols.clone()];
                for j in 0..visible {
                    scores[j] = dot(qi, &k.row(j)[cols.clone()]) * scale;
                }
                softmax_in_place(&mut scores[..visible]);
                let o = &mut out.row_mut(i)[cols.clone()];
                for j in 0..visible {
                    let w = scores[j];
                    for (acc, &vv) in o.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *acc += w * vv;
                    }
                }
                if let Some(ws) = weights.as_mut() {
                    ws[h].row_mut(i)[..visible].copy_from_slice(&scores[..visible]);
                }
            }
        }
        if let (Some(rec), Some(ws)) = (record, weights) {
            rec.extend(ws);
        }
        out
    }

    fn ffn(&self, layer: &LayerWeights, x: &mut Matrix) -> Result<()> {
        let hn = rms_norm(x, &layer.ffn_norm);
        let up = matmul(&hn, &layer.w_up)?.map(silu);
        *x = x.add(&matmul(&up, &layer.w_down)?)?;
        Ok(())
    }

    fn readout(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let features = rms_norm(x, &self.final_norm);
        let mut logits = matmul(&features, &self.w_out)?;
        for r in 0..logits.rows() {
            for (l, b) in logits.row_mut(r).iter_mut().zip(&self.b_out) {
                *l += b;
            }
        }
        Ok((logits, features))
    }

    /// Full forward pass from position 0 with K/V routed through `kv`.
    pub fn forward_with(&self, tokens: &[u8], kv: &mut dyn KvStore, record_attention: bool) -> Result<ForwardPass> {
        self.check_tokens(tokens, 0)?;
        let mut x = self.embed(tokens, 0);
        let mut attention = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let xn = rms_norm(&x, &layer.attn_norm);
            let q = matmul(&xn, &layer.wq)?;
            let k = matmul(&xn, &layer.wk)?;
            let v = matmul(&xn, &layer.wv)?;
            let (k, v) = kv.store(l, &xn, k, v)?;
            let mut rec = Vec::new();
            let att = self.attend(&q, &k, &v, 0, record_attention.then_some(&mut rec));
            if record_attention {
                attention.push(rec);
            }
            x = x.add(&matmul(&att, &layer.wo)?)?;
            self.ffn(layer, &mut x)?;
        }
        let (logits, features) = self.readout(&x)?;
        Ok(ForwardPass { logits, features, attention })
    }

    /// Quantization-free reference forward pass.
    pub fn forward(&self, tokens: &[u8]) -> Result<ForwardPass> {
        self.forward_with(tokens, &mut FullPrecision, false)
    }
}

/// Cache and chunking parameters shared by prefill, decode and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub chunk_size: usize,
    pub rf: bool,
    pub rs_group_size: usize,
    pub group_size: usize,
}

impl Default for CacheConfig {
    fn default() -> Self {
        Self { chunk_size: 32, rf: true, rs_group_size: 3, group_size: DEFAULT_GROUP_SIZE }
    }
}

impl CacheConfig {
    pub fn plan(&self) -> PlanConfig {
        PlanConfig { chunk_size: self.chunk_size, rf: self.rf, rs_group_size: self.rs_group_size }
    }

    pub fn validate(&self) -> Result<()> {
        self.plan().validate()?;
        if self.group_size == 0 {
            return Err(Error::Parameter("group_size must be positive".into()));
        }
        Ok(())
    }
}

/// One promoted chunk of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedChunk {
    pub entry: StrategyEntry,
    pub k: PackedTensor,
    pub v: PackedTensor,
}


#[derive(Clone, Debug, PartialEq)]
pub struct LayerCache {
    pub chunks: Vec<CachedChunk>,
    /// First position held by the half-precision tail.
    pub tail_start: usize,
    /// Router inputs of the tail rows, kept until the tail is promoted.
    tail_inputs: Matrix,
    /// Dequantized K/V of every cached position, chunks then tail.
    k_view: Matrix,
    v_view: Matrix,
}

impl LayerCache {
    fn new(dim: usize) -> Self {
        Self {
            chunks: Vec::new(),
            tail_start: 0,
            tail_inputs: Matrix::zeros(0, dim),
            k_view: Matrix::zeros(0, dim),
            v_view: Matrix::zeros(0, dim),
        }
    }

    pub fn len(&self) -> usize {
        self.k_view.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tail_len(&self) -> usize {
        self.len() - self.tail_start
    }

    pub fn keys(&self) -> &Matrix {
        &self.k_view
    }

    pub fn values(&self) -> &Matrix {
        &self.v_view
    }

    pub fn tail_keys(&self) -> Matrix {
        self.k_view.slice_rows(self.tail_start, self.len())
    }

    pub fn tail_values(&self) -> Matrix {
        self.v_view.slice_rows(self.tail_start, self.len())
    }

    fn push_chunk(&mut self, entry: StrategyEntry, k: &Matrix, v: &Matrix, group_size: usize) -> Result<()> {
        let spec = QuantSpec::new(entry.bits, group_size)?;
        let kp = quantize_chunk(k, spec)?;
        let vp = quantize_chunk(v, spec)?;
        let (kd, vd) = (dequantize(&kp)?, dequantize(&vp)?);
        let start = entry.start;
        if start == self.k_view.rows() {
            self.k_view.append_rows(&kd)?;
            self.v_view.append_rows(&vd)?;
        } else {
            for r in 0..kd.rows() {
                self.k_view.row_mut(start + r).copy_from_slice(kd.row(r));
                self.v_view.row_mut(start + r).copy_from_slice(vd.row(r));
            }
        }
        self.chunks.push(CachedChunk { entry, k: kp, v: vp });
        Ok(())
    }

    fn push_tail(&mut self, inputs: &Matrix, k: &Matrix, v: &Matrix) -> Result<()> {
        self.tail_inputs.append_rows(inputs)?;
        self.k_view.append_rows(&round_to_half(k))?;
        self.v_view.append_rows(&round_to_half(v))?;
        Ok(())
    }

    /// Bytes of packed chunks plus the half-precision tail.
    pub fn bytes(&self, include_metadata: bool) -> usize {
        let chunks: usize = self
            .chunks
            .iter()
            .map(|c| packed_bytes(&c.k, include_metadata) + packed_bytes(&c.v, include_metadata))
            .sum();
        chunks + 2 * self.tail_len() * self.k_view.cols() * 2
    }
}

/// Per-layer mixed-precision K/V storage for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedKVCache {
    layers: Vec<LayerCache>,
    strategy: StrategyMap,
    config: CacheConfig,
    router_invocations: usize,
}

impl MixedKVCache {
    fn empty(layers: usize, dim: usize, config: CacheConfig) -> Self {
        Self {
            layers: (0..layers).map(|_| LayerCache::new(dim)).collect(),
            strategy: StrategyMap {
                blocks: vec![Vec::new(); layers],
                chunk_size: config.chunk_size,
                rs_group_size: config.rs_group_size,
            },
            config,
            router_invocations: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    pub fn strategy(&self) -> &StrategyMap {
        &self.strategy
    }

    pub fn config(&self) -> &CacheConfig {
        &self.config
    }

    /// Router forward passes spent on this sequence so far.
    pub fn router_invocations(&self) -> usize {
        self.router_invocations
    }

    /// Byte-accurate size of everything the cache holds.
    pub fn live_bytes(&self, include_metadata: bool) -> usize {
        self.layers.iter().map(|l| l.bytes(include_metadata)).sum()
    }

    /// Checks that chunks, tail and strategy describe the same tiling.
    pub fn check_coherence(&self) -> Result<()> {
        let len = self.len();
        self.strategy.check_tiling(len)?;
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.len() != len {
                return Err(Error::Shape(format!("layer {l} holds {} rows, expected {len}", layer.len())));
            }
            if layer.tail_len() >= self.config.chunk_size {
                return Err(Error::Shape(format!("layer {l} tail of {} tokens was not promoted", layer.tail_len())));
            }
            let entries = &self.strategy.blocks[l];
            let routed = entries.iter().filter(|e| e.origin != Origin::ResidualFp16);
            if routed.clone().count() != layer.chunks.len() {
                return Err(Error::Shape(format!("layer {l}: chunk count disagrees with the strategy")));
            }
            for (c, e) in layer.chunks.iter().zip(routed) {
                if c.entry != *e || c.k.spec().bits != e.bits || c.v.spec().bits != e.bits {
                    return Err(Error::Shape(format!("layer {l}: chunk {:?} disagrees with {e:?}", c.entry)));
                }
            }
            if let Some(last) = entries.last().filter(|e| e.origin == Origin::ResidualFp16) {
                if last.start != layer.tail_start {
                    return Err(Error::Shape(format!("layer {l}: residual entry does not match the tail")));
                }
            } else if layer.tail_len() != 0 {
                return Err(Error::Shape(format!("layer {l}: tail without a residual entry")));
            }
        }
        Ok(())
    }

    /// Appends one token's K/V to `layer`'s tail, promoting the tail to a
    /// chunk once it is full.
    fn append(&mut self, layer: usize, input: &Matrix, k: &Matrix, v: &Matrix, policy: &RoutingPolicy) -> Result<()> {
        let pos = self.layers[layer].len();
        self.layers[layer].push_tail(input, k, v)?;
        let entries = &mut self.strategy.blocks[layer];
        match entries.last_mut() {
            Some(e) if e.origin == Origin::ResidualFp16 => e.end = pos + 1,
            _ => entries.push(StrategyEntry { start: pos, end: pos + 1, bits: 16, origin: Origin::ResidualFp16 }),
        }
        if self.layers[layer].tail_len() == self.config.chunk_size {
            self.promote_tail(layer, policy)?;
        }
        Ok(())
    }

    fn promote_tail(&mut self, layer: usize, policy: &RoutingPolicy) -> Result<()> {
        let plan = self.config.plan();
        let lc = &self.layers[layer];
        let (start, end) = (lc.tail_start, lc.len());
        let index = start / self.config.chunk_size;
        let (bits, origin) = if let Some(e) = plan.fixed_entry(index, start..end) {
            (e.bits, e.origin)
        } else if plan.is_leader(layer) {
            if policy.is_learned() {
                self.router_invocations += 1;
            }
            (policy.decide(index, &lc.tail_inputs)?.0, Origin::Routed)
        } else {
            let leader = self.strategy.leader_of(layer);
            let e = self.strategy.blocks[leader]
                .iter()
                .find(|e| e.start == start && e.end == end)
                .ok_or_else(|| Error::Shape(format!("leader block {leader} has no chunk {start}..{end}")))?;
            (e.bits, Origin::Shared)
        };
        let entry = StrategyEntry { start, end, bits, origin };
        let (k, v) = (lc.tail_keys(), lc.tail_values());
        let lc = &mut self.layers[layer];
        lc.push_chunk(entry.clone(), &k, &v, self.config.group_size)?;
        lc.tail_start = end;
        lc.tail_inputs = Matrix::zeros(0, lc.tail_inputs.cols());
        *self.strategy.blocks[layer].last_mut().expect("residual entry exists") = entry;
        Ok(())
    }
}

/// A routed chunk seen during prefill, kept for router training.
#[derive(Clone, Debug)]
pub struct RoutedChunk {
    pub block: usize,
    pub start: usize,
    pub end: usize,
    pub input: Matrix,
}

/// [`KvStore`] that plans the strategy block by block and builds the cache.
struct CacheBuilder<'a> {
    policy: &'a RoutingPolicy,
    planner: StrategyPlanner,
    cache: MixedKVCache,
    record: Option<Vec<RoutedChunk>>,
}

impl KvStore for CacheBuilder<'_> {
    fn store(&mut self, layer: usize, normed: &Matrix, k: Matrix, v: Matrix) -> Result<(Matrix, Matrix)> {
        let policy = self.policy;
        let record = &mut self.record;
        let learned = policy.is_learned();
        let before = self.planner.invocations();
        let entries = self
            .planner
            .plan_next_block(|index, range| {
                let chunk = normed.slice_rows(range.start, range.end);
                let bits = policy.decide(index, &chunk)?.0;
                if let Some(rec) = record.as_mut().filter(|_| learned) {
                    rec.push(RoutedChunk { block: layer, start: range.start, end: range.end, input: chunk });
                }
                Ok(bits)
            })?
            .to_vec();
        if learned {
            self.cache.router_invocations += self.planner.invocations() - before;
        }
        let lc = &mut self.cache.layers[layer];
        for e in &entries {
            let (k_rows, v_rows) = (k.slice_rows(e.start, e.end), v.slice_rows(e.start, e.end));
            if e.origin == Origin::ResidualFp16 {
                lc.tail_start = e.start;
                lc.push_tail(&normed.slice_rows(e.start, e.end), &k_rows, &v_rows)?;
            } else {
                lc.push_chunk(e.clone(), &k_rows, &v_rows, self.cache.config.group_size)?;
                lc.tail_start = e.end;
            }
        }
        self.cache.strategy.blocks[layer] = entries;
        Ok((lc.k_view.clone(), lc.v_view.clone()))
    }
}

pub struct PrefillOutput {
    /// `T×VOCAB` logits for every prompt position.
    pub logits: Matrix,
    pub cache: MixedKVCache,
    /// Router inputs of every routed chunk (only when requested).
    pub routed: Vec<RoutedChunk>,
}

impl PrefillOutput {
    /// Logits for the token after the prompt.
    pub fn last_logits(&self) -> &[f64] {
        self.logits.row(self.logits.rows() - 1)
    }

    pub fn strategy(&self) -> &StrategyMap {
        self.cache.strategy()
    }
}

fn prefill_inner(
    model: &ToyTransformer,
    tokens: &[u8],
    policy: &RoutingPolicy,
    config: CacheConfig,
    record: bool,
) -> Result<PrefillOutput> {
    config.validate()?;
    policy.validate(model.dim())?;
    model.check_tokens(tokens, 0)?;
    let mut builder = CacheBuilder {
        policy,
        planner: StrategyPlanner::new(config.plan(), tokens.len())?,
        cache: MixedKVCache::empty(model.config.layers, model.dim(), config),
        record: record.then(Vec::new),
    };
    let pass = model.forward_with(tokens, &mut builder, false)?;
    Ok(PrefillOutput { logits: pass.logits, cache: builder.cache, routed: builder.record.unwrap_or_default() })
}

/// Runs the prompt through the model, building the mixed-precision cache.
pub fn prefill(model: &ToyTransformer, tokens: &[u8], policy: &RoutingPolicy, config: CacheConfig) -> Result<PrefillOutput> {
    prefill_inner(model, tokens, policy, config, false)
}

/// Like [`prefill`], additionally returning every routed chunk's router input.
pub fn prefill_recording(
    model: &ToyTransformer,
    tokens: &[u8],
    policy: &RoutingPolicy,
    config: CacheConfig,
) -> Result<PrefillOutput> {
    prefill_inner(model, tokens, policy, config, true)
}

pub struct DecodeOutput {
    pub logits: Vec<f64>,
    /// Greedy choice.
    pub next_token: u8,
}

/// Feeds `token` at the next position, appending its K/V to the cache.
pub fn decode_step(
    model: &ToyTransformer,
    cache: &mut MixedKVCache,
    policy: &RoutingPolicy,
    token: u8,
) -> Result<DecodeOutput> {
    let pos = cache.len();
    model.check_tokens(&[token], pos)?;
    if cache.layers.len() != model.config.layers {
        return Err(Error::Shape("cache was built for a different model".into()));
    }
    let mut x = model.embed(&[token], pos);
    for (l, layer) in model.layers.iter().enumerate() {
        let xn = rms_norm(&x, &layer.attn_norm);
        let q = matmul(&xn, &layer.wq)?;
        let k = matmul(&xn, &layer.wk)?;
        let v = matmul(&xn, &layer.wv)?;
        cache.append(l, &xn, &k, &v, policy)?;
        let lc = &cache.layers[l];
        let att = model.attend(&q, &lc.k_view, &lc.v_view, pos, None);
        x = x.add(&matmul(&att, &layer.wo)?)?;
        model.ffn(layer, &mut x)?;
    }
    let (logits, _) = model.readout(&x)?;
    let logits = logits.into_vec();
    let next_token = argmax(&logits) as u8;
    Ok(DecodeOutput { logits, next_token })
}

/// Greedy generation: prefill `prompt`, then decode `steps` tokens.
pub fn generate(
    model: &ToyTransformer,
    prompt: &[u8],
    policy: &RoutingPolicy,
    config: CacheConfig,
    steps: usize,
) -> Result<(Vec<u8>, MixedKVCache)> {
    let pre = prefill(model, prompt, policy, config)?;
    let mut next = argmax(pre.last_logits()) as u8;
    let mut cache = pre.cache;
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        out.push(next);
        next = decode_step(model, &mut cache, policy, next)?.next_token;
    }
    Ok((out, cache))
}

/// Greedy generation with no KV quantization and no cache: every step
/// recomputes the full prefix.
pub fn generate_reference(model: &ToyTransformer, prompt: &[u8], steps: usize) -> Result<Vec<u8>> {
    let mut seq = prompt.to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let pass = model.forward(&seq)?;
        let next = argmax(pass.logits.row(seq.len() - 1)) as u8;
        out.push(next);
        seq.push(next);
    }
    Ok(out)
}

/// How sequences are evaluated: `None` disables KV quantization entirely.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    pub policy: Option<RoutingPolicy>,
    pub cache: CacheConfig,
}

impl Pipeline {
    pub fn full_precision() -> Self {
        Self { policy: None, cache: CacheConfig::default() }
    }
}

pub fn log_softmax_nll(logits: &[f64], target: u8) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    lse - logits[target as usize]
}

/// Teacher-forced NLL of `tokens[t+1]` given `tokens[..=t]`, for every `t`.
pub fn sequence_nll(model: &ToyTransformer, tokens: &[u8], pipeline: &Pipeline) -> Result<Vec<f64>> {
    let logits = match &pipeline.policy {
        None => model.forward(tokens)?.logits,
        Some(p) => prefill(model, tokens, p, pipeline.cache)?.logits,
    };
    Ok((0..tokens.len() - 1).map(|t| log_softmax_nll(logits.row(t), tokens[t + 1])).collect())
}

/// Non-overlapping evaluation windows of at most `window` tokens; a trailing
/// window shorter than two tokens is dropped.
pub fn windows(corpus: &[u8], window: usize) -> impl Iterator<Item = &[u8]> {
    corpus.chunks(window.max(2)).filter(|w| w.len() >= 2)
}

/// `exp` of the mean next-token NLL over `corpus`, evaluated in windows.
pub fn perplexity(model: &ToyTransformer, corpus: &[u8], pipeline: &Pipeline, window: usize) -> Result<f64> {
    if corpus.len() < 2 {
        return Err(Error::Data("perplexity needs at least two tokens".into()));
    }
    let window = window.min(model.config.max_seq);
    let mut total = 0.0;
    let mut count = 0usize;
    for w in windows(corpus, window) {
        let nll = sequence_nll(model, w, pipeline)?;
        total += nll.iter().sum::<f64>();
        count += nll.len();
    }
    Ok((total / count as f64).exp())
}

/// Mean attention mass on the first `k` key positions, averaged over heads
/// and query positions, from per-layer per-head attention matrices.
pub fn initial_attention_mass(attention: &[Vec<Matrix>], k: usize) -> Vec<f64> {
    attention
        .iter()
        .map(|heads| {
            let mut total = 0.0;
            let mut n = 0usize;
            for a in heads {
                for q in 0..a.rows() {
                    total += a.row(q)[..k.min(a.cols())].iter().sum::<f64>();
                    n += 1;
                }
            }
            total / n as f64
        })
        .collect()
}

/// Per-layer mean attention weight received by the first `k` positions.
pub fn attn_probe(model: &ToyTransformer, tokens: &[u8], k: usize) -> Result<Vec<f64>> {
    if k >= tokens.len() {
        return Err(Error::Parameter(format!("k={k} must be below the sequence length {}", tokens.len())));
    }
    let pass = model.forward_with(tokens, &mut FullPrecision, true)?;
    Ok(initial_attention_mass(&pass.attention, k))
}
