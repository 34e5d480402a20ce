//! Plain-Rust halves of the browser operations, testable off the browser.

use moqae_core::numerics::Matrix;
use moqae_core::quant::{
    dequantize, kv_cache_bytes, packed_bytes, quantize_chunk, BitsPlan, MetadataAccounting, ModelShape, QuantSpec,
};
use moqae_core::router::{plan_strategy, ExpertSet, PlanConfig, RouterParams};
use moqae_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct RoundTripResult {
    pub original: Vec<f64>,
    pub restored: Vec<f64>,
    pub max_abs_error: f64,
    pub packed_bytes: usize,
    pub fp16_bytes: usize,
}

/// Quantizes a `rows × cols` row-major slice and restores it.
pub fn round_trip(values: &[f64], rows: usize, cols: usize, bits: u8, group_size: usize) -> Result<RoundTripResult> {
    let x = Matrix::from_vec(rows, cols, values.to_vec())?;
    let packed = quantize_chunk(&x, QuantSpec::new(bits, group_size)?)?;
    let restored = dequantize(&packed)?;
    Ok(RoundTripResult {
        original: values.to_vec(),
        max_abs_error: x.max_abs_diff(&restored),
        restored: restored.data().to_vec(),
        packed_bytes: packed_bytes(&packed, true),
        fp16_bytes: rows * cols * 2,
    })
}

/// A smooth seeded signal with a few outliers, the kind of row a K cache holds.
pub fn sample_signal(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let phase: f64 = rng.gen_range(0.0..6.28);
    (0..len)
        .map(|i| {
            let t = i as f64 / len.max(1) as f64;
            let spike = if rng.gen_bool(0.03) { rng.gen_range(-3.0..3.0) } else { 0.0 };
            (9.0 * t + phase).sin() + 0.3 * (31.0 * t).cos() + rng.gen_range(-0.1..0.1) + spike
        })
        .collect()
}

pub fn shape_preset(name: &str) -> Option<ModelShape> {
    match name {
        "llama2-7b" => Some(ModelShape::llama2_7b()),
        "llama2-13b" => Some(ModelShape::llama2_13b()),
        _ => None,
    }
}

/// KV-cache bytes at `points` evenly spaced lengths up to `max_len`, as
/// interleaved `(length, fp16 bytes, bytes at bits)` triples.
pub fn memory_curve(
    shape: &ModelShape,
    max_len: usize,
    points: usize,
    bits: u8,
    metadata_group: Option<usize>,
) -> Result<Vec<f64>> {
    let meta = metadata_group.map(|group_size| MetadataAccounting { group_size });
    let points = points.max(2);
    let mut out = Vec::with_capacity(points * 3);
    for i in 0..points {
        let len = max_len * i / (points - 1);
        out.push(len as f64);
        out.push(kv_cache_bytes(shape, len, BitsPlan::Uniform(16), None)? as f64);
        out.push(kv_cache_bytes(shape, len, BitsPlan::Uniform(bits), meta)? as f64);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    pub blocks: usize,
    pub chunks: usize,
    /// Row-major `blocks × chunks` bit-widths.
    pub bits: Vec<u8>,
    /// Row-major origin codes: 0 routed, 1 frozen, 2 residual, 3 shared.
    pub origins: Vec<u8>,
    pub invocations: usize,
    pub avg_bits: f64,
}

/// Strategy map from a seeded random router fed drifting random chunks.
pub fn strategy_heatmap(seq_len: usize, blocks: usize, cfg: PlanConfig, experts: &ExpertSet, seed: u64) -> Result<Heatmap> {
    const DIM: usize = 16;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let router = RouterParams::init(DIM, experts.len(), &mut rng);
    let (map, invocations) = plan_strategy(seq_len, blocks, cfg, experts, |_, _, range| {
        let bias: f64 = rng.gen_range(-1.5..1.5);
        let chunk = Matrix::random_normal(range.len(), DIM, 1.0, &mut rng).map(|v| v + bias);
        moqae_core::router::router_forward(&router, &chunk)
    })?;
    let chunks = map.blocks.first().map_or(0, Vec::len);
    let mut bits = Vec::with_capacity(blocks * chunks);
    let mut origins = Vec::with_capacity(blocks * chunks);
    for e in map.blocks.iter().flatten() {
        bits.push(e.bits);
        origins.push(e.origin.code());
    }
    let avg_bits = if seq_len == 0 { 16.0 } else { moqae_core::quant::average_bitwidth(&map, None)? };
    Ok(Heatmap { blocks, chunks, bits, origins, invocations, avg_bits })
}
