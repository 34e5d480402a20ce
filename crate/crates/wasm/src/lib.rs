//! wasm-bindgen exports behind `www/index.html`.

pub mod demo;

use moqae_core::router::{ExpertSet, PlanConfig};
use wasm_bindgen::prelude::*;

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct RoundTrip {
    inner: demo::RoundTripResult,
}

#[wasm_bindgen]
impl RoundTrip {
    #[wasm_bindgen(getter)]
    pub fn original(&self) -> Vec<f64> {
        self.inner.original.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn restored(&self) -> Vec<f64> {
        self.inner.restored.clone()
    }

    #[wasm_bindgen(getter, js_name = maxAbsError)]
    pub fn max_abs_error(&self) -> f64 {
        self.inner.max_abs_error
    }

    #[wasm_bindgen(getter, js_name = packedBytes)]
    pub fn packed_bytes(&self) -> usize {
        self.inner.packed_bytes
    }

    #[wasm_bindgen(getter, js_name = fp16Bytes)]
    pub fn fp16_bytes(&self) -> usize {
        self.inner.fp16_bytes
    }
}

/// Quantizes a seeded signal of `len` values at `bits` and restores it.
#[wasm_bindgen(js_name = quantizeRoundTrip)]
pub fn quantize_round_trip(len: usize, bits: u8, group_size: usize, seed: u32) -> Result<RoundTrip, JsError> {
    let values = demo::sample_signal(len, seed.into());
    let inner = demo::round_trip(&values, 1, len, bits, group_size).map_err(js_err)?;
    Ok(RoundTrip { inner })
}

/// Flat `(length, fp16 bytes, quantized bytes)` triples.
#[wasm_bindgen(js_name = memoryCurve)]
pub fn memory_curve(
    shape: &str,
    max_len: usize,
    points: usize,
    bits: u8,
    metadata_group: usize,
) -> Result<Vec<f64>, JsError> {
    let shape = demo::shape_preset(shape).ok_or_else(|| js_err(format!("unknown shape {shape}")))?;
    let meta = (metadata_group > 0).then_some(metadata_group);
    demo::memory_curve(&shape, max_len, points, bits, meta).map_err(js_err)
}

#[wasm_bindgen]
pub struct StrategyView {
    inner: demo::Heatmap,
}

#[wasm_bindgen]
impl StrategyView {
    #[wasm_bindgen(getter)]
    pub fn blocks(&self) -> usize {
        self.inner.blocks
    }

    #[wasm_bindgen(getter)]
    pub fn chunks(&self) -> usize {
        self.inner.chunks
    }

    #[wasm_bindgen(getter)]
    pub fn bits(&self) -> Vec<u8> {
        self.inner.bits.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn origins(&self) -> Vec<u8> {
        self.inner.origins.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn invocations(&self) -> usize {
        self.inner.invocations
    }

    #[wasm_bindgen(getter, js_name = avgBits)]
    pub fn avg_bits(&self) -> f64 {
        self.inner.avg_bits
    }
}

/// Routing plan of a random router over `blocks` blocks of `seq_len` tokens.
#[wasm_bindgen(js_name = strategyHeatmap)]
pub fn strategy_heatmap(
    seq_len: usize,
    blocks: usize,
    chunk_size: usize,
    rf: bool,
    rs_group_size: usize,
    experts: &str,
    seed: u32,
) -> Result<StrategyView, JsError> {
    let bits = experts
        .split(',')
        .map(|b| b.trim().parse::<u8>().map_err(|_| js_err(format!("bad expert bit-width {b:?}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let experts = ExpertSet::new(bits).map_err(js_err)?;
    let cfg = PlanConfig { chunk_size, rf, rs_group_size };
    let inner = demo::strategy_heatmap(seq_len, blocks, cfg, &experts, seed.into()).map_err(js_err)?;
    Ok(StrategyView { inner })
}
