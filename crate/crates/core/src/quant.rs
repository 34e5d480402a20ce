//! Asymmetric uniform group quantization, bit-packed storage, and the
//! closed-form KV-cache memory model.
//!
//! Packed layout: each row's codes are packed little-endian within bytes
//! (element `j` of a row occupies bits `j*bits .. (j+1)*bits` of the row's
//! byte run, counting from bit 0 of the first byte) and every row starts on
//! a byte boundary. 16-bit tensors store raw IEEE half values, two bytes
//! per element, little-endian, with no scale/zero-point metadata.
//!
//! Groups of `group_size` consecutive elements in row-major order share one
//! scale and zero point; the final group may be short.

use half::f16;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::router::{StrategyMap, SUPPORTED_BITS};

pub const DEFAULT_GROUP_SIZE: usize = 32;
/// Bytes per stored scale or zero point (half precision).
pub const METADATA_BYTES_PER_VALUE: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantSpec {
    pub bits: u8,
    pub group_size: usize,
}

impl QuantSpec {
    pub fn new(bits: u8, group_size: usize) -> Result<Self> {
        let spec = Self { bits, group_size };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !SUPPORTED_BITS.contains(&self.bits) {
            return Err(Error::Parameter(format!("unsupported bit-width {}", self.bits)));
        }
        if self.group_size == 0 {
            return Err(Error::Parameter("group_size must be positive".into()));
        }
        Ok(())
    }

    pub fn is_passthrough(&self) -> bool {
        self.bits == 16
    }

    pub fn levels(&self) -> u32 {
        1u32 << self.bits
    }

    pub fn max_code(&self) -> u32 {
        self.levels() - 1
    }
}

/// Bit-packed quantized matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedTensor {
    rows: usize,
    cols: usize,
    spec: QuantSpec,
    codes: Vec<u8>,
    scales: Vec<f64>,
    zero_points: Vec<f64>,
}

fn row_stride(cols: usize, bits: u8) -> usize {
    (cols * bits as usize).div_ceil(8)
}

fn num_groups(len: usize, group_size: usize) -> usize {
    len.div_ceil(group_size)
}

impl PackedTensor {
    /// Reassembles a tensor from stored parts, validating the layout.
    pub fn from_parts(
        rows: usize,
        cols: usize,
        spec: QuantSpec,
        codes: Vec<u8>,
        scales: Vec<f64>,
        zero_points: Vec<f64>,
    ) -> Result<Self> {
        spec.validate().map_err(|e| Error::Format(e.to_string()))?;
        let stride = row_stride(cols, spec.bits);
        if codes.len() != rows * stride {
            return Err(Error::Format(format!(
                "{} code bytes for {rows}x{cols} at {} bits",
                codes.len(),
                spec.bits
            )));
        }
        let groups = if spec.is_passthrough() { 0 } else { num_groups(rows * cols, spec.group_size) };
        if scales.len() != groups || zero_points.len() != groups {
            return Err(Error::Format(format!(
                "expected {groups} scale/zero-point pairs, got {}/{}",
                scales.len(),
                zero_points.len()
            )));
        }
        if scales.iter().chain(&zero_points).any(|v| !v.is_finite()) || scales.iter().any(|&s| s <= 0.0) {
            return Err(Error::Format("invalid scale or zero point".into()));
        }
        Ok(Self { rows, cols, spec, codes, scales, zero_points })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn spec(&self) -> QuantSpec {
        self.spec
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f64] {
        &self.scales
    }

    pub fn zero_points(&self) -> &[f64] {
        &self.zero_points
    }

    pub fn num_groups(&self) -> usize {
        self.scales.len()
    }

    /// Unpacked code of element `(r, c)`. Meaningless for 16-bit tensors.
    pub fn code(&self, r: usize, c: usize) -> u32 {
        let bits = self.spec.bits as usize;
        let base = r * row_stride(self.cols, self.spec.bits);
        let bit = c * bits;
        let byte = self.codes[base + bit / 8];
        ((byte >> (bit % 8)) as u32) & self.spec.max_code()
    }

    /// Checks that the padding bits at the end of each row are zero, which is
    /// the only way a stored code can exceed its field.
    fn check_padding(&self) -> Result<()> {
        let used = self.cols * self.spec.bits as usize;
        if used % 8 == 0 {
            return Ok(());
        }
        let stride = row_stride(self.cols, self.spec.bits);
        let mask = !((1u16 << (used % 8)) - 1) as u8;
        for r in 0..self.rows {
            if self.codes[r * stride + stride - 1] & mask != 0 {
                return Err(Error::Format(format!("row {r}: code bits beyond the row's last element")));
            }
        }
        Ok(())
    }
}

/// Quantizes one group; returns `(scale, zero_point)` and writes codes.
fn quantize_group(values: &[f64], max_code: u32, codes: &mut Vec<u32>) -> (f64, f64) {
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi == lo {
        codes.extend(std::iter::repeat(0).take(values.len()));
        return (1.0, lo);
    }
    let scale = (hi - lo) / max_code as f64;
    codes.extend(
        values
            .iter()
            .map(|&v| ((v - lo) / scale).round().clamp(0.0, max_code as f64) as u32),
    );
    (scale, lo)
}

/// Asymmetric uniform group quantization of `x`.
pub fn quantize_chunk(x: &Matrix, spec: QuantSpec) -> Result<PackedTensor> {
    spec.validate()?;
    if !x.is_finite() {
        return Err(Error::Numeric("cannot quantize non-finite values".into()));
    }
    let (rows, cols) = x.shape();
    if spec.is_passthrough() {
        let mut codes = Vec::with_capacity(rows * cols * 2);
        for &v in x.data() {
            codes.extend_from_slice(&f16::from_f64(v).to_le_bytes());
        }
        return Ok(PackedTensor { rows, cols, spec, codes, scales: vec![], zero_points: vec![] });
    }

    let max_code = spec.max_code();
    let mut flat_codes = Vec::with_capacity(rows * cols);
    let mut scales = Vec::new();
    let mut zero_points = Vec::new();
    for group in x.data().chunks(spec.group_size) {
        let (s, z) = quantize_group(group, max_code, &mut flat_codes);
        scales.push(s);
        zero_points.push(z);
    }

    let bits = spec.bits as usize;
    let stride = row_stride(cols, spec.bits);
    let mut codes = vec![0u8; rows * stride];
    for r in 0..rows {
        let row_bytes = &mut codes[r * stride..(r + 1) * stride];
        for c in 0..cols {
            let bit = c * bits;
            row_bytes[bit / 8] |= (flat_codes[r * cols + c] as u8) << (bit % 8);
        }
    }
    Ok(PackedTensor { rows, cols, spec, codes, scales, zero_points })
}

/// `code·scale + zero_point` per element, or the stored half values at 16 bits.
pub fn dequantize(p: &PackedTensor) -> Result<Matrix> {
    let (rows, cols) = (p.rows, p.cols);
    if p.spec.is_passthrough() {
        let data = p
            .codes
            .chunks_exact(2)
            .map(|b| f16::from_le_bytes([b[0], b[1]]).to_f64())
            .collect();
        return Matrix::from_vec(rows, cols, data);
    }
    p.check_padding()?;
    let gs = p.spec.group_size;
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let g = (r * cols + c) / gs;
            data.push(p.code(r, c) as f64 * p.scales[g] + p.zero_points[g]);
        }
    }
    Matrix::from_vec(rows, cols, data)
}

/// Storage size of a packed tensor: per-row byte-aligned code bytes, plus
/// one half-precision scale and zero point per group when requested.
pub fn packed_bytes(p: &PackedTensor, include_metadata: bool) -> usize {
    let meta = if include_metadata { p.num_groups() * 2 * METADATA_BYTES_PER_VALUE } else { 0 };
    p.codes.len() + meta
}

/// Dimensions behind the KV-cache memory model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl ModelShape {
    pub const BYTES_PER_ELEM_FP16: usize = 2;

    pub fn new(layers: usize, heads: usize, head_dim: usize) -> Result<Self> {
        if layers == 0 || heads == 0 || head_dim == 0 {
            return Err(Error::Parameter("model shape dimensions must be positive".into()));
        }
        Ok(Self { layers, heads, head_dim })
    }

    /// Llama2-13B attention geometry.
    pub fn llama2_13b() -> Self {
        Self { layers: 40, heads: 40, head_dim: 128 }
    }

    pub fn llama2_7b() -> Self {
        Self { layers: 32, heads: 32, head_dim: 128 }
    }

    /// Elements of K (or V) per token per layer.
    pub fn kv_width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Bit assignment fed to [`kv_cache_bytes`].
#[derive(Clone, Copy, Debug)]
pub enum BitsPlan<'a> {
    Uniform(u8),
    Strategy(&'a StrategyMap),
}

/// Optional per-group metadata accounting for the memory model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MetadataAccounting {
    pub group_size: usize,
}

/// Bytes held by K and V across all layers for `seq_len` tokens.
///
/// Each quantized (sub-16-bit) chunk adds one half-precision scale/zero-point
/// pair per group when `metadata` is given; groups are counted per chunk the
/// same way [`quantize_chunk`] forms them.
pub fn kv_cache_bytes(
    shape: &ModelShape,
    seq_len: usize,
    plan: BitsPlan<'_>,
    metadata: Option<MetadataAccounting>,
) -> Result<u64> {
    let width = shape.kv_width() as u64;
    let meta_bytes = |tokens: usize, bits: u8| -> u64 {
        match metadata {
            Some(m) if bits < 16 => {
                2 * num_groups(tokens * shape.kv_width(), m.group_size) as u64
                    * 2
                    * METADATA_BYTES_PER_VALUE as u64
            }
            _ => 0,
        }
    };
    match plan {
        BitsPlan::Uniform(bits) => {
            let bits_total = shape.layers as u64 * seq_len as u64 * 2 * width * bits as u64;
            let mut total = bits_total.div_ceil(8);
            if metadata.is_some() && seq_len > 0 {
                total += shape.layers as u64 * meta_bytes(seq_len, bits);
            }
            Ok(total)
        }
        BitsPlan::Strategy(map) => {
            if map.num_blocks() != shape.layers {
                return Err(Error::Shape(format!(
                    "strategy has {} blocks, model has {} layers",
                    map.num_blocks(),
                    shape.layers
                )));
            }
            map.check_tiling(seq_len)
                .or_else(|e| if seq_len == 0 && map.blocks.iter().all(Vec::is_empty) { Ok(()) } else { Err(e) })?;
            let mut bits_total = 0u64;
            let mut meta = 0u64;
            for entries in &map.blocks {
                for e in entries {
                    bits_total += e.len() as u64 * 2 * width * e.bits as u64;
                    meta += meta_bytes(e.len(), e.bits);
                }
            }
            Ok(bits_total.div_ceil(8) + meta)
        }
    }
}

/// Token-weighted mean bit-width over every block of the strategy.
///
/// With `metadata`, each quantized token additionally carries
/// `2·16/group_size` bits per element for its scale and zero point.
pub fn average_bitwidth(strategy: &StrategyMap, metadata: Option<MetadataAccounting>) -> Result<f64> {
    let mut tokens = 0usize;
    let mut bits = 0.0f64;
    for e in strategy.blocks.iter().flatten() {
        tokens += e.len();
        let mut b = e.bits as f64;
        if let Some(m) = metadata {
            if e.bits < 16 {
                b += 2.0 * 16.0 / m.group_size as f64;
            }
        }
        bits += b * e.len() as f64;
    }
    if tokens == 0 {
        return Err(Error::Parameter("empty strategy".into()));
    }
    Ok(bits / tokens as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::router::{Origin, StrategyEntry};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec(bits: u8, gs: usize) -> QuantSpec {
        QuantSpec::new(bits, gs).unwrap()
    }

    /// Element-by-element reference quantizer, independent of packing.
    fn scalar_reference(x: &[f64], bits: u8, gs: usize) -> (Vec<f64>, Vec<f64>) {
        let levels = ((1u32 << bits) - 1) as f64;
        let mut deq = Vec::new();
        let mut group_scales = Vec::new();
        for g in x.chunks(gs) {
            let mut lo = g[0];
            let mut hi = g[0];
            for &v in g {
                if v < lo {
                    lo = v;
                }
                if v > hi {
                    hi = v;
                }
            }
            let s = if hi > lo { (hi - lo) / levels } else { 1.0 };
            for &v in g {
                let mut q = ((v - lo) / s).round();
                if q < 0.0 {
                    q = 0.0;
                }
                if q > levels {
                    q = levels;
                }
                deq.push(q * s + lo);
            }
            group_scales.push(s);
        }
        (deq, group_scales)
    }

    fn blocks(entries: &[(usize, usize, u8)], n: usize) -> StrategyMap {
        let b: Vec<StrategyEntry> = entries
            .iter()
            .map(|&(s, e, bits)| StrategyEntry { start: s, end: e, bits, origin: Origin::Routed })
            .collect();
        StrategyMap { blocks: vec![b; n], chunk_size: 32, rs_group_size: 1 }
    }

    #[test]
    fn lattice_values_round_trip_exactly() {
        let x = Matrix::from_vec(1, 4, vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let p = quantize_chunk(&x, spec(2, 32)).unwrap();
        assert_eq!(p.scales(), &[1.0]);
        assert_eq!(p.zero_points(), &[0.0]);
        assert_eq!((0..4).map(|c| p.code(0, c)).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        // little-endian within the byte: 0 | 1<<2 | 2<<4 | 3<<6
        assert_eq!(p.codes(), &[0b1110_0100]);
        assert_eq!(dequantize(&p).unwrap(), x);
    }

    #[test]
    fn constant_group() {
        let x = Matrix::from_vec(1, 3, vec![5.0; 3]).unwrap();
        for bits in [2, 4, 8] {
            let p = quantize_chunk(&x, spec(bits, 32)).unwrap();
            assert_eq!(p.zero_points(), &[5.0]);
            assert_eq!(p.scales(), &[1.0]);
            assert!((0..3).all(|c| p.code(0, c) == 0));
            assert_eq!(dequantize(&p).unwrap(), x);
        }
    }

    #[test]
    fn random_chunk_matches_scalar_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Matrix::random_normal(32, 16, 1.0, &mut rng);
        let p = quantize_chunk(&x, spec(4, 32)).unwrap();
        let (reference, scales) = scalar_reference(x.data(), 4, 32);
        let d = dequantize(&p).unwrap();
        assert_eq!(p.num_groups(), 16);
        for (i, (&got, &want)) in d.data().iter().zip(&reference).enumerate() {
            assert!((got - want).abs() < 1e-12);
            let s = scales[i / 32];
            assert!((got - x.data()[i]).abs() <= s / 2.0 + 1e-12);
        }
    }

    #[test]
    fn dequant_two_bit_codes() {
        let p = PackedTensor::from_parts(1, 2, spec(2, 32), vec![0b0000_1100], vec![1.0], vec![0.0]).unwrap();
        assert_eq!(dequantize(&p).unwrap().data(), &[0.0, 3.0]);
    }

    #[test]
    fn passthrough_is_bit_identical_to_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::random_normal(4, 8, 3.0, &mut rng);
        let p = quantize_chunk(&x, spec(16, 32)).unwrap();
        let d = dequantize(&p).unwrap();
        for (a, b) in d.data().iter().zip(x.data()) {
            assert_eq!(a.to_bits(), f16::from_f64(*b).to_f64().to_bits());
        }
        assert_eq!(p.num_groups(), 0);
    }

    #[test]
    fn corrupted_tensors_are_rejected() {
        // 3 cols at 2 bits leave 2 padding bits; setting them is a corrupted code.
        let p = PackedTensor::from_parts(1, 3, spec(2, 32), vec![0b1100_0000], vec![1.0], vec![0.0]).unwrap();
        assert!(matches!(dequantize(&p), Err(Error::Format(_))));
        assert!(PackedTensor::from_parts(1, 3, spec(2, 32), vec![0, 0], vec![1.0], vec![0.0]).is_err());
        assert!(PackedTensor::from_parts(1, 3, spec(2, 32), vec![0], vec![], vec![]).is_err());
        assert!(PackedTensor::from_parts(1, 3, spec(2, 32), vec![0], vec![0.0], vec![0.0]).is_err());
    }

    #[test]
    fn non_finite_input_rejected() {
        let x = Matrix::from_vec(1, 2, vec![1.0, f64::NAN]).unwrap();
        assert!(matches!(quantize_chunk(&x, spec(4, 32)), Err(Error::Numeric(_))));
    }

    #[test]
    fn packed_byte_counts() {
        let x = Matrix::zeros(32, 16);
        assert_eq!(packed_bytes(&quantize_chunk(&x, spec(4, 32)).unwrap(), false), 256);
        assert_eq!(packed_bytes(&quantize_chunk(&x, spec(16, 32)).unwrap(), false), 1024);
        assert_eq!(packed_bytes(&quantize_chunk(&x, spec(2, 32)).unwrap(), true), 128 + 16 * 4);
        let sizes: Vec<usize> = [16u8, 8, 4, 2]
            .iter()
            .map(|&b| packed_bytes(&quantize_chunk(&x, spec(b, 32)).unwrap(), false))
            .collect();
        assert!(sizes.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn llama_13b_fp16_is_about_100gb() {
        let bytes = kv_cache_bytes(&ModelShape::llama2_13b(), 131_072, BitsPlan::Uniform(16), None).unwrap();
        assert_eq!(bytes, 107_374_182_400);
    }

    #[test]
    fn toy_strategy_bytes() {
        let shape = ModelShape::new(2, 2, 8).unwrap();
        let map = blocks(&[(0, 32, 16), (32, 64, 4)], 2);
        assert_eq!(kv_cache_bytes(&shape, 64, BitsPlan::Strategy(&map), None).unwrap(), 5120);
        assert_eq!(kv_cache_bytes(&shape, 0, BitsPlan::Uniform(16), None).unwrap(), 0);
        assert!(matches!(
            kv_cache_bytes(&shape, 65, BitsPlan::Strategy(&map), None),
            Err(Error::Shape(_))
        ));
        let one_block = blocks(&[(0, 64, 4)], 1);
        assert!(kv_cache_bytes(&shape, 64, BitsPlan::Strategy(&one_block), None).is_err());
    }

    #[test]
    fn metadata_accounting_matches_packed_bytes() {
        let shape = ModelShape::new(1, 2, 16).unwrap();
        let map = blocks(&[(0, 32, 2)], 1);
        let m = Some(MetadataAccounting { group_size: 32 });
        let x = Matrix::zeros(32, 32);
        let per_tensor = packed_bytes(&quantize_chunk(&x, spec(2, 32)).unwrap(), true) as u64;
        assert_eq!(kv_cache_bytes(&shape, 32, BitsPlan::Strategy(&map), m).unwrap(), 2 * per_tensor);
    }

    #[test]
    fn kv_bytes_linear_in_length() {
        let shape = ModelShape::llama2_7b();
        for bits in [2u8, 4, 8, 16] {
            let one = kv_cache_bytes(&shape, 1000, BitsPlan::Uniform(bits), None).unwrap();
            let three = kv_cache_bytes(&shape, 3000, BitsPlan::Uniform(bits), None).unwrap();
            assert_eq!(three, 3 * one);
        }
    }

    #[test]
    fn average_bitwidth_examples() {
        assert_eq!(average_bitwidth(&blocks(&[(0, 64, 16)], 1), None).unwrap(), 16.0);
        let four = blocks(&[(0, 32, 16), (32, 64, 4), (64, 96, 4), (96, 128, 2)], 1);
        assert_eq!(average_bitwidth(&four, None).unwrap(), 6.5);
        let rf = blocks(&[(0, 32, 16), (32, 64, 4), (64, 96, 4), (96, 128, 4)], 1);
        assert_eq!(average_bitwidth(&rf, None).unwrap(), 7.0);
        let with_meta = average_bitwidth(&rf, Some(MetadataAccounting { group_size: 32 })).unwrap();
        assert!((with_meta - (32.0 * 16.0 + 96.0 * 5.0) / 128.0).abs() < 1e-12);
        let empty = StrategyMap { blocks: vec![vec![]], chunk_size: 32, rs_group_size: 1 };
        assert!(average_bitwidth(&empty, None).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_error_bound(
            values in proptest::collection::vec(-100.0f64..100.0, 1..200),
            bits in prop_oneof![Just(2u8), Just(4u8), Just(8u8)],
            gs in 1usize..40,
        ) {
            let n = values.len();
            let x = Matrix::from_vec(1, n, values).unwrap();
            let p = quantize_chunk(&x, spec(bits, gs)).unwrap();
            let d = dequantize(&p).unwrap();
            for i in 0..n {
                prop_assert!(p.code(0, i) <= p.spec().max_code());
                let s = p.scales()[i / gs];
                prop_assert!((d.data()[i] - x.data()[i]).abs() <= s / 2.0 + 1e-9 * s.max(1.0));
            }
        }
    }
}
