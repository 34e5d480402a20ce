//! Binary containers: router checkpoint, model checkpoint, KV-cache dump.
//!
//! All integers are little-endian `u32` unless noted, all reals are
//! little-endian IEEE `f64`, matrices are row-major. Every file opens with
//! an 8-byte magic followed by a `u32` format version.
//!
//! Router (`MOQAERTR`): `dim, experts`, then `experts` bit-widths as `u8`,
//! then `w1` (dim×experts), `w2` (dim×experts), `w3` (experts×experts).
//!
//! Model (`MOQAEMDL`): `vocab, layers, heads, head_dim, ffn_dim, max_seq`,
//! then `tok_emb`, `pos_emb`, per layer `attn_norm, wq, wk, wv, wo,
//! ffn_norm, w_up, w_down`, then `final_norm, w_out, b_out`.
//!
//! Cache dump (`MOQAEKVD`): `layers, dim, chunk_size, group_size, seq_len`;
//! per layer a `u32` chunk count, then per chunk `start, end`, `bits: u8`,
//! `origin: u8` (0 routed, 1 frozen_fp16, 2 residual_fp16, 3 shared) and the
//! K then V payloads. A payload is `groups`, `groups` scales, `groups` zero
//! points, a `u32` byte count and the packed code bytes. Each layer ends with
//! its tail: `start, len`, then K and V as `len×dim` little-endian halves.

use std::io::{Read, Write};

use half::f16;

use crate::error::{Error, Result};
use crate::model::{LayerWeights, MixedKVCache, ToyConfig, ToyTransformer, VOCAB};
use crate::numerics::Matrix;
use crate::quant::{PackedTensor, QuantSpec};
use crate::router::{ExpertSet, Origin, RouterParams, StrategyEntry};

pub const ROUTER_MAGIC: &[u8; 8] = b"MOQAERTR";
pub const MODEL_MAGIC: &[u8; 8] = b"MOQAEMDL";
pub const CACHE_MAGIC: &[u8; 8] = b"MOQAEKVD";
pub const FORMAT_VERSION: u32 = 1;

struct Writer<W: Write> {
    inner: W,
}

impl<W: Write> Writer<W> {
    fn u8(&mut self, v: u8) -> Result<()> {
        Ok(self.inner.write_all(&[v])?)
    }

    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::Format(format!("{v} does not fit in u32")))?;
        Ok(self.inner.write_all(&v.to_le_bytes())?)
    }

    fn f64s(&mut self, vals: &[f64]) -> Result<()> {
        for v in vals {
            self.inner.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        self.inner.write_all(magic)?;
        self.u32(FORMAT_VERSION as usize)
    }
}

struct Reader<R: Read> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated file: {e}")))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.bytes(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let b = self.bytes(n * 8)?;
        Ok(b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Matrix> {
        Matrix::from_vec(rows, cols, self.f64s(rows * cols)?)
    }

    fn header(&mut self, magic: &[u8; 8]) -> Result<()> {
        let got = self.bytes(8)?;
        if got != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&got),
                String::from_utf8_lossy(magic)
            )));
        }
        let version = self.u32()?;
        if version != FORMAT_VERSION as usize {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        Ok(())
    }

    fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(Error::Format("trailing bytes after the last field".into())),
        }
    }
}

pub fn write_router(out: impl Write, params: &RouterParams, experts: &ExpertSet) -> Result<()> {
    if params.num_experts() != experts.len() {
        return Err(Error::Shape("router and expert set disagree on M".into()));
    }
    let mut w = Writer { inner: out };
    w.header(ROUTER_MAGIC)?;
    w.u32(params.dim())?;
    w.u32(params.num_experts())?;
    for &b in experts.bits() {
        w.u8(b)?;
    }
    w.f64s(&params.to_flat())?;
    Ok(())
}

pub fn read_router(input: impl Read) -> Result<(RouterParams, ExpertSet)> {
    let mut r = Reader { inner: input };
    r.header(ROUTER_MAGIC)?;
    let dim = r.u32()?;
    let m = r.u32()?;
    let bits = r.bytes(m)?;
    let experts = ExpertSet::new(bits).map_err(|e| Error::Format(e.to_string()))?;
    let flat = r.f64s(2 * dim * m + m * m)?;
    r.expect_end()?;
    let params = RouterParams::from_flat(dim, m, &flat).map_err(|e| Error::Format(e.to_string()))?;
    Ok((params, experts))
}

pub fn write_model(out: impl Write, model: &ToyTransformer) -> Result<()> {
    let c = model.config;
    let mut w = Writer { inner: out };
    w.header(MODEL_MAGIC)?;
    for v in [VOCAB, c.layers, c.heads, c.head_dim, c.ffn_dim, c.max_seq] {
        w.u32(v)?;
    }
    w.f64s(model.tok_emb.data())?;
    w.f64s(model.pos_emb.data())?;
    for l in &model.layers {
        w.f64s(&l.attn_norm)?;
        for m in [&l.wq, &l.wk, &l.wv, &l.wo] {
            w.f64s(m.data())?;
        }
        w.f64s(&l.ffn_norm)?;
        w.f64s(l.w_up.data())?;
        w.f64s(l.w_down.data())?;
    }
    w.f64s(&model.final_norm)?;
    w.f64s(model.w_out.data())?;
    w.f64s(&model.b_out)?;
    Ok(())
}

pub fn read_model(input: impl Read) -> Result<ToyTransformer> {
    let mut r = Reader { inner: input };
    r.header(MODEL_MAGIC)?;
    let vocab = r.u32()?;
    if vocab != VOCAB {
        return Err(Error::Format(format!("vocabulary of {vocab}, expected {VOCAB}")));
    }
    let config = ToyConfig {
        layers: r.u32()?,
        heads: r.u32()?,
        head_dim: r.u32()?,
        ffn_dim: r.u32()?,
        max_seq: r.u32()?,
    };
    config.validate().map_err(|e| Error::Format(e.to_string()))?;
    let (d, f) = (config.dim(), config.ffn_dim);
    let tok_emb = r.matrix(VOCAB, d)?;
    let pos_emb = r.matrix(config.max_seq, d)?;
    let mut layers = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        layers.push(LayerWeights {
            attn_norm: r.f64s(d)?,
            wq: r.matrix(d, d)?,
            wk: r.matrix(d, d)?,
            wv: r.matrix(d, d)?,
            wo: r.matrix(d, d)?,
            ffn_norm: r.f64s(d)?,
            w_up: r.matrix(d, f)?,
            w_down: r.matrix(f, d)?,
        });
    }
    let final_norm = r.f64s(d)?;
    let w_out = r.matrix(d, VOCAB)?;
    let b_out = r.f64s(VOCAB)?;
    r.expect_end()?;
    Ok(ToyTransformer { config, tok_emb, pos_emb, layers, final_norm, w_out, b_out })
}

fn write_packed<W: Write>(w: &mut Writer<W>, p: &PackedTensor) -> Result<()> {
    w.u32(p.num_groups())?;
    w.f64s(p.scales())?;
    w.f64s(p.zero_points())?;
    w.u32(p.codes().len())?;
    Ok(w.inner.write_all(p.codes())?)
}

fn read_packed<R: Read>(r: &mut Reader<R>, rows: usize, cols: usize, spec: QuantSpec) -> Result<PackedTensor> {
    let groups = r.u32()?;
    let scales = r.f64s(groups)?;
    let zero_points = r.f64s(groups)?;
    let n = r.u32()?;
    let codes = r.bytes(n)?;
    PackedTensor::from_parts(rows, cols, spec, codes, scales, zero_points)
}

fn half_bytes(m: &Matrix) -> Vec<u8> {
    m.data().iter().flat_map(|&v| f16::from_f64(v).to_le_bytes()).collect()
}

pub fn write_cache_dump(out: impl Write, cache: &MixedKVCache) -> Result<()> {
    let mut w = Writer { inner: out };
    w.header(CACHE_MAGIC)?;
    let dim = cache.layers().first().map_or(0, |l| l.keys().cols());
    let cfg = cache.config();
    for v in [cache.layers().len(), dim, cfg.chunk_size, cfg.group_size, cache.len()] {
        w.u32(v)?;
    }
    for layer in cache.layers() {
        w.u32(layer.chunks.len())?;
        for c in &layer.chunks {
            w.u32(c.entry.start)?;
            w.u32(c.entry.end)?;
            w.u8(c.entry.bits)?;
            w.u8(c.entry.origin.code())?;
            write_packed(&mut w, &c.k)?;
            write_packed(&mut w, &c.v)?;
        }
        w.u32(layer.tail_start)?;
        w.u32(layer.tail_len())?;
        w.inner.write_all(&half_bytes(&layer.tail_keys()))?;
        w.inner.write_all(&half_bytes(&layer.tail_values()))?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct DumpedChunk {
    pub entry: StrategyEntry,
    pub k: PackedTensor,
    pub v: PackedTensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DumpedLayer {
    pub chunks: Vec<DumpedChunk>,
    pub tail_start: usize,
    pub tail_k: Matrix,
    pub tail_v: Matrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CacheDump {
    pub dim: usize,
    pub chunk_size: usize,
    pub group_size: usize,
    pub seq_len: usize,
    pub layers: Vec<DumpedLayer>,
}

pub fn read_cache_dump(input: impl Read) -> Result<CacheDump> {
    let mut r = Reader { inner: input };
    r.header(CACHE_MAGIC)?;
    let n_layers = r.u32()?;
    let dim = r.u32()?;
    let chunk_size = r.u32()?;
    let group_size = r.u32()?;
    let seq_len = r.u32()?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let n_chunks = r.u32()?;
        let mut chunks = Vec::with_capacity(n_chunks);
        for _ in 0..n_chunks {
            let start = r.u32()?;
            let end = r.u32()?;
            if end <= start {
                return Err(Error::Format(format!("empty chunk range {start}..{end}")));
            }
            let bits = r.u8()?;
            let origin = Origin::from_code(r.u8()?)?;
            let spec = QuantSpec::new(bits, group_size).map_err(|e| Error::Format(e.to_string()))?;
            let k = read_packed(&mut r, end - start, dim, spec)?;
            let v = read_packed(&mut r, end - start, dim, spec)?;
            chunks.push(DumpedChunk { entry: StrategyEntry { start, end, bits, origin }, k, v });
        }
        let tail_start = r.u32()?;
        let tail_len = r.u32()?;
        let halves = |r: &mut Reader<_>| -> Result<Matrix> {
            let b = r.bytes(tail_len * dim * 2)?;
            let vals = b.chunks_exact(2).map(|c| f16::from_le_bytes([c[0], c[1]]).to_f64()).collect();
            Matrix::from_vec(tail_len, dim, vals)
        };
        let tail_k = halves(&mut r)?;
        let tail_v = halves(&mut r)?;
        layers.push(DumpedLayer { chunks, tail_start, tail_k, tail_v });
    }
    r.expect_end()?;
    Ok(CacheDump { dim, chunk_size, group_size, seq_len, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{prefill, CacheConfig};
    use crate::quant::dequantize;
    use crate::router::RoutingPolicy;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn router_round_trip_and_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = RouterParams::init(4, 3, &mut rng);
        let experts = ExpertSet::default();
        let mut buf = Vec::new();
        write_router(&mut buf, &params, &experts).unwrap();
        assert_eq!(&buf[..8], ROUTER_MAGIC);
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..20], &[4, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(&buf[20..23], &[16, 4, 2]);
        assert_eq!(&buf[23..31], &params.w1.get(0, 0).to_le_bytes());
        assert_eq!(buf.len(), 23 + 8 * (2 * 12 + 9));
        let (p2, e2) = read_router(buf.as_slice()).unwrap();
        assert_eq!((p2, e2), (params, experts));
    }

    #[test]
    fn router_rejects_corruption() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = RouterParams::init(4, 3, &mut rng);
        let mut buf = Vec::new();
        write_router(&mut buf, &params, &ExpertSet::default()).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_router(bad.as_slice()), Err(Error::Format(_))));
        assert!(matches!(read_router(&buf[..buf.len() - 1]), Err(Error::Format(_))));
        let mut long = buf.clone();
        long.push(0);
        assert!(matches!(read_router(long.as_slice()), Err(Error::Format(_))));
        let mut v2 = buf;
        v2[8] = 2;
        assert!(matches!(read_router(v2.as_slice()), Err(Error::Format(_))));
    }

    #[test]
    fn model_round_trip() {
        let cfg = ToyConfig { layers: 2, heads: 2, head_dim: 4, ffn_dim: 16, max_seq: 32 };
        let model = ToyTransformer::seeded(cfg, 5).unwrap();
        let mut buf = Vec::new();
        write_model(&mut buf, &model).unwrap();
        assert_eq!(&buf[..8], MODEL_MAGIC);
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        assert_eq!(back.checksum(), model.checksum());
    }

    #[test]
    fn cache_dump_preserves_chunks_and_tail() {
        let cfg = ToyConfig { layers: 2, heads: 2, head_dim: 8, ffn_dim: 16, max_seq: 64 };
        let model = ToyTransformer::seeded(cfg, 2).unwrap();
        let tokens: Vec<u8> = (0..45).map(|i| (i * 13) as u8).collect();
        let cc = CacheConfig { chunk_size: 16, rf: true, rs_group_size: 1, group_size: 16 };
        let out = prefill(&model, &tokens, &RoutingPolicy::Scheduled(vec![16, 4, 2]), cc).unwrap();
        let mut buf = Vec::new();
        write_cache_dump(&mut buf, &out.cache).unwrap();
        let dump = read_cache_dump(buf.as_slice()).unwrap();
        assert_eq!(dump.seq_len, 45);
        for (dl, lc) in dump.layers.iter().zip(out.cache.layers()) {
            assert_eq!(dl.chunks.len(), lc.chunks.len());
            for (dc, c) in dl.chunks.iter().zip(&lc.chunks) {
                assert_eq!(dc.entry, c.entry);
                assert_eq!(dequantize(&dc.k).unwrap(), dequantize(&c.k).unwrap());
                assert_eq!(dequantize(&dc.v).unwrap(), dequantize(&c.v).unwrap());
            }
            assert_eq!(dl.tail_start, 32);
            assert_eq!(dl.tail_k, lc.tail_keys());
            assert_eq!(dl.tail_v, lc.tail_values());
        }
        assert_eq!(dump.layers[0].chunks[1].entry.bits, 4);
    }
}
