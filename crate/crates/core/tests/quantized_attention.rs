//! Prefill with one INT2 chunk checked against an independent forward pass
//! that dequantizes K/V by hand before attending.

use half::f16;
use moqae_core::model::{prefill, CacheConfig, ToyConfig, ToyTransformer, VOCAB};
use moqae_core::router::{Origin, RoutingPolicy};

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-5).sqrt();
    x.iter().zip(g).map(|(v, g)| v * inv * g).collect()
}

fn vecmat(x: &[f64], m: &moqae_core::numerics::Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (k, &xk) in x.iter().enumerate() {
        for (o, &w) in out.iter_mut().zip(m.row(k)) {
            *o += xk * w;
        }
    }
    out
}

fn half_round(x: f64) -> f64 {
    f16::from_f64(x).to_f64()
}

/// Asymmetric group quantization round trip over row-major `rows`.
fn fake_quant(rows: &mut [Vec<f64>], bits: u32, group: usize) {
    let cols = rows[0].len();
    let mut flat: Vec<f64> = rows.iter().flatten().copied().collect();
    let max_code = ((1u32 << bits) - 1) as f64;
    for g in flat.chunks_mut(group) {
        let lo = g.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = g.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = if hi > lo { (hi - lo) / max_code } else { 1.0 };
        for v in g.iter_mut() {
            let code = ((*v - lo) / scale).round().clamp(0.0, max_code);
            *v = lo + code * scale;
        }
    }
    for (r, row) in rows.iter_mut().enumerate() {
        row.copy_from_slice(&flat[r * cols..(r + 1) * cols]);
    }
}

fn oracle_logits(m: &ToyTransformer, tokens: &[u8], chunk: usize, int2_chunk: usize, group: usize) -> Vec<Vec<f64>> {
    let c = m.config;
    let (d, hd) = (c.dim(), c.head_dim);
    let t = tokens.len();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(i, &tok)| m.tok_emb.row(tok as usize).iter().zip(m.pos_emb.row(i)).map(|(a, b)| a + b).collect())
        .collect();
    for layer in &m.layers {
        let xn: Vec<Vec<f64>> = x.iter().map(|r| rms(r, &layer.attn_norm)).collect();
        let q: Vec<Vec<f64>> = xn.iter().map(|r| vecmat(r, &layer.wq)).collect();
        let mut k: Vec<Vec<f64>> = xn.iter().map(|r| vecmat(r, &layer.wk)).collect();
        let mut v: Vec<Vec<f64>> = xn.iter().map(|r| vecmat(r, &layer.wv)).collect();
        for kv in [&mut k, &mut v] {
            for (i, row) in kv.iter_mut().enumerate() {
                if i / chunk != int2_chunk {
                    row.iter_mut().for_each(|e| *e = half_round(*e));
                }
            }
            let range = int2_chunk * chunk..(int2_chunk + 1) * chunk;
            fake_quant(&mut kv[range], 2, group);
        }
        let mut att = vec![vec![0.0; d]; t];
        for h in 0..c.heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..t {
                let s: Vec<f64> = (0..=i)
                    .map(|j| {
                        q[i][cols.clone()].iter().zip(&k[j][cols.clone()]).map(|(a, b)| a * b).sum::<f64>()
                            / (hd as f64).sqrt()
                    })
                    .collect();
                let mx = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, w) in e.iter().enumerate() {
                    for cidx in cols.clone() {
                        att[i][cidx] += w / z * v[j][cidx];
                    }
                }
            }
        }
        for i in 0..t {
            let o = vecmat(&att[i], &layer.wo);
            x[i].iter_mut().zip(o).for_each(|(a, b)| *a += b);
            let hn = rms(&x[i], &layer.ffn_norm);
            let up: Vec<f64> = vecmat(&hn, &layer.w_up).iter().map(|u| u / (1.0 + (-u).exp())).collect();
            let down = vecmat(&up, &layer.w_down);
            x[i].iter_mut().zip(down).for_each(|(a, b)| *a += b);
        }
    }
    x.iter()
        .map(|r| {
            let f = rms(r, &m.final_norm);
            vecmat(&f, &m.w_out).iter().zip(&m.b_out).map(|(a, b)| a + b).collect()
        })
        .collect()
}

#[test]
fn int2_chunk_matches_dequantize_then_attend() {
    let cfg = ToyConfig { layers: 2, heads: 2, head_dim: 8, ffn_dim: 32, max_seq: 64 };
    let mut model = ToyTransformer::seeded(cfg, 11).unwrap();
    // A sharper readout makes logit differences visible.
    model.w_out = model.w_out.scale(50.0);
    let tokens: Vec<u8> = (0..40u32).map(|i| (i * 37 % 251) as u8).collect();
    let cache = CacheConfig { chunk_size: 8, rf: false, rs_group_size: 1, group_size: 8 };
    let policy = RoutingPolicy::Scheduled(vec![16, 16, 2, 16, 16]);
    let out = prefill(&model, &tokens, &policy, cache).unwrap();

    for block in &out.strategy().blocks {
        assert_eq!(block[2].bits, 2);
        assert!(block.iter().enumerate().all(|(i, e)| i == 2 || e.bits == 16));
        assert!(block.iter().all(|e| e.origin == Origin::Routed));
    }

    let expected = oracle_logits(&model, &tokens, 8, 2, 8);
    let mut worst = 0.0f64;
    for (t, row) in expected.iter().enumerate() {
        assert_eq!(row.len(), VOCAB);
        for (a, b) in row.iter().zip(out.logits.row(t)) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst < 1e-5, "max logit deviation {worst}");

    // The INT2 chunk has to matter, or the oracle proves nothing.
    let fp16 = prefill(&model, &tokens, &RoutingPolicy::Fixed(16), cache).unwrap();
    assert!(fp16.logits.max_abs_diff(&out.logits) > 1e-3);
}
