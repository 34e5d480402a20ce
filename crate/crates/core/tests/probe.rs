//! The attention probe against attention weights recomputed by brute force
//! from the model's projections.

use moqae_core::corpus::synthetic_text;
use moqae_core::model::{attn_probe, ToyConfig, ToyTransformer};
use moqae_core::numerics::matmul;

fn rms(x: &[f64], g: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    x.iter().zip(g).map(|(v, g)| v / (ms + 1e-5).sqrt() * g).collect()
}

#[test]
fn first_layer_probe_matches_brute_force() {
    let cfg = ToyConfig { layers: 2, heads: 4, head_dim: 8, ffn_dim: 32, max_seq: 64 };
    let model = ToyTransformer::seeded(cfg, 8).unwrap();
    let tokens = synthetic_text(48, 3);
    let k = 5;
    let probe = attn_probe(&model, &tokens, k).unwrap();
    assert_eq!(probe.len(), 2);

    // Layer 0 attention depends only on the embeddings.
    let l0 = &model.layers[0];
    let d = cfg.dim();
    let rows: Vec<f64> = tokens
        .iter()
        .enumerate()
        .flat_map(|(i, &t)| {
            let x: Vec<f64> = model.tok_emb.row(t as usize).iter().zip(model.pos_emb.row(i)).map(|(a, b)| a + b).collect();
            rms(&x, &l0.attn_norm)
        })
        .collect();
    let xn = moqae_core::numerics::Matrix::from_vec(tokens.len(), d, rows).unwrap();
    let q = matmul(&xn, &l0.wq).unwrap();
    let kk = matmul(&xn, &l0.wk).unwrap();
    let mut total = 0.0;
    for h in 0..cfg.heads {
        let cols = h * cfg.head_dim..(h + 1) * cfg.head_dim;
        for i in 0..tokens.len() {
            let scores: Vec<f64> = (0..=i)
                .map(|j| {
                    let s: f64 = q.row(i)[cols.clone()].iter().zip(&kk.row(j)[cols.clone()]).map(|(a, b)| a * b).sum();
                    s / (cfg.head_dim as f64).sqrt()
                })
                .collect();
            let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - mx).exp()).sum();
            total += scores.iter().take(k).map(|s| (s - mx).exp() / z).sum::<f64>();
        }
    }
    let brute = total / (cfg.heads * tokens.len()) as f64;
    assert!((brute - probe[0]).abs() < 1e-6, "{brute} vs {}", probe[0]);
    assert!(probe.iter().all(|&m| (0.0..=1.0).contains(&m)));
}
