//! Training the toy backbone: the transformer body keeps its seeded weights
//! (random, plus a fixed previous-token head) and only the readout (`w_out`, `b_out`) is fitted by softmax
//! regression on the final hidden states. The result is a frozen model whose
//! predictions depend on its KV cache, which is all the quantization
//! experiments need.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{windows, ToyConfig, ToyTransformer, VOCAB};
use crate::numerics::{softmax_in_place, Matrix};
use crate::trainer::{AdamWConfig, OptimizerState};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutConfig {
    pub epochs: usize,
    pub batch_tokens: usize,
    pub window: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for ReadoutConfig {
    fn default() -> Self {
        Self {
            epochs: 4,
            batch_tokens: 256,
            window: 128,
            optimizer: AdamWConfig { lr: 1e-2, weight_decay: 0.3, ..AdamWConfig::default() },
            seed: 0,
        }
    }
}

/// Fits the readout on `corpus` and returns the mean training NLL of each epoch.
pub fn fit_readout(model: &mut ToyTransformer, corpus: &[u8], cfg: &ReadoutConfig) -> Result<Vec<f64>> {
    if corpus.len() < 2 {
        return Err(Error::Data("readout training needs at least two tokens".into()));
    }
    let d = model.dim();
    let mut features: Vec<Vec<f64>> = Vec::new();
    let mut targets: Vec<u8> = Vec::new();
    for w in windows(corpus, cfg.window.min(model.config.max_seq)) {
        let pass = model.forward(w)?;
        for t in 0..w.len() - 1 {
            features.push(pass.features.row(t).to_vec());
            targets.push(w[t + 1]);
        }
    }

    // Parameters: w_out (D×V) then b_out (V).
    let mut params = model.w_out.data().to_vec();
    params.extend_from_slice(&model.b_out);
    let mut opt = OptimizerState::new(cfg.optimizer, params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut probs = vec![0.0; VOCAB];

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_nll = 0.0;
        for batch in order.chunks(cfg.batch_tokens.max(1)) {
            let mut grad = vec![0.0; params.len()];
            let (w, b) = params.split_at(d * VOCAB);
            for &i in batch {
                let x = &features[i];
                for (v, p) in probs.iter_mut().enumerate() {
                    *p = b[v];
                }
                for (k, &xk) in x.iter().enumerate() {
                    for (p, &wkv) in probs.iter_mut().zip(&w[k * VOCAB..(k + 1) * VOCAB]) {
                        *p += xk * wkv;
                    }
                }
                softmax_in_place(&mut probs);
                let y = targets[i] as usize;
                epoch_nll -= probs[y].max(f64::MIN_POSITIVE).ln();
                probs[y] -= 1.0;
                let inv = 1.0 / batch.len() as f64;
                for (k, &xk) in x.iter().enumerate() {
                    let row = &mut grad[k * VOCAB..(k + 1) * VOCAB];
                    for (g, &p) in row.iter_mut().zip(&probs) {
                        *g += xk * p * inv;
                    }
                }
                for (g, &p) in grad[d * VOCAB..].iter_mut().zip(&probs) {
                    *g += p * inv;
                }
            }
            opt.step(&mut params, &grad)?;
        }
        history.push(epoch_nll / features.len() as f64);
    }

    model.w_out = Matrix::from_vec(d, VOCAB, params[..d * VOCAB].to_vec())?;
    model.b_out = params[d * VOCAB..].to_vec();
    Ok(history)
}

/// Seeded backbone with its readout fitted to `corpus`.
pub fn train_toy_model(config: ToyConfig, corpus: &[u8], seed: u64, readout: &ReadoutConfig) -> Result<ToyTransformer> {
    let mut model = ToyTransformer::seeded(config, seed)?;
    fit_readout(&mut model, corpus, readout)?;
    Ok(model)
}
