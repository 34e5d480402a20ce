//! Router-only fine-tuning.
//!
//! The backbone is frozen. Each step runs the calibration sequences through
//! the quantized pipeline under the current routing, measures the NLL of
//! every routed chunk, and trains the router on
//! `λ·L_model + (1−λ)·L_mem`, where both terms weight each token's selected
//! probability by a per-expert penalty. The argmax selection and the NLL are
//! constants of the step, so the gradient flows only through the selected
//! probabilities.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{log_softmax_nll, prefill_recording, CacheConfig, ToyTransformer};
use crate::numerics::{matmul_nt, matmul_tn, silu_grad, Matrix};
use crate::router::{per_token_experts, router_forward, router_forward_trace, ExpertSet, RouterParams, RoutingPolicy};

/// Direction of the memory penalty.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum MemPenalty {
    /// `16/B_j`: larger for lower bit-widths.
    #[default]
    AsWritten,
    /// `B_j/16`: proportional to the memory an expert costs.
    MemoryProportional,
}

impl MemPenalty {
    pub fn weight(self, bits: u8) -> f64 {
        let b = bits as f64;
        match self {
            MemPenalty::AsWritten => 16.0 / b,
            MemPenalty::MemoryProportional => b / 16.0,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MemPenalty::AsWritten => "as_written",
            MemPenalty::MemoryProportional => "proportional",
        }
    }
}

impl std::str::FromStr for MemPenalty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "as_written" => Ok(MemPenalty::AsWritten),
            "proportional" | "memory_proportional" => Ok(MemPenalty::MemoryProportional),
            _ => Err(Error::Parameter(format!("unknown memory penalty {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_model: f64,
    pub l_mem: f64,
    pub l_total: f64,
    pub lambda: f64,
    pub nll: f64,
}

fn check_probs(probs: &Matrix, experts: &ExpertSet) -> Result<()> {
    if probs.cols() != experts.len() || probs.rows() == 0 {
        return Err(Error::Shape(format!(
            "{:?} probabilities for {} experts",
            probs.shape(),
            experts.len()
        )));
    }
    Ok(())
}

/// Mean over tokens of `p_sel · weight(B_sel)`, selection by row argmax.
fn selected_mean(probs: &Matrix, experts: &ExpertSet, weight: impl Fn(u8) -> f64) -> f64 {
    let sel = per_token_experts(probs);
    let total: f64 = sel
        .iter()
        .enumerate()
        .map(|(i, &j)| probs.get(i, j) * weight(experts.bits_of(j)))
        .sum();
    total / probs.rows() as f64
}

/// `(1/N) Σᵢ p_sel(i) · nll / B_sel(i)`.
pub fn loss_model(probs: &Matrix, nll: f64, experts: &ExpertSet) -> Result<f64> {
    check_probs(probs, experts)?;
    Ok(selected_mean(probs, experts, |b| nll / b as f64))
}

/// `(1/N) Σᵢ p_sel(i) · penalty(B_sel(i))`.
pub fn loss_mem(probs: &Matrix, experts: &ExpertSet, variant: MemPenalty) -> Result<f64> {
    check_probs(probs, experts)?;
    Ok(selected_mean(probs, experts, |b| variant.weight(b)))
}

pub fn total_loss(l_model: f64, l_mem: f64, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    Ok(lambda * l_model + (1.0 - lambda) * l_mem)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::Parameter(format!("lambda must lie in [0, 1], got {lambda}")));
    }
    Ok(())
}

/// Objective settings shared by the loss and its gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub experts: ExpertSet,
    pub lambda: f64,
    pub penalty: MemPenalty,
}

impl Objective {
    /// Per-expert multiplier of the selected probability.
    fn coefficients(&self, nll: f64) -> Vec<f64> {
        self.experts
            .bits()
            .iter()
            .map(|&b| self.lambda * nll / b as f64 + (1.0 - self.lambda) * self.penalty.weight(b))
            .collect()
    }
}

/// One routed chunk with the NLL measured for its positions.
#[derive(Clone, Debug)]
pub struct TrainingChunk {
    pub input: Matrix,
    pub nll: f64,
}

/// Batch-mean loss with explicit selections (one list per chunk).
pub fn batch_loss_with_selection(
    params: &RouterParams,
    batch: &[TrainingChunk],
    objective: &Objective,
    selections: &[Vec<usize>],
) -> Result<f64> {
    let mut total = 0.0;
    for (chunk, sel) in batch.iter().zip(selections) {
        let probs = router_forward(params, &chunk.input)?;
        let c = objective.coefficients(chunk.nll);
        total += sel.iter().enumerate().map(|(i, &j)| probs.get(i, j) * c[j]).sum::<f64>() / probs.rows() as f64;
    }
    Ok(total / batch.len() as f64)
}

/// Per-chunk argmax selections under `params`.
pub fn selections(params: &RouterParams, batch: &[TrainingChunk]) -> Result<Vec<Vec<usize>>> {
    batch.iter().map(|c| Ok(per_token_experts(&router_forward(params, &c.input)?))).collect()
}

pub struct GradientResult {
    pub loss: LossBreakdown,
    pub grad: RouterParams,
    /// Mean bit-width of the per-token selected experts.
    pub avg_selected_bits: f64,
}

/// Exact gradient of the batch-mean total loss w.r.t. the router weights.
pub fn router_grad(params: &RouterParams, batch: &[TrainingChunk], objective: &Objective) -> Result<GradientResult> {
    check_lambda(objective.lambda)?;
    if batch.is_empty() {
        return Err(Error::Data("empty training batch".into()));
    }
    let (d, m) = (params.dim(), params.num_experts());
    if m != objective.experts.len() {
        return Err(Error::Shape(format!("router has {m} experts, objective {}", objective.experts.len())));
    }
    let mut g1 = Matrix::zeros(d, m);
    let mut g2 = Matrix::zeros(d, m);
    let mut g3 = Matrix::zeros(m, m);
    let (mut l_model, mut l_mem, mut nll_sum) = (0.0, 0.0, 0.0);
    let (mut bits_sum, mut tokens) = (0.0, 0usize);
    let scale = 1.0 / batch.len() as f64;

    for chunk in batch {
        if !chunk.nll.is_finite() {
            return Err(Error::Numeric("non-finite chunk NLL".into()));
        }
        let trace = router_forward_trace(params, &chunk.input)?;
        let n = trace.probs.rows();
        let sel = per_token_experts(&trace.probs);
        let coeff = objective.coefficients(chunk.nll);

        l_model += loss_model(&trace.probs, chunk.nll, &objective.experts)? * scale;
        l_mem += loss_mem(&trace.probs, &objective.experts, objective.penalty)? * scale;
        nll_sum += chunk.nll * scale;
        bits_sum += sel.iter().map(|&j| objective.experts.bits_of(j) as f64).sum::<f64>();
        tokens += n;

        // dL/dlogits through the row softmax: only the selected entry of
        // each row carries an upstream gradient.
        let mut dz = Matrix::zeros(n, m);
        for (i, &j) in sel.iter().enumerate() {
            let up = coeff[j] * scale / n as f64;
            let pj = trace.probs.get(i, j);
            for k in 0..m {
                let pk = trace.probs.get(i, k);
                let delta = if k == j { 1.0 } else { 0.0 };
                dz.set(i, k, up * pj * (delta - pk));
            }
        }
        g3 = g3.add(&matmul_tn(&trace.hidden, &dz)?)?;
        let dh = matmul_nt(&dz, &params.w3)?;
        let dgate = dh.zip_with(&trace.gate, |g, x| g * silu_grad(x))?;
        let da = dgate.hadamard(&trace.b)?;
        let db = dgate.hadamard(&trace.a)?;
        g1 = g1.add(&matmul_tn(&chunk.input, &da)?)?;
        g2 = g2.add(&matmul_tn(&chunk.input, &db)?)?;
    }

    let grad = RouterParams { w1: g1, w2: g2, w3: g3 };
    if !grad.to_flat().iter().all(|v| v.is_finite()) {
        return Err(Error::Numeric("non-finite router gradient".into()));
    }
    let l_total = total_loss(l_model, l_mem, objective.lambda)?;
    Ok(GradientResult {
        loss: LossBreakdown { l_model, l_mem, l_total, lambda: objective.lambda, nll: nll_sum },
        grad,
        avg_selected_bits: bits_sum / tokens as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01 }
    }
}

/// Adaptive-moment optimizer with decoupled weight decay over a flat
/// parameter vector.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn new(config: AdamWConfig, num_params: usize) -> Self {
        Self { config, m: vec![0.0; num_params], v: vec![0.0; num_params], step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= c.lr * c.weight_decay * params[i];
            params[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
        }
        Ok(())
    }
}

/// Applies one optimizer update to the router weights.
pub fn optimizer_step(state: &mut OptimizerState, params: &RouterParams, grads: &RouterParams) -> Result<RouterParams> {
    if grads.w1.shape() != params.w1.shape() || grads.w3.shape() != params.w3.shape() {
        return Err(Error::Shape("gradient shape differs from the router".into()));
    }
    let mut flat = params.to_flat();
    state.step(&mut flat, &grads.to_flat())?;
    RouterParams::from_flat(params.dim(), params.num_experts(), &flat)
}

/// Fixed-length token sequences sampled from a corpus for fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationSet {
    pub sequences: Vec<Vec<u8>>,
    pub fraction: f64,
    pub seed: u64,
}

/// Splits `corpus` into windows of `seq_len` tokens and deterministically
/// draws `fraction` of them (at least one) for calibration; the rest are
/// returned as held-out windows in corpus order.
pub fn split_corpus(corpus: &[u8], seq_len: usize, fraction: f64, seed: u64) -> Result<(CalibrationSet, Vec<Vec<u8>>)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Parameter(format!("calibration fraction must lie in (0, 1], got {fraction}")));
    }
    if seq_len == 0 {
        return Err(Error::Parameter("sequence length must be positive".into()));
    }
    let windows: Vec<&[u8]> = corpus.chunks_exact(seq_len).collect();
    if windows.is_empty() {
        return Err(Error::Data(format!(
            "corpus of {} bytes holds no {seq_len}-token sequence",
            corpus.len()
        )));
    }
    let take = ((windows.len() as f64 * fraction).round() as usize).clamp(1, windows.len());
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = order[..take].to_vec();
    chosen.sort_unstable();
    let sequences = chosen.iter().map(|&i| windows[i].to_vec()).collect();
    let held_out = (0..windows.len())
        .filter(|i| chosen.binary_search(i).is_err())
        .map(|i| windows[i].to_vec())
        .collect();
    Ok((CalibrationSet { sequences, fraction, seed }, held_out))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub lambda: f64,
    pub penalty: MemPenalty,
    pub experts: ExpertSet,
    pub cache: CacheConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
    /// Stop once an epoch's mean total loss changes by less than this
    /// relative amount.
    pub plateau_tol: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            penalty: MemPenalty::AsWritten,
            experts: ExpertSet::default(),
            cache: CacheConfig::default(),
            batch_size: 8,
            epochs: 3,
            optimizer: AdamWConfig::default(),
            seed: 0,
            plateau_tol: 1e-4,
        }
    }
}

/// One optimizer step of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub l_model: f64,
    pub l_mem: f64,
    pub l_total: f64,
    pub nll: f64,
    pub avg_bits: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "step,l_model,l_mem,l_total,nll,avg_bits,lr";

impl StepLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.6},{:e}",
            self.step, self.l_model, self.l_mem, self.l_total, self.nll, self.avg_bits, self.lr
        )
    }
}

pub fn log_to_csv(log: &[StepLog]) -> String {
    let mut out = String::from(LOG_HEADER);
    out.push('\n');
    for row in log {
        out.push_str(&row.csv_row());
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug)]
pub struct FinetuneOutcome {
    pub params: RouterParams,
    pub log: Vec<StepLog>,
    pub epochs_run: usize,
    /// Mean selected bit-width over the calibration set before training.
    pub initial_avg_bits: f64,
    /// Same, after training.
    pub final_avg_bits: f64,
}

/// Routed chunks of one sequence paired with the mean NLL of the
/// predictions made at their positions.
pub fn collect_chunks(
    model: &ToyTransformer,
    tokens: &[u8],
    policy: &RoutingPolicy,
    cache: CacheConfig,
) -> Result<Vec<TrainingChunk>> {
    let out = prefill_recording(model, tokens, policy, cache)?;
    let nll: Vec<f64> = (0..tokens.len() - 1)
        .map(|t| log_softmax_nll(out.logits.row(t), tokens[t + 1]))
        .collect();
    Ok(out
        .routed
        .into_iter()
        .filter_map(|c| {
            let end = c.end.min(nll.len());
            (end > c.start).then(|| TrainingChunk {
                nll: nll[c.start..end].iter().sum::<f64>() / (end - c.start) as f64,
                input: c.input,
            })
        })
        .collect())
}

/// Mean per-token selected bit-width over every routed chunk of `sequences`.
pub fn mean_selected_bits(
    model: &ToyTransformer,
    sequences: &[Vec<u8>],
    params: &RouterParams,
    experts: &ExpertSet,
    cache: CacheConfig,
) -> Result<f64> {
    let policy = RoutingPolicy::Learned { params: params.clone(), experts: experts.clone() };
    let (mut bits, mut tokens) = (0.0, 0usize);
    for seq in sequences {
        for chunk in prefill_recording(model, seq, &policy, cache)?.routed {
            let probs = router_forward(params, &chunk.input)?;
            for j in per_token_experts(&probs) {
                bits += experts.bits_of(j) as f64;
                tokens += 1;
            }
        }
    }
    if tokens == 0 {
        return Err(Error::Data("no routed chunks in the calibration set".into()));
    }
    Ok(bits / tokens as f64)
}

/// Fine-tunes `init` on the calibration set with the backbone frozen.
pub fn finetune(
    model: &ToyTransformer,
    calibration: &CalibrationSet,
    init: RouterParams,
    config: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    check_lambda(config.lambda)?;
    config.cache.validate()?;
    if calibration.sequences.is_empty() {
        return Err(Error::Data("empty calibration set".into()));
    }
    if calibration.sequences.iter().any(|s| s.len() < config.cache.chunk_size) {
        return Err(Error::Data("calibration sequences must span at least one chunk".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::Parameter("batch size must be positive".into()));
    }
    let objective = Objective { experts: config.experts.clone(), lambda: config.lambda, penalty: config.penalty };
    let initial_avg_bits = mean_selected_bits(model, &calibration.sequences, &init, &config.experts, config.cache)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut state = OptimizerState::new(config.optimizer, init.num_params());
    let mut params = init;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..calibration.sequences.len()).collect();
    let mut prev_epoch_loss: Option<f64> = None;
    let mut epochs_run = 0;

    for _ in 0..config.epochs {
        epochs_run += 1;
        order.shuffle(&mut rng);
        let (mut epoch_loss, mut epoch_steps) = (0.0, 0usize);
        for batch_idx in order.chunks(config.batch_size) {
            let policy = RoutingPolicy::Learned { params: params.clone(), experts: config.experts.clone() };
            let mut batch = Vec::new();
            for &i in batch_idx {
                batch.extend(collect_chunks(model, &calibration.sequences[i], &policy, config.cache)?);
            }
            if batch.is_empty() {
                continue;
            }
            let g = router_grad(&params, &batch, &objective)?;
            log.push(StepLog {
                step: log.len(),
                l_model: g.loss.l_model,
                l_mem: g.loss.l_mem,
                l_total: g.loss.l_total,
                nll: g.loss.nll,
                avg_bits: g.avg_selected_bits,
                lr: config.optimizer.lr,
            });
            epoch_loss += g.loss.l_total;
            epoch_steps += 1;
            params = optimizer_step(&mut state, &params, &g.grad)?;
        }
        if epoch_steps == 0 {
            return Err(Error::Data("no routable chunks in the calibration set".into()));
        }
        let mean = epoch_loss / epoch_steps as f64;
        if let Some(prev) = prev_epoch_loss {
            if ((prev - mean) / prev.abs().max(f64::MIN_POSITIVE)).abs() < config.plateau_tol {
                break;
            }
        }
        prev_epoch_loss = Some(mean);
    }

    let final_avg_bits = mean_selected_bits(model, &calibration.sequences, &params, &config.experts, config.cache)?;
    Ok(FinetuneOutcome { params, log, epochs_run, initial_avg_bits, final_avg_bits })
}

/// Gradient of the same objective on a flattened parameter vector with the
/// selections frozen; the reference point for finite-difference checks.
pub fn flat_loss_fn<'a>(
    dim: usize,
    experts: usize,
    batch: &'a [TrainingChunk],
    objective: &'a Objective,
    selections: &'a [Vec<usize>],
) -> impl Fn(&[f64]) -> f64 + 'a {
    move |flat| {
        let p = RouterParams::from_flat(dim, experts, flat).expect("flat length matches");
        batch_loss_with_selection(&p, batch, objective, selections).unwrap_or(f64::NAN)
    }
}
