use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use moqae_core::backbone::{fit_readout, ReadoutConfig};
use moqae_core::checkpoint::{read_model, read_router, write_cache_dump, write_model, write_router};
use moqae_core::model::{
    attn_probe, decode_step, initial_attention_mass, log_softmax_nll, prefill, windows, CacheConfig, ToyConfig,
    ToyTransformer,
};
use moqae_core::numerics::{argmax, Matrix};
use moqae_core::quant::{average_bitwidth, kv_cache_bytes, BitsPlan, MetadataAccounting, ModelShape};
use moqae_core::router::{
    ExpertSet, PlanConfig, RouterParams, RoutingPolicy, StrategyMap, StrategyPlanner, SUPPORTED_BITS,
};
use moqae_core::trainer::{finetune, log_to_csv, split_corpus, CalibrationSet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{parse_list, RunConfig, Shape};
use crate::{AblateArgs, CliError, EvalArgs, LatencyArgs, MemoryArgs, ProbeArgs, Report, SweepArgs, TrainArgs};

/// Share of the corpus (taken from the end) held out for evaluation.
pub const EVAL_FRACTION: f64 = 0.1;

pub const MEMORY_HEADER: &str = "length,weights_bytes_constant,kv_bytes_fp16,kv_bytes_strategy";
pub const LATENCY_HEADER: &str =
    "length,variant,chunk_size,rf,rs_group_size,router_invocations,prefill_ms,decode_ms_per_token";
pub const PROBE_HEADER: &str = "layer,initial_mass,uniform_mass";
pub const SWEEP_HEADER: &str = "lambda,mem_penalty,initial_avg_bits,final_avg_bits,eval_avg_bits,ppl";

static BUNDLED: &[u8] = include_bytes!("../data/toy_corpus.txt");

pub struct Corpus {
    bytes: Vec<u8>,
    split: usize,
}

impl Corpus {
    pub fn load(cfg: &RunConfig) -> Result<Self, CliError> {
        let bytes = match &cfg.corpus_path {
            None => BUNDLED.to_vec(),
            Some(p) => moqae_core::corpus::load(p)
                .map_err(|e| CliError::Usage(format!("cannot read corpus {}: {e}", p.display())))?,
        };
        let eval_len = ((bytes.len() as f64 * EVAL_FRACTION).ceil() as usize).max(2);
        if bytes.len() < eval_len + cfg.window {
            return Err(CliError::Usage(format!(
                "corpus of {} bytes is too small for a {}-token window plus an evaluation split",
                bytes.len(),
                cfg.window
            )));
        }
        let split = bytes.len() - eval_len;
        Ok(Self { bytes, split })
    }

    pub fn train(&self) -> &[u8] {
        &self.bytes[..self.split]
    }

    pub fn eval(&self) -> &[u8] {
        &self.bytes[self.split..]
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn emit(out: Option<&PathBuf>, text: String) -> Result<String, CliError> {
    if let Some(p) = out {
        write_file(p, text.as_bytes())?;
    }
    Ok(text)
}

fn open(path: &Path) -> Result<fs::File, CliError> {
    fs::File::open(path).map_err(|e| CliError::Checkpoint(format!("cannot open {}: {e}", path.display())))
}

fn path_echo(p: Option<&PathBuf>) -> Option<String> {
    p.map(|p| p.display().to_string())
}

/// Loads a model checkpoint, or builds the toy backbone and fits its readout
/// on the training split. Returns the final readout NLL when training ran.
pub fn backbone(cfg: &RunConfig, model: Option<&PathBuf>, corpus: &Corpus) -> Result<(ToyTransformer, Option<f64>), CliError> {
    let (model, nll) = match model {
        Some(p) => (read_model(open(p)?).map_err(|e| CliError::checkpoint(p, e))?, None),
        None => {
            let mut m = ToyTransformer::seeded(ToyConfig::default(), cfg.seed)?;
            let readout = ReadoutConfig { window: cfg.window, seed: cfg.seed, ..ReadoutConfig::default() };
            let hist = fit_readout(&mut m, corpus.train(), &readout)?;
            (m, hist.last().copied())
        }
    };
    if cfg.window > model.config.max_seq {
        return Err(CliError::Usage(format!("--window exceeds the model's {} positions", model.config.max_seq)));
    }
    Ok((model, nll))
}

pub fn load_router(path: &Path, experts: &ExpertSet, model: &ToyTransformer) -> Result<RouterParams, CliError> {
    let (params, stored) = read_router(open(path)?).map_err(|e| CliError::checkpoint(path, e))?;
    if &stored != experts {
        return Err(CliError::Checkpoint(format!(
            "{} was trained for experts {:?}, --experts is {:?}",
            path.display(),
            stored.bits(),
            experts.bits()
        )));
    }
    if params.dim() != model.dim() {
        return Err(CliError::Checkpoint(format!(
            "{} routes {}-dimensional inputs, the model is {}-dimensional",
            path.display(),
            params.dim(),
            model.dim()
        )));
    }
    Ok(params)
}

fn seeded_router(cfg: &RunConfig, dim: usize) -> RouterParams {
    RouterParams::init(dim, cfg.expert_set.len(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))
}

fn calibration(cfg: &RunConfig, corpus: &Corpus) -> Result<CalibrationSet, CliError> {
    Ok(split_corpus(corpus.train(), cfg.window, cfg.calib_frac, cfg.seed)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalStats {
    pub ppl: f64,
    pub avg_bits: f64,
    pub avg_bits_with_metadata: f64,
    pub kv_cache_bytes: u64,
    pub kv_cache_bytes_fp16: u64,
    pub router_invocations: usize,
    pub tokens: usize,
}

/// Teacher-forced evaluation over non-overlapping windows of `text`.
/// Byte and bit-width figures are summed or token-weighted over windows;
/// `policy: None` runs without KV quantization.
pub fn evaluate(
    model: &ToyTransformer,
    text: &[u8],
    policy: Option<&RoutingPolicy>,
    cache: CacheConfig,
    window: usize,
) -> Result<EvalStats, CliError> {
    let shape = model.config.shape();
    let meta = Some(MetadataAccounting { group_size: cache.group_size });
    let (mut nll, mut predicted) = (0.0, 0usize);
    let (mut bits, mut bits_meta, mut tokens) = (0.0, 0.0, 0usize);
    let (mut kv, mut kv16, mut invocations) = (0u64, 0u64, 0usize);
    for w in windows(text, window) {
        let (logits, strategy) = match policy {
            None => (
                model.forward(w)?.logits,
                StrategyMap::uniform(model.config.layers, w.len(), cache.chunk_size, 16),
            ),
            Some(p) => {
                let out = prefill(model, w, p, cache)?;
                invocations += out.cache.router_invocations();
                let strategy = out.strategy().clone();
                (out.logits, strategy)
            }
        };
        for t in 0..w.len() - 1 {
            nll += log_softmax_nll(logits.row(t), w[t + 1]);
        }
        predicted += w.len() - 1;
        bits += average_bitwidth(&strategy, None)? * w.len() as f64;
        bits_meta += average_bitwidth(&strategy, meta)? * w.len() as f64;
        tokens += w.len();
        kv += kv_cache_bytes(&shape, w.len(), BitsPlan::Strategy(&strategy), None)?;
        kv16 += kv_cache_bytes(&shape, w.len(), BitsPlan::Uniform(16), None)?;
    }
    if predicted == 0 {
        return Err(CliError::Usage("evaluation split holds no window of two tokens".into()));
    }
    Ok(EvalStats {
        ppl: (nll / predicted as f64).exp(),
        avg_bits: bits / tokens as f64,
        avg_bits_with_metadata: bits_meta / tokens as f64,
        kv_cache_bytes: kv,
        kv_cache_bytes_fp16: kv16,
        router_invocations: invocations,
        tokens,
    })
}

/// Fine-tunes the router and writes `model.bin`, `router.bin`,
/// `train_log.csv` and `train_report.json` into the output directory.
pub fn cmd_train(a: &TrainArgs) -> Result<String, CliError> {
    let cfg = a.run.resolve(Shape::Toy)?;
    cfg.require_toy()?;
    let corpus = Corpus::load(&cfg)?;
    let (model, readout_nll) = backbone(&cfg, a.model.as_ref(), &corpus)?;
    let calib = calibration(&cfg, &corpus)?;
    let init = seeded_router(&cfg, model.dim());
    let out = finetune(&model, &calib, init, &cfg.finetune())?;

    fs::create_dir_all(&a.out_dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", a.out_dir.display())))?;
    let mut buf = Vec::new();
    write_model(&mut buf, &model)?;
    write_file(&a.out_dir.join("model.bin"), &buf)?;
    buf.clear();
    write_router(&mut buf, &out.params, &cfg.expert_set)?;
    write_file(&a.out_dir.join("router.bin"), &buf)?;
    write_file(&a.out_dir.join("train_log.csv"), log_to_csv(&out.log).as_bytes())?;

    let mut report = Report::new("train", &cfg)
        .echo("model", path_echo(a.model.as_ref()))
        .echo("out_dir", a.out_dir.display().to_string());
    report.metric("calibration_sequences", calib.sequences.len() as f64);
    report.metric("epochs_run", out.epochs_run as f64);
    report.metric("steps", out.log.len() as f64);
    report.metric("initial_avg_bits", out.initial_avg_bits);
    report.metric("final_avg_bits", out.final_avg_bits);
    report.metric("router_params", out.params.num_params() as f64);
    report.metric("router_bytes_fp16", (out.params.num_params() * 2) as f64);
    if let Some(last) = out.log.last() {
        report.metric("final_l_total", last.l_total);
    }
    if let Some(nll) = readout_nll {
        report.metric("readout_nll", nll);
    }
    let json = report.to_json();
    write_file(&a.out_dir.join("train_report.json"), json.as_bytes())?;
    Ok(json)
}

fn forced_policy(bits: u8) -> Result<RoutingPolicy, CliError> {
    if !SUPPORTED_BITS.contains(&bits) {
        return Err(CliError::Usage(format!("--force-bits must be one of {SUPPORTED_BITS:?}, got {bits}")));
    }
    Ok(RoutingPolicy::Fixed(bits))
}

pub fn cmd_eval(a: &EvalArgs) -> Result<Report, CliError> {
    let cfg = a.run.resolve(Shape::Toy)?;
    cfg.require_toy()?;
    let policy_choice = match (a.force_bits, &a.checkpoint) {
        (Some(b), _) => Some(forced_policy(b)?),
        (None, Some(_)) => None,
        (None, None) => return Err(CliError::Usage("eval needs --checkpoint or --force-bits".into())),
    };
    let corpus = Corpus::load(&cfg)?;
    let (model, _) = backbone(&cfg, a.model.as_ref(), &corpus)?;
    let policy = match (policy_choice, &a.checkpoint) {
        (Some(p), _) => p,
        (None, Some(path)) => RoutingPolicy::Learned {
            params: load_router(path, &cfg.expert_set, &model)?,
            experts: cfg.expert_set.clone(),
        },
        (None, None) => unreachable!("checked above"),
    };
    let stats = evaluate(&model, corpus.eval(), Some(&policy), cfg.cache(), cfg.window)?;
    let base = evaluate(&model, corpus.eval(), None, cfg.cache(), cfg.window)?;

    let mut report = Report::new("eval", &cfg)
        .echo("checkpoint", path_echo(a.checkpoint.as_ref()))
        .echo("force_bits", a.force_bits)
        .echo("model", path_echo(a.model.as_ref()));
    report.metric("ppl", stats.ppl);
    report.metric("ppl_full_precision", base.ppl);
    report.metric("ppl_ratio", stats.ppl / base.ppl);
    report.metric("avg_bits", stats.avg_bits);
    report.metric("avg_bits_with_metadata", stats.avg_bits_with_metadata);
    report.metric("kv_cache_bytes", stats.kv_cache_bytes as f64);
    report.metric("kv_cache_bytes_fp16", stats.kv_cache_bytes_fp16 as f64);
    report.metric("router_invocations", stats.router_invocations as f64);
    report.metric("eval_tokens", stats.tokens as f64);
    if let Some(path) = &a.dump_cache {
        let text = corpus.eval();
        let window = &text[..cfg.window.min(text.len())];
        let cache = prefill(&model, window, &policy, cfg.cache())?.cache;
        let mut bytes = Vec::new();
        write_cache_dump(&mut bytes, &cache)?;
        write_file(path, &bytes)?;
    }
    if let Some(p) = &a.out {
        write_file(p, report.to_json().as_bytes())?;
    }
    Ok(report)
}

/// Strategy for `blocks` blocks of `seq_len` tokens in which every
/// routable chunk is assigned `bits`, with RF, RS and residual handling.
pub fn planned_strategy(blocks: usize, seq_len: usize, plan: PlanConfig, bits: u8) -> Result<(StrategyMap, usize), CliError> {
    let mut planner = StrategyPlanner::new(plan, seq_len)?;
    for _ in 0..blocks {
        planner.plan_next_block(|_, _| Ok(bits))?;
    }
    Ok(planner.finish())
}

pub fn cmd_memory_report(a: &MemoryArgs) -> Result<String, CliError> {
    let cfg = a.run.resolve(Shape::Llama2_13b)?;
    let lengths: Vec<usize> = parse_list(&a.lengths, "--lengths")?;
    if lengths.is_empty() {
        return Err(CliError::Usage("--lengths is empty".into()));
    }
    forced_policy(a.force_bits)?;
    let shape: ModelShape = cfg.preset.model_shape();
    let weights = cfg.preset.weight_params() * ModelShape::BYTES_PER_ELEM_FP16 as u64;
    let meta = a.with_metadata.then_some(MetadataAccounting { group_size: cfg.quant_group_size });
    let plan = cfg.cache().plan();
    let mut csv = format!("{MEMORY_HEADER}\n");
    for &len in &lengths {
        let fp16 = kv_cache_bytes(&shape, len, BitsPlan::Uniform(16), None)?;
        let (strategy, _) = planned_strategy(shape.layers, len, plan, a.force_bits)?;
        let mixed = kv_cache_bytes(&shape, len, BitsPlan::Strategy(&strategy), meta)?;
        csv.push_str(&format!("{len},{weights},{fp16},{mixed}\n"));
    }
    emit(a.out.as_ref(), csv)
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

pub fn cmd_latency(a: &LatencyArgs) -> Result<String, CliError> {
    let cfg = a.run.resolve(Shape::Toy)?;
    cfg.require_toy()?;
    let lengths: Vec<usize> = parse_list(&a.lengths, "--lengths")?;
    if a.repeats == 0 {
        return Err(CliError::Usage("--repeats must be positive".into()));
    }
    let corpus = Corpus::load(&cfg)?;
    let model = match &a.model {
        Some(p) => read_model(open(p)?).map_err(|e| CliError::checkpoint(p, e))?,
        None => ToyTransformer::seeded(ToyConfig::default(), cfg.seed)?,
    };
    for &len in &lengths {
        if len == 0 || len + a.decode_steps > model.config.max_seq {
            return Err(CliError::Usage(format!(
                "length {len} plus {} decode steps must fit in {} positions",
                a.decode_steps, model.config.max_seq
            )));
        }
    }
    let params = match &a.checkpoint {
        Some(p) => load_router(p, &cfg.expert_set, &model)?,
        None => seeded_router(&cfg, model.dim()),
    };
    let policy = RoutingPolicy::Learned { params, experts: cfg.expert_set.clone() };
    let variants = [
        ("full", cfg.rf, cfg.rs_group_size),
        ("no_rf", false, cfg.rs_group_size),
        ("no_rs", cfg.rf, 1),
        ("no_rf_no_rs", false, 1),
    ];
    let text = corpus.eval();
    let mut csv = format!("{LATENCY_HEADER}\n");
    for &len in &lengths {
        let prompt: Vec<u8> = text.iter().cycle().take(len).copied().collect();
        for (name, rf, gs) in variants {
            let cache_cfg = CacheConfig { rf, rs_group_size: gs, ..cfg.cache() };
            let mut prefill_ms = Vec::with_capacity(a.repeats);
            let mut decode_ms = Vec::with_capacity(a.repeats);
            let mut invocations = 0;
            // One warm-up run, then the timed ones.
            for rep in 0..=a.repeats {
                let t0 = Instant::now();
                let pre = prefill(&model, &prompt, &policy, cache_cfg)?;
                let t1 = Instant::now();
                let mut next = argmax(pre.last_logits()) as u8;
                let mut cache = pre.cache;
                for _ in 0..a.decode_steps {
                    next = decode_step(&model, &mut cache, &policy, next)?.next_token;
                }
                let t2 = Instant::now();
                invocations = cache.router_invocations();
                if rep > 0 {
                    prefill_ms.push((t1 - t0).as_secs_f64() * 1e3);
                    decode_ms.push((t2 - t1).as_secs_f64() * 1e3 / a.decode_steps.max(1) as f64);
                }
            }
            csv.push_str(&format!(
                "{len},{name},{},{rf},{gs},{invocations},{:.4},{:.4}\n",
                cfg.chunk_size,
                median(prefill_ms),
                median(decode_ms)
            ));
        }
    }
    emit(a.out.as_ref(), csv)
}

pub fn cmd_attn_probe(a: &ProbeArgs) -> Result<String, CliError> {
    let cfg = a.run.resolve(Shape::Toy)?;
    cfg.require_toy()?;
    if a.k == 0 || a.k >= a.length {
        return Err(CliError::Usage(format!("--k must lie in [1, {}), got {}", a.length, a.k)));
    }
    let masses = if a.synthetic_uniform {
        let c = ToyConfig::default();
        let t = a.length;
        let uniform = Matrix::from_vec(t, t, vec![1.0 / t as f64; t * t])?;
        initial_attention_mass(&vec![vec![uniform; c.heads]; c.layers], a.k)
    } else {
        let corpus = Corpus::load(&cfg)?;
        let (model, _) = backbone(&cfg, a.model.as_ref(), &corpus)?;
        if a.length > model.config.max_seq || a.length > corpus.eval().len() {
            return Err(CliError::Usage(format!("--length {} exceeds the model or evaluation split", a.length)));
        }
        attn_probe(&model, &corpus.eval()[..a.length], a.k)?
    };
    let uniform = a.k as f64 / a.length as f64;
    let mut csv = format!("{PROBE_HEADER}\n");
    for (l, m) in masses.iter().enumerate() {
        csv.push_str(&format!("{l},{m},{uniform}\n"));
    }
    emit(a.out.as_ref(), csv)
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<Report, CliError> {
    let cfg = a.run.resolve(Shape::Toy)?;
    cfg.require_toy()?;
    let corpus = Corpus::load(&cfg)?;
    let (model, _) = backbone(&cfg, a.model.as_ref(), &corpus)?;
    let params = load_router(&a.checkpoint, &cfg.expert_set, &model)?;
    let policy = RoutingPolicy::Learned { params, experts: cfg.expert_set.clone() };
    let variants = [
        ("full", cfg.rf, cfg.rs_group_size),
        ("no_rf", false, cfg.rs_group_size),
        ("no_rs", cfg.rf, 1),
        ("gs2", cfg.rf, 2),
        ("gs3", cfg.rf, 3),
        ("gs4", cfg.rf, 4),
    ];
    let mut report = Report::new("ablate", &cfg)
        .echo("checkpoint", a.checkpoint.display().to_string())
        .echo("model", path_echo(a.model.as_ref()))
        .echo("variants", variants.iter().map(|v| v.0).collect::<Vec<_>>());
    let base = evaluate(&model, corpus.eval(), None, cfg.cache(), cfg.window)?;
    report.metric("full_precision.ppl", base.ppl);
    for (name, rf, gs) in variants {
        let cache = CacheConfig { rf, rs_group_size: gs, ..cfg.cache() };
        let s = evaluate(&model, corpus.eval(), Some(&policy), cache, cfg.window)?;
        report.metric(&format!("{name}.ppl"), s.ppl);
        report.metric(&format!("{name}.avg_bits"), s.avg_bits);
        report.metric(&format!("{name}.router_invocations"), s.router_invocations as f64);
    }
    if let Some(p) = &a.out {
        write_file(p, report.to_json().as_bytes())?;
    }
    Ok(report)
}

pub fn cmd_lambda_sweep(a: &SweepArgs) -> Result<String, CliError> {
    let cfg = a.run.resolve(Shape::Toy)?;
    cfg.require_toy()?;
    let lambdas: Vec<f64> = parse_list(&a.lambdas, "--lambdas")?;
    if let Some(bad) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(CliError::Usage(format!("lambda {bad} is outside [0, 1]")));
    }
    let corpus = Corpus::load(&cfg)?;
    let (model, _) = backbone(&cfg, a.model.as_ref(), &corpus)?;
    let calib = calibration(&cfg, &corpus)?;
    let mut csv = format!("{SWEEP_HEADER}\n");
    for &lambda in &lambdas {
        let ft = moqae_core::trainer::FinetuneConfig { lambda, ..cfg.finetune() };
        let out = finetune(&model, &calib, seeded_router(&cfg, model.dim()), &ft)?;
        let policy = RoutingPolicy::Learned { params: out.params, experts: cfg.expert_set.clone() };
        let s = evaluate(&model, corpus.eval(), Some(&policy), cfg.cache(), cfg.window)?;
        csv.push_str(&format!(
            "{lambda},{},{},{},{},{}\n",
            cfg.mem_penalty, out.initial_avg_bits, out.final_avg_bits, s.avg_bits, s.ppl
        ));
    }
    emit(a.out.as_ref(), csv)
}
