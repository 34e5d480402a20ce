use std::path::PathBuf;
use std::str::FromStr;

use clap::Args;
use moqae_core::model::{CacheConfig, ToyConfig};
use moqae_core::quant::ModelShape;
use moqae_core::router::ExpertSet;
use moqae_core::trainer::{FinetuneConfig, MemPenalty};
use serde::Serialize;

use crate::CliError;

/// Flags shared by every subcommand.
#[derive(Args, Clone, Debug)]
pub struct RunArgs {
    /// Tokens per routed chunk.
    #[arg(long, default_value_t = 32)]
    pub chunk_size: usize,
    /// Weight of the model loss against the memory loss, in [0, 1].
    #[arg(long, default_value_t = 0.5)]
    pub lambda: f64,
    /// Routing-sharing group size: consecutive blocks reusing one router decision.
    #[arg(long = "group-size", default_value_t = 3)]
    pub rs_group_size: usize,
    /// Quantization group size (elements sharing a scale and zero point).
    #[arg(long, default_value_t = 32)]
    pub quant_group_size: usize,
    /// Expert bit-widths, strictly decreasing, comma separated.
    #[arg(long, default_value = "16,4,2")]
    pub experts: String,
    /// Disable routing freezing (chunk 0 of every block pinned to 16 bits).
    #[arg(long)]
    pub no_rf: bool,
    /// Memory penalty variant: as_written or proportional.
    #[arg(long, default_value = "as_written")]
    pub mem_penalty: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Training corpus; the bundled toy corpus when omitted.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Fraction of training windows used to fine-tune the router.
    #[arg(long, default_value_t = 0.05)]
    pub calib_frac: f64,
    /// Model shape preset: toy, llama2-7b or llama2-13b.
    #[arg(long)]
    pub shape: Option<String>,
    /// Router fine-tuning epochs (stops early on a loss plateau).
    #[arg(long, default_value_t = 3)]
    pub epochs: usize,
    /// Evaluation and calibration window length in tokens.
    #[arg(long, default_value_t = 128)]
    pub window: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Toy,
    Llama2_7b,
    Llama2_13b,
}

impl Shape {
    pub fn name(self) -> &'static str {
        match self {
            Shape::Toy => "toy",
            Shape::Llama2_7b => "llama2-7b",
            Shape::Llama2_13b => "llama2-13b",
        }
    }

    pub fn model_shape(self) -> ModelShape {
        match self {
            Shape::Toy => ToyConfig::default().shape(),
            Shape::Llama2_7b => ModelShape::llama2_7b(),
            Shape::Llama2_13b => ModelShape::llama2_13b(),
        }
    }

    /// Parameter count of the model weights.
    pub fn weight_params(self) -> u64 {
        match self {
            Shape::Toy => {
                let c = ToyConfig::default();
                let (d, f, v) = (c.dim() as u64, c.ffn_dim as u64, moqae_core::model::VOCAB as u64);
                let per_layer = 4 * d * d + 2 * d * f + 2 * d;
                v * d + c.max_seq as u64 * d + c.layers as u64 * per_layer + d + d * v + v
            }
            Shape::Llama2_7b => 6_738_415_616,
            Shape::Llama2_13b => 13_015_864_320,
        }
    }
}

impl FromStr for Shape {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "toy" => Ok(Shape::Toy),
            "llama2-7b" => Ok(Shape::Llama2_7b),
            "llama2-13b" => Ok(Shape::Llama2_13b),
            other => Err(CliError::Usage(format!("unknown shape preset {other:?}"))),
        }
    }
}

/// Effective configuration after defaults, echoed into every report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub calib_frac: f64,
    pub chunk_size: usize,
    pub corpus: String,
    pub epochs: usize,
    pub experts: Vec<u8>,
    pub lambda: f64,
    pub mem_penalty: String,
    pub quant_group_size: usize,
    pub rf: bool,
    pub rs_group_size: usize,
    pub seed: u64,
    pub shape: String,
    pub window: usize,
    #[serde(skip)]
    pub corpus_path: Option<PathBuf>,
    #[serde(skip)]
    pub preset: Shape,
    #[serde(skip)]
    pub expert_set: ExpertSet,
    #[serde(skip)]
    pub penalty: MemPenalty,
}

pub const BUNDLED_CORPUS: &str = "<bundled toy corpus>";

pub fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse().map_err(|_| CliError::Usage(format!("bad {what} entry {p:?}"))))
        .collect()
}

impl RunArgs {
    pub fn resolve(&self, default_shape: Shape) -> Result<RunConfig, CliError> {
        let bits: Vec<u8> = parse_list(&self.experts, "--experts")?;
        let expert_set = ExpertSet::new(bits.clone()).map_err(|e| CliError::Usage(format!("--experts: {e}")))?;
        let penalty: MemPenalty =
            self.mem_penalty.parse().map_err(|e| CliError::Usage(format!("--mem-penalty: {e}")))?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(CliError::Usage(format!("--lambda must lie in [0, 1], got {}", self.lambda)));
        }
        if !(self.calib_frac > 0.0 && self.calib_frac <= 1.0) {
            return Err(CliError::Usage(format!("--calib-frac must lie in (0, 1], got {}", self.calib_frac)));
        }
        for (name, v) in [
            ("--chunk-size", self.chunk_size),
            ("--group-size", self.rs_group_size),
            ("--quant-group-size", self.quant_group_size),
        ] {
            if v == 0 {
                return Err(CliError::Usage(format!("{name} must be positive")));
            }
        }
        if self.window < 2 || self.window > ToyConfig::default().max_seq {
            return Err(CliError::Usage(format!(
                "--window must lie in [2, {}], got {}",
                ToyConfig::default().max_seq,
                self.window
            )));
        }
        let preset = match &self.shape {
            Some(s) => s.parse()?,
            None => default_shape,
        };
        Ok(RunConfig {
            calib_frac: self.calib_frac,
            chunk_size: self.chunk_size,
            corpus: self
                .corpus
                .as_ref()
                .map_or_else(|| BUNDLED_CORPUS.to_string(), |p| p.display().to_string()),
            epochs: self.epochs,
            experts: bits,
            lambda: self.lambda,
            mem_penalty: penalty.as_str().to_string(),
            quant_group_size: self.quant_group_size,
            rf: !self.no_rf,
            rs_group_size: self.rs_group_size,
            seed: self.seed,
            shape: preset.name().to_string(),
            window: self.window,
            corpus_path: self.corpus.clone(),
            preset,
            expert_set,
            penalty,
        })
    }
}

impl RunConfig {
    pub fn cache(&self) -> CacheConfig {
        CacheConfig {
            chunk_size: self.chunk_size,
            rf: self.rf,
            rs_group_size: self.rs_group_size,
            group_size: self.quant_group_size,
        }
    }

    pub fn finetune(&self) -> FinetuneConfig {
        FinetuneConfig {
            lambda: self.lambda,
            penalty: self.penalty,
            experts: self.expert_set.clone(),
            cache: self.cache(),
            epochs: self.epochs,
            seed: self.seed,
            ..FinetuneConfig::default()
        }
    }

    /// Commands that run the toy transformer reject the large presets.
    pub fn require_toy(&self) -> Result<(), CliError> {
        if self.preset != Shape::Toy {
            return Err(CliError::Usage(format!(
                "shape {} is only available to memory-report",
                self.preset.name()
            )));
        }
        Ok(())
    }
}
