//! Settings resolution: command-line flags, then `CHIRPE_*` environment
//! variables, then the TOML config file, then built-in defaults.

use std::path::{Path, PathBuf};
use std::time::Duration;

use chirpe_core::classifier::{TrainConfig, DEFAULT_DECISION_THRESHOLD, DEFAULT_MAX_CHUNK_TOKENS};
use chirpe_core::evaluation::ModelSettings;
use chirpe_core::gateway::{GatewayConfig, GenSettings, RetryPolicy, DEFAULT_TIMEOUT};
use chirpe_core::pipeline::PipelineConfig;
use chirpe_core::segmenter::DEFAULT_THRESHOLD;
use chirpe_core::summarizer::SummaryPolicy;
use clap::Args;
use serde::{Deserialize, Serialize};

pub const DEFAULT_OUT: &str = "chirpe-out";
pub const DEFAULT_SEED: u64 = 42;

/// Options shared by every command. Each flag can also be set through the
/// environment variable shown in its help, or as the same key (with
/// underscores) in the `--config` file.
#[derive(Debug, Clone, Default, Args)]
pub struct GlobalArgs {
    /// TOML config file
    #[arg(long, global = true, env = "CHIRPE_CONFIG")]
    pub config: Option<PathBuf>,
    /// Question bank JSON (default: built-in PSYCHS bank)
    #[arg(long, global = true, env = "CHIRPE_BANK")]
    pub bank: Option<PathBuf>,
    /// Corpus directory
    #[arg(long, global = true, env = "CHIRPE_CORPUS")]
    pub corpus: Option<PathBuf>,
    /// Trained model JSON
    #[arg(long, global = true, env = "CHIRPE_MODEL")]
    pub model: Option<PathBuf>,
    /// Output directory; nothing is written outside it [default: chirpe-out]
    #[arg(long, global = true, env = "CHIRPE_OUT")]
    pub out: Option<PathBuf>,
    /// Segmentation similarity threshold, 0-100 [default: 80]
    #[arg(long, global = true, env = "CHIRPE_THRESHOLD")]
    pub threshold: Option<u32>,
    /// Maximum tokens per classifier chunk [default: 512]
    #[arg(long, global = true, env = "CHIRPE_MAX_CHUNK_TOKENS")]
    pub max_chunk_tokens: Option<usize>,
    /// CHR decision threshold on probabilities [default: 0.5]
    #[arg(long, global = true, env = "CHIRPE_DECISION_THRESHOLD")]
    pub decision_threshold: Option<f64>,
    /// Seed for every random choice [default: 42]
    #[arg(long, global = true, env = "CHIRPE_SEED")]
    pub seed: Option<u64>,
    /// Worker threads across transcripts [default: 1]
    #[arg(long, global = true, env = "CHIRPE_JOBS")]
    pub jobs: Option<usize>,
    /// Summary policy: extractive, llm or llm_with_fallback [default: extractive]
    #[arg(long, global = true, env = "CHIRPE_POLICY")]
    pub policy: Option<String>,
    /// Minimum vocabulary frequency [default: 1]
    #[arg(long, global = true, env = "CHIRPE_MIN_FREQUENCY")]
    pub min_frequency: Option<usize>,
    /// Training learning rate [default: 2e-5]
    #[arg(long, global = true, env = "CHIRPE_LEARNING_RATE")]
    pub learning_rate: Option<f64>,
    /// Training batch size [default: 8]
    #[arg(long, global = true, env = "CHIRPE_BATCH_SIZE")]
    pub batch_size: Option<usize>,
    /// Training epochs [default: 3]
    #[arg(long, global = true, env = "CHIRPE_EPOCHS")]
    pub epochs: Option<usize>,
    /// L2 weight decay [default: 0]
    #[arg(long, global = true, env = "CHIRPE_WEIGHT_DECAY")]
    pub weight_decay: Option<f64>,
    /// Text-generation endpoint (API key from CHIRPE_LLM_KEY)
    #[arg(long, global = true, env = "CHIRPE_LLM_URL")]
    pub llm_url: Option<String>,
    /// Per-attempt timeout in seconds [default: 60]
    #[arg(long, global = true, env = "CHIRPE_LLM_TIMEOUT_S")]
    pub llm_timeout_s: Option<f64>,
    /// Retries after a failed attempt [default: 3]
    #[arg(long, global = true, env = "CHIRPE_LLM_RETRIES")]
    pub llm_retries: Option<u32>,
    /// Word cap per generation [default: 512]
    #[arg(long, global = true, env = "CHIRPE_MAX_WORDS")]
    pub max_words: Option<u32>,
    /// Remote classifier endpoint for `classify --remote`
    #[arg(long, global = true, env = "CHIRPE_CLASSIFIER_URL")]
    pub classifier_url: Option<String>,
    /// Log filter, e.g. info or chirpe_core=debug [default: info]
    #[arg(long, global = true, env = "CHIRPE_LOG")]
    pub log_level: Option<String>,
}

/// Keys accepted in the config file.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub bank: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub threshold: Option<u32>,
    pub max_chunk_tokens: Option<usize>,
    pub decision_threshold: Option<f64>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub policy: Option<String>,
    pub min_frequency: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub weight_decay: Option<f64>,
    pub llm_url: Option<String>,
    pub llm_timeout_s: Option<f64>,
    pub llm_retries: Option<u32>,
    pub max_words: Option<u32>,
    pub classifier_url: Option<String>,
    pub log_level: Option<String>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, String> {
        let raw = std::fs::read_to_string(path).map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&raw).map_err(|e| format!("invalid config {}: {e}", path.display()))
    }
}

/// Fully resolved settings; logged at the start of every command.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Config {
    pub bank: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: PathBuf,
    pub threshold: u32,
    pub max_chunk_tokens: usize,
    pub decision_threshold: f64,
    pub seed: u64,
    pub jobs: usize,
    pub policy: SummaryPolicy,
    pub min_frequency: usize,
    pub train: TrainConfig,
    pub llm_url: Option<String>,
    pub llm_timeout_s: f64,
    pub llm_retries: u32,
    pub gen: GenSettings,
    pub classifier_url: Option<String>,
    pub log_level: String,
}

impl Config {
    pub fn resolve(args: &GlobalArgs) -> Result<Self, String> {
        let file = match &args.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        macro_rules! pick {
            ($field:ident) => {
                args.$field.clone().or(file.$field.clone())
            };
        }
        let policy = match pick!(policy) {
            Some(p) => p.parse::<SummaryPolicy>().map_err(|e| e.to_string())?,
            None => SummaryPolicy::Extractive,
        };
        let defaults = TrainConfig::default();
        let train = TrainConfig {
            learning_rate: pick!(learning_rate).unwrap_or(defaults.learning_rate),
            batch_size: pick!(batch_size).unwrap_or(defaults.batch_size),
            epochs: pick!(epochs).unwrap_or(defaults.epochs),
            weight_decay: pick!(weight_decay).unwrap_or(defaults.weight_decay),
            ..defaults
        };
        let gen_defaults = GenSettings::default();
        let cfg = Self {
            bank: pick!(bank),
            corpus: pick!(corpus),
            model: pick!(model),
            out: pick!(out).unwrap_or_else(|| PathBuf::from(DEFAULT_OUT)),
            threshold: pick!(threshold).unwrap_or(DEFAULT_THRESHOLD),
            max_chunk_tokens: pick!(max_chunk_tokens).unwrap_or(DEFAULT_MAX_CHUNK_TOKENS),
            decision_threshold: pick!(decision_threshold).unwrap_or(DEFAULT_DECISION_THRESHOLD),
            seed: pick!(seed).unwrap_or(DEFAULT_SEED),
            jobs: pick!(jobs).unwrap_or(1),
            policy,
            min_frequency: pick!(min_frequency).unwrap_or(1),
            train,
            llm_url: pick!(llm_url),
            llm_timeout_s: pick!(llm_timeout_s).unwrap_or(DEFAULT_TIMEOUT.as_secs_f64()),
            llm_retries: pick!(llm_retries).unwrap_or(RetryPolicy::default().max_retries),
            gen: GenSettings {
                max_words: pick!(max_words).unwrap_or(gen_defaults.max_words),
                ..gen_defaults
            },
            classifier_url: pick!(classifier_url),
            log_level: pick!(log_level).unwrap_or_else(|| "info".to_string()),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), String> {
        if self.threshold > 100 {
            return Err(format!("threshold {} is outside 0..=100", self.threshold));
        }
        if self.max_chunk_tokens == 0 {
            return Err("max_chunk_tokens must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.decision_threshold) {
            return Err(format!("decision_threshold {} is outside [0, 1]", self.decision_threshold));
        }
        if self.jobs == 0 {
            return Err("jobs must be positive".into());
        }
        if !(self.llm_timeout_s.is_finite() && self.llm_timeout_s > 0.0) {
            return Err("llm_timeout_s must be positive".into());
        }
        Ok(())
    }

    pub fn model_settings(&self) -> ModelSettings {
        ModelSettings {
            min_frequency: self.min_frequency,
            max_chunk_tokens: self.max_chunk_tokens,
            decision_threshold: self.decision_threshold,
            seed: self.seed,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            seg_threshold: self.threshold,
            policy: self.policy,
            gen: self.gen,
            model: self.model_settings(),
            train: self.train,
            split_seed: self.seed,
            jobs: self.jobs,
        }
    }

    pub fn endpoint(&self, url: &str) -> GatewayConfig {
        let mut g = GatewayConfig::new(url);
        g.key = std::env::var(chirpe_core::gateway::ENV_KEY)
            .ok()
            .filter(|k| !k.is_empty())
            .map(chirpe_core::gateway::ApiKey::new);
        g.timeout = Duration::from_secs_f64(self.llm_timeout_s);
        g.retry.max_retries = self.llm_retries;
        g
    }

    pub fn llm_endpoint(&self) -> Option<GatewayConfig> {
        self.llm_url.as_deref().map(|u| self.endpoint(u))
    }

    pub fn classifier_endpoint(&self) -> Option<GatewayConfig> {
        self.classifier_url.as_deref().map(|u| self.endpoint(u))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = Config::resolve(&GlobalArgs::default()).unwrap();
        assert_eq!(c.threshold, 80);
        assert_eq!(c.max_chunk_tokens, 512);
        assert_eq!(c.decision_threshold, 0.5);
        assert_eq!(c.policy, SummaryPolicy::Extractive);
        assert_eq!(c.out, PathBuf::from(DEFAULT_OUT));
    }

    #[test]
    fn flags_beat_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "threshold = 70\nseed = 9\npolicy = \"llm\"\n").unwrap();
        let args = GlobalArgs {
            config: Some(path),
            threshold: Some(90),
            ..GlobalArgs::default()
        };
        let c = Config::resolve(&args).unwrap();
        assert_eq!((c.threshold, c.seed, c.policy), (90, 9, SummaryPolicy::Llm));
    }

    #[test]
    fn unknown_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "thresold = 70\n").unwrap();
        let args = GlobalArgs {
            config: Some(path),
            ..GlobalArgs::default()
        };
        assert!(Config::resolve(&args).is_err());
    }
}
