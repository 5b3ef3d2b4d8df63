//! Run configuration: every hyperparameter and path of the end-to-end
//! pipeline, read from flat `key = value` files.
//!
//! Precedence is flag > file > default. Lines starting with `#` are comments;
//! unknown keys are errors.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::corpus::{SplitSpec, SynthSpec};
use crate::encoder::ContrastiveConfig;
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionLevel};
use crate::kmeans::KMeansConfig;
use crate::model::{TrainConfig, TrainableScope};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// JSONL corpus; the synthetic generator is used when absent.
    pub corpus: Option<PathBuf>,
    pub data_dir: PathBuf,
    pub model_dir: PathBuf,
    /// Defaults to `<model_dir>/encoder`.
    pub encoder: Option<PathBuf>,
    /// Defaults to `<model_dir>/signatures`.
    pub signatures: Option<PathBuf>,
    pub word_list: Option<PathBuf>,
    pub seed: u64,

    pub synth_domains: usize,
    pub synth_docs_per_domain: usize,
    pub synth_jargon_vocab: usize,
    pub synth_lay_vocab: usize,
    pub synth_function_vocab: usize,
    pub synth_min_len: usize,
    pub synth_max_len: usize,
    pub synth_follow_prob: f64,
    pub synth_jargon_prob: f64,

    pub split_train: f64,
    pub split_valid: f64,
    pub split_test: f64,

    pub model_dim: usize,
    pub context_window: usize,
    pub base_lr: f64,
    pub base_epochs: usize,
    pub base_batch: usize,

    pub lora_rank: usize,
    pub lora_lr: f64,
    pub lora_batch: usize,
    pub lora_epochs: usize,

    pub feature_dim: usize,
    pub hash_seed: u64,
    pub encoder_dim: usize,
    pub encoder_lr: f64,
    pub encoder_batch: usize,
    pub encoder_epochs: usize,
    pub sample_size: usize,
    pub temperature: f64,
    pub negatives: usize,
    pub normalize_embeddings: bool,

    pub clusters: usize,
    pub kmeans_restarts: usize,
    pub kmeans_max_iter: usize,
    pub kmeans_tol: f64,

    pub beta: f64,
    /// Token cap for training sequences and for decoding.
    pub doc_max_len: usize,
    pub normalize_weights: bool,
    pub fusion_level: FusionLevel,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        Self {
            corpus: None,
            data_dir: PathBuf::from("data"),
            model_dir: PathBuf::from("model"),
            encoder: None,
            signatures: None,
            word_list: None,
            seed: 0,

            synth_domains: synth.n_domains,
            synth_docs_per_domain: synth.docs_per_domain,
            synth_jargon_vocab: synth.jargon_vocab_per_domain,
            synth_lay_vocab: synth.shared_lay_vocab,
            synth_function_vocab: synth.function_vocab,
            synth_min_len: synth.doc_len_range.0,
            synth_max_len: synth.doc_len_range.1,
            synth_follow_prob: synth.follow_prob,
            synth_jargon_prob: synth.jargon_prob,

            split_train: 0.8,
            split_valid: 0.1,
            split_test: 0.1,

            model_dim: 32,
            context_window: 1,
            base_lr: 0.1,
            base_epochs: 5,
            base_batch: 16,

            lora_rank: 8,
            lora_lr: 1e-4,
            lora_batch: 4,
            lora_epochs: 3,

            feature_dim: 1024,
            hash_seed: 0,
            encoder_dim: 8,
            encoder_lr: 1e-5,
            encoder_batch: 16,
            encoder_epochs: 1,
            sample_size: 500,
            temperature: 0.5,
            negatives: 5,
            normalize_embeddings: true,

            clusters: 10,
            kmeans_restarts: 20,
            kmeans_max_iter: 100,
            kmeans_tol: 1e-6,

            beta: 0.5,
            doc_max_len: 2048,
            normalize_weights: false,
            fusion_level: FusionLevel::Logits,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {value:?}"))),
    }
}

fn with_context(context: &str, e: Error) -> Error {
    match e {
        Error::Config(msg) => Error::Config(format!("{context}: {msg}")),
        other => other,
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    /// Learning rates and epoch counts sized for the synthetic corpus and a
    /// 32-wide toy model. Mirrors `configs/desk.conf`.
    pub fn desk_scale() -> Self {
        Self {
            base_lr: 0.5,
            base_epochs: 8,
            lora_lr: 0.5,
            lora_epochs: 12,
            encoder_lr: 0.5,
            encoder_epochs: 20,
            doc_max_len: 64,
            ..Self::default()
        }
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text)
            .map_err(|e| with_context(&path.display().to_string(), e))
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            self.set(key.trim(), value.trim())
                .map_err(|e| with_context(&format!("line {}", n + 1), e))?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "corpus" => self.corpus = opt_path(value),
            "data_dir" => self.data_dir = PathBuf::from(value),
            "model_dir" => self.model_dir = PathBuf::from(value),
            "encoder" => self.encoder = opt_path(value),
            "signatures" => self.signatures = opt_path(value),
            "word_list" => self.word_list = opt_path(value),
            "seed" => self.seed = parse_num(key, value)?,
            "synth_domains" => self.synth_domains = parse_num(key, value)?,
            "synth_docs_per_domain" => self.synth_docs_per_domain = parse_num(key, value)?,
            "synth_jargon_vocab" => self.synth_jargon_vocab = parse_num(key, value)?,
            "synth_lay_vocab" => self.synth_lay_vocab = parse_num(key, value)?,
            "synth_function_vocab" => self.synth_function_vocab = parse_num(key, value)?,
            "synth_min_len" => self.synth_min_len = parse_num(key, value)?,
            "synth_max_len" => self.synth_max_len = parse_num(key, value)?,
            "synth_follow_prob" => self.synth_follow_prob = parse_num(key, value)?,
            "synth_jargon_prob" => self.synth_jargon_prob = parse_num(key, value)?,
            "split_train" => self.split_train = parse_num(key, value)?,
            "split_valid" => self.split_valid = parse_num(key, value)?,
            "split_test" => self.split_test = parse_num(key, value)?,
            "model_dim" => self.model_dim = parse_num(key, value)?,
            "context_window" => self.context_window = parse_num(key, value)?,
            "base_lr" => self.base_lr = parse_num(key, value)?,
            "base_epochs" => self.base_epochs = parse_num(key, value)?,
            "base_batch" => self.base_batch = parse_num(key, value)?,
            "lora_rank" => self.lora_rank = parse_num(key, value)?,
            "lora_lr" => self.lora_lr = parse_num(key, value)?,
            "lora_batch" => self.lora_batch = parse_num(key, value)?,
            "lora_epochs" => self.lora_epochs = parse_num(key, value)?,
            "feature_dim" => self.feature_dim = parse_num(key, value)?,
            "hash_seed" => self.hash_seed = parse_num(key, value)?,
            "encoder_dim" => self.encoder_dim = parse_num(key, value)?,
            "encoder_lr" => self.encoder_lr = parse_num(key, value)?,
            "encoder_batch" => self.encoder_batch = parse_num(key, value)?,
            "encoder_epochs" => self.encoder_epochs = parse_num(key, value)?,
            "sample_size" => self.sample_size = parse_num(key, value)?,
            "temperature" => self.temperature = parse_num(key, value)?,
            "negatives" => self.negatives = parse_num(key, value)?,
            "normalize_embeddings" => self.normalize_embeddings = parse_bool(key, value)?,
            "clusters" => self.clusters = parse_num(key, value)?,
            "kmeans_restarts" => self.kmeans_restarts = parse_num(key, value)?,
            "kmeans_max_iter" => self.kmeans_max_iter = parse_num(key, value)?,
            "kmeans_tol" => self.kmeans_tol = parse_num(key, value)?,
            "beta" => self.beta = parse_num(key, value)?,
            "doc_max_len" => self.doc_max_len = parse_num(key, value)?,
            "normalize_weights" => self.normalize_weights = parse_bool(key, value)?,
            "fusion_level" => self.fusion_level = value.parse()?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a form [`RunConfig::apply_text`]
    /// reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("corpus", show_path(&self.corpus));
        put("data_dir", self.data_dir.display().to_string());
        put("model_dir", self.model_dir.display().to_string());
        put("encoder", show_path(&self.encoder));
        put("signatures", show_path(&self.signatures));
        put("word_list", show_path(&self.word_list));
        put("seed", self.seed.to_string());
        put("synth_domains", self.synth_domains.to_string());
        put("synth_docs_per_domain", self.synth_docs_per_domain.to_string());
        put("synth_jargon_vocab", self.synth_jargon_vocab.to_string());
        put("synth_lay_vocab", self.synth_lay_vocab.to_string());
        put("synth_function_vocab", self.synth_function_vocab.to_string());
        put("synth_min_len", self.synth_min_len.to_string());
        put("synth_max_len", self.synth_max_len.to_string());
        put("synth_follow_prob", self.synth_follow_prob.to_string());
        put("synth_jargon_prob", self.synth_jargon_prob.to_string());
        put("split_train", self.split_train.to_string());
        put("split_valid", self.split_valid.to_string());
        put("split_test", self.split_test.to_string());
        put("model_dim", self.model_dim.to_string());
        put("context_window", self.context_window.to_string());
        put("base_lr", self.base_lr.to_string());
        put("base_epochs", self.base_epochs.to_string());
        put("base_batch", self.base_batch.to_string());
        put("lora_rank", self.lora_rank.to_string());
        put("lora_lr", self.lora_lr.to_string());
        put("lora_batch", self.lora_batch.to_string());
        put("lora_epochs", self.lora_epochs.to_string());
        put("feature_dim", self.feature_dim.to_string());
        put("hash_seed", self.hash_seed.to_string());
        put("encoder_dim", self.encoder_dim.to_string());
        put("encoder_lr", self.encoder_lr.to_string());
        put("encoder_batch", self.encoder_batch.to_string());
        put("encoder_epochs", self.encoder_epochs.to_string());
        put("sample_size", self.sample_size.to_string());
        put("temperature", self.temperature.to_string());
        put("negatives", self.negatives.to_string());
        put("normalize_embeddings", self.normalize_embeddings.to_string());
        put("clusters", self.clusters.to_string());
        put("kmeans_restarts", self.kmeans_restarts.to_string());
        put("kmeans_max_iter", self.kmeans_max_iter.to_string());
        put("kmeans_tol", self.kmeans_tol.to_string());
        put("beta", self.beta.to_string());
        put("doc_max_len", self.doc_max_len.to_string());
        put("normalize_weights", self.normalize_weights.to_string());
        put("fusion_level", self.fusion_level.to_string());
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.synth_spec().validate()?;
        self.base_train_config().validate()?;
        self.lora_train_config().validate()?;
        self.contrastive_config().validate()?;
        self.fusion_config().validate()?;
        let split = self.split_spec();
        if ((split.train + split.valid + split.test) - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split ratios must sum to 1".into()));
        }
        for (k, v) in [
            ("model_dim", self.model_dim),
            ("context_window", self.context_window),
            ("feature_dim", self.feature_dim),
            ("encoder_dim", self.encoder_dim),
            ("clusters", self.clusters),
            ("kmeans_restarts", self.kmeans_restarts),
            ("doc_max_len", self.doc_max_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{k} must be >= 1")));
            }
        }
        if self.lora_rank > self.model_dim {
            return Err(Error::Config(format!(
                "lora_rank {} exceeds model_dim {}",
                self.lora_rank, self.model_dim
            )));
        }
        Ok(())
    }

    pub fn encoder_dir(&self) -> PathBuf {
        self.encoder.clone().unwrap_or_else(|| self.model_dir.join("encoder"))
    }

    pub fn signatures_dir(&self) -> PathBuf {
        self.signatures
            .clone()
            .unwrap_or_else(|| self.model_dir.join("signatures"))
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_domains: self.synth_domains,
            docs_per_domain: self.synth_docs_per_domain,
            jargon_vocab_per_domain: self.synth_jargon_vocab,
            shared_lay_vocab: self.synth_lay_vocab,
            function_vocab: self.synth_function_vocab,
            doc_len_range: (self.synth_min_len, self.synth_max_len),
            follow_prob: self.synth_follow_prob,
            jargon_prob: self.synth_jargon_prob,
            seed: self.seed,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            train: self.split_train,
            valid: self.split_valid,
            test: self.split_test,
            seed: sub_seed(self.seed, Stage::Split),
        }
    }

    pub fn base_train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.base_lr,
            epochs: self.base_epochs,
            batch_size: self.base_batch,
            seed: sub_seed(self.seed, Stage::BaseTrain),
            rank: self.lora_rank.max(1),
            trainable_scope: TrainableScope::Full,
        }
    }

    pub fn lora_train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.lora_lr,
            epochs: self.lora_epochs,
            batch_size: self.lora_batch,
            seed: sub_seed(self.seed, Stage::LoraTrain),
            rank: self.lora_rank,
            trainable_scope: TrainableScope::LoraOnly,
        }
    }

    pub fn contrastive_config(&self) -> ContrastiveConfig {
        ContrastiveConfig {
            temperature: self.temperature,
            negatives_per_positive: self.negatives,
            learning_rate: self.encoder_lr,
            epochs: self.encoder_epochs,
            batch_size: self.encoder_batch,
            sample_size: self.sample_size,
            seed: sub_seed(self.seed, Stage::EncoderTrain),
        }
    }

    pub fn kmeans_config(&self) -> KMeansConfig {
        KMeansConfig {
            seed: sub_seed(self.seed, Stage::KMeans),
            max_iter: self.kmeans_max_iter,
            tol: self.kmeans_tol,
            restarts: self.kmeans_restarts,
        }
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            beta: self.beta,
            max_len: self.doc_max_len,
            normalize_weights: self.normalize_weights,
            level: self.fusion_level,
        }
    }
}

/// Independent seed streams derived from the run seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Split = 1,
    BaseInit = 2,
    BaseTrain = 3,
    LoraTrain = 4,
    EncoderInit = 5,
    EncoderTrain = 6,
    KMeans = 7,
    RandomSignature = 8,
}

pub fn sub_seed(seed: u64, stage: Stage) -> u64 {
    let mut z = seed.wrapping_add((stage as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_settings() {
        let c = RunConfig::default();
        assert_eq!(c.lora_rank, 8);
        assert_eq!(c.lora_lr, 1e-4);
        assert_eq!(c.lora_batch, 4);
        assert_eq!(c.encoder_lr, 1e-5);
        assert_eq!(c.encoder_batch, 16);
        assert_eq!(c.sample_size, 500);
        assert_eq!(c.clusters, 10);
        assert_eq!(c.beta, 0.5);
        assert!(!c.normalize_weights);
        assert_eq!(c.fusion_level, FusionLevel::Logits);
    }

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::desk_scale();
        c.corpus = Some(PathBuf::from("x.jsonl"));
        c.fusion_level = FusionLevel::Params;
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn parse_errors() {
        let mut c = RunConfig::default();
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("beta").is_err());
        assert!(c.apply_text("clusters = ten").is_err());
        c.apply_text("# comment\n\nbeta = 0.25\nnormalize_weights = yes")
            .unwrap();
        assert_eq!(c.beta, 0.25);
        assert!(c.normalize_weights);
    }

    #[test]
    fn stage_seeds_differ() {
        assert_ne!(sub_seed(0, Stage::Split), sub_seed(0, Stage::KMeans));
        assert_ne!(sub_seed(0, Stage::Split), sub_seed(1, Stage::Split));
    }
}
