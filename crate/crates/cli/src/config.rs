//! Flat `key = value` configuration.
//!
//! Values are layered: built-in defaults, then the config file, then `RWR_*`
//! environment variables, then command-line flags. Every layer goes through
//! [`Config::set`], so an unknown key is rejected the same way wherever it
//! comes from.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rwr::corpus::EntitySource;
use rwr::grpo::{Averaging, Optimizer};
use rwr::pipeline::VoteMode;
use rwr::retrieval::RetrieverKind;
use rwr::rewards::{Counterfactual, ImageQuerySource};

use crate::CliError;

pub const ENV_PREFIX: &str = "RWR_";

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError>
where
    T::Err: Display,
{
    value
        .parse()
        .map_err(|e: T::Err| CliError::Config(format!("key `{key}`: cannot parse `{value}`: {e}")))
}

fn show<T: Display>(v: &T) -> String {
    v.to_string()
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse_path(_key: &str, value: &str) -> Result<Option<PathBuf>, CliError> {
    Ok((!value.is_empty()).then(|| PathBuf::from(value)))
}

fn show_paths(p: &[PathBuf]) -> String {
    p.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(",")
}

fn parse_paths(_key: &str, value: &str) -> Result<Vec<PathBuf>, CliError> {
    Ok(value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(PathBuf::from).collect())
}

fn show_debug<T: std::fmt::Debug>(v: &T) -> String {
    let s = format!("{v:?}");
    let mut out = String::new();
    for (i, c) in s.chars().enumerate() {
        if c.is_uppercase() {
            if i > 0 {
                out.push('_');
            }
            out.extend(c.to_lowercase());
        } else {
            out.push(c);
        }
    }
    out
}

macro_rules! config {
    ($( $(#[doc = $doc:literal])* $field:ident : $ty:ty = $default:expr, $parse:path, $show:path; )*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct Config {
            $( $(#[doc = $doc])* pub $field: $ty, )*
        }

        impl Default for Config {
            fn default() -> Self {
                Config { $( $field: $default, )* }
            }
        }

        impl Config {
            pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
                let value = value.trim();
                match key {
                    $( stringify!($field) => self.$field = $parse(key, value)?, )*
                    _ => return Err(CliError::Config(format!("unknown config key `{key}`"))),
                }
                Ok(())
            }

            /// Every key with its current value, in declaration order.
            pub fn pairs(&self) -> Vec<(&'static str, String)> {
                vec![$( (stringify!($field), $show(&self.$field)), )*]
            }
        }
    };
}

config! {
    /// Question file (JSONL).
    qa: Option<PathBuf> = None, parse_path, show_path;
    kb: Option<PathBuf> = None, parse_path, show_path;
    /// Image/caption corpus used by confidence-driven re-retrieval.
    mm: Option<PathBuf> = None, parse_path, show_path;
    /// Entity phrases, one per line. Defaults to the option texts.
    gazetteer: Option<PathBuf> = None, parse_path, show_path;
    /// Prebuilt index written by `kb-index`; replaces `kb` when set.
    index: Option<PathBuf> = None, parse_path, show_path;
    checkpoint: Option<PathBuf> = None, parse_path, show_path;
    /// Checkpoint to continue training from instead of a fresh policy.
    init_checkpoint: Option<PathBuf> = None, parse_path, show_path;
    /// Comma-separated evaluator checkpoints for difficulty labelling.
    evaluators: Vec<PathBuf> = Vec::new(), parse_paths, show_paths;
    out: Option<PathBuf> = None, parse_path, show_path;
    seed: u64 = 0, parse, show;

    w_f: f64 = 1.0, parse, show;
    w_a: f64 = 5.0, parse, show;
    w_q: f64 = 0.4, parse, show;
    w_c: f64 = 5.0, parse, show;
    entity_source: EntitySource = EntitySource::ExplanationAndGold, parse, show_debug;
    image_query_source: ImageQuerySource = ImageQuerySource::Query, parse, show_debug;
    counterfactual: Counterfactual = Counterfactual::Delete, parse, show_debug;

    lambda: f64 = rwr::inference::DEFAULT_LAMBDA, parse, show;
    image_subsample: usize = rwr::inference::DEFAULT_IMAGE_SUBSAMPLE, parse, show;
    cdir: bool = true, parse, show;

    retriever: RetrieverKind = RetrieverKind::Lexical, parse, show_debug;
    top_k: usize = rwr::retrieval::DEFAULT_TOP_K, parse, show;
    min_chunk_words: usize = rwr::retrieval::DEFAULT_MIN_CHUNK_WORDS, parse, show;
    bm25_k1: f64 = 1.2, parse, show;
    bm25_b: f64 = 0.75, parse, show;
    dedup_documents: bool = false, parse, show;

    max_turns: usize = 4, parse, show;
    max_tokens: usize = 48, parse, show;
    /// 0 selects greedy decoding.
    temperature: f64 = 1.0, parse, show;

    embed_dim: usize = 32, parse, show;
    window: usize = rwr::policy::DEFAULT_WINDOW, parse, show;
    init_scale: f64 = 0.1, parse, show;
    /// Width of image features and of the reference text embedder.
    image_dim: usize = 32, parse, show;
    text_embed_seed: u64 = 7, parse, show;

    warm_steps: usize = 800, parse, show;
    warm_batch: usize = 32, parse, show;
    warm_lr: f64 = 0.05, parse, show;

    clip_eps: f64 = 0.2, parse, show;
    beta: f64 = 1e-3, parse, show;
    group_size: usize = 8, parse, show;
    batch_size: usize = 32, parse, show;
    inner_steps: usize = 1, parse, show;
    stage1_iterations: usize = 100, parse, show;
    stage2_iterations: usize = 100, parse, show;
    stage1_lr: f64 = 0.03, parse, show;
    stage2_lr: f64 = 0.003, parse, show;
    optimizer: Optimizer = Optimizer::Adam, parse, show_debug;
    averaging: Averaging = Averaging::Token, parse, show_debug;
    probe_every: usize = 0, parse, show;

    k_clusters: usize = 8, parse, show;
    per_cluster: usize = 4, parse, show;
    kmeans_iters: usize = 50, parse, show;
    samples_per_question: usize = 10, parse, show;
    easy_threshold: f64 = 0.5, parse, show;
    vote: VoteMode = VoteMode::Pooled, parse, show_debug;
}

impl Config {
    /// Applies `key = value` lines. `#` starts a comment; blank lines are
    /// skipped.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.set(key.trim(), value)
                .map_err(|e| CliError::Config(format!("{origin}:{}: {}", n + 1, e.message())))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// `RWR_TOP_K=5` sets `top_k`.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<(), CliError> {
        for (name, value) in vars {
            if let Some(key) = name.strip_prefix(ENV_PREFIX) {
                self.set(&key.to_ascii_lowercase(), &value)
                    .map_err(|e| CliError::Config(format!("environment {name}: {}", e.message())))?;
            }
        }
        Ok(())
    }

    /// `key=value` overrides as given to `--set`.
    pub fn apply_overrides(&mut self, sets: &[String]) -> Result<(), CliError> {
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set `{s}`: expected key=value")))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    /// Range checks that parsing alone cannot express.
    pub fn validate(&self) -> Result<(), CliError> {
        let positive = [
            ("top_k", self.top_k),
            ("min_chunk_words", self.min_chunk_words),
            ("group_size", self.group_size),
            ("batch_size", self.batch_size),
            ("embed_dim", self.embed_dim),
            ("window", self.window),
            ("image_dim", self.image_dim),
            ("samples_per_question", self.samples_per_question),
            ("image_subsample", self.image_subsample),
        ];
        if let Some((key, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CliError::Config(format!("`{key}` must be at least 1")));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(CliError::Config("`temperature` must be finite and non-negative".into()));
        }
        if self.clip_eps.is_nan() || self.clip_eps <= 0.0 {
            return Err(CliError::Config("`clip_eps` must be positive".into()));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.pairs().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}
