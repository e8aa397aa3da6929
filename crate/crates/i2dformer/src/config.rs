//! Flat key=value run configuration: defaults, then an optional config file,
//! then command-line overrides, in that order. Unknown keys are rejected by
//! name, and every run writes the fully resolved configuration next to its
//! outputs.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::PoolKind;
use crate::synth::SynthConfig;
use crate::train::TrainConfig;
use crate::wordvec::OovPolicy;

/// Calibration constant: a fixed value or a held-out sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GammaSpec {
    Auto,
    Fixed(f64),
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub oov_policy: OovPolicy,
    pub gamma: GammaSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            synth: SynthConfig::default(),
            train: TrainConfig::default(),
            oov_policy: OovPolicy::Drop,
            gamma: GammaSpec::Auto,
        }
    }
}

impl RunConfig {
    /// Apply one `key=value` override. The one shared key is `seed`, which
    /// drives both generation and training.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| Error::Config(format!("bad value '{}' for key '{}'", what, key));
        macro_rules! parse {
            ($v:expr) => {
                $v.parse().map_err(|_| bad(value))?
            };
        }
        match key {
            "seed" => {
                let seed: u64 = parse!(value);
                self.synth.seed = seed;
                self.train.seed = seed;
            }
            // synthetic data
            "n_seen" => self.synth.n_seen = parse!(value),
            "n_unseen" => self.synth.n_unseen = parse!(value),
            "train_per_class" => self.synth.train_per_class = parse!(value),
            "heldout_per_class" => self.synth.heldout_per_class = parse!(value),
            "test_per_class" => self.synth.test_per_class = parse!(value),
            "n_patches" => self.synth.n_patches = parse!(value),
            "input_dim" => self.synth.input_dim = parse!(value),
            "visual_vocab" => self.synth.visual_vocab = parse!(value),
            "noise_vocab" => self.synth.noise_vocab = parse!(value),
            "words_per_doc" => self.synth.words_per_doc = parse!(value),
            "disc_words_per_class" => self.synth.disc_words_per_class = parse!(value),
            "sigma" => self.synth.sigma = parse!(value),
            // training
            "epochs" => self.train.epochs = parse!(value),
            "batch_size" => self.train.batch_size = parse!(value),
            "lr" => self.train.lr = parse!(value),
            "beta1" => self.train.beta1 = parse!(value),
            "beta2" => self.train.beta2 = parse!(value),
            "epsilon" => self.train.epsilon = parse!(value),
            "lambda_local" => self.train.lambda_local = parse!(value),
            "pool" => {
                self.train.pool = PoolKind::parse(value).ok_or_else(|| bad(value))?;
            }
            "embed_dim" => self.train.embed_dim = parse!(value),
            "blocks" => self.train.blocks = parse!(value),
            "heads" => self.train.heads = parse!(value),
            "max_words" => self.train.max_words = parse!(value),
            "positional" => {
                self.train.positional = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(bad(value)),
                }
            }
            "patience" => self.train.patience = parse!(value),
            "proxy_frac" => self.train.proxy_frac = parse!(value),
            // data handling / evaluation
            "oov_policy" => {
                self.oov_policy = match value {
                    "drop" => OovPolicy::Drop,
                    "mean" => OovPolicy::Mean,
                    _ => return Err(bad(value)),
                }
            }
            "gamma" => {
                self.gamma = if value == "auto" {
                    GammaSpec::Auto
                } else {
                    GammaSpec::Fixed(parse!(value))
                }
            }
            _ => {
                return Err(Error::Config(format!("unknown config key '{}'", key)));
            }
        }
        Ok(())
    }

    /// Merge a config file of `key=value` lines (# starts a comment).
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let content = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, line) in content.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::format(path, lineno + 1, "expected 'key=value'")
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Fully resolved configuration, one sorted `key=value` line each.
    pub fn to_lines(&self) -> String {
        let gamma = match self.gamma {
            GammaSpec::Auto => "auto".to_string(),
            GammaSpec::Fixed(g) => format!("{}", g),
        };
        let mut pairs: Vec<(&str, String)> = vec![
            ("seed", self.train.seed.to_string()),
            ("n_seen", self.synth.n_seen.to_string()),
            ("n_unseen", self.synth.n_unseen.to_string()),
            ("train_per_class", self.synth.train_per_class.to_string()),
            ("heldout_per_class", self.synth.heldout_per_class.to_string()),
            ("test_per_class", self.synth.test_per_class.to_string()),
            ("n_patches", self.synth.n_patches.to_string()),
            ("input_dim", self.synth.input_dim.to_string()),
            ("visual_vocab", self.synth.visual_vocab.to_string()),
            ("noise_vocab", self.synth.noise_vocab.to_string()),
            ("words_per_doc", self.synth.words_per_doc.to_string()),
            (
                "disc_words_per_class",
                self.synth.disc_words_per_class.to_string(),
            ),
            ("sigma", format!("{}", self.synth.sigma)),
            ("epochs", self.train.epochs.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            ("lr", format!("{}", self.train.lr)),
            ("beta1", format!("{}", self.train.beta1)),
            ("beta2", format!("{}", self.train.beta2)),
            ("epsilon", format!("{}", self.train.epsilon)),
            ("lambda_local", format!("{}", self.train.lambda_local)),
            ("pool", self.train.pool.name().to_string()),
            ("embed_dim", self.train.embed_dim.to_string()),
            ("blocks", self.train.blocks.to_string()),
            ("heads", self.train.heads.to_string()),
            ("max_words", self.train.max_words.to_string()),
            ("positional", self.train.positional.to_string()),
            ("patience", self.train.patience.to_string()),
            ("proxy_frac", format!("{}", self.train.proxy_frac)),
            (
                "oov_policy",
                match self.oov_policy {
                    OovPolicy::Drop => "drop".to_string(),
                    OovPolicy::Mean => "mean".to_string(),
                },
            ),
            ("gamma", gamma),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{}={}", k, v);
        }
        out
    }

    /// Write the resolved configuration into `dir/config.resolved`.
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.resolved");
        fs::write(&path, self.to_lines()).map_err(|e| Error::io(&path, e))
    }
}
