//! Flat `key = value` config files covering the architecture and the
//! training run. Unknown and duplicated keys are rejected so a typo
//! cannot silently fall back to a default.

use std::collections::BTreeSet;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, RelayGammaInit};
use crate::training::{Objective, TrainConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct FileConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl Default for FileConfig {
    fn default() -> Self {
        FileConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn bad_value(key: &str, value: &str, line: usize) -> Error {
    Error::Config(format!("line {line}: cannot parse {key} = {value:?}"))
}

fn parse_as<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| bad_value(key, value, line))
}

fn parse_taus(key: &str, value: &str, line: usize) -> Result<Vec<f64>> {
    value
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| bad_value(key, value, line)))
        .collect()
}

/// Parses config text into defaults overridden by the listed keys.
/// Validates both halves before returning.
pub fn parse_config(text: &str) -> Result<FileConfig> {
    let mut cfg = FileConfig::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("line {line}: expected key = value")))?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {line}: duplicate key {key}")));
        }

        let m = &mut cfg.model;
        let t = &mut cfg.train;
        match key {
            "n_layers" => m.n_layers = parse_as(key, value, line)?,
            "d_model" => m.d_model = parse_as(key, value, line)?,
            "d_ff" => m.d_ff = parse_as(key, value, line)?,
            "n_heads" => m.n_heads = parse_as(key, value, line)?,
            "head_dim" => m.head_dim = parse_as(key, value, line)?,
            "rotary_width" => m.rotary_width = parse_as(key, value, line)?,
            "dropout" => m.dropout = parse_as(key, value, line)?,
            "vocab_size" => m.vocab_size = parse_as(key, value, line)?,
            "tie_embeddings" => m.tie_embeddings = parse_as(key, value, line)?,
            "relay_enabled" => m.relay_enabled = parse_as(key, value, line)?,
            "relay_gamma_init" => {
                m.relay_gamma_init = match value {
                    "ones" => RelayGammaInit::Ones,
                    "zeros" => RelayGammaInit::Zeros,
                    _ => return Err(bad_value(key, value, line)),
                }
            }
            "seq_len" => m.seq_len = parse_as(key, value, line)?,

            "objective" => {
                t.objective =
                    Objective::from_str(value).map_err(|_| bad_value(key, value, line))?
            }
            "K" | "k" => t.k = parse_as(key, value, line)?,
            "batch_size" => t.batch_size = parse_as(key, value, line)?,
            "lr" => t.lr = parse_as(key, value, line)?,
            "weight_decay" => t.weight_decay = parse_as(key, value, line)?,
            "warmup_steps" => t.warmup_steps = parse_as(key, value, line)?,
            "grad_clip" => t.grad_clip = parse_as(key, value, line)?,
            "threshold_mean" => t.threshold_mean = parse_as(key, value, line)?,
            "threshold_std" => t.threshold_std = parse_as(key, value, line)?,
            "tau_per_window" => t.tau_per_window = parse_as(key, value, line)?,
            "mlm_t_min" => t.mlm_t_min = parse_as(key, value, line)?,
            "total_steps" => t.total_steps = parse_as(key, value, line)?,
            "log_every" => t.log_every = parse_as(key, value, line)?,
            "val_every" => t.val_every = parse_as(key, value, line)?,
            "val_n" => t.val_n = parse_as(key, value, line)?,
            "val_taus" => t.val_taus = parse_taus(key, value, line)?,
            "seed" => t.seed = parse_as(key, value, line)?,
            _ => return Err(Error::Config(format!("line {line}: unknown key {key}"))),
        }
    }

    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<FileConfig> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_yields_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, FileConfig::default());
    }

    #[test]
    fn every_key_round_trips() {
        let text = "\
# architecture
n_layers = 2
d_model = 32
d_ff = 128
n_heads = 2
head_dim = 16
rotary_width = 16
dropout = 0.0
vocab_size = 17
tie_embeddings = false
relay_enabled = true
relay_gamma_init = zeros
seq_len = 81

# run
objective = relay_sg
K = 3
batch_size = 8
lr = 0.001
weight_decay = 0.05   # trailing comment
warmup_steps = 10
grad_clip = 1.0
threshold_mean = 0.2
threshold_std = 0.05
tau_per_window = true
mlm_t_min = 0.01
total_steps = 100
log_every = 5
val_every = 50
val_n = 4
val_taus = 0.05, 0.1, 0.25
seed = 9
";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.model.relay_gamma_init, RelayGammaInit::Zeros);
        assert!(!cfg.model.tie_embeddings);
        assert_eq!(cfg.train.objective, Objective::RelaySg);
        assert_eq!(cfg.train.k, 3);
        assert_eq!(cfg.train.val_taus, vec![0.05, 0.1, 0.25]);
        assert!(cfg.train.tau_per_window);
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn lowercase_unroll_key_is_accepted() {
        let cfg = parse_config("k = 4\n").unwrap();
        assert_eq!(cfg.train.k, 4);
    }

    #[test]
    fn unknown_and_duplicate_keys_error() {
        assert!(matches!(
            parse_config("learning_rate = 0.1\n"),
            Err(Error::Config(msg)) if msg.contains("unknown key learning_rate")
        ));
        assert!(matches!(
            parse_config("lr = 0.1\nlr = 0.2\n"),
            Err(Error::Config(msg)) if msg.contains("duplicate key lr")
        ));
    }

    #[test]
    fn malformed_lines_and_values_error() {
        assert!(matches!(parse_config("just words\n"), Err(Error::Format(_))));
        assert!(matches!(
            parse_config("batch_size = many\n"),
            Err(Error::Config(msg)) if msg.contains("batch_size")
        ));
        assert!(matches!(
            parse_config("relay_gamma_init = twos\n"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cross_field_validation_still_applies() {
        // d_model inconsistent with heads: caught by the architecture
        // check, not the parser.
        assert!(parse_config("d_model = 100\n").is_err());
        // MLM requires K = 1.
        assert!(parse_config("objective = mlm\nK = 2\n").is_err());
    }
}
