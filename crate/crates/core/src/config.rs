//! Run configuration: defaults, a `key = value` file format, and a canonical
//! form whose hash identifies a run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Freq, SplitScheme};
use crate::embed::KgeReduce;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{LossReduction, TrainConfig};

/// Keys left out of the shared config hash so both arms of an A/B run agree.
const ARM_KEYS: [&str; 2] = ["use_kge", "graph"];
/// Keys that never affect results.
const OUTPUT_KEYS: [&str; 1] = ["out"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub use_kge: bool,
    pub seq_len: usize,
    pub label_len: usize,
    pub pred_len: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub kernel_width: usize,
    pub kge_reduce: KgeReduce,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr_decay: bool,
    pub grad_clip: f64,
    pub max_steps: Option<usize>,
    pub loss: LossReduction,
    pub val_stride: usize,
    /// `ett` (12/4/4 months), `ratio` (0.7/0.1/0.2) or `auto` (by file name).
    pub split: String,
    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            data: None,
            graph: None,
            use_kge: false,
            seq_len: 336,
            label_len: 48,
            pred_len: 96,
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 1,
            d_ff: 128,
            dropout: 0.05,
            kernel_width: 3,
            kge_reduce: KgeReduce::Sum,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            lr_decay: t.lr_decay,
            grad_clip: t.grad_clip_norm,
            max_steps: None,
            loss: LossReduction::Mean,
            val_stride: 1,
            split: "auto".into(),
            seed: 0,
            out: PathBuf::from("runs/latest"),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Config(format!("invalid boolean `{value}` for `{key}`"))),
    }
}

fn optional_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Sets one field from its textual form. Dashes and underscores in keys
    /// are interchangeable.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        let k = key.as_str();
        match k {
            "data" => self.data = optional_path(v),
            "graph" => self.graph = optional_path(v),
            "use_kge" => self.use_kge = parse_bool(k, v)?,
            "seq_len" => self.seq_len = parse(k, v)?,
            "label_len" => self.label_len = parse(k, v)?,
            "pred_len" => self.pred_len = parse(k, v)?,
            "d_model" => self.d_model = parse(k, v)?,
            "n_heads" => self.n_heads = parse(k, v)?,
            "n_enc_layers" => self.n_enc_layers = parse(k, v)?,
            "n_dec_layers" => self.n_dec_layers = parse(k, v)?,
            "d_ff" => self.d_ff = parse(k, v)?,
            "dropout" => self.dropout = parse(k, v)?,
            "kernel_width" => self.kernel_width = parse(k, v)?,
            "kge_reduce" => {
                self.kge_reduce = match v {
                    "sum" => KgeReduce::Sum,
                    "mean" => KgeReduce::Mean,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{k}`"))),
                }
            }
            "learning_rate" | "lr" => self.learning_rate = parse(k, v)?,
            "batch_size" => self.batch_size = parse(k, v)?,
            "max_epochs" => self.max_epochs = parse(k, v)?,
            "patience" => self.patience = parse(k, v)?,
            "lr_decay" => self.lr_decay = parse_bool(k, v)?,
            "grad_clip" => self.grad_clip = parse(k, v)?,
            "max_steps" => self.max_steps = if v == "none" { None } else { Some(parse(k, v)?) },
            "loss" => {
                self.loss = match v {
                    "mean" => LossReduction::Mean,
                    "channel_sum" => LossReduction::ChannelSum,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{k}`"))),
                }
            }
            "val_stride" => self.val_stride = parse(k, v)?,
            "split" => {
                if !matches!(v, "auto" | "ett" | "ratio") {
                    return Err(Error::Config(format!("invalid value `{v}` for `split`")));
                }
                self.split = v.to_string();
            }
            "seed" => self.seed = parse(k, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file. Blank lines and `#` comments are skipped.
    pub fn apply_file_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("config line {}: expected `key = value`", i + 1)))?;
            self.set(k, v)
                .map_err(|e| Error::Config(format!("config line {}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_file_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.pred_len == 0 {
            return Err(Error::Config("pred_len must be a positive integer".into()));
        }
        if self.use_kge && self.graph.is_none() {
            return Err(Error::Config("use_kge requires a graph file (--graph)".into()));
        }
        self.model_config(1, Freq::Hourly).validate()?;
        self.train_config().validate()
    }

    pub fn model_config(&self, channels: usize, freq: Freq) -> ModelConfig {
        ModelConfig {
            n_enc_layers: self.n_enc_layers,
            n_dec_layers: self.n_dec_layers,
            d_ff: self.d_ff,
            dropout: self.dropout,
            use_kge: self.use_kge,
            kge_reduce: self.kge_reduce,
            kernel_width: self.kernel_width,
            ..ModelConfig::desk(self.seq_len, self.label_len, self.pred_len, channels, freq).with_dims(self.d_model, self.n_heads)
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            lr_decay: self.lr_decay,
            seed: self.seed,
            grad_clip_norm: self.grad_clip,
            max_steps: self.max_steps,
            loss: self.loss,
            val_stride: self.val_stride,
        }
    }

    pub fn split_scheme(&self, dataset_name: &str) -> SplitScheme {
        match self.split.as_str() {
            "ett" => SplitScheme::ETT,
            "ratio" => SplitScheme::RATIO,
            _ => SplitScheme::default_for(dataset_name),
        }
    }

    /// Sorted `key -> value` map of every field.
    pub fn canonical(&self) -> BTreeMap<String, serde_json::Value> {
        match serde_json::to_value(self) {
            Ok(serde_json::Value::Object(map)) => map.into_iter().collect(),
            _ => BTreeMap::new(),
        }
    }

    fn hash_without(&self, skip: &[&str]) -> String {
        let map: BTreeMap<_, _> = self
            .canonical()
            .into_iter()
            .filter(|(k, _)| !skip.contains(&k.as_str()))
            .collect();
        let text = serde_json::to_string(&map).unwrap_or_default();
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Hash shared by both arms of an A/B comparison (ignores `use_kge` and `graph`).
    pub fn config_hash(&self) -> String {
        let skip: Vec<&str> = ARM_KEYS.iter().chain(&OUTPUT_KEYS).copied().collect();
        self.hash_without(&skip)
    }

    /// Hash of everything that can change results.
    pub fn run_hash(&self) -> String {
        self.hash_without(&OUTPUT_KEYS)
    }

    /// `key = value` rendering accepted by [`RunConfig::apply_file_text`].
    pub fn to_file_text(&self) -> String {
        self.canonical()
            .into_iter()
            .map(|(k, v)| {
                let s = match v {
                    serde_json::Value::Null => "none".to_string(),
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                format!("{k} = {s}\n")
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_then_override() {
        let mut c = RunConfig::default();
        c.apply_file_text("# desk run\nseq-len = 96\npred_len=24 # short\nuse_kge = true\n\n")
            .unwrap();
        assert_eq!((c.seq_len, c.pred_len, c.use_kge), (96, 24, true));
        c.set("pred-len", "48").unwrap();
        assert_eq!(c.pred_len, 48);
    }

    #[test]
    fn bad_lines_name_the_line() {
        let mut c = RunConfig::default();
        let e = c.apply_file_text("seed = 1\nbogus = 2\n").unwrap_err().to_string();
        assert!(e.contains("line 2") && e.contains("bogus"), "{e}");
        assert!(c.apply_file_text("seed 1").is_err());
        assert!(c.set("seq_len", "-3").is_err());
        assert!(c.set("use_kge", "maybe").is_err());
    }

    #[test]
    fn kge_needs_graph() {
        let c = RunConfig {
            use_kge: true,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = RunConfig {
            pred_len: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        assert!(RunConfig::default().validate().is_ok());
    }

    #[test]
    fn arms_share_config_hash() {
        let a = RunConfig::default();
        let b = RunConfig {
            use_kge: true,
            graph: Some("g.txt".into()),
            out: "elsewhere".into(),
            ..a.clone()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        assert_ne!(a.run_hash(), b.run_hash());
        let c = RunConfig { seed: 9, ..a.clone() };
        assert_ne!(a.config_hash(), c.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn file_text_round_trip() {
        let mut a = RunConfig::default();
        a.set("graph", "graphs/ett.txt").unwrap();
        a.set("max_steps", "500").unwrap();
        a.set("loss", "channel_sum").unwrap();
        let mut b = RunConfig::default();
        b.apply_file_text(&a.to_file_text()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn model_config_mirrors_fields() {
        let c = RunConfig::default();
        let m = c.model_config(7, Freq::Hourly);
        assert_eq!((m.lookback, m.label_len, m.horizon, m.channels), (336, 48, 96, 7));
        assert_eq!((m.d_model, m.n_heads, m.d_k), (64, 4, 16));
    }
}
