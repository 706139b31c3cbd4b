//! Run configuration: built-in defaults, then a `key = value` file, then
//! command-line overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use qbm_core::dataset::{SplitSizes, DEFAULT_MIN_BAG_SIZE};
use qbm_core::model::{ModelConfig, Variant};
use qbm_core::train::TrainConfig;
use qbm_core::QbmError;

pub const KEYS: [&str; 24] = [
    "seed",
    "variant",
    "lr",
    "batch_size",
    "max_epochs",
    "patience",
    "max_len",
    "max_bag",
    "embed_dim",
    "conv1_filters",
    "conv1_width",
    "conv2_filters",
    "conv2_kernel",
    "coverage_hidden",
    "mlp_hidden",
    "dropout",
    "bagcon_len",
    "top_terms",
    "min_count",
    "min_bag_size",
    "embeddings",
    "train_size",
    "valid_size",
    "test_size",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub min_count: usize,
    pub min_bag_size: usize,
    pub embeddings: Option<PathBuf>,
    pub train_size: Option<usize>,
    pub valid_size: Option<usize>,
    pub test_size: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        RunConfig {
            seed: train.seed,
            model: ModelConfig::default(),
            train,
            min_count: 1,
            min_bag_size: DEFAULT_MIN_BAG_SIZE,
            embeddings: None,
            train_size: None,
            valid_size: None,
            test_size: None,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, QbmError> {
    value
        .parse()
        .map_err(|_| QbmError::Config(format!("{key}: cannot parse {value:?}")))
}

fn opt_num(key: &str, value: &str) -> Result<Option<usize>, QbmError> {
    if value.is_empty() || value == "auto" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn show_opt(v: Option<usize>) -> String {
    v.map_or_else(|| "auto".to_string(), |n| n.to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), QbmError> {
        let m = &mut self.model;
        match key {
            "seed" => self.seed = num(key, value)?,
            "variant" => m.variant = value.parse::<Variant>()?,
            "lr" => self.train.lr = num(key, value)?,
            "batch_size" => self.train.batch_size = num(key, value)?,
            "max_epochs" => self.train.max_epochs = num(key, value)?,
            "patience" => self.train.patience = num(key, value)?,
            "max_len" => m.max_len = num(key, value)?,
            "max_bag" => m.max_bag = num(key, value)?,
            "embed_dim" => m.embed_dim = num(key, value)?,
            "conv1_filters" => m.conv1_filters = num(key, value)?,
            "conv1_width" => m.conv1_width = num(key, value)?,
            "conv2_filters" => {
                m.conv2_filters = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "conv2_kernel" => m.conv2_kernel = num(key, value)?,
            "coverage_hidden" => m.coverage_hidden = num(key, value)?,
            "mlp_hidden" => m.mlp_hidden = num(key, value)?,
            "dropout" => m.dropout = num(key, value)?,
            "bagcon_len" => m.bagcon_len = num(key, value)?,
            "top_terms" => m.top_terms = num(key, value)?,
            "min_count" => self.min_count = num(key, value)?,
            "min_bag_size" => self.min_bag_size = num(key, value)?,
            "embeddings" => self.embeddings = (!value.is_empty()).then(|| PathBuf::from(value)),
            "train_size" => self.train_size = opt_num(key, value)?,
            "valid_size" => self.valid_size = opt_num(key, value)?,
            "test_size" => self.test_size = opt_num(key, value)?,
            _ => return Err(QbmError::Config(format!("unknown configuration key {key:?}"))),
        }
        self.train.seed = self.seed;
        Ok(())
    }

    /// Applies a `key = value` file. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str, source: &str) -> Result<(), QbmError> {
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| QbmError::parse(source, idx + 1, "expected `key = value`"))?;
            self.set(key.trim(), value.trim()).map_err(|e| match e {
                QbmError::Config(msg) => QbmError::parse(source, idx + 1, msg),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), QbmError> {
        let text = std::fs::read_to_string(path).map_err(|e| QbmError::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    /// Defaults, then the file, then the overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self, QbmError> {
        let mut cfg = RunConfig::default();
        if let Some(path) = file {
            cfg.apply_file(path)?;
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn split_sizes(&self) -> Result<Option<SplitSizes>, QbmError> {
        match (self.train_size, self.valid_size, self.test_size) {
            (None, None, None) => Ok(None),
            (Some(train), Some(valid), Some(test)) => Ok(Some(SplitSizes { train, valid, test })),
            _ => Err(QbmError::Config(
                "train_size, valid_size and test_size must be given together".into(),
            )),
        }
    }

    /// Every key with its resolved value, in the file syntax.
    pub fn render(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let conv2: Vec<String> = m.conv2_filters.iter().map(|f| f.to_string()).collect();
        let values = [
            self.seed.to_string(),
            m.variant.to_string(),
            t.lr.to_string(),
            t.batch_size.to_string(),
            t.max_epochs.to_string(),
            t.patience.to_string(),
            m.max_len.to_string(),
            m.max_bag.to_string(),
            m.embed_dim.to_string(),
            m.conv1_filters.to_string(),
            m.conv1_width.to_string(),
            conv2.join(","),
            m.conv2_kernel.to_string(),
            m.coverage_hidden.to_string(),
            m.mlp_hidden.to_string(),
            m.dropout.to_string(),
            m.bagcon_len.to_string(),
            m.top_terms.to_string(),
            self.min_count.to_string(),
            self.min_bag_size.to_string(),
            self.embeddings.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
            show_opt(self.train_size),
            show_opt(self.valid_size),
            show_opt(self.test_size),
        ];
        let mut out = String::new();
        for (k, v) in KEYS.iter().zip(values) {
            writeln!(out, "{k} = {v}").expect("writing to a String");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_beats_file_beats_default() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("seed = 5\nlr = 0.01 # comment\n\nembed_dim = 16\n", "f").unwrap();
        for (k, v) in [("seed", "9"), ("variant", "base")] {
            cfg.set(k, v).unwrap();
        }
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.seed, 9);
        assert_eq!(cfg.train.lr, 0.01);
        assert_eq!(cfg.model.embed_dim, 16);
        assert_eq!(cfg.model.variant, Variant::Base);
        assert_eq!(cfg.model.max_len, 20);
    }

    #[test]
    fn unknown_keys_and_bad_lines_are_rejected() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply_text("seed = 1\nlearning_rate = 3\n", "run.cfg").unwrap_err();
        assert!(err.to_string().contains("run.cfg:2"), "{err}");
        assert!(err.to_string().contains("learning_rate"), "{err}");
        assert!(cfg.apply_text("seed 1\n", "x").is_err());
        assert!(cfg.set("variant", "bert").is_err());
    }

    #[test]
    fn rendered_config_reads_back_identically() {
        let mut cfg = RunConfig::default();
        cfg.set("conv2_filters", "4,6").unwrap();
        cfg.set("embeddings", "/tmp/vec.txt").unwrap();
        cfg.set("train_size", "10").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.render(), "rendered").unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.render().lines().count(), KEYS.len());
    }

    #[test]
    fn partial_sizes_are_an_error() {
        let mut cfg = RunConfig::default();
        assert_eq!(cfg.split_sizes().unwrap(), None);
        cfg.set("train_size", "4").unwrap();
        assert!(cfg.split_sizes().is_err());
    }
}
