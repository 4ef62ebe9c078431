//! Plain-text `key = value` run configuration. Every tunable default of the
//! toolkit has a key; files and `--key=value` flags may only set known keys.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use equirecon::dataset::MiniIEBenchConfig;
use equirecon::eval::ProbeConfig;
use equirecon::losses::LossWeights;
use equirecon::model::{DecoderConfig, EncoderConfig, Feature, HeadConfig, ModelConfig};
use equirecon::train::{AdamConfig, TrainConfig};
use equirecon::views::{ColorRanges, Range, TransformSpec};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key {key:?}{}", location(.line))]
    UnknownKey { key: String, line: Option<usize> },
    #[error("malformed config line {line}: {text:?} (expected key = value)")]
    Syntax { line: usize, text: String },
    #[error("{key}: invalid value {value:?}: {message}")]
    Value { key: String, value: String, message: String },
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn location(line: &Option<usize>) -> String {
    line.map(|l| format!(" on line {}", l)).unwrap_or_default()
}

const DEFAULTS: &[(&str, &str)] = &[
    ("data.image_size", "32"),
    ("data.num_classes", "8"),
    ("data.samples_per_class", "1000"),
    ("data.rotation_min", "-90"),
    ("data.rotation_max", "90"),
    ("data.hue_min", "0"),
    ("data.hue_max", "1"),
    ("data.scale_min", "0.5"),
    ("data.scale_max", "0.9"),
    ("data.seed", "0"),
    ("data.ppm_dir", ""),
    ("data.labels_file", ""),
    ("model.patch_size", "4"),
    ("model.dim", "512"),
    ("model.depth", "6"),
    ("model.heads", "8"),
    ("model.mlp_ratio", "4"),
    ("model.head_hidden", "256"),
    ("model.head_out", "192"),
    ("model.decoder_blocks", "6"),
    ("model.decoder_heads", "4"),
    ("model.decoder_mlp_ratio", "4"),
    ("model.attention_scaling", "true"),
    ("model.seed", "0"),
    ("views.rotation", "true"),
    ("views.rotation_min", "-90"),
    ("views.rotation_max", "90"),
    ("views.color", "true"),
    ("views.brightness_min", "0.6"),
    ("views.brightness_max", "1.4"),
    ("views.contrast_min", "0.6"),
    ("views.contrast_max", "1.4"),
    ("views.saturation_min", "0.6"),
    ("views.saturation_max", "1.4"),
    ("views.hue_min", "-0.1"),
    ("views.hue_max", "0.1"),
    ("views.blur", "true"),
    ("views.blur_min", "0.1"),
    ("views.blur_max", "2.0"),
    ("views.translation", "true"),
    ("views.translation_min", "-0.25"),
    ("views.translation_max", "0.25"),
    ("views.crop", "true"),
    ("views.crop_min", "0.2"),
    ("views.crop_max", "1.0"),
    ("views.flip", "true"),
    ("views.flip_probability", "0.5"),
    ("loss.lambda_ssl", "1"),
    ("loss.lambda_recon", "1"),
    ("loss.sim", "25"),
    ("loss.var", "25"),
    ("loss.cov", "1"),
    ("loss.gamma", "1"),
    ("loss.eps", "1e-4"),
    ("train.batch_size", "128"),
    ("train.epochs", "50"),
    ("train.lr", "1e-4"),
    ("train.scale_lr", "false"),
    ("train.beta1", "0.9"),
    ("train.beta2", "0.999"),
    ("train.eps", "1e-8"),
    ("train.weight_decay", "1e-6"),
    ("train.seed", "0"),
    ("train.checkpoint_every", "0"),
    ("train.record_wall_time", "false"),
    ("probe.hidden", "256"),
    ("probe.epochs", "100"),
    ("probe.batch_size", "256"),
    ("probe.lr", "1e-3"),
    ("probe.train_fraction", "0.8"),
    ("probe.feature", "equi"),
    ("probe.chunk", "256"),
    ("probe.seed", "0"),
    ("paths.data", "data.eqds"),
    ("paths.out_dir", "run"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    values: Vec<(&'static str, String)>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { values: DEFAULTS.iter().map(|(k, v)| (*k, v.to_string())).collect() }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        self.set_at(key, value, None)
    }

    fn set_at(&mut self, key: &str, value: &str, line: Option<usize>) -> Result<(), ConfigError> {
        let slot = self
            .values
            .iter_mut()
            .find(|(k, _)| *k == key)
            .ok_or_else(|| ConfigError::UnknownKey { key: key.to_string(), line })?;
        slot.1 = value.to_string();
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax { line: i + 1, text: raw.to_string() })?;
            self.set_at(k.trim(), v.trim(), Some(i + 1))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        self.apply_text(&text)
    }

    /// Every key with its resolved value, one `key = value` line each.
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.values {
            writeln!(out, "{} = {}", k, v).unwrap();
        }
        out
    }

    pub fn raw(&self, key: &str) -> &str {
        &self.values.iter().find(|(k, _)| *k == key).unwrap_or_else(|| panic!("unregistered key {}", key)).1
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, ConfigError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse::<T>().map_err(|e| ConfigError::Value { key: key.into(), value: raw.into(), message: e.to_string() })
    }

    fn invalid(&self, key: &str, message: impl Into<String>) -> ConfigError {
        ConfigError::Value { key: key.into(), value: self.raw(key).into(), message: message.into() }
    }

    fn positive(&self, key: &str) -> Result<usize, ConfigError> {
        let v: usize = self.get(key)?;
        if v == 0 {
            return Err(self.invalid(key, "must be positive"));
        }
        Ok(v)
    }

    fn range(&self, prefix: &str) -> Result<Range, ConfigError> {
        let (lo_key, hi_key) = (format!("{}_min", prefix), format!("{}_max", prefix));
        let (lo, hi): (f64, f64) = (self.get(&lo_key)?, self.get(&hi_key)?);
        if !lo.is_finite() || !hi.is_finite() || lo > hi {
            return Err(self.invalid(&hi_key, format!("range [{}, {}] is empty or not finite", lo, hi)));
        }
        Ok(Range::new(lo, hi))
    }

    pub fn dataset(&self) -> Result<MiniIEBenchConfig, ConfigError> {
        let num_classes = self.positive("data.num_classes")?;
        let cfg = MiniIEBenchConfig {
            image_size: self.positive("data.image_size")?,
            num_classes,
            samples_per_class: self.positive("data.samples_per_class")?,
            rotation: self.range("data.rotation")?,
            hue: self.range("data.hue")?,
            scale: self.range("data.scale")?,
            seed: self.get("data.seed")?,
        };
        cfg.validate().map_err(|e| self.invalid("data.num_classes", e.to_string()))?;
        Ok(cfg)
    }

    pub fn model(&self) -> Result<ModelConfig, ConfigError> {
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                image_size: self.positive("data.image_size")?,
                patch_size: self.positive("model.patch_size")?,
                dim: self.positive("model.dim")?,
                depth: self.positive("model.depth")?,
                heads: self.positive("model.heads")?,
                mlp_ratio: self.positive("model.mlp_ratio")?,
            },
            head: HeadConfig { hidden: self.positive("model.head_hidden")?, out: self.positive("model.head_out")? },
            decoder: DecoderConfig {
                blocks: self.positive("model.decoder_blocks")?,
                dim: self.positive("model.head_out")?,
                heads: self.positive("model.decoder_heads")?,
                mlp_ratio: self.positive("model.decoder_mlp_ratio")?,
            },
            attention_scaling: self.get("model.attention_scaling")?,
        };
        cfg.validate().map_err(|e| ConfigError::Value {
            key: "model".into(),
            value: format!("dim {} / heads {}", cfg.encoder.dim, cfg.encoder.heads),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn views(&self) -> Result<TransformSpec, ConfigError> {
        let on = |k: &str| self.get::<bool>(k);
        let mut spec = TransformSpec::none();
        if on("views.rotation")? {
            spec.rotation = Some(self.range("views.rotation")?);
        }
        if on("views.color")? {
            spec.color = Some(ColorRanges {
                brightness: self.range("views.brightness")?,
                contrast: self.range("views.contrast")?,
                saturation: self.range("views.saturation")?,
                hue: self.range("views.hue")?,
            });
        }
        if on("views.blur")? {
            spec.blur = Some(self.range("views.blur")?);
        }
        if on("views.translation")? {
            spec.translation = Some(self.range("views.translation")?);
        }
        if on("views.crop")? {
            spec.crop = Some(self.range("views.crop")?);
        }
        if on("views.flip")? {
            let p: f64 = self.get("views.flip_probability")?;
            if !(0.0..=1.0).contains(&p) {
                return Err(self.invalid("views.flip_probability", "must lie in [0, 1]"));
            }
            spec.flip = Some(p);
        }
        spec.validate().map_err(|e| ConfigError::Value { key: "views".into(), value: String::new(), message: e.to_string() })?;
        Ok(spec)
    }

    pub fn loss(&self) -> Result<LossWeights, ConfigError> {
        let w = LossWeights {
            lambda_ssl: self.get("loss.lambda_ssl")?,
            lambda_recon: self.get("loss.lambda_recon")?,
            sim: self.get("loss.sim")?,
            var: self.get("loss.var")?,
            cov: self.get("loss.cov")?,
            gamma: self.get("loss.gamma")?,
            eps: self.get("loss.eps")?,
        };
        w.validate().map_err(|e| ConfigError::Value { key: "loss".into(), value: String::new(), message: e.to_string() })?;
        Ok(w)
    }

    pub fn train(&self) -> Result<TrainConfig, ConfigError> {
        let cfg = TrainConfig {
            batch_size: self.get("train.batch_size")?,
            epochs: self.get("train.epochs")?,
            adam: AdamConfig {
                lr: self.get("train.lr")?,
                beta1: self.get("train.beta1")?,
                beta2: self.get("train.beta2")?,
                eps: self.get("train.eps")?,
                weight_decay: self.get("train.weight_decay")?,
            },
            scale_lr: self.get("train.scale_lr")?,
            seed: self.get("train.seed")?,
            loss: self.loss()?,
            views: self.views()?,
            checkpoint_every: self.get("train.checkpoint_every")?,
            record_wall_time: self.get("train.record_wall_time")?,
        };
        cfg.validate().map_err(|e| ConfigError::Value { key: "train".into(), value: String::new(), message: e.to_string() })?;
        Ok(cfg)
    }

    pub fn probe(&self) -> Result<ProbeConfig, ConfigError> {
        let feature = match self.raw("probe.feature") {
            "equi" => Feature::Equi,
            "pooled" => Feature::Pooled,
            "inv" => Feature::Inv,
            _ => return Err(self.invalid("probe.feature", "expected equi, pooled or inv")),
        };
        let cfg = ProbeConfig {
            hidden: self.get("probe.hidden")?,
            epochs: self.get("probe.epochs")?,
            batch_size: self.get("probe.batch_size")?,
            lr: self.get("probe.lr")?,
            train_fraction: self.get("probe.train_fraction")?,
            feature,
            chunk: self.get("probe.chunk")?,
        };
        cfg.validate().map_err(|e| ConfigError::Value { key: "probe".into(), value: String::new(), message: e.to_string() })?;
        Ok(cfg)
    }
}
