//! Run configuration as flat dotted keys.
//!
//! Config files are lines of `key = value`. Blank lines and lines
//! starting with `#` are skipped. Parsing is strict: an unknown key or
//! an unparseable value is an error that names the key, never a silent
//! default. `emit` writes every key in a fixed order and round-trips
//! through `parse` exactly, floats included.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mix::{InputMixer, MixConfig, MixStrategy};
use crate::scene::{Domain, SceneConfig};
use crate::teacher::DaConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value `{value}` for `{key}`: expected {expected}")]
    BadValue {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("malformed config line `{0}`: expected `key = value`")]
    BadLine(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iters: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Iterations of linear learning-rate ramp from zero.
    pub lr_warmup_iters: usize,
    pub eval_every: usize,
    pub eval_size: usize,
    pub seed: u64,
    pub output_dir: String,
    /// Domain the held-out evaluation set is drawn from.
    pub eval_domain: Domain,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iters: 2000,
            batch_size: 8,
            lr: 0.05,
            lr_warmup_iters: 50,
            eval_every: 250,
            eval_size: 64,
            seed: 7,
            output_dir: "out".into(),
            eval_domain: Domain::Source,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorOpts {
    /// Stage-1 proposals kept per image.
    pub proposals: usize,
}

impl Default for DetectorOpts {
    fn default() -> Self {
        DetectorOpts { proposals: 16 }
    }
}

/// Everything a run needs, grouped the way the keys are.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Config {
    pub scene: SceneConfig,
    pub mix: MixConfig,
    pub train: TrainConfig,
    pub detector: DetectorOpts,
    pub da: DaConfig,
}

impl Config {
    /// Detector geometry follows the scene; only the proposal count is
    /// its own knob.
    pub fn detector_config(&self) -> crate::detector::DetectorConfig {
        crate::detector::DetectorConfig {
            height: self.scene.height,
            width: self.scene.width,
            classes: self.scene.classes,
            k_proposals: self.detector.proposals,
        }
    }
}

fn parse_usize(key: &str, v: &str) -> Result<usize, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: v.into(),
        expected: "a non-negative integer",
    })
}

fn parse_u64(key: &str, v: &str) -> Result<u64, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: v.into(),
        expected: "a non-negative integer",
    })
}

fn parse_f64(key: &str, v: &str) -> Result<f64, ConfigError> {
    v.parse().map_err(|_| ConfigError::BadValue {
        key: key.into(),
        value: v.into(),
        expected: "a number",
    })
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: v.into(),
            expected: "true or false",
        }),
    }
}

fn parse_domain(key: &str, v: &str) -> Result<Domain, ConfigError> {
    match v {
        "source" => Ok(Domain::Source),
        "target" => Ok(Domain::Target),
        _ => Err(ConfigError::BadValue {
            key: key.into(),
            value: v.into(),
            expected: "source or target",
        }),
    }
}

pub fn domain_name(d: Domain) -> &'static str {
    match d {
        Domain::Source => "source",
        Domain::Target => "target",
    }
}

impl Config {
    /// Set one key. Unknown keys and bad values are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        match key {
            "scene.h" => self.scene.height = parse_usize(key, v)?,
            "scene.w" => self.scene.width = parse_usize(key, v)?,
            "scene.classes" => self.scene.classes = parse_usize(key, v)?,
            "scene.shapes_min" => self.scene.shapes_min = parse_usize(key, v)?,
            "scene.shapes_max" => self.scene.shapes_max = parse_usize(key, v)?,
            "scene.size_min" => self.scene.size_min = parse_usize(key, v)?,
            "scene.size_max" => self.scene.size_max = parse_usize(key, v)?,
            "scene.max_gt_iou" => self.scene.max_gt_iou = parse_f64(key, v)?,

            "mix.strategy" => {
                self.mix.strategy = MixStrategy::parse(v).ok_or_else(|| ConfigError::BadValue {
                    key: key.into(),
                    value: v.into(),
                    expected: "baseline, union, noise, lossmix or label_mixup",
                })?
            }
            "mix.alpha" => self.mix.alpha = parse_f64(key, v)?,
            "mix.input_mixer" => {
                self.mix.input_mixer =
                    InputMixer::parse(v).ok_or_else(|| ConfigError::BadValue {
                        key: key.into(),
                        value: v.into(),
                        expected: "pixel or region",
                    })?
            }
            "mix.noise_lambda_max" => self.mix.noise_lambda_max = parse_f64(key, v)?,
            "mix.rpn_cls" => self.mix.toggles.rpn_cls = parse_bool(key, v)?,
            "mix.rpn_reg" => self.mix.toggles.rpn_reg = parse_bool(key, v)?,
            "mix.roi_cls" => self.mix.toggles.roi_cls = parse_bool(key, v)?,
            "mix.roi_reg" => self.mix.toggles.roi_reg = parse_bool(key, v)?,
            "mix.reg_style" => self.mix.reg_style = parse_bool(key, v)?,
            "mix.partial_stop_fraction" => {
                self.mix.partial_stop_fraction = parse_f64(key, v)?
            }

            "train.iters" => self.train.iters = parse_usize(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_usize(key, v)?,
            "train.lr" => self.train.lr = parse_f64(key, v)?,
            "train.lr_warmup_iters" => self.train.lr_warmup_iters = parse_usize(key, v)?,
            "train.eval_every" => self.train.eval_every = parse_usize(key, v)?,
            "train.eval_size" => self.train.eval_size = parse_usize(key, v)?,
            "train.seed" => self.train.seed = parse_u64(key, v)?,
            "train.output_dir" => self.train.output_dir = v.to_string(),
            "train.eval_domain" => self.train.eval_domain = parse_domain(key, v)?,

            "detector.proposals" => self.detector.proposals = parse_usize(key, v)?,

            "da.enabled" => self.da.enabled = parse_bool(key, v)?,
            "da.lambda_mss" => self.da.lambda_mss = parse_f64(key, v)?,
            "da.lambda_nst" => self.da.lambda_nst = parse_f64(key, v)?,
            "da.lambda_mtt" => self.da.lambda_mtt = parse_f64(key, v)?,
            "da.lambda_mst" => self.da.lambda_mst = parse_f64(key, v)?,
            "da.lambda_disc" => self.da.lambda_disc = parse_f64(key, v)?,
            "da.pseudo_thresh" => self.da.pseudo_thresh = parse_f64(key, v)?,
            "da.ema_momentum" => self.da.ema_momentum = parse_f64(key, v)?,
            "da.warmup_iters" => self.da.warmup_iters = parse_usize(key, v)?,
            "da.adapt_iters" => self.da.adapt_iters = parse_usize(key, v)?,
            "da.noise_lambda_max" => self.da.noise_lambda_max = parse_f64(key, v)?,
            "da.balanced_fixed" => self.da.balanced_fixed = parse_bool(key, v)?,

            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parse a whole config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        let mut cfg = Config::default();
        cfg.apply(text)?;
        Ok(cfg)
    }

    /// Apply `key = value` lines on top of the current values.
    pub fn apply(&mut self, text: &str) -> Result<(), ConfigError> {
        for raw in text.lines() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| ConfigError::BadLine(line.to_string()))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Every key in canonical order. `parse(emit())` reproduces the
    /// config exactly; the `{}` float format is shortest-roundtrip.
    pub fn emit(&self) -> String {
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        push("scene.h", self.scene.height.to_string());
        push("scene.w", self.scene.width.to_string());
        push("scene.classes", self.scene.classes.to_string());
        push("scene.shapes_min", self.scene.shapes_min.to_string());
        push("scene.shapes_max", self.scene.shapes_max.to_string());
        push("scene.size_min", self.scene.size_min.to_string());
        push("scene.size_max", self.scene.size_max.to_string());
        push("scene.max_gt_iou", self.scene.max_gt_iou.to_string());

        push("mix.strategy", self.mix.strategy.name().to_string());
        push("mix.alpha", self.mix.alpha.to_string());
        push("mix.input_mixer", self.mix.input_mixer.name().to_string());
        push(
            "mix.noise_lambda_max",
            self.mix.noise_lambda_max.to_string(),
        );
        push("mix.rpn_cls", self.mix.toggles.rpn_cls.to_string());
        push("mix.rpn_reg", self.mix.toggles.rpn_reg.to_string());
        push("mix.roi_cls", self.mix.toggles.roi_cls.to_string());
        push("mix.roi_reg", self.mix.toggles.roi_reg.to_string());
        push("mix.reg_style", self.mix.reg_style.to_string());
        push(
            "mix.partial_stop_fraction",
            self.mix.partial_stop_fraction.to_string(),
        );

        push("train.iters", self.train.iters.to_string());
        push("train.batch_size", self.train.batch_size.to_string());
        push("train.lr", self.train.lr.to_string());
        push(
            "train.lr_warmup_iters",
            self.train.lr_warmup_iters.to_string(),
        );
        push("train.eval_every", self.train.eval_every.to_string());
        push("train.eval_size", self.train.eval_size.to_string());
        push("train.seed", self.train.seed.to_string());
        push("train.output_dir", self.train.output_dir.clone());
        push(
            "train.eval_domain",
            domain_name(self.train.eval_domain).to_string(),
        );

        push("detector.proposals", self.detector.proposals.to_string());

        push("da.enabled", self.da.enabled.to_string());
        push("da.lambda_mss", self.da.lambda_mss.to_string());
        push("da.lambda_nst", self.da.lambda_nst.to_string());
        push("da.lambda_mtt", self.da.lambda_mtt.to_string());
        push("da.lambda_mst", self.da.lambda_mst.to_string());
        push("da.lambda_disc", self.da.lambda_disc.to_string());
        push("da.pseudo_thresh", self.da.pseudo_thresh.to_string());
        push("da.ema_momentum", self.da.ema_momentum.to_string());
        push("da.warmup_iters", self.da.warmup_iters.to_string());
        push("da.adapt_iters", self.da.adapt_iters.to_string());
        push(
            "da.noise_lambda_max",
            self.da.noise_lambda_max.to_string(),
        );
        push("da.balanced_fixed", self.da.balanced_fixed.to_string());
        out
    }

    /// Cross-field checks that `set` alone cannot see.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        let s = &self.scene;
        if s.height == 0 || s.width == 0 || s.height % 8 != 0 || s.width % 8 != 0 {
            return bad(format!(
                "scene.h and scene.w must be positive multiples of 8, got {}x{}",
                s.height, s.width
            ));
        }
        if s.classes == 0 {
            return bad("scene.classes must be at least 1".into());
        }
        if s.shapes_min > s.shapes_max {
            return bad(format!(
                "scene.shapes_min {} exceeds scene.shapes_max {}",
                s.shapes_min, s.shapes_max
            ));
        }
        if s.size_min < 2 || s.size_min > s.size_max {
            return bad(format!(
                "scene sizes must satisfy 2 <= size_min <= size_max, got {}..{}",
                s.size_min, s.size_max
            ));
        }
        if s.size_max > s.height.min(s.width) {
            return bad(format!(
                "scene.size_max {} exceeds the image side {}",
                s.size_max,
                s.height.min(s.width)
            ));
        }
        if !(0.0..=1.0).contains(&s.max_gt_iou) {
            return bad(format!("scene.max_gt_iou must be in [0, 1], got {}", s.max_gt_iou));
        }

        let m = &self.mix;
        if !(m.alpha > 0.0 && m.alpha.is_finite()) {
            return bad(format!("mix.alpha must be positive and finite, got {}", m.alpha));
        }
        if !(m.noise_lambda_max > 0.0 && m.noise_lambda_max < 1.0) {
            return bad(format!(
                "mix.noise_lambda_max must be in (0, 1), got {}",
                m.noise_lambda_max
            ));
        }
        if !(0.0..=1.0).contains(&m.partial_stop_fraction) {
            return bad(format!(
                "mix.partial_stop_fraction must be in [0, 1], got {}",
                m.partial_stop_fraction
            ));
        }

        let t = &self.train;
        if t.iters == 0 || t.eval_every == 0 || t.eval_size == 0 {
            return bad("train.iters, train.eval_every and train.eval_size must be positive".into());
        }
        if t.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if t.batch_size < 2 && self.mix.strategy != MixStrategy::Baseline {
            return bad(format!(
                "mix.strategy {} needs train.batch_size >= 2 to form pairs",
                self.mix.strategy.name()
            ));
        }
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return bad(format!("train.lr must be positive and finite, got {}", t.lr));
        }

        if self.detector.proposals == 0 {
            return bad("detector.proposals must be positive".into());
        }

        let d = &self.da;
        for (name, v) in [
            ("da.lambda_mss", d.lambda_mss),
            ("da.lambda_nst", d.lambda_nst),
            ("da.lambda_mtt", d.lambda_mtt),
            ("da.lambda_mst", d.lambda_mst),
            ("da.lambda_disc", d.lambda_disc),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative and finite, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&d.pseudo_thresh) {
            return bad(format!("da.pseudo_thresh must be in [0, 1], got {}", d.pseudo_thresh));
        }
        if !(0.0..=1.0).contains(&d.ema_momentum) {
            return bad(format!("da.ema_momentum must be in [0, 1], got {}", d.ema_momentum));
        }
        if !(d.noise_lambda_max > 0.0 && d.noise_lambda_max < 1.0) {
            return bad(format!(
                "da.noise_lambda_max must be in (0, 1), got {}",
                d.noise_lambda_max
            ));
        }
        if d.enabled && d.warmup_iters + d.adapt_iters == 0 {
            return bad("da.warmup_iters + da.adapt_iters must be positive when da.enabled".into());
        }
        Ok(())
    }
}
