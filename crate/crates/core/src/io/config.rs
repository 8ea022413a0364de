//! Flat `key = value` run configuration. `#` starts a comment; keys are the
//! field names listed by [`RunConfig::keys`]. Later assignments win, so
//! command-line overrides are applied after the file.

use crate::render::CameraConfig;
use crate::train::{LossMode, TrainConfig};
use crate::vit::ModelConfig;
use crate::zeroshot::{GroupMode, DEFAULT_THRESHOLD};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("invalid value for '{field}': {message}")]
    Invalid { field: String, message: String },
}

fn invalid(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.into(),
        message: message.into(),
    }
}

/// Camera settings that are not implied by the model's input size.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraSettings {
    pub background: [f64; 3],
    pub dilation: f64,
    pub cutoff: f64,
    pub tile_size: usize,
    pub depth_near: f64,
    pub depth_far: f64,
}

impl Default for CameraSettings {
    fn default() -> Self {
        let cam = CameraConfig::new(1, 1);
        Self {
            background: cam.background,
            dilation: cam.dilation,
            cutoff: cam.cutoff,
            tile_size: cam.tile_size,
            depth_near: cam.depth_range[0],
            depth_far: cam.depth_range[1],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotSettings {
    pub layers: usize,
    pub threshold: f64,
    pub layer_mode: GroupMode,
    pub edge_mode: GroupMode,
    pub split: Option<usize>,
}

impl Default for ZeroShotSettings {
    fn default() -> Self {
        Self {
            layers: 16,
            threshold: DEFAULT_THRESHOLD,
            layer_mode: GroupMode::EqualCount,
            edge_mode: GroupMode::EqualDepthWidth,
            split: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Paths {
    pub data_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

/// Every setting a subcommand may need.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub camera: CameraSettings,
    pub zeroshot: ZeroShotSettings,
    pub paths: Paths,
}

fn parse<T: FromStr>(field: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| invalid(field, format!("'{value}': {e}")))
}

fn parse_bool(field: &str, value: &str) -> Result<bool, ConfigError> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(invalid(field, format!("'{value}' is not a boolean"))),
    }
}

fn parse_rgb(field: &str, value: &str) -> Result<[f64; 3], ConfigError> {
    let parts: Vec<&str> = value.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(invalid(field, format!("'{value}' is not three comma-separated numbers")));
    }
    let mut out = [0.0; 3];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = parse(field, p)?;
    }
    Ok(out)
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    /// Recognised keys, in the order [`Self::to_kv_string`] writes them.
    pub fn keys() -> &'static [&'static str] {
        &[
            "image_height", "image_width", "patch_size", "enc_dim", "enc_depth", "enc_heads",
            "dec_dim", "dec_depth", "dec_heads", "mlp_ratio", "num_queries", "scale_clamp",
            "base_lr", "weight_decay", "beta1", "beta2", "batch_size", "warmup_epochs", "epochs",
            "mask_ratio", "loss_mode", "seed", "crop", "crop_min_scale", "hflip", "randaug",
            "randaug_ops", "randaug_magnitude", "randaug_std",
            "background", "dilation", "cutoff", "tile_size", "depth_near", "depth_far",
            "layers", "threshold", "layer_mode", "edge_mode", "split",
            "data_dir", "checkpoint", "output_dir",
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let v = value.trim();
        let m = &mut self.model;
        let t = &mut self.train;
        let c = &mut self.camera;
        let z = &mut self.zeroshot;
        match key {
            "image_height" => m.image_height = parse(key, v)?,
            "image_width" => m.image_width = parse(key, v)?,
            "patch_size" => m.patch_size = parse(key, v)?,
            "enc_dim" => m.enc_dim = parse(key, v)?,
            "enc_depth" => m.enc_depth = parse(key, v)?,
            "enc_heads" => m.enc_heads = parse(key, v)?,
            "dec_dim" => m.dec_dim = parse(key, v)?,
            "dec_depth" => m.dec_depth = parse(key, v)?,
            "dec_heads" => m.dec_heads = parse(key, v)?,
            "mlp_ratio" => m.mlp_ratio = parse(key, v)?,
            "num_queries" => m.num_queries = parse(key, v)?,
            "scale_clamp" => m.scale_clamp = parse(key, v)?,
            "base_lr" => t.base_lr = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "beta1" => t.beta1 = parse(key, v)?,
            "beta2" => t.beta2 = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "warmup_epochs" => t.warmup_epochs = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "mask_ratio" => t.mask_ratio = parse(key, v)?,
            "loss_mode" => t.loss_mode = parse::<LossMode>(key, v)?,
            "seed" => t.seed = parse(key, v)?,
            "crop" => {
                t.augmentation.crop_scale = if parse_bool(key, v)? {
                    Some(t.augmentation.crop_scale.unwrap_or((0.2, 1.0)))
                } else {
                    None
                }
            }
            "crop_min_scale" => {
                let lo = parse(key, v)?;
                t.augmentation.crop_scale = Some((lo, 1.0));
            }
            "hflip" => t.augmentation.hflip = parse_bool(key, v)?,
            "randaug" => {
                t.augmentation.randaug = if parse_bool(key, v)? {
                    Some(t.augmentation.randaug.unwrap_or_default())
                } else {
                    None
                }
            }
            "randaug_ops" | "randaug_magnitude" | "randaug_std" => {
                let ra = t.augmentation.randaug.get_or_insert_with(Default::default);
                match key {
                    "randaug_ops" => ra.num_ops = parse(key, v)?,
                    "randaug_magnitude" => ra.magnitude = parse(key, v)?,
                    _ => ra.magnitude_std = parse(key, v)?,
                }
            }
            "background" => c.background = parse_rgb(key, v)?,
            "dilation" => c.dilation = parse(key, v)?,
            "cutoff" => c.cutoff = parse(key, v)?,
            "tile_size" => c.tile_size = parse(key, v)?,
            "depth_near" => c.depth_near = parse(key, v)?,
            "depth_far" => c.depth_far = parse(key, v)?,
            "layers" => z.layers = parse(key, v)?,
            "threshold" => z.threshold = parse(key, v)?,
            "layer_mode" => z.layer_mode = parse::<GroupMode>(key, v)?,
            "edge_mode" => z.edge_mode = parse::<GroupMode>(key, v)?,
            "split" => z.split = if v.is_empty() { None } else { Some(parse(key, v)?) },
            "data_dir" => self.paths.data_dir = opt_path(v),
            "checkpoint" => self.paths.checkpoint = opt_path(v),
            "output_dir" => self.paths.output_dir = opt_path(v),
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies every assignment in `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: n + 1,
                message: format!("expected key = value, got '{line}'"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid("config", format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn camera(&self) -> CameraConfig {
        let mut cam = CameraConfig::new(self.model.image_height, self.model.image_width);
        cam.background = self.camera.background;
        cam.dilation = self.camera.dilation;
        cam.cutoff = self.camera.cutoff;
        cam.tile_size = self.camera.tile_size;
        cam.depth_range = [self.camera.depth_near, self.camera.depth_far];
        cam
    }

    /// Re-checks every constituent and cross-field constraint; the error names
    /// the offending field.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.model.validate().map_err(|e| invalid("model", e.to_string()))?;
        self.train.validate().map_err(|e| invalid("train", e.to_string()))?;
        self.camera().validate().map_err(|e| invalid("camera", e.to_string()))?;
        if self.camera.background.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(invalid("background", "channels must lie in [0, 1]"));
        }
        let z = &self.zeroshot;
        if z.layers < 2 {
            return Err(invalid("layers", format!("need at least 2, got {}", z.layers)));
        }
        if !(z.threshold > 0.0 && z.threshold <= 1.0) {
            return Err(invalid("threshold", format!("must lie in (0, 1], got {}", z.threshold)));
        }
        if z.layer_mode == GroupMode::EqualCount && z.layers > self.model.num_queries {
            return Err(invalid(
                "layers",
                format!("{} equal-count layers exceed num_queries {}", z.layers, self.model.num_queries),
            ));
        }
        if let Some(s) = z.split {
            if s > z.layers {
                return Err(invalid("split", format!("{s} exceeds layers {}", z.layers)));
            }
        }
        Ok(())
    }

    /// Serialises every key; `from_text` of the result reproduces `self`.
    pub fn to_kv_string(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let c = &self.camera;
        let z = &self.zeroshot;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("string write");
        kv("image_height", m.image_height.to_string());
        kv("image_width", m.image_width.to_string());
        kv("patch_size", m.patch_size.to_string());
        kv("enc_dim", m.enc_dim.to_string());
        kv("enc_depth", m.enc_depth.to_string());
        kv("enc_heads", m.enc_heads.to_string());
        kv("dec_dim", m.dec_dim.to_string());
        kv("dec_depth", m.dec_depth.to_string());
        kv("dec_heads", m.dec_heads.to_string());
        kv("mlp_ratio", m.mlp_ratio.to_string());
        kv("num_queries", m.num_queries.to_string());
        kv("scale_clamp", m.scale_clamp.to_string());
        kv("base_lr", t.base_lr.to_string());
        kv("weight_decay", t.weight_decay.to_string());
        kv("beta1", t.beta1.to_string());
        kv("beta2", t.beta2.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("warmup_epochs", t.warmup_epochs.to_string());
        kv("epochs", t.epochs.to_string());
        kv("mask_ratio", t.mask_ratio.to_string());
        kv("loss_mode", t.loss_mode.to_string());
        kv("seed", t.seed.to_string());
        match t.augmentation.crop_scale {
            Some((lo, _)) => kv("crop_min_scale", lo.to_string()),
            None => kv("crop", "false".into()),
        }
        kv("hflip", t.augmentation.hflip.to_string());
        match t.augmentation.randaug {
            Some(ra) => {
                kv("randaug_ops", ra.num_ops.to_string());
                kv("randaug_magnitude", ra.magnitude.to_string());
                kv("randaug_std", ra.magnitude_std.to_string());
            }
            None => kv("randaug", "false".into()),
        }
        kv("background", c.background.map(|v| v.to_string()).join(","));
        kv("dilation", c.dilation.to_string());
        kv("cutoff", c.cutoff.to_string());
        kv("tile_size", c.tile_size.to_string());
        kv("depth_near", c.depth_near.to_string());
        kv("depth_far", c.depth_far.to_string());
        kv("layers", z.layers.to_string());
        kv("threshold", z.threshold.to_string());
        kv("layer_mode", z.layer_mode.to_string());
        kv("edge_mode", z.edge_mode.to_string());
        kv("split", z.split.map(|s| s.to_string()).unwrap_or_default());
        kv("data_dir", path(&self.paths.data_dir));
        kv("checkpoint", path(&self.paths.checkpoint));
        kv("output_dir", path(&self.paths.output_dir));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        assert_eq!(RunConfig::from_text(&cfg.to_kv_string()).unwrap(), cfg);
    }

    #[test]
    fn later_assignments_win() {
        let cfg = RunConfig::from_text("seed = 3\n# note\nseed=5  # inline\n").unwrap();
        assert_eq!(cfg.train.seed, 5);
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(
            RunConfig::from_text("nope = 1").unwrap_err(),
            ConfigError::UnknownKey("nope".into())
        );
        let e = RunConfig::from_text("enc_dim = abc").unwrap_err();
        assert!(e.to_string().contains("enc_dim"));
        assert!(matches!(RunConfig::from_text("just words"), Err(ConfigError::Syntax { line: 1, .. })));
        let mut cfg = RunConfig::default();
        cfg.set("patch_size", "7").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("patch"));
        let mut cfg = RunConfig::default();
        cfg.set("threshold", "0").unwrap();
        assert!(cfg.validate().unwrap_err().to_string().contains("threshold"));
    }

    #[test]
    fn every_key_is_settable() {
        let cfg = RunConfig::default();
        let text = cfg.to_kv_string();
        for line in text.lines() {
            let key = line.split('=').next().unwrap().trim();
            assert!(RunConfig::keys().contains(&key), "{key}");
        }
    }
}
