//! Run configuration files (TOML).
//!
//! ```toml
//! # top-level keys precede any section
//! seed = 7
//!
//! [scenario]
//! num_tracks = 200
//! road_band = [0.2, 0.8]
//!
//! [mix]
//! cross = 0.3
//!
//! [window]
//! obs_len = 16
//!
//! [model]
//! kind = "tf_ed"
//!
//! [train]
//! learning_rate = 1e-4
//!
//! [paths]
//! tracks = "data/tracks.jsonl"
//! output_dir = "runs/demo"
//! ```
//!
//! Relative paths resolve against the directory holding the config file.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use pedcast_core::models::{ModelConfig, ModelKind, DEFAULT_SPEED_SCALE};
use pedcast_core::seqdata::{ImageSize, WindowSpec};
use pedcast_core::synth::ScenarioConfig;
use pedcast_core::trainer::TrainConfig;
use toml::{Table, Value};

use crate::CliError;

pub const SEED_ENV: &str = "PEDCAST_SEED";

/// Model fields left unset fall back to the per-architecture defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub embed_dim: Option<usize>,
    pub num_layers: Option<usize>,
    pub num_heads: Option<usize>,
    pub ff_dim: Option<usize>,
    pub speed_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::TfEd,
            embed_dim: None,
            num_layers: None,
            num_heads: None,
            ff_dim: None,
            speed_scale: DEFAULT_SPEED_SCALE,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub obs_len: usize,
    pub pred_len: usize,
    pub stride: usize,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub tracks: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            scenario: ScenarioConfig::default(),
            obs_len: 16,
            pred_len: 16,
            stride: 1,
            model: ModelSection::default(),
            train: TrainConfig::default(),
            tracks: None,
            output_dir: None,
        }
    }
}

fn scalar(section: &str, key: &str, value: &Value) -> Result<String, CliError> {
    match value {
        Value::String(s) => Ok(s.clone()),
        Value::Integer(i) => Ok(i.to_string()),
        Value::Float(f) => Ok(f.to_string()),
        Value::Boolean(b) => Ok(b.to_string()),
        other => Err(CliError::Config(format!(
            "{section}.{key}: expected a single value, got `{other}`"
        ))),
    }
}

fn parse<T: FromStr>(section: &str, key: &str, value: &Value) -> Result<T, CliError> {
    let s = scalar(section, key, value)?;
    s.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{section}.{key}: cannot parse `{s}`")))
}

fn parse_pair<T: FromStr>(section: &str, key: &str, value: &Value) -> Result<(T, T), CliError> {
    match value.as_array().map(Vec::as_slice) {
        Some([a, b]) => Ok((parse(section, key, a)?, parse(section, key, b)?)),
        _ => Err(CliError::Config(format!(
            "{section}.{key}: expected a two-element array, got `{value}`"
        ))),
    }
}

/// Parses `WxH`, e.g. `1920x1080`.
pub fn parse_image_size(s: &str) -> Result<ImageSize, String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WxH, got `{s}`"))?;
    let w: f64 = w.trim().parse().map_err(|_| format!("bad width in `{s}`"))?;
    let h: f64 = h.trim().parse().map_err(|_| format!("bad height in `{s}`"))?;
    if !(w.is_finite() && h.is_finite() && w > 0.0 && h > 0.0) {
        return Err(format!("image size must be positive, got `{s}`"));
    }
    Ok(ImageSize::new(w, h))
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse_str(&text, base)
    }

    pub fn parse_str(text: &str, base: &Path) -> Result<Self, CliError> {
        let table: Table = text
            .parse()
            .map_err(|e| CliError::Config(format!("config syntax: {e}")))?;
        let mut cfg = RunConfig::default();
        for (name, value) in &table {
            match value {
                Value::Table(props) => {
                    for (key, v) in props {
                        cfg.set(name, key, v, base)?;
                    }
                }
                v => cfg.set("", name, v, base)?,
            }
        }
        cfg.apply_seed(cfg.seed);
        Ok(cfg)
    }

    /// Applies `PEDCAST_SEED` when set.
    pub fn with_env_seed(mut self) -> Result<Self, CliError> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            let seed = v
                .trim()
                .parse()
                .map_err(|_| CliError::Config(format!("{SEED_ENV}: cannot parse `{v}` as a seed")))?;
            self.apply_seed(seed);
        }
        Ok(self)
    }

    fn apply_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.scenario.seed = seed;
        self.train.seed = seed;
    }

    fn set(&mut self, section: &str, key: &str, value: &Value, base: &Path) -> Result<(), CliError> {
        let s = &mut self.scenario;
        let path = |v: &Value| scalar(section, key, v).map(|s| base.join(s.trim()));
        match (section, key) {
            ("", "seed") => self.seed = parse(section, key, value)?,

            ("scenario", "num_tracks") => s.num_tracks = parse(section, key, value)?,
            ("scenario", "frame_rate") => s.frame_rate = parse(section, key, value)?,
            ("scenario", "noise_sigma") => s.noise_sigma = parse(section, key, value)?,
            ("scenario", "dropout_prob") => s.dropout_prob = parse(section, key, value)?,
            ("scenario", "id_switch_prob") => s.id_switch_prob = parse(section, key, value)?,
            ("scenario", "approach_rate") => s.approach_rate = parse(section, key, value)?,
            ("scenario", "road_band") => s.road_band = parse_pair(section, key, value)?,
            ("scenario", "traverse_speed") => s.traverse_speed = parse_pair(section, key, value)?,
            ("scenario", "walk_speed") => s.walk_speed = parse_pair(section, key, value)?,
            ("scenario", "approach_frames") => s.approach_frames = parse_pair(section, key, value)?,
            ("scenario", "stop_frames") => s.stop_frames = parse_pair(section, key, value)?,
            ("scenario", "exit_frames") => s.exit_frames = parse_pair(section, key, value)?,
            ("scenario", "loiter_frames") => s.loiter_frames = parse_pair(section, key, value)?,

            ("mix", "cross") => s.mix.cross = parse(section, key, value)?,
            ("mix", "not_cross") => s.mix.not_cross = parse(section, key, value)?,
            ("mix", "diagonal_cross") => s.mix.diagonal_cross = parse(section, key, value)?,
            ("mix", "stop_then_cross") => s.mix.stop_then_cross = parse(section, key, value)?,

            ("window", "obs_len") => self.obs_len = parse(section, key, value)?,
            ("window", "pred_len") => self.pred_len = parse(section, key, value)?,
            ("window", "stride") => self.stride = parse(section, key, value)?,

            ("model", "kind") => {
                self.model.kind = scalar(section, key, value)?
                    .trim()
                    .parse()
                    .map_err(|e| CliError::Config(format!("model.kind: {e}")))?
            }
            ("model", "embed_dim") => self.model.embed_dim = Some(parse(section, key, value)?),
            ("model", "num_layers") => self.model.num_layers = Some(parse(section, key, value)?),
            ("model", "num_heads") => self.model.num_heads = Some(parse(section, key, value)?),
            ("model", "ff_dim") => self.model.ff_dim = Some(parse(section, key, value)?),
            ("model", "speed_scale") => self.model.speed_scale = parse(section, key, value)?,

            ("train", "batch_size") => self.train.batch_size = parse(section, key, value)?,
            ("train", "learning_rate") => self.train.learning_rate = parse(section, key, value)?,
            ("train", "epochs") => self.train.epochs = parse(section, key, value)?,
            ("train", "lambda") => self.train.loss_weight_lambda = parse(section, key, value)?,
            ("train", "eval_every") => self.train.eval_every = parse(section, key, value)?,
            ("train", "image_size") => {
                self.train.image_size = parse_image_size(&scalar(section, key, value)?)
                    .map_err(|e| CliError::Config(format!("train.image_size: {e}")))?
            }

            ("paths", "tracks") => self.tracks = Some(path(value)?),
            ("paths", "output_dir") => self.output_dir = Some(path(value)?),

            ("", _) => return Err(CliError::Config(format!("unknown top-level key or section `{key}`"))),
            _ => return Err(CliError::Config(format!("unknown key `{key}` in section [{section}]"))),
        }
        Ok(())
    }

    pub fn window_spec(&self) -> Result<WindowSpec, CliError> {
        WindowSpec::new(self.obs_len, self.pred_len, self.stride)
            .map_err(|e| CliError::Config(format!("[window]: {e}")))
    }

    pub fn model_config(&self) -> Result<ModelConfig, CliError> {
        let m = &self.model;
        let mut cfg = ModelConfig::default_for(m.kind, self.obs_len, self.pred_len);
        if let Some(v) = m.embed_dim {
            cfg.embed_dim = v;
        }
        if let Some(v) = m.num_layers {
            cfg.num_layers = v;
        }
        if let Some(v) = m.num_heads {
            cfg.num_heads = v;
        }
        if let Some(v) = m.ff_dim {
            cfg.ff_dim = v;
        }
        cfg.speed_scale = m.speed_scale;
        cfg.validate().map_err(|e| CliError::Config(format!("[model]: {e}")))?;
        Ok(cfg)
    }
}
