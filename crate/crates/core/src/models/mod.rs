//! Dual-encoder, dual-decoder forecasters.
//!
//! Both architectures encode the observed position and speed sequences with
//! separate encoders, fuse the two encodings, and run two decoders: one
//! producing the future speed sequence and one producing per-frame crossing
//! logits. Future boxes are the cumulative sum of predicted speeds from the
//! last observed box.

mod attention;
mod checkpoint;
mod lstm;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Graph, ParameterSet, Tensor, TensorError, Var};
use crate::seqdata::{reconstruct_positions, ActionLabel, BBox, DataError, ObservationWindow, SpeedVec};

pub use attention::{attention, causal_mask, multi_head_attention, positional_encoding, MultiHeadVars};
pub use checkpoint::{
    load_checkpoint, read_checkpoint, read_tensor_entries, save_checkpoint, write_checkpoint, write_tensor_entries,
    CheckpointError, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use lstm::{lstm_cell, lstm_decode, lstm_encode, lstm_forward, LstmCellVars, LSTM_GATE_PARAMS};
pub use transformer::{tf_decode, tf_encode, tf_forward, tf_teacher_inputs};

/// Speeds are multiplied by this factor before entering a network and
/// predicted speeds are divided by it on the way out, so that per-frame
/// deltas of a few thousandths reach the layers at unit scale.
pub const DEFAULT_SPEED_SCALE: f64 = 100.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("batch mismatch: {0}")]
    Batch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    TfEd,
    LstmEd,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::TfEd => "tf_ed",
            Self::LstmEd => "lstm_ed",
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Self::TfEd => 0,
            Self::LstmEd => 1,
        }
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Self::TfEd),
            1 => Some(Self::LstmEd),
            _ => None,
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "tf_ed" | "tf" | "transformer" => Ok(Self::TfEd),
            "lstm_ed" | "lstm" => Ok(Self::LstmEd),
            other => Err(ModelError::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub embed_dim: usize,
    pub num_layers: usize,
    /// Attention heads (transformer only).
    pub num_heads: usize,
    /// Feed-forward width (transformer only).
    pub ff_dim: usize,
    pub obs_len: usize,
    pub pred_len: usize,
    pub speed_scale: f64,
}

impl ModelConfig {
    /// Transformer defaults: D=256, 3 layers, 8 heads, feed-forward 512;
    /// the single-step variant uses one layer and one head.
    pub fn tf_ed(obs_len: usize, pred_len: usize) -> Self {
        let (num_layers, num_heads) = if pred_len == 1 { (1, 1) } else { (3, 8) };
        Self {
            kind: ModelKind::TfEd,
            embed_dim: 256,
            num_layers,
            num_heads,
            ff_dim: 512,
            obs_len,
            pred_len,
            speed_scale: DEFAULT_SPEED_SCALE,
        }
    }

    /// LSTM defaults: hidden size 256, one layer.
    pub fn lstm_ed(obs_len: usize, pred_len: usize) -> Self {
        Self {
            kind: ModelKind::LstmEd,
            embed_dim: 256,
            num_layers: 1,
            num_heads: 1,
            ff_dim: 512,
            obs_len,
            pred_len,
            speed_scale: DEFAULT_SPEED_SCALE,
        }
    }

    pub fn default_for(kind: ModelKind, obs_len: usize, pred_len: usize) -> Self {
        match kind {
            ModelKind::TfEd => Self::tf_ed(obs_len, pred_len),
            ModelKind::LstmEd => Self::lstm_ed(obs_len, pred_len),
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.embed_dim == 0 || self.num_layers == 0 || self.obs_len == 0 || self.pred_len == 0 {
            return err(format!("dimensions must be positive: {self:?}"));
        }
        if !(self.speed_scale.is_finite() && self.speed_scale > 0.0) {
            return err(format!("speed_scale must be positive, got {}", self.speed_scale));
        }
        if self.kind == ModelKind::TfEd {
            if self.num_heads == 0 || self.ff_dim == 0 {
                return err("num_heads and ff_dim must be positive".into());
            }
            if self.embed_dim % self.num_heads != 0 {
                return err(format!(
                    "embed_dim {} is not divisible by num_heads {}",
                    self.embed_dim, self.num_heads
                ));
            }
            if self.embed_dim % 2 != 0 {
                return err(format!(
                    "embed_dim {} must be even for positional encoding",
                    self.embed_dim
                ));
            }
        }
        Ok(())
    }
}

/// Predicted speeds, reconstructed boxes and crossing probabilities over a horizon.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub speed_seq: Vec<SpeedVec>,
    pub position_seq: Vec<BBox>,
    pub action_probs: Vec<f64>,
    pub action_labels: Vec<ActionLabel>,
}

impl Forecast {
    /// Assembles a forecast; boxes are cumulative sums from `last_observed` and a
    /// probability of at least 0.5 is labeled crossing.
    pub fn new(last_observed: BBox, speed_seq: Vec<SpeedVec>, action_probs: Vec<f64>) -> Self {
        assert_eq!(speed_seq.len(), action_probs.len(), "speed and action horizons differ");
        let position_seq = reconstruct_positions(last_observed, &speed_seq);
        let action_labels = action_probs
            .iter()
            .map(|&p| {
                if p >= 0.5 {
                    ActionLabel::Crossing
                } else {
                    ActionLabel::NotCrossing
                }
            })
            .collect();
        Self {
            speed_seq,
            position_seq,
            action_probs,
            action_labels,
        }
    }

    pub fn horizon(&self) -> usize {
        self.speed_seq.len()
    }
}

/// Anything that maps observation windows to forecasts.
pub trait Forecaster {
    /// Longest horizon this forecaster supports.
    fn max_horizon(&self) -> usize;

    fn forecast_batch(&self, windows: &[&ObservationWindow], horizon: usize) -> Result<Vec<Forecast>, ModelError>;

    fn forecast(&self, window: &ObservationWindow, horizon: usize) -> Result<Forecast, ModelError> {
        Ok(self.forecast_batch(&[window], horizon)?.remove(0))
    }
}

/// Flattened network inputs for a batch of equally shaped windows.
///
/// Speeds are stored in network units (multiplied by the speed scale);
/// target speeds stay in normalized units for the loss.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub size: usize,
    pub obs_len: usize,
    pub pred_len: usize,
    pub positions: Vec<f64>,
    pub speeds: Vec<f64>,
    pub target_speeds: Vec<f64>,
    pub target_actions: Vec<f64>,
    pub last_positions: Vec<BBox>,
}

impl WindowBatch {
    pub fn new(windows: &[&ObservationWindow], speed_scale: f64) -> Result<Self, ModelError> {
        let first = windows.first().ok_or_else(|| ModelError::Batch("empty batch".into()))?;
        let (o, t) = (first.obs_len(), first.pred_len());
        let mut b = Self {
            size: windows.len(),
            obs_len: o,
            pred_len: t,
            positions: Vec::with_capacity(windows.len() * o * 4),
            speeds: Vec::with_capacity(windows.len() * o * 4),
            target_speeds: Vec::with_capacity(windows.len() * t * 4),
            target_actions: Vec::with_capacity(windows.len() * t),
            last_positions: Vec::with_capacity(windows.len()),
        };
        for w in windows {
            if w.obs_len() != o || w.pred_len() != t {
                return Err(ModelError::Batch(format!(
                    "window shapes differ: O={} T={} vs O={o} T={t}",
                    w.obs_len(),
                    w.pred_len()
                )));
            }
            b.positions.extend(w.positions.iter().flat_map(BBox::to_array));
            b.speeds
                .extend(w.speeds.iter().flat_map(|s| s.to_array().map(|v| v * speed_scale)));
            b.target_speeds
                .extend(w.target_speeds.iter().flat_map(SpeedVec::to_array));
            b.target_actions.extend(w.target_actions.iter().map(|a| a.as_f64()));
            b.last_positions.push(w.last_position());
        }
        Ok(b)
    }

    /// Last observed speed of every window in network units, `[B, 4]`.
    pub fn last_speeds(&self) -> Vec<f64> {
        let o = self.obs_len;
        (0..self.size)
            .flat_map(|i| self.speeds[(i * o + o - 1) * 4..(i * o + o) * 4].iter().copied())
            .collect()
    }
}

/// A configured architecture together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

/// Inference is chunked into batches of this many windows.
const INFERENCE_BATCH: usize = 256;

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let params = init_params(&config, seed)?;
        Ok(Self { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParameterSet) -> Result<Self, ModelError> {
        config.validate()?;
        let expected = init_params(&config, 0)?;
        checkpoint::check_layout(&expected, &params).map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(Self { config, params })
    }

    /// Training-mode forward pass returning `(speeds [B, T, 4], logits [B, T])`.
    ///
    /// The transformer is teacher-forced with the shifted ground-truth speeds;
    /// the LSTM always unrolls on its own predictions.
    pub fn forward_train(&self, g: &mut Graph, batch: &WindowBatch) -> Result<(Var, Var), ModelError> {
        match self.config.kind {
            ModelKind::TfEd => {
                let inputs = tf_teacher_inputs(g, &self.params, &self.config, batch)?;
                tf_forward(g, &self.params, &self.config, batch, inputs)
            }
            ModelKind::LstmEd => lstm_forward(g, &self.params, &self.config, batch, batch.pred_len),
        }
    }

    /// Evaluation-mode decoding: returns speeds `[B, horizon, 4]` (normalized
    /// units) and crossing probabilities `[B, horizon]`.
    pub fn decode_autoregressive(
        &self,
        batch: &WindowBatch,
        horizon: usize,
    ) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
        let mut g = Graph::new();
        let (speeds, logits) = match self.config.kind {
            ModelKind::TfEd => transformer::tf_autoregressive(&mut g, &self.params, &self.config, batch, horizon)?,
            ModelKind::LstmEd => {
                let (s, l) = lstm_forward(&mut g, &self.params, &self.config, batch, horizon)?;
                (g.value(s).to_vec(), g.value(l).to_vec())
            }
        };
        let probs = logits.iter().map(|&z| sigmoid(z)).collect();
        Ok((speeds, probs))
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Forecaster for Model {
    fn max_horizon(&self) -> usize {
        self.config.pred_len
    }

    fn forecast_batch(&self, windows: &[&ObservationWindow], horizon: usize) -> Result<Vec<Forecast>, ModelError> {
        if horizon == 0 || horizon > self.config.pred_len {
            return Err(ModelError::Config(format!(
                "horizon {horizon} outside 1..={}",
                self.config.pred_len
            )));
        }
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(INFERENCE_BATCH) {
            if let Some(w) = chunk.iter().find(|w| w.obs_len() != self.config.obs_len) {
                return Err(ModelError::Batch(format!(
                    "window has O={}, model expects O={}",
                    w.obs_len(),
                    self.config.obs_len
                )));
            }
            // Targets are unused at inference; strip them so windows of any horizon batch together.
            let stripped: Vec<ObservationWindow> = chunk.iter().map(|w| w.truncated(0)).collect();
            let refs: Vec<&ObservationWindow> = stripped.iter().collect();
            let batch = WindowBatch::new(&refs, self.config.speed_scale)?;
            let (speeds, probs) = self.decode_autoregressive(&batch, horizon)?;
            for (i, w) in chunk.iter().enumerate() {
                let s = speeds[i * horizon * 4..(i + 1) * horizon * 4]
                    .chunks(4)
                    .map(|c| SpeedVec::new(c[0], c[1], c[2], c[3]))
                    .collect();
                let p = probs[i * horizon..(i + 1) * horizon].to_vec();
                out.push(Forecast::new(w.last_position(), s, p));
            }
        }
        Ok(out)
    }
}

struct Init<'a> {
    params: &'a mut ParameterSet,
    rng: ChaCha8Rng,
}

impl Init<'_> {
    /// Glorot-uniform weight matrix `[fan_in, fan_out]`.
    fn weight(&mut self, name: String, fan_in: usize, fan_out: usize) -> Result<(), TensorError> {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| self.rng.random_range(-a..a)).collect();
        self.params.insert(name, Tensor::new(vec![fan_in, fan_out], data)?)?;
        Ok(())
    }

    fn zeros(&mut self, name: String, len: usize) -> Result<(), TensorError> {
        self.params.insert(name, Tensor::zeros(vec![len]))?;
        Ok(())
    }

    fn ones(&mut self, name: String, len: usize) -> Result<(), TensorError> {
        self.params.insert(name, Tensor::new(vec![len], vec![1.0; len])?)?;
        Ok(())
    }

    fn linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize) -> Result<(), TensorError> {
        self.weight(format!("{prefix}.w"), fan_in, fan_out)?;
        self.zeros(format!("{prefix}.b"), fan_out)
    }

    fn mha(&mut self, prefix: &str, d: usize) -> Result<(), TensorError> {
        for p in ["q", "k", "v", "o"] {
            self.weight(format!("{prefix}.w{p}"), d, d)?;
            self.zeros(format!("{prefix}.b{p}"), d)?;
        }
        Ok(())
    }

    fn layer_norm(&mut self, prefix: &str, d: usize) -> Result<(), TensorError> {
        self.ones(format!("{prefix}.g"), d)?;
        self.zeros(format!("{prefix}.b"), d)
    }

    fn feed_forward(&mut self, prefix: &str, d: usize, ff: usize) -> Result<(), TensorError> {
        self.weight(format!("{prefix}.w1"), d, ff)?;
        self.zeros(format!("{prefix}.b1"), ff)?;
        self.weight(format!("{prefix}.w2"), ff, d)?;
        self.zeros(format!("{prefix}.b2"), d)
    }

    fn lstm(&mut self, prefix: &str, input: usize, hidden: usize) -> Result<(), TensorError> {
        for gate in ["i", "f", "o", "c"] {
            self.weight(format!("{prefix}.w_x{gate}"), input, hidden)?;
            self.weight(format!("{prefix}.w_h{gate}"), hidden, hidden)?;
            self.zeros(format!("{prefix}.b_{gate}"), hidden)?;
        }
        Ok(())
    }
}

/// Deterministic parameter initialization: Glorot-uniform weights, zero
/// biases, unit layer-norm gains and a zero start token.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet, ModelError> {
    cfg.validate()?;
    let mut params = ParameterSet::new();
    let mut init = Init {
        params: &mut params,
        rng: ChaCha8Rng::seed_from_u64(seed),
    };
    let d = cfg.embed_dim;
    match cfg.kind {
        ModelKind::TfEd => {
            for enc in ["tf.enc_speed", "tf.enc_pos"] {
                init.linear(&format!("{enc}.embed"), 4, d)?;
                for l in 0..cfg.num_layers {
                    let p = format!("{enc}.layer{l}");
                    init.mha(&format!("{p}.attn"), d)?;
                    init.layer_norm(&format!("{p}.ln1"), d)?;
                    init.feed_forward(&format!("{p}.ff"), d, cfg.ff_dim)?;
                    init.layer_norm(&format!("{p}.ln2"), d)?;
                }
            }
            init.zeros("tf.start_token".into(), 4)?;
            for (dec, out_dim) in [("tf.dec_speed", 4), ("tf.dec_action", 1)] {
                init.linear(&format!("{dec}.embed"), 4, d)?;
                for l in 0..cfg.num_layers {
                    let p = format!("{dec}.layer{l}");
                    init.mha(&format!("{p}.self_attn"), d)?;
                    init.layer_norm(&format!("{p}.ln1"), d)?;
                    init.mha(&format!("{p}.cross_attn"), d)?;
                    init.layer_norm(&format!("{p}.ln2"), d)?;
                    init.feed_forward(&format!("{p}.ff"), d, cfg.ff_dim)?;
                    init.layer_norm(&format!("{p}.ln3"), d)?;
                }
                init.linear(&format!("{dec}.out"), d, out_dim)?;
            }
        }
        ModelKind::LstmEd => {
            for enc in ["lstm.enc_speed", "lstm.enc_pos"] {
                for l in 0..cfg.num_layers {
                    init.lstm(&format!("{enc}.l{l}"), if l == 0 { 4 } else { d }, d)?;
                }
            }
            for l in 0..cfg.num_layers {
                init.linear(&format!("lstm.fuse.l{l}.h"), 2 * d, d)?;
                init.linear(&format!("lstm.fuse.l{l}.c"), 2 * d, d)?;
            }
            for (dec, out_dim) in [("lstm.dec_speed", 4), ("lstm.dec_action", 1)] {
                for l in 0..cfg.num_layers {
                    init.lstm(&format!("{dec}.l{l}"), if l == 0 { 4 } else { d }, d)?;
                }
                init.linear(&format!("{dec}.out"), d, out_dim)?;
            }
        }
    }
    Ok(params)
}
