//! Multi-task training loop with deterministic shuffling, checkpointing and
//! exact resume.
//!
//! Files written to the checkpoint directory:
//!
//! * `model_last.ckpt`: parameters after the most recent checkpointed epoch
//! * `model_best.ckpt`: parameters with the lowest validation loss so far
//! * `train_state.bin`: everything needed to resume (optimizer moments, log, best model)
//! * `train_log.csv`: one record per completed epoch

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{adam_step, AdamConfig, AdamState, Graph, ParameterSet, Tensor, TensorError, Var};
use crate::metrics::{evaluate_forecaster, EvalReport, MetricError};
use crate::models::{
    read_checkpoint, read_tensor_entries, save_checkpoint, write_checkpoint, write_tensor_entries, CheckpointError,
    Forecaster, Model, ModelConfig, ModelError, WindowBatch,
};
use crate::seqdata::{ImageSize, ObservationWindow};

pub const LAST_CHECKPOINT: &str = "model_last.ckpt";
pub const BEST_CHECKPOINT: &str = "model_best.ckpt";
pub const STATE_FILE: &str = "train_state.bin";
pub const LOG_FILE: &str = "train_log.csv";

const STATE_MAGIC: [u8; 4] = *b"PTST";
const STATE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("cannot resume: {0}")]
    Resume(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    /// Weight of the action term relative to the speed term.
    pub loss_weight_lambda: f64,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Validation ADE/accuracy and checkpoints every this many epochs.
    pub eval_every: usize,
    /// Image size for the pixel-unit validation ADE.
    pub image_size: ImageSize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            learning_rate: 1e-4,
            epochs: 100,
            loss_weight_lambda: 1.0,
            seed: 0,
            checkpoint_dir: None,
            eval_every: 10,
            image_size: ImageSize::JAAD,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1".into());
        }
        if self.epochs == 0 {
            return bad("epochs must be ≥ 1".into());
        }
        if self.eval_every == 0 {
            return bad("eval_every must be ≥ 1".into());
        }
        if !(self.loss_weight_lambda.is_finite() && self.loss_weight_lambda >= 0.0) {
            return bad(format!("loss_weight_lambda {} must be ≥ 0", self.loss_weight_lambda));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate {} must be ≥ 0", self.learning_rate));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_ade: Option<f64>,
    pub val_accuracy: Option<f64>,
    /// Seconds spent on the epoch; not reproducible across runs and not kept in the resume state.
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_loss,val_ade,val_accuracy,wall_time";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{:.3}\n",
                r.epoch,
                r.train_loss,
                opt(r.val_loss),
                opt(r.val_ade),
                opt(r.val_accuracy),
                r.wall_time
            ));
        }
        s
    }

    /// The log with wall times zeroed, for run-to-run comparisons.
    pub fn without_timing(&self) -> TrainLog {
        TrainLog {
            records: self
                .records
                .iter()
                .map(|r| EpochRecord {
                    wall_time: 0.0,
                    ..r.clone()
                })
                .collect(),
        }
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

/// `MSE(scaled speeds) + λ·BCE(logits)`, each term averaged over its elements.
///
/// Both predicted and target speeds are multiplied by `speed_scale` before the
/// squared error, matching the units the networks operate in.
pub fn multitask_loss(
    g: &mut Graph,
    speeds: Var,
    logits: Var,
    batch: &WindowBatch,
    lambda: f64,
    speed_scale: f64,
) -> Result<Var, TensorError> {
    let (b, t) = (batch.size, batch.pred_len);
    let pred = g.scale(speeds, speed_scale)?;
    let target: Vec<f64> = batch.target_speeds.iter().map(|v| v * speed_scale).collect();
    let target = g.constant_from(vec![b, t, 4], target)?;
    let labels = g.constant_from(vec![b, t], batch.target_actions.clone())?;
    let mse = g.mse(pred, target)?;
    let bce = g.bce_with_logits(logits, labels)?;
    let bce = g.scale(bce, lambda)?;
    g.add(mse, bce)
}

fn batch_loss(
    model: &Model,
    windows: &[&ObservationWindow],
    lambda: f64,
) -> Result<(Graph, Var, WindowBatch), TrainError> {
    let batch = WindowBatch::new(windows, model.config.speed_scale)?;
    let mut g = Graph::new();
    let (s, l) = model.forward_train(&mut g, &batch)?;
    let loss = multitask_loss(&mut g, s, l, &batch, lambda, model.config.speed_scale)?;
    Ok((g, loss, batch))
}

/// Training-mode loss averaged over windows.
pub fn dataset_loss(
    model: &Model,
    windows: &[ObservationWindow],
    batch_size: usize,
    lambda: f64,
) -> Result<f64, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::Metric(MetricError::Empty));
    }
    let mut parts = Vec::new();
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&ObservationWindow> = chunk.iter().collect();
        let (g, loss, _) = batch_loss(model, &refs, lambda)?;
        parts.push(g.scalar(loss) * chunk.len() as f64);
    }
    Ok(crate::metrics::stable_sum(&parts) / windows.len() as f64)
}

/// Scores `forecaster` on every window over the longest horizon both support.
pub fn evaluate(
    forecaster: &dyn Forecaster,
    test_set: &[ObservationWindow],
    image: ImageSize,
) -> Result<EvalReport, TrainError> {
    let shortest = test_set
        .iter()
        .map(ObservationWindow::pred_len)
        .min()
        .ok_or(TrainError::Metric(MetricError::Empty))?;
    let refs: Vec<&ObservationWindow> = test_set.iter().collect();
    Ok(evaluate_forecaster(
        forecaster,
        &refs,
        shortest.min(forecaster.max_horizon()),
        image,
    )?)
}

/// Resumable optimizer loop around one model.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub model: Model,
    pub log: TrainLog,
    pub best: Option<(usize, f64, Model)>,
    config: TrainConfig,
    adam: AdamState,
}

impl Trainer {
    /// Fresh model initialized from `config.seed`.
    pub fn new(model_config: ModelConfig, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let model = Model::new(model_config, config.seed)?;
        Ok(Self::from_model(model, config))
    }

    pub fn from_model(model: Model, config: TrainConfig) -> Self {
        let adam = AdamState::new(
            &model.params,
            AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
        );
        Self {
            model,
            log: TrainLog::default(),
            best: None,
            config,
            adam,
        }
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epochs_done(&self) -> usize {
        self.log.records.len()
    }

    /// Runs one epoch and returns its record.
    pub fn run_epoch(
        &mut self,
        train: &[ObservationWindow],
        val: &[ObservationWindow],
    ) -> Result<EpochRecord, TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyTrainSet);
        }
        let start = Instant::now();
        let epoch = self.epochs_done() + 1;
        let lambda = self.config.loss_weight_lambda;

        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);

        let mut parts = Vec::with_capacity(order.len().div_ceil(self.config.batch_size));
        for (bi, chunk) in order.chunks(self.config.batch_size).enumerate() {
            let refs: Vec<&ObservationWindow> = chunk.iter().map(|&i| &train[i]).collect();
            let non_finite = |value| TrainError::NonFinite {
                epoch,
                batch: bi,
                value,
            };
            let (mut g, loss, _) = match batch_loss(&self.model, &refs, lambda) {
                Err(TrainError::Model(ModelError::Tensor(TensorError::NonFinite(_))))
                | Err(TrainError::Tensor(TensorError::NonFinite(_))) => return Err(non_finite(f64::NAN)),
                r => r?,
            };
            let value = g.scalar(loss);
            if !value.is_finite() {
                return Err(non_finite(value));
            }
            match g.backward(loss, &mut self.model.params) {
                Err(TensorError::NonFinite(_)) => return Err(non_finite(value)),
                r => r?,
            }
            adam_step(&mut self.model.params, &mut self.adam)?;
            parts.push(value * chunk.len() as f64);
        }
        let train_loss = crate::metrics::stable_sum(&parts) / train.len() as f64;

        let mut record = EpochRecord {
            epoch,
            train_loss,
            val_loss: None,
            val_ade: None,
            val_accuracy: None,
            wall_time: 0.0,
        };
        if !val.is_empty() {
            let vl = dataset_loss(&self.model, val, self.config.batch_size, lambda)?;
            record.val_loss = Some(vl);
            if self.best.as_ref().is_none_or(|(_, b, _)| vl < *b) {
                self.best = Some((epoch, vl, self.model.clone()));
            }
            if self.is_checkpoint_epoch(epoch) {
                let report = evaluate(&self.model, val, self.config.image_size)?;
                record.val_ade = Some(report.ade);
                record.val_accuracy = Some(report.accuracy);
            }
        }
        record.wall_time = start.elapsed().as_secs_f64();
        self.log.records.push(record.clone());
        if self.is_checkpoint_epoch(epoch) {
            if let Some(dir) = self.config.checkpoint_dir.clone() {
                self.write_artifacts(&dir)?;
            }
        }
        Ok(record)
    }

    fn is_checkpoint_epoch(&self, epoch: usize) -> bool {
        epoch % self.config.eval_every == 0 || epoch == self.config.epochs
    }

    /// Trains until `config.epochs` epochs have completed.
    pub fn fit(&mut self, train: &[ObservationWindow], val: &[ObservationWindow]) -> Result<(), TrainError> {
        if train.is_empty() {
            return Err(TrainError::EmptyTrainSet);
        }
        while self.epochs_done() < self.config.epochs {
            self.run_epoch(train, val)?;
        }
        Ok(())
    }

    /// Writes the last and best checkpoints, the resume state and the log.
    pub fn write_artifacts(&self, dir: &Path) -> Result<(), TrainError> {
        fs::create_dir_all(dir)?;
        save_checkpoint(&self.model, dir.join(LAST_CHECKPOINT))?;
        let best = self.best.as_ref().map_or(&self.model, |(_, _, m)| m);
        save_checkpoint(best, dir.join(BEST_CHECKPOINT))?;
        self.save_state(dir.join(STATE_FILE))?;
        fs::write(dir.join(LOG_FILE), self.log.to_csv())?;
        Ok(())
    }

    pub fn save_state(&self, path: impl AsRef<Path>) -> Result<(), TrainError> {
        let path = path.as_ref();
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            self.write_state(&mut w)?;
            w.flush()?;
        }
        fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn write_state<W: Write>(&self, w: &mut W) -> Result<(), TrainError> {
        w.write_all(&STATE_MAGIC)?;
        w.write_all(&STATE_VERSION.to_le_bytes())?;
        write_checkpoint(w, &self.model)?;
        w.write_all(&self.adam.step_count.to_le_bytes())?;
        for moments in [&self.adam.first_moment, &self.adam.second_moment] {
            let entries: Vec<(&str, &Tensor)> = (0..self.model.params.len())
                .map(|i| (self.model.params.name(i), &moments[i]))
                .collect();
            write_tensor_entries(w, entries.into_iter())?;
        }
        match &self.best {
            Some((epoch, loss, model)) => {
                w.write_all(&[1])?;
                w.write_all(&(*epoch as u64).to_le_bytes())?;
                w.write_all(&loss.to_le_bytes())?;
                write_checkpoint(w, model)?;
            }
            None => w.write_all(&[0])?,
        }
        w.write_all(&(self.log.records.len() as u64).to_le_bytes())?;
        for r in &self.log.records {
            w.write_all(&(r.epoch as u64).to_le_bytes())?;
            for v in [
                Some(r.train_loss),
                r.val_loss,
                r.val_ade,
                r.val_accuracy,
            ] {
                w.write_all(&v.unwrap_or(f64::NAN).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Restores a trainer from `path`; `config` must use the same seed and learning rate.
    pub fn resume(path: impl AsRef<Path>, config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let mut r = BufReader::new(File::open(path)?);
        Self::read_state(&mut r, config)
    }

    pub fn read_state<R: Read>(r: &mut R, config: TrainConfig) -> Result<Self, TrainError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if magic != STATE_MAGIC {
            return Err(TrainError::Resume("not a training state file".into()));
        }
        let version = read_u32(r)?;
        if version != STATE_VERSION {
            return Err(TrainError::Resume(format!("unsupported state version {version}")));
        }
        let model = read_checkpoint(r)?;
        let step_count = read_u64(r)?;
        let first = read_moments(r, &model.params)?;
        let second = read_moments(r, &model.params)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let best = match flag[0] {
            0 => None,
            1 => {
                let epoch = read_u64(r)? as usize;
                let loss = read_f64(r)?;
                Some((epoch, loss, read_checkpoint(r)?))
            }
            f => return Err(TrainError::Resume(format!("bad best-model flag {f}"))),
        };
        let n = read_u64(r)? as usize;
        let mut records = Vec::with_capacity(n.min(1 << 20));
        for _ in 0..n {
            let epoch = read_u64(r)? as usize;
            let mut v = [0.0; 4];
            for x in &mut v {
                *x = read_f64(r)?;
            }
            let some = |x: f64| (!x.is_nan()).then_some(x);
            records.push(EpochRecord {
                epoch,
                train_loss: v[0],
                val_loss: some(v[1]),
                val_ade: some(v[2]),
                val_accuracy: some(v[3]),
                wall_time: 0.0,
            });
        }
        if records.iter().enumerate().any(|(i, r)| r.epoch != i + 1) {
            return Err(TrainError::Resume("epoch indices are not consecutive".into()));
        }
        let adam = AdamState {
            step_count,
            first_moment: first,
            second_moment: second,
            config: AdamConfig {
                learning_rate: config.learning_rate,
                ..AdamConfig::default()
            },
        };
        Ok(Self {
            model,
            log: TrainLog { records },
            best,
            config,
            adam,
        })
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_moments<R: Read>(r: &mut R, params: &ParameterSet) -> Result<Vec<Tensor>, TrainError> {
    let entries = read_tensor_entries(r)?;
    if entries.len() != params.len() {
        return Err(TrainError::Resume(format!(
            "{} optimizer moments for {} parameters",
            entries.len(),
            params.len()
        )));
    }
    entries
        .into_iter()
        .zip(params.iter())
        .map(|((name, t), (pname, p))| {
            if name != pname || t.shape() != p.shape() {
                Err(TrainError::Resume(format!(
                    "moment `{name}` does not match parameter `{pname}`"
                )))
            } else {
                Ok(t)
            }
        })
        .collect()
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn train(
    model_config: ModelConfig,
    config: TrainConfig,
    train_set: &[ObservationWindow],
    val_set: &[ObservationWindow],
) -> Result<(Model, TrainLog), TrainError> {
    let mut t = Trainer::new(model_config, config)?;
    t.fit(train_set, val_set)?;
    Ok((t.model, t.log))
}
