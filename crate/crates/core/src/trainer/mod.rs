//! Optimization loop: AdamW with decoupled weight decay, step schedules for
//! the learning rate and batch-norm momentum, checkpointing and evaluation.
//!
//! The reference path is single-threaded. Given the same dataset, configs
//! and seed, loss logs and checkpoints are identical byte for byte.

mod checkpoint;
mod config;
mod eval;
mod optim;


use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{
    read_manifest, Checkpoint, CheckpointManifest, RngState, TensorEntry, TensorRole, TrainState, CHECKPOINT_BLOB,
    CHECKPOINT_MANIFEST, CHECKPOINT_SCHEMA_VERSION, LOSS_LOG,
};
pub use config::TrainConfig;
pub use eval::{check_compatible, eval_pair, evaluate_checkpoint, evaluate_model, EvalOutcome};
pub use optim::{adamw_step, AdamW};

use crate::autodiff::{AutodiffError, Tape};
use crate::geometry::GeometryError;
use crate::metrics::MetricsError;
use crate::model::{Model, ModelConfig, ModelError, ModelInput};
use crate::numeric::derive_seed;
use crate::objective::{loss_total, LossTargets, ObjectiveError, TRAIN_CONTINUOUS_SAMPLES};
use crate::synthdata::{load_dataset, SceneSample, SynthError};

const STREAM_INIT: u64 = 0x1417;
const STREAM_SHUFFLE: u64 = 0x5ff1;

/// Directory under a run's output that holds periodic snapshots.
pub const SNAPSHOT_DIR: &str = "snapshots";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("io failure on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("non-finite {what} at step {step} (epoch {epoch}, batch {batch}); no update applied")]
    NonFiniteLoss { what: String, step: u64, epoch: usize, batch: usize },
    #[error("incompatible config: {0}")]
    IncompatibleConfig(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Data(#[from] SynthError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> TrainError {
    TrainError::Io { path: path.to_path_buf(), source }
}

/// One line of the loss log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepLog {
    pub step: u64,
    pub epoch: usize,
    pub lr: f64,
    pub recon1: f64,
    pub recon2: f64,
    pub rot: f64,
    pub trans: f64,
    pub size: f64,
    pub total: f64,
}

impl StepLog {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("log line serializes")
    }
}

/// Sample order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(derive_seed(seed, STREAM_SHUFFLE), epoch as u64));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Model, optimizer and loop state over an in-memory training set.
pub struct Trainer<'a> {
    model: Model,
    cfg: TrainConfig,
    state: TrainState,
    samples: &'a [SceneSample],
    partials: Vec<Vec<f64>>,
    targets: Vec<LossTargets>,
    log: Vec<String>,
}

impl<'a> Trainer<'a> {
    /// Fresh model initialized from `derive_seed(cfg.seed, ·)`.
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig, samples: &'a [SceneSample]) -> Result<Self, TrainError> {
        let model = Model::new(model_cfg.clone(), derive_seed(cfg.seed, STREAM_INIT))?;
        Self::resume(Checkpoint { model, train: cfg.clone(), state: TrainState::default(), log: vec![] }, samples)
    }

    pub fn resume(ck: Checkpoint, samples: &'a [SceneSample]) -> Result<Self, TrainError> {
        ck.train.validate()?;
        if samples.is_empty() {
            return Err(TrainError::Config("empty training set".into()));
        }
        let mc = ck.model.config();
        check_samples(mc, samples)?;
        let targets = samples
            .iter()
            .map(|s| LossTargets::new(s, mc.coarse_points, TRAIN_CONTINUOUS_SAMPLES))
            .collect::<Result<_, _>>()?;
        Ok(Self {
            partials: samples.iter().map(SceneSample::partial_flat).collect(),
            model: ck.model,
            cfg: ck.train,
            state: ck.state,
            samples,
            targets,
            log: ck.log,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Changes the stopping point; everything that shapes the trajectory
    /// stays fixed.
    pub fn set_limits(&mut self, epochs: usize, max_steps: Option<u64>) {
        self.cfg.epochs = epochs;
        self.cfg.max_steps = max_steps;
    }

    pub fn state(&self) -> TrainState {
        self.state
    }

    pub fn log(&self) -> &[String] {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint { model: self.model.clone(), train: self.cfg.clone(), state: self.state, log: self.log.clone() }
    }

    fn batches_per_epoch(&self) -> usize {
        self.samples.len().div_ceil(self.cfg.batch_size)
    }

    pub fn finished(&self) -> bool {
        self.state.epoch >= self.cfg.epochs || self.cfg.max_steps.is_some_and(|m| self.state.step >= m)
    }

    /// Runs the next batch: forward, loss, backward, AdamW, running-stat
    /// commit. Non-finite losses or gradients abort before anything changes.
    pub fn step(&mut self) -> Result<StepLog, TrainError> {
        let TrainState { epoch, batch, step } = self.state;
        let order = epoch_order(self.cfg.seed, epoch, self.samples.len());
        let bs = self.cfg.batch_size;
        let idx = &order[batch * bs..((batch + 1) * bs).min(order.len())];
        let (lr, bn_momentum) = self.cfg.schedules(epoch);

        let inputs: Vec<ModelInput> =
            idx.iter().map(|&i| ModelInput { partial: &self.partials[i], features: &self.samples[i].features }).collect();
        let targets: Vec<&LossTargets> = idx.iter().map(|&i| &self.targets[i]).collect();
        let tape = Tape::new();
        let p = tape.bind(&self.model.store);
        let out = self.model.forward(&tape, &p, &inputs)?;
        let loss = loss_total(&out, &targets)?;
        let v = loss.values();
        let non_finite = |what: &str| TrainError::NonFiniteLoss { what: what.into(), step: step + 1, epoch, batch };
        if ![v.recon1, v.recon2, v.rot, v.trans, v.size, v.total].iter().all(|x| x.is_finite()) {
            return Err(non_finite("loss"));
        }
        let stats = tape.take_stat_updates();
        let grads = tape.backward(loss.total)?.for_params(&self.model.store);
        if !grads.iter().all(|g| g.is_finite()) {
            return Err(non_finite("gradient"));
        }
        drop(out);
        let hp = AdamW {
            lr,
            weight_decay: self.cfg.weight_decay,
            betas: (self.cfg.beta1, self.cfg.beta2),
            eps: self.cfg.eps,
        };
        adamw_step(self.model.store.params_mut(), &grads, step + 1, &hp)?;
        self.model.store.update_running_stats(&stats, bn_momentum);

        self.state.step += 1;
        self.state.batch += 1;
        if self.state.batch == self.batches_per_epoch() {
            self.state.batch = 0;
            self.state.epoch += 1;
        }
        let rec = StepLog {
            step: step + 1,
            epoch,
            lr,
            recon1: v.recon1,
            recon2: v.recon2,
            rot: v.rot,
            trans: v.trans,
            size: v.size,
            total: v.total,
        };
        self.log.push(rec.to_line());
        Ok(rec)
    }

    /// Steps until the epoch or step limit. `on_epoch_end(trainer)` runs
    /// after every completed epoch.
    pub fn run_with<F>(&mut self, mut on_epoch_end: F) -> Result<(), TrainError>
    where
        F: FnMut(&Self) -> Result<(), TrainError>,
    {
        while !self.finished() {
            self.step()?;
            if self.state.batch == 0 {
                on_epoch_end(self)?;
            }
        }
        Ok(())
    }

    pub fn run(&mut self) -> Result<(), TrainError> {
        self.run_with(|_| Ok(()))
    }
}

fn check_samples(cfg: &ModelConfig, samples: &[SceneSample]) -> Result<(), TrainError> {
    let s = &samples[0];
    check_compatible(cfg, s.partial.len(), s.d_f)?;
    if let Some(bad) = samples.iter().find(|x| x.partial.len() != s.partial.len() || x.d_f != s.d_f) {
        return Err(TrainError::IncompatibleConfig(format!("sample {} has a different point count or d_f", bad.index)));
    }
    Ok(())
}

/// Summary returned by [`train`].
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub state: TrainState,
    pub first: Option<StepLog>,
    pub last: Option<StepLog>,
}

/// Trains on the dataset at `data` and writes the final checkpoint (with
/// its loss log) to `out`, plus `out/snapshots/epoch_NNNN` every
/// `checkpoint_every` epochs. With `resume`, training continues from that
/// checkpoint using its stored configuration; `train_cfg` then only
/// supplies the new `epochs` and `max_steps`.
pub fn train(
    train_cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    data: &Path,
    out: &Path,
    resume: Option<&Path>,
) -> Result<TrainSummary, TrainError> {
    let dataset = load_dataset(data)?;
    let mut trainer = match resume {
        Some(ck) => {
            let mut t = Trainer::resume(Checkpoint::load(ck)?, &dataset.samples)?;
            t.set_limits(train_cfg.epochs, train_cfg.max_steps);
            t
        }
        None => Trainer::new(model_cfg, train_cfg, &dataset.samples)?,
    };
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let log_path = out.join(LOSS_LOG);
    let mut log_file = fs::File::create(&log_path).map_err(|e| io_err(&log_path, e))?;
    let mut written = 0;
    let mut flush = |t: &Trainer, written: &mut usize| -> Result<(), TrainError> {
        let text = checkpoint::log_text(&t.log()[*written..]);
        *written = t.log().len();
        log_file.write_all(text.as_bytes()).map_err(|e| io_err(&log_path, e))
    };
    let every = trainer.config().checkpoint_every;
    let result = trainer.run_with(|t| {
        flush(t, &mut written)?;
        if every > 0 && t.state().epoch % every == 0 {
            t.checkpoint().save(&out.join(SNAPSHOT_DIR).join(format!("epoch_{:04}", t.state().epoch)))?;
        }
        Ok(())
    });
    // keep whatever was logged, including after a mid-epoch abort
    flush(&trainer, &mut written)?;
    result?;
    let ck = trainer.checkpoint();
    ck.save(out)?;
    let parse = |l: &String| serde_json::from_str::<StepLog>(l).ok();
    Ok(TrainSummary { state: ck.state, first: ck.log.first().and_then(parse), last: ck.log.last().and_then(parse) })
}
