use std::path::Path;
use std::time::Instant;

use super::{Checkpoint, TrainError};
use crate::geometry::Pose;
use crate::metrics::{pair_errors, Estimate, EvalPair, GroundTruth, MetricsReport, PairErrors};
use crate::model::{Model, ModelConfig};
use crate::synthdata::{load_dataset, SceneSample};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub report: MetricsReport,
    pub errors: PairErrors,
    /// Mean wall time of one single-sample forward pass; informational.
    pub latency_ms: f64,
}

/// Names the first field where the model and the data disagree.
pub fn check_compatible(cfg: &ModelConfig, n_points: usize, d_f: usize) -> Result<(), TrainError> {
    if cfg.d_f != d_f {
        return Err(TrainError::IncompatibleConfig(format!("d_f: model expects {}, data has {d_f}", cfg.d_f)));
    }
    if cfg.n_points != n_points {
        return Err(TrainError::IncompatibleConfig(format!(
            "n_points: model expects {}, data has {n_points}",
            cfg.n_points
        )));
    }
    Ok(())
}

pub fn eval_pair(model: &Model, s: &SceneSample) -> Result<EvalPair, TrainError> {
    let pred = model.model_forward(s)?;
    Ok(EvalPair {
        predicted: Estimate { pose: Pose::new(pred.rotation, pred.translation)?, size: pred.size, dense: pred.dense },
        truth: GroundTruth { pose: s.gt_pose, size: s.gt_size, dense: s.gt_dense.clone(), symmetry: s.symmetry },
    })
}

/// Inference-mode forward on every sample, then the metrics suite.
pub fn evaluate_model(model: &Model, samples: &[SceneSample]) -> Result<EvalOutcome, TrainError> {
    for s in samples {
        check_compatible(model.config(), s.partial.len(), s.d_f)?;
    }
    let mut pairs = Vec::with_capacity(samples.len());
    let mut elapsed = 0.0;
    for s in samples {
        let t0 = Instant::now();
        let pair = eval_pair(model, s)?;
        elapsed += t0.elapsed().as_secs_f64();
        pairs.push(pair);
    }
    let errors = pair_errors(&pairs)?;
    let report = errors.report()?;
    Ok(EvalOutcome { report, errors, latency_ms: 1e3 * elapsed / samples.len().max(1) as f64 })
}

pub fn evaluate_checkpoint(ckpt: &Path, data: &Path) -> Result<EvalOutcome, TrainError> {
    let manifest = super::read_manifest(ckpt)?;
    let (dm, _) = crate::synthdata::load_manifest(data)?;
    check_compatible(&manifest.model, dm.n_points, dm.d_f)?;
    let ck = Checkpoint::load(ckpt)?;
    let dataset = load_dataset(data)?;
    evaluate_model(&ck.model, &dataset.samples)
}
