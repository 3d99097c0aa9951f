//! Evaluation metrics: Chamfer-L1, AUC of the 3D-IoU success curve, volume
//! under the joint rotation/translation success surface, and the aggregate
//! report.
//!
//! Both curve metrics integrate an empirical success function that is
//! piecewise constant in the threshold. The integrals are evaluated in closed
//! form (each instance contributes the length/area of its success region), so
//! the result is the limit of trapezoidal quadrature on any grid that refines
//! the declared 0.005 / 0.5° / 0.1 cm steps. The grid versions are kept for
//! plotting and for cross-checking.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{
    min_error_over, obb_iou, symmetry_rotations, GeometryError, IouMethod, OrientedBox, PointSet, Pose,
    RotationMatrix, SizeVec, SymmetrySpec, EVAL_CONTINUOUS_SAMPLES,
};
use crate::numeric::{compensated_mean, compensated_sum, KahanSum};

pub const IOU_STEP: f64 = 0.005;
pub const ROT_STEP_DEG: f64 = 0.5;
pub const TRANS_STEP_CM: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("point set is empty")]
    EmptySet,
    #[error("empty input list")]
    EmptyList,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// `0.5 · (mean_p min_q |p-q| + mean_q min_p |q-p|)`.
pub fn chamfer_l1(p: &PointSet, q: &PointSet) -> Result<f64, MetricsError> {
    chamfer_l1_flat(&p.to_flat(), &q.to_flat())
}

pub fn chamfer_l1_flat(p: &[f64], q: &[f64]) -> Result<f64, MetricsError> {
    if p.is_empty() || q.is_empty() {
        return Err(MetricsError::EmptySet);
    }
    Ok(0.5 * (directed_mean(p, q) + directed_mean(q, p)))
}

fn directed_mean(from: &[f64], to: &[f64]) -> f64 {
    let mut acc = KahanSum::default();
    for a in from.chunks_exact(3) {
        let mut best = f64::INFINITY;
        for b in to.chunks_exact(3) {
            let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
            let d = dx * dx + dy * dy + dz * dz;
            if d < best {
                best = d;
            }
        }
        acc.add(best.sqrt());
    }
    acc.total() / (from.len() / 3) as f64
}

fn check_unit(ious: &[f64]) -> Result<(), MetricsError> {
    if ious.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    if let Some(bad) = ious.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(MetricsError::OutOfRange(format!("IoU {bad}")));
    }
    Ok(())
}

/// Success rate `A(τ)`: fraction of IoUs `>= τ`. At `τ = 0` the right limit
/// (fraction `> 0`) is used so that all-zero IoUs score zero.
pub fn iou_success_rate(ious: &[f64], tau: f64) -> f64 {
    let hits = if tau <= 0.0 {
        ious.iter().filter(|v| **v > 0.0).count()
    } else {
        ious.iter().filter(|v| **v >= tau).count()
    };
    hits as f64 / ious.len() as f64
}

/// `A(τ)` sampled on `[0, max_tau]` at [`IOU_STEP`].
pub fn iou_success_curve(ious: &[f64], max_tau: f64) -> Vec<(f64, f64)> {
    let steps = (max_tau / IOU_STEP).round() as usize;
    (0..=steps)
        .map(|i| {
            let tau = i as f64 * IOU_STEP;
            (tau, iou_success_rate(ious, tau))
        })
        .collect()
}

/// AUC@IoU`k`: `100 / (k/100) · ∫_0^{k/100} A(τ) dτ`.
pub fn auc_iou(ious: &[f64], k_percent: f64) -> Result<f64, MetricsError> {
    check_unit(ious)?;
    if !(k_percent > 0.0 && k_percent <= 100.0) {
        return Err(MetricsError::OutOfRange(format!("threshold {k_percent}")));
    }
    let k = k_percent / 100.0;
    let area = compensated_mean(&ious.iter().map(|v| v.min(k)).collect::<Vec<_>>());
    Ok((100.0 * area / k).clamp(0.0, 100.0))
}

/// Trapezoidal AUC on the [`IOU_STEP`] grid, for comparison with [`auc_iou`].
pub fn auc_iou_trapezoid(ious: &[f64], k_percent: f64) -> Result<f64, MetricsError> {
    check_unit(ious)?;
    let k = k_percent / 100.0;
    let curve = iou_success_curve(ious, k);
    let area = compensated_sum(curve.windows(2).map(|w| 0.5 * (w[0].1 + w[1].1) * (w[1].0 - w[0].0)));
    Ok(100.0 * area / k)
}

fn check_errors(rot: &[f64], trans: &[f64]) -> Result<(), MetricsError> {
    if rot.len() != trans.len() {
        return Err(MetricsError::LengthMismatch(rot.len(), trans.len()));
    }
    if rot.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    if let Some(bad) = rot.iter().chain(trans).find(|v| !(**v >= 0.0)) {
        return Err(MetricsError::OutOfRange(format!("error {bad}")));
    }
    Ok(())
}

/// Joint success `S(θ, δ)`: fraction with `rot <= θ` and `trans <= δ`.
pub fn joint_success_rate(rot_deg: &[f64], trans_cm: &[f64], theta: f64, delta: f64) -> f64 {
    let hits = rot_deg.iter().zip(trans_cm).filter(|(r, t)| **r <= theta && **t <= delta).count();
    hits as f64 / rot_deg.len() as f64
}

/// `S` sampled on the `[0, θmax] × [0, δmax]` grid; row `i` is `θ = i·0.5°`.
pub fn joint_success_surface(rot_deg: &[f64], trans_cm: &[f64], theta_max: f64, delta_max: f64) -> Vec<Vec<f64>> {
    let nt = (theta_max / ROT_STEP_DEG).round() as usize;
    let nd = (delta_max / TRANS_STEP_CM).round() as usize;
    (0..=nt)
        .map(|i| {
            (0..=nd)
                .map(|j| joint_success_rate(rot_deg, trans_cm, i as f64 * ROT_STEP_DEG, j as f64 * TRANS_STEP_CM))
                .collect()
        })
        .collect()
}

/// VUS@θ°δcm: `100 / (θmax·δmax) · ∬ S(θ, δ)` over the threshold box.
pub fn vus(rot_deg: &[f64], trans_cm: &[f64], theta_max: f64, delta_max: f64) -> Result<f64, MetricsError> {
    check_errors(rot_deg, trans_cm)?;
    let areas: Vec<f64> = rot_deg
        .iter()
        .zip(trans_cm)
        .map(|(r, t)| (theta_max - r).max(0.0) * (delta_max - t).max(0.0))
        .collect();
    Ok((100.0 * compensated_mean(&areas) / (theta_max * delta_max)).clamp(0.0, 100.0))
}

/// Double trapezoid of [`joint_success_surface`], for comparison with [`vus`].
pub fn vus_trapezoid(rot_deg: &[f64], trans_cm: &[f64], theta_max: f64, delta_max: f64) -> Result<f64, MetricsError> {
    check_errors(rot_deg, trans_cm)?;
    let s = joint_success_surface(rot_deg, trans_cm, theta_max, delta_max);
    let mut acc = KahanSum::default();
    for i in 0..s.len() - 1 {
        for j in 0..s[i].len() - 1 {
            acc.add(0.25 * (s[i][j] + s[i + 1][j] + s[i][j + 1] + s[i + 1][j + 1]) * ROT_STEP_DEG * TRANS_STEP_CM);
        }
    }
    Ok(100.0 * acc.total() / (theta_max * delta_max))
}

#[derive(Clone, Debug)]
pub struct Estimate {
    pub pose: Pose,
    pub size: SizeVec,
    pub dense: PointSet,
}

#[derive(Clone, Debug)]
pub struct GroundTruth {
    pub pose: Pose,
    pub size: SizeVec,
    pub dense: PointSet,
    pub symmetry: SymmetrySpec,
}

#[derive(Clone, Debug)]
pub struct EvalPair {
    pub predicted: Estimate,
    pub truth: GroundTruth,
}

/// Aggregated evaluation record. Field order is the serialization order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub auc_iou25: f64,
    pub auc_iou50: f64,
    pub auc_iou75: f64,
    pub vus_5deg2cm: f64,
    pub vus_5deg5cm: f64,
    pub vus_10deg2cm: f64,
    pub vus_10deg5cm: f64,
    pub mean_rot: f64,
    pub mean_trans: f64,
    pub chamfer_l1_e3: f64,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Checks the declared ranges of every field.
    pub fn validate(&self) -> Result<(), MetricsError> {
        let pct = [
            self.auc_iou25,
            self.auc_iou50,
            self.auc_iou75,
            self.vus_5deg2cm,
            self.vus_5deg5cm,
            self.vus_10deg2cm,
            self.vus_10deg5cm,
        ];
        if pct.iter().any(|v| !(0.0..=100.0).contains(v)) {
            return Err(MetricsError::OutOfRange("percent field".into()));
        }
        if !(0.0..=180.0).contains(&self.mean_rot) {
            return Err(MetricsError::OutOfRange("mean_rot".into()));
        }
        if !(self.mean_trans >= 0.0 && self.chamfer_l1_e3 >= 0.0) {
            return Err(MetricsError::OutOfRange("mean_trans / chamfer".into()));
        }
        Ok(())
    }
}

/// Per-instance errors behind a report.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PairErrors {
    pub ious: Vec<f64>,
    pub rot_deg: Vec<f64>,
    pub trans_cm: Vec<f64>,
    pub chamfer: Vec<f64>,
}

impl PairErrors {
    pub fn report(&self) -> Result<MetricsReport, MetricsError> {
        let (r, t) = (&self.rot_deg, &self.trans_cm);
        Ok(MetricsReport {
            auc_iou25: auc_iou(&self.ious, 25.0)?,
            auc_iou50: auc_iou(&self.ious, 50.0)?,
            auc_iou75: auc_iou(&self.ious, 75.0)?,
            vus_5deg2cm: vus(r, t, 5.0, 2.0)?,
            vus_5deg5cm: vus(r, t, 5.0, 5.0)?,
            vus_10deg2cm: vus(r, t, 10.0, 2.0)?,
            vus_10deg5cm: vus(r, t, 10.0, 5.0)?,
            mean_rot: compensated_mean(r),
            mean_trans: compensated_mean(t),
            chamfer_l1_e3: compensated_mean(&self.chamfer) * 1e3,
        })
    }
}

/// Computes per-pair errors (exact IoU, symmetry-aware rotation error,
/// translation error in cm, dense Chamfer).
pub fn pair_errors(pairs: &[EvalPair]) -> Result<PairErrors, MetricsError> {
    if pairs.is_empty() {
        return Err(MetricsError::EmptyList);
    }
    let mut groups: HashMap<SymmetrySpec, Vec<RotationMatrix>> = HashMap::new();
    let mut out = PairErrors::default();
    for pair in pairs {
        let (p, g) = (&pair.predicted, &pair.truth);
        let a = OrientedBox::new(p.pose, p.size);
        let b = OrientedBox::new(g.pose, g.size);
        out.ious.push(obb_iou(&a, &b, IouMethod::Exact));
        let rot = match g.symmetry {
            SymmetrySpec::Spherical => 0.0,
            spec => {
                if !groups.contains_key(&spec) {
                    groups.insert(spec, symmetry_rotations(&spec, EVAL_CONTINUOUS_SAMPLES)?);
                }
                min_error_over(&p.pose.rotation, &g.pose.rotation, &groups[&spec])
            }
        };
        out.rot_deg.push(rot);
        out.trans_cm.push((p.pose.translation - g.pose.translation).norm() * 100.0);
        out.chamfer.push(chamfer_l1(&p.dense, &g.dense)?);
    }
    Ok(out)
}

pub fn evaluate(pairs: &[EvalPair]) -> Result<MetricsReport, MetricsError> {
    pair_errors(pairs)?.report()
}
