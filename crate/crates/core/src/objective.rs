//! Training losses: two Chamfer reconstruction terms, a symmetry-aware
//! rotation term on orthogonalized 6D columns, and smooth-L1 translation and
//! size terms, summed with unit weights.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tensor, Var};
use crate::geometry::{symmetry_rotations, GeometryError, PointSet, RotationMatrix, SymmetrySpec};
use crate::model::BatchOutput;
use crate::synthdata::SceneSample;

pub use crate::geometry::sampling::fps;

/// Continuous symmetry axes are sampled this many times during training.
pub const TRAIN_CONTINUOUS_SAMPLES: usize = 36;
/// Smooth-L1 transition point, in native units.
pub const SMOOTH_L1_BETA: f64 = 1.0;
const DEGENERATE_NORM: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Sampling(#[from] crate::geometry::sampling::SamplingError),
}

/// The five loss terms and their sum, on the tape.
#[derive(Clone, Copy)]
pub struct LossBreakdown<'t> {
    pub recon1: Var<'t>,
    pub recon2: Var<'t>,
    pub rot: Var<'t>,
    pub trans: Var<'t>,
    pub size: Var<'t>,
    pub total: Var<'t>,
}

/// Detached loss values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValues {
    pub recon1: f64,
    pub recon2: f64,
    pub rot: f64,
    pub trans: f64,
    pub size: f64,
    pub total: f64,
}

impl LossBreakdown<'_> {
    pub fn values(&self) -> LossValues {
        LossValues {
            recon1: self.recon1.item(),
            recon2: self.recon2.item(),
            rot: self.rot.item(),
            trans: self.trans.item(),
            size: self.size.item(),
            total: self.total.item(),
        }
    }
}

/// Farthest-point subset of the dense ground truth.
pub fn coarse_gt(dense_gt: &PointSet, count: usize) -> Result<PointSet, ObjectiveError> {
    let flat = dense_gt.to_flat();
    let idx = fps(&flat, count)?;
    Ok(PointSet::new(idx.iter().map(|&i| dense_gt.points()[i]).collect())?)
}

/// Per-sample supervision, precomputed once per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct LossTargets {
    pub coarse_gt: Vec<f64>,
    pub dense_gt: Vec<f64>,
    pub translation: [f64; 3],
    pub size: [f64; 3],
    /// `R_gt·S` for every symmetry `S`; `None` for spheres, whose rotation
    /// term is identically zero.
    pub rotations: Option<Vec<RotationMatrix>>,
}

impl LossTargets {
    pub fn new(sample: &SceneSample, coarse_points: usize, continuous_samples: usize) -> Result<Self, ObjectiveError> {
        let t = sample.gt_pose.translation;
        let s = sample.gt_size.extents();
        Ok(Self {
            coarse_gt: coarse_gt(&sample.gt_dense, coarse_points)?.to_flat(),
            dense_gt: sample.gt_dense.to_flat(),
            translation: [t.x, t.y, t.z],
            size: [s.x, s.y, s.z],
            rotations: rotation_candidates(&sample.gt_pose.rotation, &sample.symmetry, continuous_samples)?,
        })
    }
}

/// `{R_gt · S}` over the symmetry group, or `None` when unbounded.
pub fn rotation_candidates(
    r_gt: &RotationMatrix,
    spec: &SymmetrySpec,
    continuous_samples: usize,
) -> Result<Option<Vec<RotationMatrix>>, ObjectiveError> {
    if *spec == SymmetrySpec::Spherical {
        return Ok(None);
    }
    Ok(Some(symmetry_rotations(spec, continuous_samples)?.iter().map(|s| r_gt.compose(s)).collect()))
}

fn first_two_columns(r: &RotationMatrix) -> [f64; 6] {
    let (a, b) = (r.column(0), r.column(1));
    [a.x, a.y, a.z, b.x, b.y, b.z]
}

fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < SMOOTH_L1_BETA {
        0.5 * a * a / SMOOTH_L1_BETA
    } else {
        a - 0.5 * SMOOTH_L1_BETA
    }
}

fn mean_smooth_l1(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| smooth_l1(x - y)).sum::<f64>() / a.len() as f64
}

/// Gram-Schmidt on a `[1, 6]` row, returning `[b1, b2]` as `[1, 6]`.
fn orthogonalize<'t>(r: Var<'t>) -> Result<Var<'t>, ObjectiveError> {
    let vals = r.data();
    if vals.len() != 6 {
        return Err(ObjectiveError::ShapeMismatch(format!("rot6d with {} values", vals.len())));
    }
    let mut r = r.reshape(&[1, 6])?;
    // documented fallback for degenerate outputs: nudge toward identity columns
    let mut v = vals;
    while !is_regular(&v) {
        let nudge = r.tape().constant(Tensor::new(&[1, 6], vec![1e-6, 0.0, 0.0, 0.0, 1e-6, 0.0])?);
        r = r.add(nudge)?;
        v = r.data();
    }
    let pair = r.reshape(&[2, 3])?;
    let (a1, a2) = (pair.narrow(0, 1)?, pair.narrow(1, 1)?);
    let b1 = a1.mul_rows(a1.norm_last()?.recip())?;
    let proj = a2.sub(b1.mul_rows(b1.mul(a2)?.sum_axis(1)?)?)?;
    let b2 = proj.mul_rows(proj.norm_last()?.recip())?;
    Ok(Var::concat(&[b1, b2], 1)?)
}

fn is_regular(v: &[f64]) -> bool {
    let n1 = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if !(n1 >= DEGENERATE_NORM) {
        return false;
    }
    let d = (v[0] * v[3] + v[1] * v[4] + v[2] * v[5]) / n1;
    let p = [v[3] - d * v[0] / n1, v[4] - d * v[1] / n1, v[5] - d * v[2] / n1];
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt() >= DEGENERATE_NORM
}

/// Mean smooth-L1 between orthogonalized predicted columns and the closest
/// candidate's first two columns. The argmin is chosen on values; gradient
/// flows through the chosen branch only.
pub fn loss_rot_sym<'t>(pred_rot6d: Var<'t>, candidates: Option<&[RotationMatrix]>) -> Result<Var<'t>, ObjectiveError> {
    let cols = orthogonalize(pred_rot6d)?;
    let Some(candidates) = candidates else {
        return Ok(cols.scale(0.0).sum());
    };
    let v = cols.data();
    let targets: Vec<[f64; 6]> = candidates.iter().map(first_two_columns).collect();
    let best = targets
        .iter()
        .map(|t| mean_smooth_l1(&v, t))
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| ObjectiveError::ShapeMismatch("no rotation candidates".into()))?
        .0;
    Ok(cols.smooth_l1(&targets[best], SMOOTH_L1_BETA)?.mean())
}

/// Differentiable `0.5·(mean_p min_q |p−q| + mean_q min_p |q−p|)` against a
/// constant target set.
pub fn chamfer_loss<'t>(pred: Var<'t>, target: &[f64]) -> Result<Var<'t>, ObjectiveError> {
    if target.is_empty() || target.len() % 3 != 0 {
        return Err(ObjectiveError::ShapeMismatch(format!("{} target coordinates", target.len())));
    }
    let gt = pred.tape().constant(Tensor::new(&[target.len() / 3, 3], target.to_vec())?);
    Ok(pred.nearest_dist(gt)?.mean().add(gt.nearest_dist(pred)?.mean())?.scale(0.5))
}

/// Batch-mean of every term over the stacked outputs.
pub fn loss_total<'t>(out: &BatchOutput<'t>, targets: &[&LossTargets]) -> Result<LossBreakdown<'t>, ObjectiveError> {
    let b = out.batch;
    if targets.len() != b {
        return Err(ObjectiveError::ShapeMismatch(format!("{} targets for batch {b}", targets.len())));
    }
    let per = |v: &Var<'t>| v.shape()[0] / b;
    let (nc, nd) = (per(&out.coarse), per(&out.dense));
    let mut terms: [Vec<Var<'t>>; 5] = Default::default();
    for (i, t) in targets.iter().enumerate() {
        terms[0].push(chamfer_loss(out.coarse.narrow(i * nc, nc)?, &t.coarse_gt)?);
        terms[1].push(chamfer_loss(out.dense.narrow(i * nd, nd)?, &t.dense_gt)?);
        terms[2].push(loss_rot_sym(out.rot6d.narrow(i, 1)?, t.rotations.as_deref())?);
        terms[3].push(out.translation.narrow(i, 1)?.smooth_l1(&t.translation, SMOOTH_L1_BETA)?.mean());
        terms[4].push(out.size.narrow(i, 1)?.smooth_l1(&t.size, SMOOTH_L1_BETA)?.mean());
    }
    let mean = |vs: &[Var<'t>]| -> Result<Var<'t>, ObjectiveError> {
        let stacked = Var::concat(&vs.iter().map(|v| v.reshape(&[1])).collect::<Result<Vec<_>, _>>()?, 0)?;
        Ok(stacked.mean())
    };
    let [recon1, recon2, rot, trans, size] =
        [mean(&terms[0])?, mean(&terms[1])?, mean(&terms[2])?, mean(&terms[3])?, mean(&terms[4])?];
    let total = recon1.add(recon2)?.add(rot)?.add(trans)?.add(size)?;
    Ok(LossBreakdown { recon1, recon2, rot, trans, size, total })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::autodiff::Tape;
    use crate::geometry::{random_rotation, AxisSymmetry, Rot6D, Vec3};
    use crate::metrics::chamfer_l1_flat;

    fn rot6d_var<'t>(t: &'t Tape, r: &Rot6D) -> Var<'t> {
        t.leaf(Tensor::new(&[1, 6], r.to_array().to_vec()).unwrap())
    }

    /// Plain re-derivation: Gram-Schmidt via geometry, brute-force min.
    fn oracle(pred: &Rot6D, candidates: &[RotationMatrix]) -> f64 {
        let m = pred.to_matrix().unwrap();
        let p = first_two_columns(&m);
        candidates.iter().map(|c| mean_smooth_l1(&p, &first_two_columns(c))).fold(f64::INFINITY, f64::min)
    }

    fn specs() -> Vec<SymmetrySpec> {
        use AxisSymmetry::*;
        vec![
            SymmetrySpec::none(),
            SymmetrySpec::Axes([None, Rot180, None]),
            SymmetrySpec::Axes([Rot90, Rot90, Rot90]),
            SymmetrySpec::Axes([Rot180, Continuous, None]),
            SymmetrySpec::Axes([Rot180, Rot180, Rot180]),
        ]
    }

    #[test]
    fn fps_examples() {
        let sq = [0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        assert_eq!(fps(&sq, 4).unwrap().len(), 4);
        assert_eq!(fps(&sq, 2).unwrap(), vec![0, 2]);
        assert_eq!(fps(&sq, 1).unwrap(), vec![0]);
        assert!(fps(&sq, 5).is_err());
    }

    #[test]
    fn coarse_gt_is_a_good_subset() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut wins = 0;
        for _ in 0..20 {
            let dense = PointSet::new(
                (0..2048)
                    .map(|_| Vec3::new(rng.random_range(-0.1..0.1), rng.random_range(-0.05..0.05), rng.random_range(-0.2..0.2)))
                    .collect(),
            )
            .unwrap();
            let c = coarse_gt(&dense, 512).unwrap();
            assert_eq!(c, coarse_gt(&dense, 512).unwrap());
            assert!(c.points().iter().all(|p| dense.points().contains(p)));
            let mut idx: Vec<usize> = (0..2048).collect();
            for i in 0..512 {
                let j = rng.random_range(i..2048);
                idx.swap(i, j);
            }
            let random: Vec<f64> = idx[..512].iter().flat_map(|&i| dense.to_flat()[i * 3..i * 3 + 3].to_vec()).collect();
            let a = chamfer_l1_flat(&c.to_flat(), &dense.to_flat()).unwrap();
            let b = chamfer_l1_flat(&random, &dense.to_flat()).unwrap();
            if a < b {
                wins += 1;
            }
        }
        assert!(wins >= 18, "{wins}");
    }

    #[test]
    fn rotation_loss_zero_at_truth_and_symmetric_match() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gt = random_rotation(&mut rng);
        for spec in specs() {
            let c = rotation_candidates(&gt, &spec, 36).unwrap().unwrap();
            let t = Tape::new();
            assert!(loss_rot_sym(rot6d_var(&t, &gt.to_rot6d()), Some(&c)).unwrap().item() < 1e-24);
        }
        let spec = SymmetrySpec::Axes([AxisSymmetry::None, AxisSymmetry::Rot180, AxisSymmetry::None]);
        let c = rotation_candidates(&gt, &spec, 36).unwrap().unwrap();
        let flipped = gt.compose(&RotationMatrix::about_y(std::f64::consts::PI));
        let t = Tape::new();
        assert!(loss_rot_sym(rot6d_var(&t, &flipped.to_rot6d()), Some(&c)).unwrap().item() < 1e-24);
        let t = Tape::new();
        let r = rot6d_var(&t, &random_rotation(&mut rng).to_rot6d());
        assert_eq!(loss_rot_sym(r, None).unwrap().item(), 0.0);
    }

    #[test]
    fn rotation_loss_matches_brute_force_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for spec in specs() {
            for _ in 0..20 {
                let gt = random_rotation(&mut rng);
                let c = rotation_candidates(&gt, &spec, 36).unwrap().unwrap();
                let pred = Rot6D::from_slice(&(0..6).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>());
                let t = Tape::new();
                let l = loss_rot_sym(rot6d_var(&t, &pred), Some(&c)).unwrap().item();
                assert!((l - oracle(&pred, &c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn rotation_loss_is_symmetry_invariant_and_scale_free() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for spec in specs() {
            let group = symmetry_rotations(&spec, 36).unwrap();
            for _ in 0..10 {
                let gt = random_rotation(&mut rng);
                let pred = random_rotation(&mut rng).to_rot6d();
                let base = {
                    let t = Tape::new();
                    let c = rotation_candidates(&gt, &spec, 36).unwrap().unwrap();
                    loss_rot_sym(rot6d_var(&t, &pred), Some(&c)).unwrap().item()
                };
                let s = group[rng.random_range(0..group.len())];
                let t = Tape::new();
                let c = rotation_candidates(&gt.compose(&s), &spec, 36).unwrap().unwrap();
                assert!((loss_rot_sym(rot6d_var(&t, &pred), Some(&c)).unwrap().item() - base).abs() < 1e-9);
                let scaled = Rot6D::new(pred.a1 * 3.7, pred.a2);
                let c = rotation_candidates(&gt, &spec, 36).unwrap().unwrap();
                assert!((loss_rot_sym(rot6d_var(&t, &scaled), Some(&c)).unwrap().item() - base).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rotation_loss_gradient_flows_and_survives_degenerate_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_rotation(&mut rng);
        let c = rotation_candidates(&gt, &SymmetrySpec::none(), 36).unwrap().unwrap();
        let t = Tape::new();
        let r = t.leaf(Tensor::zeros(&[1, 6]));
        let l = loss_rot_sym(r, Some(&c)).unwrap();
        let g = t.backward(l).unwrap().wrt(r).unwrap();
        assert!(l.item().is_finite() && g.is_finite());
    }

    #[test]
    fn chamfer_loss_matches_metric_and_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p: Vec<f64> = (0..90).map(|_| rng.random_range(-1.0..1.0)).collect();
        let q: Vec<f64> = (0..150).map(|_| rng.random_range(-1.0..1.0)).collect();
        let t = Tape::new();
        let pv = t.leaf(Tensor::new(&[30, 3], p.clone()).unwrap());
        let l = chamfer_loss(pv, &q).unwrap().item();
        assert!((l - chamfer_l1_flat(&p, &q).unwrap()).abs() < 1e-10);
        let rev: Vec<f64> = q.chunks_exact(3).rev().flatten().copied().collect();
        assert!((chamfer_loss(pv, &rev).unwrap().item() - l).abs() < 1e-12);
        assert!(chamfer_loss(pv, &p).unwrap().item().abs() < 1e-15);
    }
}
