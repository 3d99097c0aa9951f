//! Exact (non-differentiable) 3D geometry: rotations and their 6D form,
//! rigid poses, box extents, point sets, rotational symmetry groups and
//! oriented-box overlap.

mod obb;
mod rotation;
pub mod sampling;
mod symmetry;

pub use obb::{obb_corners, obb_iou, IouMethod, OrientedBox};
pub use rotation::{matrix_to_rot6d, random_rotation, rot6d_to_matrix, Rot6D, RotationMatrix};
pub use symmetry::{
    min_error_over, min_symmetric_rotation_error, symmetry_rotations, AxisSymmetry, SymmetrySpec,
    DEDUP_TOLERANCE, EVAL_CONTINUOUS_SAMPLES, GROUP_CAP,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("degenerate input: {0}")]
    DegenerateInput(&'static str),
    #[error("not a rotation matrix (orthonormality error {orth:.3e}, det {det:.6})")]
    InvalidRotation { orth: f64, det: f64 },
    #[error("size extents must be positive and finite, got {0:?}")]
    InvalidSize([f64; 3]),
    #[error("point set is empty")]
    EmptyPointSet,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("symmetry spec has more than one continuous axis; use SymmetrySpec::Spherical")]
    InvalidSymmetry,
    #[error("symmetry group closure exceeded {cap} elements")]
    GroupTooLarge { cap: usize },
    #[error("spherical symmetry has no finite rotation set")]
    UnboundedSymmetry,
}

/// Rigid transform from an object's canonical frame into some target frame
/// (usually the camera frame): `x' = R x + t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: RotationMatrix,
    pub translation: Vec3,
}

impl Pose {
    pub fn new(rotation: RotationMatrix, translation: Vec3) -> Result<Self, GeometryError> {
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("translation"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: RotationMatrix::identity(), translation: Vec3::zeros() }
    }

    pub fn from_translation(t: Vec3) -> Self {
        Self { rotation: RotationMatrix::identity(), translation: t }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self { rotation: rt, translation: -(rt.matrix() * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation.compose(&other.rotation),
            translation: self.rotation.matrix() * other.translation + self.translation,
        }
    }

    #[inline]
    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation.matrix() * p + self.translation
    }
}

/// Full side lengths of a canonical bounding box, in meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct SizeVec(Vec3);

impl SizeVec {
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self, GeometryError> {
        if [x, y, z].iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(Self(Vec3::new(x, y, z)))
        } else {
            Err(GeometryError::InvalidSize([x, y, z]))
        }
    }

    pub fn from_vec(v: Vec3) -> Result<Self, GeometryError> {
        Self::new(v.x, v.y, v.z)
    }

    pub fn extents(&self) -> &Vec3 {
        &self.0
    }

    pub fn half(&self) -> Vec3 {
        self.0 * 0.5
    }

    pub fn volume(&self) -> f64 {
        self.0.x * self.0.y * self.0.z
    }
}

impl TryFrom<[f64; 3]> for SizeVec {
    type Error = GeometryError;
    fn try_from(v: [f64; 3]) -> Result<Self, Self::Error> {
        Self::new(v[0], v[1], v[2])
    }
}

impl From<SizeVec> for [f64; 3] {
    fn from(s: SizeVec) -> Self {
        [s.0.x, s.0.y, s.0.z]
    }
}

/// A non-empty set of finite 3D points.
#[derive(Clone, Debug, PartialEq)]
pub struct PointSet(Vec<Vec3>);

impl PointSet {
    pub fn new(points: Vec<Vec3>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyPointSet);
        }
        if !points.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(GeometryError::NonFinite("point set"));
        }
        Ok(Self(points))
    }

    pub fn from_flat(flat: &[f64]) -> Result<Self, GeometryError> {
        if flat.len() % 3 != 0 {
            return Err(GeometryError::DegenerateInput("flat point buffer length not a multiple of 3"));
        }
        Self::new(flat.chunks_exact(3).map(|c| Vec3::new(c[0], c[1], c[2])).collect())
    }

    pub fn points(&self) -> &[Vec3] {
        &self.0
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.0.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn centroid(&self) -> Vec3 {
        let mut acc = [crate::numeric::KahanSum::default(); 3];
        for p in &self.0 {
            for k in 0..3 {
                acc[k].add(p[k]);
            }
        }
        let n = self.0.len() as f64;
        Vec3::new(acc[0].total() / n, acc[1].total() / n, acc[2].total() / n)
    }
}

/// Applies `R p + t` to every point.
pub fn transform_points(pose: &Pose, pts: &PointSet) -> PointSet {
    PointSet(pts.0.iter().map(|p| pose.transform_point(p)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_pose_leaves_points() {
        let pts = PointSet::new(vec![Vec3::new(1.0, -2.0, 0.5), Vec3::new(0.0, 0.0, 3.0)]).unwrap();
        assert_eq!(transform_points(&Pose::identity(), &pts), pts);
    }

    #[test]
    fn pure_translation_moves_origin() {
        let pts = PointSet::new(vec![Vec3::zeros()]).unwrap();
        let out = transform_points(&Pose::from_translation(Vec3::new(0.0, 0.0, 1.0)), &pts);
        assert_eq!(out.points()[0], Vec3::new(0.0, 0.0, 1.0));
    }

    #[test]
    fn pose_inverse_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pose = Pose::new(
            random_rotation(&mut rng),
            Vec3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
        )
        .unwrap();
        let pts = PointSet::new(
            (0..1000)
                .map(|_| Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
                .collect(),
        )
        .unwrap();
        let back = transform_points(&pose.inverse(), &transform_points(&pose, &pts));
        let err = back
            .points()
            .iter()
            .zip(pts.points())
            .map(|(a, b)| (a - b).amax())
            .fold(0.0, f64::max);
        assert!(err < 1e-9, "round trip error {err}");
    }

    #[test]
    fn size_rejects_nonpositive() {
        assert!(SizeVec::new(1.0, 0.0, 1.0).is_err());
        assert!(SizeVec::new(1.0, f64::NAN, 1.0).is_err());
        assert!(SizeVec::new(0.1, 0.2, 0.3).is_ok());
    }

    #[test]
    fn point_set_rejects_empty_and_nan() {
        assert_eq!(PointSet::new(vec![]), Err(GeometryError::EmptyPointSet));
        assert!(PointSet::new(vec![Vec3::new(f64::INFINITY, 0.0, 0.0)]).is_err());
    }
}
