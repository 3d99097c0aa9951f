use nalgebra::{Quaternion, UnitQuaternion};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{GeometryError, Mat3, Vec3};

const ROTATION_TOLERANCE: f64 = 1e-6;
const DEGENERATE_NORM: f64 = 1e-12;

/// A proper rotation: orthonormal columns, determinant +1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct RotationMatrix(Mat3);

impl RotationMatrix {
    pub fn new(m: Mat3) -> Result<Self, GeometryError> {
        if !m.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("rotation"));
        }
        let orth = (m.transpose() * m - Mat3::identity()).amax();
        let det = m.determinant();
        if orth >= ROTATION_TOLERANCE || (det - 1.0).abs() >= ROTATION_TOLERANCE {
            return Err(GeometryError::InvalidRotation { orth, det });
        }
        Ok(Self(m))
    }

    /// Wraps a matrix the caller knows to be a rotation (e.g. produced by
    /// composing rotations).
    pub fn new_unchecked(m: Mat3) -> Self {
        Self(m)
    }

    pub fn identity() -> Self {
        Self(Mat3::identity())
    }

    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let axis = nalgebra::Unit::new_normalize(*axis);
        Self(*nalgebra::Rotation3::from_axis_angle(&axis, angle).matrix())
    }

    pub fn about_x(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::x(), angle)
    }

    pub fn about_y(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::y(), angle)
    }

    pub fn about_z(angle: f64) -> Self {
        Self::from_axis_angle(&Vec3::z(), angle)
    }

    /// Rotation about canonical axis `axis` (0 = x, 1 = y, 2 = z).
    pub fn about_axis(axis: usize, angle: f64) -> Self {
        let mut a = Vec3::zeros();
        a[axis] = 1.0;
        Self::from_axis_angle(&a, angle)
    }

    /// Orthonormal columns `[x, y, z]`; `x, y` must be unit and orthogonal.
    pub fn from_columns(x: Vec3, y: Vec3, z: Vec3) -> Result<Self, GeometryError> {
        Self::new(Mat3::from_columns(&[x, y, z]))
    }

    pub fn matrix(&self) -> &Mat3 {
        &self.0
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// `self · other`.
    pub fn compose(&self, other: &RotationMatrix) -> Self {
        Self(self.0 * other.0)
    }

    pub fn column(&self, i: usize) -> Vec3 {
        self.0.column(i).into_owned()
    }

    /// Geodesic distance on SO(3), radians in `[0, π]`.
    pub fn angle_to(&self, other: &RotationMatrix) -> f64 {
        let rel = self.0.transpose() * other.0;
        // atan2 of the axis-angle sine and cosine stays accurate near 0 and π
        let c = ((rel.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
        let s = 0.5
            * nalgebra::Vector3::new(rel[(2, 1)] - rel[(1, 2)], rel[(0, 2)] - rel[(2, 0)], rel[(1, 0)] - rel[(0, 1)])
                .norm();
        s.atan2(c)
    }

    pub fn frobenius_distance(&self, other: &RotationMatrix) -> f64 {
        (self.0 - other.0).norm()
    }

    pub fn to_rot6d(&self) -> Rot6D {
        matrix_to_rot6d(self)
    }

    pub fn row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 0)], m[(1, 1)], m[(1, 2)], m[(2, 0)], m[(2, 1)], m[(2, 2)]]
    }

    pub fn from_row_major(v: &[f64; 9]) -> Result<Self, GeometryError> {
        Self::new(Mat3::from_row_slice(v))
    }
}

impl TryFrom<[[f64; 3]; 3]> for RotationMatrix {
    type Error = GeometryError;
    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self, Self::Error> {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Self::new(Mat3::from_row_slice(&flat))
    }
}

impl From<RotationMatrix> for [[f64; 3]; 3] {
    fn from(r: RotationMatrix) -> Self {
        let m = r.0;
        [
            [m[(0, 0)], m[(0, 1)], m[(0, 2)]],
            [m[(1, 0)], m[(1, 1)], m[(1, 2)]],
            [m[(2, 0)], m[(2, 1)], m[(2, 2)]],
        ]
    }
}

/// Continuous 6D rotation parameterization: the (unnormalized) first two
/// columns of a rotation matrix.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rot6D {
    pub a1: Vec3,
    pub a2: Vec3,
}

impl Rot6D {
    pub fn new(a1: Vec3, a2: Vec3) -> Self {
        Self { a1, a2 }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self { a1: Vec3::new(v[0], v[1], v[2]), a2: Vec3::new(v[3], v[4], v[5]) }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.a1.x, self.a1.y, self.a1.z, self.a2.x, self.a2.y, self.a2.z]
    }

    pub fn to_matrix(&self) -> Result<RotationMatrix, GeometryError> {
        rot6d_to_matrix(self)
    }
}

/// Gram-Schmidt: `b1 = a1/|a1|`, `b2 = normalize(a2 - (b1·a2) b1)`, `b3 = b1 × b2`.
pub fn rot6d_to_matrix(r: &Rot6D) -> Result<RotationMatrix, GeometryError> {
    let n1 = r.a1.norm();
    if !(n1 >= DEGENERATE_NORM) {
        return Err(GeometryError::DegenerateInput("first 6D column has (near-)zero norm"));
    }
    let b1 = r.a1 / n1;
    let proj = r.a2 - b1 * b1.dot(&r.a2);
    let n2 = proj.norm();
    if !(n2 >= DEGENERATE_NORM) {
        return Err(GeometryError::DegenerateInput("second 6D column is parallel to the first"));
    }
    let b2 = proj / n2;
    let b3 = b1.cross(&b2);
    Ok(RotationMatrix(Mat3::from_columns(&[b1, b2, b3])))
}

pub fn matrix_to_rot6d(r: &RotationMatrix) -> Rot6D {
    Rot6D { a1: r.column(0), a2: r.column(1) }
}

/// Haar-uniform random rotation (normalized Gaussian quaternion).
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> RotationMatrix {
    loop {
        let q = Quaternion::new(
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
            rng.sample::<f64, _>(StandardNormal),
        );
        if q.norm() > 1e-6 {
            let uq = UnitQuaternion::from_quaternion(q);
            return RotationMatrix(*uq.to_rotation_matrix().matrix());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn orthonormal_input_gives_identity() {
        let r = rot6d_to_matrix(&Rot6D::new(Vec3::x(), Vec3::y())).unwrap();
        assert_eq!(*r.matrix(), Mat3::identity());
    }

    #[test]
    fn hand_gram_schmidt() {
        let r = rot6d_to_matrix(&Rot6D::new(Vec3::new(2.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 0.0))).unwrap();
        assert_relative_eq!(*r.matrix(), Mat3::identity(), epsilon = 1e-15);
    }

    #[test]
    fn degenerate_inputs_rejected() {
        assert!(matches!(
            rot6d_to_matrix(&Rot6D::new(Vec3::zeros(), Vec3::y())),
            Err(GeometryError::DegenerateInput(_))
        ));
        assert!(matches!(
            rot6d_to_matrix(&Rot6D::new(Vec3::x(), Vec3::new(3.0, 0.0, 0.0))),
            Err(GeometryError::DegenerateInput(_))
        ));
    }

    #[test]
    fn identity_and_quarter_turn_to_6d() {
        let id = matrix_to_rot6d(&RotationMatrix::identity());
        assert_eq!(id.to_array(), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let rz = matrix_to_rot6d(&RotationMatrix::about_z(FRAC_PI_2));
        let want = [0.0, 1.0, 0.0, -1.0, 0.0, 0.0];
        for (a, b) in rz.to_array().iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn random_rotations_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let r = random_rotation(&mut rng);
            let back = rot6d_to_matrix(&matrix_to_rot6d(&r)).unwrap();
            worst = worst.max((back.matrix() - r.matrix()).amax());
        }
        assert!(worst < 1e-9, "{worst}");
    }

    #[test]
    fn rejects_reflection() {
        let m = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(RotationMatrix::new(m).is_err());
    }

    proptest! {
        #[test]
        fn gram_schmidt_output_is_rotation(
            a in prop::array::uniform3(-5.0f64..5.0),
            b in prop::array::uniform3(-5.0f64..5.0),
        ) {
            let a1 = Vec3::from(a);
            let a2 = Vec3::from(b);
            prop_assume!(a1.norm() > 1e-3);
            prop_assume!(a1.normalize().cross(&a2).norm() > 1e-3);
            let r = rot6d_to_matrix(&Rot6D::new(a1, a2)).unwrap();
            let m = r.matrix();
            prop_assert!((m.transpose() * m - Mat3::identity()).amax() < 1e-6);
            prop_assert!((m.determinant() - 1.0).abs() < 1e-6);
        }

        #[test]
        fn geodesic_angle_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_rotation(&mut rng);
            let b = random_rotation(&mut rng);
            let c = random_rotation(&mut rng);
            prop_assert!((a.angle_to(&b) - b.angle_to(&a)).abs() < 1e-12);
            prop_assert!(a.angle_to(&a) < 1e-7);
            prop_assert!(a.angle_to(&c) <= a.angle_to(&b) + b.angle_to(&c) + 1e-9);
        }
    }
}
