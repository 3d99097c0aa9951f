use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::shapes::PrimitiveShape;
use super::SynthError;
use crate::geometry::{PointSet, Pose, Vec3};

/// Noise draws are clamped to this many standard deviations, which keeps
/// features inside `1 + NOISE_CLAMP·σ`.
pub const NOISE_CLAMP: f64 = 5.0;
/// Standard deviation of the encoding frequencies, in radians per unit of
/// size-normalized canonical coordinate.
const FREQUENCY_SCALE: f64 = 4.0;
pub const MIN_FEATURE_DIM: usize = 8;

/// Source of per-point appearance features aligned with observed points.
pub trait FeatureProvider {
    fn dim(&self) -> usize;

    /// `N × dim` row-major features for the observed points.
    fn provide(
        &self,
        shape: &PrimitiveShape,
        pose: &Pose,
        partial: &PointSet,
        pixel_coords: &[[i32; 2]],
        seed: u64,
    ) -> Result<Vec<f64>, SynthError>;
}

/// Stand-in for a learned image encoder: a fixed random sinusoidal encoding
/// of each point's size-normalized canonical coordinate. The clean feature of
/// a physical surface point is the same under any pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinusoidFeatures {
    pub d_f: usize,
    pub noise_sigma: f64,
}

impl FeatureProvider for SinusoidFeatures {
    fn dim(&self) -> usize {
        self.d_f
    }

    fn provide(
        &self,
        shape: &PrimitiveShape,
        pose: &Pose,
        partial: &PointSet,
        pixel_coords: &[[i32; 2]],
        seed: u64,
    ) -> Result<Vec<f64>, SynthError> {
        stub_features(shape, pose, partial, pixel_coords, self.d_f, self.noise_sigma, seed)
    }
}

/// Encoding `sin(ω_j · q + φ_j)` with `ω`, `φ` drawn from the shape's
/// texture seed; `seed` only drives the additive noise.
pub fn stub_features(
    shape: &PrimitiveShape,
    pose: &Pose,
    partial: &PointSet,
    pixel_coords: &[[i32; 2]],
    d_f: usize,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vec<f64>, SynthError> {
    if d_f < MIN_FEATURE_DIM {
        return Err(SynthError::InvalidConfig(format!("feature dim must be >= {MIN_FEATURE_DIM}, got {d_f}")));
    }
    if pixel_coords.len() != partial.len() {
        return Err(SynthError::InvalidConfig("points and pixels differ in length".into()));
    }
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(SynthError::InvalidConfig(format!("noise sigma {noise_sigma}")));
    }
    let mut tex = ChaCha8Rng::seed_from_u64(shape.texture_seed);
    let omega: Vec<Vec3> = (0..d_f)
        .map(|_| Vec3::new(tex.sample(StandardNormal), tex.sample(StandardNormal), tex.sample(StandardNormal)) * FREQUENCY_SCALE)
        .collect();
    let phase: Vec<f64> = (0..d_f).map(|_| tex.random::<f64>() * std::f64::consts::TAU).collect();
    let inv = pose.inverse();
    let ext = shape.size.extents();
    let mut noise = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(partial.len() * d_f);
    for p in partial.points() {
        let q = inv.transform_point(p).component_div(ext);
        for j in 0..d_f {
            let mut f = (omega[j].dot(&q) + phase[j]).sin();
            if noise_sigma > 0.0 {
                let z: f64 = noise.sample(StandardNormal);
                f += noise_sigma * z.clamp(-NOISE_CLAMP, NOISE_CLAMP);
            }
            out.push(f);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::random_rotation;
    use crate::synthdata::shapes::PrimitiveKind;

    fn setup() -> (PrimitiveShape, Vec<Vec3>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = PrimitiveShape::random(PrimitiveKind::Cone, &mut rng, 42);
        let pts = s.sample_canonical(1000, &mut rng);
        (s, pts)
    }

    fn posed(pose: &Pose, pts: &[Vec3]) -> PointSet {
        PointSet::new(pts.iter().map(|p| pose.transform_point(p)).collect()).unwrap()
    }

    #[test]
    fn same_point_same_feature_under_any_pose() {
        let (s, pts) = setup();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = Pose::new(random_rotation(&mut rng), Vec3::new(0.1, 0.0, 0.6)).unwrap();
        let b = Pose::new(random_rotation(&mut rng), Vec3::new(-0.2, 0.1, 0.7)).unwrap();
        let px = vec![[0, 0]; pts.len()];
        let fa = stub_features(&s, &a, &posed(&a, &pts), &px, 16, 0.0, 1).unwrap();
        let fb = stub_features(&s, &b, &posed(&b, &pts), &px, 16, 0.0, 2).unwrap();
        for (x, y) in fa.iter().zip(&fb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn distinct_points_have_distinct_features() {
        let (s, pts) = setup();
        let pose = Pose::identity();
        let px = vec![[0, 0]; pts.len()];
        let f = stub_features(&s, &pose, &posed(&pose, &pts), &px, 16, 0.0, 1).unwrap();
        for i in 0..999 {
            let d: f64 = (0..16).map(|j| (f[i * 16 + j] - f[(i + 1) * 16 + j]).powi(2)).sum();
            assert!(d > 0.0);
        }
    }

    #[test]
    fn bounded_with_noise() {
        let (s, pts) = setup();
        let pose = Pose::identity();
        let px = vec![[0, 0]; pts.len()];
        let sigma = 0.3;
        let f = stub_features(&s, &pose, &posed(&pose, &pts), &px, 32, sigma, 5).unwrap();
        assert!(f.iter().all(|v| v.is_finite() && v.abs() <= 1.0 + NOISE_CLAMP * sigma));
        assert!(stub_features(&s, &pose, &posed(&pose, &pts), &px, 4, 0.0, 5).is_err());
    }
}
