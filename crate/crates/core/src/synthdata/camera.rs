use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::geometry::{Pose, RotationMatrix, Vec3};

/// Pinhole intrinsics. Pixel `(u, v)` has its center at `(u, v)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for Intrinsics {
    fn default() -> Self {
        Self { fx: 240.0, fy: 240.0, cx: 96.0, cy: 96.0, width: 192, height: 192 }
    }
}

impl Intrinsics {
    pub fn validate(&self) -> Result<(), SynthError> {
        let inside = self.cx >= 0.0 && self.cy >= 0.0 && self.cx < self.width as f64 && self.cy < self.height as f64;
        if !(self.fx > 0.0 && self.fy > 0.0) || !inside {
            return Err(SynthError::InvalidConfig(format!("invalid intrinsics {self:?}")));
        }
        Ok(())
    }
}

/// Camera intrinsics plus camera-to-world pose. The camera frame follows the
/// usual vision convention: x right, y down, z along the optical axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub intrinsics: Intrinsics,
    pub pose: Pose,
}

impl CameraModel {
    pub fn new(intrinsics: Intrinsics, pose: Pose) -> Result<Self, SynthError> {
        intrinsics.validate()?;
        Ok(Self { intrinsics, pose })
    }

    /// Pixel coordinates of a camera-frame point.
    pub fn project(&self, p: &Vec3) -> (f64, f64) {
        let k = &self.intrinsics;
        (k.fx * p.x / p.z + k.cx, k.fy * p.y / p.z + k.cy)
    }

    /// `K⁻¹ (u, v, 1)`: the ray through a pixel center with unit z.
    pub fn ray(&self, u: f64, v: f64) -> Vec3 {
        let k = &self.intrinsics;
        Vec3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0)
    }

    pub fn world_to_camera(&self) -> Pose {
        self.pose.inverse()
    }
}

/// Viewpoint distribution around an object at the world origin (y up).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSampling {
    pub intrinsics: Intrinsics,
    pub distance_range: [f64; 2],
    pub elevation_deg: [f64; 2],
    /// Per-axis half-width of the uniform jitter of the look-at point.
    pub target_jitter: f64,
}

impl Default for CameraSampling {
    fn default() -> Self {
        Self { intrinsics: Intrinsics::default(), distance_range: [0.5, 0.8], elevation_deg: [15.0, 75.0], target_jitter: 0.02 }
    }
}

pub fn sample_camera(seed: u64, distance_range: [f64; 2]) -> Result<CameraModel, SynthError> {
    sample_camera_with(seed, &CameraSampling { distance_range, ..CameraSampling::default() })
}

/// Area-uniform viewpoint on the band of the upper hemisphere between the
/// elevation limits, at a uniform distance, looking at the (jittered)
/// origin with the camera x axis horizontal.
pub fn sample_camera_with(seed: u64, cfg: &CameraSampling) -> Result<CameraModel, SynthError> {
    let [dmin, dmax] = cfg.distance_range;
    if !(dmin > 0.0 && dmin < dmax && dmax.is_finite()) {
        return Err(SynthError::InvalidRange(format!("distance range {:?}", cfg.distance_range)));
    }
    let [emin, emax] = cfg.elevation_deg;
    if !(0.0 <= emin && emin < emax && emax < 90.0) {
        return Err(SynthError::InvalidRange(format!("elevation range {:?}", cfg.elevation_deg)));
    }
    cfg.intrinsics.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let az = rng.random::<f64>() * std::f64::consts::TAU;
    // area-uniform on a spherical zone: sin(elevation) is uniform
    let (s0, s1) = (emin.to_radians().sin(), emax.to_radians().sin());
    let el = rng.random_range(s0..=s1).asin();
    let dist = rng.random_range(dmin..=dmax);
    let j = cfg.target_jitter;
    let target = if j > 0.0 {
        Vec3::new(rng.random_range(-j..=j), rng.random_range(-j..=j), rng.random_range(-j..=j))
    } else {
        Vec3::zeros()
    };
    let center = Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos()) * dist;
    let z = (target - center).normalize();
    let x = z.cross(&Vec3::y()).normalize();
    let y = z.cross(&x);
    let rot = RotationMatrix::from_columns(x, y, z)?;
    Ok(CameraModel { intrinsics: cfg.intrinsics, pose: Pose::new(rot, center)? })
}
