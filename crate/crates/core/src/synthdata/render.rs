use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::camera::CameraModel;
use super::shapes::PrimitiveShape;
use super::SynthError;
use crate::geometry::{PointSet, Pose, Vec3};

/// Row-major z-depth image in meters; 0 marks pixels without a hit.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl DepthMap {
    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.data[v * self.width + u]
    }

    pub fn hit_count(&self) -> usize {
        self.data.iter().filter(|d| **d > 0.0).count()
    }

    /// Hit pixels as `(u, v)` in row-major order.
    pub fn hits(&self) -> Vec<(usize, usize)> {
        (0..self.data.len()).filter(|&i| self.data[i] > 0.0).map(|i| (i % self.width, i / self.width)).collect()
    }
}

/// Analytic ray casting through every pixel center. `pose` maps the shape's
/// canonical frame into the camera frame.
pub fn render_depth(shape: &PrimitiveShape, pose: &Pose, cam: &CameraModel) -> Result<DepthMap, SynthError> {
    let k = &cam.intrinsics;
    let (w, h) = (k.width, k.height);
    let mut data = vec![0.0; w * h];
    let center = pose.translation;
    let radius = shape.bounding_radius();
    if center.z + radius <= 0.0 {
        return Err(SynthError::NoVisiblePixels);
    }
    // pixel window covering the projected bounding sphere
    let (u0, u1, v0, v1) = if center.z - radius > 1e-6 {
        let (zn, zf) = (center.z - radius, center.z + radius);
        let xs = [(center.x - radius) / zn, (center.x - radius) / zf, (center.x + radius) / zn, (center.x + radius) / zf];
        let ys = [(center.y - radius) / zn, (center.y - radius) / zf, (center.y + radius) / zn, (center.y + radius) / zf];
        let fold = |v: &[f64; 4]| v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(*x), b.max(*x)));
        let ((xl, xh), (yl, yh)) = (fold(&xs), fold(&ys));
        let clampi = |x: f64, n: usize| x.floor().clamp(0.0, n as f64) as usize;
        (
            clampi(k.cx + k.fx * xl, w),
            clampi(k.cx + k.fx * xh + 2.0, w),
            clampi(k.cy + k.fy * yl, h),
            clampi(k.cy + k.fy * yh + 2.0, h),
        )
    } else {
        (0, w, 0, h)
    };
    let inv = pose.inverse();
    let origin = inv.translation;
    for v in v0..v1 {
        for u in u0..u1 {
            let ray = cam.ray(u as f64, v as f64);
            let dir = inv.rotation.matrix() * ray;
            if let Some(t) = shape.intersect(&origin, &dir) {
                // ray has unit z, so the ray parameter is the z-depth
                data[v * w + u] = t;
            }
        }
    }
    let map = DepthMap { width: w, height: h, data };
    if map.hit_count() == 0 {
        return Err(SynthError::NoVisiblePixels);
    }
    Ok(map)
}

/// Adds zero-mean Gaussian noise to every hit pixel (depths stay positive).
pub fn add_depth_noise(depth: &mut DepthMap, sigma: f64, seed: u64) {
    if sigma <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for d in depth.data.iter_mut().filter(|d| **d > 0.0) {
        *d = (*d + normal.sample(&mut rng)).max(1e-6);
    }
}

/// Samples `n` hit pixels (without replacement when there are enough, with
/// replacement otherwise) and lifts them to camera-frame points
/// `depth · K⁻¹ (u, v, 1)`.
pub fn backproject(depth: &DepthMap, cam: &CameraModel, n: usize, seed: u64) -> Result<(PointSet, Vec<[i32; 2]>), SynthError> {
    let hits = depth.hits();
    if hits.is_empty() {
        return Err(SynthError::NoVisiblePixels);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: Vec<usize> = if hits.len() >= n {
        let mut idx = sample(&mut rng, hits.len(), n).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).map(|_| rng.random_range(0..hits.len())).collect()
    };
    let mut pts = Vec::with_capacity(n);
    let mut pix = Vec::with_capacity(n);
    for i in chosen {
        let (u, v) = hits[i];
        pts.push(cam.ray(u as f64, v as f64) * depth.at(u, v));
        pix.push([u as i32, v as i32]);
    }
    Ok((PointSet::new(pts)?, pix))
}

/// Pixel-space disk occluder for fractions {0, 0.25, 0.5, 0.75}.
///
/// A seeded visible pixel is the center; the radius is the smallest one
/// whose closed disk covers at least `fraction` of the distinct observed
/// pixels. Points inside are dropped and the survivors are kept and topped
/// back up to the original count by resampling with replacement. The center
/// depends only on `seed`, so for one seed larger fractions remove supersets.
pub fn apply_occlusion(
    points: &PointSet,
    pixels: &[[i32; 2]],
    fraction: f64,
    seed: u64,
) -> Result<(PointSet, Vec<[i32; 2]>), SynthError> {
    if ![0.0, 0.25, 0.5, 0.75].contains(&fraction) {
        return Err(SynthError::InvalidOcclusion(fraction));
    }
    if points.len() != pixels.len() {
        return Err(SynthError::InvalidConfig("points and pixels differ in length".into()));
    }
    if fraction == 0.0 || points.is_empty() {
        return Ok((points.clone(), pixels.to_vec()));
    }
    let mut distinct: Vec<[i32; 2]> = pixels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = distinct[rng.random_range(0..distinct.len())];
    let d2 = |p: &[i32; 2]| {
        let (du, dv) = ((p[0] - c[0]) as i64, (p[1] - c[1]) as i64);
        du * du + dv * dv
    };
    let mut dists: Vec<i64> = distinct.iter().map(d2).collect();
    dists.sort_unstable();
    let need = (fraction * distinct.len() as f64).ceil() as usize;
    let r2 = dists[need.clamp(1, dists.len()) - 1];
    let keep: Vec<usize> = (0..pixels.len()).filter(|&i| d2(&pixels[i]) > r2).collect();
    if keep.is_empty() {
        return Err(SynthError::NoVisiblePixels);
    }
    let mut out_idx = keep.clone();
    while out_idx.len() < pixels.len() {
        out_idx.push(keep[rng.random_range(0..keep.len())]);
    }
    let pts: Vec<Vec3> = out_idx.iter().map(|&i| points.points()[i]).collect();
    let pix: Vec<[i32; 2]> = out_idx.iter().map(|&i| pixels[i]).collect();
    Ok((PointSet::new(pts)?, pix))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_rotation, RotationMatrix, SizeVec};
    use crate::synthdata::camera::{sample_camera, Intrinsics};
    use crate::synthdata::shapes::PrimitiveKind;

    fn axis_camera() -> CameraModel {
        CameraModel::new(Intrinsics::default(), Pose::identity()).unwrap()
    }

    #[test]
    fn sphere_on_axis_center_depth() {
        let s = PrimitiveShape::new(PrimitiveKind::Sphere, SizeVec::new(1.0, 1.0, 1.0).unwrap(), 0).unwrap();
        let pose = Pose::from_translation(Vec3::new(0.0, 0.0, 2.0));
        let d = render_depth(&s, &pose, &axis_camera()).unwrap();
        assert!((d.at(96, 96) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn behind_camera_has_no_pixels() {
        let s = PrimitiveShape::new(PrimitiveKind::Box, SizeVec::new(0.1, 0.1, 0.1).unwrap(), 0).unwrap();
        let pose = Pose::from_translation(Vec3::new(0.0, 0.0, -1.0));
        assert!(matches!(render_depth(&s, &pose, &axis_camera()), Err(SynthError::NoVisiblePixels)));
    }

    #[test]
    fn depths_respect_bounding_sphere() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in PrimitiveKind::ALL {
            let s = PrimitiveShape::random(kind, &mut rng, 0);
            let cam = sample_camera(7, [0.5, 0.8]).unwrap();
            let pose = cam.world_to_camera();
            let d = render_depth(&s, &pose, &cam).unwrap();
            let lower = pose.translation.norm() - s.bounding_radius();
            for (u, v) in d.hits() {
                let ray = cam.ray(u as f64, v as f64);
                let range = d.at(u, v) * ray.norm();
                assert!(range >= lower - 1e-12);
            }
        }
    }

    #[test]
    fn window_matches_full_render() {
        // the projected bounding window must not clip any hits
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let s = PrimitiveShape::random(PrimitiveKind::LBracket, &mut rng, 0);
        let pose = Pose::new(random_rotation(&mut rng), Vec3::new(0.05, -0.04, 0.4)).unwrap();
        let cam = axis_camera();
        let fast = render_depth(&s, &pose, &cam).unwrap();
        let inv = pose.inverse();
        for v in 0..cam.intrinsics.height {
            for u in 0..cam.intrinsics.width {
                let dir = inv.rotation.matrix() * cam.ray(u as f64, v as f64);
                let want = s.intersect(&inv.translation, &dir).unwrap_or(0.0);
                assert_eq!(fast.at(u, v), want);
            }
        }
    }

    #[test]
    fn backprojection_examples() {
        let mut d = DepthMap { width: 192, height: 192, data: vec![0.0; 192 * 192] };
        d.data[96 * 192 + 96] = 1.5;
        let (p, px) = backproject(&d, &axis_camera(), 5, 1).unwrap();
        assert_eq!(p.len(), 5);
        for q in p.points() {
            assert_eq!(*q, Vec3::new(0.0, 0.0, 1.5));
        }
        assert!(px.iter().all(|x| *x == [96, 96]));
        let mut empty = d.clone();
        empty.data.fill(0.0);
        assert!(matches!(backproject(&empty, &axis_camera(), 5, 1), Err(SynthError::NoVisiblePixels)));
    }

    #[test]
    fn backprojected_points_reproject_and_lie_on_surface() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for kind in PrimitiveKind::ALL {
            let s = PrimitiveShape::random(kind, &mut rng, 0);
            let cam = sample_camera(rng.random(), [0.5, 0.8]).unwrap();
            let pose = cam.world_to_camera();
            let d = render_depth(&s, &pose, &cam).unwrap();
            let (pts, px) = backproject(&d, &cam, 512, 4).unwrap();
            let inv = pose.inverse();
            for (p, q) in pts.points().iter().zip(&px) {
                let (u, v) = cam.project(p);
                assert!((u - q[0] as f64).abs() < 0.5 && (v - q[1] as f64).abs() < 0.5);
                assert!(s.signed_distance(&inv.transform_point(p)).abs() < 1e-6, "{kind}");
            }
        }
    }

    #[test]
    fn occlusion_contract() {
        let s = PrimitiveShape::new(PrimitiveKind::Box, SizeVec::new(0.15, 0.1, 0.12).unwrap(), 0).unwrap();
        let cam = sample_camera(11, [0.5, 0.6]).unwrap();
        let pose = cam.world_to_camera().compose(&Pose::new(RotationMatrix::about_y(0.3), Vec3::zeros()).unwrap());
        let d = render_depth(&s, &pose, &cam).unwrap();
        let (pts, px) = backproject(&d, &cam, 256, 5).unwrap();
        let (same, same_px) = apply_occlusion(&pts, &px, 0.0, 3).unwrap();
        assert_eq!((same, same_px), (pts.clone(), px.clone()));
        let mut prev_survivors = usize::MAX;
        for f in [0.25, 0.5, 0.75] {
            let (out, out_px) = apply_occlusion(&pts, &px, f, 3).unwrap();
            assert_eq!(out.len(), 256);
            let mut surv = out_px.clone();
            surv.sort_unstable();
            surv.dedup();
            assert!(256 - surv.len() >= (f * 256.0) as usize, "{f}");
            assert!(surv.len() <= prev_survivors);
            prev_survivors = surv.len();
            // removed pixels all lie within the disk of the largest removed distance,
            // and every survivor lies outside it
            let removed: Vec<_> = px.iter().filter(|p| !surv.contains(p)).collect();
            let d2 = |a: &[i32; 2], b: &[i32; 2]| (a[0] - b[0]).pow(2) + (a[1] - b[1]).pow(2);
            let is_disk = px.iter().any(|c| {
                let inner = removed.iter().map(|p| d2(p, c)).max().unwrap();
                surv.iter().all(|p| d2(p, c) > inner)
            });
            assert!(is_disk, "{f}");
        }
        assert!(matches!(apply_occlusion(&pts, &px, 0.3, 1), Err(SynthError::InvalidOcclusion(_))));
    }
}
