//! Oriented boxes: corners, exact intersection volume by successive
//! half-space clipping, and a Monte-Carlo estimate used as a test oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Pose, SizeVec, Vec3};

/// A canonical box of extents `size`, centered at the origin, placed by `pose`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub pose: Pose,
    pub size: SizeVec,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum IouMethod {
    Exact,
    MonteCarlo { samples: usize, seed: u64 },
}

impl OrientedBox {
    pub fn new(pose: Pose, size: SizeVec) -> Self {
        Self { pose, size }
    }

    pub fn volume(&self) -> f64 {
        self.size.volume()
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        let local = self.pose.rotation.matrix().transpose() * (p - self.pose.translation);
        let h = self.size.half();
        local.x.abs() <= h.x && local.y.abs() <= h.y && local.z.abs() <= h.z
    }
}

/// Corner `i` uses sign `-` on axis `k` when bit `k` of `i` is 0 and `+`
/// when it is 1, so corner 0 is `(-,-,-)` and corner 7 is `(+,+,+)`.
pub fn obb_corners(b: &OrientedBox) -> [Vec3; 8] {
    let h = b.size.half();
    std::array::from_fn(|i| {
        let s = |k: usize| if (i >> k) & 1 == 1 { 1.0 } else { -1.0 };
        b.pose.transform_point(&Vec3::new(s(0) * h.x, s(1) * h.y, s(2) * h.z))
    })
}

pub fn obb_iou(a: &OrientedBox, b: &OrientedBox, method: IouMethod) -> f64 {
    let iou = match method {
        IouMethod::Exact => {
            let inter = intersection_volume(a, b);
            let union = a.volume() + b.volume() - inter;
            if union > 0.0 {
                inter / union
            } else {
                0.0
            }
        }
        IouMethod::MonteCarlo { samples, seed } => monte_carlo_iou(a, b, samples, seed),
    };
    iou.clamp(0.0, 1.0)
}

type Polygon = Vec<Vec3>;

// Relative to box scale; points within this of a plane count as on it.
const PLANE_EPS: f64 = 1e-12;

fn box_faces(b: &OrientedBox) -> Vec<Polygon> {
    let c = obb_corners(b);
    // outward counter-clockwise faces over the corner bit layout
    [[0, 4, 6, 2], [1, 3, 7, 5], [0, 1, 5, 4], [2, 6, 7, 3], [0, 2, 3, 1], [4, 5, 7, 6]]
        .iter()
        .map(|f| f.iter().map(|&i| c[i]).collect())
        .collect()
}

/// Keeps the part of a convex polyhedron with `n·x <= d`.
fn clip_polyhedron(faces: Vec<Polygon>, n: &Vec3, d: f64, eps: f64) -> Vec<Polygon> {
    let side = |p: &Vec3| n.dot(p) - d;
    let any_outside = faces.iter().flatten().any(|p| side(p) > eps);
    if !any_outside {
        return faces;
    }
    let any_inside = faces.iter().flatten().any(|p| side(p) < -eps);
    if !any_inside {
        return Vec::new();
    }

    let mut out_faces = Vec::with_capacity(faces.len() + 1);
    let mut cap: Vec<Vec3> = Vec::new();
    let mut has_face_on_plane = false;
    for face in &faces {
        let mut poly = Vec::with_capacity(face.len() + 2);
        for i in 0..face.len() {
            let p = face[i];
            let q = face[(i + 1) % face.len()];
            let (dp, dq) = (side(&p), side(&q));
            if dp <= eps {
                poly.push(p);
                if dp >= -eps {
                    cap.push(p);
                }
            }
            if (dp < -eps && dq > eps) || (dp > eps && dq < -eps) {
                let x = p + (q - p) * (dp / (dp - dq));
                poly.push(x);
                cap.push(x);
            }
        }
        if poly.len() >= 3 {
            if poly.iter().all(|p| side(p).abs() <= eps) {
                has_face_on_plane = true;
            }
            out_faces.push(poly);
        }
    }
    if !has_face_on_plane {
        if let Some(cap_face) = order_planar_points(cap, n, eps) {
            out_faces.push(cap_face);
        }
    }
    out_faces
}

fn order_planar_points(mut pts: Vec<Vec3>, n: &Vec3, eps: f64) -> Option<Polygon> {
    let mut unique: Vec<Vec3> = Vec::with_capacity(pts.len());
    for p in pts.drain(..) {
        if !unique.iter().any(|u| (u - p).norm() <= eps * 10.0) {
            unique.push(p);
        }
    }
    if unique.len() < 3 {
        return None;
    }
    let c = unique.iter().sum::<Vec3>() / unique.len() as f64;
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let u = n.cross(&helper).normalize();
    let v = n.cross(&u);
    unique.sort_by(|a, b| {
        let aa = (a - c).dot(&v).atan2((a - c).dot(&u));
        let ab = (b - c).dot(&v).atan2((b - c).dot(&u));
        aa.total_cmp(&ab)
    });
    Some(unique)
}

/// Vector area (Newell) of a planar polygon.
fn vector_area(poly: &Polygon) -> Vec3 {
    let mut acc = Vec3::zeros();
    for i in 0..poly.len() {
        acc += poly[i].cross(&poly[(i + 1) % poly.len()]);
    }
    acc * 0.5
}

/// Volume of a convex polyhedron as a sum of pyramids from an interior
/// point, which does not depend on face orientation.
fn convex_volume(faces: &[Polygon]) -> f64 {
    let count: usize = faces.iter().map(|f| f.len()).sum();
    if faces.len() < 4 || count == 0 {
        return 0.0;
    }
    let interior = faces.iter().flatten().sum::<Vec3>() / count as f64;
    faces
        .iter()
        .map(|f| {
            let va = vector_area(f);
            let area = va.norm();
            if area == 0.0 {
                return 0.0;
            }
            let normal = va / area;
            let fc = f.iter().sum::<Vec3>() / f.len() as f64;
            area * normal.dot(&(fc - interior)).abs() / 3.0
        })
        .sum()
}

fn intersection_volume(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let scale = a.size.extents().amax().max(b.size.extents().amax());
    let eps = PLANE_EPS * scale.max(1.0);
    let mut poly = box_faces(b);
    let h = a.size.half();
    let c = a.pose.translation;
    for k in 0..3 {
        let axis = a.pose.rotation.column(k);
        let offset = axis.dot(&c);
        poly = clip_polyhedron(poly, &axis, offset + h[k], eps);
        if poly.is_empty() {
            return 0.0;
        }
        poly = clip_polyhedron(poly, &(-axis), -offset + h[k], eps);
        if poly.is_empty() {
            return 0.0;
        }
    }
    convex_volume(&poly)
}

fn monte_carlo_iou(a: &OrientedBox, b: &OrientedBox, samples: usize, seed: u64) -> f64 {
    let corners: Vec<Vec3> = obb_corners(a).into_iter().chain(obb_corners(b)).collect();
    let lo = corners.iter().fold(Vec3::repeat(f64::INFINITY), |m, p| m.inf(p));
    let hi = corners.iter().fold(Vec3::repeat(f64::NEG_INFINITY), |m, p| m.sup(p));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut both, mut either) = (0u64, 0u64);
    for _ in 0..samples {
        let p = Vec3::new(
            rng.random_range(lo.x..=hi.x),
            rng.random_range(lo.y..=hi.y),
            rng.random_range(lo.z..=hi.z),
        );
        let (ia, ib) = (a.contains(&p), b.contains(&p));
        if ia && ib {
            both += 1;
        }
        if ia || ib {
            either += 1;
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}
