use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::SynthError;
use crate::geometry::{AxisSymmetry, PointSet, Pose, SizeVec, SymmetrySpec, Vec3};

/// Hits closer than this along a ray are ignored.
const RAY_EPS: f64 = 1e-9;
/// Relative tolerance for "equal extents" when deciding 90° box symmetry.
const EQUAL_EXTENT_TOL: f64 = 1e-9;
/// Bracket plate thickness as a fraction of the smaller of its x/y extents.
const BRACKET_THICKNESS: f64 = 0.25;
/// Points this close to the other bracket plate count as on its boundary.
const SHARED_FACE_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrimitiveKind {
    Box,
    Cylinder,
    Cone,
    Sphere,
    Capsule,
    LBracket,
}

impl PrimitiveKind {
    pub const ALL: [PrimitiveKind; 6] = [
        PrimitiveKind::Box,
        PrimitiveKind::Cylinder,
        PrimitiveKind::Cone,
        PrimitiveKind::Sphere,
        PrimitiveKind::Capsule,
        PrimitiveKind::LBracket,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            PrimitiveKind::Box => "box",
            PrimitiveKind::Cylinder => "cylinder",
            PrimitiveKind::Cone => "cone",
            PrimitiveKind::Sphere => "sphere",
            PrimitiveKind::Capsule => "capsule",
            PrimitiveKind::LBracket => "l_bracket",
        }
    }
}

impl fmt::Display for PrimitiveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PrimitiveKind {
    type Err = SynthError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        PrimitiveKind::ALL
            .into_iter()
            .find(|k| k.name() == norm || (norm == "lbracket" && *k == PrimitiveKind::LBracket))
            .ok_or_else(|| SynthError::InvalidConfig(format!("unknown category {s:?}")))
    }
}

/// An analytic solid centered at the origin of its canonical frame
/// (x forward, y up). Revolved shapes have their axis along y.
///
/// Extents: box `(sx, sy, sz)`; sphere `(d, d, d)`; cylinder and cone
/// `(2r, h, 2r)` with the cone apex at `+h/2`; capsule `(2r, L + 2r, 2r)`;
/// bracket `(sx, sy, sz)` as a vertical plate at `-x` joined to a horizontal
/// plate at `-y`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrimitiveShape {
    pub kind: PrimitiveKind,
    pub size: SizeVec,
    pub symmetry: SymmetrySpec,
    pub texture_seed: u64,
}

fn nearly_equal(a: f64, b: f64) -> bool {
    (a - b).abs() <= EQUAL_EXTENT_TOL * a.abs().max(b.abs())
}

impl PrimitiveShape {
    /// Validates proportions and derives the symmetry annotation.
    pub fn new(kind: PrimitiveKind, size: SizeVec, texture_seed: u64) -> Result<Self, SynthError> {
        use AxisSymmetry::*;
        let e = *size.extents();
        let bad = |msg: &str| Err(SynthError::InvalidConfig(format!("{kind}: {msg}, got {:?}", [e.x, e.y, e.z])));
        let symmetry = match kind {
            PrimitiveKind::Box => {
                let sym = |a: f64, b: f64| if nearly_equal(a, b) { Rot90 } else { Rot180 };
                SymmetrySpec::Axes([sym(e.y, e.z), sym(e.x, e.z), sym(e.x, e.y)])
            }
            PrimitiveKind::Sphere => {
                if !(nearly_equal(e.x, e.y) && nearly_equal(e.x, e.z)) {
                    return bad("sphere extents must be equal");
                }
                SymmetrySpec::Spherical
            }
            PrimitiveKind::Cylinder | PrimitiveKind::Capsule => {
                if !nearly_equal(e.x, e.z) {
                    return bad("x and z extents must be equal");
                }
                if kind == PrimitiveKind::Capsule && e.y <= e.x {
                    return bad("capsule must be longer than its diameter");
                }
                SymmetrySpec::Axes([Rot180, Continuous, None])
            }
            PrimitiveKind::Cone => {
                if !nearly_equal(e.x, e.z) {
                    return bad("x and z extents must be equal");
                }
                SymmetrySpec::Axes([None, Continuous, None])
            }
            PrimitiveKind::LBracket => SymmetrySpec::none(),
        };
        Ok(Self { kind, size, symmetry, texture_seed })
    }

    /// Random tabletop-scale instance (extents roughly 4-20 cm).
    pub fn random<R: Rng + ?Sized>(kind: PrimitiveKind, rng: &mut R, texture_seed: u64) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let e = match kind {
            PrimitiveKind::Box => [u(0.05, 0.2), u(0.05, 0.2), u(0.05, 0.2)],
            PrimitiveKind::Sphere => {
                let d = u(0.05, 0.15);
                [d, d, d]
            }
            PrimitiveKind::Cylinder | PrimitiveKind::Cone => {
                let d = u(0.05, 0.12);
                [d, u(0.05, 0.2), d]
            }
            PrimitiveKind::Capsule => {
                let d = u(0.04, 0.1);
                [d, d + u(0.04, 0.12), d]
            }
            PrimitiveKind::LBracket => [u(0.06, 0.18), u(0.06, 0.18), u(0.04, 0.12)],
        };
        let size = SizeVec::new(e[0], e[1], e[2]).expect("positive extents");
        Self::new(kind, size, texture_seed).expect("generated proportions are valid")
    }

    fn half(&self) -> Vec3 {
        self.size.half()
    }

    fn bracket_boxes(&self) -> [(Vec3, Vec3); 2] {
        let h = self.half();
        let t = BRACKET_THICKNESS * 2.0 * h.x.min(h.y);
        let vertical = (Vec3::new(-h.x, -h.y, -h.z), Vec3::new(-h.x + t, h.y, h.z));
        let horizontal = (Vec3::new(-h.x, -h.y, -h.z), Vec3::new(h.x, -h.y + t, h.z));
        [vertical, horizontal]
    }

    /// Radius of a sphere about the canonical origin enclosing the solid.
    pub fn bounding_radius(&self) -> f64 {
        self.half().norm()
    }

    /// First intersection `t > 0` of the ray `origin + t·dir` with the
    /// surface, in the canonical frame.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let h = self.half();
        match self.kind {
            PrimitiveKind::Box => ray_aabb(origin, dir, &-h, &h),
            PrimitiveKind::Sphere => ray_sphere(origin, dir, &Vec3::zeros(), h.x),
            PrimitiveKind::Cylinder => ray_cylinder(origin, dir, h.x, h.y),
            PrimitiveKind::Cone => ray_cone(origin, dir, h.x, h.y),
            PrimitiveKind::Capsule => {
                let r = h.x;
                let l = h.y - r;
                [
                    ray_cylinder(origin, dir, r, l),
                    ray_sphere(origin, dir, &Vec3::new(0.0, l, 0.0), r),
                    ray_sphere(origin, dir, &Vec3::new(0.0, -l, 0.0), r),
                ]
                .into_iter()
                .flatten()
                .reduce(f64::min)
            }
            PrimitiveKind::LBracket => {
                let [a, b] = self.bracket_boxes();
                [ray_aabb(origin, dir, &a.0, &a.1), ray_aabb(origin, dir, &b.0, &b.1)].into_iter().flatten().reduce(f64::min)
            }
        }
    }

    /// Signed distance to the surface (negative inside). Exact on and
    /// outside every primitive; zero exactly on the surface.
    pub fn signed_distance(&self, p: &Vec3) -> f64 {
        let h = self.half();
        match self.kind {
            PrimitiveKind::Box => sd_box(&p, &Vec3::zeros(), &h),
            PrimitiveKind::Sphere => p.norm() - h.x,
            PrimitiveKind::Cylinder => {
                let rho = p.x.hypot(p.z);
                sd_box2(rho, p.y, h.x, h.y)
            }
            PrimitiveKind::Cone => sd_cone(p.x.hypot(p.z), p.y, h.x, h.y),
            PrimitiveKind::Capsule => {
                let l = h.y - h.x;
                let y = p.y.clamp(-l, l);
                (p - Vec3::new(0.0, y, 0.0)).norm() - h.x
            }
            PrimitiveKind::LBracket => {
                let [a, b] = self.bracket_boxes();
                sd_aabb(p, &a).min(sd_aabb(p, &b))
            }
        }
    }

    pub fn surface_area(&self) -> f64 {
        let h = self.half();
        match self.kind {
            PrimitiveKind::Box => 8.0 * (h.x * h.y + h.y * h.z + h.x * h.z),
            PrimitiveKind::Sphere => 4.0 * PI * h.x * h.x,
            PrimitiveKind::Cylinder => 2.0 * PI * h.x * 2.0 * h.y + 2.0 * PI * h.x * h.x,
            PrimitiveKind::Cone => {
                let (r, ht) = (h.x, 2.0 * h.y);
                PI * r * r.hypot(ht) + PI * r * r
            }
            PrimitiveKind::Capsule => {
                let r = h.x;
                2.0 * PI * r * 2.0 * (h.y - r) + 4.0 * PI * r * r
            }
            PrimitiveKind::LBracket => {
                let [a, b] = self.bracket_boxes();
                let area = |b: &(Vec3, Vec3)| {
                    let e = b.1 - b.0;
                    2.0 * (e.x * e.y + e.y * e.z + e.x * e.z)
                };
                let t = a.1.x - a.0.x;
                let z = 2.0 * h.z;
                let tb = b.1.y - b.0.y;
                // faces of either box that are buried in, or coincide with, the other
                area(&a) + area(&b) - 2.0 * (t * z + tb * z + t * tb)
            }
        }
    }

    /// Area-uniform samples on the closed surface, canonical frame.
    pub fn sample_canonical<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Vec3> {
        (0..n).map(|_| self.sample_one(rng)).collect()
    }

    fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let h = self.half();
        match self.kind {
            PrimitiveKind::Box => sample_box_surface(&-h, &h, rng),
            PrimitiveKind::Sphere => unit_sphere(rng) * h.x,
            PrimitiveKind::Cylinder => {
                let r = h.x;
                let side = 2.0 * PI * r * 2.0 * h.y;
                let cap = PI * r * r;
                let pick = rng.random::<f64>() * (side + 2.0 * cap);
                if pick < side {
                    let a = rng.random::<f64>() * 2.0 * PI;
                    Vec3::new(r * a.cos(), rng.random_range(-h.y..=h.y), r * a.sin())
                } else {
                    let (x, z) = disk(r, rng);
                    Vec3::new(x, if pick < side + cap { h.y } else { -h.y }, z)
                }
            }
            PrimitiveKind::Cone => {
                let (r, a) = (h.x, h.y);
                let lateral = PI * r * r.hypot(2.0 * a);
                let base = PI * r * r;
                if rng.random::<f64>() * (lateral + base) < lateral {
                    // area element grows linearly with distance from the apex
                    let f = rng.random::<f64>().sqrt();
                    let ang = rng.random::<f64>() * 2.0 * PI;
                    Vec3::new(f * r * ang.cos(), a - f * 2.0 * a, f * r * ang.sin())
                } else {
                    let (x, z) = disk(r, rng);
                    Vec3::new(x, -a, z)
                }
            }
            PrimitiveKind::Capsule => {
                let r = h.x;
                let l = h.y - r;
                let side = 2.0 * PI * r * 2.0 * l;
                let caps = 4.0 * PI * r * r;
                if rng.random::<f64>() * (side + caps) < side {
                    let ang = rng.random::<f64>() * 2.0 * PI;
                    Vec3::new(r * ang.cos(), rng.random_range(-l..=l), r * ang.sin())
                } else {
                    let s = unit_sphere(rng) * r;
                    s + Vec3::new(0.0, if s.y >= 0.0 { l } else { -l }, 0.0)
                }
            }
            PrimitiveKind::LBracket => {
                let [a, b] = self.bracket_boxes();
                let area = |b: &(Vec3, Vec3)| {
                    let e = b.1 - b.0;
                    2.0 * (e.x * e.y + e.y * e.z + e.x * e.z)
                };
                let (wa, wb) = (area(&a), area(&b));
                loop {
                    // a point of one box's surface belongs to the union surface unless
                    // the other box covers it; shared coplanar faces count once (via b)
                    if rng.random::<f64>() * (wa + wb) < wa {
                        let p = sample_box_surface(&a.0, &a.1, rng);
                        if sd_aabb(&p, &b) > SHARED_FACE_TOL {
                            return p;
                        }
                    } else {
                        let p = sample_box_surface(&b.0, &b.1, rng);
                        if sd_aabb(&p, &a) >= -SHARED_FACE_TOL {
                            return p;
                        }
                    }
                }
            }
        }
    }
}

/// `n` area-uniform surface points, transformed into the target frame by
/// `pose`.
pub fn sample_surface(shape: &PrimitiveShape, pose: &Pose, n: usize, seed: u64) -> PointSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts = shape.sample_canonical(n, &mut rng).iter().map(|p| pose.transform_point(p)).collect();
    PointSet::new(pts).expect("finite surface samples")
}

fn unit_sphere<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    loop {
        let v = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        let n = v.norm();
        if n > 1e-9 {
            return v / n;
        }
    }
}

fn disk<R: Rng + ?Sized>(r: f64, rng: &mut R) -> (f64, f64) {
    let rho = r * rng.random::<f64>().sqrt();
    let a = rng.random::<f64>() * 2.0 * PI;
    (rho * a.cos(), rho * a.sin())
}

fn sample_box_surface<R: Rng + ?Sized>(lo: &Vec3, hi: &Vec3, rng: &mut R) -> Vec3 {
    let e = hi - lo;
    let areas = [e.y * e.z, e.x * e.z, e.x * e.y];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.random::<f64>() * total;
    let mut axis = 2;
    for (k, a) in areas.iter().enumerate() {
        if pick < *a {
            axis = k;
            break;
        }
        pick -= a;
    }
    let mut p = Vec3::zeros();
    for k in 0..3 {
        p[k] = lo[k] + rng.random::<f64>() * e[k];
    }
    p[axis] = if rng.random::<bool>() { hi[axis] } else { lo[axis] };
    p
}

fn sd_box(p: &Vec3, center: &Vec3, half: &Vec3) -> f64 {
    let q = (p - center).abs() - half;
    let outside = q.map(|v| v.max(0.0)).norm();
    outside + q.max().min(0.0)
}

fn sd_aabb(p: &Vec3, b: &(Vec3, Vec3)) -> f64 {
    sd_box(p, &((b.0 + b.1) * 0.5), &((b.1 - b.0) * 0.5))
}

fn sd_box2(x: f64, y: f64, hx: f64, hy: f64) -> f64 {
    let (qx, qy) = (x.abs() - hx, y.abs() - hy);
    qx.max(0.0).hypot(qy.max(0.0)) + qx.max(qy).min(0.0)
}

fn dist_to_segment(px: f64, py: f64, ax: f64, ay: f64, bx: f64, by: f64) -> f64 {
    let (dx, dy) = (bx - ax, by - ay);
    let t = (((px - ax) * dx + (py - ay) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    (px - ax - t * dx).hypot(py - ay - t * dy)
}

/// Cone profile in the (ρ, y) half-plane: base segment plus slant segment.
fn sd_cone(rho: f64, y: f64, r: f64, a: f64) -> f64 {
    let d = dist_to_segment(rho, y, 0.0, -a, r, -a).min(dist_to_segment(rho, y, r, -a, 0.0, a));
    let inside = y >= -a && y <= a && rho <= r * (a - y) / (2.0 * a);
    if inside {
        -d
    } else {
        d
    }
}

fn ray_aabb(o: &Vec3, d: &Vec3, lo: &Vec3, hi: &Vec3) -> Option<f64> {
    let (mut tmin, mut tmax) = (f64::NEG_INFINITY, f64::INFINITY);
    for k in 0..3 {
        if d[k].abs() < 1e-300 {
            if o[k] < lo[k] || o[k] > hi[k] {
                return None;
            }
        } else {
            let (a, b) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
            tmin = tmin.max(a.min(b));
            tmax = tmax.min(a.max(b));
        }
    }
    (tmax >= tmin && tmin > RAY_EPS).then_some(tmin)
}

/// Smallest root `> RAY_EPS` of `a t² + b t + c`, filtered by `accept`.
fn quadratic_hit(a: f64, b: f64, c: f64, accept: impl Fn(f64) -> bool) -> Option<f64> {
    if a.abs() < 1e-300 {
        if b.abs() < 1e-300 {
            return None;
        }
        let t = -c / b;
        return (t > RAY_EPS && accept(t)).then_some(t);
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let s = disc.sqrt();
    // numerically stable pair of roots
    let q = -0.5 * (b + b.signum() * s);
    let (mut t0, mut t1) = (q / a, if q != 0.0 { c / q } else { -b / (2.0 * a) });
    if t0 > t1 {
        std::mem::swap(&mut t0, &mut t1);
    }
    [t0, t1].into_iter().find(|&t| t > RAY_EPS && accept(t))
}

fn ray_sphere(o: &Vec3, d: &Vec3, c: &Vec3, r: f64) -> Option<f64> {
    let oc = o - c;
    quadratic_hit(d.dot(d), 2.0 * oc.dot(d), oc.dot(&oc) - r * r, |_| true)
}

fn min_opt(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (x, None) => x,
        (None, y) => y,
    }
}

fn ray_disk_y(o: &Vec3, d: &Vec3, y: f64, r: f64) -> Option<f64> {
    if d.y.abs() < 1e-300 {
        return None;
    }
    let t = (y - o.y) / d.y;
    let p = o + d * t;
    (t > RAY_EPS && p.x * p.x + p.z * p.z <= r * r).then_some(t)
}

/// Closed cylinder about y: radius `r`, `|y| ≤ hy`.
fn ray_cylinder(o: &Vec3, d: &Vec3, r: f64, hy: f64) -> Option<f64> {
    let side = quadratic_hit(
        d.x * d.x + d.z * d.z,
        2.0 * (o.x * d.x + o.z * d.z),
        o.x * o.x + o.z * o.z - r * r,
        |t| (o.y + t * d.y).abs() <= hy,
    );
    min_opt(side, min_opt(ray_disk_y(o, d, hy, r), ray_disk_y(o, d, -hy, r)))
}

/// Closed cone about y: base radius `r` at `y = -a`, apex at `y = +a`.
fn ray_cone(o: &Vec3, d: &Vec3, r: f64, a: f64) -> Option<f64> {
    let k = r / (2.0 * a);
    let k2 = k * k;
    let w = a - o.y;
    let lateral = quadratic_hit(
        d.x * d.x + d.z * d.z - k2 * d.y * d.y,
        2.0 * (o.x * d.x + o.z * d.z + k2 * w * d.y),
        o.x * o.x + o.z * o.z - k2 * w * w,
        |t| {
            let y = o.y + t * d.y;
            (-a..=a).contains(&y)
        },
    );
    min_opt(lateral, ray_disk_y(o, d, -a, r))
}
