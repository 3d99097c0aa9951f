//! Per-axis rotational symmetry labels and the finite rotation group they
//! generate.

use serde::{Deserialize, Serialize};

use super::{GeometryError, RotationMatrix};

/// Frobenius distance under which two group elements are treated as equal.
pub const DEDUP_TOLERANCE: f64 = 1e-6;
/// Largest closure `symmetry_rotations` will build.
pub const GROUP_CAP: usize = 10_000;
/// Discretization of a continuous symmetry axis used for evaluation (1° step).
pub const EVAL_CONTINUOUS_SAMPLES: usize = 360;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AxisSymmetry {
    None,
    Rot90,
    Rot180,
    Continuous,
}

/// Symmetry class of an object, one entry per canonical axis (x, y, z).
/// Two continuous axes make the object a sphere, which has its own variant.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SymmetrySpec {
    Axes([AxisSymmetry; 3]),
    Spherical,
}

impl SymmetrySpec {
    pub fn new(per_axis: [AxisSymmetry; 3]) -> Result<Self, GeometryError> {
        let spec = SymmetrySpec::Axes(per_axis);
        spec.validate()?;
        Ok(spec)
    }

    pub fn none() -> Self {
        SymmetrySpec::Axes([AxisSymmetry::None; 3])
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        match self {
            SymmetrySpec::Axes(axes) => {
                if axes.iter().filter(|a| **a == AxisSymmetry::Continuous).count() > 1 {
                    Err(GeometryError::InvalidSymmetry)
                } else {
                    Ok(())
                }
            }
            SymmetrySpec::Spherical => Ok(()),
        }
    }
}

fn generators(axes: &[AxisSymmetry; 3], continuous_samples: usize) -> Vec<RotationMatrix> {
    use std::f64::consts::TAU;
    axes.iter()
        .enumerate()
        .filter_map(|(axis, sym)| {
            let order = match sym {
                AxisSymmetry::None => return None,
                AxisSymmetry::Rot90 => 4,
                AxisSymmetry::Rot180 => 2,
                AxisSymmetry::Continuous => continuous_samples,
            };
            Some(RotationMatrix::about_axis(axis, TAU / order as f64))
        })
        .collect()
}

fn contains(set: &[RotationMatrix], r: &RotationMatrix) -> bool {
    let m = r.matrix();
    set.iter().any(|s| {
        let d = s.matrix() - m;
        // cheap reject on one entry before the full norm
        d[(0, 0)].abs() < DEDUP_TOLERANCE && d.norm() < DEDUP_TOLERANCE
    })
}

/// Closure under composition of the per-axis generators, built breadth-first
/// with deduplication at [`DEDUP_TOLERANCE`]. The identity is always the
/// first element.
pub fn symmetry_rotations(
    spec: &SymmetrySpec,
    continuous_samples: usize,
) -> Result<Vec<RotationMatrix>, GeometryError> {
    spec.validate()?;
    let axes = match spec {
        SymmetrySpec::Axes(a) => a,
        SymmetrySpec::Spherical => return Err(GeometryError::UnboundedSymmetry),
    };
    if axes.contains(&AxisSymmetry::Continuous) && continuous_samples < 4 {
        return Err(GeometryError::DegenerateInput("continuous_samples must be >= 4"));
    }
    let gens = generators(axes, continuous_samples);
    let mut group = vec![RotationMatrix::identity()];
    let mut frontier = 0;
    while frontier < group.len() {
        let g = group[frontier];
        frontier += 1;
        for h in &gens {
            // re-orthonormalize drift from long products
            let candidate = reorthonormalize(&g.compose(h));
            if !contains(&group, &candidate) {
                if group.len() == GROUP_CAP {
                    return Err(GeometryError::GroupTooLarge { cap: GROUP_CAP });
                }
                group.push(candidate);
            }
        }
    }
    Ok(group)
}

fn reorthonormalize(r: &RotationMatrix) -> RotationMatrix {
    super::rot6d_to_matrix(&r.to_rot6d()).unwrap_or(*r)
}

/// Smallest geodesic angle, in degrees, between `pred` and any
/// symmetry-equivalent version `gt · S` of the ground truth.
pub fn min_symmetric_rotation_error(
    pred: &RotationMatrix,
    gt: &RotationMatrix,
    spec: &SymmetrySpec,
    continuous_samples: usize,
) -> Result<f64, GeometryError> {
    if *spec == SymmetrySpec::Spherical {
        return Ok(0.0);
    }
    let group = symmetry_rotations(spec, continuous_samples)?;
    Ok(min_error_over(pred, gt, &group))
}

/// Same as [`min_symmetric_rotation_error`] with a precomputed group.
pub fn min_error_over(pred: &RotationMatrix, gt: &RotationMatrix, group: &[RotationMatrix]) -> f64 {
    group
        .iter()
        .map(|s| pred.angle_to(&gt.compose(s)))
        .fold(f64::INFINITY, f64::min)
        .to_degrees()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{random_rotation, Mat3};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use AxisSymmetry::*;

    /// Independent oracle: enumerate all words of the generators up to a
    /// length bound and dedupe, no BFS bookkeeping.
    fn word_closure(gens: &[RotationMatrix], max_len: usize) -> Vec<Mat3> {
        let mut out: Vec<Mat3> = vec![Mat3::identity()];
        let mut layer: Vec<Mat3> = vec![Mat3::identity()];
        for _ in 0..max_len {
            let mut next = Vec::new();
            for w in &layer {
                for g in gens {
                    let m = w * g.matrix();
                    if !out.iter().any(|o| (o - m).norm() < 1e-6) {
                        out.push(m);
                        next.push(m);
                    }
                }
            }
            layer = next;
        }
        out
    }

    #[test]
    fn no_symmetry_is_identity_only() {
        let g = symmetry_rotations(&SymmetrySpec::none(), 360).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(*g[0].matrix(), Mat3::identity());
    }

    #[test]
    fn single_flip_has_two_elements() {
        let g = symmetry_rotations(&SymmetrySpec::new([None, Rot180, None]).unwrap(), 360).unwrap();
        assert_eq!(g.len(), 2);
        let ry = RotationMatrix::about_y(std::f64::consts::PI);
        assert!(g[1].frobenius_distance(&ry) < 1e-12);
    }

    #[test]
    fn cube_group_has_24_elements() {
        let spec = SymmetrySpec::new([Rot90, Rot90, Rot90]).unwrap();
        let g = symmetry_rotations(&spec, 360).unwrap();
        assert_eq!(g.len(), 24);
        let oracle = word_closure(&generators(&[Rot90, Rot90, Rot90], 360), 12);
        assert_eq!(oracle.len(), 24);
        for m in &oracle {
            assert!(g.iter().any(|r| (r.matrix() - m).norm() < 1e-6));
        }
    }

    #[test]
    fn groups_are_closed_under_composition_and_inverse() {
        for axes in [[Rot180, Rot180, Rot180], [Rot90, None, Rot180], [Rot180, Continuous, None], [None, Rot90, None]] {
            let g = symmetry_rotations(&SymmetrySpec::new(axes).unwrap(), 12).unwrap();
            for a in &g {
                assert!(contains(&g, &a.transpose()));
                for b in &g {
                    assert!(contains(&g, &a.compose(b)), "{axes:?} not closed");
                }
            }
        }
    }

    #[test]
    fn continuous_with_flip_forms_dihedral_group() {
        let g = symmetry_rotations(&SymmetrySpec::new([Rot180, Continuous, None]).unwrap(), 36).unwrap();
        assert_eq!(g.len(), 72);
    }

    #[test]
    fn incompatible_axes_hit_the_cap() {
        // a 1° rotation about y mixed with a quarter turn about x is dense in SO(3)
        let spec = SymmetrySpec::new([Rot90, Continuous, None]).unwrap();
        assert_eq!(symmetry_rotations(&spec, 360), Err(GeometryError::GroupTooLarge { cap: GROUP_CAP }));
    }

    #[test]
    fn two_continuous_axes_rejected() {
        assert_eq!(SymmetrySpec::new([Continuous, Continuous, None]), Err(GeometryError::InvalidSymmetry));
    }

    #[test]
    fn symmetric_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let gt = random_rotation(&mut rng);
        for spec in [SymmetrySpec::none(), SymmetrySpec::new([Rot90, Rot90, Rot90]).unwrap(), SymmetrySpec::Spherical] {
            assert!(min_symmetric_rotation_error(&gt, &gt, &spec, 360).unwrap() < 1e-5);
        }
        let flipped = gt.compose(&RotationMatrix::about_y(std::f64::consts::PI));
        let spec = SymmetrySpec::new([None, Rot180, None]).unwrap();
        assert!(min_symmetric_rotation_error(&flipped, &gt, &spec, 360).unwrap() < 1e-5);
        assert!(min_symmetric_rotation_error(&flipped, &gt, &SymmetrySpec::none(), 360).unwrap() > 179.9);

        let tilted = gt.compose(&RotationMatrix::about_y(10f64.to_radians()));
        let spec = SymmetrySpec::new([None, Continuous, None]).unwrap();
        assert!(min_symmetric_rotation_error(&tilted, &gt, &spec, 360).unwrap() <= 0.5);
    }
}
