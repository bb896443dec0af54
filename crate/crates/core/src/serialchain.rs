//! Twist Jacobian of serial chains and its length homogenization.
//!
//! Column `i` of the Jacobian is `(e_i; e_i x r_i)` for a revolute joint and
//! `(0; e_i)` for a prismatic one, where `e_i` is the current joint axis and
//! `r_i` runs from the joint anchor `O_i` to the tool point `P`. Axes and
//! anchors are posed by the product of the preceding joint motions.
//!
//! The conditioning length is the `L` minimizing `kappa` of the Jacobian
//! whose translational rows are divided by `L`. It is found on a coarse
//! log-spaced grid, then refined by golden-section search in `ln L`.

use std::cmp::Ordering;

use nalgebra::{DMatrix, Isometry3, Point3, Translation3, Unit, UnitQuaternion};
use rayon::prelude::*;

use crate::conditioning::condition_number;
use crate::error::{Error, Result};
use crate::minimize::{argmin, golden_section};
use crate::model::{JacobianShape, JointKind, JointVector, SerialChainModel, Vec3};

#[derive(Clone, Debug, PartialEq)]
pub struct TwistJacobian {
    pub shape: JacobianShape,
    /// Rotational rows first, translational rows below.
    pub matrix: DMatrix<f64>,
}

impl TwistJacobian {
    pub fn rotational(&self) -> DMatrix<f64> {
        let r = self.shape.rotational_rows();
        self.matrix.rows(0, r).into_owned()
    }

    pub fn translational(&self) -> DMatrix<f64> {
        let r = self.shape.rotational_rows();
        self.matrix
            .rows(r, self.shape.translational_rows())
            .into_owned()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HomogenizedJacobian {
    pub shape: JacobianShape,
    pub matrix: DMatrix<f64>,
    pub length: f64,
}

/// Joint axes, anchors and tool point at a configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ChainPose {
    pub axes: Vec<Vec3>,
    pub anchors: Vec<Vec3>,
    pub tool: Vec3,
}

fn check_dims(model: &SerialChainModel, q: &JointVector) -> Result<()> {
    if q.len() != model.dof() {
        return Err(Error::DimensionMismatch {
            expected: model.dof(),
            actual: q.len(),
        });
    }
    Ok(())
}

/// Forward kinematics of the chain by successive joint motions.
pub fn chain_pose(model: &SerialChainModel, q: &JointVector) -> Result<ChainPose> {
    check_dims(model, q)?;
    let mut t = Isometry3::identity();
    let mut axes = Vec::with_capacity(model.dof());
    let mut anchors = Vec::with_capacity(model.dof());
    for (joint, &qi) in model.joints.iter().zip(q.as_slice()) {
        let axis = t.rotation * joint.axis;
        let anchor = (t * Point3::from(joint.anchor)).coords;
        let motion = match joint.kind {
            JointKind::Revolute => {
                let rot = UnitQuaternion::from_axis_angle(&Unit::new_unchecked(axis), qi);
                Translation3::from(anchor) * Isometry3::from_parts(Translation3::identity(), rot)
                    * Translation3::from(-anchor)
            }
            JointKind::Prismatic => Isometry3::from_parts(
                Translation3::from(axis * qi),
                UnitQuaternion::identity(),
            ),
        };
        axes.push(axis);
        anchors.push(anchor);
        t = motion * t;
    }
    let tool = (t * Point3::from(model.tool)).coords;
    Ok(ChainPose {
        axes,
        anchors,
        tool,
    })
}

/// Twist Jacobian at `q`. Configurations outside the joint domain are
/// evaluated as given.
pub fn twist_jacobian(model: &SerialChainModel, q: &JointVector) -> Result<TwistJacobian> {
    let pose = chain_pose(model, q)?;
    let shape = model.shape;
    let mut m = DMatrix::zeros(shape.rows(), model.dof());
    for (i, joint) in model.joints.iter().enumerate() {
        let e = pose.axes[i];
        let (rot, lin) = match joint.kind {
            JointKind::Revolute => (e, e.cross(&(pose.tool - pose.anchors[i]))),
            JointKind::Prismatic => (Vec3::zeros(), e),
        };
        match shape {
            JacobianShape::Spatial => {
                m.fixed_view_mut::<3, 1>(0, i).copy_from(&rot);
                m.fixed_view_mut::<3, 1>(3, i).copy_from(&lin);
            }
            JacobianShape::Planar => {
                m[(0, i)] = rot.z;
                m[(1, i)] = lin.x;
                m[(2, i)] = lin.y;
            }
            JacobianShape::PlanarPositional => {
                m[(0, i)] = lin.x;
                m[(1, i)] = lin.y;
            }
        }
    }
    Ok(TwistJacobian { shape, matrix: m })
}

/// Divides the translational rows by `length`.
pub fn homogenize(j: &TwistJacobian, length: f64) -> Result<HomogenizedJacobian> {
    if !(length > 0.0 && length.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "characteristic length must be positive, got {length}"
        )));
    }
    let mut matrix = j.matrix.clone();
    let r = j.shape.rotational_rows();
    let inv = 1.0 / length;
    for mut row in matrix.row_iter_mut().skip(r) {
        row *= inv;
    }
    Ok(HomogenizedJacobian {
        shape: j.shape,
        matrix,
        length,
    })
}

/// Outcome of the per-posture length optimization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ConditioningLength {
    Optimal { length: f64, kappa: f64 },
    /// `kappa` does not depend on `L` (no rotational rows, no translational
    /// content, or only prismatic joints).
    Indifferent { kappa: f64 },
}

impl ConditioningLength {
    pub fn length(&self) -> Option<f64> {
        match self {
            ConditioningLength::Optimal { length, .. } => Some(*length),
            ConditioningLength::Indifferent { .. } => None,
        }
    }

    pub fn kappa(&self) -> f64 {
        match self {
            ConditioningLength::Optimal { kappa, .. } | ConditioningLength::Indifferent { kappa } => {
                *kappa
            }
        }
    }
}

/// Half-width of the search bracket in decades around the chain's length scale.
const BRACKET_DECADES: f64 = 3.0;
const COARSE_SAMPLES: usize = 41;
/// Relative tolerance on `L`, i.e. absolute tolerance on `ln L`.
pub const LENGTH_REL_TOL: f64 = 1e-8;

fn kappa_at(j: &TwistJacobian, log_len: f64) -> f64 {
    match homogenize(j, log_len.exp()).and_then(|h| condition_number(&h.matrix)) {
        Ok(r) => r.kappa,
        Err(_) => f64::INFINITY,
    }
}

/// Length scale used to centre the search: the longest `|r_i|`, or 1.
fn length_scale(j: &TwistJacobian) -> f64 {
    let t = j.translational();
    let s = t.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    if s > 0.0 {
        s
    } else {
        1.0
    }
}

/// Conditioning length of a Jacobian.
pub fn conditioning_length_of(j: &TwistJacobian) -> Result<ConditioningLength> {
    let rot = j.rotational();
    let trans = j.translational();
    let full = condition_number(&j.matrix)?;
    if rot.nrows() == 0 || rot.norm() == 0.0 || trans.norm() == 0.0 {
        return Ok(ConditioningLength::Indifferent { kappa: full.kappa });
    }
    let center = length_scale(j).ln();
    let span = BRACKET_DECADES * std::f64::consts::LN_10;
    let step = 2.0 * span / (COARSE_SAMPLES - 1) as f64;
    let grid: Vec<f64> = (0..COARSE_SAMPLES)
        .map(|k| kappa_at(j, center - span + step * k as f64))
        .collect();
    let best = argmin(&grid).expect("grid is non-empty");
    if !grid[best].is_finite() {
        return Err(Error::Singular(
            "Jacobian is rank deficient for every length".into(),
        ));
    }
    let (lo, hi) = grid
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &k| {
            (lo.min(k), hi.max(k))
        });
    if hi - lo <= 1e-12 * lo {
        // Flat objective (e.g. a single column): balance the two blocks.
        return Ok(ConditioningLength::Optimal {
            length: trans.norm() / rot.norm(),
            kappa: lo,
        });
    }
    let a = center - span + step * best.saturating_sub(1) as f64;
    let b = center - span + step * (best + 1).min(COARSE_SAMPLES - 1) as f64;
    let m = golden_section(|t| kappa_at(j, t), a, b, LENGTH_REL_TOL);
    Ok(ConditioningLength::Optimal {
        length: m.x.exp(),
        kappa: m.value,
    })
}

/// Conditioning length of the chain at posture `q`.
pub fn conditioning_length(model: &SerialChainModel, q: &JointVector) -> Result<ConditioningLength> {
    conditioning_length_of(&twist_jacobian(model, q)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CharacteristicLength {
    pub length: f64,
    pub kappa: f64,
    pub posture: JointVector,
}

/// Default number of grid points per joint for [`characteristic_length`].
pub const DEFAULT_GRID_PER_JOINT: usize = 25;

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (a + b)];
    }
    (0..n)
        .map(|k| a + (b - a) * k as f64 / (n - 1) as f64)
        .collect()
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Minimum conditioning length over a joint-space grid of `per_joint`
/// points per joint spanning each joint's limits.
///
/// Ties are broken by `kappa`, then `L`, then the posture in lexicographic
/// order, so the result does not depend on the number of worker threads.
pub fn characteristic_length(
    model: &SerialChainModel,
    per_joint: usize,
) -> Result<CharacteristicLength> {
    if per_joint == 0 {
        return Err(Error::InvalidArgument("grid needs at least one point per joint".into()));
    }
    let axes: Vec<Vec<f64>> = model
        .joints
        .iter()
        .map(|j| linspace(j.limits.min, j.limits.max, per_joint))
        .collect();
    let total = per_joint.pow(model.dof() as u32);
    let best = (0..total)
        .into_par_iter()
        .filter_map(|flat| {
            let mut k = flat;
            let q: Vec<f64> = axes
                .iter()
                .map(|ax| {
                    let v = ax[k % per_joint];
                    k /= per_joint;
                    v
                })
                .collect();
            let q = JointVector::new(q);
            match conditioning_length(model, &q) {
                Ok(ConditioningLength::Optimal { length, kappa }) if kappa.is_finite() => {
                    Some(CharacteristicLength {
                        length,
                        kappa,
                        posture: q,
                    })
                }
                _ => None,
            }
        })
        .min_by(|a, b| {
            a.kappa
                .total_cmp(&b.kappa)
                .then(a.length.total_cmp(&b.length))
                .then_with(|| lex_cmp(a.posture.as_slice(), b.posture.as_slice()))
        });
    best.ok_or_else(|| Error::Singular("every grid posture is singular or length-indifferent".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{JointLimits, SerialJoint};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn revolute_z(x: f64) -> SerialJoint {
        SerialJoint {
            kind: JointKind::Revolute,
            axis: Vec3::z(),
            anchor: Vec3::new(x, 0.0, 0.0),
            limits: JointLimits::new(-PI, PI, 0.0).unwrap(),
        }
    }

    fn planar_2r(shape: JacobianShape) -> SerialChainModel {
        SerialChainModel::new(
            shape,
            vec![revolute_z(0.0), revolute_z(1.0)],
            Vec3::new(2.0, 0.0, 0.0),
        )
        .unwrap()
    }

    #[test]
    fn two_link_positional_block() {
        let m = planar_2r(JacobianShape::PlanarPositional);
        let j = twist_jacobian(&m, &JointVector::new(vec![0.0, FRAC_PI_2])).unwrap();
        // d/dq of (cos q1 + cos(q1+q2), sin q1 + sin(q1+q2)) at (0, pi/2).
        let (q1, q12) = (0.0f64, FRAC_PI_2);
        let symbolic = DMatrix::from_row_slice(
            2,
            2,
            &[
                -q1.sin() - q12.sin(),
                -q12.sin(),
                q1.cos() + q12.cos(),
                q12.cos(),
            ],
        );
        assert_relative_eq!(j.matrix, symbolic, epsilon = 1e-15);
        let h = homogenize(&j, 2.0).unwrap();
        assert_relative_eq!(
            h.matrix,
            DMatrix::from_row_slice(2, 2, &[-0.5, -0.5, 0.5, 0.0]),
            epsilon = 1e-15
        );
    }

    #[test]
    fn single_joint_tangential_velocity() {
        let m = SerialChainModel::new(
            JacobianShape::PlanarPositional,
            vec![revolute_z(0.0)],
            Vec3::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        let j = twist_jacobian(&m, &JointVector::new(vec![0.0])).unwrap();
        assert_relative_eq!(j.matrix, DMatrix::from_column_slice(2, 1, &[0.0, 1.0]));
    }

    #[test]
    fn tool_at_anchor_zeroes_translation() {
        let m = SerialChainModel::new(
            JacobianShape::Spatial,
            vec![revolute_z(0.0), revolute_z(1.0)],
            Vec3::new(1.0, 0.0, 0.0),
        )
        .unwrap();
        let j = twist_jacobian(&m, &JointVector::new(vec![0.4, -1.2])).unwrap();
        assert!(j.translational().column(1).norm() < 1e-15);
        assert_relative_eq!(j.rotational().column(1).norm(), 1.0, epsilon = 1e-15);
    }

    #[test]
    fn prismatic_columns() {
        let m = SerialChainModel::new(
            JacobianShape::Spatial,
            vec![
                revolute_z(0.0),
                SerialJoint {
                    kind: JointKind::Prismatic,
                    axis: Vec3::x(),
                    anchor: Vec3::zeros(),
                    limits: JointLimits::new(0.0, 1.0, 0.0).unwrap(),
                },
            ],
            Vec3::new(0.5, 0.0, 0.0),
        )
        .unwrap();
        let j = twist_jacobian(&m, &JointVector::new(vec![FRAC_PI_2, 0.3])).unwrap();
        assert_eq!(j.rotational().column(1).norm(), 0.0);
        // The slide axis has been rotated onto +y by the first joint.
        assert_relative_eq!(
            Vec3::from_column_slice(j.translational().column(1).as_slice()),
            Vec3::y(),
            epsilon = 1e-15
        );
    }

    #[test]
    fn dimension_mismatch() {
        let m = planar_2r(JacobianShape::Planar);
        assert!(matches!(
            twist_jacobian(&m, &JointVector::new(vec![0.0])),
            Err(Error::DimensionMismatch { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn homogenize_contract() {
        let m = planar_2r(JacobianShape::Planar);
        let j = twist_jacobian(&m, &JointVector::new(vec![0.3, 0.7])).unwrap();
        assert_eq!(homogenize(&j, 1.0).unwrap().matrix, j.matrix);
        assert!(homogenize(&j, 0.0).is_err());
        assert!(homogenize(&j, -1.0).is_err());
        let h1 = homogenize(&j, 1.5).unwrap();
        let h2 = homogenize(&j, 3.0).unwrap();
        assert_eq!(h1.matrix.row(0), j.matrix.row(0));
        for r in 1..3 {
            for c in 0..2 {
                assert_relative_eq!(h2.matrix[(r, c)], 0.5 * h1.matrix[(r, c)], epsilon = 1e-16);
            }
        }
    }

    #[test]
    fn positional_rows_match_finite_differences() {
        let m = SerialChainModel::new(
            JacobianShape::Spatial,
            vec![
                SerialJoint {
                    kind: JointKind::Revolute,
                    axis: Vec3::z(),
                    anchor: Vec3::zeros(),
                    limits: JointLimits::full_turn(),
                },
                SerialJoint {
                    kind: JointKind::Revolute,
                    axis: Vec3::y(),
                    anchor: Vec3::new(0.0, 0.0, 0.4),
                    limits: JointLimits::full_turn(),
                },
                SerialJoint {
                    kind: JointKind::Prismatic,
                    axis: Vec3::x(),
                    anchor: Vec3::new(0.0, 0.0, 0.4),
                    limits: JointLimits::new(0.0, 0.5, 0.0).unwrap(),
                },
                SerialJoint {
                    kind: JointKind::Revolute,
                    axis: Vec3::x(),
                    anchor: Vec3::new(0.6, 0.0, 0.4),
                    limits: JointLimits::full_turn(),
                },
            ],
            Vec3::new(0.7, 0.1, 0.35),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let h = 1e-6;
        for _ in 0..500 {
            let q: Vec<f64> = (0..4).map(|_| rng.gen_range(-PI..PI)).collect();
            let j = twist_jacobian(&m, &JointVector::new(q.clone())).unwrap();
            for i in 0..4 {
                let mut qp = q.clone();
                let mut qm = q.clone();
                qp[i] += h;
                qm[i] -= h;
                let pp = chain_pose(&m, &JointVector::new(qp)).unwrap().tool;
                let pm = chain_pose(&m, &JointVector::new(qm)).unwrap().tool;
                let fd = (pp - pm) / (2.0 * h);
                for r in 0..3 {
                    assert!((fd[r] - j.matrix[(3 + r, i)]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn isotropic_fixture_has_unit_length() {
        // Columns (1, -1/L, 0) and (1, 1/L, 0) are orthogonal with equal norm
        // only at L = 1.
        let j = TwistJacobian {
            shape: JacobianShape::Planar,
            matrix: DMatrix::from_row_slice(3, 2, &[1.0, 1.0, -1.0, 1.0, 0.0, 0.0]),
        };
        match conditioning_length_of(&j).unwrap() {
            ConditioningLength::Optimal { length, kappa } => {
                assert!((length - 1.0).abs() < 1e-7, "{length}");
                assert!((kappa - 1.0).abs() < 1e-7, "{kappa}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn positional_only_chain_is_flagged() {
        let m = planar_2r(JacobianShape::PlanarPositional);
        let r = conditioning_length(&m, &JointVector::new(vec![0.0, FRAC_PI_2])).unwrap();
        assert!(matches!(r, ConditioningLength::Indifferent { .. }));
        assert_relative_eq!(r.kappa(), (3.0 + 5f64.sqrt()) / 2.0, max_relative = 1e-12);
    }

    #[test]
    fn spherical_wrist_is_flagged() {
        let axis = |v: Vec3| SerialJoint {
            kind: JointKind::Revolute,
            axis: v,
            anchor: Vec3::zeros(),
            limits: JointLimits::full_turn(),
        };
        let m = SerialChainModel::new(
            JacobianShape::Spatial,
            vec![axis(Vec3::z()), axis(Vec3::y()), axis(Vec3::x())],
            Vec3::zeros(),
        )
        .unwrap();
        let r = conditioning_length(&m, &JointVector::new(vec![0.1, 0.2, 0.3])).unwrap();
        assert!(matches!(r, ConditioningLength::Indifferent { .. }));
    }

    #[test]
    fn one_dof_chain_is_posture_invariant() {
        let m = SerialChainModel::new(
            JacobianShape::Planar,
            vec![revolute_z(0.0)],
            Vec3::new(0.7, 0.0, 0.0),
        )
        .unwrap();
        let c = characteristic_length(&m, 25).unwrap();
        for q in [-2.0, 0.0, 1.3] {
            let l = conditioning_length(&m, &JointVector::new(vec![q])).unwrap();
            assert_relative_eq!(l.length().unwrap(), c.length, max_relative = 1e-12);
        }
        assert_relative_eq!(c.length, 0.7, max_relative = 1e-12);
    }

    #[test]
    fn empty_grid_rejected() {
        let m = planar_2r(JacobianShape::Planar);
        assert!(characteristic_length(&m, 0).is_err());
    }
}
