//! Singular values, condition numbers and the closed-form five-bar indices.
//!
//! `condition_number` is the general SVD route. `fivebar_indices` evaluates
//! the closed forms for the two five-bar velocity matrices:
//!
//! - `A A^T = L2^2 [[1, cos(theta3 - theta4)], [cos(theta3 - theta4), 1]]`,
//!   eigenvalues `alpha = 1 -/+ |cos|`, so
//!   `kappa_A = sqrt(alpha_max / alpha_min) = (1 + |cos|) / |sin|`.
//! - `B` is diagonal; its singular values are the `beta_i = |sin(.)|`
//!   themselves, so `kappa_B = beta_max / beta_min`.
//!
//! The `(1 + |cos|) / |sin|` form is algebraically identical to the square
//! root of the eigenvalue ratio but keeps full relative accuracy close to
//! the singular locus, where `1 - |cos|` would cancel.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fivebar::{cross, PostureState};
use crate::model::FiveBarModel;

/// Relative floor under which the smallest singular value counts as zero.
pub const SINGULAR_FLOOR: f64 = 1e-14;

/// `|sin|` of a leg below which it counts as exactly singular.
pub const BETA_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditioningReport {
    pub sigma_max: f64,
    pub sigma_min: f64,
    /// `+inf` (serialized as `null`) at a singularity.
    #[serde(with = "inf_as_null")]
    pub kappa: f64,
    pub inv_kappa: f64,
}

impl ConditioningReport {
    fn from_extremes(sigma_max: f64, sigma_min: f64) -> Self {
        if sigma_max == 0.0 {
            return ConditioningReport {
                sigma_max,
                sigma_min,
                kappa: f64::INFINITY,
                inv_kappa: 0.0,
            };
        }
        let inv_kappa = (sigma_min / sigma_max).clamp(0.0, 1.0);
        let kappa = if sigma_min < SINGULAR_FLOOR * sigma_max {
            f64::INFINITY
        } else {
            sigma_max / sigma_min
        };
        ConditioningReport {
            sigma_max,
            sigma_min,
            kappa,
            inv_kappa,
        }
    }

    pub fn is_isotropic(&self, tol: f64) -> bool {
        self.kappa - 1.0 < tol
    }

    pub fn is_singular(&self, tol: f64) -> bool {
        self.inv_kappa < tol
    }
}

/// Condition number of an arbitrary real matrix through its SVD.
pub fn condition_number(m: &DMatrix<f64>) -> Result<ConditioningReport> {
    if m.is_empty() {
        return Err(Error::InvalidArgument("empty matrix".into()));
    }
    for (idx, v) in m.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                row: idx % m.nrows(),
                col: idx / m.nrows(),
            });
        }
    }
    let sv = m.singular_values();
    let max = sv.max();
    let min = sv.min();
    Ok(ConditioningReport::from_extremes(max, min))
}

/// Convenience wrapper for fixed-size matrices.
pub fn condition_number_of<const R: usize, const C: usize>(
    m: &nalgebra::SMatrix<f64, R, C>,
) -> Result<ConditioningReport> {
    condition_number(&DMatrix::from_column_slice(R, C, m.as_slice()))
}

/// Closed-form indices of the five-bar velocity matrices.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiveBarIndices {
    /// Eigenvalues of `A A^T / L2^2`, ascending.
    pub alpha1: f64,
    pub alpha2: f64,
    /// `|sin(theta3 - theta1)|`, `|sin(theta4 - theta2)|`.
    pub beta1: f64,
    pub beta2: f64,
    #[serde(with = "inf_as_null")]
    pub kappa_a: f64,
    #[serde(with = "inf_as_null")]
    pub kappa_b: f64,
    pub inv_kappa_a: f64,
    pub inv_kappa_b: f64,
    /// `cos(theta3 - theta4)`, kept for isotropy tests and contour folding.
    pub cos_a: f64,
}

impl FiveBarIndices {
    /// The worse of the two inverse condition numbers.
    pub fn inv_kappa_min(&self) -> f64 {
        self.inv_kappa_a.min(self.inv_kappa_b)
    }
}

fn ratio_report(small: f64, large: f64) -> (f64, f64) {
    if large == 0.0 || small < SINGULAR_FLOOR * large {
        let inv = if large == 0.0 { 0.0 } else { small / large };
        (f64::INFINITY, inv)
    } else {
        (large / small, small / large)
    }
}

/// Closed-form `kappa(A)` and `kappa(B)` at a posture.
pub fn fivebar_indices(posture: &PostureState, model: &FiveBarModel) -> FiveBarIndices {
    let u = posture.p - posture.c;
    let v = posture.p - posture.d;
    let nu = u.norm();
    let nv = v.norm();
    let (sin_a, cos_a) = if nu == 0.0 || nv == 0.0 {
        (0.0, 1.0)
    } else {
        (cross(u, v) / (nu * nv), u.dot(&v) / (nu * nv))
    };
    let abs_cos = cos_a.abs().min(1.0);
    let abs_sin = sin_a.abs().min(1.0);
    // alpha_min = 1 - |cos| = sin^2 / (1 + |cos|) without cancellation.
    let alpha_min = abs_sin * abs_sin / (1.0 + abs_cos);
    let alpha_max = 1.0 + abs_cos;
    let (kappa_a, inv_kappa_a) = if abs_sin == 0.0 || abs_sin < SINGULAR_FLOOR * alpha_max {
        (f64::INFINITY, abs_sin / alpha_max)
    } else {
        (alpha_max / abs_sin, abs_sin / alpha_max)
    };

    // Below the floor a leg is stretched or folded up to rounding; two snapped
    // legs would otherwise report a ratio of two rounding errors.
    let leg = |cross: f64, scale: f64| {
        let b = (cross.abs() / scale).min(1.0);
        if b < BETA_FLOOR {
            0.0
        } else {
            b
        }
    };
    let beta1 = leg(posture.leg_a_cross(model), model.l1 * model.l2);
    let beta2 = leg(posture.leg_b_cross(model), model.l3 * model.l4);
    let (kappa_b, inv_kappa_b) = ratio_report(beta1.min(beta2), beta1.max(beta2));

    FiveBarIndices {
        alpha1: alpha_min,
        alpha2: alpha_max,
        beta1,
        beta2,
        kappa_a,
        kappa_b,
        inv_kappa_a: inv_kappa_a.min(1.0),
        inv_kappa_b,
        cos_a,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostureFlag {
    ASingular,
    BSingular,
    AIsotropic,
    BIsotropic,
}

/// Posture class from the two matrices' conditioning.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "class", content = "flags")]
pub enum PostureClass {
    Regular,
    ASingular,
    BSingular,
    AIsotropic,
    BIsotropic,
    Double(BTreeSet<PostureFlag>),
}

impl PostureClass {
    pub fn flags(&self) -> BTreeSet<PostureFlag> {
        match self {
            PostureClass::Regular => BTreeSet::new(),
            PostureClass::ASingular => [PostureFlag::ASingular].into(),
            PostureClass::BSingular => [PostureFlag::BSingular].into(),
            PostureClass::AIsotropic => [PostureFlag::AIsotropic].into(),
            PostureClass::BIsotropic => [PostureFlag::BIsotropic].into(),
            PostureClass::Double(f) => f.clone(),
        }
    }

    pub fn label(&self) -> String {
        match self {
            PostureClass::Regular => "regular".into(),
            PostureClass::ASingular => "A_singular".into(),
            PostureClass::BSingular => "B_singular".into(),
            PostureClass::AIsotropic => "A_isotropic".into(),
            PostureClass::BIsotropic => "B_isotropic".into(),
            PostureClass::Double(f) => f
                .iter()
                .map(|x| match x {
                    PostureFlag::ASingular => "A_singular",
                    PostureFlag::BSingular => "B_singular",
                    PostureFlag::AIsotropic => "A_isotropic",
                    PostureFlag::BIsotropic => "B_isotropic",
                })
                .collect::<Vec<_>>()
                .join("+"),
        }
    }
}

/// Flags `inv_kappa < tol` as singular and `kappa - 1 < tol` as isotropic.
pub fn classify_posture(indices: &FiveBarIndices, tol: f64) -> Result<PostureClass> {
    if !(tol > 0.0 && tol < 0.5) {
        return Err(Error::InvalidArgument(format!(
            "classification tolerance {tol} outside (0, 0.5)"
        )));
    }
    let mut flags = BTreeSet::new();
    if indices.inv_kappa_a < tol {
        flags.insert(PostureFlag::ASingular);
    }
    if indices.inv_kappa_b < tol {
        flags.insert(PostureFlag::BSingular);
    }
    if indices.kappa_a - 1.0 < tol {
        flags.insert(PostureFlag::AIsotropic);
    }
    if indices.kappa_b - 1.0 < tol {
        flags.insert(PostureFlag::BIsotropic);
    }
    let mut it = flags.iter();
    Ok(match (it.next(), it.next()) {
        (None, _) => PostureClass::Regular,
        (Some(f), None) => match f {
            PostureFlag::ASingular => PostureClass::ASingular,
            PostureFlag::BSingular => PostureClass::BSingular,
            PostureFlag::AIsotropic => PostureClass::AIsotropic,
            PostureFlag::BIsotropic => PostureClass::BIsotropic,
        },
        _ => PostureClass::Double(flags),
    })
}

pub(crate) mod inf_as_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}
