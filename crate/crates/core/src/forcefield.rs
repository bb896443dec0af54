//! Force-feedback laws and their composition.
//!
//! Every law is a clamped piecewise-linear ramp:
//!
//! - joint limits: zero on `[q_min + delta, q_max - delta]`, growing linearly
//!   to `f_max` at the limit and saturating beyond it;
//! - conditioning: `f_max` for `1/kappa <= s_full`, zero for
//!   `1/kappa >= s_zero`, linear in between;
//! - workspace boundary: zero further than `delta_d` from the nearest reach
//!   annulus circle, `f_max` on it, full pull-back outside.
//!
//! Ramp thresholds `s_full = 0.1`, `s_zero = 0.3` and the viscosity
//! `c_max = 20 N s/m` are configuration defaults, not measured values.

use serde::{Deserialize, Serialize};

use crate::conditioning::fivebar_indices;
use crate::error::{Error, Result};
use crate::fivebar::{boundary_proximity, inverse_kinematics, PostureState, WorkingMode};
use crate::model::{FiveBarModel, JointLimits, Vec2};

/// Output limits of the force device.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForceEnvelope {
    /// N
    pub f_peak: f64,
    /// N
    pub f_continuous: f64,
    /// m
    pub position_resolution: f64,
}

impl Default for ForceEnvelope {
    fn default() -> Self {
        ForceEnvelope {
            f_peak: 6.4,
            f_continuous: 1.4,
            position_resolution: 2e-5,
        }
    }
}

impl ForceEnvelope {
    pub fn validate(&self) -> Result<()> {
        if !(self.f_continuous > 0.0 && self.f_continuous <= self.f_peak) {
            return Err(Error::InvalidArgument(format!(
                "envelope needs 0 < f_continuous ({}) <= f_peak ({})",
                self.f_continuous, self.f_peak
            )));
        }
        if !(self.position_resolution > 0.0) {
            return Err(Error::InvalidArgument(
                "position_resolution must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn bound(&self, mode: EnvelopeMode) -> f64 {
        match mode {
            EnvelopeMode::Peak => self.f_peak,
            EnvelopeMode::Continuous => self.f_continuous,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvelopeMode {
    #[default]
    Peak,
    Continuous,
}

/// Linear ramp from zero to `f_max` over `threshold`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RampLaw {
    pub threshold: f64,
    pub f_max: f64,
}

impl RampLaw {
    pub fn new(threshold: f64, f_max: f64) -> Result<Self> {
        if !(threshold > 0.0 && f_max > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "ramp needs positive threshold and f_max, got {threshold}, {f_max}"
            )));
        }
        Ok(RampLaw { threshold, f_max })
    }
}

/// Signed joint-space force along `+q`: positive near `q_min`, negative near
/// `q_max`, zero on `[q_min + threshold, q_max - threshold]`. The law's
/// threshold is normally the limits' own `threshold`.
pub fn joint_limit_force(q: f64, limits: &JointLimits, law: &RampLaw) -> f64 {
    let delta = law.threshold;
    if q >= limits.max {
        -law.f_max
    } else if q <= limits.min {
        law.f_max
    } else if q > limits.max - delta {
        -law.f_max * ((q - (limits.max - delta)) / delta).min(1.0)
    } else if q < limits.min + delta {
        law.f_max * (((limits.min + delta) - q) / delta).min(1.0)
    } else {
        0.0
    }
}

/// Thresholds of the conditioning ramp.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditioningLaw {
    /// Force is maximal at or below this `1/kappa`.
    pub s_full: f64,
    /// Force vanishes at or above this `1/kappa`.
    pub s_zero: f64,
    /// N
    pub f_max: f64,
}

impl Default for ConditioningLaw {
    fn default() -> Self {
        ConditioningLaw {
            s_full: 0.1,
            s_zero: 0.3,
            f_max: 6.4,
        }
    }
}

impl ConditioningLaw {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.s_full && self.s_full < self.s_zero && self.s_zero <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "conditioning thresholds need 0 < s_full ({}) < s_zero ({}) <= 1",
                self.s_full, self.s_zero
            )));
        }
        if !(self.f_max > 0.0) {
            return Err(Error::InvalidArgument("f_max must be positive".into()));
        }
        Ok(())
    }

    /// Fraction of full strength at `inv_kappa`, in `[0, 1]`.
    pub fn activation(&self, inv_kappa: f64) -> f64 {
        ((self.s_zero - inv_kappa) / (self.s_zero - self.s_full)).clamp(0.0, 1.0)
    }
}

/// Magnitude of the conditioning force.
pub fn conditioning_force(inv_kappa: f64, s_full: f64, s_zero: f64, f_max: f64) -> Result<f64> {
    let law = ConditioningLaw {
        s_full,
        s_zero,
        f_max,
    };
    law.validate()?;
    if !(0.0..=1.0).contains(&inv_kappa) {
        return Err(Error::InvalidArgument(format!(
            "1/kappa = {inv_kappa} outside [0, 1]"
        )));
    }
    Ok(f_max * law.activation(inv_kappa))
}

/// Repulsion from the reach-annulus boundary, along its inward normal.
pub fn boundary_force(model: &FiveBarModel, p: Vec2, delta_d: f64, f_max: f64) -> Result<Vec2> {
    if !(delta_d > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "boundary threshold must be positive, got {delta_d}"
        )));
    }
    let prox = boundary_proximity(model, p);
    let scale = if prox.distance >= delta_d {
        0.0
    } else if prox.distance <= 0.0 {
        1.0
    } else {
        1.0 - prox.distance / delta_d
    };
    Ok(prox.inward * (f_max * scale))
}

/// Unit direction in which actuated angle `i` (0 or 1) increases, i.e. the
/// normalized row of `B^-1 A`. At a leg singularity the row's sign is taken
/// from the working mode.
pub fn joint_gradient_direction(
    model: &FiveBarModel,
    posture: &PostureState,
    leg: usize,
    mode: WorkingMode,
) -> Vec2 {
    let (distal, b, s) = match leg {
        0 => (posture.p - posture.c, posture.leg_a_cross(model), mode.s1),
        _ => (posture.p - posture.d, posture.leg_b_cross(model), mode.s2),
    };
    let n = distal.norm();
    if n == 0.0 {
        return Vec2::zeros();
    }
    let sign = if b.abs() > 1e-12 * model.l1 * model.l2 {
        b.signum()
    } else {
        s.value()
    };
    distal * (sign / n)
}

/// Joint-limit forces of both actuated joints rendered at the end point.
/// Joints with a zero threshold exert no force.
pub fn joint_limit_cartesian(
    model: &FiveBarModel,
    posture: &PostureState,
    mode: WorkingMode,
    f_max: f64,
) -> Vec2 {
    let mut f = Vec2::zeros();
    for (leg, theta) in [(0, posture.theta1), (1, posture.theta2)] {
        let limits = &model.limits[leg];
        let Ok(law) = RampLaw::new(limits.threshold, f_max) else {
            continue;
        };
        let tau = joint_limit_force(theta, limits, &law);
        if tau != 0.0 {
            f += joint_gradient_direction(model, posture, leg, mode) * tau;
        }
    }
    f
}

/// Gradient of `min(1/kappa_A, 1/kappa_B)` with respect to `p` by central
/// differences, one-sided where a stencil point leaves the workspace.
pub fn inv_kappa_gradient(model: &FiveBarModel, p: Vec2, mode: WorkingMode, h: f64) -> Vec2 {
    let eval = |q: Vec2| {
        inverse_kinematics(model, q, mode).map(|s| fivebar_indices(&s, model).inv_kappa_min())
    };
    let center = eval(p);
    let mut g = Vec2::zeros();
    for axis in 0..2 {
        let mut dp = Vec2::zeros();
        dp[axis] = h;
        g[axis] = match (eval(p + dp), eval(p - dp), center) {
            (Some(fp), Some(fm), _) => (fp - fm) / (2.0 * h),
            (Some(fp), None, Some(fc)) => (fp - fc) / h,
            (None, Some(fm), Some(fc)) => (fc - fm) / h,
            _ => 0.0,
        };
    }
    g
}

/// Viscosity ramp: zero at `1/kappa >= s_zero`, `c_max` at `1/kappa <= s_full`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViscosityLaw {
    /// N s / m
    pub c_max: f64,
}

impl Default for ViscosityLaw {
    fn default() -> Self {
        ViscosityLaw { c_max: 20.0 }
    }
}

impl ViscosityLaw {
    pub fn coefficient(&self, inv_kappa: f64, thresholds: &ConditioningLaw) -> f64 {
        self.c_max * thresholds.activation(inv_kappa)
    }
}

/// Per-source contributions, in N.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ForceComponents {
    pub joint_limit: Vec2,
    pub boundary: Vec2,
    pub conditioning: Vec2,
    pub viscous: Vec2,
}

impl ForceComponents {
    pub fn sum(&self) -> Vec2 {
        self.joint_limit + self.boundary + self.conditioning + self.viscous
    }

    fn all_finite(&self) -> bool {
        [self.joint_limit, self.boundary, self.conditioning, self.viscous]
            .iter()
            .all(|v| v.x.is_finite() && v.y.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForceCommand {
    pub f: Vec2,
    pub components: ForceComponents,
    pub clamped: bool,
}

impl ForceCommand {
    pub fn zero() -> Self {
        ForceCommand {
            f: Vec2::zeros(),
            components: ForceComponents::default(),
            clamped: false,
        }
    }
}

/// Adds the viscous term `-c velocity` to the other sources and clamps the
/// total by norm to the active envelope bound, keeping its direction.
/// Non-finite sources are dropped.
pub fn compose_force(
    joint_limit: Vec2,
    boundary: Vec2,
    conditioning: Vec2,
    mode: EnvelopeMode,
    env: &ForceEnvelope,
    velocity: Vec2,
    viscosity: f64,
) -> ForceCommand {
    let finite = |v: Vec2| {
        if v.x.is_finite() && v.y.is_finite() {
            v
        } else {
            Vec2::zeros()
        }
    };
    let components = ForceComponents {
        joint_limit: finite(joint_limit),
        boundary: finite(boundary),
        conditioning: finite(conditioning),
        viscous: finite(-velocity * viscosity),
    };
    debug_assert!(components.all_finite());
    let total = components.sum();
    let bound = env.bound(mode);
    let norm = total.norm();
    let (f, clamped) = if norm > bound {
        let mut f = total * (bound / norm);
        // Rounding may leave the rescaled norm an ulp above the bound.
        while f.norm() > bound {
            f *= 1.0 - f64::EPSILON;
        }
        (f, true)
    } else {
        (total, false)
    };
    ForceCommand {
        f,
        components,
        clamped,
    }
}
