//! Kinematics of the symmetric five-bar linkage.
//!
//! Conventions:
//! - `theta1`, `theta2` are the actuated angles at `base_a` and `base_b`;
//!   elbows are `c = base_a + L1 (cos theta1, sin theta1)` and
//!   `d = base_b + L3 (cos theta2, sin theta2)`.
//! - `theta3`, `theta4` are the absolute directions of the distal links:
//!   `p - c = L2 (cos theta3, sin theta3)`, `p - d = L4 (cos theta4, sin theta4)`.
//! - The velocity relation is `A p_dot = B theta_dot`, obtained by
//!   differentiating the two loop-closure constraints `|p - c|^2 = L2^2`,
//!   `|p - d|^2 = L4^2`.
//! - The working mode is the sign pair of `sin(theta3 - theta1)` and
//!   `sin(theta4 - theta2)` (one inverse-kinematics branch per leg). The
//!   assembly is the sign of `det A`, which picks one of the two
//!   forward-kinematics solutions.

use std::fmt;
use std::str::FromStr;

use nalgebra::Matrix2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FiveBarModel, Vec2};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Sign {
    #[serde(rename = "+")]
    Plus,
    #[serde(rename = "-")]
    Minus,
}

impl Sign {
    pub fn of(v: f64) -> Sign {
        if v < 0.0 {
            Sign::Minus
        } else {
            Sign::Plus
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Sign::Plus => 1.0,
            Sign::Minus => -1.0,
        }
    }

    pub fn flip(self) -> Sign {
        match self {
            Sign::Plus => Sign::Minus,
            Sign::Minus => Sign::Plus,
        }
    }

    fn as_char(self) -> char {
        match self {
            Sign::Plus => '+',
            Sign::Minus => '-',
        }
    }

    fn from_char(c: char) -> Option<Sign> {
        match c {
            '+' => Some(Sign::Plus),
            '-' => Some(Sign::Minus),
            _ => None,
        }
    }
}

/// Inverse-kinematics branch: signs of `sin(theta3 - theta1)` and
/// `sin(theta4 - theta2)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WorkingMode {
    pub s1: Sign,
    pub s2: Sign,
}

impl WorkingMode {
    pub const ALL: [WorkingMode; 4] = [
        WorkingMode::new(Sign::Plus, Sign::Plus),
        WorkingMode::new(Sign::Plus, Sign::Minus),
        WorkingMode::new(Sign::Minus, Sign::Plus),
        WorkingMode::new(Sign::Minus, Sign::Minus),
    ];

    pub const fn new(s1: Sign, s2: Sign) -> Self {
        WorkingMode { s1, s2 }
    }

    /// Mode of the mirror-image posture under reflection about the
    /// perpendicular bisector of the bases.
    pub fn mirrored(self) -> Self {
        WorkingMode::new(self.s2.flip(), self.s1.flip())
    }

    /// File-name friendly tag, e.g. `pm` for `+-`.
    pub fn slug(self) -> String {
        let c = |s: Sign| if s == Sign::Plus { 'p' } else { 'm' };
        format!("{}{}", c(self.s1), c(self.s2))
    }
}

impl fmt::Display for WorkingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.s1.as_char(), self.s2.as_char())
    }
}

impl FromStr for WorkingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut chars = s.chars();
        match (
            chars.next().and_then(Sign::from_char),
            chars.next().and_then(Sign::from_char),
            chars.next(),
        ) {
            (Some(s1), Some(s2), None) => Ok(WorkingMode::new(s1, s2)),
            _ => Err(Error::InvalidArgument(format!(
                "working mode must be two signs like `+-`, got `{s}`"
            ))),
        }
    }
}

/// Full posture of the linkage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PostureState {
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
    pub theta4: f64,
    pub p: Vec2,
    pub c: Vec2,
    pub d: Vec2,
    /// `None` when a leg is fully stretched or folded and the sign is undefined.
    pub mode: Option<WorkingMode>,
    pub on_boundary: bool,
}

impl PostureState {
    /// `L1 L2 sin(theta3 - theta1)` from the link vectors.
    pub fn leg_a_cross(&self, model: &FiveBarModel) -> f64 {
        cross(self.c - model.base_a, self.p - self.c)
    }

    /// `L3 L4 sin(theta4 - theta2)` from the link vectors.
    pub fn leg_b_cross(&self, model: &FiveBarModel) -> f64 {
        cross(self.d - model.base_b, self.p - self.d)
    }

    /// Sign of `det A`.
    pub fn assembly(&self) -> Sign {
        Sign::of(cross(self.p - self.c, self.p - self.d))
    }
}

/// `A`, `B` and the quarter-turn matrix `E`.
#[derive(Clone, Debug, PartialEq)]
pub struct VelocityMatrices {
    pub a: Matrix2<f64>,
    pub b: Matrix2<f64>,
    pub e: Matrix2<f64>,
}

/// Rotation by +pi/2.
pub fn quarter_turn() -> Matrix2<f64> {
    Matrix2::new(0.0, -1.0, 1.0, 0.0)
}

#[inline]
pub(crate) fn cross(u: Vec2, v: Vec2) -> f64 {
    u.x * v.y - u.y * v.x
}

#[inline]
fn unit(angle: f64) -> Vec2 {
    Vec2::new(angle.cos(), angle.sin())
}

#[inline]
fn perp(v: Vec2) -> Vec2 {
    Vec2::new(-v.y, v.x)
}

fn angle_of(v: Vec2) -> f64 {
    v.y.atan2(v.x)
}

/// Sign of a leg's cross term, or `None` when it vanishes to rounding.
fn strict_sign(cross: f64, scale: f64) -> Option<Sign> {
    if cross.abs() <= 1e-12 * scale {
        None
    } else {
        Some(Sign::of(cross))
    }
}

fn assemble(model: &FiveBarModel, c: Vec2, d: Vec2, p: Vec2, snapped: bool) -> PostureState {
    let sa = strict_sign(cross(c - model.base_a, p - c), model.l1 * model.l2);
    let sb = strict_sign(cross(d - model.base_b, p - d), model.l3 * model.l4);
    let mode = match (sa, sb) {
        (Some(s1), Some(s2)) if !snapped => Some(WorkingMode::new(s1, s2)),
        _ => None,
    };
    PostureState {
        theta1: model.limits[0].wrap_angle(angle_of(c - model.base_a)),
        theta2: model.limits[1].wrap_angle(angle_of(d - model.base_b)),
        theta3: angle_of(p - c),
        theta4: angle_of(p - d),
        p,
        c,
        d,
        mode,
        on_boundary: mode.is_none(),
    }
}

/// Both forward-kinematics solutions at `(theta1, theta2)`, indexed by the
/// sign of `det A`. Empty when the distal circles do not meet.
pub fn forward_kinematics_solutions(
    model: &FiveBarModel,
    theta1: f64,
    theta2: f64,
) -> Vec<PostureState> {
    [Sign::Plus, Sign::Minus]
        .into_iter()
        .filter_map(|s| forward_kinematics(model, theta1, theta2, s))
        .collect()
}

/// Forward kinematics on the given assembly branch.
///
/// Returns `None` when `|C - D|` is outside `[|L2 - L4|, L2 + L4]`.
pub fn forward_kinematics(
    model: &FiveBarModel,
    theta1: f64,
    theta2: f64,
    assembly: Sign,
) -> Option<PostureState> {
    let c = model.base_a + model.l1 * unit(theta1);
    let d = model.base_b + model.l3 * unit(theta2);
    let cd = d - c;
    let dist = cd.norm();
    let tol = model.boundary_tol();
    let (r1, r2) = (model.l2, model.l4);
    if dist > r1 + r2 + tol || dist < (r1 - r2).abs() - tol || dist <= tol {
        return None;
    }
    let e = cd / dist;
    let a = (dist * dist + r1 * r1 - r2 * r2) / (2.0 * dist);
    let h2 = r1 * r1 - a * a;
    let snapped = dist > r1 + r2 - tol || dist < (r1 - r2).abs() + tol;
    let h = if snapped { 0.0 } else { h2.max(0.0).sqrt() };
    let p = c + a * e + assembly.value() * h * perp(e);
    Some(assemble(model, c, d, p, false))
}

/// Forward kinematics restricted to a working mode. Postures with an
/// undefined mode (a leg at a singularity) are accepted for any mode.
pub fn forward_kinematics_in_mode(
    model: &FiveBarModel,
    theta1: f64,
    theta2: f64,
    mode: WorkingMode,
    assembly: Sign,
) -> Option<PostureState> {
    let posture = forward_kinematics(model, theta1, theta2, assembly)?;
    match posture.mode {
        Some(m) if m != mode => None,
        _ => Some(posture),
    }
}

/// Elbow of one leg: the circle of radius `proximal` about `base` meets the
/// circle of radius `distal` about `p`. `s` is the requested sign of the
/// leg's `sin(distal - proximal)`. Returns the elbow and whether the leg was
/// snapped onto a stretched/folded configuration.
fn leg_elbow(
    base: Vec2,
    proximal: f64,
    distal: f64,
    p: Vec2,
    s: Sign,
    tol: f64,
) -> Option<(Vec2, bool)> {
    let bp = p - base;
    let r = bp.norm();
    let outer = proximal + distal;
    let inner = (proximal - distal).abs();
    if r > outer + tol || r < inner - tol {
        return None;
    }
    if r <= tol {
        // p on the base with equal links: every elbow direction works.
        return Some((base + Vec2::new(proximal, 0.0), true));
    }
    let e = bp / r;
    let a = (r * r + proximal * proximal - distal * distal) / (2.0 * r);
    let snapped = r >= outer - tol || (inner > 0.0 && r <= inner + tol);
    let h = if snapped {
        0.0
    } else {
        (proximal * proximal - a * a).max(0.0).sqrt()
    };
    // cross(elbow - base, p - elbow) = -sigma * h * r, so sigma = -s.
    let sigma = -s.value();
    let a = if snapped { a.signum() * proximal } else { a };
    Some((base + a * e + sigma * h * perp(e), snapped))
}

/// Inverse kinematics in a working mode.
///
/// Points within `1e-9 L1` of a reach-annulus circle are snapped onto the
/// singular (stretched or folded) leg and flagged `on_boundary`.
pub fn inverse_kinematics(
    model: &FiveBarModel,
    p: Vec2,
    mode: WorkingMode,
) -> Option<PostureState> {
    let tol = model.boundary_tol();
    let (c, snap_a) = leg_elbow(model.base_a, model.l1, model.l2, p, mode.s1, tol)?;
    let (d, snap_b) = leg_elbow(model.base_b, model.l3, model.l4, p, mode.s2, tol)?;
    let mut posture = assemble(model, c, d, p, snap_a || snap_b);
    if !posture.on_boundary {
        // Numerically the sign follows from construction; keep the request.
        posture.mode = Some(mode);
    }
    Some(posture)
}

/// Velocity matrices at a posture. `B` is built from the link cross
/// products, which equal `L1 L2 sin(theta3 - theta1)` and
/// `L3 L4 sin(theta4 - theta2)`.
pub fn velocity_matrices(model: &FiveBarModel, posture: &PostureState) -> VelocityMatrices {
    let u = posture.p - posture.c;
    let v = posture.p - posture.d;
    VelocityMatrices {
        a: Matrix2::new(u.x, u.y, v.x, v.y),
        b: Matrix2::new(
            posture.leg_a_cross(model),
            0.0,
            0.0,
            posture.leg_b_cross(model),
        ),
        e: quarter_turn(),
    }
}

/// Finite-difference step along `theta_dot` used by [`velocity_relation_check`].
pub const VELOCITY_FD_STEP: f64 = 1e-6;

/// `|A p_dot - B theta_dot|` where `p_dot` is a fourth-order finite difference of
/// forward kinematics along `theta_dot` on the posture's assembly branch.
pub fn velocity_relation_check(
    model: &FiveBarModel,
    posture: &PostureState,
    theta_dot: [f64; 2],
) -> Result<f64> {
    let u = posture.p - posture.c;
    let v = posture.p - posture.d;
    let det_rel = cross(u, v).abs() / (u.norm() * v.norm());
    if !(det_rel > 1e-9) {
        return Err(Error::Singular(
            "A is singular (theta3 - theta4 = k pi); p_dot is undetermined".into(),
        ));
    }
    let td = nalgebra::Vector2::new(theta_dot[0], theta_dot[1]);
    if td.norm() == 0.0 {
        return Ok(0.0);
    }
    let h = VELOCITY_FD_STEP;
    let assembly = posture.assembly();
    let at = |t: f64| {
        forward_kinematics(
            model,
            posture.theta1 + t * td.x,
            posture.theta2 + t * td.y,
            assembly,
        )
        .map(|s| s.p)
    };
    let central = |h: f64| match (at(h), at(-h)) {
        (Some(a), Some(b)) => Ok((a - b) / (2.0 * h)),
        _ => Err(Error::Singular(
            "finite-difference stencil leaves the assembly domain".into(),
        )),
    };
    // Richardson extrapolation of two central differences.
    let p_dot = (central(h / 2.0)? * 4.0 - central(h)?) / 3.0;
    let m = velocity_matrices(model, posture);
    Ok((m.a * p_dot - m.b * td).norm())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Containment {
    Inside,
    Boundary,
    Outside,
}

/// Membership in the intersection of the two reach annuli.
pub fn workspace_contains(model: &FiveBarModel, p: Vec2) -> Containment {
    let tol = model.boundary_tol();
    let (inner, outer) = model.reach();
    let mut on_edge = false;
    for base in [model.base_a, model.base_b] {
        let r = (p - base).norm();
        if r > outer + tol || r < inner - tol {
            return Containment::Outside;
        }
        if (r - outer).abs() <= tol || (inner > 0.0 && (r - inner).abs() <= tol) {
            on_edge = true;
        }
    }
    if on_edge {
        Containment::Boundary
    } else {
        Containment::Inside
    }
}

/// Nearest reach-annulus constraint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryProximity {
    /// Signed distance to the nearest annulus circle, positive inside.
    pub distance: f64,
    /// Unit vector along which the distance increases (toward the interior).
    pub inward: Vec2,
}

/// Signed distance from `p` to the workspace boundary with its inward
/// direction. Outside the workspace the most violated constraint wins.
pub fn boundary_proximity(model: &FiveBarModel, p: Vec2) -> BoundaryProximity {
    let (inner, outer) = model.reach();
    let mut best = BoundaryProximity {
        distance: f64::INFINITY,
        inward: Vec2::zeros(),
    };
    for base in [model.base_a, model.base_b] {
        let rel = p - base;
        let r = rel.norm();
        let radial = if r > 0.0 { rel / r } else { Vec2::x() };
        let outer_gap = outer - r;
        if outer_gap < best.distance {
            best = BoundaryProximity {
                distance: outer_gap,
                inward: -radial,
            };
        }
        if inner > 0.0 {
            let inner_gap = r - inner;
            if inner_gap < best.distance {
                best = BoundaryProximity {
                    distance: inner_gap,
                    inward: radial,
                };
            }
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::JointLimits;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn model_685() -> FiveBarModel {
        FiveBarModel::new(
            6.0,
            8.0,
            5.0,
            [JointLimits::full_turn(), JointLimits::full_turn()],
        )
        .unwrap()
    }

    /// Independent circle-circle intersection by solving for the two points
    /// equidistant in the textbook way, both returned.
    fn circle_oracle(c0: Vec2, r0: f64, c1: Vec2, r1: f64) -> Vec<Vec2> {
        let d = (c1 - c0).norm();
        let a = (r0 * r0 - r1 * r1 + d * d) / (2.0 * d);
        let h = (r0 * r0 - a * a).sqrt();
        let m = c0 + a * (c1 - c0) / d;
        vec![
            Vec2::new(m.x + h * (c1.y - c0.y) / d, m.y - h * (c1.x - c0.x) / d),
            Vec2::new(m.x - h * (c1.y - c0.y) / d, m.y + h * (c1.x - c0.x) / d),
        ]
    }

    #[test]
    fn forward_kinematics_right_angle_example() {
        let m = model_685();
        let oracle = circle_oracle(Vec2::new(0.0, 8.0), 5.0, Vec2::new(6.0, 8.0), 5.0);
        assert!(oracle.iter().any(|p| (p - Vec2::new(3.0, 12.0)).norm() < 1e-12));
        assert!(oracle.iter().any(|p| (p - Vec2::new(3.0, 4.0)).norm() < 1e-12));

        let up = forward_kinematics(&m, FRAC_PI_2, FRAC_PI_2, Sign::Plus).unwrap();
        assert_relative_eq!(up.p, Vec2::new(3.0, 12.0), epsilon = 1e-12);
        let down = forward_kinematics(&m, FRAC_PI_2, FRAC_PI_2, Sign::Minus).unwrap();
        assert_relative_eq!(down.p, Vec2::new(3.0, 4.0), epsilon = 1e-12);
        // Both assemblies lie on the same inverse-kinematics branch here.
        let minus_plus = WorkingMode::new(Sign::Minus, Sign::Plus);
        assert_eq!(up.mode, Some(minus_plus));
        assert_eq!(down.mode, Some(minus_plus));
        assert!(forward_kinematics_in_mode(
            &m,
            FRAC_PI_2,
            FRAC_PI_2,
            WorkingMode::new(Sign::Plus, Sign::Minus),
            Sign::Plus
        )
        .is_none());
    }

    #[test]
    fn forward_kinematics_at_zero_has_two_solutions() {
        let m = model_685();
        let sols = forward_kinematics_solutions(&m, 0.0, 0.0);
        assert_eq!(sols.len(), 2);
        let oracle = circle_oracle(Vec2::new(8.0, 0.0), 5.0, Vec2::new(14.0, 0.0), 5.0);
        for s in &sols {
            assert!(oracle.iter().any(|o| (o - s.p).norm() < 1e-12));
        }
    }

    #[test]
    fn posture_invariants_hold() {
        let m = model_685();
        let s = forward_kinematics(&m, 1.1, 2.0, Sign::Plus).unwrap();
        assert_relative_eq!((s.p - s.c).norm(), m.l2, epsilon = 1e-9 * m.l2);
        assert_relative_eq!((s.p - s.d).norm(), m.l4, epsilon = 1e-9 * m.l2);
        assert_relative_eq!(s.p - s.c, m.l2 * unit(s.theta3), epsilon = 1e-12);
        assert_relative_eq!(s.p - s.d, m.l4 * unit(s.theta4), epsilon = 1e-12);
    }

    #[test]
    fn inverse_kinematics_examples() {
        let m = model_685();
        let mode = WorkingMode::new(Sign::Minus, Sign::Plus);
        let s = inverse_kinematics(&m, Vec2::new(3.0, 12.0), mode).unwrap();
        assert_relative_eq!(s.theta1, FRAC_PI_2, epsilon = 1e-12);
        assert_relative_eq!(s.theta2, FRAC_PI_2, epsilon = 1e-12);
        assert!(!s.on_boundary);

        assert!(inverse_kinematics(&m, Vec2::new(3.0, 13.0001), mode).is_none());
        // (3, 13) lies sqrt(178) from base_a: beyond reach.
        assert!(inverse_kinematics(&m, Vec2::new(3.0, 13.0), mode).is_none());
        // (5, 12) is exactly L1 + L2 = 13 from base_a.
        let edge = inverse_kinematics(&m, Vec2::new(5.0, 12.0), mode).unwrap();
        assert!(edge.on_boundary);
        assert_eq!(edge.mode, None);
        assert!(edge.leg_a_cross(&m).abs() < 1e-12);
        assert_relative_eq!(edge.c, Vec2::new(40.0 / 13.0, 96.0 / 13.0), epsilon = 1e-12);
    }

    #[test]
    fn velocity_matrix_example() {
        let m = model_685();
        let s = forward_kinematics(&m, FRAC_PI_2, FRAC_PI_2, Sign::Plus).unwrap();
        let vm = velocity_matrices(&m, &s);
        assert_relative_eq!(vm.a, Matrix2::new(3.0, 4.0, -3.0, 4.0), epsilon = 1e-12);
        assert_relative_eq!(vm.b, Matrix2::new(-24.0, 0.0, 0.0, 24.0), epsilon = 1e-12);
        assert_eq!(vm.b[(0, 1)], 0.0);
        assert_eq!(vm.b[(1, 0)], 0.0);
        assert_eq!(vm.e * vm.e, -Matrix2::identity());
        let u = s.p - s.c;
        assert_eq!(u.dot(&(vm.e * u)), 0.0);
        // Sines recovered from angles agree with the cross-product form.
        assert_relative_eq!(
            vm.b[(0, 0)],
            m.l1 * m.l2 * (s.theta3 - s.theta1).sin(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn velocity_relation_zero_rate() {
        let m = model_685();
        let s = forward_kinematics(&m, 1.0, 2.0, Sign::Plus).unwrap();
        assert_eq!(velocity_relation_check(&m, &s, [0.0, 0.0]).unwrap(), 0.0);
    }

    #[test]
    fn velocity_relation_refuses_singular_a() {
        let m = model_685();
        // theta1 = theta2 = 0 puts C=(8,0), D=(14,0): |C-D| = 6. Choose
        // theta2 so that |C-D| = L2 + L4 = 10 and P sits between C and D.
        let c = Vec2::new(8.0, 0.0);
        let d = c + Vec2::new(10.0, 0.0);
        let p = c + Vec2::new(5.0, 0.0);
        let s = PostureState {
            theta1: 0.0,
            theta2: angle_of(d - m.base_b),
            theta3: 0.0,
            theta4: PI,
            p,
            c,
            d,
            mode: None,
            on_boundary: false,
        };
        assert!(matches!(
            velocity_relation_check(&m, &s, [1.0, 0.0]),
            Err(Error::Singular(_))
        ));
    }

    #[test]
    fn velocity_relation_on_random_postures() {
        let m = model_685();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut checked = 0;
        while checked < 200 {
            let t1 = rng.gen_range(-PI..PI);
            let t2 = rng.gen_range(-PI..PI);
            let asm = if rng.gen_bool(0.5) { Sign::Plus } else { Sign::Minus };
            let Some(s) = forward_kinematics(&m, t1, t2, asm) else {
                continue;
            };
            let u = s.p - s.c;
            let v = s.p - s.d;
            if cross(u, v).abs() / (u.norm() * v.norm()) < 1e-2 {
                continue;
            }
            let td: [f64; 2] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let n: f64 = (td[0] * td[0] + td[1] * td[1]).sqrt();
            let r = velocity_relation_check(&m, &s, td).unwrap();
            assert!(r < 1e-6 * n, "residual {r} at {s:?}");
            checked += 1;
        }
    }

    #[test]
    fn round_trip_and_mode_partition() {
        let m = model_685();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut n = 0;
        while n < 2000 {
            let t1 = rng.gen_range(-PI..PI);
            let t2 = rng.gen_range(-PI..PI);
            for s in forward_kinematics_solutions(&m, t1, t2) {
                let Some(mode) = s.mode else { continue };
                let back = inverse_kinematics(&m, s.p, mode).unwrap();
                if back.on_boundary {
                    continue;
                }
                let wrap = |x: f64| (x + PI).rem_euclid(2.0 * PI) - PI;
                assert!(wrap(back.theta1 - t1).abs() < 1e-9, "{t1} vs {}", back.theta1);
                assert!(wrap(back.theta2 - t2).abs() < 1e-9);
                assert_eq!(back.mode, Some(mode));
                n += 1;
            }
        }
        // All four branches at an interior point are distinct postures.
        let p = Vec2::new(2.0, 6.0);
        let sols: Vec<_> = WorkingMode::ALL
            .iter()
            .map(|&w| inverse_kinematics(&m, p, w).unwrap())
            .collect();
        for i in 0..4 {
            assert_eq!(sols[i].mode, Some(WorkingMode::ALL[i]));
            let s1 = Sign::of(sols[i].leg_a_cross(&m));
            let s2 = Sign::of(sols[i].leg_b_cross(&m));
            assert_eq!(WorkingMode::new(s1, s2), WorkingMode::ALL[i]);
        }
    }

    #[test]
    fn det_a_vanishes_with_sin_theta3_minus_theta4() {
        let m = model_685();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let Some(s) = forward_kinematics(&m, rng.gen_range(-PI..PI), rng.gen_range(-PI..PI), Sign::Plus)
            else {
                continue;
            };
            let det = velocity_matrices(&m, &s).a.determinant();
            let expected = m.l2 * m.l4 * (s.theta4 - s.theta3).sin();
            assert!((det - expected).abs() < 1e-9 * m.l2 * m.l4);
        }
    }

    #[test]
    fn workspace_membership_examples() {
        let m = model_685();
        assert_eq!(workspace_contains(&m, Vec2::new(3.0, 4.0)), Containment::Inside);
        assert_eq!(workspace_contains(&m, Vec2::new(5.0, 12.0)), Containment::Boundary);
        assert_eq!(workspace_contains(&m, Vec2::new(3.0, 13.0)), Containment::Outside);
        assert_eq!(workspace_contains(&m, Vec2::new(100.0, 0.0)), Containment::Outside);
        // Inner circle of leg b: |p - base_b| = 3.
        assert_eq!(workspace_contains(&m, Vec2::new(6.0, 3.0)), Containment::Boundary);
    }

    #[test]
    fn outside_means_no_inverse_kinematics() {
        let m = model_685();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5000 {
            let p = Vec2::new(rng.gen_range(-15.0..20.0), rng.gen_range(-15.0..15.0));
            if workspace_contains(&m, p) == Containment::Outside {
                for mode in WorkingMode::ALL {
                    assert!(inverse_kinematics(&m, p, mode).is_none());
                }
            } else {
                for mode in WorkingMode::ALL {
                    assert!(inverse_kinematics(&m, p, mode).is_some());
                }
            }
        }
    }

    #[test]
    fn proximity_direction() {
        let m = model_685();
        let b = boundary_proximity(&m, Vec2::new(5.0, 12.0));
        assert!(b.distance.abs() < 1e-12);
        assert_relative_eq!(b.inward, -Vec2::new(5.0, 12.0) / 13.0, epsilon = 1e-12);
        let deep = boundary_proximity(&m, Vec2::new(3.0, 8.0));
        assert!(deep.distance > 1.0);
    }

    #[test]
    fn mode_parsing() {
        assert_eq!(
            "+-".parse::<WorkingMode>().unwrap(),
            WorkingMode::new(Sign::Plus, Sign::Minus)
        );
        assert!("+".parse::<WorkingMode>().is_err());
        assert!("+-+".parse::<WorkingMode>().is_err());
        assert_eq!(WorkingMode::new(Sign::Minus, Sign::Plus).to_string(), "-+");
        assert_eq!(
            WorkingMode::new(Sign::Plus, Sign::Plus).mirrored(),
            WorkingMode::new(Sign::Minus, Sign::Minus)
        );
    }
}
