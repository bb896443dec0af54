use kinestat_core::forcefield::{
    boundary_force, conditioning_force, joint_limit_force, ConditioningLaw, RampLaw,
};
use kinestat_core::model::{FiveBarModel, JointLimits, Vec2};

const N: usize = 1_000_000;

/// Largest step-to-step change over an `N`-point sweep of `[lo, hi]`, in
/// excess of what a law with the given Lipschitz constant may change over one
/// step. A jump discontinuity shows up here at its full height.
fn excess_jump(f: impl Fn(f64) -> f64, lo: f64, hi: f64, lipschitz: f64) -> f64 {
    let step = (hi - lo) / (N - 1) as f64;
    let mut prev = f(lo);
    let mut worst = 0.0f64;
    for k in 1..N {
        let v = f(lo + step * k as f64);
        worst = worst.max((v - prev).abs() - lipschitz * step);
        prev = v;
    }
    worst
}

#[test]
fn joint_limit_law_has_no_jumps() {
    let limits = JointLimits::new(-2.0, 2.0, 0.2).unwrap();
    let law = RampLaw::new(0.2, 6.4).unwrap();
    let excess = excess_jump(
        |q| joint_limit_force(q, &limits, &law),
        -3.0,
        3.0,
        6.4 / 0.2,
    );
    assert!(excess < 1e-6 * 6.4, "{excess}");
}

#[test]
fn conditioning_law_has_no_jumps() {
    let law = ConditioningLaw::default();
    let excess = excess_jump(
        |s| conditioning_force(s, law.s_full, law.s_zero, law.f_max).unwrap(),
        0.0,
        1.0,
        law.f_max / (law.s_zero - law.s_full),
    );
    assert!(excess < 1e-6 * law.f_max, "{excess}");
}

#[test]
fn boundary_law_has_no_jumps_along_a_radial_ray() {
    let m = FiveBarModel::new(
        6.0,
        8.0,
        5.0,
        [JointLimits::full_turn(), JointLimits::full_turn()],
    )
    .unwrap();
    let dir = Vec2::new(5.0, 12.0) / 13.0;
    let delta_d = 0.5;
    let excess = excess_jump(
        |r| boundary_force(&m, dir * r, delta_d, 6.4).unwrap().y,
        11.0,
        14.0,
        6.4 / delta_d,
    );
    assert!(excess < 1e-6 * 6.4, "{excess}");
}

#[test]
fn a_step_law_is_caught() {
    let excess = excess_jump(|x| if x < 0.5 { 0.0 } else { 6.4 }, 0.0, 1.0, 0.0);
    assert!(excess > 1e-6 * 6.4);
}
