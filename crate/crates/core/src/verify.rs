//! Seeded self-check of the five-bar kernels against independent oracles:
//! SVD against closed-form conditioning, finite differences against the
//! velocity relation, and the FK/IK round trip.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conditioning::{condition_number_of, fivebar_indices};
use crate::error::Error;
use crate::fivebar::{
    forward_kinematics, inverse_kinematics, velocity_matrices, velocity_relation_check, Sign,
    WorkingMode,
};
use crate::model::{FiveBarModel, Vec2};

pub const CLOSED_FORM_TOL: f64 = 1e-9;
pub const VELOCITY_TOL: f64 = 1e-6;
pub const ROUND_TRIP_TOL: f64 = 1e-9;
/// Postures with an SVD condition number above this are skipped.
pub const KAPPA_CUTOFF: f64 = 1e12;
/// The finite-difference oracle is only trusted where
/// `|sin(theta3 - theta4)|` is at least this. Forward kinematics has a
/// square-root branch point where the sine vanishes, so the stencil's
/// truncation error blows up there.
pub const VELOCITY_MIN_SIN: f64 = 2e-2;

/// Deliberate corruption used as a negative control.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    /// Scales the closed-form κ_A by `1 + 1e-6`.
    ClosedForm,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VerifyOptions {
    pub samples: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            samples: 10_000,
            seed: 42,
            fault: None,
        }
    }
}

/// The posture at which a check saw its largest error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampledPosture {
    pub index: usize,
    pub theta1: f64,
    pub theta2: f64,
    pub assembly: Sign,
    pub mode: Option<WorkingMode>,
    pub p: Vec2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub tolerance: f64,
    pub max_error: f64,
    /// Postures the check was evaluated on.
    pub evaluated: usize,
    pub skipped: usize,
    pub failures: usize,
    pub worst: Option<SampledPosture>,
}

impl CheckResult {
    fn new(name: &str, tolerance: f64) -> Self {
        CheckResult {
            name: name.into(),
            tolerance,
            max_error: 0.0,
            evaluated: 0,
            skipped: 0,
            failures: 0,
            worst: None,
        }
    }

    fn record(&mut self, err: f64, at: SampledPosture) {
        self.evaluated += 1;
        // NaN counts as a failure and as the worst case.
        let bad = !(err <= self.tolerance);
        if bad {
            self.failures += 1;
        }
        if !(err <= self.max_error) || self.worst.is_none() {
            self.max_error = if err.is_nan() { f64::INFINITY } else { err.max(self.max_error) };
            self.worst = Some(at);
        }
    }

    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub model_hash: String,
    pub samples: usize,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    pub warnings: Vec<String>,
}

impl VerifyReport {
    /// Fixed-width table of the per-check maxima.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:<20} {:>12} {:>12} {:>9} {:>8} {:>8}  status\n",
            "check", "max_error", "tolerance", "evaluated", "skipped", "failures"
        );
        for c in &self.checks {
            let _ = writeln!(
                s,
                "{:<20} {:>12.3e} {:>12.1e} {:>9} {:>8} {:>8}  {}",
                c.name,
                c.max_error,
                c.tolerance,
                c.evaluated,
                c.skipped,
                c.failures,
                if c.passed() { "ok" } else { "FAIL" }
            );
            if let (false, Some(w)) = (c.passed(), &c.worst) {
                let mode = w.mode.map_or("boundary".to_string(), |m| m.to_string());
                let _ = writeln!(
                    s,
                    "  worst at sample {}: theta1 = {:.17}, theta2 = {:.17}, assembly {:+}, mode {}, p = ({:.12}, {:.12})",
                    w.index, w.theta1, w.theta2, w.assembly.value(), mode, w.p.x, w.p.y
                );
            }
        }
        s
    }
}

fn wrap(x: f64) -> f64 {
    (x + PI).rem_euclid(2.0 * PI) - PI
}

/// Runs every check on `opts.samples` postures drawn uniformly over both
/// actuated angles and both assemblies; draws with no assembled posture
/// are redrawn.
pub fn verify_fivebar(model: &FiveBarModel, opts: &VerifyOptions) -> VerifyReport {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut svd_a = CheckResult::new("kappa_a_svd", CLOSED_FORM_TOL);
    let mut svd_b = CheckResult::new("kappa_b_svd", CLOSED_FORM_TOL);
    let mut velocity = CheckResult::new("velocity_fd", VELOCITY_TOL);
    let mut round_trip = CheckResult::new("fk_ik_round_trip", ROUND_TRIP_TOL);
    let mut warnings = Vec::new();
    if opts.samples == 0 {
        warnings.push("no samples requested; nothing was checked".to_string());
    }

    let mut drawn = 0usize;
    let max_draws = opts.samples.saturating_mul(1000).max(1);
    let mut index = 0;
    while index < opts.samples && drawn < max_draws {
        drawn += 1;
        let theta1 = rng.gen_range(-PI..PI);
        let theta2 = rng.gen_range(-PI..PI);
        let assembly = if rng.gen_bool(0.5) { Sign::Plus } else { Sign::Minus };
        let rate = rng.gen_range(0.0..2.0 * PI);
        let Some(posture) = forward_kinematics(model, theta1, theta2, assembly) else {
            continue;
        };
        let at = SampledPosture {
            index,
            theta1,
            theta2,
            assembly,
            mode: posture.mode,
            p: posture.p,
        };
        index += 1;

        let ix = fivebar_indices(&posture, model);
        let m = velocity_matrices(model, &posture);
        let kappa_a = match opts.fault {
            Some(Fault::ClosedForm) => ix.kappa_a * (1.0 + 1e-6),
            None => ix.kappa_a,
        };
        for (check, closed, matrix) in [(&mut svd_a, kappa_a, &m.a), (&mut svd_b, ix.kappa_b, &m.b)] {
            match condition_number_of(matrix) {
                Ok(r) if r.kappa < KAPPA_CUTOFF => check.record((closed - r.kappa).abs() / r.kappa, at),
                _ => check.skipped += 1,
            }
        }

        if (posture.theta3 - posture.theta4).sin().abs() < VELOCITY_MIN_SIN {
            velocity.skipped += 1;
        } else {
            match velocity_relation_check(model, &posture, [rate.cos(), rate.sin()]) {
                Ok(res) => velocity.record(res, at),
                Err(Error::Singular(_)) => velocity.skipped += 1,
                Err(_) => velocity.record(f64::NAN, at),
            }
        }

        match posture.mode {
            Some(mode) => match inverse_kinematics(model, posture.p, mode) {
                Some(back) if back.on_boundary => round_trip.skipped += 1,
                Some(back) => {
                    let err = wrap(back.theta1 - theta1).abs().max(wrap(back.theta2 - theta2).abs());
                    round_trip.record(err, at)
                }
                None => round_trip.record(f64::NAN, at),
            },
            None => round_trip.skipped += 1,
        }
    }
    if index < opts.samples {
        warnings.push(format!(
            "only {index} of {} draws assembled after {drawn} attempts",
            opts.samples
        ));
    }

    let checks = vec![svd_a, svd_b, velocity, round_trip];
    VerifyReport {
        model_hash: model.model_hash(),
        samples: index,
        seed: opts.seed,
        passed: checks.iter().all(CheckResult::passed) && index == opts.samples,
        checks,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::JointLimits;

    fn model() -> FiveBarModel {
        FiveBarModel::new(6.0, 8.0, 5.0, [JointLimits::full_turn(); 2]).unwrap()
    }

    #[test]
    fn default_model_passes() {
        let r = verify_fivebar(&model(), &VerifyOptions { samples: 2000, ..Default::default() });
        assert!(r.passed, "{}", r.table());
        assert_eq!(r.samples, 2000);
        assert!(r.checks.iter().all(|c| c.evaluated > 1000));
    }

    #[test]
    fn corrupted_closed_form_fails_with_posture() {
        let r = verify_fivebar(
            &model(),
            &VerifyOptions {
                samples: 100,
                seed: 1,
                fault: Some(Fault::ClosedForm),
            },
        );
        assert!(!r.passed);
        let a = &r.checks[0];
        assert!(!a.passed() && a.worst.is_some());
        assert!(r.checks[1].passed());
        assert!(r.table().contains("worst at sample"));
    }

    #[test]
    fn zero_samples_pass_with_warning() {
        let r = verify_fivebar(&model(), &VerifyOptions { samples: 0, ..Default::default() });
        assert!(r.passed);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn same_seed_same_report() {
        let o = VerifyOptions { samples: 300, seed: 7, fault: None };
        assert_eq!(verify_fivebar(&model(), &o), verify_fivebar(&model(), &o));
    }
}
