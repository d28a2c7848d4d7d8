//! Consistency-weight ramps and the stepwise learning-rate schedule.
//!
//! Two time-varying weights balance the objective's consistency terms against
//! the supervised term: a ramp-up weight that suppresses teacher consistency
//! early in training, and a ramp-down weight that lets the oracle guide early
//! and fade late. Both are scaled exponentials of the training progress
//! `t / t_max`.

/// Ramp-up weight for the teacher-consistency term.
///
/// `w_base * exp(-5 * (1 - t/t_max))`, strictly increasing in `t`, reaching
/// `w_base` at `t = t_max`.
///
/// Panics if `t > t_max` or `t_max == 0`.
pub fn lambda_c(t: u64, t_max: u64) -> f64 {
    lambda_c_base(t, t_max, DEFAULT_W_BASE)
}

/// Ramp-down weight for the oracle-consistency term.
///
/// `w_base * exp(-5 * t/t_max)`, strictly decreasing in `t`, starting at
/// `w_base` at `t = 0`. Satisfies `lambda_s(t) == lambda_c(t_max - t)`.
///
/// Panics if `t > t_max` or `t_max == 0`.
pub fn lambda_s(t: u64, t_max: u64) -> f64 {
    lambda_s_base(t, t_max, DEFAULT_W_BASE)
}

/// Base weight shared by both ramps.
pub const DEFAULT_W_BASE: f64 = 0.1;

pub fn lambda_c_base(t: u64, t_max: u64, w_base: f64) -> f64 {
    check_range(t, t_max);
    w_base * (-5.0 * (1.0 - t as f64 / t_max as f64)).exp()
}

pub fn lambda_s_base(t: u64, t_max: u64, w_base: f64) -> f64 {
    check_range(t, t_max);
    w_base * (-5.0 * (t as f64 / t_max as f64)).exp()
}

fn check_range(t: u64, t_max: u64) {
    assert!(t_max > 0, "t_max must be positive");
    assert!(t <= t_max, "iteration {t} out of schedule range 0..={t_max}");
}

/// Which direction a ramp moves over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampKind {
    RampUp,
    RampDown,
}

/// A configured consistency-weight ramp.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RampSchedule {
    pub kind: RampKind,
    pub w_base: f64,
    pub t_max: u64,
}

impl RampSchedule {
    pub fn new(kind: RampKind, w_base: f64, t_max: u64) -> Self {
        assert!(w_base > 0.0, "w_base must be positive");
        assert!(t_max > 0, "t_max must be positive");
        RampSchedule {
            kind,
            w_base,
            t_max,
        }
    }

    /// Evaluate the weight at iteration `t`. Always in `(0, w_base]`.
    pub fn at(&self, t: u64) -> f64 {
        match self.kind {
            RampKind::RampUp => lambda_c_base(t, self.t_max, self.w_base),
            RampKind::RampDown => lambda_s_base(t, self.t_max, self.w_base),
        }
    }
}

/// Stepwise learning-rate decay: `lr0 / decay_factor^(t / decay_every)`.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LrSchedule {
    pub lr0: f64,
    pub decay_every: u64,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            lr0: 0.01,
            decay_every: 2500,
            decay_factor: 10.0,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, t: u64) -> f64 {
        let k = (t / self.decay_every) as i32;
        self.lr0 / self.decay_factor.powi(k)
    }
}
