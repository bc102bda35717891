//! Compression-ratio schedules.
//!
//! A schedule maps the training step `t` to a compression ratio `r(t) >= 1`,
//! nonincreasing in `t` and bounded in `[c_min, c_max]`. All policies are
//! expressed in ratio space; the step and exponential families are defined
//! on the communicated *fraction* (which grows toward 1 over training) and
//! exposed here through the reciprocal.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedKind {
    /// `c_max` at every step.
    Fixed,
    /// Communicated fraction grows by `step` each epoch from `1/c_max`;
    /// ratio is the clamped reciprocal.
    Step,
    /// `max(c_max - slope * t, c_min)`.
    Linear,
    /// Communicated fraction `base^-(horizon - t + 1)` for `base > 1`;
    /// ratio is the clamped reciprocal `base^(horizon - t + 1)`.
    Exponential,
    /// `clamp(c_max - slope * (c_max - c_min) * t / horizon, c_min, c_max)`.
    /// With slope `a >= 1` this reaches `c_min` at `ceil(horizon / a)` and
    /// stays there.
    ClampedLinear,
}

impl SchedKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(SchedKind::Fixed),
            "step" => Ok(SchedKind::Step),
            "linear" => Ok(SchedKind::Linear),
            "exponential" => Ok(SchedKind::Exponential),
            "clamped-linear" => Ok(SchedKind::ClampedLinear),
            other => Err(Error::Config(format!("unknown scheduler kind {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SchedKind::Fixed => "fixed",
            SchedKind::Step => "step",
            SchedKind::Linear => "linear",
            SchedKind::Exponential => "exponential",
            SchedKind::ClampedLinear => "clamped-linear",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulerSpec {
    pub kind: SchedKind,
    pub c_max: f64,
    pub c_min: f64,
    /// Slope `a` for the linear families.
    pub slope: f64,
    /// Per-epoch fraction increment for the step family.
    pub step: f64,
    /// Base of the exponential family.
    pub base: f64,
    /// Total training steps.
    pub horizon: usize,
}

impl SchedulerSpec {
    pub fn fixed(ratio: f64, horizon: usize) -> Self {
        SchedulerSpec {
            kind: SchedKind::Fixed,
            c_max: ratio,
            c_min: ratio,
            slope: 0.0,
            step: 0.0,
            base: 2.0,
            horizon,
        }
    }

    pub fn clamped_linear(c_max: f64, c_min: f64, slope: f64, horizon: usize) -> Self {
        SchedulerSpec {
            kind: SchedKind::ClampedLinear,
            c_max,
            c_min,
            slope,
            step: 0.0,
            base: 2.0,
            horizon,
        }
    }

    pub fn linear(c_max: f64, c_min: f64, slope: f64, horizon: usize) -> Self {
        SchedulerSpec {
            kind: SchedKind::Linear,
            c_max,
            c_min,
            slope,
            step: 0.0,
            base: 2.0,
            horizon,
        }
    }

    pub fn step(c_max: f64, c_min: f64, step: f64, horizon: usize) -> Self {
        SchedulerSpec {
            kind: SchedKind::Step,
            c_max,
            c_min,
            slope: 0.0,
            step,
            base: 2.0,
            horizon,
        }
    }

    pub fn exponential(c_max: f64, c_min: f64, base: f64, horizon: usize) -> Self {
        SchedulerSpec {
            kind: SchedKind::Exponential,
            c_max,
            c_min,
            slope: 0.0,
            step: 0.0,
            base,
            horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c_min >= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "c_min must be >= 1, got {}",
                self.c_min
            )));
        }
        if !(self.c_max >= self.c_min) {
            return Err(Error::InvalidArgument(format!(
                "c_max ({}) must be >= c_min ({})",
                self.c_max, self.c_min
            )));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidArgument("horizon must be >= 1".into()));
        }
        for (name, v) in [
            ("c_max", self.c_max),
            ("c_min", self.c_min),
            ("slope", self.slope),
            ("step", self.step),
            ("base", self.base),
        ] {
            if !v.is_finite() {
                return Err(Error::InvalidArgument(format!("{name} must be finite")));
            }
        }
        if self.kind == SchedKind::Exponential && self.base <= 0.0 {
            return Err(Error::InvalidArgument("exponential base must be positive".into()));
        }
        Ok(())
    }
}

/// Compression ratio at step `t` (`0 <= t <= horizon`).
pub fn ratio_at(spec: &SchedulerSpec, t: usize) -> Result<f64> {
    spec.validate()?;
    if t > spec.horizon {
        return Err(Error::InvalidArgument(format!(
            "step {t} beyond horizon {}",
            spec.horizon
        )));
    }
    let clamp = |r: f64| r.clamp(spec.c_min, spec.c_max);
    let t_f = t as f64;
    let r = match spec.kind {
        SchedKind::Fixed => spec.c_max,
        SchedKind::ClampedLinear => clamp(
            spec.c_max - spec.slope * (spec.c_max - spec.c_min) * t_f / spec.horizon as f64,
        ),
        SchedKind::Linear => clamp(spec.c_max - spec.slope * t_f),
        SchedKind::Step => {
            let fraction = 1.0 / spec.c_max + spec.step * t_f;
            clamp(1.0 / fraction)
        }
        SchedKind::Exponential => {
            let exponent = (spec.horizon - t + 1) as f64;
            clamp(spec.base.powf(exponent))
        }
    };
    Ok(r)
}

/// One offending sample found by [`validate_monotone`].
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneViolation {
    pub t: usize,
    pub ratio: f64,
    pub prev: f64,
    pub reason: String,
}

/// Outcome of sampling the whole schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct MonotoneReport {
    pub violations: Vec<MonotoneViolation>,
}

impl MonotoneReport {
    pub fn ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Sample every `t` in `[0, horizon]` and report where the schedule rises
/// or leaves `[c_min, c_max]`.
pub fn validate_monotone(spec: &SchedulerSpec) -> Result<MonotoneReport> {
    spec.validate()?;
    let samples: Result<Vec<f64>> = (0..=spec.horizon).map(|t| ratio_at(spec, t)).collect();
    Ok(validate_samples(spec.c_min, spec.c_max, &samples?))
}

/// The checker behind [`validate_monotone`]: flag any rise and any sample
/// outside `[c_min, c_max]` in an explicit ratio sequence.
pub fn validate_samples(c_min: f64, c_max: f64, samples: &[f64]) -> MonotoneReport {
    let mut violations = Vec::new();
    let mut prev = f64::INFINITY;
    for (t, &r) in samples.iter().enumerate() {
        if r > prev {
            violations.push(MonotoneViolation {
                t,
                ratio: r,
                prev,
                reason: "ratio increased".into(),
            });
        }
        if r < c_min - 1e-12 || r > c_max + 1e-12 {
            violations.push(MonotoneViolation {
                t,
                ratio: r,
                prev,
                reason: format!("ratio outside [{c_min}, {c_max}]"),
            });
        }
        prev = r;
    }
    MonotoneReport { violations }
}
