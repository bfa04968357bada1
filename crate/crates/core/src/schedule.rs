//! Linear noise schedule of the variance-preserving SDE and the closed-form
//! scalars derived from it.
//!
//! Diffusion time lives on the unit interval. With
//! `beta(t) = beta_min + (beta_max - beta_min) t` the signal-retention factor
//! is `alpha(t) = exp(-beta_min t - (beta_max - beta_min) t^2 / 2)` and the
//! equivalent additive variance after rescaling is `(1 - alpha) / alpha`.

use serde::{Deserialize, Serialize};

use crate::error::{check_unit_interval, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSchedule")]
pub struct LinearSchedule {
    beta_min: f64,
    beta_max: f64,
}

#[derive(Deserialize)]
struct RawSchedule {
    beta_min: f64,
    beta_max: f64,
}

impl TryFrom<RawSchedule> for LinearSchedule {
    type Error = Error;

    fn try_from(raw: RawSchedule) -> Result<Self> {
        LinearSchedule::new(raw.beta_min, raw.beta_max)
    }
}

impl Default for LinearSchedule {
    fn default() -> Self {
        Self { beta_min: 0.1, beta_max: 20.0 }
    }
}

impl LinearSchedule {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min.is_finite() && beta_max.is_finite()) {
            return Err(Error::NonFinite("schedule parameters"));
        }
        if beta_min <= 0.0 {
            return Err(Error::InvalidParameter(format!("beta_min must be positive, got {beta_min}")));
        }
        if beta_max < beta_min {
            return Err(Error::InvalidParameter(format!("beta_max ({beta_max}) must be >= beta_min ({beta_min})")));
        }
        Ok(Self { beta_min, beta_max })
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    /// Constant slope `beta'(t)`.
    pub fn slope(&self) -> f64 {
        self.beta_max - self.beta_min
    }

    pub fn beta(&self, t: f64) -> Result<f64> {
        check_unit_interval("t", t)?;
        Ok(self.beta_unchecked(t))
    }

    /// `int_0^t beta(s) ds`.
    pub fn integrated_beta(&self, t: f64) -> Result<f64> {
        check_unit_interval("t", t)?;
        Ok(self.integral_unchecked(t))
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        check_unit_interval("t", t)?;
        Ok((-self.integral_unchecked(t)).exp())
    }

    /// `1 - alpha(t)`, evaluated without cancellation for small t.
    pub fn one_minus_alpha(&self, t: f64) -> Result<f64> {
        check_unit_interval("t", t)?;
        Ok(-(-self.integral_unchecked(t)).exp_m1())
    }

    pub fn sigma_sq(&self, t: f64) -> Result<f64> {
        check_unit_interval("t", t)?;
        // (1 - alpha) / alpha = exp(B) - 1
        Ok(self.integral_unchecked(t).exp_m1())
    }

    pub fn sigma(&self, t: f64) -> Result<f64> {
        self.sigma_sq(t).map(f64::sqrt)
    }

    /// Drift `-beta(t) x / 2` and diffusion `sqrt(beta(t))` of the VP SDE.
    pub fn drift_diffusion(&self, x: &[f64], t: f64) -> Result<(Vec<f64>, f64)> {
        let beta = self.beta(t)?;
        let drift = x.iter().map(|v| -0.5 * beta * v).collect();
        Ok((drift, beta.sqrt()))
    }

    /// `beta(t) sqrt(alpha / (1 - alpha))`: the per-unit-time rate bounding
    /// how fast embeddings of adjacent noise levels can drift apart.
    pub fn monitor_f(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Domain { what: "t", value: t, domain: "(0, 1]" });
        }
        let b = self.integral_unchecked(t);
        // alpha / (1 - alpha) = 1 / (exp(B) - 1)
        Ok(self.beta_unchecked(t) / b.exp_m1().sqrt())
    }

    /// `d/dt log monitor_f(t) = beta'/beta - beta / (2 (1 - alpha))`.
    pub fn monitor_log_derivative(&self, t: f64) -> Result<f64> {
        if !(t > 0.0 && t <= 1.0) {
            return Err(Error::Domain { what: "t", value: t, domain: "(0, 1]" });
        }
        let beta = self.beta_unchecked(t);
        let one_minus_alpha = -(-self.integral_unchecked(t)).exp_m1();
        Ok(self.slope() / beta - beta / (2.0 * one_minus_alpha))
    }

    /// Signal factor of the VP transition kernel from `t` to `t + dt`:
    /// `alpha(t + dt) / alpha(t)`.
    pub fn transition_ratio(&self, t: f64, dt: f64) -> Result<f64> {
        self.kernel_ratio(t, t + dt)
    }

    /// `alpha(to) / alpha(from)` for `from <= to`.
    pub fn kernel_ratio(&self, from: f64, to: f64) -> Result<f64> {
        check_unit_interval("t", from)?;
        check_unit_interval("t + dt", to)?;
        Ok((self.integral_unchecked(from) - self.integral_unchecked(to)).exp())
    }

    /// Smallest time at which `int_0^t beta = level`, i.e. the positive root of
    /// `beta_min t + slope t^2 / 2 = level`.
    pub fn time_for_integral(&self, level: f64) -> f64 {
        // rationalized root, stable when the slope vanishes
        2.0 * level / ((self.beta_min * self.beta_min + 2.0 * self.slope() * level).sqrt() + self.beta_min)
    }

    fn beta_unchecked(&self, t: f64) -> f64 {
        self.beta_min + self.slope() * t
    }

    fn integral_unchecked(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * self.slope() * t * t
    }
}

/// `alpha(t)` computed as `exp(-int_0^t beta)` with the integral evaluated by
/// adaptive Simpson quadrature on `beta` alone. Independent of the closed form.
pub fn alpha_by_quadrature(schedule: &LinearSchedule, t: f64, tol: f64) -> Result<f64> {
    check_unit_interval("t", t)?;
    let beta = |s: f64| schedule.beta_min() + (schedule.beta_max() - schedule.beta_min()) * s;
    Ok((-adaptive_simpson(&beta, 0.0, t, tol)).exp())
}

pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }

    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }

    if a == b {
        return 0.0;
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    let whole = simpson(fa, fm, fb, a, b);
    recurse(f, a, b, fa, fm, fb, whole, tol, 50)
}
