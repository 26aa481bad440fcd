//! Cosine variance schedule for the diffusion process.
//!
//! With `N` steps and offset `tau`, define
//! `f(n) = cos(((n/N + tau)/(1 + tau)) * pi/2)^2`. The closed-form signal
//! level is `alpha_bar(n) = f(n)/f(0)`; the per-step variances are
//! `beta(n) = 1 - alpha_bar(n)/alpha_bar(n-1)`, clipped to at most
//! [`BETA_MAX`] to keep late steps numerically sane. The stored `alpha_bar`
//! table is rebuilt from the clipped betas via the cumulative product, so
//! `alpha_bar(n) == alpha_bar(n-1) * (1 - beta(n))` holds exactly; the
//! unclipped closed form stays available separately for diagnostics.

use crate::error::{Error, Result};

/// Upper clip applied to every `beta(n)`.
pub const BETA_MAX: f64 = 0.999;

/// Default cosine offset.
pub const DEFAULT_TAU: f64 = 0.008;

/// Default number of diffusion steps.
pub const DEFAULT_STEPS: usize = 200;

#[derive(Debug, Clone)]
pub struct CosineSchedule {
    n_steps: usize,
    tau: f64,
    /// `betas[n-1]` is `beta(n)` for `n` in `1..=n_steps`.
    betas: Vec<f64>,
    /// `alpha_bars[n]` is `alpha_bar(n)` for `n` in `0..=n_steps`.
    alpha_bars: Vec<f64>,
}

/// Coefficients of one reverse transition `n -> n-1`:
/// `mean = coef_x0 * x0_hat + coef_xn * x_n`, noise scaled by `std`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReverseCoefficients {
    pub coef_x0: f64,
    pub coef_xn: f64,
    pub std: f64,
}

impl Default for CosineSchedule {
    /// The 200-step schedule with the standard offset.
    fn default() -> Self {
        CosineSchedule::new(DEFAULT_STEPS, DEFAULT_TAU).expect("default schedule is valid")
    }
}

impl CosineSchedule {
    pub fn new(n_steps: usize, tau: f64) -> Result<Self> {
        if n_steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Config(format!("schedule offset tau must be positive, got {}", tau)));
        }
        let closed = |n: usize| Self::closed_form(n, n_steps, tau);
        let mut betas = Vec::with_capacity(n_steps);
        let mut alpha_bars = Vec::with_capacity(n_steps + 1);
        alpha_bars.push(1.0);
        for n in 1..=n_steps {
            let beta = (1.0 - closed(n) / closed(n - 1)).min(BETA_MAX);
            betas.push(beta);
            alpha_bars.push(alpha_bars[n - 1] * (1.0 - beta));
        }
        Ok(CosineSchedule { n_steps, tau, betas, alpha_bars })
    }

    fn closed_form(n: usize, n_steps: usize, tau: f64) -> f64 {
        let angle = (n as f64 / n_steps as f64 + tau) / (1.0 + tau) * std::f64::consts::FRAC_PI_2;
        angle.cos().powi(2)
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    /// `beta(n)` for `n` in `1..=n_steps`.
    pub fn beta(&self, n: usize) -> f64 {
        assert!(
            n >= 1 && n <= self.n_steps,
            "beta index {} outside 1..={}",
            n,
            self.n_steps
        );
        self.betas[n - 1]
    }

    pub fn alpha(&self, n: usize) -> f64 {
        1.0 - self.beta(n)
    }

    /// `alpha_bar(n)` for `n` in `0..=n_steps`; `alpha_bar(0) == 1`.
    pub fn alpha_bar(&self, n: usize) -> f64 {
        assert!(n <= self.n_steps, "alpha_bar index {} outside 0..={}", n, self.n_steps);
        self.alpha_bars[n]
    }

    /// Signal level from the closed form, without the beta clip. Diverges from
    /// [`Self::alpha_bar`] only at steps where the clip was active.
    pub fn alpha_bar_unclipped(&self, n: usize) -> f64 {
        assert!(n <= self.n_steps, "alpha_bar index {} outside 0..={}", n, self.n_steps);
        Self::closed_form(n, self.n_steps, self.tau) / Self::closed_form(0, self.n_steps, self.tau)
    }

    /// Posterior coefficients of the reverse transition at step `n >= 1`.
    /// At `n == 1` the posterior is deterministic (`std == 0`).
    pub fn reverse_coefficients(&self, n: usize) -> ReverseCoefficients {
        let beta = self.beta(n);
        let ab_prev = self.alpha_bar(n - 1);
        let ab = self.alpha_bar(n);
        let denom = 1.0 - ab;
        ReverseCoefficients {
            coef_x0: ab_prev.sqrt() * beta / denom,
            coef_xn: (1.0 - beta).sqrt() * (1.0 - ab_prev) / denom,
            std: (beta * (1.0 - ab_prev) / denom).sqrt(),
        }
    }
}
