//! Communication rate functions `a(r)`.
//!
//! The interaction weight between two agents at distance `r` is `a(r)`. It
//! must be nonnegative and nonincreasing on `[0, ∞)`. The Cucker–Smale family
//! `K / (σ² + r²)^β` is built in; anything else is a [`GeneralKernel`]
//! supplied as a callable plus a declared integrability flag.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

type RateFn = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// Number of grid points used when spot-checking a general kernel.
pub const MONOTONICITY_GRID: usize = 1024;

/// User-supplied rate function.
#[derive(Clone)]
pub struct GeneralKernel {
    rate: RateFn,
    derivative: Option<RateFn>,
    integrable: bool,
    check_range: f64,
}

impl GeneralKernel {
    /// `integrable` declares that `∫₀^∞ a(r) dr < ∞`; it cannot be verified.
    pub fn new<F>(rate: F, integrable: bool) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        Self {
            rate: Arc::new(rate),
            derivative: None,
            integrable,
            check_range: 100.0,
        }
    }

    /// Attach an analytic derivative `a'(r)`. Without one, a central
    /// difference is used where the derivative is needed (adjoint equations).
    pub fn with_derivative<F>(mut self, derivative: F) -> Self
    where
        F: Fn(f64) -> f64 + Send + Sync + 'static,
    {
        self.derivative = Some(Arc::new(derivative));
        self
    }

    /// Upper end of the interval `[0, range]` scanned by [`CommKernel::validate`].
    pub fn with_check_range(mut self, range: f64) -> Self {
        self.check_range = range;
        self
    }
}

impl fmt::Debug for GeneralKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneralKernel")
            .field("integrable", &self.integrable)
            .field("has_derivative", &self.derivative.is_some())
            .finish()
    }
}

#[derive(Debug, Clone)]
pub enum CommKernel {
    /// `a(r) = K / (σ² + r²)^β`
    CuckerSmale {
        k: f64,
        sigma: f64,
        beta: f64,
    },
    General(GeneralKernel),
}

impl CommKernel {
    pub fn cucker_smale(k: f64, sigma: f64, beta: f64) -> Result<Self> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(Error::InvalidKernel(format!("strength K must be positive, got {k}")));
        }
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidKernel(format!(
                "offset sigma must be positive, got {sigma}"
            )));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::InvalidKernel(format!(
                "exponent beta must be nonnegative, got {beta}"
            )));
        }
        Ok(CommKernel::CuckerSmale { k, sigma, beta })
    }

    /// Build a general kernel and spot-check it on the monotonicity grid.
    pub fn general(kernel: GeneralKernel) -> Result<Self> {
        let kernel = CommKernel::General(kernel);
        kernel.validate()?;
        Ok(kernel)
    }

    #[inline]
    pub fn rate(&self, r: f64) -> f64 {
        match self {
            CommKernel::CuckerSmale { k, sigma, beta } => {
                let base = sigma * sigma + r * r;
                if *beta == 1.0 {
                    k / base
                } else {
                    k * base.powf(-beta)
                }
            }
            CommKernel::General(g) => (g.rate)(r),
        }
    }

    /// `a'(r)`.
    pub fn derivative(&self, r: f64) -> f64 {
        match self {
            CommKernel::CuckerSmale { .. } => r * self.derivative_over_r(r),
            CommKernel::General(g) => match &g.derivative {
                Some(d) => d(r),
                None => {
                    let h = 1e-6 * (1.0 + r.abs());
                    let lo = (r - h).max(0.0);
                    ((g.rate)(r + h) - (g.rate)(lo)) / (r + h - lo)
                }
            },
        }
    }

    /// `a'(r) / r`, with the removable singularity at `r = 0` resolved for the
    /// Cucker–Smale family and set to `0` for general kernels.
    pub fn derivative_over_r(&self, r: f64) -> f64 {
        match self {
            CommKernel::CuckerSmale { k, sigma, beta } => {
                let base = sigma * sigma + r * r;
                -2.0 * beta * k * base.powf(-beta - 1.0)
            }
            CommKernel::General(_) => {
                if r == 0.0 {
                    0.0
                } else {
                    self.derivative(r) / r
                }
            }
        }
    }

    /// Whether `∫₀^∞ a(r) dr` converges, which the threshold function needs.
    pub fn is_integrable(&self) -> bool {
        match self {
            CommKernel::CuckerSmale { beta, .. } => *beta > 0.5,
            CommKernel::General(g) => g.integrable,
        }
    }

    pub fn require_integrable(&self) -> Result<()> {
        if self.is_integrable() {
            Ok(())
        } else {
            Err(Error::NonIntegrableKernel(match self {
                CommKernel::CuckerSmale { beta, .. } => {
                    format!("Cucker-Smale exponent beta = {beta} must exceed 1/2")
                }
                CommKernel::General(_) => "general kernel declared non-integrable".to_string(),
            }))
        }
    }

    /// Check `a ≥ 0` and `a` nonincreasing on a uniform grid.
    pub fn validate(&self) -> Result<()> {
        let range = match self {
            CommKernel::CuckerSmale { .. } => return Ok(()),
            CommKernel::General(g) => g.check_range,
        };
        let mut prev = f64::INFINITY;
        for i in 0..MONOTONICITY_GRID {
            let r = range * i as f64 / (MONOTONICITY_GRID - 1) as f64;
            let a = self.rate(r);
            if !a.is_finite() || a < 0.0 {
                return Err(Error::InvalidKernel(format!(
                    "a({r}) = {a} is not a nonnegative number"
                )));
            }
            if a > prev * (1.0 + 1e-12) {
                return Err(Error::InvalidKernel(format!("a is increasing near r = {r}")));
            }
            prev = a;
        }
        Ok(())
    }

    /// `a(0)`, the largest value the kernel takes.
    pub fn peak(&self) -> f64 {
        self.rate(0.0)
    }
}
