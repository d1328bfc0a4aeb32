use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cumulative signal coefficients `a_t` for `t = 1..=T` and the reverse-step
/// noise scales derived from them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionSchedule {
    a: Vec<f64>,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self::linear(100, 0.9999, 0.02).expect("valid default schedule")
    }
}

impl DiffusionSchedule {
    /// `a_t` linear in `t` from `a_first` at `t = 1` to `a_last` at `t = T`.
    pub fn linear(t_max: usize, a_first: f64, a_last: f64) -> Result<Self> {
        if t_max == 0 {
            return Err(Error::param("t_max", "must be at least 1"));
        }
        let a = (0..t_max)
            .map(|i| {
                if t_max == 1 {
                    a_first
                } else {
                    a_first + (a_last - a_first) * i as f64 / (t_max - 1) as f64
                }
            })
            .collect();
        Self::from_coefficients(a)
    }

    pub fn from_coefficients(a: Vec<f64>) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::EmptyInput("diffusion schedule"));
        }
        if let Some(v) = a.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::param("a", format!("coefficient {v} outside (0, 1)")));
        }
        if a.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::param("a", "coefficients must strictly decrease"));
        }
        Ok(Self { a })
    }

    pub fn t_max(&self) -> usize {
        self.a.len()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.a.len() {
            return Err(Error::param("t", format!("step {t} outside 1..={}", self.a.len())));
        }
        Ok(())
    }

    pub fn a(&self, t: usize) -> Result<f64> {
        self.check(t)?;
        Ok(self.a[t - 1])
    }

    /// `a_{t-1}` with `a_0 = 1`.
    fn a_prev(&self, t: usize) -> f64 {
        if t == 1 {
            1.0
        } else {
            self.a[t - 2]
        }
    }

    /// Per-step noise variance `1 − a_t / a_{t−1}`.
    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(1.0 - self.a(t)? / self.a_prev(t))
    }

    /// Fixed small-variance choice `σ_t² = β_t (1 − a_{t−1}) / (1 − a_t)`; zero at `t = 1`.
    pub fn sigma(&self, t: usize) -> Result<f64> {
        let a = self.a(t)?;
        let var = self.beta(t)? * (1.0 - self.a_prev(t)) / (1.0 - a);
        Ok(var.max(0.0).sqrt())
    }

    /// Coefficients `(c_z, c_eps)` of the posterior mean `c_z·z_t − c_eps·ε̂`.
    pub fn posterior_coefficients(&self, t: usize) -> Result<(f64, f64)> {
        let a = self.a(t)?;
        let beta = self.beta(t)?;
        let alpha = 1.0 - beta;
        Ok((1.0 / alpha.sqrt(), beta / (alpha.sqrt() * (1.0 - a).sqrt())))
    }
}
