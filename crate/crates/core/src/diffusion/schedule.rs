use crate::error::{Error, Result};
use crate::numkit::Grid2D;

pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;

/// Linear-β DDPM noise schedule with `α_t = √∏(1-β_s)` and `σ_t = √(1-α_t²)`.
///
/// Index 0 is the clean sample: `α_0 = 1`, `σ_0 = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub timesteps: usize,
    pub alpha: Vec<f64>,
    pub sigma: Vec<f64>,
}

pub fn make_schedule(timesteps: usize) -> Result<DiffusionSchedule> {
    if timesteps == 0 {
        return Err(Error::argument("schedule needs at least one step"));
    }
    let mut alpha = Vec::with_capacity(timesteps + 1);
    let mut sigma = Vec::with_capacity(timesteps + 1);
    alpha.push(1.0);
    sigma.push(0.0);
    let mut cumprod = 1.0f64;
    for s in 1..=timesteps {
        let beta = if timesteps == 1 {
            BETA_START
        } else {
            BETA_START + (BETA_END - BETA_START) * (s - 1) as f64 / (timesteps - 1) as f64
        };
        cumprod *= 1.0 - beta;
        alpha.push(cumprod.sqrt());
        sigma.push((1.0 - cumprod).sqrt());
    }
    Ok(DiffusionSchedule {
        timesteps,
        alpha,
        sigma,
    })
}

impl DiffusionSchedule {
    pub fn check_t(&self, t: usize) -> Result<()> {
        if t > self.timesteps {
            return Err(Error::argument(format!(
                "timestep {t} outside [0, {}]",
                self.timesteps
            )));
        }
        Ok(())
    }

    /// Descending timesteps `T, T-s, ..., s` for `steps` evenly strided DDIM steps.
    pub fn ddim_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        if steps == 0 || steps > self.timesteps {
            return Err(Error::argument(format!(
                "sampler steps {steps} outside [1, {}]",
                self.timesteps
            )));
        }
        let mut ts: Vec<usize> = (1..=steps)
            .map(|k| (k * self.timesteps + steps / 2) / steps)
            .collect();
        ts.dedup();
        ts.reverse();
        Ok(ts)
    }
}

/// `x_t = α_t x_0 + σ_t ε`.
pub fn add_noise(x0: &Grid2D, eps: &Grid2D, t: usize, sched: &DiffusionSchedule) -> Result<Grid2D> {
    sched.check_t(t)?;
    let (a, s) = (sched.alpha[t], sched.sigma[t]);
    x0.zip_with(eps, "add_noise", |x, e| a * x + s * e)
}
