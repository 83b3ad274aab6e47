use crate::attention::RelevanceMap;
use crate::error::{Error, Result};
use crate::numkit::{Grid2D, Rng};

use super::model::{denoiser_forward, Conditions, ForwardOptions, TextNoise};
use super::params::DenoiserParams;
use super::schedule::{add_noise, DiffusionSchedule};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    Conditional,
    Unconditional,
}

/// Anything that predicts the noise in `x_t`.
pub trait NoisePredictor {
    fn predict(&mut self, x_t: &Grid2D, t: usize, step: usize, branch: Branch) -> Result<Grid2D>;
}

/// `ε_u + s (ε_c − ε_u)`; scale 1 returns `ε_c` and scale 0 returns `ε_u` exactly.
pub fn cfg_combine(eps_uncond: &Grid2D, eps_cond: &Grid2D, scale: f64) -> Result<Grid2D> {
    if eps_uncond.shape() != eps_cond.shape() {
        return Err(Error::Shape {
            op: "cfg_combine",
            left: eps_uncond.shape(),
            right: eps_cond.shape(),
        });
    }
    if scale == 1.0 {
        return Ok(eps_cond.clone());
    }
    if scale == 0.0 {
        return Ok(eps_uncond.clone());
    }
    eps_uncond.zip_with(eps_cond, "cfg_combine", |u, c| u + scale * (c - u))
}

#[derive(Clone, Debug)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    /// Start from a noised copy of this latent instead of pure noise,
    /// entering the chain at `strength · T`.
    pub init: Option<(Grid2D, f64)>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 7.5,
            init: None,
        }
    }
}

/// Deterministic DDIM (η = 0) with classifier-free guidance.
pub fn ddim_sample(
    predictor: &mut dyn NoisePredictor,
    sched: &DiffusionSchedule,
    cfg: &SamplerConfig,
    shape: (usize, usize),
    seed: u64,
) -> Result<Grid2D> {
    let mut ts = sched.ddim_timesteps(cfg.steps)?;
    let noise = Rng::new(seed)
        .derive("ddim-noise")
        .normal_grid(shape.0, shape.1);
    let mut x = match &cfg.init {
        None => noise,
        Some((init, strength)) => {
            if !(*strength > 0.0 && *strength <= 1.0) {
                return Err(Error::argument(format!(
                    "img2img strength {strength} outside (0, 1]"
                )));
            }
            if init.shape() != shape {
                return Err(Error::Shape {
                    op: "img2img init",
                    left: shape,
                    right: init.shape(),
                });
            }
            let t_max = (strength * sched.timesteps as f64).round() as usize;
            ts.retain(|&t| t <= t_max);
            let Some(&t0) = ts.first() else {
                return Ok(init.clone());
            };
            add_noise(init, &noise, t0, sched)?
        }
    };
    for (i, &t) in ts.iter().enumerate() {
        let t_prev = ts.get(i + 1).copied().unwrap_or(0);
        let eps = if cfg.guidance == 1.0 {
            predictor.predict(&x, t, i, Branch::Conditional)?
        } else {
            let u = predictor.predict(&x, t, i, Branch::Unconditional)?;
            let c = predictor.predict(&x, t, i, Branch::Conditional)?;
            cfg_combine(&u, &c, cfg.guidance)?
        };
        let (a, s) = (sched.alpha[t], sched.sigma[t]);
        let x0 = x.zip_with(&eps, "ddim x0", |xv, e| (xv - s * e) / a)?;
        x = if t_prev == 0 {
            x0
        } else {
            let (ap, sp) = (sched.alpha[t_prev], sched.sigma[t_prev]);
            x0.zip_with(&eps, "ddim step", |x0v, e| ap * x0v + sp * e)?
        };
        if !x.is_finite() {
            return Err(Error::NonFinite(format!("sampler state at t={t}")));
        }
    }
    Ok(x)
}

/// The denoiser as a [`NoisePredictor`] for one set of conditions.
pub struct ModelPredictor<'a> {
    pub params: &'a DenoiserParams,
    pub conds: Conditions,
    pub opts: ForwardOptions<'a>,
    pub text_noise: Option<TextNoise>,
    /// Inject `text_noise` only at this sampler step (all steps when `None`).
    pub noise_step: Option<usize>,
    /// Reuse the relevance maps of the first conditional step.
    pub freeze_relevance: bool,
    /// Keep the conditional branch's relevance and injection maps of every step.
    pub capture: bool,
    pub captured: Vec<Vec<Vec<RelevanceMap>>>,
    pub captured_injection: Vec<Vec<Vec<RelevanceMap>>>,
    frozen: Option<Vec<Vec<RelevanceMap>>>,
}

impl<'a> ModelPredictor<'a> {
    pub fn new(params: &'a DenoiserParams, conds: Conditions) -> Self {
        Self {
            params,
            conds,
            opts: ForwardOptions::default(),
            text_noise: None,
            noise_step: None,
            freeze_relevance: false,
            capture: false,
            captured: Vec::new(),
            captured_injection: Vec::new(),
            frozen: None,
        }
    }
}

impl NoisePredictor for ModelPredictor<'_> {
    fn predict(&mut self, x_t: &Grid2D, t: usize, step: usize, branch: Branch) -> Result<Grid2D> {
        match branch {
            Branch::Unconditional => {
                let u = self.conds.unconditional();
                let opts = ForwardOptions {
                    merge_mode: self.opts.merge_mode,
                    ..ForwardOptions::default()
                };
                Ok(denoiser_forward(self.params, x_t, t, &u, &opts)?.eps)
            }
            Branch::Conditional => {
                let mut opts = self.opts;
                if self.noise_step.map_or(true, |s| s == step) {
                    opts.text_noise = self.text_noise.as_ref();
                }
                if self.freeze_relevance {
                    if let Some(f) = &self.frozen {
                        opts.relevance_override = Some(f);
                    }
                }
                let out = denoiser_forward(self.params, x_t, t, &self.conds, &opts)?;
                if self.freeze_relevance && self.frozen.is_none() {
                    self.frozen = Some(out.maps.clone());
                }
                if self.capture {
                    self.captured.push(out.maps);
                    self.captured_injection.push(out.injection);
                }
                Ok(out.eps)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::make_schedule;

    /// Returns the exact noise of `x_t` relative to a known `x0`.
    struct Oracle(Grid2D, DiffusionSchedule);

    impl NoisePredictor for Oracle {
        fn predict(&mut self, x_t: &Grid2D, t: usize, _: usize, _: Branch) -> Result<Grid2D> {
            let (a, s) = (self.1.alpha[t], self.1.sigma[t]);
            x_t.zip_with(&self.0, "oracle", |x, x0| (x - a * x0) / s)
        }
    }

    #[test]
    fn cfg_identities() {
        let u = Grid2D::row_vector(&[1.0, -2.0, 0.5]);
        let c = Grid2D::row_vector(&[0.0, 4.0, 0.25]);
        assert!(cfg_combine(&u, &c, 1.0).unwrap().bit_eq(&c));
        assert!(cfg_combine(&u, &c, 0.0).unwrap().bit_eq(&u));
        let g = cfg_combine(&u, &c, 7.5).unwrap();
        // 1 + 7.5(0-1) = -6.5; -2 + 7.5*6 = 43; 0.5 + 7.5*(-0.25) = -1.375
        assert_eq!(g.data(), &[-6.5, 43.0, -1.375]);
    }

    #[test]
    fn oracle_recovers_x0() {
        let sched = make_schedule(1000).unwrap();
        let x0 = Rng::new(4).normal_grid(6, 3);
        for steps in [50, 1000] {
            let mut o = Oracle(x0.clone(), sched.clone());
            let cfg = SamplerConfig {
                steps,
                guidance: 7.5,
                init: None,
            };
            let out = ddim_sample(&mut o, &sched, &cfg, (6, 3), 9).unwrap();
            let tol = if steps == 1000 { 1e-5 } else { 1e-3 };
            assert!(
                out.max_abs_diff(&x0) < tol,
                "{steps}: {}",
                out.max_abs_diff(&x0)
            );
        }
    }

    #[test]
    fn img2img_entry_point() {
        let sched = make_schedule(1000).unwrap();
        let x0 = Rng::new(5).normal_grid(4, 2);
        let mut o = Oracle(x0.clone(), sched.clone());
        let cfg = SamplerConfig {
            steps: 50,
            guidance: 1.0,
            init: Some((x0.clone(), 0.3)),
        };
        let out = ddim_sample(&mut o, &sched, &cfg, (4, 2), 1).unwrap();
        assert!(out.max_abs_diff(&x0) < 1e-9);
        let bad = SamplerConfig {
            init: Some((x0, 0.0)),
            ..cfg
        };
        assert!(ddim_sample(&mut o, &sched, &bad, (4, 2), 1).is_err());
    }
}
