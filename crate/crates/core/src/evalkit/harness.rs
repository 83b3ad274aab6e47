//! Object-relevance verification: perturb `Z_text` for one object and
//! measure where the generated pixels move.

use rayon::prelude::*;

use crate::diffusion::{DenoiserParams, DiffusionSchedule, TextNoise};
use crate::error::{Error, Result};
use crate::numkit::Rng;

use super::bench::{generate, BenchItem, EvalConfig, GenerateOptions};
use super::metrics::bbox_delta;
use super::noise::NoiseStrategy;
use super::report::EvalRow;

/// Per-image ratios whose outside-box change falls below this are skipped.
pub const MIN_DENOMINATOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct RelevanceExperimentConfig {
    pub strategy: NoiseStrategy,
    pub noise_scale: f64,
    pub seed: u64,
    /// Layers whose `Z_text` receives noise.
    pub layers: Vec<usize>,
    /// Object whose relevance map shapes the noise; clamped to the last object.
    pub target: usize,
    /// Inject at this sampler step only; every step when `None`.
    pub single_step: Option<usize>,
    pub sampler: EvalConfig,
    pub min_prompts: usize,
}

impl Default for RelevanceExperimentConfig {
    fn default() -> Self {
        Self {
            strategy: NoiseStrategy::Weighted,
            noise_scale: 1.0,
            seed: 0,
            layers: Vec::new(),
            target: 0,
            single_step: None,
            sampler: EvalConfig {
                seeds: 1,
                ..EvalConfig::default()
            },
            min_prompts: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HarnessResult {
    pub strategy: NoiseStrategy,
    pub score: f64,
    /// Per-prompt ratio, `None` where skipped.
    pub ratios: Vec<Option<f64>>,
    pub skipped: usize,
}

impl HarnessResult {
    pub fn rows(&self, variant: &str) -> Vec<EvalRow> {
        self.ratios
            .iter()
            .enumerate()
            .map(|(i, r)| EvalRow {
                variant: variant.to_string(),
                item: i,
                seed: 0,
                object_relevance: *r,
                text_match: None,
                image_match: None,
                attention_overlap: None,
            })
            .collect()
    }
}

/// Same-seed noise/no-noise pair per prompt; the score is the mean over
/// prompts of `Δ_bbox / Δ_non_bbox` at the target's ground-truth box.
pub fn relevance_score_harness(
    params: &DenoiserParams,
    items: &[BenchItem],
    sched: &DiffusionSchedule,
    cfg: &RelevanceExperimentConfig,
) -> Result<HarnessResult> {
    if !(cfg.noise_scale > 0.0) || !cfg.noise_scale.is_finite() {
        return Err(Error::argument(format!(
            "noise_scale must be positive, got {} (a zero scale makes every ratio 0/0)",
            cfg.noise_scale
        )));
    }
    if items.len() < cfg.min_prompts {
        return Err(Error::Harness(format!(
            "{} prompts given, at least {} needed",
            items.len(),
            cfg.min_prompts
        )));
    }
    let c = &params.config;
    let layers: Vec<usize> = if cfg.layers.is_empty() {
        (0..c.layers).collect()
    } else {
        cfg.layers.clone()
    };
    if let Some(&l) = layers.iter().find(|&&l| l >= c.layers) {
        return Err(Error::argument(format!("layer {l} out of range")));
    }
    let ratios = items
        .par_iter()
        .map(|it| -> Result<Option<f64>> {
            if it.spec.objects.is_empty() {
                return Ok(None);
            }
            let target = cfg.target.min(it.spec.objects.len() - 1);
            let seed = cfg.sampler.sample_seed(it.id, 0);
            let mut rng = Rng::new(cfg.seed).derive_indexed("text-noise", it.id as u64);
            let noise = TextNoise {
                layers: layers.clone(),
                eps: layers
                    .iter()
                    .map(|_| rng.normal_grid(c.positions(), c.dim).scale(cfg.noise_scale))
                    .collect(),
                strategy: cfg.strategy,
                target,
            };
            let sampler = cfg.sampler.sampler(&it.init);
            let clean = generate(
                params,
                &it.conds,
                sched,
                &sampler,
                seed,
                GenerateOptions::default(),
            )?;
            let noisy = generate(
                params,
                &it.conds,
                sched,
                &sampler,
                seed,
                GenerateOptions {
                    text_noise: Some(noise),
                    noise_step: cfg.single_step,
                    ..Default::default()
                },
            )?;
            Ok(
                match bbox_delta(&noisy.image, &clean.image, &it.spec.objects[target].bbox)? {
                    Some((din, dout)) if dout >= MIN_DENOMINATOR => Some(din / dout),
                    _ => None,
                },
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let kept: Vec<f64> = ratios.iter().flatten().copied().collect();
    if kept.is_empty() {
        return Err(Error::Harness(format!(
            "all {} prompts skipped",
            items.len()
        )));
    }
    Ok(HarnessResult {
        strategy: cfg.strategy,
        score: kept.iter().sum::<f64>() / kept.len() as f64,
        skipped: ratios.len() - kept.len(),
        ratios,
    })
}
