//! Held-out prompt benches and per-variant evaluation.

use image::RgbImage;
use rayon::prelude::*;

use crate::attention::RelevanceMap;
use crate::diffusion::text::{compose_prompt, tokenize};
use crate::diffusion::{
    ddim_sample, Conditions, DenoiserParams, DiffusionSchedule, MergeMode, ModelPredictor,
    ObjectCondition, PromptStyle, SamplerConfig, TextNoise,
};
use crate::error::{Error, Result};
use crate::numkit::{derive_seed, Grid2D, Rng};
use crate::scenekit::render::LAYOUT_GRAY;
use crate::scenekit::{
    bbox_coverage, crop, decode_latent, encode_latent, gen_scene, render, Embedder, Manifest,
    SceneSpec,
};

use super::metrics::{attention_overlap, image_match_score, text_match_score};
use super::report::{EvalReport, EvalRow};

/// One bench prompt: the ground-truth layout, its conditions and the gray
/// layout sketch sampling starts from.
#[derive(Clone, Debug)]
pub struct BenchItem {
    pub id: usize,
    pub spec: SceneSpec,
    /// Prompt naming colors and shapes, used for text matching.
    pub prompt: String,
    pub conds: Conditions,
    pub init: Grid2D,
    /// Object crops of the ground-truth rendering (the reference images).
    pub refs: Vec<RgbImage>,
}

/// Where img2img sampling starts for a bench item.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BenchInit {
    /// Every object drawn in neutral gray.
    Layout,
    /// The ground-truth scene itself.
    Scene,
}

impl std::str::FromStr for BenchInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "layout" => Ok(BenchInit::Layout),
            "scene" => Ok(BenchInit::Scene),
            _ => Err(Error::config(format!(
                "init must be layout|scene, got {s:?}"
            ))),
        }
    }
}

pub fn bench_item(
    id: usize,
    img: &RgbImage,
    spec: SceneSpec,
    style: PromptStyle,
    init: BenchInit,
    embedder: &dyn Embedder,
) -> Result<BenchItem> {
    let refs: Vec<RgbImage> = spec.objects.iter().map(|o| crop(&img, &o.bbox)).collect();
    let texts: Vec<String> = spec
        .objects
        .iter()
        .map(|o| match style {
            PromptStyle::Full => o.label(),
            PromptStyle::Shape => o.shape.clone(),
        })
        .collect();
    let conds = Conditions::new(
        tokenize(&compose_prompt(&texts))?,
        texts
            .iter()
            .zip(&refs)
            .map(|(t, r)| {
                Ok(ObjectCondition {
                    tokens: tokenize(t)?,
                    embedding: embedder.embed_image(r)?,
                })
            })
            .collect::<Result<_>>()?,
    );
    let init = match init {
        BenchInit::Layout => encode_latent(&render(&spec, Some(LAYOUT_GRAY))?)?,
        BenchInit::Scene => encode_latent(img)?,
    };
    Ok(BenchItem {
        id,
        prompt: spec.prompt(),
        spec,
        conds,
        init,
        refs,
    })
}

/// `n` held-out scenes with `objects` objects each.
pub fn build_bench(
    n: usize,
    objects: usize,
    seed: u64,
    style: PromptStyle,
    embedder: &dyn Embedder,
) -> Result<Vec<BenchItem>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = Rng::new(seed).derive_indexed("bench", i as u64);
            let (img, spec) = gen_scene(&mut rng, objects)?;
            bench_item(i, &img, spec, style, BenchInit::Layout, embedder)
        })
        .collect()
}

/// Bench items from a corpus on disk; at most `max_refs` objects per scene.
pub fn bench_from_manifest(
    m: &Manifest,
    style: PromptStyle,
    max_refs: usize,
    init: BenchInit,
    embedder: &dyn Embedder,
) -> Result<Vec<BenchItem>> {
    m.records
        .par_iter()
        .enumerate()
        .map(|(i, rec)| {
            let img = m.load_image(rec)?;
            let mut spec = rec.spec();
            spec.objects.truncate(max_refs);
            bench_item(i, &img, spec, style, init, embedder)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub latent: Grid2D,
    pub image: RgbImage,
    /// Conditional-branch relevance maps `[step][layer][object]`, when captured.
    pub maps: Vec<Vec<Vec<RelevanceMap>>>,
    /// Reference-feature injection maps `[step][layer][image]`, when captured.
    pub injection: Vec<Vec<Vec<RelevanceMap>>>,
}

#[derive(Clone, Debug, Default)]
pub struct GenerateOptions<'a> {
    pub merge: Option<MergeMode>,
    pub local_masks: Option<&'a [Vec<f64>]>,
    pub text_noise: Option<TextNoise>,
    pub noise_step: Option<usize>,
    pub capture: bool,
}

pub fn generate(
    params: &DenoiserParams,
    conds: &Conditions,
    sched: &DiffusionSchedule,
    sampler: &SamplerConfig,
    seed: u64,
    opts: GenerateOptions<'_>,
) -> Result<Generation> {
    let mut p = ModelPredictor::new(params, conds.clone());
    p.opts.merge_mode = opts.merge;
    p.opts.local_masks = opts.local_masks;
    p.text_noise = opts.text_noise;
    p.noise_step = opts.noise_step;
    p.capture = opts.capture;
    let c = &params.config;
    let latent = ddim_sample(
        &mut p,
        sched,
        sampler,
        (c.positions(), c.latent_channels),
        seed,
    )?;
    Ok(Generation {
        image: decode_latent(&latent)?,
        latent,
        maps: p.captured,
        injection: p.captured_injection,
    })
}

/// Mean pairwise overlap across objects, layers and sampler steps.
pub fn mean_pair_overlap(maps: &[Vec<Vec<RelevanceMap>>]) -> Result<Option<f64>> {
    let mut vals = Vec::new();
    for step in maps {
        for layer in step {
            for i in 0..layer.len() {
                for j in i + 1..layer.len() {
                    vals.push(attention_overlap(&layer[i], &layer[j])?);
                }
            }
        }
    }
    Ok((!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub steps: usize,
    pub guidance: f64,
    /// img2img strength from the layout sketch.
    pub strength: f64,
    pub seeds: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 7.5,
            strength: 0.5,
            seeds: 5,
            seed: 0,
        }
    }
}

impl EvalConfig {
    pub fn sampler(&self, init: &Grid2D) -> SamplerConfig {
        SamplerConfig {
            steps: self.steps,
            guidance: self.guidance,
            init: Some((init.clone(), self.strength)),
        }
    }

    pub fn sample_seed(&self, item: usize, k: usize) -> u64 {
        derive_seed(self.seed, &format!("sample/{item}/{k}"))
    }
}

/// A model plus the merge it is evaluated under.
#[derive(Clone, Debug)]
pub struct Variant<'a> {
    pub name: String,
    pub params: &'a DenoiserParams,
    pub merge: Option<MergeMode>,
    /// Restrict every image stream to its ground-truth box.
    pub local: bool,
}

/// One row per (item, seed) with text match, image match and overlap.
pub fn evaluate_variant(
    v: &Variant<'_>,
    items: &[BenchItem],
    sched: &DiffusionSchedule,
    cfg: &EvalConfig,
    embedder: &dyn Embedder,
) -> Result<Vec<EvalRow>> {
    if items.is_empty() || cfg.seeds == 0 {
        return Err(Error::argument(
            "evaluation needs items and at least one seed",
        ));
    }
    let jobs: Vec<(usize, usize)> = (0..items.len())
        .flat_map(|i| (0..cfg.seeds).map(move |k| (i, k)))
        .collect();
    jobs.par_iter()
        .map(|&(i, k)| {
            let it = &items[i];
            let masks: Vec<Vec<f64>> = it
                .spec
                .objects
                .iter()
                .map(|o| bbox_coverage(&o.bbox))
                .collect();
            let g = generate(
                v.params,
                &it.conds,
                sched,
                &cfg.sampler(&it.init),
                cfg.sample_seed(it.id, k),
                GenerateOptions {
                    merge: v.merge,
                    local_masks: v.local.then_some(masks.as_slice()),
                    capture: true,
                    ..Default::default()
                },
            )?;
            let crops: Vec<RgbImage> = it
                .spec
                .objects
                .iter()
                .map(|o| crop(&g.image, &o.bbox))
                .collect();
            Ok(EvalRow {
                variant: v.name.clone(),
                item: it.id,
                seed: k,
                object_relevance: None,
                text_match: Some(text_match_score(
                    std::slice::from_ref(&g.image),
                    std::slice::from_ref(&it.prompt),
                    embedder,
                )?),
                image_match: Some(image_match_score(&crops, &it.refs, embedder)?),
                attention_overlap: mean_pair_overlap(&g.injection)?,
            })
        })
        .collect()
}

/// Every variant on the same bench, seeds and sampler settings.
pub fn run_merge_ablation(
    variants: &[Variant<'_>],
    items: &[BenchItem],
    sched: &DiffusionSchedule,
    cfg: &EvalConfig,
    embedder: &dyn Embedder,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    for v in variants {
        rows.extend(evaluate_variant(v, items, sched, cfg, embedder)?);
    }
    Ok(EvalReport { rows })
}
