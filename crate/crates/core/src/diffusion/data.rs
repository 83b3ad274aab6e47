//! Corpus to training examples, and the training loop.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numkit::{Grid2D, Rng};
use crate::scenekit::{encode_latent, BBox, Manifest, SceneRecord};

use super::config::{PromptStyle, TrainConfig};
use super::model::{Conditions, ObjectCondition};
use super::params::DenoiserParams;
use super::schedule::DiffusionSchedule;
use super::text::{compose_prompt, tokenize};
use super::train::{
    condition_dropout, train_step, DropoutProbs, OptimizerState, TrainBatch, TrainExample,
};

/// One scene ready for training or evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSample {
    pub id: u64,
    pub latent: Grid2D,
    pub conds: Conditions,
    pub bboxes: Vec<BBox>,
}

/// Object texts under `style`: "red circle" or "circle".
pub fn object_texts(rec: &SceneRecord, style: PromptStyle) -> Vec<String> {
    rec.objects
        .iter()
        .map(|o| match style {
            PromptStyle::Full => o.text.clone(),
            PromptStyle::Shape => o.shape.clone(),
        })
        .collect()
}

/// Prompt and per-object conditions; the reference embedding of each object
/// is its cached image embedding. Objects beyond `max_refs` are dropped.
pub fn record_conditions(
    m: &Manifest,
    rec: &SceneRecord,
    style: PromptStyle,
    max_refs: usize,
) -> Result<Conditions> {
    let objs = m.objects(rec)?;
    let texts = object_texts(rec, style);
    let n = objs.len().min(max_refs);
    let prompt = tokenize(&compose_prompt(&texts[..n]))?;
    let objects = objs[..n]
        .iter()
        .zip(&texts)
        .map(|(o, t)| {
            Ok(ObjectCondition {
                tokens: tokenize(t)?,
                embedding: o.image_embedding.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Conditions::new(prompt, objects))
}

pub fn load_samples(m: &Manifest, style: PromptStyle, max_refs: usize) -> Result<Vec<SceneSample>> {
    m.records
        .par_iter()
        .map(|rec| {
            let img = m.load_image(rec)?;
            let n = rec.objects.len().min(max_refs);
            Ok(SceneSample {
                id: rec.id,
                latent: encode_latent(&img)?,
                conds: record_conditions(m, rec, style, max_refs)?,
                bboxes: rec.objects[..n].iter().map(|o| o.bbox()).collect(),
            })
        })
        .collect()
}

/// `batch` scenes drawn with replacement, each with a uniform timestep in
/// `[1, T]` and fresh noise.
pub fn draw_batch(
    samples: &[SceneSample],
    batch: usize,
    timesteps: usize,
    rng: &mut Rng,
) -> Result<TrainBatch> {
    if samples.is_empty() {
        return Err(Error::argument("no training samples"));
    }
    let examples = (0..batch)
        .map(|_| {
            let s = &samples[rng.below(0, samples.len())];
            let t = rng.below(1, timesteps + 1);
            let (r, c) = s.latent.shape();
            TrainExample {
                x0: s.latent.clone(),
                t,
                eps: rng.normal_grid(r, c),
                conds: s.conds.clone(),
                flags: Default::default(),
            }
        })
        .collect();
    Ok(TrainBatch { examples })
}

/// Runs `cfg.steps` optimizer steps. `on_step(step, loss, params)` is called
/// after every completed step; its error aborts the run. A numeric failure
/// leaves `params` at the last completed step.
pub fn train_loop(
    params: &mut DenoiserParams,
    samples: &[SceneSample],
    sched: &DiffusionSchedule,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(usize, f64, &DenoiserParams) -> Result<()>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let mut batches = root.derive("batches");
    let mut dropout = root.derive("dropout");
    let probs = DropoutProbs {
        text: cfg.p_drop_text,
        image: cfg.p_drop_image,
        both: cfg.p_drop_both,
    };
    let mut state = OptimizerState::new(params, cfg.weight_decay);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch = draw_batch(samples, cfg.batch, sched.timesteps, &mut batches)?;
        let batch = condition_dropout(&batch, &mut dropout, probs);
        let loss = train_step(params, &batch, &mut state, sched, cfg.lr, cfg.mode)?;
        losses.push(loss);
        on_step(step, loss, params)?;
    }
    Ok(losses)
}

/// Trailing moving average with window `w`.
pub fn smooth(xs: &[f64], w: usize) -> Vec<f64> {
    let w = w.max(1);
    (0..xs.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            xs[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}
