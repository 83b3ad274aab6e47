use crate::error::{Error, Result};
use crate::numkit::backward::mse_backward;
use crate::numkit::{mse, Grid2D, Rng};

use super::config::TrainMode;
use super::model::{backward, forward_traced, Conditions, ForwardOptions};
use super::params::{is_trainable, DenoiserParams};
use super::schedule::{add_noise, DiffusionSchedule};

/// Which condition-dropout draws fired for one example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DropFlags {
    pub text: bool,
    pub image: bool,
    pub both: bool,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutProbs {
    pub text: f64,
    pub image: f64,
    pub both: f64,
}

impl Default for DropoutProbs {
    fn default() -> Self {
        Self {
            text: 0.05,
            image: 0.05,
            both: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainExample {
    pub x0: Grid2D,
    pub t: usize,
    pub eps: Grid2D,
    pub conds: Conditions,
    pub flags: DropFlags,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainBatch {
    pub examples: Vec<TrainExample>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

/// Three independent draws per example, always consumed in the same order:
/// text-only, image-only and joint. A dropped text becomes the null prompt;
/// dropped images leave the reference list empty.
pub fn condition_dropout(batch: &TrainBatch, rng: &mut Rng, p: DropoutProbs) -> TrainBatch {
    let mut out = batch.clone();
    for ex in out.examples.iter_mut() {
        let flags = DropFlags {
            text: rng.uniform() < p.text,
            image: rng.uniform() < p.image,
            both: rng.uniform() < p.both,
        };
        ex.conds.drop_text |= flags.text || flags.both;
        ex.conds.drop_images |= flags.image || flags.both;
        ex.flags = flags;
    }
    out
}

fn check_example(ex: &TrainExample, sched: &DiffusionSchedule) -> Result<()> {
    if ex.t == 0 || ex.t > sched.timesteps {
        return Err(Error::argument(format!(
            "training timestep {} outside [1, {}]",
            ex.t, sched.timesteps
        )));
    }
    if ex.x0.shape() != ex.eps.shape() {
        return Err(Error::Shape {
            op: "x0 vs eps",
            left: ex.x0.shape(),
            right: ex.eps.shape(),
        });
    }
    Ok(())
}

/// Mean over the batch of `mse(ε, ε_θ(x_t, c, t))`.
pub fn training_loss(
    batch: &TrainBatch,
    params: &DenoiserParams,
    sched: &DiffusionSchedule,
) -> Result<f64> {
    loss_with(batch, sched, |x_t, ex| {
        Ok(forward_traced(params, x_t, ex.t, &ex.conds, &ForwardOptions::default())?.0)
    })
}

/// Same loss with an arbitrary noise predictor in place of the denoiser.
pub fn loss_with(
    batch: &TrainBatch,
    sched: &DiffusionSchedule,
    mut predict: impl FnMut(&Grid2D, &TrainExample) -> Result<Grid2D>,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::argument("empty batch"));
    }
    let mut total = 0.0;
    for ex in &batch.examples {
        check_example(ex, sched)?;
        let x_t = add_noise(&ex.x0, &ex.eps, ex.t, sched)?;
        total += mse(&predict(&x_t, ex)?, &ex.eps)?;
    }
    Ok(total / batch.len() as f64)
}

/// Loss and its gradient for every tensor trainable under `mode`; other
/// gradient entries stay zero.
pub fn loss_and_grads(
    batch: &TrainBatch,
    params: &DenoiserParams,
    sched: &DiffusionSchedule,
    mode: TrainMode,
) -> Result<(f64, DenoiserParams)> {
    if batch.is_empty() {
        return Err(Error::argument("empty batch"));
    }
    let mut grads = params.zeros_like();
    let inv_b = 1.0 / batch.len() as f64;
    let mut total = 0.0;
    for ex in &batch.examples {
        check_example(ex, sched)?;
        let x_t = add_noise(&ex.x0, &ex.eps, ex.t, sched)?;
        let (eps_hat, trace) =
            forward_traced(params, &x_t, ex.t, &ex.conds, &ForwardOptions::default())?;
        total += mse(&eps_hat, &ex.eps)?;
        let d_eps = mse_backward(&eps_hat, &ex.eps)?.scale(inv_b);
        backward(params, &trace, &d_eps, &mut grads, mode)?;
    }
    Ok((total * inv_b, grads))
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            step: 0,
        }
    }
}

impl AdamW {
    /// Advances the step counter; call once per optimizer step before `update`.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    pub fn update(&self, p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], lr: f64) {
        let t = self.step.max(1) as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for i in 0..p.len() {
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            p[i] -= lr * (mh / (vh.sqrt() + self.eps) + self.weight_decay * p[i]);
        }
    }
}

/// Optimizer moments for a parameter set.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    pub adam: AdamW,
    pub m: DenoiserParams,
    pub v: DenoiserParams,
}

impl OptimizerState {
    pub fn new(params: &DenoiserParams, weight_decay: f64) -> Self {
        Self {
            adam: AdamW {
                weight_decay,
                ..AdamW::default()
            },
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }
}

/// One AdamW step on the tensors trainable under `mode`. Updated values are
/// stored at 32-bit precision. A non-finite loss, gradient or updated
/// parameter leaves `params` and `state` as they were.
pub fn train_step(
    params: &mut DenoiserParams,
    batch: &TrainBatch,
    state: &mut OptimizerState,
    sched: &DiffusionSchedule,
    lr: f64,
    mode: TrainMode,
) -> Result<f64> {
    let (loss, grads) = loss_and_grads(batch, params, sched, mode)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!(
            "loss {loss} at optimizer step {}",
            state.adam.step + 1
        )));
    }
    if let Some(bad) = grads
        .tensors()
        .iter()
        .find(|t| t.data.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::NonFinite(format!(
            "gradient of {} at optimizer step {}",
            bad.name,
            state.adam.step + 1
        )));
    }
    let before = params.clone();
    let moments = (state.m.clone(), state.v.clone(), state.adam.clone());
    state.adam.begin_step();
    let adam = state.adam.clone();
    let gs = grads.tensors();
    let ms = state.m.tensors_mut();
    let vs = state.v.tensors_mut();
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(gs).zip(ms).zip(vs) {
        if !is_trainable(&p.name, mode) {
            continue;
        }
        adam.update(p.data, g.data, m.data, v.data, lr);
        for x in p.data.iter_mut() {
            *x = *x as f32 as f64;
        }
    }
    if !params.is_finite() {
        let step = state.adam.step;
        *params = before;
        (state.m, state.v, state.adam) = moments;
        return Err(Error::NonFinite(format!(
            "parameters after optimizer step {step}"
        )));
    }
    Ok(loss)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy_batch(n: usize) -> TrainBatch {
        let ex = TrainExample {
            x0: Grid2D::zeros(1, 1),
            t: 1,
            eps: Grid2D::zeros(1, 1),
            conds: Conditions::new(vec![1], vec![]),
            flags: DropFlags::default(),
        };
        TrainBatch {
            examples: vec![ex; n],
        }
    }

    #[test]
    fn dropout_extremes() {
        let b = dummy_batch(20);
        let mut rng = Rng::new(0);
        let none = condition_dropout(
            &b,
            &mut rng,
            DropoutProbs {
                text: 0.0,
                image: 0.0,
                both: 0.0,
            },
        );
        assert_eq!(none, b);
        let all = condition_dropout(
            &b,
            &mut rng,
            DropoutProbs {
                text: 1.0,
                image: 1.0,
                both: 1.0,
            },
        );
        assert!(all
            .examples
            .iter()
            .all(|e| e.conds.drop_text && e.conds.drop_images));
    }

    #[test]
    fn adam_quadratic_converges() {
        let target = [1.5, -0.25, 3.0, 0.0, -2.0];
        let mut p = vec![0.0; 5];
        let (mut m, mut v) = (vec![0.0; 5], vec![0.0; 5]);
        let mut adam = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        for _ in 0..2000 {
            let g: Vec<f64> = p.iter().zip(&target).map(|(x, c)| 2.0 * (x - c)).collect();
            adam.begin_step();
            adam.update(&mut p, &g, &mut m, &mut v, 0.05);
        }
        for (x, c) in p.iter().zip(&target) {
            assert!((x - c).abs() < 1e-6, "{x} vs {c}");
        }
    }

    #[test]
    fn weight_decay_shrinks_with_zero_gradient() {
        let mut p = vec![2.0];
        let adam = AdamW {
            step: 1,
            ..AdamW::default()
        };
        adam.update(&mut p, &[0.0], &mut [0.0], &mut [0.0], 0.1);
        assert!((p[0] - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
    }
}
