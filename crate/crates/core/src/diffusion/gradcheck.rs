use crate::error::Result;
use crate::numkit::relative_error;

use super::config::TrainMode;
use super::params::{is_trainable, DenoiserParams};
use super::schedule::DiffusionSchedule;
use super::train::{loss_and_grads, training_loss, TrainBatch};

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_tensor: String,
    pub entries: usize,
}

/// Central-difference check of the training-loss gradient for every entry of
/// the tensors selected by `select` (and trainable under `mode`).
pub fn check_model_gradients(
    params: &DenoiserParams,
    batch: &TrainBatch,
    sched: &DiffusionSchedule,
    mode: TrainMode,
    select: &dyn Fn(&str) -> bool,
    eps: f64,
) -> Result<GradCheckReport> {
    let (_, grads) = loss_and_grads(batch, params, sched, mode)?;
    let names: Vec<String> = params
        .tensors()
        .iter()
        .map(|t| t.name.clone())
        .filter(|n| select(n) && is_trainable(n, mode))
        .collect();
    let mut report = GradCheckReport::default();
    let mut work = params.clone();
    for name in &names {
        let len = params
            .tensors()
            .iter()
            .find(|t| &t.name == name)
            .map_or(0, |t| t.data.len());
        let analytic: Vec<f64> = grads
            .tensors()
            .iter()
            .find(|t| &t.name == name)
            .map(|t| t.data.to_vec())
            .unwrap_or_default();
        for k in 0..len {
            let orig = nudge(&mut work, name, k, None);
            nudge(&mut work, name, k, Some(orig + eps));
            let up = training_loss(batch, &work, sched)?;
            nudge(&mut work, name, k, Some(orig - eps));
            let down = training_loss(batch, &work, sched)?;
            nudge(&mut work, name, k, Some(orig));
            let rel = relative_error(analytic[k], (up - down) / (2.0 * eps));
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_tensor = format!("{name}[{k}]");
            }
            report.entries += 1;
        }
    }
    Ok(report)
}

fn nudge(p: &mut DenoiserParams, name: &str, k: usize, value: Option<f64>) -> f64 {
    let mut old = 0.0;
    for t in p.tensors_mut() {
        if t.name == name {
            old = t.data[k];
            if let Some(v) = value {
                t.data[k] = v;
            }
        }
    }
    old
}
