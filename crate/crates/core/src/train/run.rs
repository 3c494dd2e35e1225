use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{adamw_step, lr_at, AdamState, Checkpoint, Classifier, TrainConfig, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::real::Real;
use crate::stss::FeatureMap;
use crate::synthdata::MotionClip;
use crate::tensor::{Mode, ParamStore, Tensor};

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricLine {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub per_class: Vec<f64>,
    pub count: usize,
    pub predictions: Vec<usize>,
}

/// Precomputed features and labels.
#[derive(Debug, Clone)]
pub struct Split<T> {
    pub features: Vec<FeatureMap<T>>,
    pub labels: Vec<usize>,
}

impl<T: Real> Split<T> {
    pub fn from_clips(model: &Classifier<T>, clips: &[MotionClip]) -> Result<Self> {
        Ok(Split {
            features: clips.iter().map(|c| model.features(c)).collect::<Result<_>>()?,
            labels: clips.iter().map(|c| c.label.index()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub params: ParamStore<T>,
    pub metrics: Vec<MetricLine>,
    pub eval: Option<EvalReport>,
}

/// Held-out accuracy with batch norm in eval mode. Clips run in parallel
/// under `exec`, each with sequential kernels.
pub fn evaluate<T: Real>(model: &Classifier<T>, params: &ParamStore<T>, data: &Split<T>, exec: Exec) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Input("evaluation split is empty".into()));
    }
    let logits = exec.map(data.len(), |i| model.logits(&data.features[i], params, Mode::Eval, Exec::Sequential));
    let mut predictions = Vec::with_capacity(data.len());
    for z in logits {
        let z = z?;
        // first maximum wins ties
        let best = (0..z.len()).fold(0, |b, i| if z[i] > z[b] { i } else { b });
        predictions.push(best);
    }
    let mut hit = [0usize; NUM_CLASSES];
    let mut total = [0usize; NUM_CLASSES];
    for (&p, &y) in predictions.iter().zip(&data.labels) {
        total[y] += 1;
        hit[y] += (p == y) as usize;
    }
    let correct: usize = hit.iter().sum();
    Ok(EvalReport {
        accuracy: correct as f64 / data.len() as f64,
        per_class: (0..NUM_CLASSES)
            .map(|k| if total[k] == 0 { 0.0 } else { hit[k] as f64 / total[k] as f64 })
            .collect(),
        count: data.len(),
        predictions,
    })
}

/// Options that do not change the result.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub exec: Exec,
    /// Written after every evaluation and at the end.
    pub checkpoint: Option<PathBuf>,
}

/// AdamW training over mini-batches drawn from seeded per-pass shuffles.
///
/// Batch items run forward and backward independently (batch-norm
/// statistics per clip); gradients are averaged and running statistics
/// combined in batch order, so the result does not depend on `opts.exec`.
pub fn train_loop<T: Real>(
    model: &Classifier<T>,
    mut params: ParamStore<T>,
    cfg: &TrainConfig,
    train: &Split<T>,
    held_out: Option<&Split<T>>,
    opts: &RunOptions,
    sink: &mut dyn FnMut(&MetricLine) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Input("training split is empty".into()));
    }
    let opt = cfg.adamw();
    let mut state = AdamState::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut metrics = Vec::with_capacity(cfg.iters);
    let mut last_eval = None;
    let inv_b = 1.0 / cfg.batch as f64;

    for iter in 0..cfg.iters {
        let batch: Vec<usize> = (0..cfg.batch)
            .map(|_| {
                if order.is_empty() {
                    order = (0..train.len()).collect();
                    order.shuffle(&mut rng);
                    order.reverse();
                }
                order.pop().expect("refilled")
            })
            .collect();
        let items = opts.exec.map(batch.len(), |k| {
            let i = batch[k];
            model.step(&train.features[i], train.labels[i], cfg.label_smoothing, &params, Exec::Sequential)
        });

        let mut loss = 0.0;
        let mut grads: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        let mut running: BTreeMap<String, Tensor<T>> = BTreeMap::new();
        for item in items {
            let (l, g, bw) = match item {
                Err(Error::Degenerate(_)) => return Err(Error::NonFiniteLoss { iter }),
                other => other?,
            };
            loss += l * inv_b;
            for (name, d) in bw.params {
                match grads.get_mut(&name) {
                    Some(acc) => acc.add_assign(&d)?,
                    None => {
                        grads.insert(name, d);
                    }
                }
            }
            for (name, v) in g.running_updates() {
                match running.get_mut(name) {
                    Some(acc) => acc.add_assign(v)?,
                    None => {
                        running.insert(name.clone(), v.clone());
                    }
                }
            }
        }
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iter });
        }
        params.zero_grads();
        for (name, g) in &grads {
            params.accumulate_grad(name, &g.scale(T::of(inv_b)))?;
        }
        let lr = lr_at(iter, cfg);
        adamw_step(&mut params, &mut state, iter + 1, lr, &opt)?;
        for (name, v) in running {
            params.set_value(&name, v.scale(T::of(inv_b)))?;
        }

        let due = cfg.eval_every > 0 && (iter + 1) % cfg.eval_every == 0 || iter + 1 == cfg.iters;
        let mut line = MetricLine {
            iter,
            loss,
            lr,
            eval_acc: None,
        };
        if due {
            if let Some(h) = held_out {
                let report = evaluate(model, &params, h, opts.exec)?;
                line.eval_acc = Some(report.accuracy);
                last_eval = Some(report);
            }
            if let Some(path) = &opts.checkpoint {
                let mut all = metrics.clone();
                all.push(line.clone());
                Checkpoint::new(model.config.clone(), cfg.clone(), params.clone(), &all, last_eval.as_ref()).save(path)?;
            }
        }
        sink(&line)?;
        metrics.push(line);
    }
    Ok(TrainOutcome {
        params,
        metrics,
        eval: last_eval,
    })
}
