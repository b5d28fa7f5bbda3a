//! MAP optimisation of the hierarchical objective with AdamW.
//!
//! Every step draws one minibatch per task, computes each task's likelihood
//! gradient in its own graph, adds the closed-form prior gradients and
//! updates all `theta_d` and `Theta` with one shared learning rate.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{sample_batch, MultiTaskCorpus};
use crate::error::{Error, Result};
use crate::lora::{inject_with, AdapterSet, HierarchicalMean, LoraConfig, LowRankParams};
use crate::metrics::adapter_distance;
use crate::model::{windows, BaseModel};
use crate::objective::{log_prior, prior_grads, task_nll_and_grad, PriorConfig};
use crate::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub tau: f64,
    /// Learning rate per unit of `tau`.
    pub base_lr_constant: f64,
    /// Learning rate used when `tau == 0`.
    pub tau_zero_lr: f64,
    pub steps: usize,
    /// Predicted tokens per task per step (lower bound).
    pub batch_tokens: usize,
    pub adam: AdamWConfig,
    pub seed: u64,
    /// History is recorded every `log_every` steps and after the last one.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            tau: 0.0,
            base_lr_constant: 1e-5,
            tau_zero_lr: 1e-4,
            steps: 300,
            batch_tokens: 64,
            adam: AdamWConfig::default(),
            seed: 3,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        PriorConfig::new(self.tau)?;
        if !(self.base_lr_constant > 0.0) || !(self.tau_zero_lr > 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be positive".into()));
        }
        Ok(())
    }
}

/// `c * tau` for `tau > 0`, the configured floor at `tau == 0`.
pub fn lr_schedule(tau: f64, config: &TrainConfig) -> Result<f64> {
    PriorConfig::new(tau)?;
    Ok(if tau == 0.0 {
        config.tau_zero_lr
    } else {
        config.base_lr_constant * tau
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRecord {
    pub step: usize,
    pub tau: f64,
    pub lr: f64,
    /// Minibatch estimate of the log posterior before the update.
    pub objective: f64,
    /// Minibatch mean NLL per task before the update.
    pub nll: Vec<f64>,
    /// `||theta_d - Theta||_2` after the update.
    pub distance: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub task_names: Vec<String>,
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,tau,lr,objective");
        for n in &self.task_names {
            write!(s, ",nll_{n}").unwrap();
        }
        for n in &self.task_names {
            write!(s, ",dist_{n}").unwrap();
        }
        s.push('\n');
        for r in &self.records {
            write!(s, "{},{},{},{}", r.step, r.tau, r.lr, r.objective).unwrap();
            for v in r.nll.iter().chain(&r.distance) {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub thetas: Vec<AdapterSet>,
    pub mean: HierarchicalMean,
    pub history: TrainHistory,
    pub lr: f64,
}

/// Per-task sampling state. Seeded from the task id so that a task sees the
/// same batches whether it is trained alone or alongside others.
struct TaskStream<'a> {
    windows: Vec<&'a [usize]>,
    rng: ChaCha8Rng,
    scale: f64,
}

fn task_seed(seed: u64, task_id: usize) -> u64 {
    seed ^ (task_id as u64 + 1).wrapping_mul(0x2545_f491_4f6c_dd1d)
}

/// Full gradient of the negated objective (the loss the optimiser
/// minimises) plus the objective value and per-task NLLs.
pub struct StepGradients {
    pub task_grads: Vec<Vec<f64>>,
    pub mean_grad: Vec<f64>,
    pub objective: f64,
    pub nll: Vec<f64>,
}

/// Gradient of `-log posterior` from per-task likelihood graphs plus the
/// closed-form prior term.
pub fn step_gradients(
    model: &BaseModel,
    thetas: &[AdapterSet],
    mean: &HierarchicalMean,
    batches: &[Vec<&[usize]>],
    scales: &[f64],
    tau: f64,
) -> Result<StepGradients> {
    let mut task_grads = Vec::with_capacity(thetas.len());
    let mut nll = Vec::with_capacity(thetas.len());
    let mut objective = 0.0;
    for ((theta, batch), &scale) in thetas.iter().zip(batches).zip(scales) {
        let (n, g) = task_nll_and_grad(model, theta, batch, scale)?;
        objective -= scale * n;
        nll.push(n);
        task_grads.push(g);
    }
    let mut mean_grad = vec![0.0; mean.num_params()];
    if tau > 0.0 {
        let (pt, pm) = prior_grads(thetas, mean, tau)?;
        for (g, p) in task_grads.iter_mut().zip(pt) {
            for (gi, pi) in g.iter_mut().zip(p) {
                *gi -= pi;
            }
        }
        for (gi, pi) in mean_grad.iter_mut().zip(pm) {
            *gi -= pi;
        }
        objective += log_prior(thetas, mean, tau)?;
    }
    Ok(StepGradients {
        task_grads,
        mean_grad,
        objective,
        nll,
    })
}

fn split_by_tensor(flat: &[f64], sizes: &[usize]) -> Vec<Vec<f64>> {
    let mut off = 0;
    sizes
        .iter()
        .map(|&n| {
            let v = flat[off..off + n].to_vec();
            off += n;
            v
        })
        .collect()
}

/// Runs `config.steps` AdamW iterations on the hierarchical objective and
/// returns the final adapters, the hierarchical mean and the history.
pub fn train(
    corpus: &MultiTaskCorpus,
    model: &BaseModel,
    lora: &LoraConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if !model.is_frozen() {
        return Err(Error::Contract("finetuning requires a frozen base model".into()));
    }
    if corpus.tasks.is_empty() {
        return Err(Error::Data("corpus has no tasks".into()));
    }
    for t in &corpus.tasks {
        if t.train.is_empty() {
            return Err(Error::Data(format!("task {} has an empty training split", t.name)));
        }
    }
    let tau = config.tau;
    let lr = lr_schedule(tau, config)?;
    let init = inject_with(model, lora)?;
    let mut thetas: Vec<AdapterSet> = corpus
        .tasks
        .iter()
        .map(|t| init.clone().with_task(t.task_id))
        .collect();
    let mut mean = HierarchicalMean::from_adapters(&init);

    let ctx = model.config().context_length;
    let mut streams: Vec<TaskStream> = corpus
        .tasks
        .iter()
        .map(|t| TaskStream {
            windows: t.train_docs().flat_map(|d| windows(d, ctx)).collect(),
            rng: ChaCha8Rng::seed_from_u64(task_seed(config.seed, t.task_id)),
            scale: t.n_train_tokens() as f64,
        })
        .collect();
    let scales: Vec<f64> = streams.iter().map(|s| s.scale).collect();

    let sizes: Vec<usize> = init.layers.values().flat_map(|l| [l.a.len(), l.b.len()]).collect();
    let n_sets = thetas.len() + 1;
    let mut state = OptimizerState::new((0..n_sets).flat_map(|_| sizes.iter().copied()));
    let mut history = TrainHistory {
        task_names: corpus.tasks.iter().map(|t| t.name.clone()).collect(),
        records: Vec::new(),
    };

    for step in 0..config.steps {
        let batches: Vec<Vec<&[usize]>> = streams
            .iter_mut()
            .map(|s| sample_batch(&s.windows, config.batch_tokens, &mut s.rng))
            .collect();
        let sg = step_gradients(model, &thetas, &mean, &batches, &scales, tau)?;

        let mut grads: Vec<Vec<f64>> = Vec::with_capacity(n_sets * sizes.len());
        for g in &sg.task_grads {
            grads.extend(split_by_tensor(g, &sizes));
        }
        grads.extend(split_by_tensor(&sg.mean_grad, &sizes));

        let mut params: Vec<(String, &mut Tensor)> = Vec::with_capacity(grads.len());
        for theta in thetas.iter_mut() {
            let prefix = format!("task{}/", theta.task_id);
            params.extend(theta.factors_mut().into_iter().map(|(n, t)| (format!("{prefix}{n}"), t)));
        }
        params.extend(mean.factors_mut().into_iter().map(|(n, t)| (format!("mean/{n}"), t)));
        adamw_step(&mut params, &grads, &mut state, lr, &config.adam)?;

        let last = step + 1 == config.steps;
        if (step + 1) % config.log_every == 0 || last {
            let distance = thetas
                .iter()
                .map(|t| adapter_distance(t, &mean))
                .collect::<Result<Vec<_>>>()?;
            history.records.push(HistoryRecord {
                step: step + 1,
                tau,
                lr,
                objective: sg.objective,
                nll: sg.nll,
                distance,
            });
        }
    }
    Ok(TrainOutcome {
        thetas,
        mean,
        history,
        lr,
    })
}
