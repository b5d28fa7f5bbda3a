//! The hierarchical MAP objective.
//!
//! ```text
//! log p(theta_1..D, Theta | data, tau)
//!     = sum_d s_d * mean_loglik_d(theta_d)  -  (tau / 2) sum_d ||theta_d - Theta||^2  + const
//! ```
//!
//! `s_d` is the task's training token count, so a minibatch mean scales up to
//! an estimate of the full-data log likelihood. The Gaussian normalising
//! constant and the flat hyperprior on `Theta` are constants and omitted.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::lora::{AdapterSet, HierarchicalMean, LowRankParams};
use crate::model::{batch_nll, BaseModel, BoundAdapters};

/// Prior precision `tau >= 0`; zero is the flat prior.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PriorConfig {
    pub tau: f64,
}

impl PriorConfig {
    pub fn new(tau: f64) -> Result<Self> {
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(Error::Config(format!("precision tau = {tau} must be finite and >= 0")));
        }
        Ok(Self { tau })
    }
}

fn check_shapes(thetas: &[AdapterSet], mean: &HierarchicalMean) -> Result<()> {
    for t in thetas {
        if !t.same_structure(mean) {
            return Err(Error::dim(
                "hierarchical prior",
                &[mean.num_params()],
                &[t.num_params()],
            ));
        }
    }
    Ok(())
}

/// `-(tau / 2) * sum_d ||theta_d - Theta||^2`.
pub fn log_prior(thetas: &[AdapterSet], mean: &HierarchicalMean, tau: f64) -> Result<f64> {
    let prior = PriorConfig::new(tau)?;
    check_shapes(thetas, mean)?;
    let center = mean.as_vector();
    let sq: f64 = thetas
        .iter()
        .map(|t| {
            t.as_vector()
                .iter()
                .zip(&center)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    Ok(-0.5 * prior.tau * sq)
}

/// Closed-form gradients of [`log_prior`]:
/// `d/d theta_d = -tau (theta_d - Theta)` and
/// `d/d Theta = tau * sum_d (theta_d - Theta)`.
pub fn prior_grads(
    thetas: &[AdapterSet],
    mean: &HierarchicalMean,
    tau: f64,
) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    let prior = PriorConfig::new(tau)?;
    check_shapes(thetas, mean)?;
    let center = mean.as_vector();
    let mut mean_grad = vec![0.0; center.len()];
    let task_grads = thetas
        .iter()
        .map(|t| {
            t.as_vector()
                .iter()
                .zip(&center)
                .zip(mean_grad.iter_mut())
                .map(|((a, c), mg)| {
                    let dev = a - c;
                    *mg += prior.tau * dev;
                    -prior.tau * dev
                })
                .collect()
        })
        .collect();
    Ok((task_grads, mean_grad))
}

/// Recorded log posterior with handles to its parameter leaves.
#[derive(Debug)]
pub struct PosteriorGraph {
    pub graph: Graph,
    pub objective: Var,
    /// Per task, the factor leaves in canonical vector order.
    pub task_vars: Vec<Vec<Var>>,
    pub mean_vars: Vec<Var>,
}

impl PosteriorGraph {
    pub fn value(&self) -> f64 {
        self.graph.value(self.objective).item()
    }

    /// Flat gradients of the log posterior for every task and for `Theta`.
    pub fn gradients(&self) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        let grads = self.graph.backward(self.objective)?;
        let flat = |vars: &[Var]| -> Vec<f64> { vars.iter().flat_map(|v| grads.wrt(*v).into_data()).collect() };
        Ok((
            self.task_vars.iter().map(|v| flat(v)).collect(),
            flat(&self.mean_vars),
        ))
    }
}

/// Builds the log posterior as a differentiable graph over every `theta_d`
/// and `Theta`. A task with an empty batch contributes only its prior term.
pub fn log_posterior(
    batches: &[Vec<&[usize]>],
    model: &BaseModel,
    thetas: &[AdapterSet],
    mean: &HierarchicalMean,
    tau: f64,
    scales: &[f64],
) -> Result<PosteriorGraph> {
    let prior = PriorConfig::new(tau)?;
    check_shapes(thetas, mean)?;
    if batches.len() != thetas.len() || scales.len() != thetas.len() {
        return Err(Error::dim(
            "log_posterior",
            &[thetas.len()],
            &[batches.len(), scales.len()],
        ));
    }
    let mut g = Graph::new();
    let base = model.bind(&mut g, false);
    let bound_mean = BoundAdapters::bind(&mut g, mean, true);
    let mut terms: Vec<Var> = Vec::new();
    let mut task_vars = Vec::with_capacity(thetas.len());
    let mut bound_tasks = Vec::with_capacity(thetas.len());
    for ((theta, batch), &scale) in thetas.iter().zip(batches).zip(scales) {
        let bound = BoundAdapters::bind(&mut g, theta, true);
        if !batch.is_empty() {
            let nll = batch_nll(&mut g, model, &base, Some(&bound), batch)?;
            terms.push(g.scale(nll, -scale));
        }
        task_vars.push(bound.ordered_vars());
        bound_tasks.push(bound);
    }
    if prior.tau > 0.0 {
        let mean_vars = bound_mean.ordered_vars();
        let mut sq: Option<Var> = None;
        for vars in &task_vars {
            for (&tv, &mv) in vars.iter().zip(&mean_vars) {
                let d = g.sub(tv, mv)?;
                let d2 = g.mul(d, d)?;
                let s = g.sum(d2);
                sq = Some(match sq {
                    Some(acc) => g.add(acc, s)?,
                    None => s,
                });
            }
        }
        if let Some(sq) = sq {
            terms.push(g.scale(sq, -0.5 * prior.tau));
        }
    }
    let objective = match terms.split_first() {
        Some((&first, rest)) => {
            let mut acc = first;
            for &t in rest {
                acc = g.add(acc, t)?;
            }
            acc
        }
        None => g.constant(crate::tensor::Tensor::scalar(0.0)),
    };
    Ok(PosteriorGraph {
        graph: g,
        objective,
        task_vars,
        mean_vars: bound_mean.ordered_vars(),
    })
}

/// One task's scaled minibatch NLL `s_d * mean_nll` and its gradient with
/// respect to the task's flat adapter vector. This is the likelihood half of
/// the negated objective; the trainer adds the closed-form prior half.
pub fn task_nll_and_grad(
    model: &BaseModel,
    theta: &AdapterSet,
    batch: &[&[usize]],
    scale: f64,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Ok((0.0, vec![0.0; theta.num_params()]));
    }
    let mut g = Graph::new();
    let base = model.bind(&mut g, false);
    let bound = BoundAdapters::bind(&mut g, theta, true);
    let nll = batch_nll(&mut g, model, &base, Some(&bound), batch)?;
    let loss = g.scale(nll, scale);
    let grads = g.backward(loss)?;
    let flat = bound
        .ordered_vars()
        .iter()
        .flat_map(|v| grads.wrt(*v).into_data())
        .collect();
    Ok((g.value(nll).item(), flat))
}
