//! Perplexity and the sweep diagnostics built on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{AdapterSet, LowRankParams};
use crate::model::{corpus_log_likelihood, BaseModel, LogLikelihood};

/// `exp(-sum log P(doc) / sum (W - 1))`: the average runs over predicted
/// tokens, so each document contributes `W - 1` terms.
pub fn perplexity<'a, I>(model: &BaseModel, adapters: Option<&AdapterSet>, docs: I) -> Result<f64>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    perplexity_from_totals(&corpus_log_likelihood(model, adapters, docs)?)
}

/// Perplexity from an accumulated log likelihood and token count, for
/// pooling across tasks.
pub fn perplexity_from_totals(totals: &LogLikelihood) -> Result<f64> {
    let mean = totals
        .mean()
        .ok_or_else(|| Error::Contract("perplexity over an empty document set".into()))?;
    Ok((-mean).exp())
}

/// `(baseline - best) / baseline`.
pub fn relative_improvement(ppl_best: f64, ppl_baseline: f64) -> Result<f64> {
    if !(ppl_best > 0.0 && ppl_baseline > 0.0) {
        return Err(Error::Contract(format!(
            "perplexities must be positive, got {ppl_best} and {ppl_baseline}"
        )));
    }
    Ok((ppl_baseline - ppl_best) / ppl_baseline)
}

/// `||vec(a) - vec(b)||_2`.
pub fn adapter_distance<A, B>(a: &A, b: &B) -> Result<f64>
where
    A: LowRankParams + ?Sized,
    B: LowRankParams + ?Sized,
{
    if !a.same_structure(b) {
        return Err(Error::dim("adapter_distance", &[a.num_params()], &[b.num_params()]));
    }
    let (va, vb) = (a.as_vector(), b.as_vector());
    Ok(va
        .iter()
        .zip(&vb)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Average ranks (1-based); tied values share the mean of their positions.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation of `(size, metric)` pairs: the Pearson
/// correlation of midranks, which handles ties in either coordinate.
pub fn spearman(pairs: &[(f64, f64)]) -> Result<f64> {
    if pairs.len() < 3 {
        return Err(Error::Contract(format!(
            "rank correlation needs at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    let xs: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let (rx, ry) = (midranks(&xs), midranks(&ys));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::Contract("rank correlation of a constant series".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// One task's row across a sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task_id: usize,
    pub name: String,
    pub n_train_docs: usize,
    pub n_train_tokens: usize,
    /// Test perplexity per sweep point, aligned with the tau grid.
    pub perplexity: Vec<f64>,
    /// `||theta_d - Theta||_2` per sweep point.
    pub distance: Vec<f64>,
}
