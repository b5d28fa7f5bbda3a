//! Pre-norm decoder-only transformer with learned positional embeddings.
//!
//! ```text
//! x = tok_emb[w] + pos_emb[i]
//! per block:  x += attn(ln1(x)) W_o
//!             x += gelu(ln2(x) W_fc1 + b1) W_fc2 + b2
//! logits = ln_f(x) W_head
//! ```
//!
//! Every linear weight is stored input-major (`n1 × n2`, applied as `x W`)
//! so a LoRA update `B A` with `B: n1×r`, `A: r×n2` has the same layout.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::corpus::{sample_batch, MultiTaskCorpus};
use crate::error::{Error, Result};
use crate::lora::{check_compatible, AdapterSet};
use crate::optim::{adamw_step, AdamWConfig, OptimizerState};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
/// Rows per evaluation graph; bounds memory without changing results.
const EVAL_ROWS: usize = 2048;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_length: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 12,
            context_length: 40,
            n_layers: 2,
            d_model: 24,
            n_heads: 4,
            d_ff: 48,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.context_length < 2 {
            return Err(Error::Config("context_length must be at least 2".into()));
        }
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ff == 0 {
            return Err(Error::Config("empty model dimension".into()));
        }
        Ok(())
    }
}

/// Name and `(n1, n2)` shape of a linear layer that adapters can target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearInfo {
    pub name: String,
    pub n1: usize,
    pub n2: usize,
}

/// `theta_full` plus architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel {
    config: ModelConfig,
    params: BTreeMap<String, Tensor>,
    frozen: bool,
}

fn block(i: usize, name: &str) -> String {
    format!("blocks.{i}.{name}")
}

impl BaseModel {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let ModelConfig {
            vocab_size: v,
            context_length: c,
            d_model: d,
            d_ff: f,
            ..
        } = config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = BTreeMap::new();
        let mut put = |name: String, t: Tensor| {
            params.insert(name, t);
        };
        put("tok_emb".into(), Tensor::uniform(&[v, d], 0.5, &mut rng));
        put("pos_emb".into(), Tensor::uniform(&[c, d], 0.1, &mut rng));
        let lin = |n_in: usize, n_out: usize, rng: &mut ChaCha8Rng| {
            Tensor::uniform(&[n_in, n_out], 1.0 / (n_in as f64).sqrt(), rng)
        };
        for i in 0..config.n_layers {
            put(block(i, "ln1.gamma"), Tensor::full(&[d], 1.0));
            put(block(i, "ln1.beta"), Tensor::zeros(&[d]));
            for p in ["attn.q", "attn.k", "attn.v", "attn.o"] {
                put(block(i, p), lin(d, d, &mut rng));
            }
            put(block(i, "ln2.gamma"), Tensor::full(&[d], 1.0));
            put(block(i, "ln2.beta"), Tensor::zeros(&[d]));
            put(block(i, "mlp.fc1"), lin(d, f, &mut rng));
            put(block(i, "mlp.fc1_bias"), Tensor::zeros(&[f]));
            put(block(i, "mlp.fc2"), lin(f, d, &mut rng));
            put(block(i, "mlp.fc2_bias"), Tensor::zeros(&[d]));
        }
        put("ln_f.gamma".into(), Tensor::full(&[d], 1.0));
        put("ln_f.beta".into(), Tensor::zeros(&[d]));
        put("head".into(), lin(d, v, &mut rng));
        Ok(Self {
            config,
            params,
            frozen: false,
        })
    }

    /// Rebuilds a model from stored parameters, checking every expected
    /// tensor is present with the right shape.
    pub fn from_params(config: ModelConfig, params: BTreeMap<String, Tensor>, frozen: bool) -> Result<Self> {
        let reference = Self::init(config.clone(), 0)?;
        if reference.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in &reference.params {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => return Err(Error::dim("model parameter", t.shape(), p.shape())),
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
            }
        }
        Ok(Self {
            config,
            params,
            frozen,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub fn params_mut(&mut self) -> Result<&mut BTreeMap<String, Tensor>> {
        if self.frozen {
            return Err(Error::Contract("model is frozen".into()));
        }
        Ok(&mut self.params)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn linear_layers(&self) -> Vec<LinearInfo> {
        let d = self.config.d_model;
        let f = self.config.d_ff;
        let mut out = Vec::new();
        for i in 0..self.config.n_layers {
            for p in ["attn.q", "attn.k", "attn.v", "attn.o"] {
                out.push(LinearInfo {
                    name: block(i, p),
                    n1: d,
                    n2: d,
                });
            }
            out.push(LinearInfo {
                name: block(i, "mlp.fc1"),
                n1: d,
                n2: f,
            });
            out.push(LinearInfo {
                name: block(i, "mlp.fc2"),
                n1: f,
                n2: d,
            });
        }
        out.push(LinearInfo {
            name: "head".into(),
            n1: d,
            n2: self.config.vocab_size,
        });
        out
    }

    /// Registers every base parameter in `g`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let vars = self
            .params
            .iter()
            .map(|(k, t)| (k.clone(), g.leaf(t.clone().with_grad(trainable))))
            .collect();
        BoundModel { vars }
    }
}

/// Base parameters registered in a graph.
#[derive(Debug)]
pub struct BoundModel {
    pub vars: BTreeMap<String, Var>,
}

/// Adapter factors registered in a graph, keyed by layer id.
#[derive(Debug, Default)]
pub struct BoundAdapters {
    /// `(A, B, alpha / r)` per layer, lexicographic by layer id.
    pub layers: BTreeMap<String, (Var, Var, f64)>,
}

impl BoundAdapters {
    pub fn bind<P: crate::lora::LowRankParams + ?Sized>(g: &mut Graph, adapters: &P, trainable: bool) -> Self {
        let layers = adapters
            .layers()
            .iter()
            .map(|(k, l)| {
                let a = g.leaf(l.a.clone().with_grad(trainable));
                let b = g.leaf(l.b.clone().with_grad(trainable));
                (k.clone(), (a, b, l.scaling()))
            })
            .collect();
        Self { layers }
    }

    /// Factor vars in canonical vector order (`A` then `B` per layer).
    pub fn ordered_vars(&self) -> Vec<Var> {
        self.layers.values().flat_map(|(a, b, _)| [*a, *b]).collect()
    }
}

fn linear(
    g: &mut Graph,
    x: Var,
    name: &str,
    base: &BoundModel,
    adapters: Option<&BoundAdapters>,
) -> Result<Var> {
    let w = base.vars[name];
    let y = g.matmul(x, w)?;
    match adapters.and_then(|a| a.layers.get(name)) {
        Some(&(a, b, s)) => {
            let xb = g.matmul(x, b)?;
            let xba = g.matmul(xb, a)?;
            let delta = g.scale(xba, s);
            g.add(y, delta)
        }
        None => Ok(y),
    }
}

/// Builds the logits for a batch of input sequences, rows concatenated in
/// order. Each sequence may be at most `context_length` tokens.
pub fn logits_graph(
    g: &mut Graph,
    model: &BaseModel,
    base: &BoundModel,
    adapters: Option<&BoundAdapters>,
    inputs: &[&[usize]],
) -> Result<Var> {
    let cfg = &model.config;
    let mut ids = Vec::new();
    let mut positions = Vec::new();
    let mut segments = Vec::with_capacity(inputs.len());
    for seq in inputs {
        if seq.is_empty() {
            return Err(Error::Contract("empty input sequence".into()));
        }
        if seq.len() > cfg.context_length {
            return Err(Error::Contract(format!(
                "sequence of {} tokens exceeds context length {}",
                seq.len(),
                cfg.context_length
            )));
        }
        ids.extend_from_slice(seq);
        positions.extend(0..seq.len());
        segments.push(seq.len());
    }
    let tok = g.gather(base.vars["tok_emb"], &ids)?;
    let pos = g.gather(base.vars["pos_emb"], &positions)?;
    let mut x = g.add(tok, pos)?;
    for i in 0..cfg.n_layers {
        let v = |n: &str| base.vars[&block(i, n)];
        let h = g.layer_norm(x, v("ln1.gamma"), v("ln1.beta"), LN_EPS)?;
        let q = linear(g, h, &block(i, "attn.q"), base, adapters)?;
        let k = linear(g, h, &block(i, "attn.k"), base, adapters)?;
        let val = linear(g, h, &block(i, "attn.v"), base, adapters)?;
        let att = g.causal_attention(q, k, val, cfg.n_heads, &segments)?;
        let o = linear(g, att, &block(i, "attn.o"), base, adapters)?;
        x = g.add(x, o)?;
        let h = g.layer_norm(x, v("ln2.gamma"), v("ln2.beta"), LN_EPS)?;
        let f = linear(g, h, &block(i, "mlp.fc1"), base, adapters)?;
        let f = g.add_row(f, v("mlp.fc1_bias"))?;
        let f = g.gelu(f);
        let f = linear(g, f, &block(i, "mlp.fc2"), base, adapters)?;
        let f = g.add_row(f, v("mlp.fc2_bias"))?;
        x = g.add(x, f)?;
    }
    let h = g.layer_norm(x, base.vars["ln_f.gamma"], base.vars["ln_f.beta"], LN_EPS)?;
    linear(g, h, "head", base, adapters)
}

/// Mean next-token NLL of a batch of windows: each window's first
/// `len - 1` tokens are the input and its last `len - 1` the targets.
pub fn batch_nll(
    g: &mut Graph,
    model: &BaseModel,
    base: &BoundModel,
    adapters: Option<&BoundAdapters>,
    windows: &[&[usize]],
) -> Result<Var> {
    let inputs: Vec<&[usize]> = windows.iter().map(|w| &w[..w.len() - 1]).collect();
    let targets: Vec<usize> = windows.iter().flat_map(|w| w[1..].iter().copied()).collect();
    let logits = logits_graph(g, model, base, adapters, &inputs)?;
    g.cross_entropy(logits, &targets)
}

/// Next-token logits for one sequence: row `i` scores token `i + 1`.
pub fn forward(model: &BaseModel, adapters: Option<&AdapterSet>, tokens: &[usize]) -> Result<Tensor> {
    if let Some(a) = adapters {
        check_compatible(model, a)?;
    }
    let mut g = Graph::new();
    let base = model.bind(&mut g, false);
    let bound = adapters.map(|a| BoundAdapters::bind(&mut g, a, false));
    let out = logits_graph(&mut g, model, &base, bound.as_ref(), &[tokens])?;
    Ok(g.value(out).clone())
}

/// Splits a document into windows of at most `context + 1` tokens that
/// overlap by one, so every token after the first is predicted exactly once.
pub fn windows(doc: &[usize], context: usize) -> Vec<&[usize]> {
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < doc.len() {
        let end = (start + context + 1).min(doc.len());
        out.push(&doc[start..end]);
        start += context;
    }
    out
}

/// `log softmax(row)[target]` for each row.
pub fn token_log_probs(logits: &Tensor, targets: &[usize]) -> Result<Vec<f64>> {
    let (t, v) = logits.dims2()?;
    if targets.len() != t {
        return Err(Error::dim("token_log_probs", logits.shape(), &[targets.len()]));
    }
    targets
        .iter()
        .enumerate()
        .map(|(i, &tg)| {
            if tg >= v {
                return Err(Error::Index { index: tg, bound: v });
            }
            let row = logits.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            Ok(row[tg] - lse)
        })
        .collect()
}

/// Compensated running total of token log-probabilities.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LogLikelihood {
    sum: f64,
    compensation: f64,
    /// Number of predicted tokens.
    pub tokens: usize,
}

impl LogLikelihood {
    fn accumulate(&mut self, x: f64) {
        let t = self.sum + x;
        self.compensation += if self.sum.abs() >= x.abs() {
            (self.sum - t) + x
        } else {
            (x - t) + self.sum
        };
        self.sum = t;
    }

    /// Adds one token's log-probability.
    pub fn add(&mut self, log_prob: f64) {
        self.accumulate(log_prob);
        self.tokens += 1;
    }

    /// Pools another total into this one.
    pub fn merge(&mut self, other: &LogLikelihood) {
        self.accumulate(other.sum);
        self.accumulate(other.compensation);
        self.tokens += other.tokens;
    }

    /// Summed log-probability.
    pub fn total(&self) -> f64 {
        self.sum + self.compensation
    }

    /// Mean log-probability per token, `None` when no token was scored.
    pub fn mean(&self) -> Option<f64> {
        if self.tokens == 0 {
            return None;
        }
        let n = self.tokens as f64;
        let m = self.sum / n;
        let residual = (-m).mul_add(n, self.sum) + self.compensation;
        Some(m + residual / n)
    }
}

/// Log-probability total and predicted-token count over documents.
pub fn corpus_log_likelihood<'a, I>(model: &BaseModel, adapters: Option<&AdapterSet>, docs: I) -> Result<LogLikelihood>
where
    I: IntoIterator<Item = &'a [usize]>,
{
    if let Some(a) = adapters {
        check_compatible(model, a)?;
    }
    let c = model.config.context_length;
    let mut all: Vec<&[usize]> = Vec::new();
    for doc in docs {
        if doc.len() < 2 {
            return Err(Error::Contract(format!(
                "document of {} tokens has nothing to predict",
                doc.len()
            )));
        }
        all.extend(windows(doc, c));
    }
    let mut acc = LogLikelihood::default();
    let mut i = 0;
    while i < all.len() {
        let mut rows = 0;
        let mut j = i;
        while j < all.len() && (rows == 0 || rows + all[j].len() - 1 <= EVAL_ROWS) {
            rows += all[j].len() - 1;
            j += 1;
        }
        let chunk = &all[i..j];
        let mut g = Graph::new();
        let base = model.bind(&mut g, false);
        let bound = adapters.map(|a| BoundAdapters::bind(&mut g, a, false));
        let inputs: Vec<&[usize]> = chunk.iter().map(|w| &w[..w.len() - 1]).collect();
        let targets: Vec<usize> = chunk.iter().flat_map(|w| w[1..].iter().copied()).collect();
        let logits = logits_graph(&mut g, model, &base, bound.as_ref(), &inputs)?;
        for lp in token_log_probs(g.value(logits), &targets)? {
            acc.add(lp);
        }
        i = j;
    }
    Ok(acc)
}

/// `sum_{i=1}^{W-1} log P(w_{i+1} | w_{1..i})`. The first token is only
/// conditioned on. Documents longer than the context are scored window by
/// window, each window restarting its context.
pub fn document_log_likelihood(model: &BaseModel, adapters: Option<&AdapterSet>, doc: &[usize]) -> Result<f64> {
    if doc.len() < 2 {
        return Err(Error::Contract(format!(
            "document of {} tokens has nothing to predict",
            doc.len()
        )));
    }
    Ok(corpus_log_likelihood(model, adapters, [doc])?.total())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_tokens: usize,
    pub seed: u64,
    pub adam: AdamWConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 3e-3,
            batch_tokens: 256,
            seed: 1,
            adam: AdamWConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    pub initial_train_perplexity: f64,
    pub final_train_perplexity: f64,
    /// Minibatch NLL per step.
    pub losses: Vec<f64>,
}

/// Plain NLL minimisation on the pooled training split of every task.
/// Returns the frozen model.
pub fn pretrain_base(
    corpus: &MultiTaskCorpus,
    config: ModelConfig,
    opts: &PretrainConfig,
) -> Result<(BaseModel, PretrainReport)> {
    let pooled: Vec<&[usize]> = corpus.tasks.iter().flat_map(|t| t.train_docs()).collect();
    if pooled.is_empty() {
        return Err(Error::Data("pretraining corpus is empty".into()));
    }
    if config.vocab_size < corpus.vocab_size() {
        return Err(Error::Config(format!(
            "model vocabulary {} smaller than corpus vocabulary {}",
            config.vocab_size,
            corpus.vocab_size()
        )));
    }
    let mut model = BaseModel::init(config, opts.seed)?;
    let ppl = |m: &BaseModel| -> Result<f64> {
        crate::metrics::perplexity_from_totals(&corpus_log_likelihood(m, None, pooled.iter().copied())?)
    };
    let initial = ppl(&model)?;
    let all_windows: Vec<&[usize]> = pooled
        .iter()
        .flat_map(|d| windows(d, model.config.context_length))
        .collect();
    let names: Vec<String> = model.params.keys().cloned().collect();
    let mut state = OptimizerState::new(model.params.values().map(Tensor::len));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(0x5eed));
    let mut losses = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let batch = sample_batch(&all_windows, opts.batch_tokens, &mut rng);
        let mut g = Graph::new();
        let base = model.bind(&mut g, true);
        let loss = batch_nll(&mut g, &model, &base, None, &batch)?;
        losses.push(g.value(loss).item());
        let grads = g.backward(loss)?;
        let gvec: Vec<Vec<f64>> = names.iter().map(|n| grads.wrt(base.vars[n]).into_data()).collect();
        let mut params: Vec<(String, &mut Tensor)> =
            model.params.iter_mut().map(|(k, t)| (k.clone(), t)).collect();
        adamw_step(&mut params, &gvec, &mut state, opts.lr, &opts.adam)?;
    }
    let final_ppl = ppl(&model)?;
    Ok((
        model.freeze(),
        PretrainReport {
            initial_train_perplexity: initial,
            final_train_perplexity: final_ppl,
            losses,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 8,
            context_length: 6,
            n_layers: 1,
            d_model: 4,
            n_heads: 2,
            d_ff: 8,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.n_heads = 3;
        assert!(BaseModel::init(c, 0).is_err());
        let mut c = tiny_config();
        c.context_length = 1;
        assert!(BaseModel::init(c, 0).is_err());
    }

    #[test]
    fn windows_cover_every_prediction_once() {
        let doc: Vec<usize> = (0..11).collect();
        let w = windows(&doc, 4);
        let predicted: Vec<usize> = w.iter().flat_map(|s| s[1..].iter().copied()).collect();
        assert_eq!(predicted, (1..11).collect::<Vec<_>>());
        assert!(w.iter().all(|s| s.len() - 1 <= 4));
        assert_eq!(windows(&[3, 4], 4), vec![&[3usize, 4][..]]);
        assert!(windows(&[3], 4).is_empty());
    }

    #[test]
    fn too_long_sequence_is_rejected() {
        let m = BaseModel::init(tiny_config(), 0).unwrap();
        assert!(matches!(forward(&m, None, &[0; 7]), Err(Error::Contract(_))));
        assert!(forward(&m, None, &[0; 6]).is_ok());
    }

    #[test]
    fn short_document_is_rejected() {
        let m = BaseModel::init(tiny_config(), 0).unwrap();
        assert!(document_log_likelihood(&m, None, &[1]).is_err());
    }

    #[test]
    fn frozen_model_refuses_mutation() {
        let m = BaseModel::init(tiny_config(), 0).unwrap().freeze();
        let mut m = m;
        assert!(m.params_mut().is_err());
    }

    #[test]
    fn linear_layers_report_shapes() {
        let m = BaseModel::init(tiny_config(), 0).unwrap();
        let l = m.linear_layers();
        assert_eq!(l.len(), 7);
        for info in &l {
            assert_eq!(m.params()[&info.name].shape(), &[info.n1, info.n2]);
        }
    }
}
