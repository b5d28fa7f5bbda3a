//! Low-rank adapters: `W = W_full + (alpha / r) * B A` on selected linear
//! layers, plus the flat-vector view the hierarchical prior works on.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::BaseModel;
use crate::tensor::Tensor;

/// One decomposed linear layer. `b` is `n1×r`, `a` is `r×n2`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLayer {
    pub layer_id: String,
    pub a: Tensor,
    pub b: Tensor,
    pub rank: usize,
    pub alpha: f64,
    pub n1: usize,
    pub n2: usize,
}

impl LoraLayer {
    pub fn new(layer_id: &str, a: Tensor, b: Tensor, alpha: f64) -> Result<Self> {
        let (r, n2) = a.dims2()?;
        let (n1, rb) = b.dims2()?;
        if r != rb {
            return Err(Error::dim("lora factors", b.shape(), a.shape()));
        }
        check_rank(layer_id, r, n1, n2)?;
        Ok(Self {
            layer_id: layer_id.to_string(),
            a,
            b,
            rank: r,
            alpha,
            n1,
            n2,
        })
    }

    /// The `alpha / r` multiplier.
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn num_params(&self) -> usize {
        self.rank * (self.n1 + self.n2)
    }

    /// The dense low-rank update `(alpha / r) B A`.
    pub fn delta(&self) -> Tensor {
        self.b
            .matmul(&self.a)
            .expect("factor shapes checked at construction")
            .scale(self.scaling())
    }
}

fn check_rank(layer: &str, rank: usize, n1: usize, n2: usize) -> Result<()> {
    if rank == 0 || rank > n1.min(n2) {
        return Err(Error::Rank {
            layer: layer.to_string(),
            rank,
            n1,
            n2,
        });
    }
    Ok(())
}

/// Rank, scale and target selection for a set of adapters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    /// Defaults to `2 * rank`, which pins the multiplier at 2.
    pub alpha: Option<f64>,
    /// Layer names or dotted suffixes, e.g. `attn.q` matches every block's
    /// query projection.
    pub targets: Vec<String>,
    pub init_seed: u64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 4,
            alpha: None,
            targets: vec!["attn.q".into(), "attn.v".into()],
            init_seed: 17,
        }
    }
}

impl LoraConfig {
    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(2.0 * self.rank as f64)
    }
}

/// Anything shaped like a set of adapter layers: per-task adapters and the
/// shared hierarchical mean.
pub trait LowRankParams {
    fn layers(&self) -> &BTreeMap<String, LoraLayer>;
    fn layers_mut(&mut self) -> &mut BTreeMap<String, LoraLayer>;

    fn num_params(&self) -> usize {
        self.layers().values().map(LoraLayer::num_params).sum()
    }

    /// Concatenation over layer ids in lexicographic order, `A` before `B`.
    fn as_vector(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for layer in self.layers().values() {
            v.extend_from_slice(layer.a.data());
            v.extend_from_slice(layer.b.data());
        }
        v
    }

    /// Inverse of [`LowRankParams::as_vector`].
    fn load_vector(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.num_params() {
            return Err(Error::dim("load_vector", &[self.num_params()], &[v.len()]));
        }
        let mut off = 0;
        for layer in self.layers_mut().values_mut() {
            for t in [&mut layer.a, &mut layer.b] {
                let n = t.len();
                t.data_mut().copy_from_slice(&v[off..off + n]);
                off += n;
            }
        }
        Ok(())
    }

    /// Mutable references to every factor in canonical order.
    fn factors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        self.layers_mut()
            .values_mut()
            .flat_map(|l| {
                let id = l.layer_id.clone();
                [(format!("{id}.A"), &mut l.a), (format!("{id}.B"), &mut l.b)]
            })
            .collect()
    }

    fn same_structure<P: LowRankParams + ?Sized>(&self, other: &P) -> bool {
        self.layers().len() == other.layers().len()
            && self.layers().iter().zip(other.layers()).all(|((ka, a), (kb, b))| {
                ka == kb && a.a.shape() == b.a.shape() && a.b.shape() == b.b.shape()
            })
    }
}

/// `theta_d`: one task's adapters.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterSet {
    pub task_id: usize,
    pub layers: BTreeMap<String, LoraLayer>,
}

impl AdapterSet {
    pub fn empty(task_id: usize) -> Self {
        Self {
            task_id,
            layers: BTreeMap::new(),
        }
    }

    pub fn with_task(mut self, task_id: usize) -> Self {
        self.task_id = task_id;
        self
    }

    /// A copy carrying `values` (in canonical order) instead of the current
    /// parameters.
    pub fn from_vector(&self, values: &[f64]) -> Result<Self> {
        let mut out = self.clone();
        out.load_vector(values)?;
        Ok(out)
    }
}

impl LowRankParams for AdapterSet {
    fn layers(&self) -> &BTreeMap<String, LoraLayer> {
        &self.layers
    }
    fn layers_mut(&mut self) -> &mut BTreeMap<String, LoraLayer> {
        &mut self.layers
    }
}

/// `Theta`: the prior centre, shaped exactly like an [`AdapterSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct HierarchicalMean {
    pub layers: BTreeMap<String, LoraLayer>,
}

impl HierarchicalMean {
    pub fn from_adapters(template: &AdapterSet) -> Self {
        Self {
            layers: template.layers.clone(),
        }
    }

    /// Views the mean as an adapter set so it can drive a forward pass.
    pub fn as_adapters(&self) -> AdapterSet {
        AdapterSet {
            task_id: usize::MAX,
            layers: self.layers.clone(),
        }
    }
}

impl LowRankParams for HierarchicalMean {
    fn layers(&self) -> &BTreeMap<String, LoraLayer> {
        &self.layers
    }
    fn layers_mut(&mut self) -> &mut BTreeMap<String, LoraLayer> {
        &mut self.layers
    }
}

/// Resolves a target selection against the model's linear layers.
pub fn resolve_targets(model: &BaseModel, targets: &[String]) -> Result<Vec<(String, usize, usize)>> {
    let linear = model.linear_layers();
    let mut chosen: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for t in targets {
        let suffix = format!(".{t}");
        let hits: Vec<_> = linear
            .iter()
            .filter(|l| l.name == *t || l.name.ends_with(&suffix))
            .collect();
        if hits.is_empty() {
            let known_param = model
                .params()
                .keys()
                .any(|k| k == t || k.ends_with(&suffix));
            return Err(Error::Injection(if known_param {
                format!("{t} is not a linear layer")
            } else {
                format!("unknown layer {t}")
            }));
        }
        for l in hits {
            chosen.insert(l.name.clone(), (l.n1, l.n2));
        }
    }
    Ok(chosen.into_iter().map(|(k, (a, b))| (k, a, b)).collect())
}

/// Attaches fresh adapters to `targets`: `A ~ U(-1/sqrt(n2), 1/sqrt(n2))`,
/// `B = 0`, so the adapted model starts out equal to the base model.
pub fn inject(
    model: &BaseModel,
    targets: &[String],
    rank: usize,
    alpha: f64,
    init_seed: u64,
) -> Result<AdapterSet> {
    let resolved = resolve_targets(model, targets)?;
    for (name, n1, n2) in &resolved {
        check_rank(name, rank, *n1, *n2)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
    let mut layers = BTreeMap::new();
    for (name, n1, n2) in resolved {
        let a = Tensor::uniform(&[rank, n2], 1.0 / (n2 as f64).sqrt(), &mut rng);
        let b = Tensor::zeros(&[n1, rank]);
        layers.insert(name.clone(), LoraLayer::new(&name, a, b, alpha)?);
    }
    Ok(AdapterSet { task_id: 0, layers })
}

pub fn inject_with(model: &BaseModel, config: &LoraConfig) -> Result<AdapterSet> {
    inject(
        model,
        &config.targets,
        config.rank,
        config.alpha(),
        config.init_seed,
    )
}

/// `W_full + (alpha / r) B A`.
pub fn adapted_weight(w_full: &Tensor, layer: &LoraLayer) -> Result<Tensor> {
    let delta = layer.delta();
    if w_full.shape() != delta.shape() {
        return Err(Error::dim("adapted_weight", w_full.shape(), delta.shape()));
    }
    w_full.add(&delta)
}

/// Checks that `adapters` fit `model`: every layer exists and the factor
/// shapes agree with the frozen weight.
pub fn check_compatible(model: &BaseModel, adapters: &AdapterSet) -> Result<()> {
    for (name, layer) in &adapters.layers {
        let w = model
            .params()
            .get(name)
            .ok_or_else(|| Error::Injection(format!("model has no layer {name}")))?;
        let (n1, n2) = w.dims2()?;
        if (n1, n2) != (layer.n1, layer.n2) {
            return Err(Error::Injection(format!(
                "{name}: adapter built for {}x{}, model weight is {n1}x{n2}",
                layer.n1, layer.n2
            )));
        }
    }
    Ok(())
}
