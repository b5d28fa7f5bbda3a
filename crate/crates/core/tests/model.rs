//! End-to-end checks on the transformer: gradients, a straight-line
//! reference implementation, causality and the perplexity extremes.

mod common;

use std::collections::BTreeMap;

use bora_core::autodiff::Graph;
use bora_core::lora::{adapted_weight, inject, AdapterSet};
use bora_core::metrics::perplexity;
use bora_core::model::{
    batch_nll, corpus_log_likelihood, document_log_likelihood, forward, pretrain_base, windows, BaseModel,
    BoundAdapters, PretrainConfig,
};
use bora_core::tensor::Tensor;
use common::*;

type Mat = Vec<Vec<f64>>;

fn to_mat(t: &Tensor) -> Mat {
    let (r, _) = t.dims2().unwrap();
    (0..r).map(|i| t.row(i).to_vec()).collect()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i][p] * b[p][j];
            }
            out[i][j] = s;
        }
    }
    out
}

fn ln(x: &Mat, g: &[f64], b: &[f64]) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mu = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mu) / (var + 1e-5).sqrt() * g[j] + b[j])
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// The model written out with explicit loops, adapters merged into the
/// weights beforehand.
fn reference_logits(model: &BaseModel, adapters: Option<&AdapterSet>, tokens: &[usize]) -> Mat {
    let cfg = model.config();
    let p = model.params();
    let w = |name: &str| -> Mat {
        match adapters.and_then(|a| a.layers.get(name)) {
            Some(l) => to_mat(&adapted_weight(&p[name], l).unwrap()),
            None => to_mat(&p[name]),
        }
    };
    let v = |name: &str| p[name].data().to_vec();
    let t = tokens.len();
    let mut x: Mat = (0..t)
        .map(|i| {
            let te = p["tok_emb"].row(tokens[i]);
            let pe = p["pos_emb"].row(i);
            te.iter().zip(pe).map(|(a, b)| a + b).collect()
        })
        .collect();
    let dh = cfg.d_model / cfg.n_heads;
    for l in 0..cfg.n_layers {
        let b = |n: &str| format!("blocks.{l}.{n}");
        let h = ln(&x, &v(&b("ln1.gamma")), &v(&b("ln1.beta")));
        let q = mm(&h, &w(&b("attn.q")));
        let k = mm(&h, &w(&b("attn.k")));
        let vv = mm(&h, &w(&b("attn.v")));
        let mut att = vec![vec![0.0; cfg.d_model]; t];
        for head in 0..cfg.n_heads {
            let o = head * dh;
            for i in 0..t {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).map(|c| q[i][o + c] * k[j][o + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..=i {
                    for c in 0..dh {
                        att[i][o + c] += e[j] / z * vv[j][o + c];
                    }
                }
            }
        }
        let o = mm(&att, &w(&b("attn.o")));
        for i in 0..t {
            for j in 0..cfg.d_model {
                x[i][j] += o[i][j];
            }
        }
        let h = ln(&x, &v(&b("ln2.gamma")), &v(&b("ln2.beta")));
        let mut f = mm(&h, &w(&b("mlp.fc1")));
        let b1 = v(&b("mlp.fc1_bias"));
        for row in &mut f {
            for (j, z) in row.iter_mut().enumerate() {
                *z = gelu(*z + b1[j]);
            }
        }
        let f = mm(&f, &w(&b("mlp.fc2")));
        let b2 = v(&b("mlp.fc2_bias"));
        for i in 0..t {
            for j in 0..cfg.d_model {
                x[i][j] += f[i][j] + b2[j];
            }
        }
    }
    let h = ln(&x, &v("ln_f.gamma"), &v("ln_f.beta"));
    mm(&h, &w("head"))
}

fn max_diff(a: &Tensor, b: &Mat) -> f64 {
    to_mat(a)
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

const DOC: [usize; 12] = [0, 3, 1, 4, 1, 5, 2, 0, 2, 3, 5, 4];

#[test]
fn forward_matches_reference_implementation() {
    let model = tiny_model(6, 11);
    let tokens = &DOC[..10];
    let plain = forward(&model, None, tokens).unwrap();
    assert!(max_diff(&plain, &reference_logits(&model, None, tokens)) < 1e-10);

    let adapters = random_adapters(&model, &["attn.q", "attn.v", "mlp.fc1", "head"], 2, 5);
    let adapted = forward(&model, Some(&adapters), tokens).unwrap();
    assert!(max_diff(&adapted, &reference_logits(&model, Some(&adapters), tokens)) < 1e-10);
    assert!(adapted.max_abs_diff(&plain) > 1e-3);
}

#[test]
fn full_model_gradients_match_finite_differences() {
    let model = tiny_model(6, 12);
    let adapters = random_adapters(&model, &["attn.q", "attn.v"], 2, 8);
    let window = [&DOC[..]];
    let loss = |params: &BTreeMap<String, Tensor>, ad: &AdapterSet| -> f64 {
        let m = BaseModel::from_params(model.config().clone(), params.clone(), false).unwrap();
        let mut g = Graph::new();
        let base = m.bind(&mut g, false);
        let bound = BoundAdapters::bind(&mut g, ad, false);
        let l = batch_nll(&mut g, &m, &base, Some(&bound), &window).unwrap();
        g.value(l).item()
    };

    let mut g = Graph::new();
    let base = model.bind(&mut g, true);
    let bound = BoundAdapters::bind(&mut g, &adapters, true);
    let l = batch_nll(&mut g, &model, &base, Some(&bound), &window).unwrap();
    let grads = g.backward(l).unwrap();

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, var) in &base.vars {
        let analytic = grads.wrt(*var);
        for e in 0..analytic.len() {
            let mut plus = model.params().clone();
            plus.get_mut(name).unwrap().data_mut()[e] += h;
            let mut minus = model.params().clone();
            minus.get_mut(name).unwrap().data_mut()[e] -= h;
            let fd = (loss(&plus, &adapters) - loss(&minus, &adapters)) / (2.0 * h);
            let err = rel_err(analytic.data()[e], fd, 1e-3);
            assert!(err < 1e-4, "{name}[{e}]: {} vs {fd}", analytic.data()[e]);
            worst = worst.max(err);
        }
    }
    for (id, (a, b, _)) in &bound.layers {
        for (which, var) in [("A", a), ("B", b)] {
            let analytic = grads.wrt(*var);
            for e in 0..analytic.len() {
                let bump = |d: f64| {
                    let mut ad = adapters.clone();
                    let l = ad.layers.get_mut(id).unwrap();
                    let t = if which == "A" { &mut l.a } else { &mut l.b };
                    t.data_mut()[e] += d;
                    loss(model.params(), &ad)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                assert!(rel_err(analytic.data()[e], fd, 1e-3) < 1e-4, "{id}.{which}[{e}]");
            }
        }
    }
    assert!(worst < 1e-4);
}

#[test]
fn logits_are_causal() {
    let model = tiny_model(6, 13);
    let base = forward(&model, None, &DOC[..9]).unwrap();
    for k in 0..9 {
        let mut changed = DOC[..9].to_vec();
        changed[k] = (changed[k] + 1) % 6;
        let out = forward(&model, None, &changed).unwrap();
        for i in 0..9 {
            let same = base.row(i) == out.row(i);
            assert_eq!(same, i < k, "row {i} after changing token {k}");
        }
    }
}

#[test]
fn zero_initialised_adapters_are_an_exact_identity() {
    let model = tiny_model(6, 14);
    let targets = vec!["attn.q".to_string(), "attn.v".to_string(), "mlp.fc2".to_string()];
    let adapters = inject(&model, &targets, 2, 4.0, 3).unwrap();
    let a = forward(&model, None, &DOC[..11]).unwrap();
    let b = forward(&model, Some(&adapters), &DOC[..11]).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12);
    let docs = [&DOC[..], &DOC[2..9]];
    let p0 = perplexity(&model, None, docs).unwrap();
    let p1 = perplexity(&model, Some(&adapters), docs).unwrap();
    assert!((p0 - p1).abs() < 1e-12);
}

fn with_params(model: &BaseModel, edit: impl FnOnce(&mut BTreeMap<String, Tensor>)) -> BaseModel {
    let mut p = model.params().clone();
    edit(&mut p);
    BaseModel::from_params(model.config().clone(), p, true).unwrap()
}

#[test]
fn zeroed_head_gives_perplexity_equal_to_vocab_size() {
    let model = tiny_model(6, 15);
    let uniform = with_params(&model, |p| {
        let head = p.get_mut("head").unwrap();
        *head = Tensor::zeros(head.shape());
    });
    let ppl = perplexity(&uniform, None, [&DOC[..], &DOC[..5]]).unwrap();
    assert_eq!(ppl, 6.0);
}

#[test]
fn uniform_predictor_over_32_symbols_is_exact_on_many_tokens() {
    let mut config = tiny_config(32);
    config.context_length = 24;
    let model = BaseModel::init(config, 16).unwrap();
    let uniform = with_params(&model, |p| {
        let head = p.get_mut("head").unwrap();
        *head = Tensor::zeros(head.shape());
    });
    let docs: Vec<Vec<usize>> = (0..40).map(|k| (0..50 + k).map(|i| (i * 7 + k) % 32).collect()).collect();
    let ppl = perplexity(&uniform, None, docs.iter().map(|d| d.as_slice())).unwrap();
    assert_eq!(ppl, 32.0);
}

#[test]
fn certain_predictor_gives_perplexity_one() {
    let model = tiny_model(6, 16);
    let d = model.config().d_model;
    let certain = with_params(&model, |p| {
        *p.get_mut("ln_f.gamma").unwrap() = Tensor::zeros(&[d]);
        let mut beta = vec![0.0; d];
        beta[0] = 1.0;
        *p.get_mut("ln_f.beta").unwrap() = Tensor::new(vec![d], beta).unwrap();
        let mut head = Tensor::zeros(&[d, 6]);
        head.data_mut()[2] = 1000.0;
        *p.get_mut("head").unwrap() = head;
    });
    let doc = [2usize; 30];
    assert_eq!(perplexity(&certain, None, [&doc[..]]).unwrap(), 1.0);
}

#[test]
fn long_documents_are_scored_window_by_window() {
    let model = tiny_model(6, 17);
    let doc: Vec<usize> = (0..30).map(|i| (i * 7 + i / 3) % 6).collect();
    let ctx = model.config().context_length;
    let ws = windows(&doc, ctx);
    assert_eq!(ws.iter().map(|w| w.len() - 1).sum::<usize>(), doc.len() - 1);
    let mut by_hand = 0.0;
    for w in &ws {
        let logits = forward(&model, None, &w[..w.len() - 1]).unwrap();
        by_hand += bora_core::model::token_log_probs(&logits, &w[1..]).unwrap().iter().sum::<f64>();
    }
    let ll = document_log_likelihood(&model, None, &doc).unwrap();
    assert!((ll - by_hand).abs() < 1e-10);
    let totals = corpus_log_likelihood(&model, None, [&doc[..], &doc[..4]]).unwrap();
    assert_eq!(totals.tokens, 29 + 3);
    assert!((totals.total() - ll - document_log_likelihood(&model, None, &doc[..4]).unwrap()).abs() < 1e-10);
}

#[test]
fn pretraining_zero_steps_returns_the_initialisation() {
    let corpus = tiny_corpus(2, vec![8, 12], 1);
    let opts = PretrainConfig {
        steps: 0,
        seed: 4,
        ..Default::default()
    };
    let (m, report) = pretrain_base(&corpus, tiny_config(6), &opts).unwrap();
    assert!(m.is_frozen());
    assert_eq!(m.params(), BaseModel::init(tiny_config(6), 4).unwrap().params());
    assert_eq!(report.initial_train_perplexity, report.final_train_perplexity);
}

#[test]
fn pretraining_lowers_train_perplexity_deterministically() {
    let corpus = tiny_corpus(2, vec![20, 30], 2);
    let opts = PretrainConfig {
        steps: 150,
        lr: 1e-2,
        batch_tokens: 64,
        ..Default::default()
    };
    let (a, ra) = pretrain_base(&corpus, tiny_config(6), &opts).unwrap();
    let (b, rb) = pretrain_base(&corpus, tiny_config(6), &opts).unwrap();
    assert!(ra.final_train_perplexity < ra.initial_train_perplexity);
    assert_eq!(a.params(), b.params());
    assert_eq!(ra.losses, rb.losses);
}

proptest::proptest! {
    #[test]
    fn constant_log_probs_average_exactly(v in 2usize..5000, n in 1usize..20000, k in 1usize..4) {
        let lp = -((v as f64).ln()) / k as f64;
        let mut halves = [bora_core::model::LogLikelihood::default(); 2];
        for i in 0..n {
            halves[i % 2].add(lp);
        }
        let [mut a, b] = halves;
        a.merge(&b);
        proptest::prop_assert_eq!(a.tokens, n);
        proptest::prop_assert_eq!(a.mean(), Some(lp));
    }
}
