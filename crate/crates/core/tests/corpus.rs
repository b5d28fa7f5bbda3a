mod common;

use std::collections::BTreeSet;

use bora_core::checkpoint::{
    load_adapters, load_corpus, load_mean, load_model, save_adapters, save_corpus, save_model, AdapterMeta,
};
use bora_core::corpus::{generate_synthetic, split, DocCounts, SyntheticSpec};
use bora_core::lora::HierarchicalMean;
use bora_core::metrics::{perplexity, perplexity_from_totals};
use bora_core::model::{corpus_log_likelihood, LogLikelihood};
use proptest::prelude::*;

use common::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn split_partitions_every_task(
        counts in proptest::collection::vec(4usize..60, 1..5),
        fraction in 0.26f64..0.74,
        seed in any::<u64>(),
    ) {
        let spec = SyntheticSpec {
            n_tasks: counts.len(),
            doc_counts: DocCounts::Explicit(counts.clone()),
            doc_len: [3, 6],
            vocab_size: 5,
            seed: 1,
            ..Default::default()
        };
        let raw = generate_synthetic(&spec).unwrap();
        let c = split(&raw, fraction, seed).unwrap();
        for (t, &n) in c.tasks.iter().zip(&counts) {
            let train: BTreeSet<usize> = t.train.iter().copied().collect();
            let test: BTreeSet<usize> = t.test.iter().copied().collect();
            prop_assert!(train.is_disjoint(&test));
            prop_assert_eq!(train.len() + test.len(), n);
            prop_assert_eq!(test.len(), (fraction * n as f64).floor() as usize);
            prop_assert_eq!(t.documents.len(), n);
        }
        prop_assert_eq!(split(&raw, fraction, seed).unwrap(), c);
    }
}

#[test]
fn corpus_file_round_trip() {
    let c = tiny_corpus(3, vec![6, 9, 12], 11);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.bora");
    save_corpus(&p, &c).unwrap();
    assert_eq!(load_corpus(&p).unwrap(), c);
}

#[test]
fn model_and_adapter_files_round_trip() {
    let model = tiny_model(6, 12);
    let set = random_adapters(&model, &["attn.q", "attn.v"], 2, 3).with_task(4);
    let dir = tempfile::tempdir().unwrap();
    let mp = dir.path().join("m.bora");
    save_model(&mp, &model).unwrap();
    let loaded = load_model(&mp).unwrap();
    assert_eq!(loaded.params(), model.params());
    assert!(loaded.is_frozen());

    let meta = AdapterMeta {
        task_id: Some(4),
        task_name: Some("task_4".into()),
        rank: 2,
        alpha: 4.0,
        targets: vec!["attn.q".into(), "attn.v".into()],
    };
    let ap = dir.path().join("a.bora");
    save_adapters(&ap, &set, &meta).unwrap();
    let (back, m) = load_adapters(&ap).unwrap();
    assert_eq!(back, set);
    assert_eq!(m, meta);

    let mean = HierarchicalMean::from_adapters(&set);
    let meanp = dir.path().join("mean.bora");
    save_adapters(&meanp, &mean, &AdapterMeta { task_id: None, task_name: None, ..meta }).unwrap();
    assert_eq!(load_mean(&meanp).unwrap().0, mean);
    assert!(load_model(&ap).is_err());
    assert!(load_corpus(&mp).is_err());
}

#[test]
fn pooled_perplexity_lies_between_task_extremes() {
    let c = tiny_corpus(3, vec![8, 12, 16], 13);
    let model = tiny_model(6, 14);
    let mut per_task = Vec::new();
    let mut totals = LogLikelihood::default();
    for t in &c.tasks {
        per_task.push(perplexity(&model, None, t.test_docs()).unwrap());
        totals.merge(&corpus_log_likelihood(&model, None, t.test_docs()).unwrap());
    }
    let pooled = perplexity_from_totals(&totals).unwrap();
    let lo = per_task.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = per_task.iter().cloned().fold(0.0, f64::max);
    assert!(lo <= pooled && pooled <= hi, "{lo} {pooled} {hi}");

    // direct token-by-token accumulation
    let mut direct = 0.0;
    let mut count = 0;
    for t in &c.tasks {
        for d in t.test_docs() {
            for w in bora_core::model::windows(d, model.config().context_length) {
                let logits = bora_core::model::forward(&model, None, &w[..w.len() - 1]).unwrap();
                direct += bora_core::model::token_log_probs(&logits, &w[1..]).unwrap().iter().sum::<f64>();
                count += w.len() - 1;
            }
        }
    }
    assert_eq!(count, totals.tokens);
    assert!(((-direct / count as f64).exp() - pooled).abs() < 1e-10);
}
