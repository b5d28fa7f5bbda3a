mod common;

use std::path::Path;

use bora_core::checkpoint::{load_adapters, load_corpus, load_model};
use bora_core::corpus::{DocCounts, MultiTaskCorpus};
use bora_core::harness::{
    run_eval, run_plot, run_sweep, run_train, sha256_hex, ExperimentConfig, Manifest, MANIFEST_FILE, OUT_ENV,
};
use bora_core::metrics::TaskReport;
use bora_core::plot::{emit_plots, padded_range, SweepResult};
use bora_core::trainer::{lr_schedule, train, TrainConfig};

fn small_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::from_toml_str(
        r#"
        tau_grid = [0.0, 100.0]
        [corpus.synthetic]
        n_tasks = 3
        doc_counts = [8, 12, 16]
        doc_len = [8, 14]
        vocab_size = 6
        [model]
        context_length = 12
        n_layers = 1
        d_model = 8
        n_heads = 2
        d_ff = 16
        [pretrain]
        steps = 20
        batch_tokens = 64
        [train]
        steps = 6
        batch_tokens = 24
        log_every = 2
        "#,
    )
    .unwrap();
    c.lora.rank = 2;
    c
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

fn files_under(root: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_string_lossy().replace('\\', "/"));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn table_grid_sweep_writes_one_row_per_tau_and_reruns_identically() {
    let mut config = small_config();
    config.tau_grid = vec![0.0, 1.0, 10.0, 100.0, 1000.0, 10000.0];
    let dir = tempfile::tempdir().unwrap();
    let first = run_sweep(&config, &dir.path().join("a"), None).unwrap();
    assert!(first.failures.is_empty());

    let summary = String::from_utf8(read(&dir.path().join("a/summary.csv"))).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(summary.lines().next().unwrap(), "lr,tau,pooled_test_perplexity");
    assert_eq!(rows.len(), 6);
    for (row, &tau) in rows.iter().zip(&config.tau_grid) {
        let cols: Vec<f64> = row.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(cols[0], lr_schedule(tau, &TrainConfig::default()).unwrap());
        assert_eq!(cols[1], tau);
    }

    // every written file is listed with its hash
    let manifest = Manifest::load(&first.manifest).unwrap();
    let listed: Vec<String> = {
        let mut v: Vec<String> = manifest.artifacts.iter().map(|a| a.path.clone()).collect();
        v.sort();
        v
    };
    let mut on_disk = files_under(&dir.path().join("a"));
    on_disk.retain(|f| f != MANIFEST_FILE);
    assert_eq!(listed, on_disk);
    for a in &manifest.artifacts {
        assert_eq!(a.sha256, sha256_hex(&read(&dir.path().join("a").join(&a.path))));
    }

    let again = ExperimentConfig::load(&first.manifest).unwrap();
    let second = run_sweep(&again, &dir.path().join("b"), None).unwrap();
    let m2 = Manifest::load(&second.manifest).unwrap();
    assert_eq!(manifest.artifacts, m2.artifacts);
    for f in ["summary.csv", "per_task.csv", "distances.csv", "history/tau_100.csv"] {
        assert_eq!(read(&dir.path().join("a").join(f)), read(&dir.path().join("b").join(f)), "{f}");
    }
}

#[test]
fn failing_tau_is_recorded_and_the_sweep_continues() {
    let mut config = small_config();
    config.tau_grid = vec![0.0, 1e300];
    let dir = tempfile::tempdir().unwrap();
    let out = run_sweep(&config, dir.path(), None).unwrap();
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].tau, 1e300);
    assert_eq!(out.result.taus, vec![0.0]);
    let manifest = Manifest::load(&out.manifest).unwrap();
    assert_eq!(manifest.failures, out.failures);
    let summary = String::from_utf8(read(&dir.path().join("summary.csv"))).unwrap();
    assert_eq!(summary.lines().count(), 2);
    assert!(manifest.notices.iter().any(|n| n.contains("single tau")));
}

#[test]
fn zero_precision_sweep_equals_independent_finetuning() {
    let mut config = small_config();
    config.tau_grid = vec![0.0];
    let dir = tempfile::tempdir().unwrap();
    run_sweep(&config, dir.path(), None).unwrap();
    let corpus = load_corpus(&dir.path().join("corpus.bora")).unwrap();
    let model = load_model(&dir.path().join("base_model.bora")).unwrap();
    for t in &corpus.tasks {
        let alone = MultiTaskCorpus {
            tasks: vec![t.clone()],
            vocab: corpus.vocab.clone(),
        };
        let tc = TrainConfig {
            tau: 0.0,
            ..config.train.clone()
        };
        let single = train(&alone, &model, &config.lora, &tc).unwrap();
        let (saved, _) = load_adapters(&dir.path().join(format!("adapters/tau_0/task_{}.bora", t.task_id))).unwrap();
        assert_eq!(saved, single.thetas[0]);
    }
}

#[test]
fn eval_reproduces_the_train_evaluation() {
    let config = small_config();
    let dir = tempfile::tempdir().unwrap();
    let run = run_train(&config, 10.0, &dir.path().join("t"), None, None).unwrap();
    let (_, per_task, pooled) = run_eval(&dir.path().join("t"), &dir.path().join("e")).unwrap();
    assert_eq!(per_task, run.test_perplexity);
    assert_eq!(pooled, run.pooled_perplexity);
    assert_eq!(
        read(&dir.path().join("t/evaluation.csv")),
        read(&dir.path().join("e/evaluation.csv"))
    );
}

#[test]
fn train_reuses_a_given_corpus_and_model() {
    let config = small_config();
    let dir = tempfile::tempdir().unwrap();
    run_train(&config, 0.0, &dir.path().join("first"), None, None).unwrap();
    let corpus = dir.path().join("first/corpus.bora");
    let model = dir.path().join("first/base_model.bora");
    let second = run_train(&config, 0.0, &dir.path().join("second"), Some(&corpus), Some(&model)).unwrap();
    assert_eq!(read(&corpus), read(&dir.path().join("second/corpus.bora")));
    assert_eq!(read(&model), read(&dir.path().join("second/base_model.bora")));
    let m = Manifest::load(&second.manifest).unwrap();
    assert!(m.artifact("pretrain_losses.csv").is_none());
    assert_eq!(
        read(&dir.path().join("first/adapters/task_1.bora")),
        read(&dir.path().join("second/adapters/task_1.bora"))
    );
}

#[test]
fn plaintext_corpus_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    for (task, n) in [("alpha", 6), ("beta", 8)] {
        std::fs::create_dir_all(data.join(task)).unwrap();
        for i in 0..n {
            let text: String = (0..10 + i).map(|k| ['a', 'b', 'c', ' '][(k * (i + 1)) % 4]).collect();
            std::fs::write(data.join(task).join(format!("{i:02}.txt")), text).unwrap();
        }
    }
    let mut config = small_config();
    config.corpus.plaintext = Some(data);
    config.corpus.test_fraction = 0.3;
    let out = run_sweep(&config, &dir.path().join("out"), None).unwrap();
    let names: Vec<&str> = out.result.tasks.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, ["alpha", "beta"]);
    let m = load_model(&dir.path().join("out/base_model.bora")).unwrap();
    assert_eq!(m.config().vocab_size, 5);
}

#[test]
fn output_root_follows_the_environment() {
    let c = ExperimentConfig::default();
    std::env::set_var(OUT_ENV, "/tmp/somewhere");
    assert_eq!(c.output_dir(None), Path::new("/tmp/somewhere"));
    assert_eq!(c.output_dir(Some(Path::new("x"))), Path::new("x"));
    std::env::remove_var(OUT_ENV);
    assert_eq!(c.output_dir(None), c.out_dir);
}

fn synthetic_result(n_tasks: usize, taus: Vec<f64>) -> SweepResult {
    let k = taus.len();
    SweepResult {
        lrs: taus.iter().map(|&t| lr_schedule(t, &TrainConfig::default()).unwrap()).collect(),
        pooled_perplexity: (0..k).map(|i| 7.0 - (i as f64 - 2.0).powi(2) * 0.1).map(|p| 12.0 - p).collect(),
        base_pooled_perplexity: 8.0,
        tasks: (0..n_tasks)
            .map(|d| TaskReport {
                task_id: d,
                name: format!("task_{d}"),
                n_train_docs: 40 + 13 * d,
                n_train_tokens: 1000 + 400 * d,
                perplexity: (0..k).map(|i| 5.0 + 0.1 * d as f64 + 0.05 * i as f64).collect(),
                distance: (0..k).map(|i| 0.01 * (d + i) as f64).collect(),
            })
            .collect(),
        taus,
    }
}

fn attr(svg: &str, name: &str) -> f64 {
    let key = format!("{name}=\"");
    let start = svg.find(&key).unwrap() + key.len();
    let end = start + svg[start..].find('"').unwrap();
    svg[start..end].parse().unwrap()
}

#[test]
fn perplexity_figure_has_one_thick_and_one_thin_line_per_task() {
    let r = synthetic_result(25, vec![0.0, 1.0, 10.0, 100.0, 1000.0, 10000.0]);
    let figs = emit_plots(&r).unwrap();
    assert_eq!(figs.files.len(), 4);
    let (_, svg) = figs.files.iter().find(|(n, _)| n == "perplexity_vs_tau.svg").unwrap();
    assert_eq!(svg.matches(r#"<polyline class="task""#).count(), 25);
    assert_eq!(svg.matches(r#"<polyline class="pooled""#).count(), 1);

    let ys = r.pooled_perplexity.iter().chain(r.tasks.iter().flat_map(|t| &t.perplexity)).copied();
    let (y0, y1) = padded_range(ys).unwrap();
    assert_eq!(attr(svg, "data-y-min"), y0);
    assert_eq!(attr(svg, "data-y-max"), y1);
    // tau = 0 sits one decade below tau = 1 on the log axis
    assert_eq!((attr(svg, "data-x-min"), attr(svg, "data-x-max")), padded_range([-1.0, 4.0]).unwrap());

    let (_, dist) = figs.files.iter().find(|(n, _)| n == "distance_vs_docs.svg").unwrap();
    let best = r.best_index().unwrap();
    let (x0, x1) = padded_range(r.tasks.iter().map(|t| t.n_train_docs as f64)).unwrap();
    let (d0, d1) = padded_range(r.tasks.iter().map(|t| t.distance[best])).unwrap();
    assert_eq!(attr(dist, "data-x-min"), x0);
    assert_eq!(attr(dist, "data-x-max"), x1);
    assert_eq!(attr(dist, "data-y-min"), d0);
    assert_eq!(attr(dist, "data-y-max"), d1);
}

#[test]
fn single_tau_degenerates_to_points_and_skips_improvement() {
    let r = synthetic_result(4, vec![100.0]);
    let figs = emit_plots(&r).unwrap();
    assert_eq!(figs.files.len(), 3);
    assert!(!figs.files.iter().any(|(n, _)| n.starts_with("relative_improvement")));
    assert_eq!(figs.notices.len(), 1);
    let svg = &figs.files[0].1;
    assert!(!svg.contains("<polyline"));
    assert_eq!(svg.matches(r#"<g class="task""#).count(), 4);
}

#[test]
fn empty_task_set_is_an_error_and_writes_nothing() {
    let mut r = synthetic_result(3, vec![0.0, 10.0]);
    r.tasks.clear();
    assert!(emit_plots(&r).is_err());

    let dir = tempfile::tempdir().unwrap();
    let sweep = dir.path().join("sweep");
    std::fs::create_dir_all(&sweep).unwrap();
    std::fs::write(sweep.join("sweep.json"), serde_json::to_string(&r).unwrap()).unwrap();
    std::fs::write(sweep.join(MANIFEST_FILE), "{}").unwrap();
    let out = dir.path().join("figs");
    assert!(run_plot(&sweep, &out).is_err());
    assert!(!out.exists());
}

#[test]
fn doc_counts_accept_a_range_in_toml() {
    let c = ExperimentConfig::from_toml_str("[corpus.synthetic]\ndoc_counts = { min = 5, max = 9 }").unwrap();
    assert_eq!(c.corpus.synthetic.doc_counts, DocCounts::Range { min: 5, max: 9 });
}
