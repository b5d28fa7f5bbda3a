//! Experiment orchestration: configuration, tau sweeps, single runs,
//! evaluation and the reproducibility manifest.
//!
//! Every entry point writes into one output directory and finishes by
//! writing `manifest.json`, which lists each artifact with its SHA-256 and
//! embeds the fully resolved configuration. Passing that manifest back as
//! the configuration reproduces the run.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, AdapterMeta};
use crate::corpus::{generate_synthetic, ingest_plaintext, split, MultiTaskCorpus, SyntheticSpec};
use crate::error::{Error, Result};
use crate::lora::{AdapterSet, LoraConfig};
use crate::metrics::{adapter_distance, perplexity_from_totals, TaskReport};
use crate::model::{corpus_log_likelihood, pretrain_base, BaseModel, LogLikelihood, ModelConfig, PretrainConfig, PretrainReport};
use crate::plot::{emit_plots, SweepResult};
use crate::trainer::{train, TrainConfig, TrainOutcome};

/// Environment variable that replaces the configured output directory.
pub const OUT_ENV: &str = "BORA_OUT";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub synthetic: SyntheticSpec,
    /// Directory with one subdirectory per task; replaces the generator.
    pub plaintext: Option<PathBuf>,
    pub test_fraction: f64,
    pub split_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            synthetic: SyntheticSpec::default(),
            plaintext: None,
            test_fraction: 0.2,
            split_seed: 7,
        }
    }
}

/// Top-level experiment description. Every field has a default, so an
/// empty file is a valid configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    /// `vocab_size` is overwritten with the corpus vocabulary size.
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub lora: LoraConfig,
    /// `tau` is ignored by sweeps, which take their values from `tau_grid`.
    pub train: TrainConfig,
    pub tau_grid: Vec<f64>,
    pub out_dir: PathBuf,
    /// When set, every component seed is derived from it.
    pub seed: Option<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            lora: LoraConfig::default(),
            train: TrainConfig::default(),
            tau_grid: vec![0.0, 1.0, 10.0, 100.0, 1000.0, 10000.0],
            out_dir: PathBuf::from("runs/default"),
            seed: None,
        }
    }
}

fn derive_seed(master: u64, stream: u64) -> u64 {
    master.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(stream.wrapping_mul(0xbf58_476d_1ce4_e5b9)) ^ stream
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            what: "experiment config".into(),
            msg: e.to_string(),
        })
    }

    /// Reads a TOML configuration, or the `config` object of a manifest
    /// written by a previous run.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        if text.trim_start().starts_with('{') {
            let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Parse {
                what: path.display().to_string(),
                msg: e.to_string(),
            })?;
            let config = value.get("config").cloned().ok_or_else(|| Error::Parse {
                what: path.display().to_string(),
                msg: "manifest has no config object".into(),
            })?;
            return serde_json::from_value(config).map_err(|e| Error::Parse {
                what: path.display().to_string(),
                msg: e.to_string(),
            });
        }
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Parse { msg, .. } => Error::Parse {
                what: path.display().to_string(),
                msg,
            },
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau_grid.is_empty() {
            return Err(Error::Config("tau_grid is empty".into()));
        }
        if self.tau_grid.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(Error::Config(format!("tau_grid {:?} has a negative or non-finite value", self.tau_grid)));
        }
        if self.tau_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("tau_grid {:?} is not strictly ascending", self.tau_grid)));
        }
        if !(self.corpus.test_fraction > 0.0 && self.corpus.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction {} outside (0, 1)",
                self.corpus.test_fraction
            )));
        }
        self.train.validate()?;
        Ok(())
    }

    /// Applies the master seed, if any, to every component seed. Resolving
    /// twice gives the same result.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some(s) = c.seed {
            c.corpus.synthetic.seed = derive_seed(s, 1);
            c.corpus.split_seed = derive_seed(s, 2);
            c.pretrain.seed = derive_seed(s, 3);
            c.lora.init_seed = derive_seed(s, 4);
            c.train.seed = derive_seed(s, 5);
        }
        c
    }

    pub fn seeds(&self) -> BTreeMap<String, u64> {
        BTreeMap::from([
            ("corpus".to_string(), self.corpus.synthetic.seed),
            ("split".to_string(), self.corpus.split_seed),
            ("pretrain".to_string(), self.pretrain.seed),
            ("lora_init".to_string(), self.lora.init_seed),
            ("train".to_string(), self.train.seed),
        ])
    }

    /// Output directory after applying [`OUT_ENV`]; an explicit override
    /// wins over both.
    pub fn output_dir(&self, explicit: Option<&Path>) -> PathBuf {
        if let Some(p) = explicit {
            return p.to_path_buf();
        }
        match std::env::var_os(OUT_ENV) {
            Some(root) if !root.is_empty() => PathBuf::from(root),
            _ => self.out_dir.clone(),
        }
    }
}

/// Generated or ingested corpus, split into train and test.
pub fn build_corpus(config: &CorpusConfig) -> Result<MultiTaskCorpus> {
    let raw = match &config.plaintext {
        Some(dir) => ingest_plaintext(dir)?,
        None => generate_synthetic(&config.synthetic)?,
    };
    split(&raw, config.test_fraction, config.split_seed)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub tau: f64,
    pub error: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config: ExperimentConfig,
    pub seeds: BTreeMap<String, u64>,
    pub artifacts: Vec<Artifact>,
    pub failures: Vec<Failure>,
    pub notices: Vec<String>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            what: path.display().to_string(),
            msg: e.to_string(),
        })
    }

    pub fn artifact(&self, path: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.path == path)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Output directory that records a hash for every file it writes.
pub struct RunDir {
    root: PathBuf,
    artifacts: Vec<Artifact>,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            artifacts: Vec::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
        self.artifacts.retain(|a| a.path != rel);
        self.artifacts.push(Artifact {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
            bytes: bytes.len() as u64,
        });
        Ok(path)
    }

    pub fn finish(
        self,
        command: &str,
        config: &ExperimentConfig,
        failures: Vec<Failure>,
        notices: Vec<String>,
    ) -> Result<PathBuf> {
        let manifest = Manifest {
            command: command.to_string(),
            config: config.clone(),
            seeds: config.seeds(),
            artifacts: self.artifacts,
            failures,
            notices,
        };
        let path = self.root.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Short decimal form of a tau value for file names.
pub fn tau_label(tau: f64) -> String {
    format!("{tau}")
}

/// Test perplexity per task and pooled over every task's test tokens.
pub fn evaluate(
    model: &BaseModel,
    corpus: &MultiTaskCorpus,
    thetas: Option<&[AdapterSet]>,
) -> Result<(Vec<f64>, f64)> {
    let mut per_task = Vec::with_capacity(corpus.tasks.len());
    let mut pooled = LogLikelihood::default();
    for (i, t) in corpus.tasks.iter().enumerate() {
        let task = corpus_log_likelihood(model, thetas.map(|s| &s[i]), t.test_docs())?;
        per_task.push(perplexity_from_totals(&task)?);
        pooled.merge(&task);
    }
    Ok((per_task, perplexity_from_totals(&pooled)?))
}

fn evaluation_csv(corpus: &MultiTaskCorpus, per_task: &[f64], pooled: f64) -> String {
    let mut s = String::from("task,n_train_docs,n_train_tokens,test_perplexity\n");
    for (t, p) in corpus.tasks.iter().zip(per_task) {
        writeln!(s, "{},{},{},{p}", t.name, t.train.len(), t.n_train_tokens()).unwrap();
    }
    let docs: usize = corpus.tasks.iter().map(|t| t.train.len()).sum();
    let tokens: usize = corpus.tasks.iter().map(|t| t.n_train_tokens()).sum();
    writeln!(s, "pooled,{docs},{tokens},{pooled}").unwrap();
    s
}

fn corpus_summary_csv(corpus: &MultiTaskCorpus) -> String {
    let mut s = String::from("task,n_docs,n_train_docs,n_test_docs,n_train_tokens\n");
    for t in &corpus.tasks {
        writeln!(
            s,
            "{},{},{},{},{}",
            t.name,
            t.documents.len(),
            t.train.len(),
            t.test.len(),
            t.n_train_tokens()
        )
        .unwrap();
    }
    s
}

fn losses_csv(report: &PretrainReport) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in report.losses.iter().enumerate() {
        writeln!(s, "{},{l}", i + 1).unwrap();
    }
    s
}

/// Corpus and frozen base model shared by every run of an experiment.
pub struct Prepared {
    pub config: ExperimentConfig,
    pub corpus: MultiTaskCorpus,
    pub model: BaseModel,
}

/// Loads or builds the corpus, then loads or pretrains the base model,
/// writing whatever it creates into `dir`.
pub fn prepare(
    config: &ExperimentConfig,
    corpus_path: Option<&Path>,
    model_path: Option<&Path>,
    dir: &mut RunDir,
) -> Result<Prepared> {
    let mut config = config.resolved();
    config.validate()?;
    let corpus = match corpus_path {
        Some(p) => checkpoint::load_corpus(p)?,
        None => build_corpus(&config.corpus)?,
    };
    if !corpus.is_split() {
        return Err(Error::Data("corpus has a task with an empty train or test split".into()));
    }
    dir.write("corpus.bora", &checkpoint::corpus_to_container(&corpus).to_bytes())?;
    config.model.vocab_size = corpus.vocab_size();
    let model = match model_path {
        Some(p) => {
            let m = checkpoint::load_model(p)?.freeze();
            if m.config().vocab_size != corpus.vocab_size() {
                return Err(Error::Config(format!(
                    "model vocabulary {} does not match corpus vocabulary {}",
                    m.config().vocab_size,
                    corpus.vocab_size()
                )));
            }
            config.model = m.config().clone();
            m
        }
        None => {
            log::info!("pretraining base model for {} steps", config.pretrain.steps);
            let (m, report) = pretrain_base(&corpus, config.model.clone(), &config.pretrain)?;
            log::info!(
                "base model train perplexity {:.4} -> {:.4}",
                report.initial_train_perplexity,
                report.final_train_perplexity
            );
            dir.write("pretrain_losses.csv", losses_csv(&report).as_bytes())?;
            m
        }
    };
    dir.write("base_model.bora", &checkpoint::model_to_container(&model).to_bytes())?;
    Ok(Prepared { config, corpus, model })
}

fn write_adapters(dir: &mut RunDir, prefix: &str, p: &Prepared, out: &TrainOutcome) -> Result<()> {
    let meta = |task: Option<(usize, String)>| AdapterMeta {
        task_id: task.as_ref().map(|t| t.0),
        task_name: task.map(|t| t.1),
        rank: p.config.lora.rank,
        alpha: p.config.lora.alpha(),
        targets: p.config.lora.targets.clone(),
    };
    for (t, theta) in p.corpus.tasks.iter().zip(&out.thetas) {
        let c = checkpoint::adapters_to_container(theta, &meta(Some((t.task_id, t.name.clone()))));
        dir.write(&format!("{prefix}task_{}.bora", t.task_id), &c.to_bytes())?;
    }
    let c = checkpoint::adapters_to_container(&out.mean, &meta(None));
    dir.write(&format!("{prefix}mean.bora"), &c.to_bytes())?;
    Ok(())
}

/// Result of a single-tau training run.
pub struct TrainRun {
    pub manifest: PathBuf,
    pub outcome: TrainOutcome,
    pub test_perplexity: Vec<f64>,
    pub pooled_perplexity: f64,
}

/// Trains all tasks at one tau and evaluates them on the test split.
pub fn run_train(
    config: &ExperimentConfig,
    tau: f64,
    out: &Path,
    corpus_path: Option<&Path>,
    model_path: Option<&Path>,
) -> Result<TrainRun> {
    let mut dir = RunDir::create(out)?;
    let mut prepared = prepare(config, corpus_path, model_path, &mut dir)?;
    prepared.config.train.tau = tau;
    let tc = prepared.config.train.clone();
    log::info!("training {} tasks at tau={tau}", prepared.corpus.n_tasks());
    let outcome = train(&prepared.corpus, &prepared.model, &prepared.config.lora, &tc)?;
    write_adapters(&mut dir, "adapters/", &prepared, &outcome)?;
    dir.write("history.csv", outcome.history.to_csv().as_bytes())?;
    let (per_task, pooled) = evaluate(&prepared.model, &prepared.corpus, Some(&outcome.thetas))?;
    dir.write(
        "evaluation.csv",
        evaluation_csv(&prepared.corpus, &per_task, pooled).as_bytes(),
    )?;
    let manifest = dir.finish("train", &prepared.config, Vec::new(), Vec::new())?;
    Ok(TrainRun {
        manifest,
        outcome,
        test_perplexity: per_task,
        pooled_perplexity: pooled,
    })
}

/// Re-evaluates the adapters of a `train` run directory on its test split.
pub fn run_eval(run: &Path, out: &Path) -> Result<(PathBuf, Vec<f64>, f64)> {
    let manifest = Manifest::load(&run.join(MANIFEST_FILE))?;
    let corpus = checkpoint::load_corpus(&run.join("corpus.bora"))?;
    let model = checkpoint::load_model(&run.join("base_model.bora"))?;
    let thetas = corpus
        .tasks
        .iter()
        .map(|t| {
            let (set, meta) = checkpoint::load_adapters(&run.join(format!("adapters/task_{}.bora", t.task_id)))?;
            if meta.task_id != Some(t.task_id) {
                return Err(Error::Checkpoint(format!("adapter file for task {} is mislabelled", t.name)));
            }
            Ok(set)
        })
        .collect::<Result<Vec<_>>>()?;
    let (per_task, pooled) = evaluate(&model, &corpus, Some(&thetas))?;
    let mut dir = RunDir::create(out)?;
    dir.write("evaluation.csv", evaluation_csv(&corpus, &per_task, pooled).as_bytes())?;
    let path = dir.finish("eval", &manifest.config, Vec::new(), Vec::new())?;
    Ok((path, per_task, pooled))
}

/// Writes the corpus alone.
pub fn run_generate(config: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let config = config.resolved();
    config.validate()?;
    let corpus = build_corpus(&config.corpus)?;
    let mut dir = RunDir::create(out)?;
    dir.write("corpus.bora", &checkpoint::corpus_to_container(&corpus).to_bytes())?;
    dir.write("corpus_summary.csv", corpus_summary_csv(&corpus).as_bytes())?;
    dir.finish("generate", &config, Vec::new(), Vec::new())
}

/// Writes the corpus and a freshly pretrained base model.
pub fn run_pretrain(config: &ExperimentConfig, out: &Path, corpus_path: Option<&Path>) -> Result<PathBuf> {
    let mut dir = RunDir::create(out)?;
    let p = prepare(config, corpus_path, None, &mut dir)?;
    let (_, pooled) = evaluate(&p.model, &p.corpus, None)?;
    dir.write("base_evaluation.csv", format!("pooled_test_perplexity\n{pooled}\n").as_bytes())?;
    dir.finish("pretrain", &p.config, Vec::new(), Vec::new())
}

pub struct SweepOutcome {
    pub manifest: PathBuf,
    pub result: SweepResult,
    pub failures: Vec<Failure>,
}

fn grid_csv(result: &SweepResult, value: impl Fn(&TaskReport, usize) -> f64, prefix: &str) -> String {
    let mut s = String::from("task,n_train_docs,n_train_tokens");
    for &t in &result.taus {
        write!(s, ",{prefix}{}", tau_label(t)).unwrap();
    }
    s.push('\n');
    for t in &result.tasks {
        write!(s, "{},{},{}", t.name, t.n_train_docs, t.n_train_tokens).unwrap();
        for i in 0..result.taus.len() {
            write!(s, ",{}", value(t, i)).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Trains and evaluates every tau of the grid against one corpus and one
/// frozen base model, then writes CSV tables, figures and the manifest. A
/// failure at one tau is recorded and the sweep moves on.
pub fn run_sweep(
    config: &ExperimentConfig,
    out: &Path,
    corpus_path: Option<&Path>,
) -> Result<SweepOutcome> {
    let mut dir = RunDir::create(out)?;
    let p = prepare(config, corpus_path, None, &mut dir)?;
    let (_, base_pooled) = evaluate(&p.model, &p.corpus, None)?;
    let mut result = SweepResult {
        taus: Vec::new(),
        lrs: Vec::new(),
        pooled_perplexity: Vec::new(),
        base_pooled_perplexity: base_pooled,
        tasks: p
            .corpus
            .tasks
            .iter()
            .map(|t| TaskReport {
                task_id: t.task_id,
                name: t.name.clone(),
                n_train_docs: t.train.len(),
                n_train_tokens: t.n_train_tokens(),
                perplexity: Vec::new(),
                distance: Vec::new(),
            })
            .collect(),
    };
    let mut failures = Vec::new();
    for &tau in &p.config.tau_grid {
        let tc = TrainConfig {
            tau,
            ..p.config.train.clone()
        };
        log::info!("sweep point tau={tau}");
        let run = train(&p.corpus, &p.model, &p.config.lora, &tc).and_then(|o| {
            let (per_task, pooled) = evaluate(&p.model, &p.corpus, Some(&o.thetas))?;
            let dist = o
                .thetas
                .iter()
                .map(|t| adapter_distance(t, &o.mean))
                .collect::<Result<Vec<_>>>()?;
            Ok((o, per_task, pooled, dist))
        });
        match run {
            Ok((o, per_task, pooled, dist)) => {
                let label = tau_label(tau);
                dir.write(&format!("history/tau_{label}.csv"), o.history.to_csv().as_bytes())?;
                write_adapters(&mut dir, &format!("adapters/tau_{label}/"), &p, &o)?;
                result.taus.push(tau);
                result.lrs.push(o.lr);
                result.pooled_perplexity.push(pooled);
                for ((r, ppl), d) in result.tasks.iter_mut().zip(per_task).zip(dist) {
                    r.perplexity.push(ppl);
                    r.distance.push(d);
                }
                log::info!("tau={tau} lr={} pooled test perplexity {pooled:.4}", o.lr);
            }
            Err(e) => {
                log::error!("tau={tau} failed: {e}");
                failures.push(Failure {
                    tau,
                    error: e.to_string(),
                });
            }
        }
    }

    let mut summary = String::from("lr,tau,pooled_test_perplexity\n");
    for i in 0..result.taus.len() {
        writeln!(summary, "{},{},{}", result.lrs[i], result.taus[i], result.pooled_perplexity[i]).unwrap();
    }
    dir.write("summary.csv", summary.as_bytes())?;
    dir.write("per_task.csv", grid_csv(&result, |t, i| t.perplexity[i], "ppl_tau_").as_bytes())?;
    dir.write("distances.csv", grid_csv(&result, |t, i| t.distance[i], "dist_tau_").as_bytes())?;
    dir.write(
        "sweep.json",
        (serde_json::to_string_pretty(&result).expect("result serialises") + "\n").as_bytes(),
    )?;
    let mut notices = Vec::new();
    if result.taus.is_empty() {
        notices.push("no sweep point completed; figures skipped".to_string());
    } else {
        let figures = emit_plots(&result)?;
        for (name, svg) in &figures.files {
            dir.write(&format!("figures/{name}"), svg.as_bytes())?;
        }
        notices.extend(figures.notices);
    }
    for n in &notices {
        log::warn!("{n}");
    }
    let manifest = dir.finish("sweep", &p.config, failures.clone(), notices)?;
    Ok(SweepOutcome {
        manifest,
        result,
        failures,
    })
}

/// Renders the figures of a finished sweep directory into `out`.
pub fn run_plot(sweep_dir: &Path, out: &Path) -> Result<PathBuf> {
    let path = sweep_dir.join("sweep.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let result: SweepResult = serde_json::from_str(&text).map_err(|e| Error::Parse {
        what: path.display().to_string(),
        msg: e.to_string(),
    })?;
    let figures = emit_plots(&result)?;
    let manifest = Manifest::load(&sweep_dir.join(MANIFEST_FILE))?;
    let mut dir = RunDir::create(out)?;
    for (name, svg) in &figures.files {
        dir.write(name, svg.as_bytes())?;
    }
    dir.finish("plot", &manifest.config, Vec::new(), figures.notices)
}
