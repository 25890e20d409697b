//! End-to-end pipeline and run directories.
//!
//! A run directory holds everything needed to reproduce and inspect a run:
//!
//! ```text
//! config.toml          exact config that produced the run
//! vocab.txt            tokenizer vocabulary, one token per line
//! data/*.jsonl         training and evaluation instances
//! metrics.csv          per-step loss components
//! mi_trace.csv         per-step MI estimates
//! checkpoints/*.ckpt   epoch and final checkpoints
//! manifest.json        file index, timestamps and seed provenance
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::audit::{intervention_checks, intervention_values};
use crate::analysis::{
    alignment_table, grad_isolation_audit, inference_mi, inference_mi_csv, mds_project_2d,
    pearson_layer_matrix, two_step_probe, AuditReport, ModuleRef, Pooling, ProjectionSet,
};
use crate::config::{DataSource, RunConfig};
use crate::data::jsonl::{export_jsonl, ingest_jsonl};
use crate::data::synth::{generic_corpus, synth_generate};
use crate::data::{Batcher, Split, TaskInstance, TokenBatch};
use crate::error::{Error, Result};
use crate::lm::LmModule;
use crate::model::eval::{evaluate_accuracy, EvalMode};
use crate::model::train::{pretrain_lm, train, train_sequential, SequentialReport, TrainLog};
use crate::model::{ForwardOptions, IclmModel, Target};
use crate::rng::stream;
use crate::router::{init_centroids, kmeans_fit, pool_rows, Codebook, Strategy};
use crate::tensor::checkpoint;
use crate::tokenizer::Tokenizer;

pub const CONFIG_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const MI_FILE: &str = "mi_trace.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const FINAL_CHECKPOINT: &str = "checkpoints/final.ckpt";
pub const TRAIN_DATA: &str = "data/train.jsonl";
pub const EVAL_DATA: &str = "data/eval.jsonl";
pub const TRAIN_B_DATA: &str = "data/train-b.jsonl";
pub const EVAL_B_DATA: &str = "data/eval-b.jsonl";

/// Instances and vocabulary for a run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub tokenizer: Tokenizer,
    pub train: Vec<TaskInstance>,
    pub eval: Vec<TaskInstance>,
    /// Second-phase train and eval sets for sequential runs.
    pub phase_b: Option<(Vec<TaskInstance>, Vec<TaskInstance>)>,
    /// Pretraining corpus for the shared base model.
    pub corpus: Vec<TaskInstance>,
}

fn split_train(all: Vec<TaskInstance>) -> (Vec<TaskInstance>, Vec<TaskInstance>) {
    all.into_iter().partition(|x| x.split == Split::Train)
}

pub fn prepare_data(cfg: &RunConfig) -> Result<Prepared> {
    let max_prompt = cfg.data.synth.max_prompt_tokens;
    let (train, eval, phase_b, corpus) = match cfg.data.source {
        DataSource::Synth => {
            let synth = cfg.synth();
            let (train, eval) = split_train(synth_generate(&synth)?);
            let phase_b = match &cfg.data.phase_b {
                Some(b) => Some(split_train(synth_generate(
                    &crate::data::synth::SynthConfig {
                        seed: cfg.seed,
                        ..b.clone()
                    },
                )?)),
                None => None,
            };
            let corpus = generic_corpus(&synth, cfg.pretrain.corpus_size);
            (train, eval, phase_b, corpus)
        }
        DataSource::Jsonl => {
            let path = cfg.data.train_path.as_ref().expect("validated");
            let train = ingest_jsonl(path, max_prompt)?;
            let mut eval = Vec::new();
            for p in &cfg.data.eval_paths {
                eval.extend(ingest_jsonl(p, max_prompt)?);
            }
            let corpus = train.clone();
            (train, eval, None, corpus)
        }
    };
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut parts: Vec<&[TaskInstance]> = vec![&train, &eval, &corpus];
    if let Some((tb, eb)) = &phase_b {
        parts.push(tb);
        parts.push(eb);
    }
    let texts = parts
        .iter()
        .flat_map(|p| p.iter())
        .flat_map(|x| [x.prompt.as_str(), x.answer.as_str()]);
    let tokenizer = Tokenizer::build(texts);
    if tokenizer.len() > cfg.model.vocab_size {
        return Err(Error::Config(format!(
            "data needs {} tokens but model.vocab_size is {}",
            tokenizer.len(),
            cfg.model.vocab_size
        )));
    }
    Ok(Prepared {
        tokenizer,
        train,
        eval,
        phase_b,
        corpus,
    })
}

/// The shared base model every module starts from, pretrained on the
/// corpus with a next-token objective.
pub fn pretrained_base(cfg: &RunConfig, prep: &Prepared) -> Result<LmModule> {
    let mut base = LmModule::new(
        "base",
        cfg.model.lm_config(true),
        &mut stream(cfg.seed, "init/base"),
    )?;
    if cfg.pretrain.epochs > 0 && !prep.corpus.is_empty() {
        pretrain_lm(
            &mut base,
            &prep.tokenizer,
            &prep.corpus,
            &cfg.pretrain_config(),
        )?;
    }
    Ok(base)
}

/// Per-input router embeddings: final hidden states of `router` averaged
/// over each prompt.
pub fn router_points(
    router: &LmModule,
    tok: &Tokenizer,
    data: &[TaskInstance],
    batch_size: usize,
) -> Result<Vec<Vec<f64>>> {
    let batcher = Batcher {
        tokenizer: tok,
        data,
        max_len: router.config.max_seq_len,
    };
    let mut out = Vec::with_capacity(data.len());
    for b in batcher.sequential(batch_size)? {
        let h = router.forward(&b.tokens, b.batch, b.seq)?.last;
        out.extend(pool_rows(&h, &b.prompt_mask)?);
    }
    Ok(out)
}

/// Codebook for the configured strategy, fitted or seeded on `fit_data`
/// without reading any labels.
pub fn build_codebook(
    cfg: &RunConfig,
    base: &LmModule,
    tok: &Tokenizer,
    fit_data: &[TaskInstance],
) -> Result<Codebook> {
    let points = router_points(base, tok, fit_data, 64)?;
    let n = cfg.model.n_specific;
    match cfg.router.strategy {
        Strategy::Kmeans => kmeans_fit(&points, n, cfg.router.mds_dim, cfg.seed),
        s => Codebook::with_centroids(
            s,
            init_centroids(&points, n, cfg.seed)?,
            cfg.router.nu,
            cfg.router.temperature,
        ),
    }
}

/// Pretrained base, fitted codebook and the composed model.
pub fn build_model(cfg: &RunConfig, prep: &Prepared) -> Result<IclmModel> {
    let base = pretrained_base(cfg, prep)?;
    let mut fit_data = prep.train.clone();
    if let Some((b, _)) = &prep.phase_b {
        fit_data.extend(b.iter().cloned());
    }
    let codebook = build_codebook(cfg, &base, &prep.tokenizer, &fit_data)?;
    IclmModel::from_base(
        &base,
        cfg.model.n_specific,
        codebook,
        cfg.aggregation_config(),
        cfg.loss_weights(),
        &mut stream(cfg.seed, "init/iclm"),
    )
}

/// A model with the configured architecture and placeholder weights, ready
/// for [`IclmModel::load_state`].
pub fn model_skeleton(cfg: &RunConfig, codebook: Codebook) -> Result<IclmModel> {
    let base = LmModule::new(
        "base",
        cfg.model.lm_config(true),
        &mut stream(cfg.seed, "init/base"),
    )?;
    IclmModel::from_base(
        &base,
        cfg.model.n_specific,
        codebook,
        cfg.aggregation_config(),
        cfg.loss_weights(),
        &mut stream(cfg.seed, "init/iclm"),
    )
}

pub fn save_checkpoint(model: &IclmModel, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    checkpoint::save(path, &model.state_entries())
}

pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<IclmModel> {
    let entries = checkpoint::load(path)?;
    let codebook = Codebook::from_entries(&entries)?;
    let mut model = model_skeleton(cfg, codebook)?;
    model.load_state(&entries)?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub created_unix: u64,
    pub seed: u64,
    /// Seed taken from the environment instead of the config file.
    pub seed_override: Option<u64>,
    pub files: Vec<String>,
}

impl Manifest {
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn unix_now() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Debug)]
pub struct RunOutcome {
    pub model: IclmModel,
    pub prepared: Prepared,
    pub log: TrainLog,
    pub sequential: Option<SequentialReport>,
    pub files: Vec<String>,
}

/// Prepare data, build and train the model, and write the run directory.
pub fn execute(cfg: &RunConfig, dir: &Path, seed_override: Option<u64>) -> Result<RunOutcome> {
    cfg.validate()?;
    fs::create_dir_all(dir.join("checkpoints"))?;
    fs::create_dir_all(dir.join("data"))?;
    let mut files: Vec<String> = Vec::new();
    let write = |rel: &str, text: &str, files: &mut Vec<String>| -> Result<()> {
        fs::write(dir.join(rel), text)?;
        files.push(rel.to_string());
        Ok(())
    };
    write(CONFIG_FILE, &cfg.to_toml()?, &mut files)?;

    let prep = prepare_data(cfg)?;
    prep.tokenizer.save(&dir.join(VOCAB_FILE))?;
    files.push(VOCAB_FILE.into());
    let mut datasets: Vec<(&str, &[TaskInstance])> =
        vec![(TRAIN_DATA, &prep.train), (EVAL_DATA, &prep.eval)];
    if let Some((tb, eb)) = &prep.phase_b {
        datasets.push((TRAIN_B_DATA, tb));
        datasets.push((EVAL_B_DATA, eb));
    }
    for (rel, data) in datasets {
        export_jsonl(&dir.join(rel), data)?;
        files.push(rel.into());
    }

    let mut model = build_model(cfg, &prep)?;
    let mut log = TrainLog::default();
    let tcfg = cfg.train_config();
    let mut saved: Vec<String> = Vec::new();
    let sequential = match &prep.phase_b {
        None => {
            train(
                &mut model,
                &prep.tokenizer,
                &prep.train,
                &tcfg,
                "A",
                &mut log,
                |e, m| {
                    let rel = format!("checkpoints/epoch-{}.ckpt", e + 1);
                    save_checkpoint(m, &dir.join(&rel))?;
                    saved.push(rel);
                    Ok(())
                },
            )?;
            None
        }
        Some((train_b, _)) => Some(train_sequential(
            &mut model,
            &prep.tokenizer,
            &prep.train,
            train_b,
            &tcfg,
            &mut log,
            |phase, e, m| {
                let rel = format!(
                    "checkpoints/phase-{}-epoch-{}.ckpt",
                    phase.to_lowercase(),
                    e + 1
                );
                save_checkpoint(m, &dir.join(&rel))?;
                saved.push(rel);
                Ok(())
            },
        )?),
    };
    files.extend(saved);
    save_checkpoint(&model, &dir.join(FINAL_CHECKPOINT))?;
    files.push(FINAL_CHECKPOINT.into());
    write(METRICS_FILE, &log.metrics_csv(), &mut files)?;
    write(MI_FILE, &log.mi_csv(), &mut files)?;
    files.push(MANIFEST_FILE.into());
    Manifest {
        created_unix: unix_now(),
        seed: cfg.seed,
        seed_override,
        files: files.clone(),
    }
    .write(dir)?;
    Ok(RunOutcome {
        model,
        prepared: prep,
        log,
        sequential,
        files,
    })
}

/// A trained run loaded back from its directory.
#[derive(Debug)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub config: RunConfig,
    pub tokenizer: Tokenizer,
    pub model: IclmModel,
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact(path))
    }
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let config = RunConfig::load(&require(dir.join(CONFIG_FILE))?)?;
    let tokenizer = Tokenizer::load(&require(dir.join(VOCAB_FILE))?)?;
    let model = load_checkpoint(&config, &require(dir.join(FINAL_CHECKPOINT))?)?;
    Ok(LoadedRun {
        dir: dir.to_path_buf(),
        config,
        tokenizer,
        model,
    })
}

impl LoadedRun {
    /// The run's evaluation instances (both phases for sequential runs).
    pub fn eval_data(&self) -> Result<Vec<TaskInstance>> {
        let max_prompt = self.config.data.synth.max_prompt_tokens;
        let mut out = ingest_jsonl(&require(self.dir.join(EVAL_DATA))?, max_prompt)?;
        let b = self.dir.join(EVAL_B_DATA);
        if b.exists() {
            out.extend(ingest_jsonl(&b, max_prompt)?);
        }
        Ok(out)
    }

    pub fn train_data(&self) -> Result<Vec<TaskInstance>> {
        ingest_jsonl(
            &require(self.dir.join(TRAIN_DATA))?,
            self.config.data.synth.max_prompt_tokens,
        )
    }
}

/// One accuracy row of an evaluation report.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub mode: EvalMode,
    pub instances: usize,
    pub accuracy: f64,
}

pub const EVAL_FILE: &str = "eval.csv";

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut out = String::from("mode,instances,accuracy\n");
    for r in rows {
        out.push_str(&format!("{},{},{}\n", r.mode, r.instances, r.accuracy));
    }
    out
}

/// Accuracy of a loaded run in each requested mode; writes `eval.csv`.
pub fn eval_run(
    run: &LoadedRun,
    data: &[TaskInstance],
    modes: &[EvalMode],
) -> Result<Vec<EvalRow>> {
    let mut rows = Vec::with_capacity(modes.len());
    for &mode in modes {
        rows.push(EvalRow {
            mode,
            instances: data.len(),
            accuracy: evaluate_accuracy(&run.model, &run.tokenizer, data, mode, 32)?,
        });
    }
    fs::write(run.dir.join(EVAL_FILE), eval_csv(&rows))?;
    Ok(rows)
}

pub const AUDIT_DIR: &str = "audit";
/// Learning rate of the fixed-step cross-step dependence probe.
pub const PROBE_LR: f64 = 1e-2;

/// Rows of `batch` routed to each specific module.
fn rows_by_module(model: &IclmModel, batch: &TokenBatch) -> Result<Vec<Vec<usize>>> {
    let hidden = model
        .router
        .forward(&batch.tokens, batch.batch, batch.seq)?
        .last;
    let routing = model.codebook.route(&hidden, &batch.prompt_mask)?;
    let mut out = vec![Vec::new(); model.n_specific()];
    for (r, &k) in routing.chosen.iter().enumerate() {
        out[k].push(r);
    }
    Ok(out)
}

/// Run every audit and analysis on a loaded run, writing CSVs and a JSON
/// manifest under `audit/`. `fault` wires the router to a specific module's
/// state, which the structural checks must catch.
pub fn audit_run(run: &LoadedRun, fault: bool) -> Result<AuditReport> {
    let dir = run.dir.join(AUDIT_DIR);
    fs::create_dir_all(&dir)?;
    let data = run.eval_data()?;
    let (model, tok) = (&run.model, &run.tokenizer);
    let opts = ForwardOptions {
        fault_router_reads_specific: fault,
        ..Default::default()
    };
    let batcher = Batcher {
        tokenizer: tok,
        data: &data,
        max_len: model.invariant.config.max_seq_len,
    };
    let batches = batcher.sequential(16)?;
    let mut report = AuditReport::default();
    let emit = |name: &str, text: String, report: &mut AuditReport| -> Result<()> {
        fs::write(dir.join(name), text)?;
        report.files.push(format!("{AUDIT_DIR}/{name}"));
        Ok(())
    };

    let (checks, interventions) = intervention_checks(model, tok, &data, &batches[0], &opts)?;
    report.checks.extend(checks);
    let mut csv =
        String::from("target,value,router_max_abs_diff,invariant_max_abs_diff,next_step_l2\n");
    let next = batches.get(1).unwrap_or(&batches[0]);
    for (target, name, r) in &interventions {
        let values = intervention_values(model, tok, &data, *target)?;
        let value = &values
            .iter()
            .find(|(n, _)| n == name)
            .expect("value listed")
            .1;
        let probe = two_step_probe(model, &batches[0], next, *target, value, PROBE_LR)?;
        let label = match target {
            Target::Invariant => "inv".to_string(),
            Target::Specific(k) => format!("spec{k}"),
        };
        let inv = r
            .invariant_max_diff
            .map_or("NA".to_string(), |v| v.to_string());
        csv.push_str(&format!(
            "{label},{name},{},{inv},{probe}\n",
            r.router_max_diff
        ));
    }
    emit("interventions.csv", csv, &mut report)?;

    if model.codebook.strategy.one_hot() {
        for (k, rows) in rows_by_module(model, &batches[0])?.into_iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            for mut c in grad_isolation_audit(model, &batches[0].select(&rows), &opts)? {
                c.name = format!("{}.routed_to_spec{k}", c.name);
                report.checks.push(c);
            }
        }
    } else {
        report
            .checks
            .extend(grad_isolation_audit(model, &batches[0], &opts)?);
    }

    emit(
        "inference_mi.csv",
        inference_mi_csv(&inference_mi(model, tok, &data, 16)?),
        &mut report,
    )?;
    let table = alignment_table(model, tok, &data)?;
    emit("alignment.csv", table.to_csv(), &mut report)?;
    let mut pairs = vec![(ModuleRef::Invariant, ModuleRef::Invariant)];
    for k in 0..model.n_specific() {
        pairs.push((ModuleRef::Invariant, ModuleRef::Specific(k)));
    }
    for (a, b) in pairs {
        let m = pearson_layer_matrix(model, a, b, tok, &data, Pooling::MeanScalar)?;
        emit(&format!("pearson_{a}_{b}.csv"), m.to_csv(), &mut report)?;
    }
    emit("checks.csv", report.to_csv(), &mut report)?;
    report.files.push(format!("{AUDIT_DIR}/manifest.json"));
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    Ok(report)
}

pub const PROJECTION_DIR: &str = "projection";

/// 2-D projections of the router's final and penultimate states over
/// `data`, labelled by format and split. Returns the final-state set.
pub fn project_run(run: &LoadedRun, data: &[TaskInstance]) -> Result<ProjectionSet> {
    let dir = run.dir.join(PROJECTION_DIR);
    fs::create_dir_all(&dir)?;
    let router = &run.model.router;
    let batcher = Batcher {
        tokenizer: &run.tokenizer,
        data,
        max_len: router.config.max_seq_len,
    };
    let penultimate = router.config.n_layers.saturating_sub(1);
    let (mut last, mut prev) = (Vec::new(), Vec::new());
    for b in batcher.sequential(64)? {
        let h = router.forward(&b.tokens, b.batch, b.seq)?;
        last.extend(pool_rows(&h.last, &b.prompt_mask)?);
        prev.extend(pool_rows(&h.layers[penultimate], &b.prompt_mask)?);
    }
    let labels: Vec<String> = data.iter().map(TaskInstance::label).collect();
    let mut out = None;
    for (name, points) in [("router_final", last), ("router_penultimate", prev)] {
        let p = mds_project_2d(&points, &labels)?;
        fs::write(dir.join(format!("{name}.csv")), p.to_csv())?;
        fs::write(dir.join(format!("{name}.svg")), p.to_svg())?;
        out.get_or_insert(p);
    }
    Ok(out.expect("two projections"))
}
