//! Config-driven command surface.
//!
//! Every command reads one JSON run config, applies `--set key=value`
//! overrides, echoes the effective config next to its outputs and stamps
//! each output file with the format version, config hash and seed.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

use crate::data::{
    build_source, corpus_read, corpus_write, generate_seqkd_corpus, sample_corpus, source_load,
    source_save, Corpus, MarkovSource, SourceSpec,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    build_tasks, completion_accuracy, divergence_audit, gradcheck, k1_study, positional_entropy,
    Decoding, StateSampler,
};
use crate::model::{
    checkpoint_load, checkpoint_save, ConditionalModel, ContextKey, TabularLM, TokenId, Vocab,
};
use crate::numerics::{lab_rng, CategoricalDist};
use crate::objectives::ObjectiveTag;
use crate::training::{
    distill_offpolicy, distill_onpolicy_opd, metrics_write, run_experiment, train_teacher_mle,
    MetricsRow, Stage, StageData, TeacherMode, TrainConfig,
};
use crate::{FileStamp, FORMAT_VERSION};

/// Environment variable capping sweep concurrency.
pub const THREADS_ENV: &str = "DISTILL_LAB_THREADS";

/// Largest gradient-check error the `gradcheck` command accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Parser)]
#[command(
    name = "distill-lab",
    version,
    about = "Tabular knowledge-distillation lab"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, clap::Args)]
pub struct CommonArgs {
    /// JSON run config.
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a config value, e.g. `--set train.lr=0.5`. Values parse as
    /// JSON when they can and as strings otherwise.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured source to `source.json`.
    GenSource(CommonArgs),
    /// Sample a corpus to `corpus.txt`.
    GenCorpus(CommonArgs),
    /// Fit a tabular teacher by maximum likelihood to `teacher.ckpt.json`.
    TrainTeacher(CommonArgs),
    /// Off-policy distillation, or the configured stage pipeline.
    Distill(CommonArgs),
    /// On-policy distillation from student rollouts.
    Opd(CommonArgs),
    /// Divergence audit, entropy profile, accuracy and optional K1 study.
    Eval(CommonArgs),
    /// Finite-difference check of the analytic gradient.
    Gradcheck(CommonArgs),
    /// One run per (objective, seed) cell.
    Sweep(CommonArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenSource(_) => "gen-source",
            Command::GenCorpus(_) => "gen-corpus",
            Command::TrainTeacher(_) => "train-teacher",
            Command::Distill(_) => "distill",
            Command::Opd(_) => "opd",
            Command::Eval(_) => "eval",
            Command::Gradcheck(_) => "gradcheck",
            Command::Sweep(_) => "sweep",
        }
    }

    fn args(&self) -> &CommonArgs {
        match self {
            Command::GenSource(a)
            | Command::GenCorpus(a)
            | Command::TrainTeacher(a)
            | Command::Distill(a)
            | Command::Opd(a)
            | Command::Eval(a)
            | Command::Gradcheck(a)
            | Command::Sweep(a) => a,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    #[default]
    GroundTruth,
    TeacherGenerated,
}

fn d_num_seqs() -> usize {
    2000
}
fn d_len() -> usize {
    64
}
fn d_temperature() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSection {
    /// Read this corpus instead of sampling one.
    #[serde(default)]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub kind: CorpusKind,
    #[serde(default = "d_num_seqs")]
    pub num_seqs: usize,
    #[serde(default = "d_len")]
    pub len: usize,
    /// Teacher temperature for generated corpora.
    #[serde(default = "d_temperature")]
    pub temperature: f64,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            path: None,
            kind: CorpusKind::default(),
            num_seqs: d_num_seqs(),
            len: d_len(),
            temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSection {
    pub name: String,
    /// Training fields for this stage; the seed comes from the run.
    pub train: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub objectives: Vec<ObjectiveTag>,
    pub seeds: Vec<u64>,
}

fn d_n_states() -> usize {
    4096
}
fn d_profile_prompts() -> usize {
    1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct K1Section {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub n_trials: usize,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Checkpoint to evaluate; defaults to `student.ckpt.json` in the
    /// output directory.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default = "d_n_states")]
    pub n_states: usize,
    #[serde(default = "d_len")]
    pub horizon: usize,
    #[serde(default = "d_profile_prompts")]
    pub profile_prompts: usize,
    #[serde(default)]
    pub k1: Option<K1Section>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            checkpoint: None,
            n_states: d_n_states(),
            horizon: d_len(),
            profile_prompts: d_profile_prompts(),
            k1: None,
        }
    }
}

fn d_items() -> usize {
    64
}
fn d_eps() -> f64 {
    1e-5
}
fn d_vocab() -> usize {
    8
}
fn d_order() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSection {
    #[serde(default = "d_items")]
    pub items: usize,
    #[serde(default = "d_eps")]
    pub eps: f64,
    #[serde(default = "d_vocab")]
    pub vocab_size: usize,
    #[serde(default = "d_order")]
    pub order: usize,
}

impl Default for GradcheckSection {
    fn default() -> Self {
        Self {
            items: d_items(),
            eps: d_eps(),
            vocab_size: d_vocab(),
            order: d_order(),
        }
    }
}

fn d_out_dir() -> PathBuf {
    PathBuf::from("out")
}

fn d_source() -> SourceSpec {
    SourceSpec::BimodalGap {
        vocab_size: 8,
        noise: 0.05,
    }
}

/// The whole run document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "d_out_dir")]
    pub out_dir: PathBuf,
    #[serde(default = "d_source")]
    pub source: SourceSpec,
    /// Load the source from a file instead of building `source`.
    #[serde(default)]
    pub source_path: Option<PathBuf>,
    #[serde(default)]
    pub corpus: CorpusSection,
    /// Order of the fitted teacher; defaults to the source order.
    #[serde(default)]
    pub teacher_order: Option<usize>,
    /// Use this teacher checkpoint instead of the configured teacher mode.
    #[serde(default)]
    pub teacher_path: Option<PathBuf>,
    #[serde(default = "d_order")]
    pub student_order: usize,
    /// Start the student from this checkpoint instead of uniform rows.
    #[serde(default)]
    pub student_init: Option<PathBuf>,
    /// Training fields; the seed comes from the run.
    #[serde(default)]
    pub train: Option<Value>,
    #[serde(default)]
    pub stages: Vec<StageSection>,
    #[serde(default)]
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub gradcheck: GradcheckSection,
}

/// Sets `path` (dot-separated) in a JSON object tree.
fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!(
                "override key `{path}` has an empty segment"
            )));
        }
        let obj = match node {
            Value::Object(map) => map,
            Value::Null => {
                *node = Value::Object(Map::new());
                node.as_object_mut().expect("just created")
            }
            _ => {
                return Err(Error::Config(format!(
                    "override `{path}`: `{part}` is inside a non-object value"
                )))
            }
        };
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert(Value::Null);
    }
    unreachable!("split yields at least one segment")
}

/// Applies `key=value` overrides to a config document.
pub fn apply_overrides(doc: &mut Value, overrides: &[String]) -> Result<()> {
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
        let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        set_path(doc, key.trim(), value)?;
    }
    Ok(())
}

/// Hex SHA-256 of the compact JSON form (object keys are sorted).
pub fn config_hash(doc: &Value) -> String {
    hex::encode(Sha256::digest(
        serde_json::to_string(doc)
            .expect("JSON value serializes")
            .as_bytes(),
    ))
}

fn config_error(e: serde_json::Error) -> Error {
    Error::Config(e.to_string())
}

/// A parsed, validated config with paths resolved against the config file.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub run: RunConfig,
    pub effective: Value,
    pub hash: String,
}

impl LoadedConfig {
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut doc: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if !doc.is_object() {
            return Err(Error::Config("config must be a JSON object".into()));
        }
        apply_overrides(&mut doc, overrides)?;
        let hash = config_hash(&doc);
        let mut run: RunConfig = serde_json::from_value(doc.clone()).map_err(config_error)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut run.out_dir);
        for p in [
            &mut run.source_path,
            &mut run.corpus.path,
            &mut run.teacher_path,
            &mut run.student_init,
            &mut run.eval.checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            resolve(p);
        }
        let loaded = Self {
            run,
            effective: doc,
            hash,
        };
        loaded.validate()?;
        Ok(loaded)
    }

    fn validate(&self) -> Result<()> {
        let r = &self.run;
        if r.student_order == 0 {
            return Err(Error::Config(
                "field `student_order`: must be at least 1".into(),
            ));
        }
        if r.corpus.num_seqs == 0 || r.corpus.len == 0 {
            return Err(Error::Config(
                "field `corpus`: num_seqs and len must be at least 1".into(),
            ));
        }
        match (&r.train, &r.sweep) {
            (Some(t), Some(sw)) => {
                for objective in &sw.objectives {
                    let mut section = t.clone();
                    set_path(&mut section, "objective", Value::from(objective.as_str()))?;
                    self.train_config(&section)?;
                }
            }
            (Some(t), None) => {
                self.train_config(t)?;
            }
            _ => {}
        }
        for s in &r.stages {
            self.train_config(&s.train)
                .map_err(|e| Error::Config(format!("stage `{}`: {e}", s.name)))?;
        }
        if let Some(sw) = &r.sweep {
            if sw.objectives.is_empty() || sw.seeds.is_empty() {
                return Err(Error::Config(
                    "field `sweep`: objectives and seeds must be non-empty".into(),
                ));
            }
        }
        Ok(())
    }

    fn stamp(&self) -> FileStamp {
        self.stamp_seed(self.run.seed)
    }

    fn stamp_seed(&self, seed: u64) -> FileStamp {
        FileStamp {
            config_hash: self.hash.clone(),
            seed,
        }
    }

    /// Builds a training config from a `train` section and the run seed.
    pub fn train_config(&self, section: &Value) -> Result<TrainConfig> {
        self.train_config_seeded(section, self.run.seed)
    }

    fn train_config_seeded(&self, section: &Value, seed: u64) -> Result<TrainConfig> {
        let mut obj = match section {
            Value::Object(m) => m.clone(),
            _ => return Err(Error::Config("field `train`: must be an object".into())),
        };
        if obj.contains_key("seed") {
            return Err(Error::Config(
                "field `train.seed`: the seed is set at the top level".into(),
            ));
        }
        obj.insert("seed".into(), Value::from(seed));
        let cfg: TrainConfig = serde_json::from_value(Value::Object(obj))
            .map_err(|e| Error::Config(format!("field `train`: {e}")))?;
        cfg.validate()
            .map_err(|e| Error::Config(format!("field `train`: {e}")))?;
        Ok(cfg)
    }

    fn main_train(&self) -> Result<TrainConfig> {
        let section = self
            .run
            .train
            .as_ref()
            .ok_or_else(|| Error::Config("missing field `train`".into()))?;
        self.train_config(section)
    }

    fn source(&self) -> Result<MarkovSource> {
        match &self.run.source_path {
            Some(p) => source_load(p),
            None => build_source(&self.run.source),
        }
    }

    fn ground_truth_corpus(&self, source: &MarkovSource, seed: u64) -> Result<Corpus> {
        match &self.run.corpus.path {
            Some(p) => corpus_read(p),
            None => sample_corpus(source, self.run.corpus.num_seqs, self.run.corpus.len, seed),
        }
    }

    fn teacher(
        &self,
        source: &MarkovSource,
        train: &TrainConfig,
    ) -> Result<Box<dyn ConditionalModel + Sync>> {
        if let Some(p) = &self.run.teacher_path {
            return Ok(Box::new(checkpoint_load(p)?));
        }
        Ok(match train.teacher_mode {
            TeacherMode::OracleSource => Box::new(source.clone()),
            TeacherMode::MleFit => {
                let corpus = self.ground_truth_corpus(source, train.seed)?;
                let order = self.run.teacher_order.unwrap_or(source.order());
                Box::new(train_teacher_mle(&corpus, order, train.smoothing)?)
            }
        })
    }

    /// Training corpus for an off-policy objective: teacher generations for
    /// `seqkd` or when configured, ground truth otherwise.
    fn training_corpus(
        &self,
        source: &MarkovSource,
        teacher: &dyn ConditionalModel,
        train: &TrainConfig,
    ) -> Result<Corpus> {
        let generated = train.objective == ObjectiveTag::Seqkd
            || self.run.corpus.kind == CorpusKind::TeacherGenerated;
        if generated && self.run.corpus.path.is_none() {
            let prompts = vec![Vec::new(); self.run.corpus.num_seqs];
            generate_seqkd_corpus(
                teacher,
                &prompts,
                self.run.corpus.len,
                train.seed,
                train.temperature,
            )
        } else {
            self.ground_truth_corpus(source, train.seed)
        }
    }

    fn initial_student(&self, vocab_size: usize) -> Result<TabularLM> {
        match &self.run.student_init {
            Some(p) => checkpoint_load(p),
            None => TabularLM::new(self.run.student_order, Vocab::with_size(vocab_size)?),
        }
    }

    fn out(&self, name: &str) -> PathBuf {
        self.run.out_dir.join(name)
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn stamp_line(stamp: &FileStamp) -> String {
    format!(
        "# format_version={} config_hash={} seed={}\n",
        FORMAT_VERSION, stamp.config_hash, stamp.seed
    )
}

/// Writes a small two-or-more column CSV with the stamp line on top.
fn write_table(
    path: &Path,
    stamp: &FileStamp,
    header: &[&str],
    rows: &[Vec<String>],
) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(stamp_line(stamp).into_bytes());
    let csv_err = |e: csv::Error| Error::InvalidInput(format!("csv: {e}"));
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.write_record(r).map_err(csv_err)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Runs one training cell: off-policy objectives learn from a corpus,
/// on-policy ones from rollouts of `horizon` tokens.
fn train_cell(
    cfg: &LoadedConfig,
    source: &MarkovSource,
    train: &TrainConfig,
) -> Result<(TabularLM, Vec<MetricsRow>)> {
    let teacher = cfg.teacher(source, train)?;
    let student = cfg.initial_student(source.vocab().size())?;
    if train.objective.is_on_policy() {
        distill_onpolicy_opd(
            train,
            teacher.as_ref(),
            student,
            &[Vec::new()],
            train.horizon,
        )
    } else {
        let corpus = cfg.training_corpus(source, teacher.as_ref(), train)?;
        distill_offpolicy(train, teacher.as_ref(), &corpus, student)
    }
}

fn cmd_distill(cfg: &LoadedConfig, on_policy: bool) -> Result<Vec<PathBuf>> {
    let source = cfg.source()?;
    if !cfg.run.stages.is_empty() && !on_policy {
        let first = cfg.train_config(&cfg.run.stages[0].train)?;
        let teacher = cfg.teacher(&source, &first)?;
        let mut stages = Vec::with_capacity(cfg.run.stages.len());
        for s in &cfg.run.stages {
            let train = cfg.train_config(&s.train)?;
            let data = if train.objective.is_on_policy() {
                StageData::Prompts(vec![Vec::new()])
            } else {
                StageData::Corpus(cfg.training_corpus(&source, teacher.as_ref(), &train)?)
            };
            stages.push(Stage {
                name: s.name.clone(),
                cfg: train,
                data,
            });
        }
        let student = cfg.initial_student(source.vocab().size())?;
        let outputs = run_experiment(
            teacher.as_ref(),
            student,
            &stages,
            &cfg.run.out_dir,
            &cfg.hash,
        )?;
        return Ok(outputs
            .into_iter()
            .flat_map(|o| [o.metrics_path, o.checkpoint_path])
            .collect());
    }
    let train = cfg.main_train()?;
    if train.objective.is_on_policy() != on_policy {
        let want = if on_policy {
            "an on-policy"
        } else {
            "an off-policy"
        };
        return Err(Error::Config(format!(
            "field `train.objective`: `{}` is not {want} objective",
            train.objective
        )));
    }
    let (student, rows) = train_cell(cfg, &source, &train)?;
    let (csv, ckpt) = (cfg.out("metrics.csv"), cfg.out("student.ckpt.json"));
    metrics_write(&rows, &csv, &cfg.stamp())?;
    checkpoint_save(&student, &ckpt, &cfg.stamp())?;
    Ok(vec![csv, ckpt])
}

fn sweep_threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "{THREADS_ENV} must be a positive integer, got `{v}`"
            ))),
        },
    }
}

fn cmd_sweep(cfg: &LoadedConfig) -> Result<Vec<PathBuf>> {
    let sweep = cfg
        .run
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config("missing field `sweep`".into()))?;
    let base = cfg
        .run
        .train
        .clone()
        .unwrap_or_else(|| Value::Object(Map::new()));
    let source = cfg.source()?;
    let dir = cfg.out("sweep");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut cells = Vec::new();
    for &objective in &sweep.objectives {
        for &seed in &sweep.seeds {
            let mut section = base.clone();
            set_path(&mut section, "objective", Value::from(objective.as_str()))?;
            cells.push((objective, seed, cfg.train_config_seeded(&section, seed)?));
        }
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(sweep_threads()?)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let results: Vec<Result<Vec<PathBuf>>> = pool.install(|| {
        cells
            .par_iter()
            .map(|(objective, seed, train)| {
                let (student, rows) = train_cell(cfg, &source, train)?;
                let stem = format!("{objective}_seed{seed}");
                let (csv, ckpt) = (
                    dir.join(format!("{stem}.csv")),
                    dir.join(format!("{stem}.ckpt.json")),
                );
                metrics_write(&rows, &csv, &cfg.stamp_seed(*seed))?;
                checkpoint_save(&student, &ckpt, &cfg.stamp_seed(*seed))?;
                Ok(vec![csv, ckpt])
            })
            .collect()
    });
    let mut written = Vec::new();
    for r in results {
        written.extend(r?);
    }
    Ok(written)
}

fn cmd_eval(cfg: &LoadedConfig) -> Result<Vec<PathBuf>> {
    let source = cfg.source()?;
    let train = match &cfg.run.train {
        Some(t) => cfg.train_config(t)?,
        None => TrainConfig::new(ObjectiveTag::Hpd, cfg.run.seed),
    };
    let teacher = cfg.teacher(&source, &train)?;
    let ckpt = cfg
        .run
        .eval
        .checkpoint
        .clone()
        .unwrap_or_else(|| cfg.out("student.ckpt.json"));
    let student = checkpoint_load(&ckpt)?;
    let ev = &cfg.run.eval;
    let stamp = cfg.stamp();
    let mut written = Vec::new();

    let sampler = StateSampler::Rollouts {
        model: teacher.as_ref(),
        horizon: ev.horizon,
        seed: cfg.run.seed,
    };
    let audit = divergence_audit(&student, teacher.as_ref(), &sampler, ev.n_states)?;
    let mut task_rng = lab_rng(cfg.run.seed, 1);
    let tasks = build_tasks(
        teacher.as_ref(),
        train.num_tasks,
        train.task_prompt_len,
        train.task_len,
        &mut task_rng,
    )?;
    let mut rows = vec![
        vec!["kl_fwd".to_string(), audit.kl_fwd.to_string()],
        vec!["kl_rev".to_string(), audit.kl_rev.to_string()],
        vec!["n_states".to_string(), audit.n_states.to_string()],
    ];
    if !tasks.is_empty() {
        let acc = completion_accuracy(&student, &tasks, Decoding::Greedy)?;
        rows.push(vec!["accuracy".to_string(), acc.to_string()]);
    }
    let path = cfg.out("audit.csv");
    write_table(&path, &stamp, &["metric", "value"], &rows)?;
    written.push(path);

    let prompts = vec![Vec::new(); ev.profile_prompts.max(1)];
    let profile = positional_entropy(
        &student,
        &prompts,
        ev.horizon,
        &mut lab_rng(cfg.run.seed, 2),
    )?;
    let rows: Vec<Vec<String>> = profile
        .per_position
        .iter()
        .enumerate()
        .map(|(t, h)| vec![t.to_string(), h.to_string()])
        .collect();
    let path = cfg.out("entropy_profile.csv");
    write_table(&path, &stamp, &["position", "entropy"], &rows)?;
    written.push(path);

    if let Some(k1) = &ev.k1 {
        let p = CategoricalDist::from_probs(k1.p.clone())?;
        let q = CategoricalDist::from_probs(k1.q.clone())?;
        let study = k1_study(
            &p,
            &q,
            k1.n_trials,
            k1.n_samples,
            &mut lab_rng(cfg.run.seed, 3),
        )?;
        let mut rows: Vec<Vec<String>> = study
            .estimates
            .iter()
            .enumerate()
            .map(|(i, e)| vec![i.to_string(), e.to_string()])
            .collect();
        rows.push(vec!["exact".into(), study.exact.to_string()]);
        rows.push(vec!["mean".into(), study.mean.to_string()]);
        rows.push(vec!["variance".into(), study.variance.to_string()]);
        rows.push(vec![
            "negative_fraction".into(),
            study.negative_fraction.to_string(),
        ]);
        let path = cfg.out("k1_study.csv");
        write_table(&path, &stamp, &["trial", "estimate"], &rows)?;
        written.push(path);
    }
    Ok(written)
}

/// A context, target token and weight.
pub type WeightedToken = (ContextKey, TokenId, f64);

/// Random logits and random weighted tokens for a gradient check.
pub fn gradcheck_instance(
    vocab_size: usize,
    order: usize,
    items: usize,
    seed: u64,
) -> Result<(TabularLM, Vec<WeightedToken>)> {
    let mut model = TabularLM::new(order, Vocab::with_size(vocab_size)?)?;
    let mut rng = lab_rng(seed, 0);
    let contexts = ContextKey::enumerate(order, vocab_size);
    for ctx in &contexts {
        let row = (0..vocab_size)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        model.set_row(ctx.clone(), row)?;
    }
    let items = (0..items)
        .map(|_| {
            let ctx = contexts[rng.random_range(0..contexts.len())].clone();
            (
                ctx,
                rng.random_range(0..vocab_size),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    Ok((model, items))
}

fn cmd_gradcheck(cfg: &LoadedConfig) -> Result<Vec<PathBuf>> {
    let g = &cfg.run.gradcheck;
    let (model, items) = gradcheck_instance(g.vocab_size, g.order, g.items, cfg.run.seed)?;
    let err = gradcheck(&model, &items, g.eps)?;
    let path = cfg.out("gradcheck.csv");
    write_table(
        &path,
        &cfg.stamp(),
        &["items", "eps", "max_relative_error"],
        &[vec![
            g.items.to_string(),
            g.eps.to_string(),
            err.to_string(),
        ]],
    )?;
    println!("max relative error {err:e}");
    if err > GRADCHECK_TOLERANCE {
        return Err(Error::NumericOverflow(format!(
            "gradient check failed: max relative error {err:e} exceeds {GRADCHECK_TOLERANCE:e}"
        )));
    }
    Ok(vec![path])
}

/// Executes a parsed command line and returns the files it wrote.
pub fn execute(cli: &Cli) -> Result<Vec<PathBuf>> {
    let args = cli.command.args();
    let cfg = LoadedConfig::load(&args.config, &args.overrides)?;
    let out_dir = &cfg.run.out_dir;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let sidecar = cfg.out(&format!("{}.effective.json", cli.command.name()));
    let mut echo = serde_json::to_string_pretty(&cfg.effective).expect("JSON value serializes");
    echo.push('\n');
    write_text(&sidecar, &echo)?;

    let mut written = match &cli.command {
        Command::GenSource(_) => {
            let path = cfg.out("source.json");
            source_save(&cfg.source()?, &path, &cfg.stamp())?;
            vec![path]
        }
        Command::GenCorpus(_) => {
            let source = cfg.source()?;
            let corpus = match cfg.run.corpus.kind {
                CorpusKind::GroundTruth => sample_corpus(
                    &source,
                    cfg.run.corpus.num_seqs,
                    cfg.run.corpus.len,
                    cfg.run.seed,
                )?,
                CorpusKind::TeacherGenerated => {
                    let train = match &cfg.run.train {
                        Some(t) => cfg.train_config(t)?,
                        None => TrainConfig::new(ObjectiveTag::Seqkd, cfg.run.seed),
                    };
                    let teacher = cfg.teacher(&source, &train)?;
                    let prompts = vec![Vec::new(); cfg.run.corpus.num_seqs];
                    generate_seqkd_corpus(
                        teacher.as_ref(),
                        &prompts,
                        cfg.run.corpus.len,
                        cfg.run.seed,
                        cfg.run.corpus.temperature,
                    )?
                }
            };
            let path = cfg.out("corpus.txt");
            corpus_write(&corpus, &path, &cfg.hash)?;
            vec![path]
        }
        Command::TrainTeacher(_) => {
            let source = cfg.source()?;
            let smoothing = match &cfg.run.train {
                Some(t) => cfg.train_config(t)?.smoothing,
                None => 0.0,
            };
            let corpus = cfg.ground_truth_corpus(&source, cfg.run.seed)?;
            let order = cfg.run.teacher_order.unwrap_or(source.order());
            let teacher = train_teacher_mle(&corpus, order, smoothing)?;
            let path = cfg.out("teacher.ckpt.json");
            checkpoint_save(&teacher, &path, &cfg.stamp())?;
            vec![path]
        }
        Command::Distill(_) => cmd_distill(&cfg, false)?,
        Command::Opd(_) => cmd_distill(&cfg, true)?,
        Command::Eval(_) => cmd_eval(&cfg)?,
        Command::Gradcheck(_) => cmd_gradcheck(&cfg)?,
        Command::Sweep(_) => cmd_sweep(&cfg)?,
    };
    written.insert(0, sidecar);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn overrides_take_precedence_and_parse_json() {
        let mut doc = json!({"seed": 1, "train": {"objective": "sft", "lr": 0.1}});
        apply_overrides(
            &mut doc,
            &[
                "train.lr=0.5".into(),
                "train.objective=hpd".into(),
                "eval.k1.n_trials=3".into(),
            ],
        )
        .unwrap();
        assert_eq!(doc["train"]["lr"], json!(0.5));
        assert_eq!(doc["train"]["objective"], json!("hpd"));
        assert_eq!(doc["eval"]["k1"]["n_trials"], json!(3));
        assert!(apply_overrides(&mut doc, &["novalue".into()]).is_err());
        assert!(apply_overrides(&mut doc, &["seed.inner=1".into()]).is_err());
    }

    #[test]
    fn hash_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"seed":1,"out_dir":"x"}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"out_dir":"x","seed":1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_eq!(config_hash(&a).len(), 64);
    }

    fn load(doc: Value, overrides: &[&str]) -> Result<LoadedConfig> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, doc.to_string()).unwrap();
        let overrides: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        LoadedConfig::load(&path, &overrides)
    }

    #[test]
    fn config_validation() {
        assert!(
            matches!(load(json!({"out_dir": "o"}), &[]), Err(Error::Config(m)) if m.contains("seed"))
        );
        assert!(
            matches!(load(json!({"seed": 1, "bogus": 2}), &[]), Err(Error::Config(m)) if m.contains("bogus"))
        );
        let bad_lr = load(
            json!({"seed": 1, "train": {"objective": "hpd", "lr": -1.0}}),
            &[],
        );
        assert!(matches!(bad_lr, Err(Error::Config(m)) if m.contains("lr")));
        let dup_seed = load(
            json!({"seed": 1, "train": {"objective": "hpd", "seed": 2}}),
            &[],
        );
        assert!(matches!(dup_seed, Err(Error::Config(m)) if m.contains("train.seed")));
        let unknown = load(json!({"seed": 1, "train": {"objective": "ppo"}}), &[]);
        assert!(matches!(unknown, Err(Error::Config(_))));
        let ok = load(
            json!({"seed": 1, "train": {"objective": "sft"}}),
            &["train.lr=0.3"],
        )
        .unwrap();
        assert_eq!(ok.main_train().unwrap().lr, 0.3);
        assert_eq!(ok.main_train().unwrap().seed, 1);
        assert!(ok.run.out_dir.is_absolute());
    }
}
