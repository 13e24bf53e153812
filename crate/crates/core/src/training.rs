//! Teacher fitting, off-policy distillation over every reweighted objective,
//! on-policy distillation with per-token log-ratio rewards, and staged
//! pipelines that thread a student checkpoint from one stage to the next.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Provenance};
use crate::error::{Error, Result};
use crate::evaluation::{build_tasks, completion_accuracy, Decoding, StateTable, Task};
use crate::model::{
    checkpoint_load, checkpoint_save, ConditionalModel, ContextKey, GradAccumulator, Optimizer,
    OptimizerKind, TabularLM, TokenId, LOGIT_FLOOR,
};
use crate::numerics::{lab_rng, CategoricalDist, LabRng};
use crate::objectives::{
    hpd_weights, weight_fkld_token, weight_jsd_off, weight_rkld_off, weight_rkld_on, weight_sft,
    weights_fkld_dense, ObjectiveKind, ObjectiveTag,
};
use crate::{FileStamp, FORMAT_VERSION};

const STREAM_BATCH: u64 = 10;
const STREAM_STUDENT_SAMPLES: u64 = 11;
const STREAM_EVAL_STATES: u64 = 12;
const STREAM_TASKS: u64 = 13;
const STREAM_ROLLOUTS: u64 = 14;
const STREAM_STUDENT_EVAL: u64 = 1 << 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// The source's exact conditionals.
    #[default]
    OracleSource,
    /// A tabular model fit by maximum likelihood on a ground-truth corpus.
    MleFit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpdRewardMode {
    /// Each step is weighted by its own reward.
    #[default]
    PerToken,
    /// Every step is weighted by the summed reward of its rollout.
    Trajectory,
}

/// Which rollouts supply the states for KL metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalStates {
    #[default]
    Teacher,
    Student,
}

fn d_beta() -> f64 {
    0.5
}
fn d_lr() -> f64 {
    0.1
}
fn d_steps() -> usize {
    2000
}
fn d_batch() -> usize {
    4
}
fn d_eval_every() -> usize {
    100
}
fn d_temperature() -> f64 {
    1.0
}
fn d_one() -> usize {
    1
}
fn d_eval_rollouts() -> usize {
    64
}
fn d_horizon() -> usize {
    64
}
fn d_num_tasks() -> usize {
    200
}
fn d_task_prompt_len() -> usize {
    2
}
fn d_task_len() -> usize {
    3
}

/// Hyperparameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: ObjectiveTag,
    /// Teacher mixing weight for `jsd_off`.
    #[serde(default = "d_beta")]
    pub beta: f64,
    /// Flips the off-policy reverse-KL and JSD weights.
    #[serde(default)]
    pub sign_fidelity: bool,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_steps")]
    pub steps: usize,
    /// Sequences (off-policy) or rollouts (on-policy) per step.
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default = "d_eval_every")]
    pub eval_every: usize,
    #[serde(default)]
    pub teacher_mode: TeacherMode,
    /// Add-λ smoothing for the fitted teacher.
    #[serde(default)]
    pub smoothing: f64,
    #[serde(default)]
    pub opd_reward_mode: OpdRewardMode,
    /// Teacher sampling temperature for generated corpora; zero is greedy.
    #[serde(default = "d_temperature")]
    pub temperature: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    /// Student draws per state for the HPD family.
    #[serde(default = "d_one")]
    pub samples_per_state: usize,
    /// Subtract the batch-mean reward coefficient in on-policy runs.
    #[serde(default)]
    pub batch_mean_baseline: bool,
    #[serde(default)]
    pub eval_states: EvalStates,
    /// Rollouts drawn to build the KL evaluation states.
    #[serde(default = "d_eval_rollouts")]
    pub eval_rollouts: usize,
    /// Rollout length for on-policy training and evaluation states.
    #[serde(default = "d_horizon")]
    pub horizon: usize,
    #[serde(default = "d_num_tasks")]
    pub num_tasks: usize,
    #[serde(default = "d_task_prompt_len")]
    pub task_prompt_len: usize,
    #[serde(default = "d_task_len")]
    pub task_len: usize,
    /// Fill the `wallclock_ms` column. Off keeps metrics byte-reproducible.
    #[serde(default)]
    pub record_wallclock: bool,
}

impl TrainConfig {
    pub fn new(objective: ObjectiveTag, seed: u64) -> Self {
        Self {
            objective,
            beta: d_beta(),
            sign_fidelity: false,
            lr: d_lr(),
            steps: d_steps(),
            batch_size: d_batch(),
            seed,
            eval_every: d_eval_every(),
            teacher_mode: TeacherMode::default(),
            smoothing: 0.0,
            opd_reward_mode: OpdRewardMode::default(),
            temperature: d_temperature(),
            optimizer: OptimizerKind::default(),
            samples_per_state: d_one(),
            batch_mean_baseline: false,
            eval_states: EvalStates::default(),
            eval_rollouts: d_eval_rollouts(),
            horizon: d_horizon(),
            num_tasks: d_num_tasks(),
            task_prompt_len: d_task_prompt_len(),
            task_len: d_task_len(),
            record_wallclock: false,
        }
    }

    pub fn objective_kind(&self) -> ObjectiveKind {
        ObjectiveKind {
            tag: self.objective,
            beta: self.beta,
            sign_fidelity: self.sign_fidelity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: usize| {
            if v == 0 {
                Err(Error::param(name, "must be at least 1"))
            } else {
                Ok(())
            }
        };
        positive("steps", self.steps)?;
        positive("batch_size", self.batch_size)?;
        positive("eval_every", self.eval_every)?;
        positive("samples_per_state", self.samples_per_state)?;
        positive("eval_rollouts", self.eval_rollouts)?;
        positive("horizon", self.horizon)?;
        positive("task_len", self.task_len)?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::param(
                "lr",
                format!("{} must be a finite positive number", self.lr),
            ));
        }
        if !(self.smoothing >= 0.0 && self.smoothing.is_finite()) {
            return Err(Error::param(
                "smoothing",
                format!("{} must be non-negative", self.smoothing),
            ));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::param(
                "temperature",
                format!("{} must be non-negative", self.temperature),
            ));
        }
        self.objective_kind().validate()
    }
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub objective: String,
    pub seed: u64,
    /// Mean student entropy over training states (nats).
    pub train_entropy: Option<f64>,
    /// Mean KL(teacher ‖ student); infinite on a support violation.
    pub kl_fwd: f64,
    /// Mean KL(student ‖ teacher); infinite on a support violation.
    pub kl_rev: f64,
    pub accuracy: Option<f64>,
    pub mean_reward: Option<f64>,
    pub wallclock_ms: Option<u64>,
}

pub const METRICS_HEADER: [&str; 9] = [
    "step",
    "objective",
    "seed",
    "train_entropy",
    "kl_fwd",
    "kl_rev",
    "accuracy",
    "mean_reward",
    "wallclock_ms",
];

/// CSV text: a `#` line with the run identity, then the fixed header.
pub fn metrics_to_csv(rows: &[MetricsRow], stamp: &FileStamp) -> Result<String> {
    let mut buf = Vec::new();
    writeln!(
        buf,
        "# format_version={} config_hash={} seed={}",
        FORMAT_VERSION, stamp.config_hash, stamp.seed
    )
    .expect("write to memory");
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(buf);
    let csv_err = |e: csv::Error| Error::InvalidInput(format!("csv: {e}"));
    w.write_record(METRICS_HEADER).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let buf = w
        .into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    Ok(String::from_utf8(buf).expect("csv output is UTF-8"))
}

pub fn metrics_from_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| Error::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if header.iter().ne(METRICS_HEADER) {
        return Err(Error::Parse {
            line: 2,
            message: format!("unexpected header {header:?}"),
        });
    }
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Parse {
                line: e.position().map(|p| p.line() as usize).unwrap_or(0),
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn metrics_write(rows: &[MetricsRow], path: &Path, stamp: &FileStamp) -> Result<()> {
    fs::write(path, metrics_to_csv(rows, stamp)?).map_err(|e| Error::io(path, e))
}

pub fn metrics_read(path: &Path) -> Result<Vec<MetricsRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    metrics_from_csv(&text)
}

/// Add-λ smoothed conditional frequencies, stored as log-probabilities.
/// Contexts never seen keep the uniform default when λ is zero.
pub fn train_teacher_mle(corpus: &Corpus, order: usize, smoothing: f64) -> Result<TabularLM> {
    if !(smoothing >= 0.0 && smoothing.is_finite()) {
        return Err(Error::param(
            "smoothing",
            format!("{smoothing} must be non-negative"),
        ));
    }
    let vocab = crate::model::Vocab::with_size(corpus.vocab_size)?;
    let v = vocab.size();
    let mut model = TabularLM::new(order, vocab)?;
    let mut counts: BTreeMap<ContextKey, Vec<f64>> = BTreeMap::new();
    for seq in &corpus.sequences {
        for t in 0..seq.len() {
            let ctx = model.context_for(&seq[..t]);
            counts.entry(ctx).or_insert_with(|| vec![0.0; v])[seq[t]] += 1.0;
        }
    }
    let contexts = if smoothing > 0.0 {
        ContextKey::enumerate(order, v)
    } else {
        counts.keys().cloned().collect()
    };
    for ctx in contexts {
        let row = counts.get(&ctx).cloned().unwrap_or_else(|| vec![0.0; v]);
        let total: f64 = row.iter().sum::<f64>() + smoothing * v as f64;
        let logits = row
            .iter()
            .map(|&c| {
                let p = (c + smoothing) / total;
                if p > 0.0 {
                    p.ln()
                } else {
                    LOGIT_FLOOR
                }
            })
            .collect();
        model.set_row(ctx, logits)?;
    }
    Ok(model)
}

/// Teacher rows looked up once per context.
struct TeacherCache<'a> {
    teacher: &'a dyn ConditionalModel,
    rows: BTreeMap<ContextKey, CategoricalDist>,
}

impl<'a> TeacherCache<'a> {
    fn new(teacher: &'a dyn ConditionalModel) -> Self {
        Self {
            teacher,
            rows: BTreeMap::new(),
        }
    }

    fn next_dist(&mut self, prefix: &[TokenId]) -> Result<&CategoricalDist> {
        let ctx = self.teacher.context_for(prefix);
        if !self.rows.contains_key(&ctx) {
            let d = self.teacher.conditional(&ctx)?;
            self.rows.insert(ctx.clone(), d);
        }
        Ok(&self.rows[&ctx])
    }
}

/// Student rows for the current parameters; cleared after every update.
#[derive(Default)]
struct StudentCache {
    rows: BTreeMap<ContextKey, CategoricalDist>,
}

impl StudentCache {
    fn predict(&mut self, student: &TabularLM, ctx: &ContextKey) -> Result<CategoricalDist> {
        if let Some(d) = self.rows.get(ctx) {
            return Ok(d.clone());
        }
        let d = student.predict(ctx)?;
        self.rows.insert(ctx.clone(), d.clone());
        Ok(d)
    }
}

/// Fixed evaluation material shared by every row of a run.
struct Evaluator<'a> {
    cfg: &'a TrainConfig,
    teacher: &'a dyn ConditionalModel,
    teacher_states: StateTable,
    tasks: Vec<Task>,
    started: Instant,
}

impl<'a> Evaluator<'a> {
    fn new(
        cfg: &'a TrainConfig,
        teacher: &'a dyn ConditionalModel,
        student: &TabularLM,
    ) -> Result<Self> {
        let mut rng = lab_rng(cfg.seed, STREAM_EVAL_STATES);
        let mut prefixes = Vec::new();
        for _ in 0..cfg.eval_rollouts {
            let seq = teacher.rollout(&[], cfg.horizon, &mut rng)?;
            prefixes.extend((0..seq.len()).map(|t| seq[..t].to_vec()));
        }
        let teacher_states = StateTable::new(teacher, student, &prefixes);
        let mut task_rng = lab_rng(cfg.seed, STREAM_TASKS);
        let tasks = build_tasks(
            teacher,
            cfg.num_tasks,
            cfg.task_prompt_len,
            cfg.task_len,
            &mut task_rng,
        )?;
        Ok(Self {
            cfg,
            teacher,
            teacher_states,
            tasks,
            started: Instant::now(),
        })
    }

    fn row(
        &self,
        student: &TabularLM,
        step: usize,
        train_entropy: Option<f64>,
        mean_reward: Option<f64>,
    ) -> Result<MetricsRow> {
        let (kl_fwd, kl_rev) = match self.cfg.eval_states {
            EvalStates::Teacher => self.teacher_states.mean_kls(self.teacher, student)?,
            EvalStates::Student => {
                let mut rng = lab_rng(self.cfg.seed, STREAM_STUDENT_EVAL + step as u64);
                let mut prefixes = Vec::new();
                for _ in 0..self.cfg.eval_rollouts {
                    let seq = student.rollout(&[], self.cfg.horizon, &mut rng)?;
                    prefixes.extend((0..seq.len()).map(|t| seq[..t].to_vec()));
                }
                StateTable::new(self.teacher, student, &prefixes).mean_kls(self.teacher, student)?
            }
        };
        let accuracy = if self.tasks.is_empty() {
            None
        } else {
            Some(completion_accuracy(student, &self.tasks, Decoding::Greedy)?)
        };
        Ok(MetricsRow {
            step,
            objective: self.cfg.objective.as_str().to_string(),
            seed: self.cfg.seed,
            train_entropy,
            kl_fwd,
            kl_rev,
            accuracy,
            mean_reward,
            wallclock_ms: self
                .cfg
                .record_wallclock
                .then(|| self.started.elapsed().as_millis() as u64),
        })
    }
}

fn is_eval_step(step: usize, cfg: &TrainConfig) -> bool {
    step.is_multiple_of(cfg.eval_every) || step == cfg.steps
}

/// Weighted tokens contributed by one offline state.
fn offpolicy_terms(
    kind: &ObjectiveKind,
    p: &CategoricalDist,
    q: &CategoricalDist,
    expert: TokenId,
    samples: usize,
    rng: &mut LabRng,
) -> Result<Vec<(TokenId, f64)>> {
    Ok(match kind.tag {
        ObjectiveTag::Sft | ObjectiveTag::Seqkd => vec![(expert, weight_sft(expert, expert))],
        ObjectiveTag::FkldToken => vec![(expert, weight_fkld_token(p, expert))],
        ObjectiveTag::FkldDense => weights_fkld_dense(p)
            .into_iter()
            .enumerate()
            .filter(|(_, w)| *w > 0.0)
            .collect(),
        ObjectiveTag::RkldOff => vec![(expert, weight_rkld_off(p, q, expert, kind.sign_fidelity)?)],
        ObjectiveTag::JsdOff => vec![(
            expert,
            weight_jsd_off(p, q, expert, kind.beta, kind.sign_fidelity)?,
        )],
        ObjectiveTag::Hpd | ObjectiveTag::HpdNoSample | ObjectiveTag::HpdNoReinforce => {
            let variant = kind.tag.hpd_variant().expect("hpd family");
            let scale = 1.0 / samples as f64;
            let mut w_star = 0.0;
            let mut terms = Vec::with_capacity(samples + 1);
            for _ in 0..samples {
                let sampled = q.sample(rng);
                let w = hpd_weights(p, q, expert, sampled, variant)?;
                w_star += scale * w.w_star;
                if w.w_sampled != 0.0 {
                    terms.push((sampled, scale * w.w_sampled));
                }
            }
            terms.insert(0, (expert, w_star));
            terms
        }
        ObjectiveTag::RkldOn | ObjectiveTag::OpdK1 => {
            return Err(Error::Config(format!(
                "`{}` is an on-policy objective",
                kind.tag
            )))
        }
    })
}

fn check_vocab(teacher: &dyn ConditionalModel, student: &TabularLM) -> Result<()> {
    if teacher.vocab().size() != student.vocab().size() {
        return Err(Error::InvalidInput(format!(
            "teacher vocabulary has {} tokens, student has {}",
            teacher.vocab().size(),
            student.vocab().size()
        )));
    }
    Ok(())
}

/// Off-policy distillation from a fixed corpus.
pub fn distill_offpolicy(
    cfg: &TrainConfig,
    teacher: &dyn ConditionalModel,
    corpus: &Corpus,
    student: TabularLM,
) -> Result<(TabularLM, Vec<MetricsRow>)> {
    distill_offpolicy_from(cfg, teacher, corpus, student, 0)
}

/// As [`distill_offpolicy`], with step numbers continuing from `step_offset`.
/// The initial row is only emitted when the offset is zero.
pub fn distill_offpolicy_from(
    cfg: &TrainConfig,
    teacher: &dyn ConditionalModel,
    corpus: &Corpus,
    mut student: TabularLM,
    step_offset: usize,
) -> Result<(TabularLM, Vec<MetricsRow>)> {
    cfg.validate()?;
    let kind = cfg.objective_kind();
    if kind.tag.is_on_policy() {
        return Err(Error::Config(format!(
            "`{}` needs student rollouts, not a corpus",
            kind.tag
        )));
    }
    if kind.tag == ObjectiveTag::Seqkd && corpus.provenance != Provenance::TeacherGenerated {
        return Err(Error::Config(format!(
            "`seqkd` needs a teacher_generated corpus, got {}",
            corpus.provenance
        )));
    }
    check_vocab(teacher, &student)?;
    if corpus.vocab_size != student.vocab().size() {
        return Err(Error::InvalidInput(format!(
            "corpus has V = {}, student has {}",
            corpus.vocab_size,
            student.vocab().size()
        )));
    }
    if corpus.sequences.iter().all(Vec::is_empty) {
        return Err(Error::InvalidInput("corpus has no tokens".into()));
    }

    let evaluator = Evaluator::new(cfg, teacher, &student)?;
    let probe_seqs = corpus.sequences.iter().take(cfg.eval_rollouts);
    let probe = StateTable::new(
        teacher,
        &student,
        probe_seqs.flat_map(|s| (0..s.len()).map(move |t| &s[..t])),
    );
    let mut batch_rng = lab_rng(cfg.seed, STREAM_BATCH);
    let mut sample_rng = lab_rng(cfg.seed, STREAM_STUDENT_SAMPLES);
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut acc = GradAccumulator::new();
    let mut teacher_rows = TeacherCache::new(teacher);
    let mut rows = Vec::new();

    if step_offset == 0 {
        rows.push(evaluator.row(&student, 0, Some(probe.mean_entropy(&student)?), None)?);
    }
    for step in 1..=cfg.steps {
        let mut student_rows = StudentCache::default();
        for _ in 0..cfg.batch_size {
            let seq = &corpus.sequences[batch_rng.random_range(0..corpus.sequences.len())];
            for t in 0..seq.len() {
                let prefix = &seq[..t];
                let p = teacher_rows.next_dist(prefix)?;
                let ctx = student.context_for(prefix);
                let q = student_rows.predict(&student, &ctx)?;
                let terms =
                    offpolicy_terms(&kind, p, &q, seq[t], cfg.samples_per_state, &mut sample_rng)?;
                acc.accumulate_state_grad(&student, &ctx, &terms)?;
            }
        }
        optimizer.step(&mut student, &mut acc, cfg.lr)?;
        if is_eval_step(step, cfg) {
            let h = probe.mean_entropy(&student)?;
            rows.push(evaluator.row(&student, step_offset + step, Some(h), None)?);
        }
    }
    Ok((student, rows))
}

/// On-policy distillation: the student rolls out from the prompts and every
/// step is weighted by teacher/student log-ratio rewards.
pub fn distill_onpolicy_opd(
    cfg: &TrainConfig,
    teacher: &dyn ConditionalModel,
    student: TabularLM,
    prompts: &[Vec<TokenId>],
    horizon: usize,
) -> Result<(TabularLM, Vec<MetricsRow>)> {
    distill_onpolicy_opd_from(cfg, teacher, student, prompts, horizon, 0)
}

pub fn distill_onpolicy_opd_from(
    cfg: &TrainConfig,
    teacher: &dyn ConditionalModel,
    mut student: TabularLM,
    prompts: &[Vec<TokenId>],
    horizon: usize,
    step_offset: usize,
) -> Result<(TabularLM, Vec<MetricsRow>)> {
    cfg.validate()?;
    if !cfg.objective.is_on_policy() {
        return Err(Error::Config(format!(
            "`{}` is an off-policy objective",
            cfg.objective
        )));
    }
    if horizon == 0 {
        return Err(Error::param("horizon", "must be at least 1"));
    }
    if prompts.is_empty() {
        return Err(Error::InvalidInput("no prompts".into()));
    }
    check_vocab(teacher, &student)?;
    let per_token =
        cfg.objective == ObjectiveTag::RkldOn || cfg.opd_reward_mode == OpdRewardMode::PerToken;

    let evaluator = Evaluator::new(cfg, teacher, &student)?;
    let mut rng = lab_rng(cfg.seed, STREAM_ROLLOUTS);
    let mut optimizer = Optimizer::new(cfg.optimizer);
    let mut acc = GradAccumulator::new();
    let mut teacher_rows = TeacherCache::new(teacher);
    let mut rows = Vec::new();

    if step_offset == 0 {
        rows.push(evaluator.row(&student, 0, None, None)?);
    }
    for step in 1..=cfg.steps {
        let mut student_rows = StudentCache::default();
        let mut visited: Vec<(ContextKey, TokenId, f64)> =
            Vec::with_capacity(cfg.batch_size * horizon);
        let mut coefficients = Vec::with_capacity(cfg.batch_size * horizon);
        let mut entropy_sum = 0.0;
        for _ in 0..cfg.batch_size {
            let mut seq = prompts[rng.random_range(0..prompts.len())].clone();
            let start = visited.len();
            for _ in 0..horizon {
                let ctx = student.context_for(&seq);
                let q = student_rows.predict(&student, &ctx)?;
                entropy_sum += crate::numerics::entropy(&q);
                let a = q.sample(&mut rng);
                let p = teacher_rows.next_dist(&seq)?;
                if p.prob(a) == 0.0 {
                    return Err(Error::DivergenceInfinite {
                        token: a,
                        state: Some(format!("{seq:?}")),
                    });
                }
                let r = weight_rkld_on(p, &q, a)?;
                visited.push((ctx, a, r));
                seq.push(a);
            }
            if per_token {
                coefficients.extend(visited[start..].iter().map(|v| v.2));
            } else {
                let total: f64 = visited[start..].iter().map(|v| v.2).sum();
                coefficients.extend(std::iter::repeat_n(total, visited.len() - start));
            }
        }
        let n = visited.len() as f64;
        let baseline = if cfg.batch_mean_baseline {
            coefficients.iter().sum::<f64>() / n
        } else {
            0.0
        };
        for ((ctx, a, _), c) in visited.iter().zip(&coefficients) {
            acc.accumulate_state_grad(&student, ctx, &[(*a, c - baseline)])?;
        }
        optimizer.step(&mut student, &mut acc, cfg.lr)?;
        if is_eval_step(step, cfg) {
            let mean_reward = visited.iter().map(|v| v.2).sum::<f64>() / n;
            rows.push(evaluator.row(
                &student,
                step_offset + step,
                Some(entropy_sum / n),
                Some(mean_reward),
            )?);
        }
    }
    Ok((student, rows))
}

/// Training data for one pipeline stage.
#[derive(Debug, Clone)]
pub enum StageData {
    Corpus(Corpus),
    /// On-policy rollouts from these prompts, `horizon` tokens each.
    Prompts(Vec<Vec<TokenId>>),
}

#[derive(Debug, Clone)]
pub struct Stage {
    pub name: String,
    pub cfg: TrainConfig,
    pub data: StageData,
}

#[derive(Debug, Clone)]
pub struct StageOutput {
    pub metrics_path: PathBuf,
    pub checkpoint_path: PathBuf,
    pub rows: Vec<MetricsRow>,
}

pub fn stage_paths(out_dir: &Path, index: usize, name: &str) -> (PathBuf, PathBuf) {
    let base = format!("{:02}_{name}", index + 1);
    (
        out_dir.join(format!("{base}.csv")),
        out_dir.join(format!("{base}.ckpt.json")),
    )
}

/// Runs the stages in order. Each stage after the first starts from the
/// checkpoint the previous stage wrote, and step numbers keep counting.
pub fn run_experiment(
    teacher: &dyn ConditionalModel,
    initial: TabularLM,
    stages: &[Stage],
    out_dir: &Path,
    config_hash: &str,
) -> Result<Vec<StageOutput>> {
    if stages.is_empty() {
        return Err(Error::Pipeline("no stages".into()));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut outputs: Vec<StageOutput> = Vec::with_capacity(stages.len());
    let mut offset = 0;
    for (i, stage) in stages.iter().enumerate() {
        let student = match outputs.last() {
            None => initial.clone(),
            Some(prev) => {
                if !prev.checkpoint_path.exists() {
                    return Err(Error::Pipeline(format!(
                        "stage `{}` needs checkpoint {} from the previous stage",
                        stage.name,
                        prev.checkpoint_path.display()
                    )));
                }
                checkpoint_load(&prev.checkpoint_path)?
            }
        };
        let (student, rows) = match &stage.data {
            StageData::Corpus(corpus) => {
                distill_offpolicy_from(&stage.cfg, teacher, corpus, student, offset)?
            }
            StageData::Prompts(prompts) => distill_onpolicy_opd_from(
                &stage.cfg,
                teacher,
                student,
                prompts,
                stage.cfg.horizon,
                offset,
            )?,
        };
        offset += stage.cfg.steps;
        let stamp = FileStamp {
            config_hash: config_hash.to_string(),
            seed: stage.cfg.seed,
        };
        let (metrics_path, checkpoint_path) = stage_paths(out_dir, i, &stage.name);
        metrics_write(&rows, &metrics_path, &stamp)?;
        checkpoint_save(&student, &checkpoint_path, &stamp)?;
        outputs.push(StageOutput {
            metrics_path,
            checkpoint_path,
            rows,
        });
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_source, sample_corpus, MarkovSource, SourceSpec};
    use crate::evaluation::gradcheck;
    use crate::model::{checkpoint_to_string, Vocab};
    use crate::numerics::{entropy, kl_exact};
    use approx::assert_abs_diff_eq;

    fn student(order: usize, v: usize) -> TabularLM {
        TabularLM::new(order, Vocab::with_size(v).unwrap()).unwrap()
    }

    fn dirichlet(v: usize, seed: u64) -> MarkovSource {
        build_source(&SourceSpec::RandomDirichlet {
            vocab_size: v,
            order: 1,
            seed,
            concentration: 1.0,
        })
        .unwrap()
    }

    fn quick(tag: ObjectiveTag, seed: u64, steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            eval_every: steps.max(1),
            eval_rollouts: 8,
            horizon: 16,
            num_tasks: 20,
            ..TrainConfig::new(tag, seed)
        }
    }

    #[test]
    fn mle_symmetric_counts() {
        let corpus = Corpus {
            sequences: vec![vec![0, 0, 1]],
            vocab_size: 2,
            provenance: Provenance::GroundTruth,
            seed: 0,
        };
        let m = train_teacher_mle(&corpus, 1, 0.0).unwrap();
        let row = m.predict(&ContextKey::from_prefix(&[0], 1, 2)).unwrap();
        assert_abs_diff_eq!(row.prob(0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(row.prob(1), 0.5, epsilon = 1e-15);
        // an unseen context stays uniform
        let unseen = m.predict(&ContextKey::from_prefix(&[1], 1, 2)).unwrap();
        assert_eq!(unseen.probs(), &[0.5, 0.5]);
        assert!(train_teacher_mle(&corpus, 1, -1.0).is_err());
    }

    #[test]
    fn mle_on_cycle_is_one_hot() {
        let s = build_source(&SourceSpec::DeterministicCycle { vocab_size: 3 }).unwrap();
        let c = sample_corpus(&s, 3, 10, 0).unwrap();
        let m = train_teacher_mle(&c, 1, 0.0).unwrap();
        for (ctx, _) in m.rows() {
            assert_eq!(entropy(&m.predict(ctx).unwrap()), 0.0);
        }
    }

    #[test]
    fn mle_recovers_source_rows() {
        let s = dirichlet(4, 3);
        let c = sample_corpus(&s, 1000, 1000, 1).unwrap();
        let m = train_teacher_mle(&c, 1, 0.1).unwrap();
        for (ctx, row) in s.rows() {
            if ctx.ids()[0] == 4 {
                continue; // the BOS row is visited once per sequence
            }
            assert!(
                kl_exact(row, &m.predict(ctx).unwrap()).unwrap() < 1e-3,
                "context {ctx}"
            );
        }
    }

    #[test]
    fn sft_on_deterministic_corpus_collapses() {
        let s = build_source(&SourceSpec::DeterministicCycle { vocab_size: 4 }).unwrap();
        let corpus = sample_corpus(&s, 50, 32, 0).unwrap();
        let cfg = TrainConfig {
            lr: 0.5,
            ..quick(ObjectiveTag::Sft, 1, 1500)
        };
        let (m, rows) = distill_offpolicy(&cfg, &s, &corpus, student(1, 4)).unwrap();
        let last = rows.last().unwrap();
        assert_eq!(last.accuracy, Some(1.0));
        assert!(last.train_entropy.unwrap() < 0.05);
        assert!(entropy(&m.next_dist(&[1]).unwrap()) < 0.05);
    }

    #[test]
    fn fkld_dense_reaches_teacher() {
        let s = dirichlet(8, 5);
        let corpus = sample_corpus(&s, 200, 64, 2).unwrap();
        let cfg = TrainConfig {
            lr: 0.5,
            ..quick(ObjectiveTag::FkldDense, 2, 2000)
        };
        let (_, rows) = distill_offpolicy(&cfg, &s, &corpus, student(1, 8)).unwrap();
        assert!(rows.windows(2).all(|w| w[1].kl_fwd < w[0].kl_fwd));
        assert!(
            rows.last().unwrap().kl_fwd < 0.01 * rows[0].kl_fwd,
            "{:?}",
            rows.last()
        );
    }

    #[test]
    fn hpd_at_identity_is_a_forward_kl_step() {
        // a single state where the student already equals the teacher
        let p = CategoricalDist::from_probs(vec![0.7, 0.2, 0.1]).unwrap();
        let mut rng = lab_rng(0, 0);
        let kind = ObjectiveKind::new(ObjectiveTag::Hpd);
        for expert in 0..3 {
            let terms = offpolicy_terms(&kind, &p, &p, expert, 1, &mut rng).unwrap();
            assert_eq!(terms, vec![(expert, p.prob(expert))]);
        }
    }

    #[test]
    fn hpd_update_matches_frozen_loss_gradient() {
        let s = dirichlet(6, 8);
        let mut m = student(1, 6);
        let mut rng = lab_rng(4, 0);
        for ctx in ContextKey::enumerate(1, 6) {
            m.set_row(ctx, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap();
        }
        let corpus = sample_corpus(&s, 4, 16, 3).unwrap();
        let kind = ObjectiveKind::new(ObjectiveTag::Hpd);
        let mut items = Vec::new();
        for seq in &corpus.sequences {
            for t in 0..seq.len() {
                let p = s.next_dist(&seq[..t]).unwrap();
                let ctx = m.context_for(&seq[..t]);
                let q = m.predict(&ctx).unwrap();
                for (tok, w) in offpolicy_terms(&kind, &p, &q, seq[t], 1, &mut rng).unwrap() {
                    items.push((ctx.clone(), tok, w));
                }
            }
        }
        assert!(items.iter().any(|i| i.2 < 0.0));
        assert!(gradcheck(&m, &items, 1e-5).unwrap() <= 1e-5);
    }

    #[test]
    fn on_policy_objective_rejected_offline() {
        let s = dirichlet(3, 1);
        let corpus = sample_corpus(&s, 2, 4, 0).unwrap();
        for tag in [ObjectiveTag::OpdK1, ObjectiveTag::RkldOn] {
            let r = distill_offpolicy(&quick(tag, 0, 2), &s, &corpus, student(1, 3));
            assert!(matches!(r, Err(Error::Config(_))));
        }
        let r = distill_offpolicy(
            &quick(ObjectiveTag::Seqkd, 0, 2),
            &s,
            &corpus,
            student(1, 3),
        );
        assert!(matches!(r, Err(Error::Config(_))));
        let r = distill_onpolicy_opd(
            &quick(ObjectiveTag::Hpd, 0, 2),
            &s,
            student(1, 3),
            &[vec![]],
            4,
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn opd_from_teacher_is_a_no_op() {
        let s = dirichlet(4, 2);
        let m = s.to_model();
        for mode in [OpdRewardMode::PerToken, OpdRewardMode::Trajectory] {
            let cfg = TrainConfig {
                opd_reward_mode: mode,
                ..quick(ObjectiveTag::OpdK1, 3, 5)
            };
            let (after, rows) = distill_onpolicy_opd(&cfg, &s, m.clone(), &[vec![]], 8).unwrap();
            assert_abs_diff_eq!(
                rows.last().unwrap().mean_reward.unwrap(),
                0.0,
                epsilon = 1e-12
            );
            for (ctx, row) in m.rows() {
                let moved = after.logits(ctx).unwrap();
                for (a, b) in row.iter().zip(moved) {
                    assert_abs_diff_eq!(*a, *b, epsilon = 1e-15);
                }
            }
        }
    }

    #[test]
    fn opd_modes_coincide_at_horizon_one() {
        let s = dirichlet(4, 6);
        let run = |mode| {
            let cfg = TrainConfig {
                opd_reward_mode: mode,
                ..quick(ObjectiveTag::OpdK1, 3, 20)
            };
            distill_onpolicy_opd(&cfg, &s, student(1, 4), &[vec![1]], 1)
                .unwrap()
                .0
        };
        assert_eq!(run(OpdRewardMode::PerToken), run(OpdRewardMode::Trajectory));
    }

    #[test]
    fn opd_reduces_reverse_kl() {
        let s = dirichlet(4, 9);
        let cfg = TrainConfig {
            lr: 0.2,
            ..quick(ObjectiveTag::OpdK1, 1, 300)
        };
        let (_, rows) = distill_onpolicy_opd(&cfg, &s, student(1, 4), &[vec![]], 16).unwrap();
        assert!(
            rows.last().unwrap().kl_rev < 0.5 * rows[0].kl_rev,
            "{rows:?}"
        );
    }

    #[test]
    fn support_violation_in_opd_is_reported() {
        let s = build_source(&SourceSpec::DeterministicCycle { vocab_size: 3 }).unwrap();
        let r = distill_onpolicy_opd(
            &quick(ObjectiveTag::OpdK1, 0, 3),
            &s,
            student(1, 3),
            &[vec![]],
            4,
        );
        assert!(matches!(r, Err(Error::DivergenceInfinite { .. })));
    }

    #[test]
    fn metrics_csv_layout_and_round_trip() {
        let s = dirichlet(4, 2);
        let corpus = sample_corpus(&s, 10, 16, 0).unwrap();
        let cfg = TrainConfig {
            eval_every: 3,
            ..quick(ObjectiveTag::Hpd, 7, 10)
        };
        let (_, rows) = distill_offpolicy(&cfg, &s, &corpus, student(1, 4)).unwrap();
        let steps: Vec<usize> = rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![0, 3, 6, 9, 10]);
        let stamp = FileStamp {
            config_hash: "abc".into(),
            seed: 7,
        };
        let text = metrics_to_csv(&rows, &stamp).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "# format_version=1 config_hash=abc seed=7"
        );
        assert_eq!(lines.next().unwrap(), METRICS_HEADER.join(","));
        assert!(lines.next().unwrap().ends_with(",,"));
        assert_eq!(metrics_from_csv(&text).unwrap(), rows);
    }

    #[test]
    fn training_is_deterministic() {
        let s = build_source(&SourceSpec::BimodalGap {
            vocab_size: 8,
            noise: 0.05,
        })
        .unwrap();
        let corpus = sample_corpus(&s, 20, 32, 4).unwrap();
        let cfg = quick(ObjectiveTag::Hpd, 7, 30);
        let a = distill_offpolicy(&cfg, &s, &corpus, student(1, 8)).unwrap();
        let b = distill_offpolicy(&cfg, &s, &corpus, student(1, 8)).unwrap();
        assert_eq!(a, b);
        let stamp = FileStamp::default();
        assert_eq!(
            checkpoint_to_string(&a.0, &stamp),
            checkpoint_to_string(&b.0, &stamp)
        );
    }

    #[test]
    fn pipeline_threads_checkpoints_and_numbers_steps() {
        let s = dirichlet(4, 2);
        let corpus = sample_corpus(&s, 10, 16, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let sft = quick(ObjectiveTag::Sft, 1, 6);
        let stages = vec![
            Stage {
                name: "sft".into(),
                cfg: sft.clone(),
                data: StageData::Corpus(corpus.clone()),
            },
            Stage {
                name: "opd".into(),
                cfg: TrainConfig {
                    horizon: 8,
                    ..quick(ObjectiveTag::OpdK1, 1, 4)
                },
                data: StageData::Prompts(vec![vec![]]),
            },
        ];
        let out = run_experiment(&s, student(1, 4), &stages, dir.path(), "h").unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(
            out[0].rows.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![0, 6]
        );
        assert_eq!(
            out[1].rows.iter().map(|r| r.step).collect::<Vec<_>>(),
            vec![10]
        );
        assert!(out[1].metrics_path.exists() && out[1].checkpoint_path.exists());

        // a single stage reproduces the direct call
        let single = run_experiment(
            &s,
            student(1, 4),
            &stages[..1],
            &dir.path().join("one"),
            "h",
        )
        .unwrap();
        let (direct, rows) = distill_offpolicy(&sft, &s, &corpus, student(1, 4)).unwrap();
        assert_eq!(single[0].rows, rows);
        assert_eq!(checkpoint_load(&single[0].checkpoint_path).unwrap(), direct);
    }

    #[test]
    fn config_validation_names_fields() {
        let bad = TrainConfig {
            batch_size: 0,
            ..TrainConfig::new(ObjectiveTag::Sft, 0)
        };
        assert!(matches!(
            bad.validate(),
            Err(Error::InvalidParameter {
                name: "batch_size",
                ..
            })
        ));
        let bad = TrainConfig {
            beta: 1.0,
            ..TrainConfig::new(ObjectiveTag::JsdOff, 0)
        };
        assert!(matches!(
            bad.validate(),
            Err(Error::InvalidParameter { name: "beta", .. })
        ));
        let parsed: TrainConfig = serde_json::from_str(r#"{"objective":"hpd","seed":3}"#).unwrap();
        assert_eq!(parsed, TrainConfig::new(ObjectiveTag::Hpd, 3));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"objective":"hpd"}"#).is_err());
        assert!(
            serde_json::from_str::<TrainConfig>(r#"{"objective":"hpd","seed":1,"lr_typo":1}"#)
                .is_err()
        );
    }
}
