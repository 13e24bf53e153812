//! Exact audits and diagnostics: finite-difference gradient checks,
//! divergence audits over sampled states, positional entropy profiles,
//! completion accuracy and K1 estimator studies.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{ConditionalModel, ContextKey, GradAccumulator, TabularLM, TokenId};
use crate::numerics::{entropy, k1_log_ratios, kl_exact, mean_and_stderr, CategoricalDist, LabRng};

/// Loss `-Σ w ln q(token | ctx)` with the weights held fixed.
fn frozen_loss(model: &TabularLM, items: &[(ContextKey, TokenId, f64)]) -> Result<f64> {
    let mut loss = 0.0;
    for (ctx, token, w) in items {
        if *w != 0.0 {
            loss -= w * model.predict(ctx)?.checked_logprob(*token)?;
        }
    }
    Ok(loss)
}

/// Largest relative error between the analytic descent direction and
/// central differences of the frozen-weight loss, over every touched logit.
/// Coordinates where both sides vanish count as exact.
pub fn gradcheck(model: &TabularLM, items: &[(ContextKey, TokenId, f64)], eps: f64) -> Result<f64> {
    if !(1e-8..=1e-3).contains(&eps) {
        return Err(Error::param(
            "eps",
            format!("{eps} is outside [1e-8, 1e-3]"),
        ));
    }
    let mut acc = GradAccumulator::new();
    for (ctx, token, w) in items {
        acc.accumulate_token_grad(model, ctx, *token, *w)?;
    }
    let touched: Vec<ContextKey> = acc.touched().cloned().collect();
    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for ctx in touched {
        let analytic = acc.raw(&ctx).expect("touched row").to_vec();
        let base = model
            .logits(&ctx)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; model.vocab().size()]);
        for (i, &a) in analytic.iter().enumerate() {
            let mut row = base.clone();
            row[i] = base[i] + eps;
            probe.set_row(ctx.clone(), row.clone())?;
            let up = frozen_loss(&probe, items)?;
            row[i] = base[i] - eps;
            probe.set_row(ctx.clone(), row)?;
            let down = frozen_loss(&probe, items)?;
            probe.set_row(ctx.clone(), base.clone())?;
            let numeric = -(up - down) / (2.0 * eps);
            let scale = a.abs().max(numeric.abs());
            if scale > 0.0 {
                worst = worst.max((a - numeric).abs() / scale);
            }
        }
    }
    Ok(worst)
}

/// Where audit states come from.
pub enum StateSampler<'a> {
    /// Prefixes visited by fresh rollouts of `model`.
    Rollouts {
        model: &'a dyn ConditionalModel,
        horizon: usize,
        seed: u64,
    },
    /// A fixed list of prefixes, used as is.
    Exhaustive(Vec<Vec<TokenId>>),
}

impl StateSampler<'_> {
    /// Draws `n_states` prefixes. Exhaustive samplers ignore `n_states`.
    pub fn states(&self, n_states: usize) -> Result<Vec<Vec<TokenId>>> {
        match self {
            StateSampler::Exhaustive(states) => Ok(states.clone()),
            StateSampler::Rollouts {
                model,
                horizon,
                seed,
            } => {
                if *horizon == 0 {
                    return Err(Error::param("horizon", "must be at least 1"));
                }
                let mut rng = crate::numerics::lab_rng(*seed, 0);
                let mut out = Vec::with_capacity(n_states);
                while out.len() < n_states {
                    let seq = model.rollout(&[], *horizon, &mut rng)?;
                    for t in 0..seq.len() {
                        if out.len() == n_states {
                            break;
                        }
                        out.push(seq[..t].to_vec());
                    }
                }
                Ok(out)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuditReport {
    /// Mean KL(teacher ‖ student) over states.
    pub kl_fwd: f64,
    /// Mean KL(student ‖ teacher) over states.
    pub kl_rev: f64,
    pub n_states: usize,
}

/// Exact forward and reverse KL averaged over sampled states.
pub fn divergence_audit(
    student: &dyn ConditionalModel,
    teacher: &dyn ConditionalModel,
    sampler: &StateSampler,
    n_states: usize,
) -> Result<AuditReport> {
    if n_states == 0 {
        return Err(Error::param("n_states", "must be at least 1"));
    }
    let states = sampler.states(n_states)?;
    if states.is_empty() {
        return Err(Error::InvalidInput("no states to audit".into()));
    }
    let with_state = |e: Error, prefix: &[TokenId]| match e {
        Error::DivergenceInfinite { token, .. } => Error::DivergenceInfinite {
            token,
            state: Some(format!("{prefix:?}")),
        },
        other => other,
    };
    let (mut fwd, mut rev) = (0.0, 0.0);
    for prefix in &states {
        let p = teacher.next_dist(prefix)?;
        let q = student.next_dist(prefix)?;
        fwd += kl_exact(&p, &q).map_err(|e| with_state(e, prefix))?;
        rev += kl_exact(&q, &p).map_err(|e| with_state(e, prefix))?;
    }
    let n = states.len() as f64;
    Ok(AuditReport {
        kl_fwd: fwd / n,
        kl_rev: rev / n,
        n_states: states.len(),
    })
}

/// Multiset of states grouped by the contexts the two models see.
#[derive(Debug, Clone, Default)]
pub struct StateTable {
    entries: BTreeMap<(ContextKey, ContextKey), usize>,
    total: usize,
}

impl StateTable {
    pub fn new(
        teacher: &dyn ConditionalModel,
        student: &dyn ConditionalModel,
        prefixes: impl IntoIterator<Item = impl AsRef<[TokenId]>>,
    ) -> Self {
        let mut table = Self::default();
        for prefix in prefixes {
            let prefix = prefix.as_ref();
            let key = (teacher.context_for(prefix), student.context_for(prefix));
            *table.entries.entry(key).or_default() += 1;
            table.total += 1;
        }
        table
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    /// Mean (KL(p‖q), KL(q‖p)); a support violation makes the mean infinite.
    pub fn mean_kls(
        &self,
        teacher: &dyn ConditionalModel,
        student: &dyn ConditionalModel,
    ) -> Result<(f64, f64)> {
        let (mut fwd, mut rev) = (0.0, 0.0);
        for ((tc, sc), &n) in &self.entries {
            let p = teacher.conditional(tc)?;
            let q = student.conditional(sc)?;
            fwd += n as f64 * kl_exact(&p, &q).unwrap_or(f64::INFINITY);
            rev += n as f64 * kl_exact(&q, &p).unwrap_or(f64::INFINITY);
        }
        let n = self.total as f64;
        Ok((fwd / n, rev / n))
    }

    /// Mean student entropy over the states.
    pub fn mean_entropy(&self, student: &dyn ConditionalModel) -> Result<f64> {
        let mut total = 0.0;
        for ((_, sc), &n) in &self.entries {
            total += n as f64 * entropy(&student.conditional(sc)?);
        }
        Ok(total / self.total as f64)
    }
}

/// Mean entropy at each generated position.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyProfile {
    pub per_position: Vec<f64>,
    pub num_prompts: usize,
}

/// Entropy profile along the model's own rollouts from each prompt.
pub fn positional_entropy(
    model: &dyn ConditionalModel,
    prompts: &[Vec<TokenId>],
    horizon: usize,
    rng: &mut LabRng,
) -> Result<EntropyProfile> {
    if horizon == 0 {
        return Err(Error::param("horizon", "must be at least 1"));
    }
    if prompts.is_empty() {
        return Err(Error::InvalidInput("no prompts".into()));
    }
    let mut sums = vec![0.0; horizon];
    for prompt in prompts {
        let mut ctx = model.context_for(prompt);
        for s in sums.iter_mut() {
            let d = model.conditional(&ctx)?;
            *s += entropy(&d);
            ctx = ctx.push(d.sample(rng));
        }
    }
    let n = prompts.len() as f64;
    Ok(EntropyProfile {
        per_position: sums.into_iter().map(|s| s / n).collect(),
        num_prompts: prompts.len(),
    })
}

/// Entropy profile along fixed sequences (teacher forcing).
pub fn positional_entropy_forced(
    model: &dyn ConditionalModel,
    sequences: &[Vec<TokenId>],
    horizon: usize,
) -> Result<EntropyProfile> {
    if horizon == 0 {
        return Err(Error::param("horizon", "must be at least 1"));
    }
    if sequences.is_empty() {
        return Err(Error::InvalidInput("no sequences".into()));
    }
    let mut sums = vec![0.0; horizon];
    for seq in sequences {
        if seq.len() < horizon {
            return Err(Error::InvalidInput(format!(
                "sequence shorter than horizon {horizon}"
            )));
        }
        for (t, s) in sums.iter_mut().enumerate() {
            *s += entropy(&model.next_dist(&seq[..t])?);
        }
    }
    let n = sequences.len() as f64;
    Ok(EntropyProfile {
        per_position: sums.into_iter().map(|s| s / n).collect(),
        num_prompts: sequences.len(),
    })
}

/// A prompt with its unique correct continuation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Task {
    pub prompt: Vec<TokenId>,
    pub continuation: Vec<TokenId>,
}

/// Builds tasks from teacher rollouts: a sampled prompt of `prompt_len`
/// tokens followed by the teacher's greedy continuation. Only prompts whose
/// every continuation step has a majority token (probability above one
/// half) are kept, so the correct answer is unambiguous.
pub fn build_tasks(
    teacher: &dyn ConditionalModel,
    n_tasks: usize,
    prompt_len: usize,
    continuation_len: usize,
    rng: &mut LabRng,
) -> Result<Vec<Task>> {
    if continuation_len == 0 {
        return Err(Error::param("continuation_len", "must be at least 1"));
    }
    let max_attempts = n_tasks.saturating_mul(100).max(100);
    let mut tasks = Vec::with_capacity(n_tasks);
    for _ in 0..max_attempts {
        if tasks.len() == n_tasks {
            break;
        }
        let prompt = if prompt_len == 0 {
            Vec::new()
        } else {
            teacher.rollout(&[], prompt_len, rng)?
        };
        let mut seq = prompt.clone();
        let mut clear = true;
        for _ in 0..continuation_len {
            let d = teacher.next_dist(&seq)?;
            let best = d.argmax();
            if d.prob(best) <= 0.5 {
                clear = false;
                break;
            }
            seq.push(best);
        }
        if clear {
            tasks.push(Task {
                continuation: seq[prompt.len()..].to_vec(),
                prompt,
            });
        }
    }
    Ok(tasks)
}

/// How the model produces its completion.
pub enum Decoding<'a> {
    Greedy,
    Sampled(&'a mut LabRng),
}

/// Fraction of tasks whose continuation the model reproduces exactly.
pub fn completion_accuracy(
    model: &dyn ConditionalModel,
    tasks: &[Task],
    decoding: Decoding,
) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::InvalidInput(
            "completion accuracy over an empty task list".into(),
        ));
    }
    let mut decoding = decoding;
    let mut hits = 0usize;
    for task in tasks {
        let mut ctx = model.context_for(&task.prompt);
        let mut ok = true;
        for &want in &task.continuation {
            let d = model.conditional(&ctx)?;
            let got = match &mut decoding {
                Decoding::Greedy => d.argmax(),
                Decoding::Sampled(rng) => d.sample(*rng),
            };
            if got != want {
                ok = false;
                break;
            }
            ctx = ctx.push(got);
        }
        hits += ok as usize;
    }
    Ok(hits as f64 / tasks.len() as f64)
}

/// Repeated K1 estimates of KL(q‖p).
#[derive(Debug, Clone, PartialEq)]
pub struct K1Study {
    pub exact: f64,
    /// One estimate per trial, each a mean of `n_samples` log-ratios.
    pub estimates: Vec<f64>,
    pub mean: f64,
    /// Sample variance of the per-trial estimates.
    pub variance: f64,
    /// Standard error of the grand mean over all samples.
    pub pooled_stderr: f64,
    pub negative_fraction: f64,
}

pub fn k1_study<R: Rng + ?Sized>(
    p: &CategoricalDist,
    q: &CategoricalDist,
    n_trials: usize,
    n_samples: usize,
    rng: &mut R,
) -> Result<K1Study> {
    if n_trials == 0 || n_samples == 0 {
        return Err(Error::param(
            "n_trials",
            "trials and samples must both be at least 1",
        ));
    }
    let exact = kl_exact(q, p)?;
    let mut all = Vec::with_capacity(n_trials * n_samples);
    let mut estimates = Vec::with_capacity(n_trials);
    for _ in 0..n_trials {
        let xs = k1_log_ratios(p, q, n_samples, rng)?;
        estimates.push(xs.iter().sum::<f64>() / n_samples as f64);
        all.extend(xs);
    }
    let (mean, pooled_stderr) = mean_and_stderr(&all);
    let variance = if n_trials > 1 {
        let m = estimates.iter().sum::<f64>() / n_trials as f64;
        estimates.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (n_trials - 1) as f64
    } else {
        0.0
    };
    let negative_fraction = all.iter().filter(|&&x| x < 0.0).count() as f64 / all.len() as f64;
    Ok(K1Study {
        exact,
        estimates,
        mean,
        variance,
        pooled_stderr,
        negative_fraction,
    })
}
