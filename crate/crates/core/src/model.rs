//! Order-k tabular autoregressive model.
//!
//! The student (and a fitted teacher) is a table of logit rows keyed by the
//! last `k` tokens of the prefix. Rows that were never written behave as
//! all-zero logits, i.e. the uniform distribution. Gradients of the
//! reweighted log-likelihood are exact: for a term `-w ln q[a]` on a row
//! with probabilities `q`, the descent direction on logit `v` is
//! `w (1[v = a] - q[v])`, with `w` held constant.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::numerics::{softmax, CategoricalDist, LabRng};
use crate::{FileStamp, FORMAT_VERSION};

pub type TokenId = usize;

/// Largest vocabulary the lab supports.
pub const MAX_VOCAB: usize = 256;

/// Logit used for tokens that must carry zero probability in a finite row.
/// `exp(-1000)` underflows to exactly zero.
pub const LOGIT_FLOOR: f64 = -1000.0;

/// Named tokens `0..V`. The begin-of-sequence id is `V`: it only ever
/// appears as left padding inside a [`ContextKey`] and is never emitted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    names: Vec<String>,
}

impl Vocab {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 || names.len() > MAX_VOCAB {
            return Err(Error::param(
                "vocab",
                format!("size {} is outside [2, {MAX_VOCAB}]", names.len()),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::param("vocab", format!("duplicate token name `{n}`")));
            }
        }
        Ok(Self { names })
    }

    /// Vocabulary named `t0 .. t{size-1}`.
    pub fn with_size(size: usize) -> Result<Self> {
        Self::new((0..size).map(|i| format!("t{i}")).collect())
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn bos(&self) -> TokenId {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn check_token(&self, token: TokenId) -> Result<()> {
        if token >= self.size() {
            return Err(Error::InvalidInput(format!(
                "token {token} outside vocabulary of size {}",
                self.size()
            )));
        }
        Ok(())
    }
}

/// The last `k` tokens of a prefix, left-padded with the BOS id.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ContextKey(Vec<TokenId>);

impl ContextKey {
    /// Validating constructor: BOS may only appear as a leading run.
    pub fn new(ids: Vec<TokenId>, vocab: &Vocab) -> Result<Self> {
        let bos = vocab.bos();
        let mut past_padding = false;
        for &id in &ids {
            if id > bos {
                return Err(Error::InvalidInput(format!(
                    "context id {id} exceeds BOS id {bos}"
                )));
            }
            if id == bos && past_padding {
                return Err(Error::InvalidInput(
                    "BOS id after a real token in context".into(),
                ));
            }
            past_padding |= id != bos;
        }
        Ok(Self(ids))
    }

    pub fn from_prefix(prefix: &[TokenId], order: usize, bos: TokenId) -> Self {
        let mut ids = vec![bos; order.saturating_sub(prefix.len())];
        ids.extend_from_slice(&prefix[prefix.len().saturating_sub(order)..]);
        Self(ids)
    }

    pub fn ids(&self) -> &[TokenId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Shortens to the last `order` ids (a lower-order view of the same state).
    pub fn truncate_to(&self, order: usize) -> Self {
        Self(self.0[self.0.len().saturating_sub(order)..].to_vec())
    }

    /// Context after emitting `token`.
    pub fn push(&self, token: TokenId) -> Self {
        let mut ids = self.0[1.min(self.0.len())..].to_vec();
        ids.push(token);
        Self(ids)
    }

    /// Every context of length `order` over a vocabulary of `size` real
    /// tokens, in ascending key order, including BOS-padded ones.
    pub fn enumerate(order: usize, size: usize) -> Vec<Self> {
        let bos = size;
        let mut out = Vec::new();
        for pad in (0..=order).rev() {
            let free = order - pad;
            let count = size.pow(free as u32);
            for mut idx in 0..count {
                let mut ids = vec![bos; order];
                for slot in (pad..order).rev() {
                    ids[slot] = idx % size;
                    idx /= size;
                }
                out.push(Self(ids));
            }
        }
        out.sort();
        out
    }
}

impl fmt::Display for ContextKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, id) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, " ")?;
            }
            write!(f, "{id}")?;
        }
        write!(f, "]")
    }
}

/// Anything that yields a next-token distribution for a prefix: the tabular
/// model, or an exact [`crate::data::MarkovSource`].
pub trait ConditionalModel {
    fn order(&self) -> usize;

    fn vocab(&self) -> &Vocab;

    fn conditional(&self, ctx: &ContextKey) -> Result<CategoricalDist>;

    fn context_for(&self, prefix: &[TokenId]) -> ContextKey {
        ContextKey::from_prefix(prefix, self.order(), self.vocab().bos())
    }

    fn next_dist(&self, prefix: &[TokenId]) -> Result<CategoricalDist> {
        self.conditional(&self.context_for(prefix))
    }

    /// Extends `prompt` by `steps` tokens, each drawn at `temperature`
    /// (zero means greedy). Returns the whole sequence, prompt included.
    fn rollout_at(
        &self,
        prompt: &[TokenId],
        steps: usize,
        temperature: f64,
        rng: &mut LabRng,
    ) -> Result<Vec<TokenId>> {
        if steps == 0 {
            return Err(Error::param("steps", "a rollout needs at least one step"));
        }
        for &t in prompt {
            self.vocab().check_token(t)?;
        }
        let mut seq = Vec::with_capacity(prompt.len() + steps);
        seq.extend_from_slice(prompt);
        let mut ctx = self.context_for(prompt);
        for _ in 0..steps {
            let dist = self.conditional(&ctx)?.with_temperature(temperature)?;
            let next = dist.sample(rng);
            seq.push(next);
            ctx = ctx.push(next);
        }
        Ok(seq)
    }

    fn rollout(&self, prompt: &[TokenId], steps: usize, rng: &mut LabRng) -> Result<Vec<TokenId>> {
        self.rollout_at(prompt, steps, 1.0, rng)
    }
}

/// Context-conditioned logit table.
#[derive(Debug, Clone, PartialEq)]
pub struct TabularLM {
    order: usize,
    vocab: Vocab,
    rows: BTreeMap<ContextKey, Vec<f64>>,
}

impl TabularLM {
    pub fn new(order: usize, vocab: Vocab) -> Result<Self> {
        if order == 0 {
            return Err(Error::param("order", "must be at least 1"));
        }
        Ok(Self {
            order,
            vocab,
            rows: BTreeMap::new(),
        })
    }

    pub fn rows(&self) -> impl Iterator<Item = (&ContextKey, &[f64])> {
        self.rows.iter().map(|(k, v)| (k, v.as_slice()))
    }

    pub fn num_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn logits(&self, ctx: &ContextKey) -> Option<&[f64]> {
        self.rows.get(ctx).map(Vec::as_slice)
    }

    pub fn set_row(&mut self, ctx: ContextKey, logits: Vec<f64>) -> Result<()> {
        self.check_context(&ctx)?;
        if logits.len() != self.vocab.size() {
            return Err(Error::InvalidInput(format!(
                "row has {} logits, vocabulary has {}",
                logits.len(),
                self.vocab.size()
            )));
        }
        if logits.iter().any(|z| !z.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "non-finite logit in row {ctx}"
            )));
        }
        self.rows.insert(ctx, logits);
        Ok(())
    }

    pub fn check_context(&self, ctx: &ContextKey) -> Result<()> {
        if ctx.len() != self.order {
            return Err(Error::InvalidInput(format!(
                "context {ctx} has length {}, model order is {}",
                ctx.len(),
                self.order
            )));
        }
        ContextKey::new(ctx.ids().to_vec(), &self.vocab).map(|_| ())
    }

    /// Softmax of the context's row; uniform for an unseen context.
    pub fn predict(&self, ctx: &ContextKey) -> Result<CategoricalDist> {
        self.check_context(ctx)?;
        match self.rows.get(ctx) {
            Some(row) => softmax(row),
            None => Ok(CategoricalDist::uniform(self.vocab.size())),
        }
    }

    pub fn sample_next<R: Rng + ?Sized>(&self, ctx: &ContextKey, rng: &mut R) -> Result<TokenId> {
        Ok(self.predict(ctx)?.sample(rng))
    }
}

impl ConditionalModel for TabularLM {
    fn order(&self) -> usize {
        self.order
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn conditional(&self, ctx: &ContextKey) -> Result<CategoricalDist> {
        self.predict(ctx)
    }
}

/// Accumulated descent directions on logit rows plus the number of samples
/// (states) they were gathered from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradAccumulator {
    rows: BTreeMap<ContextKey, Vec<f64>>,
    samples: usize,
}

impl GradAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty() && self.samples == 0
    }

    pub fn samples(&self) -> usize {
        self.samples
    }

    /// Summed (not averaged) direction for a row.
    pub fn raw(&self, ctx: &ContextKey) -> Option<&[f64]> {
        self.rows.get(ctx).map(Vec::as_slice)
    }

    /// Direction for a row averaged over the sample count.
    pub fn direction(&self, ctx: &ContextKey) -> Option<Vec<f64>> {
        let n = self.samples.max(1) as f64;
        self.rows
            .get(ctx)
            .map(|r| r.iter().map(|d| d / n).collect())
    }

    pub fn touched(&self) -> impl Iterator<Item = &ContextKey> {
        self.rows.keys()
    }

    pub fn clear(&mut self) {
        self.rows.clear();
        self.samples = 0;
    }

    /// Adds the exact descent direction of `-weight · ln q[token]` as one
    /// sample. A zero weight leaves the accumulator untouched.
    pub fn accumulate_token_grad(
        &mut self,
        model: &TabularLM,
        ctx: &ContextKey,
        token: TokenId,
        weight: f64,
    ) -> Result<()> {
        if weight == 0.0 {
            return Ok(());
        }
        self.accumulate_state_grad(model, ctx, &[(token, weight)])
    }

    /// Adds several weighted tokens that share one state as a single sample.
    /// The state is counted even when every weight is zero, so batch averages
    /// always divide by the number of states.
    pub fn accumulate_state_grad(
        &mut self,
        model: &TabularLM,
        ctx: &ContextKey,
        terms: &[(TokenId, f64)],
    ) -> Result<()> {
        let q = model.predict(ctx)?;
        for &(token, weight) in terms {
            if !weight.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite weight {weight}")));
            }
            model.vocab.check_token(token)?;
            if weight != 0.0 && q.prob(token) == 0.0 {
                return Err(Error::LogOfZero { token });
            }
        }
        self.samples += 1;
        let active: Vec<_> = terms.iter().filter(|(_, w)| *w != 0.0).collect();
        if active.is_empty() {
            return Ok(());
        }
        let row = self
            .rows
            .entry(ctx.clone())
            .or_insert_with(|| vec![0.0; q.len()]);
        for &&(token, weight) in &active {
            for (v, d) in row.iter_mut().enumerate() {
                let indicator = if v == token { 1.0 } else { 0.0 };
                *d += weight * (indicator - q.prob(v));
            }
        }
        Ok(())
    }
}

/// `model ← model + lr · direction / samples`, then clears the accumulator.
/// Nothing is written if any updated logit would be non-finite.
pub fn sgd_step(model: &mut TabularLM, acc: &mut GradAccumulator, lr: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::param(
            "lr",
            format!("{lr} must be a finite positive number"),
        ));
    }
    if acc.samples == 0 {
        acc.clear();
        return Ok(());
    }
    let scale = lr / acc.samples as f64;
    let mut updated = Vec::with_capacity(acc.rows.len());
    for (ctx, dir) in &acc.rows {
        let mut row = model
            .rows
            .get(ctx)
            .cloned()
            .unwrap_or_else(|| vec![0.0; model.vocab.size()]);
        for (z, d) in row.iter_mut().zip(dir) {
            *z += scale * d;
        }
        if row.iter().any(|z| !z.is_finite()) {
            return Err(Error::NumericOverflow(format!(
                "non-finite logit after update of row {ctx}"
            )));
        }
        updated.push((ctx.clone(), row));
    }
    for (ctx, row) in updated {
        model.rows.insert(ctx, row);
    }
    acc.clear();
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Plain SGD, or Adam with per-row first and second moments.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam {
        t: i32,
        moments: BTreeMap<ContextKey, (Vec<f64>, Vec<f64>)>,
    },
}

impl Optimizer {
    pub fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::Sgd => Optimizer::Sgd,
            OptimizerKind::Adam => Optimizer::Adam {
                t: 0,
                moments: BTreeMap::new(),
            },
        }
    }

    pub fn step(
        &mut self,
        model: &mut TabularLM,
        acc: &mut GradAccumulator,
        lr: f64,
    ) -> Result<()> {
        match self {
            Optimizer::Sgd => sgd_step(model, acc, lr),
            Optimizer::Adam { t, moments } => {
                if !(lr > 0.0 && lr.is_finite()) {
                    return Err(Error::param(
                        "lr",
                        format!("{lr} must be a finite positive number"),
                    ));
                }
                if acc.samples == 0 {
                    acc.clear();
                    return Ok(());
                }
                *t += 1;
                let n = acc.samples as f64;
                let c1 = 1.0 - ADAM_BETA1.powi(*t);
                let c2 = 1.0 - ADAM_BETA2.powi(*t);
                let v_size = model.vocab.size();
                let mut updated = Vec::new();
                for (ctx, dir) in &acc.rows {
                    let (m, v) = moments
                        .entry(ctx.clone())
                        .or_insert_with(|| (vec![0.0; v_size], vec![0.0; v_size]));
                    let mut row = model
                        .rows
                        .get(ctx)
                        .cloned()
                        .unwrap_or_else(|| vec![0.0; v_size]);
                    for i in 0..v_size {
                        // gradient of the loss is the negated descent direction
                        let g = -dir[i] / n;
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
                        row[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                    if row.iter().any(|z| !z.is_finite()) {
                        return Err(Error::NumericOverflow(format!(
                            "non-finite logit after update of row {ctx}"
                        )));
                    }
                    updated.push((ctx.clone(), row));
                }
                for (ctx, row) in updated {
                    model.rows.insert(ctx, row);
                }
                acc.clear();
                Ok(())
            }
        }
    }
}

#[derive(Serialize)]
struct CheckpointOut<'a> {
    format_version: u32,
    kind: &'static str,
    config_hash: &'a str,
    seed: u64,
    order: usize,
    vocab: &'a [String],
    rows: Vec<RowOut>,
}

#[derive(Serialize)]
struct RowOut {
    context: Vec<TokenId>,
    logits: Vec<Box<RawValue>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointIn {
    format_version: u32,
    kind: String,
    #[allow(dead_code)]
    config_hash: String,
    #[allow(dead_code)]
    seed: u64,
    order: usize,
    vocab: Vec<String>,
    rows: Vec<RowIn>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RowIn {
    context: Vec<TokenId>,
    logits: Vec<f64>,
}

/// Seventeen significant digits: enough to round-trip any f64.
pub(crate) fn exact_decimal(x: f64) -> Box<RawValue> {
    RawValue::from_string(format!("{x:.16e}")).expect("formatted float is valid JSON")
}

pub(crate) fn json_parse_error(e: serde_json::Error) -> Error {
    Error::Parse {
        line: e.line(),
        message: format!("column {}: {e}", e.column()),
    }
}

/// Serializes the model as a JSON document with exact decimal logits.
pub fn checkpoint_to_string(model: &TabularLM, stamp: &FileStamp) -> String {
    let doc = CheckpointOut {
        format_version: FORMAT_VERSION,
        kind: "tabular_lm",
        config_hash: &stamp.config_hash,
        seed: stamp.seed,
        order: model.order,
        vocab: model.vocab.names(),
        rows: model
            .rows
            .iter()
            .map(|(ctx, row)| RowOut {
                context: ctx.ids().to_vec(),
                logits: row.iter().map(|&z| exact_decimal(z)).collect(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("checkpoint serializes");
    s.push('\n');
    s
}

pub fn checkpoint_from_str(text: &str) -> Result<TabularLM> {
    let doc: CheckpointIn = serde_json::from_str(text).map_err(json_parse_error)?;
    let bad = |message: String| Error::Parse { line: 0, message };
    if doc.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "field `format_version`: unsupported version {}",
            doc.format_version
        )));
    }
    if doc.kind != "tabular_lm" {
        return Err(bad(format!(
            "field `kind`: expected `tabular_lm`, found `{}`",
            doc.kind
        )));
    }
    let vocab = Vocab::new(doc.vocab).map_err(|e| bad(format!("field `vocab`: {e}")))?;
    let mut model =
        TabularLM::new(doc.order, vocab).map_err(|e| bad(format!("field `order`: {e}")))?;
    for (i, row) in doc.rows.into_iter().enumerate() {
        let ctx = ContextKey::new(row.context, &model.vocab)
            .map_err(|e| bad(format!("field `rows[{i}].context`: {e}")))?;
        model
            .set_row(ctx, row.logits)
            .map_err(|e| bad(format!("field `rows[{i}]`: {e}")))?;
    }
    Ok(model)
}

pub fn checkpoint_save(model: &TabularLM, path: &Path, stamp: &FileStamp) -> Result<()> {
    fs::write(path, checkpoint_to_string(model, stamp)).map_err(|e| Error::io(path, e))
}

pub fn checkpoint_load(path: &Path) -> Result<TabularLM> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}
