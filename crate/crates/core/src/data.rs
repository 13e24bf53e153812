//! Ground-truth sources with exactly known conditionals, and corpora drawn
//! from them.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::model::{
    exact_decimal, json_parse_error, ConditionalModel, ContextKey, TabularLM, TokenId, Vocab,
    LOGIT_FLOOR,
};
use crate::numerics::{lab_rng, CategoricalDist, LabRng};
use crate::{FileStamp, FORMAT_VERSION};

/// The gap token of `bimodal_gap`: its successor depends on the token
/// before it, which an order-1 model cannot see.
pub const GAP_TOKEN: TokenId = 2;

/// Builtin source descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceSpec {
    Uniform {
        vocab_size: usize,
        #[serde(default = "one")]
        order: usize,
    },
    DeterministicCycle {
        vocab_size: usize,
    },
    /// Order-2 source. Tokens 0 and 1 are keys, 2 is the gap, 3 and 4 are
    /// the two payloads, 5.. are a filler chain. A key is followed by the
    /// gap, and the gap by payload 3 after key 0 or payload 4 after key 1.
    /// Every row is mixed with `noise` of uniform mass.
    BimodalGap {
        #[serde(default = "default_vocab")]
        vocab_size: usize,
        #[serde(default = "default_noise")]
        noise: f64,
    },
    RandomDirichlet {
        vocab_size: usize,
        #[serde(default = "one")]
        order: usize,
        seed: u64,
        concentration: f64,
    },
}

fn one() -> usize {
    1
}

fn default_vocab() -> usize {
    8
}

fn default_noise() -> f64 {
    0.05
}

/// A finite-order Markov source. Rows exist for every context, including
/// the BOS-padded ones at the start of a sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkovSource {
    order: usize,
    vocab: Vocab,
    rows: BTreeMap<ContextKey, CategoricalDist>,
}

impl MarkovSource {
    pub fn from_rows(
        order: usize,
        vocab: Vocab,
        rows: BTreeMap<ContextKey, CategoricalDist>,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::param("order", "must be at least 1"));
        }
        for ctx in ContextKey::enumerate(order, vocab.size()) {
            match rows.get(&ctx) {
                None => {
                    return Err(Error::InvalidInput(format!(
                        "source has no row for context {ctx}"
                    )))
                }
                Some(d) if d.len() != vocab.size() => {
                    return Err(Error::InvalidInput(format!(
                        "row {ctx} has the wrong length"
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(Self { order, vocab, rows })
    }

    pub fn rows(&self) -> impl Iterator<Item = (&ContextKey, &CategoricalDist)> {
        self.rows.iter()
    }

    /// Distribution of the first token.
    pub fn initial(&self) -> &CategoricalDist {
        let ctx = ContextKey::from_prefix(&[], self.order, self.vocab.bos());
        &self.rows[&ctx]
    }

    /// Exact tabular model with logits `ln p` (zero-probability tokens get
    /// [`LOGIT_FLOOR`]).
    pub fn to_model(&self) -> TabularLM {
        let mut m = TabularLM::new(self.order, self.vocab.clone()).expect("order ≥ 1");
        for (ctx, d) in &self.rows {
            let logits = d
                .logprobs()
                .iter()
                .map(|&lp| if lp.is_finite() { lp } else { LOGIT_FLOOR })
                .collect();
            m.set_row(ctx.clone(), logits).expect("finite row");
        }
        m
    }

    /// Expected number of visits to each full context over positions
    /// `0..len` of a sequence started from BOS.
    pub fn context_occupancy(&self, len: usize) -> BTreeMap<ContextKey, f64> {
        let mut occ: BTreeMap<ContextKey, f64> = BTreeMap::new();
        let mut frontier: BTreeMap<ContextKey, f64> = BTreeMap::new();
        frontier.insert(
            ContextKey::from_prefix(&[], self.order, self.vocab.bos()),
            1.0,
        );
        for _ in 0..len {
            let mut next: BTreeMap<ContextKey, f64> = BTreeMap::new();
            for (ctx, mass) in &frontier {
                *occ.entry(ctx.clone()).or_default() += mass;
                for (a, &p) in self.rows[ctx].probs().iter().enumerate() {
                    if p > 0.0 {
                        *next.entry(ctx.push(a)).or_default() += mass * p;
                    }
                }
            }
            frontier = next;
        }
        occ
    }

    /// Best lower-order conditional at `ctx`: the occupancy-weighted mixture
    /// of every full-order row that `ctx` cannot tell apart.
    pub fn marginal_conditional(&self, ctx: &ContextKey, len: usize) -> Result<CategoricalDist> {
        if ctx.len() > self.order {
            return Err(Error::InvalidInput(format!(
                "context {ctx} is longer than the source order"
            )));
        }
        let occ = self.context_occupancy(len);
        let mut mix = vec![0.0; self.vocab.size()];
        let mut total = 0.0;
        for (full, mass) in &occ {
            if &full.truncate_to(ctx.len()) == ctx {
                total += mass;
                for (m, p) in mix.iter_mut().zip(self.rows[full].probs()) {
                    *m += mass * p;
                }
            }
        }
        if total == 0.0 {
            return Err(Error::InvalidInput(format!("context {ctx} is unreachable")));
        }
        let sum: f64 = mix.iter().sum();
        CategoricalDist::from_probs(mix.into_iter().map(|m| m / sum).collect())
    }
}

impl ConditionalModel for MarkovSource {
    fn order(&self) -> usize {
        self.order
    }

    fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    fn conditional(&self, ctx: &ContextKey) -> Result<CategoricalDist> {
        if ctx.len() != self.order {
            return Err(Error::InvalidInput(format!(
                "context {ctx} has length {}, source order is {}",
                ctx.len(),
                self.order
            )));
        }
        self.rows
            .get(ctx)
            .cloned()
            .ok_or_else(|| Error::InvalidInput(format!("invalid source context {ctx}")))
    }
}

fn smoothed(pattern: &[(TokenId, f64)], v: usize, noise: f64) -> CategoricalDist {
    let mut probs = vec![noise / v as f64; v];
    for &(t, w) in pattern {
        probs[t] += (1.0 - noise) * w;
    }
    CategoricalDist::from_probs(probs).expect("smoothed row is a distribution")
}

fn bimodal_gap_pattern(prev: TokenId, last: TokenId, v: usize) -> Vec<(TokenId, f64)> {
    let bos = v;
    let keys = vec![(0, 0.5), (1, 0.5)];
    match last {
        l if l == bos => keys,
        0 | 1 => vec![(GAP_TOKEN, 1.0)],
        GAP_TOKEN => match prev {
            0 => vec![(3, 1.0)],
            1 => vec![(4, 1.0)],
            _ => vec![(3, 0.5), (4, 0.5)],
        },
        3 | 4 if v > 5 => vec![(5, 1.0)],
        f if f + 1 < v && f >= 5 => vec![(f + 1, 1.0)],
        _ => keys,
    }
}

/// Builds a builtin source.
pub fn build_source(spec: &SourceSpec) -> Result<MarkovSource> {
    match *spec {
        SourceSpec::Uniform { vocab_size, order } => {
            let vocab = Vocab::with_size(vocab_size)?;
            let rows = ContextKey::enumerate(order, vocab_size)
                .into_iter()
                .map(|c| (c, CategoricalDist::uniform(vocab_size)))
                .collect();
            MarkovSource::from_rows(order, vocab, rows)
        }
        SourceSpec::DeterministicCycle { vocab_size } => {
            let vocab = Vocab::with_size(vocab_size)?;
            let bos = vocab.bos();
            let rows = ContextKey::enumerate(1, vocab_size)
                .into_iter()
                .map(|c| {
                    let last = c.ids()[0];
                    let next = if last == bos {
                        0
                    } else {
                        (last + 1) % vocab_size
                    };
                    (c, CategoricalDist::one_hot(vocab_size, next))
                })
                .collect();
            MarkovSource::from_rows(1, vocab, rows)
        }
        SourceSpec::BimodalGap { vocab_size, noise } => {
            if vocab_size < 5 {
                return Err(Error::param(
                    "vocab_size",
                    "bimodal_gap needs at least 5 tokens",
                ));
            }
            if !(0.0..1.0).contains(&noise) {
                return Err(Error::param("noise", format!("{noise} is outside [0, 1)")));
            }
            let vocab = Vocab::with_size(vocab_size)?;
            let rows = ContextKey::enumerate(2, vocab_size)
                .into_iter()
                .map(|c| {
                    let pattern = bimodal_gap_pattern(c.ids()[0], c.ids()[1], vocab_size);
                    (c, smoothed(&pattern, vocab_size, noise))
                })
                .collect();
            MarkovSource::from_rows(2, vocab, rows)
        }
        SourceSpec::RandomDirichlet {
            vocab_size,
            order,
            seed,
            concentration,
        } => {
            if !(concentration > 0.0 && concentration.is_finite()) {
                return Err(Error::param(
                    "concentration",
                    format!("{concentration} must be positive"),
                ));
            }
            let vocab = Vocab::with_size(vocab_size)?;
            // Dirichlet rows as normalized Gamma draws
            let gamma = Gamma::new(concentration, 1.0)
                .map_err(|e| Error::param("concentration", e.to_string()))?;
            let mut rng = lab_rng(seed, 0);
            let mut rows = BTreeMap::new();
            for c in ContextKey::enumerate(order, vocab_size) {
                let mut probs: Vec<f64> = (0..vocab_size).map(|_| gamma.sample(&mut rng)).collect();
                let s: f64 = probs.iter().sum();
                probs.iter_mut().for_each(|p| *p = (*p / s).max(1e-9));
                let s: f64 = probs.iter().sum();
                probs.iter_mut().for_each(|p| *p /= s);
                rows.insert(c, CategoricalDist::from_probs(probs)?);
            }
            MarkovSource::from_rows(order, vocab, rows)
        }
    }
}

#[derive(Serialize)]
struct SourceOut<'a> {
    format_version: u32,
    kind: &'static str,
    config_hash: &'a str,
    seed: u64,
    order: usize,
    vocab: &'a [String],
    rows: Vec<SourceRowOut>,
}

#[derive(Serialize)]
struct SourceRowOut {
    context: Vec<TokenId>,
    probs: Vec<Box<RawValue>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceIn {
    format_version: u32,
    kind: String,
    #[allow(dead_code)]
    config_hash: String,
    #[allow(dead_code)]
    seed: u64,
    order: usize,
    vocab: Vec<String>,
    rows: Vec<SourceRowIn>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SourceRowIn {
    context: Vec<TokenId>,
    probs: Vec<f64>,
}

pub fn source_to_string(source: &MarkovSource, stamp: &FileStamp) -> String {
    let doc = SourceOut {
        format_version: FORMAT_VERSION,
        kind: "markov_source",
        config_hash: &stamp.config_hash,
        seed: stamp.seed,
        order: source.order,
        vocab: source.vocab.names(),
        rows: source
            .rows
            .iter()
            .map(|(c, d)| SourceRowOut {
                context: c.ids().to_vec(),
                probs: d.probs().iter().map(|&p| exact_decimal(p)).collect(),
            })
            .collect(),
    };
    let mut s = serde_json::to_string_pretty(&doc).expect("source serializes");
    s.push('\n');
    s
}

pub fn source_from_str(text: &str) -> Result<MarkovSource> {
    let doc: SourceIn = serde_json::from_str(text).map_err(json_parse_error)?;
    let bad = |message: String| Error::Parse { line: 0, message };
    if doc.format_version != FORMAT_VERSION {
        return Err(bad(format!(
            "field `format_version`: unsupported version {}",
            doc.format_version
        )));
    }
    if doc.kind != "markov_source" {
        return Err(bad(format!(
            "field `kind`: expected `markov_source`, found `{}`",
            doc.kind
        )));
    }
    let vocab = Vocab::new(doc.vocab).map_err(|e| bad(format!("field `vocab`: {e}")))?;
    let mut rows = BTreeMap::new();
    for (i, r) in doc.rows.into_iter().enumerate() {
        let ctx = ContextKey::new(r.context, &vocab)
            .map_err(|e| bad(format!("field `rows[{i}].context`: {e}")))?;
        let d = CategoricalDist::from_probs(r.probs)
            .map_err(|e| bad(format!("field `rows[{i}].probs`: {e}")))?;
        rows.insert(ctx, d);
    }
    MarkovSource::from_rows(doc.order, vocab, rows).map_err(|e| bad(e.to_string()))
}

pub fn source_save(source: &MarkovSource, path: &Path, stamp: &FileStamp) -> Result<()> {
    fs::write(path, source_to_string(source, stamp)).map_err(|e| Error::io(path, e))
}

pub fn source_load(path: &Path) -> Result<MarkovSource> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    source_from_str(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    GroundTruth,
    TeacherGenerated,
    StudentGenerated,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::GroundTruth => "ground_truth",
            Provenance::TeacherGenerated => "teacher_generated",
            Provenance::StudentGenerated => "student_generated",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub sequences: Vec<Vec<TokenId>>,
    pub vocab_size: usize,
    pub provenance: Provenance,
    pub seed: u64,
}

impl Corpus {
    pub fn num_tokens(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }
}

/// Draws `num_seqs` sequences of `len` tokens, each started from BOS.
pub fn sample_corpus(
    source: &MarkovSource,
    num_seqs: usize,
    len: usize,
    seed: u64,
) -> Result<Corpus> {
    if num_seqs == 0 || len == 0 {
        return Err(Error::param(
            "num_seqs",
            "corpus needs at least one sequence of at least one token",
        ));
    }
    let mut rng = lab_rng(seed, 0);
    let sequences = (0..num_seqs)
        .map(|_| source.rollout(&[], len, &mut rng))
        .collect::<Result<_>>()?;
    Ok(Corpus {
        sequences,
        vocab_size: source.vocab.size(),
        provenance: Provenance::GroundTruth,
        seed,
    })
}

/// Teacher continuations of each prompt at `temperature` (zero is greedy).
/// Each stored sequence is the prompt followed by `len` generated tokens.
pub fn generate_seqkd_corpus(
    teacher: &dyn ConditionalModel,
    prompts: &[Vec<TokenId>],
    len: usize,
    seed: u64,
    temperature: f64,
) -> Result<Corpus> {
    let mut rng: LabRng = lab_rng(seed, 1);
    let sequences = prompts
        .iter()
        .map(|p| teacher.rollout_at(p, len, temperature, &mut rng))
        .collect::<Result<_>>()?;
    Ok(Corpus {
        sequences,
        vocab_size: teacher.vocab().size(),
        provenance: Provenance::TeacherGenerated,
        seed,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CorpusHeader {
    format_version: u32,
    #[serde(rename = "V")]
    vocab_size: usize,
    provenance: Provenance,
    seed: u64,
    #[serde(default)]
    config_hash: String,
}

pub fn corpus_to_string(corpus: &Corpus, config_hash: &str) -> String {
    let header = CorpusHeader {
        format_version: FORMAT_VERSION,
        vocab_size: corpus.vocab_size,
        provenance: corpus.provenance,
        seed: corpus.seed,
        config_hash: config_hash.to_string(),
    };
    let mut out = serde_json::to_string(&header).expect("header serializes");
    out.push('\n');
    for seq in &corpus.sequences {
        let line: Vec<String> = seq.iter().map(|t| t.to_string()).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

pub fn corpus_from_str(text: &str) -> Result<Corpus> {
    let mut lines = text.lines();
    let first = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let header: CorpusHeader = serde_json::from_str(first).map_err(|e| Error::Parse {
        line: 1,
        message: format!("header: {e}"),
    })?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Parse {
            line: 1,
            message: format!("unsupported format_version {}", header.format_version),
        });
    }
    let mut sequences = Vec::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let seq = line
            .split_whitespace()
            .map(|tok| {
                let id: TokenId = tok.parse().map_err(|_| Error::Parse {
                    line: lineno,
                    message: format!("`{tok}` is not a token id"),
                })?;
                if id >= header.vocab_size {
                    return Err(Error::Parse {
                        line: lineno,
                        message: format!(
                            "token id {id} out of range for V = {}",
                            header.vocab_size
                        ),
                    });
                }
                Ok(id)
            })
            .collect::<Result<Vec<_>>>()?;
        sequences.push(seq);
    }
    Ok(Corpus {
        sequences,
        vocab_size: header.vocab_size,
        provenance: header.provenance,
        seed: header.seed,
    })
}

pub fn corpus_write(corpus: &Corpus, path: &Path, config_hash: &str) -> Result<()> {
    fs::write(path, corpus_to_string(corpus, config_hash)).map_err(|e| Error::io(path, e))
}

pub fn corpus_read(path: &Path) -> Result<Corpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    corpus_from_str(&text)
}
