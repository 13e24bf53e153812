//! Exact categorical-distribution math.
//!
//! Everything here works in nats. A [`CategoricalDist`] caches both the
//! probability vector and its log, so the weight estimators in
//! [`crate::objectives`] never recompute `ln` on hot paths.
//!
//! | Function | Quantity |
//! |----------|----------|
//! | [`softmax`] | q_v = exp(z_v) / Σ exp(z) |
//! | [`entropy`] | H(p) = -Σ p ln p |
//! | [`kl_exact`] | KL(p‖q) = Σ p (ln p - ln q) |
//! | [`jsd_beta`] | β KL(p‖M) + (1-β) KL(q‖M), M = βp + (1-β)q |
//! | [`k1_mc`] | (1/N) Σ ln q(a_i)/p(a_i), a_i ~ q |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Probabilities below this are exact zeros for every support check.
pub const ZERO_PROB: f64 = 1e-12;

/// Tolerance on |Σp - 1| for a valid distribution.
pub const NORMALIZATION_TOL: f64 = 1e-9;

/// The generator used by every stochastic routine in the crate.
pub type LabRng = ChaCha8Rng;

/// Deterministic generator for `(seed, stream)`. Distinct streams of the same
/// seed are independent, which lets training, evaluation and sampling draw
/// from separate sequences without perturbing one another.
pub fn lab_rng(seed: u64, stream: u64) -> LabRng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// A probability vector over the vocabulary with cached log-probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct CategoricalDist {
    probs: Vec<f64>,
    logprobs: Vec<f64>,
}

impl CategoricalDist {
    /// Validates and wraps a probability vector. Entries below [`ZERO_PROB`]
    /// are snapped to exact zero and carry a `-inf` log-probability.
    pub fn from_probs(mut probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::InvalidInput("empty probability vector".into()));
        }
        let mut sum = 0.0;
        for (v, p) in probs.iter_mut().enumerate() {
            if !p.is_finite() || *p < 0.0 {
                return Err(Error::InvalidInput(format!("probability {p} at token {v}")));
            }
            if *p < ZERO_PROB {
                *p = 0.0;
            }
            sum += *p;
        }
        if (sum - 1.0).abs() > NORMALIZATION_TOL {
            return Err(Error::InvalidInput(format!("probabilities sum to {sum}")));
        }
        let logprobs = probs
            .iter()
            .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
            .collect();
        Ok(Self { probs, logprobs })
    }

    pub fn uniform(size: usize) -> Self {
        assert!(size > 0, "uniform distribution needs at least one token");
        let p = 1.0 / size as f64;
        Self {
            probs: vec![p; size],
            logprobs: vec![p.ln(); size],
        }
    }

    pub fn one_hot(size: usize, token: usize) -> Self {
        assert!(token < size, "token {token} out of range for size {size}");
        let mut probs = vec![0.0; size];
        let mut logprobs = vec![f64::NEG_INFINITY; size];
        probs[token] = 1.0;
        logprobs[token] = 0.0;
        Self { probs, logprobs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn logprobs(&self) -> &[f64] {
        &self.logprobs
    }

    pub fn prob(&self, token: usize) -> f64 {
        self.probs[token]
    }

    pub fn logprob(&self, token: usize) -> f64 {
        self.logprobs[token]
    }

    /// `ln p[token]`, failing on a zero-probability token.
    pub fn checked_logprob(&self, token: usize) -> Result<f64> {
        match self.logprobs.get(token) {
            None => Err(Error::InvalidInput(format!(
                "token {token} outside vocabulary of size {}",
                self.len()
            ))),
            Some(lp) if lp.is_finite() => Ok(*lp),
            Some(_) => Err(Error::LogOfZero { token }),
        }
    }

    /// Most probable token; ties resolve to the lowest id.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (v, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = v;
            }
        }
        best
    }

    /// Inverse-CDF draw. Never returns a zero-probability token.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut last = 0;
        for (v, &p) in self.probs.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            cum += p;
            last = v;
            if u < cum {
                return v;
            }
        }
        last
    }

    /// Rescales log-probabilities by `1 / temperature`. A temperature of zero
    /// is the greedy limit and returns the one-hot argmax distribution.
    pub fn with_temperature(&self, temperature: f64) -> Result<Self> {
        if !temperature.is_finite() || temperature < 0.0 {
            return Err(Error::param(
                "temperature",
                format!("{temperature} is not a finite value ≥ 0"),
            ));
        }
        if temperature == 0.0 {
            return Ok(Self::one_hot(self.len(), self.argmax()));
        }
        if temperature == 1.0 {
            return Ok(self.clone());
        }
        let scaled: Vec<f64> = self
            .logprobs
            .iter()
            .map(|&lp| {
                if lp.is_finite() {
                    lp / temperature
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        Ok(log_softmax_unchecked(&scaled))
    }

    fn same_size(&self, other: &Self) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::InvalidInput(format!(
                "vocabulary size mismatch: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(())
    }
}

/// Max-subtracted softmax. Any non-finite logit is rejected.
pub fn softmax(logits: &[f64]) -> Result<CategoricalDist> {
    if logits.is_empty() {
        return Err(Error::InvalidInput("empty logit vector".into()));
    }
    if let Some((v, z)) = logits.iter().enumerate().find(|(_, z)| !z.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite logit {z} at token {v}"
        )));
    }
    Ok(log_softmax_unchecked(logits))
}

// Accepts -inf entries (masked tokens); at least one entry must be finite.
fn log_softmax_unchecked(logits: &[f64]) -> CategoricalDist {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm: f64 = logits.iter().map(|&z| (z - max).exp()).sum();
    let ln_norm = norm.ln();
    let mut probs = Vec::with_capacity(logits.len());
    let mut logprobs = Vec::with_capacity(logits.len());
    for &z in logits {
        let lp = (z - max) - ln_norm;
        let p = lp.exp();
        if p < ZERO_PROB {
            probs.push(0.0);
            logprobs.push(f64::NEG_INFINITY);
        } else {
            probs.push(p);
            logprobs.push(lp);
        }
    }
    CategoricalDist { probs, logprobs }
}

/// Shannon entropy in nats with `0 ln 0 = 0`.
pub fn entropy(d: &CategoricalDist) -> f64 {
    -d.probs
        .iter()
        .zip(&d.logprobs)
        .filter(|(p, _)| **p > 0.0)
        .map(|(p, lp)| p * lp)
        .sum::<f64>()
}

/// KL(p‖q) in nats.
pub fn kl_exact(p: &CategoricalDist, q: &CategoricalDist) -> Result<f64> {
    p.same_size(q)?;
    let mut total = 0.0;
    for v in 0..p.len() {
        let pv = p.probs[v];
        if pv == 0.0 {
            continue;
        }
        if q.probs[v] == 0.0 {
            return Err(Error::DivergenceInfinite {
                token: v,
                state: None,
            });
        }
        total += pv * (p.logprobs[v] - q.logprobs[v]);
    }
    // Rounding can leave a -1e-17 residue when p == q.
    Ok(total.max(0.0))
}

/// Generalized Jensen-Shannon divergence with mixing weight `beta` on `p`.
pub fn jsd_beta(p: &CategoricalDist, q: &CategoricalDist, beta: f64) -> Result<f64> {
    p.same_size(q)?;
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::param("beta", format!("{beta} is outside (0, 1)")));
    }
    let mut total = 0.0;
    for v in 0..p.len() {
        let (pv, qv) = (p.probs[v], q.probs[v]);
        let m = beta * pv + (1.0 - beta) * qv;
        if m == 0.0 || pv == qv {
            continue;
        }
        let ln_m = m.ln();
        if pv > 0.0 {
            total += beta * pv * (p.logprobs[v] - ln_m);
        }
        if qv > 0.0 {
            total += (1.0 - beta) * qv * (q.logprobs[v] - ln_m);
        }
    }
    Ok(total.max(0.0))
}

/// Mean and standard error of a sample. The standard error uses the
/// unbiased (n-1) variance and is zero for a single observation.
pub fn mean_and_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Monte Carlo summary of the K1 estimator against its exact target.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    /// KL(q‖p), computed by direct summation.
    pub exact_value: f64,
    pub mc_mean: f64,
    pub mc_stderr: f64,
    pub n_samples: usize,
    /// Fraction of per-sample log-ratios that came out negative.
    pub negative_fraction: f64,
}

/// Per-sample K1 terms `ln q(a) - ln p(a)` with `a ~ q`.
pub fn k1_log_ratios<R: Rng + ?Sized>(
    p: &CategoricalDist,
    q: &CategoricalDist,
    n: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    p.same_size(q)?;
    (0..n)
        .map(|_| {
            let a = q.sample(rng);
            if p.probs[a] == 0.0 {
                return Err(Error::DivergenceInfinite {
                    token: a,
                    state: None,
                });
            }
            Ok(q.logprobs[a] - p.logprobs[a])
        })
        .collect()
}

/// K1 estimate of KL(q‖p) from `n` draws of the student `q`.
pub fn k1_mc<R: Rng + ?Sized>(
    p: &CategoricalDist,
    q: &CategoricalDist,
    n: usize,
    rng: &mut R,
) -> Result<DivergenceReport> {
    if n == 0 {
        return Err(Error::param("n", "at least one sample is required"));
    }
    let samples = k1_log_ratios(p, q, n, rng)?;
    let exact_value = kl_exact(q, p)?;
    let (mc_mean, mc_stderr) = mean_and_stderr(&samples);
    let negatives = samples.iter().filter(|&&x| x < 0.0).count();
    Ok(DivergenceReport {
        exact_value,
        mc_mean,
        mc_stderr,
        n_samples: n,
        negative_fraction: negatives as f64 / n as f64,
    })
}
