//! Token-level weights for the reweighted log-likelihood
//! `L = -E[w(a|s) ln q(a|s)]`.
//!
//! Every objective differs only in which tokens it touches and the weight it
//! attaches to them:
//!
//! | tag | data | weight |
//! |-----|------|--------|
//! | `sft`, `seqkd` | corpus / teacher generations | `1[a = a*]` |
//! | `fkld_token` | corpus | `p(a*)` |
//! | `fkld_dense` | corpus | `p(v)` on every token `v` |
//! | `rkld_off` | corpus | `q(a*) (ln p(a*) - ln q(a*))` |
//! | `jsd_off` | corpus | `(1-β) q(a*) (ln M(a*) - ln q(a*))` |
//! | `hpd*` | corpus + one student sample | [`hpd_weights`] |
//! | `rkld_on`, `opd_k1` | student rollouts | `ln p(a) - ln q(a)` |
//!
//! Off-policy weights are oriented so that ascending `Σ w ln q` descends
//! the matching divergence. The `sign_fidelity` switch flips `rkld_off`
//! and `jsd_off` to the opposite orientation for comparison runs.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenId;
use crate::numerics::CategoricalDist;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveTag {
    Sft,
    FkldToken,
    FkldDense,
    Seqkd,
    RkldOff,
    JsdOff,
    Hpd,
    HpdNoSample,
    HpdNoReinforce,
    RkldOn,
    OpdK1,
}

impl ObjectiveTag {
    pub const ALL: [ObjectiveTag; 11] = [
        ObjectiveTag::Sft,
        ObjectiveTag::FkldToken,
        ObjectiveTag::FkldDense,
        ObjectiveTag::Seqkd,
        ObjectiveTag::RkldOff,
        ObjectiveTag::JsdOff,
        ObjectiveTag::Hpd,
        ObjectiveTag::HpdNoSample,
        ObjectiveTag::HpdNoReinforce,
        ObjectiveTag::RkldOn,
        ObjectiveTag::OpdK1,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ObjectiveTag::Sft => "sft",
            ObjectiveTag::FkldToken => "fkld_token",
            ObjectiveTag::FkldDense => "fkld_dense",
            ObjectiveTag::Seqkd => "seqkd",
            ObjectiveTag::RkldOff => "rkld_off",
            ObjectiveTag::JsdOff => "jsd_off",
            ObjectiveTag::Hpd => "hpd",
            ObjectiveTag::HpdNoSample => "hpd_no_sample",
            ObjectiveTag::HpdNoReinforce => "hpd_no_reinforce",
            ObjectiveTag::RkldOn => "rkld_on",
            ObjectiveTag::OpdK1 => "opd_k1",
        }
    }

    /// On-policy objectives train on the student's own rollouts.
    pub fn is_on_policy(self) -> bool {
        matches!(self, ObjectiveTag::RkldOn | ObjectiveTag::OpdK1)
    }

    pub fn hpd_variant(self) -> Option<HpdVariant> {
        match self {
            ObjectiveTag::Hpd => Some(HpdVariant::Full),
            ObjectiveTag::HpdNoSample => Some(HpdVariant::NoSample),
            ObjectiveTag::HpdNoReinforce => Some(HpdVariant::NoReinforce),
            _ => None,
        }
    }
}

impl fmt::Display for ObjectiveTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ObjectiveTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown objective `{s}`")))
    }
}

/// An objective tag together with its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveKind {
    pub tag: ObjectiveTag,
    /// Mixing weight on the teacher for `jsd_off`.
    pub beta: f64,
    pub sign_fidelity: bool,
}

impl ObjectiveKind {
    pub fn new(tag: ObjectiveTag) -> Self {
        Self {
            tag,
            beta: 0.5,
            sign_fidelity: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return Err(Error::param(
                "beta",
                format!("{} is outside (0, 1)", self.beta),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HpdVariant {
    Full,
    NoSample,
    NoReinforce,
}

/// Weights computed for one offline state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HpdWeights {
    /// Negative reverse gap at the expert token.
    pub k1: f64,
    /// Negative reverse gap at the sampled token.
    pub k1_prime: f64,
    pub w_star: f64,
    pub sampled_token: TokenId,
    pub w_sampled: f64,
}

fn positive_logprob(d: &CategoricalDist, token: TokenId) -> Result<f64> {
    d.checked_logprob(token)
}

pub fn weight_sft(token: TokenId, expert: TokenId) -> f64 {
    if token == expert {
        1.0
    } else {
        0.0
    }
}

pub fn weight_fkld_token(p: &CategoricalDist, expert: TokenId) -> f64 {
    p.prob(expert)
}

/// Full-vocabulary forward-KL weights: the teacher row itself.
pub fn weights_fkld_dense(p: &CategoricalDist) -> Vec<f64> {
    p.probs().to_vec()
}

pub fn weight_rkld_off(
    p: &CategoricalDist,
    q: &CategoricalDist,
    expert: TokenId,
    sign_fidelity: bool,
) -> Result<f64> {
    let w = hpd_k1(p, q, expert)?;
    Ok(if sign_fidelity { -w } else { w })
}

pub fn weight_jsd_off(
    p: &CategoricalDist,
    q: &CategoricalDist,
    expert: TokenId,
    beta: f64,
    sign_fidelity: bool,
) -> Result<f64> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::param("beta", format!("{beta} is outside (0, 1)")));
    }
    let ln_q = positive_logprob(q, expert)?;
    let mid = beta * p.prob(expert) + (1.0 - beta) * q.prob(expert);
    if mid <= 0.0 {
        return Err(Error::LogOfZero { token: expert });
    }
    let w = (1.0 - beta) * q.prob(expert) * (mid.ln() - ln_q);
    Ok(if sign_fidelity { -w } else { w })
}

/// On-policy reverse-KL weight: `ln p(a) - ln q(a)`.
pub fn weight_rkld_on(p: &CategoricalDist, q: &CategoricalDist, token: TokenId) -> Result<f64> {
    Ok(positive_logprob(p, token)? - positive_logprob(q, token)?)
}

/// `q(a) (ln p(a) - ln q(a))`: positive when the student underestimates `a`.
pub fn hpd_k1(p: &CategoricalDist, q: &CategoricalDist, token: TokenId) -> Result<f64> {
    let ln_p = positive_logprob(p, token)?;
    let ln_q = positive_logprob(q, token)?;
    Ok(q.prob(token) * (ln_p - ln_q))
}

/// Expert and sampled-token weights for one state.
pub fn hpd_weights(
    p: &CategoricalDist,
    q: &CategoricalDist,
    expert: TokenId,
    sampled: TokenId,
    variant: HpdVariant,
) -> Result<HpdWeights> {
    let k1 = hpd_k1(p, q, expert)?;
    let k1_prime = hpd_k1(p, q, sampled)?;
    let p_star = p.prob(expert);
    let suppress = sampled != expert && k1_prime < 0.0;

    let (w_star, w_sampled) = match variant {
        HpdVariant::NoSample => (if k1 > 0.0 { p_star + k1 } else { k1 }, 0.0),
        HpdVariant::Full | HpdVariant::NoReinforce => {
            let w_star = if k1 < 0.0 {
                k1
            } else if variant == HpdVariant::Full && k1 > 0.0 && k1_prime < 0.0 {
                2.0 * p_star + k1
            } else {
                p_star + k1
            };
            (w_star, if suppress { k1_prime } else { 0.0 })
        }
    };
    Ok(HpdWeights {
        k1,
        k1_prime,
        w_star,
        sampled_token: sampled,
        w_sampled,
    })
}

/// Per-step rewards `ln p(a_t) - ln q(a_t)` along a student rollout.
pub fn opd_rewards(
    teacher: &[CategoricalDist],
    student: &[CategoricalDist],
    tokens: &[TokenId],
) -> Result<Vec<f64>> {
    if teacher.len() != tokens.len() || student.len() != tokens.len() {
        return Err(Error::InvalidInput(format!(
            "misaligned rollout: {} teacher rows, {} student rows, {} tokens",
            teacher.len(),
            student.len(),
            tokens.len()
        )));
    }
    tokens
        .iter()
        .zip(teacher.iter().zip(student))
        .map(|(&a, (p, q))| weight_rkld_on(p, q, a))
        .collect()
}
