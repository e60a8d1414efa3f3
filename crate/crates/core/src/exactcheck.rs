//! Brute-force enumeration on tiny sequence spaces: exact order-marginal
//! likelihoods, the partition function, the reward-tilted optimal policy and
//! exact KL divergences.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::numerics::log_sum_exp;
use crate::oracles::OracleSuite;
use crate::seqmodel::{Backbone, OrderedLikelihood, Permutation, Sequence};

/// Longest sequence handled by enumeration.
pub const MAX_LEN: usize = 4;
/// Largest sequence space `A^L` handled by enumeration.
pub const MAX_SPACE: usize = 4096;

/// `(1/L!) Σ_σ exp(log π(y | x, σ))` over every order.
pub fn exact_seq_prob<M: OrderedLikelihood + ?Sized>(
    model: &M,
    backbone: &Backbone,
    seq: &Sequence,
) -> Result<f64> {
    let len = backbone.len();
    if len > MAX_LEN {
        return Err(Error::contract(format!(
            "exact marginal needs L <= {MAX_LEN}, got {len}"
        )));
    }
    let perms = Permutation::all(len);
    let lps: Vec<f64> = perms
        .iter()
        .map(|p| model.logprob_given_order(backbone, seq, p))
        .collect();
    Ok((log_sum_exp(&lps) - (perms.len() as f64).ln()).exp())
}

/// Every sequence of length `len` over `alphabet_size` symbols, in
/// lexicographic order.
pub fn all_sequences(len: usize, alphabet_size: usize) -> Vec<Sequence> {
    let total = alphabet_size.pow(len as u32);
    (0..total)
        .map(|mut code| {
            let mut res = vec![0u8; len];
            for slot in res.iter_mut().rev() {
                *slot = (code % alphabet_size) as u8;
                code /= alphabet_size;
            }
            Sequence(res)
        })
        .collect()
}

/// The full sequence space for one backbone.
#[derive(Debug, Clone)]
pub struct EnumeratedSpace {
    pub backbone: Backbone,
    pub alphabet_size: usize,
    pub sequences: Vec<Sequence>,
}

impl EnumeratedSpace {
    pub fn new(backbone: Backbone, alphabet_size: usize) -> Result<Self> {
        let len = backbone.len();
        let size = (alphabet_size as f64).powi(len as i32);
        if len > MAX_LEN || size > MAX_SPACE as f64 {
            return Err(Error::contract(format!(
                "space A^L = {alphabet_size}^{len} exceeds enumeration limits"
            )));
        }
        Ok(EnumeratedSpace {
            sequences: all_sequences(len, alphabet_size),
            backbone,
            alphabet_size,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Exact order-marginal probability of every sequence.
    pub fn probabilities<M: OrderedLikelihood + ?Sized>(&self, model: &M) -> Result<Vec<f64>> {
        self.sequences
            .par_iter()
            .map(|s| exact_seq_prob(model, &self.backbone, s))
            .collect()
    }

    /// `Σ_k w_k r_k(x, y)` for every sequence, using sign-adjusted scores.
    pub fn aggregate_rewards(&self, suite: &OracleSuite, weights: &[f64]) -> Result<Vec<f64>> {
        if weights.len() != suite.len() {
            return Err(Error::contract(format!(
                "{} weights for {} properties",
                weights.len(),
                suite.len()
            )));
        }
        self.sequences
            .iter()
            .map(|s| {
                (0..suite.len()).try_fold(0.0, |acc, k| {
                    Ok(acc + weights[k] * suite.score_one(k, &self.backbone, s)?)
                })
            })
            .collect()
    }
}

/// Order-independent policy given as an explicit probability table.
#[derive(Debug, Clone)]
pub struct TablePolicy {
    probs: HashMap<Sequence, f64>,
}

impl TablePolicy {
    pub fn new(sequences: &[Sequence], probs: &[f64]) -> Self {
        TablePolicy {
            probs: sequences.iter().cloned().zip(probs.iter().copied()).collect(),
        }
    }
}

impl OrderedLikelihood for TablePolicy {
    fn logprob_given_order(&self, _: &Backbone, seq: &Sequence, _: &Permutation) -> f64 {
        self.probs.get(seq).map_or(f64::NEG_INFINITY, |p| p.ln())
    }
}

/// The KL-regularised optimum `π*` and its normaliser.
#[derive(Debug, Clone)]
pub struct OptimalPolicy {
    pub probs: Vec<f64>,
    pub log_z: f64,
}

impl OptimalPolicy {
    pub fn z(&self) -> f64 {
        self.log_z.exp()
    }
}

/// `π*(y) = π_ref(y) exp(R(y)/β) / Z` with `Z = Σ_y π_ref(y) exp(R(y)/β)`,
/// computed in log space.
pub fn optimal_policy(ref_probs: &[f64], rewards: &[f64], beta: f64) -> Result<OptimalPolicy> {
    if !(beta > 0.0) {
        return Err(Error::contract(format!("beta must be > 0, got {beta}")));
    }
    if ref_probs.len() != rewards.len() {
        return Err(Error::contract("reference table and rewards differ in length"));
    }
    let logits: Vec<f64> = ref_probs
        .iter()
        .zip(rewards)
        .map(|(&p, &r)| p.ln() + r / beta)
        .collect();
    let log_z = log_sum_exp(&logits);
    if !log_z.is_finite() {
        return Err(Error::numerical("optimal_policy", format!("log Z = {log_z}")));
    }
    Ok(OptimalPolicy {
        probs: logits.iter().map(|l| (l - log_z).exp()).collect(),
        log_z,
    })
}

/// `π*` for a neural reference over an enumerated space.
pub fn optimal_policy_for<M: OrderedLikelihood + ?Sized>(
    space: &EnumeratedSpace,
    reference: &M,
    suite: &OracleSuite,
    weights: &[f64],
    beta: f64,
) -> Result<OptimalPolicy> {
    let ref_probs = space.probabilities(reference)?;
    let rewards = space.aggregate_rewards(suite, weights)?;
    optimal_policy(&ref_probs, &rewards, beta)
}

/// Max over sequences of `|R(y) − β log(π(y)/π_ref(y)) − β log Z|`.
pub fn verify_reward_identity(
    policy: &[f64],
    reference: &[f64],
    rewards: &[f64],
    beta: f64,
    log_z: f64,
) -> f64 {
    policy
        .iter()
        .zip(reference)
        .zip(rewards)
        .map(|((&p, &q), &r)| (r - beta * (p.ln() - q.ln()) - beta * log_z).abs())
        .fold(0.0, f64::max)
}

/// `Σ p log(p/q)`. Requires `q > 0` wherever `p > 0`.
pub fn exact_kl(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::contract("KL tables differ in length"));
    }
    let mut total = 0.0;
    for (i, (&a, &b)) in p.iter().zip(q).enumerate() {
        if a > 0.0 {
            if !(b > 0.0) {
                return Err(Error::contract(format!(
                    "KL support violation at entry {i}: p = {a}, q = {b}"
                )));
            }
            total += a * (a / b).ln();
        }
    }
    Ok(total)
}

/// Total variation distance `½ Σ |p − q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}
