//! Preference losses: standard DPO, flexible-margin multi-objective DPO in
//! both published scalings, the weighted-score baseline, implicit rewards and
//! the Monte-Carlo KL to the reference model.
//!
//! Every pair's log-likelihoods come from the shared-order estimator: the
//! winner is scored under one set of `S` orders and the loser under another,
//! and policy and reference always see the same orders for the same
//! sequence. Orders are derived from `(order_seed, pair index)` so a batch
//! evaluation is reproducible and two losses evaluated with the same seed see
//! identical orders.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{derive_seed, rng_from_seed, sigmoid, softplus, tree_sum_vectors, Objective, ParamVector};
use crate::prefdata::PreferencePair;
use crate::seqmodel::{
    draw_orders, order_average_logprob, order_average_logprob_grad, shared_order_logprob,
    Backbone, BackbonePool, OrderedLikelihood, Permutation, PolicyModel, Sequence,
};

/// Where the property weight enters the multi-objective sigmoid argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalingVariant {
    /// `σ(w_k (βΔ − m_k))`.
    #[default]
    MainText,
    /// `σ((1/w_k)(βΔ − m_k))`.
    Appendix,
}

/// Which preference loss drives alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    #[default]
    Mo,
    Dpo,
    WeightedScore,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlignConfig {
    pub beta: f64,
    pub lambda: f64,
    pub weights: Vec<f64>,
    pub order_samples: usize,
    pub scaling: ScalingVariant,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig::new(Vec::new())
    }
}

impl AlignConfig {
    pub fn new(weights: Vec<f64>) -> Self {
        AlignConfig {
            beta: 0.5,
            lambda: 1.0,
            weights,
            order_samples: 4,
            scaling: ScalingVariant::MainText,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::contract(format!("beta must be > 0, got {}", self.beta)));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::contract(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::contract("property weights must be finite"));
        }
        if self.order_samples == 0 {
            return Err(Error::contract("order_samples must be >= 1"));
        }
        Ok(())
    }
}

/// Per-pair decomposition of the loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairLossBreakdown {
    pub logratio_w: f64,
    pub logratio_l: f64,
    pub margin: f64,
    pub inner: f64,
    pub loss: f64,
}

/// `-log σ(inner)` computed as `softplus(-inner)`.
pub fn pair_loss(inner: f64) -> f64 {
    softplus(-inner)
}

/// Batch loss, gradient with respect to the policy parameters, and
/// diagnostics.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Mean unweighted per-pair loss for each property index; `NaN` where a
    /// property has no pairs in the batch.
    pub per_property: Vec<f64>,
    pub breakdowns: Vec<PairLossBreakdown>,
}

#[derive(Debug, Clone, Copy)]
struct PairCoef {
    inner_scale: f64,
    margin: f64,
    outer_weight: f64,
}

/// Orders used for pair `index`: `(winner orders, loser orders)`.
pub fn pair_orders(order_seed: u64, index: usize, len_w: usize, len_l: usize, samples: usize) -> (Vec<Permutation>, Vec<Permutation>) {
    let w = draw_orders(len_w, samples, &mut rng_from_seed(derive_seed(order_seed, &[index as u64, 0])));
    let l = draw_orders(len_l, samples, &mut rng_from_seed(derive_seed(order_seed, &[index as u64, 1])));
    (w, l)
}

fn lookup<'a>(pool: &'a BackbonePool, pair: &PreferencePair, index: usize) -> Result<&'a Backbone> {
    pool.get(&pair.backbone_id).ok_or_else(|| {
        Error::contract(format!(
            "pair {index} references unknown backbone '{}'",
            pair.backbone_id
        ))
    })
}

#[allow(clippy::too_many_arguments)]
fn evaluate(
    policy: &PolicyModel,
    reference: &PolicyModel,
    pool: &BackbonePool,
    pairs: &[&PreferencePair],
    beta: f64,
    samples: usize,
    order_seed: u64,
    num_properties: usize,
    coef: impl Fn(&PreferencePair) -> Result<PairCoef> + Sync,
    want_grad: bool,
) -> Result<LossOutput> {
    if pairs.is_empty() {
        return Err(Error::contract("loss needs a nonempty batch of pairs"));
    }
    if policy.arch != reference.arch {
        return Err(Error::ArchMismatch {
            expected: reference.arch.to_string(),
            found: policy.arch.to_string(),
        });
    }
    let dim = policy.params.len();
    let n = pairs.len() as f64;
    let parts: Vec<Result<(PairLossBreakdown, f64, Option<Vec<f64>>)>> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, pair)| {
            let bb = lookup(pool, pair, i)?;
            let c = coef(pair)?;
            let (ow, ol) = pair_orders(order_seed, i, pair.winner.len(), pair.loser.len(), samples);
            let mut gw = if want_grad { vec![0.0; dim] } else { Vec::new() };
            let mut gl = if want_grad { vec![0.0; dim] } else { Vec::new() };
            let (pw, pl) = if want_grad {
                (
                    order_average_logprob_grad(policy, bb, &pair.winner, &ow, 1.0, &mut gw),
                    order_average_logprob_grad(policy, bb, &pair.loser, &ol, 1.0, &mut gl),
                )
            } else {
                (
                    order_average_logprob(policy, bb, &pair.winner, &ow),
                    order_average_logprob(policy, bb, &pair.loser, &ol),
                )
            };
            let rw = order_average_logprob(reference, bb, &pair.winner, &ow);
            let rl = order_average_logprob(reference, bb, &pair.loser, &ol);
            let logratio_w = pw - rw;
            let logratio_l = pl - rl;
            if !(logratio_w.is_finite() && logratio_l.is_finite()) {
                return Err(Error::numerical(
                    format!("pair {i}"),
                    format!("non-finite log-ratio ({logratio_w}, {logratio_l})"),
                ));
            }
            let inner = c.inner_scale * (beta * (logratio_w - logratio_l) - c.margin);
            let loss = pair_loss(inner);
            let grad = want_grad.then(|| {
                // d/dinner softplus(-inner) = -σ(-inner)
                let s = -sigmoid(-inner) * c.inner_scale * beta * c.outer_weight / n;
                for (a, b) in gw.iter_mut().zip(&gl) {
                    *a = s * (*a - b);
                }
                gw
            });
            let bd = PairLossBreakdown {
                logratio_w,
                logratio_l,
                margin: c.margin,
                inner,
                loss,
            };
            Ok((bd, c.outer_weight, grad))
        })
        .collect();

    let mut breakdowns = Vec::with_capacity(pairs.len());
    let mut weighted = Vec::with_capacity(pairs.len());
    let mut grads = Vec::new();
    let mut sums = vec![0.0; num_properties];
    let mut counts = vec![0usize; num_properties];
    for (part, pair) in parts.into_iter().zip(pairs) {
        let (bd, ow, g) = part?;
        weighted.push(ow * bd.loss);
        if let Some(slot) = sums.get_mut(pair.property) {
            *slot += bd.loss;
            counts[pair.property] += 1;
        }
        breakdowns.push(bd);
        if let Some(g) = g {
            grads.push(g);
        }
    }
    let value = crate::numerics::pairwise_sum(&weighted) / n;
    let grad = if want_grad {
        tree_sum_vectors(grads, dim)
    } else {
        Vec::new()
    };
    Ok(LossOutput {
        value,
        grad,
        per_property: sums
            .iter()
            .zip(&counts)
            .map(|(&s, &c)| if c > 0 { s / c as f64 } else { f64::NAN })
            .collect(),
        breakdowns,
    })
}

/// Standard DPO: batch mean of `-log σ(β Δ log-ratio)`. Margins and weights
/// are ignored.
pub fn dpo_loss(
    policy: &PolicyModel,
    reference: &PolicyModel,
    pool: &BackbonePool,
    pairs: &[&PreferencePair],
    cfg: &AlignConfig,
    order_seed: u64,
) -> Result<LossOutput> {
    cfg.validate()?;
    let k = cfg.weights.len().max(1);
    evaluate(policy, reference, pool, pairs, cfg.beta, cfg.order_samples, order_seed, k,
        |_| Ok(PairCoef { inner_scale: 1.0, margin: 0.0, outer_weight: 1.0 }), true)
}

fn mo_coef(cfg: &AlignConfig) -> impl Fn(&PreferencePair) -> Result<PairCoef> + Sync + '_ {
    move |pair| {
        let w = *cfg.weights.get(pair.property).ok_or_else(|| {
            Error::contract(format!(
                "pair property {} has no weight ({} configured)",
                pair.property,
                cfg.weights.len()
            ))
        })?;
        let inner_scale = match cfg.scaling {
            ScalingVariant::MainText => w,
            ScalingVariant::Appendix => {
                if w == 0.0 {
                    return Err(Error::contract(format!(
                        "appendix scaling divides by w_{} = 0",
                        pair.property
                    )));
                }
                1.0 / w
            }
        };
        Ok(PairCoef {
            inner_scale,
            margin: pair.margin,
            outer_weight: w,
        })
    }
}

/// Flexible-margin multi-objective DPO on a mixed batch.
///
/// Each pair from `D_k` contributes `w_k · -log σ(c_k (β Δ − m))` where
/// `c_k = w_k` (main-text scaling) or `1/w_k` (appendix scaling); the batch
/// value is the sum over pairs divided by the batch size, the mixed-batch
/// estimate of `Σ_k w_k L_MO(θ; D_k)` under even sampling.
pub fn mo_loss(
    policy: &PolicyModel,
    reference: &PolicyModel,
    pool: &BackbonePool,
    pairs: &[&PreferencePair],
    cfg: &AlignConfig,
    order_seed: u64,
) -> Result<LossOutput> {
    cfg.validate()?;
    evaluate(policy, reference, pool, pairs, cfg.beta, cfg.order_samples, order_seed,
        cfg.weights.len(), mo_coef(cfg), true)
}

/// Weighted-score DPO baseline: standard DPO on pairs ranked by the
/// aggregate score (see `prefdata::build_weighted_pairs`).
pub fn weighted_score_loss(
    policy: &PolicyModel,
    reference: &PolicyModel,
    pool: &BackbonePool,
    pairs: &[&PreferencePair],
    cfg: &AlignConfig,
    order_seed: u64,
) -> Result<LossOutput> {
    dpo_loss(policy, reference, pool, pairs, cfg, order_seed)
}

/// Dispatches on the configured loss kind.
pub fn batch_loss(
    kind: LossKind,
    policy: &PolicyModel,
    reference: &PolicyModel,
    pool: &BackbonePool,
    pairs: &[&PreferencePair],
    cfg: &AlignConfig,
    order_seed: u64,
) -> Result<LossOutput> {
    match kind {
        LossKind::Mo => mo_loss(policy, reference, pool, pairs, cfg, order_seed),
        LossKind::Dpo => dpo_loss(policy, reference, pool, pairs, cfg, order_seed),
        LossKind::WeightedScore => weighted_score_loss(policy, reference, pool, pairs, cfg, order_seed),
    }
}

/// A batch loss viewed as a function of the policy parameters, for
/// gradient checking.
pub struct PairLossObjective<'a> {
    pub kind: LossKind,
    pub template: &'a PolicyModel,
    pub reference: &'a PolicyModel,
    pub pool: &'a BackbonePool,
    pub pairs: Vec<&'a PreferencePair>,
    pub cfg: AlignConfig,
    pub order_seed: u64,
}

impl Objective for PairLossObjective<'_> {
    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, Vec<f64>)> {
        let policy = self.template.with_params(params.clone());
        let out = batch_loss(self.kind, &policy, self.reference, self.pool, &self.pairs, &self.cfg, self.order_seed)?;
        Ok((out.value, out.grad))
    }

    fn value(&self, params: &ParamVector) -> Result<f64> {
        let policy = self.template.with_params(params.clone());
        let (coef_cfg, k) = (&self.cfg, self.cfg.weights.len().max(1));
        let out = match self.kind {
            LossKind::Mo => evaluate(&policy, self.reference, self.pool, &self.pairs, coef_cfg.beta,
                coef_cfg.order_samples, self.order_seed, k, mo_coef(coef_cfg), false)?,
            LossKind::Dpo | LossKind::WeightedScore => evaluate(&policy, self.reference, self.pool,
                &self.pairs, coef_cfg.beta, coef_cfg.order_samples, self.order_seed, k,
                |_| Ok(PairCoef { inner_scale: 1.0, margin: 0.0, outer_weight: 1.0 }), false)?,
        };
        Ok(out.value)
    }
}

/// `β (log p̂_θ(y|x) − log p̂_ref(y|x))` with shared orders.
///
/// This is the aggregate implicit reward up to the per-backbone constant
/// `β log Z(x)`, so only differences between sequences on the same backbone
/// are meaningful.
pub fn implicit_reward<P, R>(
    policy: &P,
    reference: &R,
    backbone: &Backbone,
    seq: &Sequence,
    cfg: &AlignConfig,
    order_seed: u64,
) -> Result<f64>
where
    P: OrderedLikelihood + ?Sized,
    R: OrderedLikelihood + ?Sized,
{
    let est = shared_order_logprob(policy, reference, backbone, seq, cfg.order_samples, &mut rng_from_seed(order_seed))?;
    Ok(cfg.beta * est.log_ratio())
}

/// Monte-Carlo estimate of `KL(π_θ ‖ π_ref)` with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub samples: usize,
}

/// Samples `y ~ π_θ(·|x)` along uniformly random orders at τ = 1 and
/// averages the shared-order log-ratio over all draws and backbones.
pub fn kl_to_reference<R: OrderedLikelihood + ?Sized>(
    policy: &PolicyModel,
    reference: &R,
    backbones: &[Backbone],
    samples_per_backbone: usize,
    order_samples: usize,
    seed: u64,
) -> Result<KlEstimate> {
    if samples_per_backbone == 0 {
        return Err(Error::contract("samples_per_backbone must be >= 1"));
    }
    if backbones.is_empty() {
        return Err(Error::contract("KL estimate needs at least one backbone"));
    }
    let per_bb: Vec<Result<Vec<f64>>> = backbones
        .par_iter()
        .enumerate()
        .map(|(b, bb)| {
            let mut rng = rng_from_seed(derive_seed(seed, &[b as u64]));
            (0..samples_per_backbone)
                .map(|_| {
                    let perm = Permutation::draw(bb.len(), &mut rng);
                    let y = policy.sample(bb, &perm, 1.0, &mut rng)?.sequence;
                    let est = shared_order_logprob(policy, reference, bb, &y, order_samples, &mut rng)?;
                    Ok(est.log_ratio())
                })
                .collect()
        })
        .collect();
    let mut values = Vec::with_capacity(backbones.len() * samples_per_backbone);
    for v in per_bb {
        values.extend(v?);
    }
    let n = values.len() as f64;
    let mean = crate::numerics::pairwise_sum(&values) / n;
    let stderr = if values.len() > 1 {
        let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (var / n).sqrt()
    } else {
        0.0
    };
    Ok(KlEstimate {
        mean,
        stderr,
        samples: values.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, log_sigmoid};
    use crate::seqmodel::Arch;

    fn arch() -> Arch {
        Arch {
            alphabet_size: 4,
            feature_dim: 3,
            embed_dim: 3,
            hidden_dim: 4,
        }
    }

    fn setup() -> (PolicyModel, PolicyModel, BackbonePool, Vec<PreferencePair>) {
        let reference = PolicyModel::new(arch(), 1);
        let mut policy = reference.clone();
        for (i, v) in policy.params.values.iter_mut().enumerate() {
            *v += 0.3 * ((i * 37 % 11) as f64 / 11.0 - 0.5);
        }
        let pool = BackbonePool::random("bb", 2, 4, 3, 7);
        let pairs = vec![
            PreferencePair {
                backbone_id: "bb0000".into(),
                winner: Sequence(vec![0, 1, 2, 3]),
                loser: Sequence(vec![3, 3, 1, 0]),
                property: 0,
                margin: -0.1,
                deltas: vec![1.2, -0.25],
            },
            PreferencePair {
                backbone_id: "bb0001".into(),
                winner: Sequence(vec![2, 2, 1, 0]),
                loser: Sequence(vec![1, 0, 0, 3]),
                property: 1,
                margin: 0.3,
                deltas: vec![0.5, 0.8],
            },
        ];
        (policy, reference, pool, pairs)
    }

    #[test]
    fn equal_models_give_log_two() {
        let (_, reference, pool, pairs) = setup();
        let refs: Vec<&PreferencePair> = pairs.iter().collect();
        let cfg = AlignConfig::new(vec![1.0, 1.0]);
        let out = dpo_loss(&reference, &reference, &pool, &refs, &cfg, 3).unwrap();
        assert!((out.value - 2f64.ln()).abs() < 1e-15);
        for b in &out.breakdowns {
            assert_eq!(b.loss, 2f64.ln());
        }
    }

    #[test]
    fn dpo_matches_hand_chained_computation() {
        let (policy, reference, pool, pairs) = setup();
        let pair = &pairs[0];
        let cfg = AlignConfig {
            order_samples: 3,
            ..AlignConfig::new(vec![1.0, 1.0])
        };
        let out = dpo_loss(&policy, &reference, &pool, &[pair], &cfg, 11).unwrap();
        let bb = pool.get("bb0000").unwrap();
        let (ow, ol) = pair_orders(11, 0, 4, 4, 3);
        let avg = |m: &PolicyModel, s: &Sequence, os: &[Permutation]| {
            (os.iter().map(|o| m.logprob_given_order(bb, s, o).exp()).sum::<f64>() / os.len() as f64).ln()
        };
        let d = avg(&policy, &pair.winner, &ow) - avg(&reference, &pair.winner, &ow)
            - avg(&policy, &pair.loser, &ol)
            + avg(&reference, &pair.loser, &ol);
        let expect = -(1.0 / (1.0 + (-0.5 * d).exp())).ln();
        assert!((out.value - expect).abs() < 1e-12);
    }

    #[test]
    fn loss_vanishes_as_logratio_grows() {
        let mut prev = f64::INFINITY;
        for d in [0.0, 1.0, 5.0, 20.0, 100.0] {
            let l = pair_loss(0.5 * d);
            assert!(l < prev);
            prev = l;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn margin_example_at_zero_logratio() {
        let (_, reference, pool, pairs) = setup();
        let refs: Vec<&PreferencePair> = pairs.iter().collect();
        let cfg = AlignConfig::new(vec![0.6, 0.4]);
        let out = mo_loss(&reference, &reference, &pool, &refs, &cfg, 0).unwrap();
        // Pair 0: property 0, m = -0.1 → -log σ(0.6 · 0.1).
        let l0 = -log_sigmoid(0.6 * 0.1);
        // Pair 1: property 1, m = 0.3 → -log σ(-0.4 · 0.3).
        let l1 = -log_sigmoid(-0.4 * 0.3);
        assert!((out.breakdowns[0].loss - l0).abs() < 1e-10);
        assert!((out.breakdowns[1].loss - l1).abs() < 1e-10);
        assert!((out.value - (0.6 * l0 + 0.4 * l1) / 2.0).abs() < 1e-12);
        assert!(l1 > 2f64.ln());
    }

    #[test]
    fn appendix_rejects_zero_weight() {
        let (policy, reference, pool, pairs) = setup();
        let refs: Vec<&PreferencePair> = pairs.iter().collect();
        let cfg = AlignConfig {
            scaling: ScalingVariant::Appendix,
            ..AlignConfig::new(vec![0.0, 1.0])
        };
        assert!(matches!(
            mo_loss(&policy, &reference, &pool, &refs, &cfg, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn gradients_pass_finite_differences() {
        let (policy, reference, pool, pairs) = setup();
        for kind in [LossKind::Mo, LossKind::Dpo] {
            for scaling in [ScalingVariant::MainText, ScalingVariant::Appendix] {
                let obj = PairLossObjective {
                    kind,
                    template: &policy,
                    reference: &reference,
                    pool: &pool,
                    pairs: pairs.iter().collect(),
                    cfg: AlignConfig {
                        scaling,
                        order_samples: 2,
                        ..AlignConfig::new(vec![0.6, 0.4])
                    },
                    order_seed: 5,
                };
                let r = finite_diff_check(&obj, &policy.params, 1e-5, 1e-4);
                assert!(r.passed, "{kind:?} {scaling:?}: {r:?}");
            }
        }
    }

    #[test]
    fn implicit_reward_zero_for_identical_models() {
        let (_, reference, pool, _) = setup();
        let cfg = AlignConfig::new(vec![1.0]);
        let bb = pool.get("bb0000").unwrap();
        let r = implicit_reward(&reference, &reference, bb, &Sequence(vec![0, 1, 2, 3]), &cfg, 4).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn kl_identical_models_is_zero() {
        let (_, reference, pool, _) = setup();
        let kl = kl_to_reference(&reference, &reference, pool.all(), 5, 3, 1).unwrap();
        assert_eq!(kl.mean, 0.0);
        assert!(kl.mean.abs() <= 3.0 * kl.stderr + 1e-15);
    }
}
