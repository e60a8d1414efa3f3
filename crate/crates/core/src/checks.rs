//! Self-verification battery: gradient checks for every loss, the DPO
//! reduction identity, the reward/optimal-policy identity on enumerable
//! instances and the shared-order variance comparison.

use rand::Rng as _;

use crate::align::{batch_loss, AlignConfig, LossKind, PairLossObjective, ScalingVariant};
use crate::error::Result;
use crate::exactcheck::{optimal_policy, verify_reward_identity, EnumeratedSpace};
use crate::numerics::{
    derive_seed, finite_diff_check, rng_from_seed, FdReport, Objective, ParamVector, Rng,
};
use crate::prefdata::PreferencePair;
use crate::seqmodel::{
    ce_loss, independent_order_logprob, shared_order_logprob, Arch, BackbonePool, CeExample,
    Permutation, PolicyModel, Sequence,
};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

/// Deliberate defects for exercising the battery itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Gradients reported by the multi-objective loss are scaled by 1.01.
    GradientScale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

pub fn small_arch() -> Arch {
    Arch {
        alphabet_size: 5,
        feature_dim: 3,
        embed_dim: 3,
        hidden_dim: 4,
    }
}

/// Reference model and a policy obtained by perturbing its parameters.
pub fn model_pair(arch: Arch, seed: u64, noise: f64) -> (PolicyModel, PolicyModel) {
    let reference = PolicyModel::new(arch, seed);
    let mut rng = rng_from_seed(derive_seed(seed, &[1]));
    let values = reference
        .params
        .values
        .iter()
        .map(|v| v + noise * (2.0 * rng.random::<f64>() - 1.0))
        .collect();
    let policy = reference.with_params(reference.params.with_values(values));
    (policy, reference)
}

pub fn random_sequence(len: usize, alphabet_size: usize, rng: &mut Rng) -> Sequence {
    Sequence((0..len).map(|_| rng.random_range(0..alphabet_size) as u8).collect())
}

/// `count` pairs on random pool backbones, properties drawn uniformly from
/// `0..num_properties`, margins uniform in `[-1, 1]`.
pub fn random_pairs(
    pool: &BackbonePool,
    alphabet_size: usize,
    num_properties: usize,
    count: usize,
    rng: &mut Rng,
) -> Vec<PreferencePair> {
    (0..count)
        .map(|_| {
            let bb = &pool.all()[rng.random_range(0..pool.len())];
            let winner = random_sequence(bb.len(), alphabet_size, rng);
            let mut loser = random_sequence(bb.len(), alphabet_size, rng);
            while loser == winner {
                loser = random_sequence(bb.len(), alphabet_size, rng);
            }
            PreferencePair {
                backbone_id: bb.id.clone(),
                winner,
                loser,
                property: rng.random_range(0..num_properties),
                margin: 2.0 * rng.random::<f64>() - 1.0,
                deltas: (0..num_properties).map(|_| rng.random::<f64>() - 0.5).collect(),
            }
        })
        .collect()
}

/// Random weights in `[0.2, 1.2)`.
pub fn random_weights(k: usize, rng: &mut Rng) -> Vec<f64> {
    (0..k).map(|_| 0.2 + rng.random::<f64>()).collect()
}

struct Scaled<'a> {
    inner: &'a dyn Objective,
    factor: f64,
}

impl Objective for Scaled<'_> {
    fn value_and_grad(&self, p: &ParamVector) -> Result<(f64, Vec<f64>)> {
        let (v, g) = self.inner.value_and_grad(p)?;
        Ok((v, g.into_iter().map(|x| x * self.factor).collect()))
    }

    fn value(&self, p: &ParamVector) -> Result<f64> {
        self.inner.value(p)
    }
}

/// Teacher-forced cross-entropy gradient check on one random instance.
pub fn ce_gradient_check(seed: u64) -> FdReport {
    let arch = small_arch();
    let model = PolicyModel::new(arch, seed);
    let pool = BackbonePool::random("g", 3, 4, arch.feature_dim, derive_seed(seed, &[2]));
    let mut rng = rng_from_seed(derive_seed(seed, &[3]));
    let data: Vec<(Sequence, Permutation)> = pool
        .all()
        .iter()
        .map(|bb| (random_sequence(bb.len(), arch.alphabet_size, &mut rng), Permutation::draw(bb.len(), &mut rng)))
        .collect();
    let obj = |p: &ParamVector| -> Result<(f64, Vec<f64>)> {
        let m = model.with_params(p.clone());
        let batch: Vec<CeExample<'_>> = pool
            .all()
            .iter()
            .zip(&data)
            .map(|(bb, (s, perm))| CeExample { backbone: bb, seq: s, perm })
            .collect();
        Ok(ce_loss(&m, &batch))
    };
    finite_diff_check(&obj, &model.params, FD_STEP, FD_TOL)
}

/// Preference-loss gradient check on one random instance.
pub fn pair_gradient_check(kind: LossKind, scaling: ScalingVariant, seed: u64, fault: Option<Fault>) -> FdReport {
    let arch = small_arch();
    let (policy, reference) = model_pair(arch, seed, 0.3);
    let pool = BackbonePool::random("g", 3, 4, arch.feature_dim, derive_seed(seed, &[2]));
    let mut rng = rng_from_seed(derive_seed(seed, &[3]));
    let k = if kind == LossKind::WeightedScore { 1 } else { 2 };
    let pairs = random_pairs(&pool, arch.alphabet_size, k, 4, &mut rng);
    let mut cfg = AlignConfig::new(random_weights(k, &mut rng));
    cfg.scaling = scaling;
    cfg.order_samples = 2;
    let obj = PairLossObjective {
        kind,
        template: &policy,
        reference: &reference,
        pool: &pool,
        pairs: pairs.iter().collect(),
        cfg,
        order_seed: derive_seed(seed, &[4]),
    };
    match fault {
        Some(Fault::GradientScale) if kind == LossKind::Mo => {
            let bad = Scaled { inner: &obj, factor: 1.01 };
            finite_diff_check(&bad, &policy.params, FD_STEP, FD_TOL)
        }
        _ => finite_diff_check(&obj, &policy.params, FD_STEP, FD_TOL),
    }
}

/// `|mo_loss(λ = 0, w = 1) − dpo_loss|` on one random batch, for value and
/// gradient (max abs difference).
pub fn reduction_gap(scaling: ScalingVariant, seed: u64) -> Result<f64> {
    let arch = small_arch();
    let (policy, reference) = model_pair(arch, seed, 0.3);
    let pool = BackbonePool::random("r", 4, 5, arch.feature_dim, derive_seed(seed, &[2]));
    let mut rng = rng_from_seed(derive_seed(seed, &[3]));
    let k = rng.random_range(1..4);
    let n = rng.random_range(1..9);
    let mut pairs = random_pairs(&pool, arch.alphabet_size, k, n, &mut rng);
    // Margins computed with λ = 0 vanish.
    for p in &mut pairs {
        p.margin = 0.0;
    }
    let refs: Vec<&PreferencePair> = pairs.iter().collect();
    let mut cfg = AlignConfig::new(vec![1.0; k]);
    cfg.lambda = 0.0;
    cfg.scaling = scaling;
    let order_seed = derive_seed(seed, &[4]);
    let mo = batch_loss(LossKind::Mo, &policy, &reference, &pool, &refs, &cfg, order_seed)?;
    let dpo = batch_loss(LossKind::Dpo, &policy, &reference, &pool, &refs, &cfg, order_seed)?;
    let grad_gap = mo
        .grad
        .iter()
        .zip(&dpo.grad)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok((mo.value - dpo.value).abs().max(grad_gap))
}

/// Max residual of the reward identity on a random enumerable instance with
/// `K = 2` lookup rewards.
pub fn reward_identity_residual(seed: u64, beta: f64) -> Result<f64> {
    let mut rng = rng_from_seed(seed);
    let a = rng.random_range(2..5);
    let len = rng.random_range(1..4);
    let arch = Arch {
        alphabet_size: a,
        feature_dim: 2,
        embed_dim: 2,
        hidden_dim: 3,
    };
    let reference = PolicyModel::new(arch, derive_seed(seed, &[1]));
    let bb = BackbonePool::random("x", 1, len, 2, derive_seed(seed, &[2])).all()[0].clone();
    let space = EnumeratedSpace::new(bb, a)?;
    let q = space.probabilities(&reference)?;
    let weights = random_weights(2, &mut rng);
    let rewards: Vec<f64> = (0..space.len())
        .map(|_| weights.iter().map(|w| w * (4.0 * rng.random::<f64>() - 2.0)).sum())
        .collect();
    let opt = optimal_policy(&q, &rewards, beta)?;
    Ok(verify_reward_identity(&opt.probs, &q, &rewards, beta, opt.log_z))
}

/// Empirical variances `(shared, independent)` of the log-ratio estimate
/// over `reps` repetitions with `S` orders, for one random sequence.
pub fn order_variances(seed: u64, len: usize, samples: usize, reps: usize) -> Result<(f64, f64)> {
    let arch = Arch {
        alphabet_size: 8,
        feature_dim: 3,
        embed_dim: 4,
        hidden_dim: 8,
    };
    let (policy, reference) = model_pair(arch, seed, 0.2);
    let bb = BackbonePool::random("v", 1, len, arch.feature_dim, derive_seed(seed, &[2])).all()[0].clone();
    let seq = random_sequence(len, arch.alphabet_size, &mut rng_from_seed(derive_seed(seed, &[3])));
    let mut shared = Vec::with_capacity(reps);
    let mut indep = Vec::with_capacity(reps);
    let mut rng = rng_from_seed(derive_seed(seed, &[4]));
    for _ in 0..reps {
        shared.push(shared_order_logprob(&policy, &reference, &bb, &seq, samples, &mut rng)?.log_ratio());
        let (p, r) = independent_order_logprob(&policy, &reference, &bb, &seq, samples, &mut rng)?;
        indep.push(p - r);
    }
    Ok((variance(&shared), variance(&indep)))
}

fn variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)
}

fn fd_check(name: &str, reports: Vec<FdReport>) -> CheckResult {
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("at least one instance");
    let failures = reports.iter().filter(|r| !r.passed).count();
    CheckResult {
        name: name.to_string(),
        passed: failures == 0,
        detail: format!(
            "{} instances, {failures} failed, max rel err {:.2e} (slice {})",
            reports.len(),
            worst.max_rel_error,
            worst.worst_slice
        ),
    }
}

fn error_check(name: &str, e: crate::Error) -> CheckResult {
    CheckResult {
        name: name.to_string(),
        passed: false,
        detail: format!("error: {e}"),
    }
}

/// Runs the full battery with `instances` random instances per check.
pub fn run_battery(instances: usize, fault: Option<Fault>) -> Vec<CheckResult> {
    let seeds: Vec<u64> = (0..instances as u64).collect();
    let mut out = vec![fd_check("gradient.ce", seeds.iter().map(|&s| ce_gradient_check(s)).collect())];
    for (name, kind, scaling) in [
        ("gradient.dpo", LossKind::Dpo, ScalingVariant::MainText),
        ("gradient.mo_main_text", LossKind::Mo, ScalingVariant::MainText),
        ("gradient.mo_appendix", LossKind::Mo, ScalingVariant::Appendix),
        ("gradient.weighted_score", LossKind::WeightedScore, ScalingVariant::MainText),
    ] {
        out.push(fd_check(
            name,
            seeds.iter().map(|&s| pair_gradient_check(kind, scaling, s, fault)).collect(),
        ));
    }
    for (name, scaling) in [
        ("reduction.main_text", ScalingVariant::MainText),
        ("reduction.appendix", ScalingVariant::Appendix),
    ] {
        let gaps: Result<Vec<f64>> = seeds.iter().map(|&s| reduction_gap(scaling, s)).collect();
        out.push(match gaps {
            Ok(g) => {
                let worst = g.iter().copied().fold(0.0, f64::max);
                CheckResult {
                    name: name.into(),
                    passed: worst <= 1e-12,
                    detail: format!("max |mo - dpo| {worst:.2e} over {} batches", g.len()),
                }
            }
            Err(e) => error_check(name, e),
        });
    }
    let residuals: Result<Vec<f64>> = seeds
        .iter()
        .flat_map(|&s| [0.1, 0.5, 2.0].map(|b| reward_identity_residual(s, b)))
        .collect();
    out.push(match residuals {
        Ok(r) => {
            let worst = r.iter().copied().fold(0.0, f64::max);
            CheckResult {
                name: "identity.reward".into(),
                passed: worst < 1e-9,
                detail: format!("max residual {worst:.2e} over {} instances", r.len()),
            }
        }
        Err(e) => error_check("identity.reward", e),
    });
    let ratios: Result<Vec<f64>> = seeds
        .iter()
        .map(|&s| order_variances(s, 8, 4, 200).map(|(a, b)| a / b))
        .collect();
    out.push(match ratios {
        Ok(r) => {
            let mean = r.iter().sum::<f64>() / r.len() as f64;
            let below = r.iter().filter(|&&x| x < 1.0).count();
            CheckResult {
                name: "variance.shared_orders".into(),
                passed: mean < 1.0,
                detail: format!(
                    "mean shared/independent variance ratio {mean:.3}; below 1 in {below}/{}",
                    r.len()
                ),
            }
        }
        Err(e) => error_check("variance.shared_orders", e),
    });
    out
}
