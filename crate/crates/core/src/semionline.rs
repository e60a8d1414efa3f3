//! Semi-online alignment: alternate rollout generation with the current
//! policy, oracle annotation, pair construction and a fixed number of
//! optimiser steps on the freshly built pairs.
//!
//! Every random choice is derived from `RunConfig::seed` and the iteration
//! index, so a run resumed from `ckpt_<t>` replays iterations `t+1..T`
//! bit-identically.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::align::{batch_loss, kl_to_reference, AlignConfig, KlEstimate, LossKind};
use crate::error::{Error, Result};
use crate::numerics::{derive_seed, rng_from_seed, AdamState};
use crate::oracles::{OracleSuite, Threshold};
use crate::prefdata::{
    build_pairs, build_weighted_pairs, EvenSampler, Normalization, PairDatasetGroup, RolloutBatch,
};
use crate::seqmodel::{Backbone, BackbonePool, Permutation, PolicyModel, Sequence};

/// Consecutive zero-pair iterations tolerated before a run aborts.
pub const MAX_ZERO_PAIR_STREAK: usize = 3;

/// Temperature used for greedy decoding (below the sampler's greedy cutoff).
pub const GREEDY_TEMPERATURE: f64 = 1e-9;

const TAG_BACKBONES: u64 = 1;
const TAG_ROLLOUT: u64 = 2;
const TAG_SAMPLER: u64 = 3;
const TAG_ORDERS: u64 = 4;
const TAG_EVAL: u64 = 5;
const TAG_KL: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig {
            lr: 5e-6,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub iterations: usize,
    pub steps_per_iteration: usize,
    pub backbones_per_iteration: usize,
    pub rollouts_per_backbone: usize,
    pub rollout_temperature: f64,
    pub eval_temperature: f64,
    pub batch_size: usize,
    pub loss: LossKind,
    pub normalization: Normalization,
    /// Pair threshold on the aggregate score for the weighted-score baseline.
    pub weighted_threshold: Threshold,
    pub eval_samples: usize,
    pub kl_samples: usize,
    /// Set from the experiment's master seed.
    #[serde(skip)]
    pub seed: u64,
    pub align: AlignConfig,
    pub optim: OptimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            iterations: 20,
            steps_per_iteration: 600,
            backbones_per_iteration: 16,
            rollouts_per_backbone: 8,
            rollout_temperature: 1.0,
            eval_temperature: 0.1,
            batch_size: 64,
            loss: LossKind::Mo,
            normalization: Normalization::Zscore,
            weighted_threshold: Threshold::default(),
            eval_samples: 4,
            kl_samples: 4,
            seed: 0,
            align: AlignConfig::new(Vec::new()),
            optim: OptimConfig::default(),
        }
    }
}

impl RunConfig {
    /// Every violated constraint, one message per field.
    pub fn problems(&self) -> Vec<String> {
        let mut bad = Vec::new();
        if self.iterations == 0 {
            bad.push("iterations: must be >= 1".to_string());
        }
        if self.backbones_per_iteration == 0 {
            bad.push("backbones_per_iteration: must be >= 1".to_string());
        }
        let n = self.rollouts_per_backbone;
        if n < 2 || n % 2 != 0 {
            bad.push(format!("rollouts_per_backbone: must be even and >= 2, got {n}"));
        }
        for (name, v) in [
            ("rollout_temperature", self.rollout_temperature),
            ("eval_temperature", self.eval_temperature),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                bad.push(format!("{name}: must be > 0, got {v}"));
            }
        }
        if self.batch_size == 0 {
            bad.push("batch_size: must be >= 1".to_string());
        }
        if self.eval_samples == 0 {
            bad.push("eval_samples: must be >= 1".to_string());
        }
        if self.kl_samples == 0 {
            bad.push("kl_samples: must be >= 1".to_string());
        }
        let o = &self.optim;
        if !(o.lr > 0.0) || !o.lr.is_finite() {
            bad.push(format!("optim.lr: must be > 0, got {}", o.lr));
        }
        if !(0.0..1.0).contains(&o.beta1) {
            bad.push(format!("optim.beta1: must lie in [0, 1), got {}", o.beta1));
        }
        if !(0.0..1.0).contains(&o.beta2) {
            bad.push(format!("optim.beta2: must lie in [0, 1), got {}", o.beta2));
        }
        if !(o.eps > 0.0) {
            bad.push(format!("optim.eps: must be > 0, got {}", o.eps));
        }
        if let Err(e) = self.align.validate() {
            bad.push(format!("align: {e}"));
        }
        bad
    }

    pub fn validate(&self) -> Result<()> {
        let bad = self.problems();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }
}

/// Mean, spread and sample count of one metric.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub stderr: f64,
    pub n: usize,
}

impl MetricSummary {
    pub fn from_values(metric: impl Into<String>, values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        MetricSummary {
            metric: metric.into(),
            mean,
            sd: var.sqrt(),
            stderr: (var / n.max(1) as f64).sqrt(),
            n,
        }
    }
}

/// Per-property score summaries and amino-acid recovery of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub properties: Vec<MetricSummary>,
    pub aar: MetricSummary,
}

impl EvalReport {
    pub fn rows(&self) -> impl Iterator<Item = &MetricSummary> {
        self.properties.iter().chain(std::iter::once(&self.aar))
    }

    pub fn property(&self, name: &str) -> Option<&MetricSummary> {
        self.properties.iter().find(|m| m.metric == name)
    }
}

/// Held-out backbones with the hidden teacher's greedy sequence for each.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub backbones: Vec<Backbone>,
    pub natives: Vec<Sequence>,
}

/// Decoding order for sample `s` on eval backbone `b`.
pub fn eval_order(seed: u64, b: usize, s: usize, len: usize) -> Permutation {
    Permutation::random(len, derive_seed(seed, &[b as u64, s as u64, 0]))
}

impl EvalSet {
    /// Natives are decoded greedily by `teacher` along `eval_order(seed, b, 0)`.
    pub fn from_teacher(teacher: &PolicyModel, backbones: Vec<Backbone>, seed: u64) -> Result<Self> {
        let natives = backbones
            .par_iter()
            .enumerate()
            .map(|(b, bb)| {
                let perm = eval_order(seed, b, 0, bb.len());
                let mut rng = rng_from_seed(derive_seed(seed, &[b as u64, 0, 1]));
                Ok(teacher.sample(bb, &perm, GREEDY_TEMPERATURE, &mut rng)?.sequence)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalSet { backbones, natives })
    }

    pub fn len(&self) -> usize {
        self.backbones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.backbones.is_empty()
    }
}

fn recovery(a: &Sequence, b: &Sequence) -> f64 {
    let hits = a.0.iter().zip(&b.0).filter(|(x, y)| x == y).count();
    hits as f64 / a.len().max(1) as f64
}

/// Samples `samples_per_backbone` sequences per eval backbone at
/// `temperature`, scores them with the suite (sign-adjusted, so larger is
/// better) and measures recovery against the natives.
pub fn evaluate(
    model: &PolicyModel,
    eval: &EvalSet,
    suite: &OracleSuite,
    temperature: f64,
    samples_per_backbone: usize,
    seed: u64,
) -> Result<EvalReport> {
    if samples_per_backbone == 0 {
        return Err(Error::contract("samples_per_backbone must be >= 1"));
    }
    if eval.is_empty() {
        return Err(Error::contract("evaluation needs at least one backbone"));
    }
    let per_bb: Vec<(Vec<Vec<f64>>, Vec<f64>)> = eval
        .backbones
        .par_iter()
        .enumerate()
        .map(|(b, bb)| {
            let mut seqs = Vec::with_capacity(samples_per_backbone);
            for s in 0..samples_per_backbone {
                let perm = eval_order(seed, b, s, bb.len());
                let mut rng = rng_from_seed(derive_seed(seed, &[b as u64, s as u64, 1]));
                seqs.push(model.sample(bb, &perm, temperature, &mut rng)?.sequence);
            }
            let scores = suite.score_all(bb, &seqs)?;
            let aar = seqs.iter().map(|s| recovery(s, &eval.natives[b])).collect();
            Ok((scores, aar))
        })
        .collect::<Result<_>>()?;
    let names = suite.names();
    let properties = names
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let vals: Vec<f64> = per_bb.iter().flat_map(|(sc, _)| sc[k].iter().copied()).collect();
            MetricSummary::from_values(name.clone(), &vals)
        })
        .collect();
    let aar: Vec<f64> = per_bb.iter().flat_map(|(_, a)| a.iter().copied()).collect();
    Ok(EvalReport {
        properties,
        aar: MetricSummary::from_values("aar", &aar),
    })
}

/// Writes the evaluation as a tab-separated table with columns
/// `metric, mean, stderr, n`.
pub fn write_eval_table(path: &Path, report: &EvalReport) -> Result<()> {
    let mut text = String::from("metric\tmean\tstderr\tn\n");
    for m in report.rows() {
        text.push_str(&format!("{}\t{}\t{}\t{}\n", m.metric, m.mean, m.stderr, m.n));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub eval: EvalReport,
    pub kl: KlEstimate,
    pub pair_properties: Vec<String>,
    pub pair_counts: Vec<usize>,
    /// Mean training loss over the iteration; absent when training was skipped.
    pub mean_loss: Option<f64>,
    pub skipped: bool,
}

/// Indices of the pool backbones used at iteration `t` (1-based).
///
/// Draws without replacement from a shuffled epoch of the pool, reshuffling
/// on exhaustion; a backbone already drawn in the current iteration is
/// deferred to the next one so each iteration's set is distinct.
pub fn backbone_schedule(pool_len: usize, per_iteration: usize, seed: u64, t: usize) -> Result<Vec<usize>> {
    if per_iteration > pool_len {
        return Err(Error::contract(format!(
            "{per_iteration} backbones per iteration exceeds pool size {pool_len}"
        )));
    }
    let mut epoch = 0u64;
    let mut queue: Vec<usize> = Vec::new();
    let mut deferred: Vec<usize> = Vec::new();
    let mut chosen = Vec::new();
    for _ in 1..=t {
        chosen.clear();
        let mut carry = std::mem::take(&mut deferred);
        carry.reverse();
        queue.extend(carry);
        while chosen.len() < per_iteration {
            let next = match queue.pop() {
                Some(i) => i,
                None => {
                    let mut order: Vec<usize> = (0..pool_len).collect();
                    order.shuffle(&mut rng_from_seed(derive_seed(seed, &[TAG_BACKBONES, epoch])));
                    epoch += 1;
                    order.reverse();
                    queue = order;
                    continue;
                }
            };
            if chosen.contains(&next) {
                deferred.push(next);
            } else {
                chosen.push(next);
            }
        }
    }
    Ok(chosen)
}

/// Everything a run reads but never mutates.
pub struct RunContext<'a> {
    pub base: &'a PolicyModel,
    pub pool: &'a BackbonePool,
    pub suite: &'a OracleSuite,
    pub eval: &'a EvalSet,
    pub cfg: &'a RunConfig,
    /// Where checkpoints, metrics and the eval table go; `None` keeps the
    /// run in memory.
    pub run_dir: Option<&'a Path>,
}

pub struct RunOutcome {
    pub model: PolicyModel,
    pub records: Vec<IterationRecord>,
}

#[derive(Serialize, Deserialize)]
struct DriverState {
    t: usize,
    zero_streak: usize,
    adam: AdamState,
}

/// Seed of the per-iteration evaluation for a run seeded with `seed`. The
/// same seed is used at every iteration so records are directly comparable.
pub fn eval_seed(seed: u64) -> u64 {
    derive_seed(seed, &[TAG_EVAL])
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TIMINGS_FILE: &str = "timings.jsonl";
pub const EVAL_FILE: &str = "eval.tsv";

pub fn checkpoint_dir(run_dir: &Path, t: usize) -> PathBuf {
    run_dir.join(format!("ckpt_{t}"))
}

/// Rollouts and pairs for one iteration.
pub fn generate_pairs(
    policy: &PolicyModel,
    ctx: &RunContext<'_>,
    t: usize,
) -> Result<PairDatasetGroup> {
    let cfg = ctx.cfg;
    let picks = backbone_schedule(ctx.pool.len(), cfg.backbones_per_iteration, cfg.seed, t)?;
    let groups: Vec<PairDatasetGroup> = picks
        .par_iter()
        .enumerate()
        .map(|(j, &idx)| {
            let bb = &ctx.pool.all()[idx];
            let mut rng = rng_from_seed(derive_seed(cfg.seed, &[TAG_ROLLOUT, t as u64, j as u64]));
            let sequences = (0..cfg.rollouts_per_backbone)
                .map(|_| {
                    let perm = Permutation::draw(bb.len(), &mut rng);
                    Ok(policy.sample(bb, &perm, cfg.rollout_temperature, &mut rng)?.sequence)
                })
                .collect::<Result<Vec<_>>>()?;
            let batch = RolloutBatch {
                backbone_id: bb.id.clone(),
                scores: ctx.suite.score_all(bb, &sequences)?,
                sequences,
                iteration: t,
            };
            match cfg.loss {
                LossKind::WeightedScore => build_weighted_pairs(
                    &batch,
                    ctx.suite.specs(),
                    cfg.weighted_threshold,
                    cfg.normalization,
                ),
                LossKind::Mo | LossKind::Dpo => {
                    build_pairs(&batch, ctx.suite, cfg.align.lambda, cfg.normalization)
                }
            }
        })
        .collect::<Result<_>>()?;
    let mut iter = groups.into_iter();
    let mut group = iter.next().expect("at least one backbone per iteration");
    for g in iter {
        group.extend(g)?;
    }
    Ok(group)
}

/// Runs iterations `1..=T` from the base model.
pub fn run(ctx: &RunContext<'_>) -> Result<RunOutcome> {
    ctx.cfg.validate()?;
    let adam = AdamState::new(
        ctx.base.params.len(),
        ctx.cfg.optim.lr,
        ctx.cfg.optim.beta1,
        ctx.cfg.optim.beta2,
        ctx.cfg.optim.eps,
    )?;
    if let Some(dir) = ctx.run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for name in [METRICS_FILE, TIMINGS_FILE] {
            let p = dir.join(name);
            fs::write(&p, "").map_err(|e| Error::io(&p, e))?;
        }
    }
    drive(ctx, ctx.base.clone(), adam, 0, 0, Vec::new())
}

/// Continues a run from `run_dir/ckpt_<t>`, replaying iterations `t+1..=T`.
/// Records after `t` in the metrics log are discarded first.
pub fn resume(ctx: &RunContext<'_>, t: usize) -> Result<RunOutcome> {
    ctx.cfg.validate()?;
    let dir = ctx
        .run_dir
        .ok_or_else(|| Error::contract("resume needs a run directory"))?;
    let ckpt = checkpoint_dir(dir, t);
    let policy = PolicyModel::load(&ckpt.join("policy.json"))?;
    if policy.arch != ctx.base.arch {
        return Err(Error::ArchMismatch {
            expected: ctx.base.arch.to_string(),
            found: policy.arch.to_string(),
        });
    }
    let state_path = ckpt.join("state.json");
    let text = fs::read_to_string(&state_path).map_err(|e| Error::io(&state_path, e))?;
    let state: DriverState = serde_json::from_str(&text)?;
    let records = read_metrics(&dir.join(METRICS_FILE))?
        .into_iter()
        .filter(|r| r.t <= state.t)
        .collect::<Vec<_>>();
    rewrite_lines(&dir.join(METRICS_FILE), &records)?;
    let timings = read_lines::<serde_json::Value>(&dir.join(TIMINGS_FILE)).unwrap_or_default();
    let kept: Vec<_> = timings
        .into_iter()
        .filter(|v| v.get("t").and_then(|x| x.as_u64()).is_some_and(|x| x as usize <= state.t))
        .collect();
    rewrite_lines(&dir.join(TIMINGS_FILE), &kept)?;
    drive(ctx, policy, state.adam, state.t, state.zero_streak, records)
}

fn drive(
    ctx: &RunContext<'_>,
    mut policy: PolicyModel,
    mut adam: AdamState,
    start: usize,
    mut zero_streak: usize,
    mut records: Vec<IterationRecord>,
) -> Result<RunOutcome> {
    let cfg = ctx.cfg;
    let eval_seed = eval_seed(cfg.seed);
    for t in start + 1..=cfg.iterations {
        let clock = Instant::now();
        let group = generate_pairs(&policy, ctx, t)?;
        let counts = group.counts();
        let skipped = group.total() == 0;
        let mut mean_loss = None;
        if skipped {
            zero_streak += 1;
            warn!("iteration {t}: no preference pairs passed the thresholds; skipping training");
        } else {
            zero_streak = 0;
            let groups = [group];
            let mut sampler =
                EvenSampler::new(&groups, cfg.batch_size, derive_seed(cfg.seed, &[TAG_SAMPLER, t as u64]))?;
            let mut total = 0.0;
            for step in 0..cfg.steps_per_iteration {
                let batch = sampler.next_batch();
                let out = batch_loss(
                    cfg.loss,
                    &policy,
                    ctx.base,
                    ctx.pool,
                    &batch,
                    &cfg.align,
                    derive_seed(cfg.seed, &[TAG_ORDERS, t as u64, step as u64]),
                )?;
                if !out.value.is_finite() {
                    return Err(Error::numerical(
                        format!("iteration {t}, step {step}"),
                        format!("loss became {}", out.value),
                    ));
                }
                adam.step(&mut policy.params, &out.grad)?;
                total += out.value;
            }
            if cfg.steps_per_iteration > 0 {
                mean_loss = Some(total / cfg.steps_per_iteration as f64);
            }
        }
        let eval = evaluate(&policy, ctx.eval, ctx.suite, cfg.eval_temperature, cfg.eval_samples, eval_seed)?;
        let kl = kl_to_reference(
            &policy,
            ctx.base,
            &ctx.eval.backbones,
            cfg.kl_samples,
            cfg.align.order_samples,
            derive_seed(cfg.seed, &[TAG_KL, t as u64]),
        )?;
        let record = IterationRecord {
            t,
            eval,
            kl,
            pair_properties: match cfg.loss {
                LossKind::WeightedScore => vec![crate::prefdata::WEIGHTED_SCORE.to_string()],
                _ => ctx.suite.names(),
            },
            pair_counts: counts,
            mean_loss,
            skipped,
        };
        info!(
            "iteration {t}: pairs {:?}, loss {:?}, kl {:.4}",
            record.pair_counts, record.mean_loss, record.kl.mean
        );
        if let Some(dir) = ctx.run_dir {
            append_line(&dir.join(METRICS_FILE), &record)?;
            append_line(
                &dir.join(TIMINGS_FILE),
                &serde_json::json!({ "t": t, "wall_seconds": clock.elapsed().as_secs_f64() }),
            )?;
            let ckpt = checkpoint_dir(dir, t);
            fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
            policy.save(&ckpt.join("policy.json"))?;
            let state = DriverState {
                t,
                zero_streak,
                adam: adam.clone(),
            };
            let p = ckpt.join("state.json");
            fs::write(&p, serde_json::to_string(&state)?).map_err(|e| Error::io(&p, e))?;
        }
        records.push(record);
        if zero_streak >= MAX_ZERO_PAIR_STREAK {
            return Err(Error::Aborted(format!(
                "{zero_streak} consecutive iterations (ending at t = {t}) produced no preference \
                 pairs; loosen the pair thresholds or raise the rollout temperature"
            )));
        }
    }
    if let (Some(dir), Some(last)) = (ctx.run_dir, records.last()) {
        write_eval_table(&dir.join(EVAL_FILE), &last.eval)?;
    }
    Ok(RunOutcome { model: policy, records })
}

fn append_line<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = fs::OpenOptions::new()
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    writeln!(f, "{}", serde_json::to_string(value)?).map_err(|e| Error::io(path, e))
}

fn rewrite_lines<T: Serialize>(path: &Path, values: &[T]) -> Result<()> {
    let mut text = String::new();
    for v in values {
        text.push_str(&serde_json::to_string(v)?);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_lines<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })
        })
        .collect()
}

/// Parses a metrics log written by [`run`].
pub fn read_metrics(path: &Path) -> Result<Vec<IterationRecord>> {
    read_lines(path)
}
