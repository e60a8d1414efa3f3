//! Instantiates the synthetic design task described by an
//! [`ExperimentConfig`]: hidden teacher, training and evaluation pools,
//! teacher-labelled pretraining data and the oracle suite.

use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::error::Result;
use crate::numerics::{derive_seed, rng_from_seed};
use crate::oracles::{OracleKind, OracleSuite, PropertySpec};
use crate::semionline::EvalSet;
use crate::seqmodel::{
    train_ce, Alphabet, Backbone, BackbonePool, Permutation, PolicyModel, Sequence, TrainLog,
};

const TAG_TEACHER: u64 = 1;
const TAG_POOL: u64 = 2;
const TAG_EVAL_POOL: u64 = 3;
const TAG_NATIVES: u64 = 4;
const TAG_LABELS: u64 = 5;
const TAG_DESIGNABILITY: u64 = 6;
const TAG_INIT: u64 = 7;
const TAG_CE: u64 = 8;

pub struct Task {
    pub alphabet: Alphabet,
    pub teacher: PolicyModel,
    pub pool: BackbonePool,
    pub eval: EvalSet,
    pub suite: OracleSuite,
}

impl Task {
    /// Everything here depends on `task.teacher_seed` only, so pretraining
    /// and alignment runs with different master seeds share one task.
    pub fn build(cfg: &ExperimentConfig) -> Result<Task> {
        let t = &cfg.task;
        let ts = t.teacher_seed;
        let alphabet = Alphabet::amino_subset(cfg.model.alphabet_size)?;
        let teacher = PolicyModel::teacher(cfg.model, derive_seed(ts, &[TAG_TEACHER]), t.teacher_sharpness);
        let f = cfg.model.feature_dim;
        let pool = BackbonePool::random("bb", t.pool_size, t.seq_len, f, derive_seed(ts, &[TAG_POOL]));
        let eval_pool = BackbonePool::random("eval", t.eval_pool_size, t.seq_len, f, derive_seed(ts, &[TAG_EVAL_POOL]));
        let eval = EvalSet::from_teacher(&teacher, eval_pool.all().to_vec(), derive_seed(ts, &[TAG_NATIVES]))?;
        let defs: Vec<(PropertySpec, OracleKind)> =
            cfg.oracles.iter().map(|o| (o.spec(), o.kind)).collect();
        let suite = OracleSuite::from_kinds(
            &defs,
            &cfg.tables,
            &alphabet,
            Some(&teacher),
            derive_seed(ts, &[TAG_DESIGNABILITY]),
        )?;
        Ok(Task {
            alphabet,
            teacher,
            pool,
            eval,
            suite,
        })
    }

    /// Teacher samples along random orders, `labels_per_backbone` per
    /// training backbone.
    pub fn labelled_data(&self, cfg: &ExperimentConfig) -> Result<Vec<(Backbone, Sequence)>> {
        let t = &cfg.task;
        let per_bb: Vec<Vec<(Backbone, Sequence)>> = self
            .pool
            .all()
            .par_iter()
            .enumerate()
            .map(|(b, bb)| {
                let mut rng = rng_from_seed(derive_seed(t.teacher_seed, &[TAG_LABELS, b as u64]));
                (0..t.labels_per_backbone)
                    .map(|_| {
                        let perm = Permutation::draw(bb.len(), &mut rng);
                        let s = self.teacher.sample(bb, &perm, t.label_temperature, &mut rng)?;
                        Ok((bb.clone(), s.sequence))
                    })
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(per_bb.into_iter().flatten().collect())
    }
}

/// Fresh model initialised from the master seed and trained on the
/// teacher-labelled data.
pub fn pretrain(task: &Task, cfg: &ExperimentConfig) -> Result<(PolicyModel, TrainLog)> {
    let data = task.labelled_data(cfg)?;
    let mut model = PolicyModel::new(cfg.model, derive_seed(cfg.seed, &[TAG_INIT]));
    let log = train_ce(&mut model, &data, &cfg.pretrain, &mut rng_from_seed(derive_seed(cfg.seed, &[TAG_CE])))?;
    Ok((model, log))
}
