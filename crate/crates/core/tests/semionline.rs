use std::fs;
use std::path::Path;

use prefalign::config::ExperimentConfig;
use prefalign::semionline::*;
use prefalign::seqmodel::PolicyModel;
use prefalign::task::{pretrain, Task};

const SMALL: &str = r#"seed = 5
[task]
teacher_seed = 9
pool_size = 6
seq_len = 8
eval_pool_size = 3
[model]
alphabet_size = 6
feature_dim = 3
embed_dim = 4
hidden_dim = 8
[pretrain]
epochs = 10
[run]
iterations = 4
steps_per_iteration = 4
backbones_per_iteration = 4
rollouts_per_backbone = 4
batch_size = 8
[run.optim]
lr = 1e-3
"#;

struct Setup {
    cfg: ExperimentConfig,
    task: Task,
    base: PolicyModel,
}

fn setup(text: &str) -> Setup {
    let cfg = ExperimentConfig::parse(text).unwrap();
    let task = Task::build(&cfg).unwrap();
    let (base, _) = pretrain(&task, &cfg).unwrap();
    Setup { cfg, task, base }
}

fn ctx<'a>(s: &'a Setup, dir: Option<&'a Path>) -> RunContext<'a> {
    RunContext {
        base: &s.base,
        pool: &s.task.pool,
        suite: &s.task.suite,
        eval: &s.task.eval,
        cfg: &s.cfg.run,
        run_dir: dir,
    }
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn records_are_one_per_iteration_with_fresh_pairs() {
    let s = setup(SMALL);
    let out = run(&ctx(&s, None)).unwrap();
    let ts: Vec<usize> = out.records.iter().map(|r| r.t).collect();
    assert_eq!(ts, [1, 2, 3, 4]);
    let cap = s.cfg.run.backbones_per_iteration * s.cfg.run.rollouts_per_backbone / 2;
    for r in &out.records {
        assert_eq!(r.pair_properties, ["designability", "solubility"]);
        assert!(r.pair_counts.iter().all(|&c| c <= cap), "{:?}", r.pair_counts);
        assert!(r.kl.mean.is_finite());
    }
}

#[test]
fn rollouts_come_from_the_current_policy() {
    let s = setup(SMALL);
    let dir = tempfile::tempdir().unwrap();
    run(&ctx(&s, Some(dir.path()))).unwrap();
    let after_one = PolicyModel::load(&checkpoint_dir(dir.path(), 1).join("policy.json")).unwrap();
    let c = ctx(&s, None);
    assert_eq!(generate_pairs(&s.base, &c, 1).unwrap(), generate_pairs(&s.base, &c, 1).unwrap());
    assert_ne!(generate_pairs(&s.base, &c, 2).unwrap(), generate_pairs(&after_one, &c, 2).unwrap());
}

#[test]
fn repeated_runs_are_bit_identical() {
    let s = setup(SMALL);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run(&ctx(&s, Some(a.path()))).unwrap();
    let rb = run(&ctx(&s, Some(b.path()))).unwrap();
    assert_eq!(ra.records, rb.records);
    assert_eq!(ra.model, rb.model);
    assert_eq!(read(&a.path().join(METRICS_FILE)), read(&b.path().join(METRICS_FILE)));
    assert_eq!(read(&a.path().join(EVAL_FILE)), read(&b.path().join(EVAL_FILE)));
    for t in 1..=4 {
        for f in ["policy.json", "state.json"] {
            let (pa, pb) = (checkpoint_dir(a.path(), t).join(f), checkpoint_dir(b.path(), t).join(f));
            assert_eq!(read(&pa), read(&pb), "ckpt_{t}/{f}");
        }
    }
    let mem = run(&ctx(&s, None)).unwrap();
    assert_eq!(mem.records, ra.records);
}

#[test]
fn resume_replays_the_remaining_iterations() {
    let s = setup(SMALL);
    let full = tempfile::tempdir().unwrap();
    let reference = run(&ctx(&s, Some(full.path()))).unwrap();
    for t in [1, 2, 4] {
        let dir = tempfile::tempdir().unwrap();
        run(&ctx(&s, Some(dir.path()))).unwrap();
        // Drop everything after t to mimic an interrupted run.
        for later in t + 1..=4 {
            fs::remove_dir_all(checkpoint_dir(dir.path(), later)).unwrap();
        }
        let resumed = resume(&ctx(&s, Some(dir.path())), t).unwrap();
        assert_eq!(resumed.records, reference.records, "resume from {t}");
        assert_eq!(resumed.model, reference.model);
        assert_eq!(read(&dir.path().join(METRICS_FILE)), read(&full.path().join(METRICS_FILE)));
        let last = checkpoint_dir(dir.path(), 4).join("policy.json");
        assert_eq!(read(&last), read(&checkpoint_dir(full.path(), 4).join("policy.json")));
    }
}

#[test]
fn resume_rejects_missing_checkpoint_and_foreign_arch() {
    let s = setup(SMALL);
    let dir = tempfile::tempdir().unwrap();
    assert!(resume(&ctx(&s, Some(dir.path())), 2).is_err());
    run(&ctx(&s, Some(dir.path()))).unwrap();
    let other = setup(&SMALL.replace("hidden_dim = 8", "hidden_dim = 5"));
    let c = RunContext {
        run_dir: Some(dir.path()),
        ..ctx(&other, None)
    };
    assert!(matches!(resume(&c, 2), Err(prefalign::Error::ArchMismatch { .. })));
}

#[test]
fn metrics_file_parses_back_into_records() {
    let s = setup(SMALL);
    let dir = tempfile::tempdir().unwrap();
    let out = run(&ctx(&s, Some(dir.path()))).unwrap();
    assert_eq!(read_metrics(&dir.path().join(METRICS_FILE)).unwrap(), out.records);
    let table = fs::read_to_string(dir.path().join(EVAL_FILE)).unwrap();
    assert!(table.starts_with("metric\tmean\tstderr\tn\n"));
    assert_eq!(table.lines().count(), 4);
}
