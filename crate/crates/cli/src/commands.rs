use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use prefalign::align::{LossKind, ScalingVariant};
use prefalign::checks::{run_battery, CheckResult, Fault};
use prefalign::config::ExperimentConfig;
use prefalign::semionline::{self, evaluate, write_eval_table, RunContext, EVAL_FILE, METRICS_FILE};
use prefalign::seqmodel::PolicyModel;
use prefalign::task::{pretrain, Task};
use prefalign::Error;
use serde::Serialize;

pub const BASE_FILE: &str = "base.json";
pub const PRETRAIN_LOG_FILE: &str = "pretrain_log.jsonl";
pub const FINAL_FILE: &str = "final.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const CHECK_FILE: &str = "checks.json";

#[derive(Debug)]
pub enum CliError {
    Core(Error),
    ChecksFailed(Vec<String>),
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::ChecksFailed(names) => write!(f, "{} check(s) failed: {}", names.len(), names.join(", ")),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    /// 1 for bad input, 2 for numerical trouble or an aborted run, 3 for a
    /// failed check battery.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::Numerical { .. } | Error::Aborted(_)) => 2,
            CliError::Core(_) => 1,
            CliError::ChecksFailed(_) => 3,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub loss: Option<LossKind>,
    pub scaling: Option<ScalingVariant>,
    pub lambda: Option<f64>,
    pub beta: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config: &'a ExperimentConfig,
    seeds: BTreeMap<&'static str, u64>,
    inputs: BTreeMap<&'static str, String>,
    started_at: f64,
    finished_at: Option<f64>,
    outputs: Vec<String>,
}

impl<'a> RunManifest<'a> {
    fn new(command: &'static str, config: &'a ExperimentConfig) -> Self {
        let seeds = BTreeMap::from([("seed", config.seed), ("teacher_seed", config.task.teacher_seed)]);
        RunManifest {
            tool: env!("CARGO_PKG_NAME"),
            version: env!("CARGO_PKG_VERSION"),
            command,
            config,
            seeds,
            inputs: BTreeMap::new(),
            started_at: now(),
            finished_at: None,
            outputs: Vec::new(),
        }
    }

    fn write(&self, out: &Path) -> CliResult<()> {
        let text = serde_json::to_string_pretty(self).map_err(Error::from)?;
        write_file(&out.join(MANIFEST_FILE), &text)
    }

    fn finish(&mut self, out: &Path, outputs: &[&str]) -> CliResult<()> {
        self.finished_at = Some(now());
        self.outputs = outputs.iter().map(|s| s.to_string()).collect();
        self.write(out)
    }
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Core(Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn prepare_out(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| io_err(out, e))
}

fn load_config(path: &Path, ov: &Overrides) -> CliResult<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    let a = &mut cfg.run.align;
    if let Some(l) = ov.loss {
        cfg.run.loss = l;
    }
    if let Some(s) = ov.scaling {
        a.scaling = s;
    }
    if let Some(l) = ov.lambda {
        a.lambda = l;
    }
    if let Some(b) = ov.beta {
        a.beta = b;
    }
    cfg.resolve()?;
    Ok(cfg)
}

fn load_checked(path: &Path, cfg: &ExperimentConfig) -> CliResult<PolicyModel> {
    let model = PolicyModel::load(path)?;
    if model.arch != cfg.model {
        return Err(Error::ArchMismatch {
            expected: format!("{:?}", cfg.model),
            found: format!("{:?}", model.arch),
        }
        .into());
    }
    Ok(model)
}

#[derive(Serialize)]
struct EpochLine {
    epoch: usize,
    loss: f64,
}

pub fn cmd_pretrain(config: &Path, seed: Option<u64>, out: &Path) -> CliResult<()> {
    let cfg = load_config(
        config,
        &Overrides {
            seed,
            ..Overrides::default()
        },
    )?;
    prepare_out(out)?;
    let mut manifest = RunManifest::new("pretrain", &cfg);
    manifest.inputs.insert("config", config.display().to_string());
    manifest.write(out)?;
    write_file(&out.join(RESOLVED_CONFIG_FILE), &cfg.to_toml()?)?;

    let task = Task::build(&cfg)?;
    info!(
        "pretraining on {} backbones x {} labels, L = {}",
        task.pool.len(),
        cfg.task.labels_per_backbone,
        cfg.task.seq_len
    );
    let (model, log) = pretrain(&task, &cfg)?;
    let mut lines = String::new();
    for (epoch, &loss) in log.epoch_losses.iter().enumerate() {
        lines.push_str(&serde_json::to_string(&EpochLine { epoch, loss }).map_err(Error::from)?);
        lines.push('\n');
    }
    write_file(&out.join(PRETRAIN_LOG_FILE), &lines)?;
    model.save(&out.join(BASE_FILE))?;
    if let (Some(first), Some(last)) = (log.epoch_losses.first(), log.epoch_losses.last()) {
        println!("cross-entropy {first:.4} -> {last:.4} over {} epochs", log.epoch_losses.len());
    }
    manifest.finish(out, &[BASE_FILE, PRETRAIN_LOG_FILE, RESOLVED_CONFIG_FILE, MANIFEST_FILE])
}

pub fn cmd_align(config: &Path, ov: &Overrides, base: &Path, out: &Path, resume: Option<usize>) -> CliResult<()> {
    let cfg = load_config(config, ov)?;
    let base_model = load_checked(base, &cfg)?;
    prepare_out(out)?;
    let mut manifest = RunManifest::new("align", &cfg);
    manifest.inputs.insert("config", config.display().to_string());
    manifest.inputs.insert("base", base.display().to_string());
    if let Some(t) = resume {
        manifest.inputs.insert("resume", semionline::checkpoint_dir(out, t).display().to_string());
    }
    manifest.write(out)?;
    write_file(&out.join(RESOLVED_CONFIG_FILE), &cfg.to_toml()?)?;

    let task = Task::build(&cfg)?;
    let ctx = RunContext {
        base: &base_model,
        pool: &task.pool,
        suite: &task.suite,
        eval: &task.eval,
        cfg: &cfg.run,
        run_dir: Some(out),
    };
    info!(
        "aligning with {:?} loss, {} iterations x {} steps",
        cfg.run.loss, cfg.run.iterations, cfg.run.steps_per_iteration
    );
    let outcome = match resume {
        Some(t) => semionline::resume(&ctx, t)?,
        None => semionline::run(&ctx)?,
    };
    outcome.model.save(&out.join(FINAL_FILE))?;
    if let Some(last) = outcome.records.last() {
        for m in last.eval.rows() {
            println!("{}\t{:.4} +/- {:.4}", m.metric, m.mean, m.stderr);
        }
        println!("kl\t{:.4} +/- {:.4}", last.kl.mean, last.kl.stderr);
    }
    manifest.finish(out, &[FINAL_FILE, METRICS_FILE, EVAL_FILE, RESOLVED_CONFIG_FILE, MANIFEST_FILE])
}

pub fn cmd_eval(config: &Path, seed: Option<u64>, checkpoint: &Path, out: &Path) -> CliResult<()> {
    let cfg = load_config(
        config,
        &Overrides {
            seed,
            ..Overrides::default()
        },
    )?;
    let model = load_checked(checkpoint, &cfg)?;
    prepare_out(out)?;
    let task = Task::build(&cfg)?;
    let report = evaluate(
        &model,
        &task.eval,
        &task.suite,
        cfg.run.eval_temperature,
        cfg.run.eval_samples,
        semionline::eval_seed(cfg.seed),
    )?;
    write_eval_table(&out.join(EVAL_FILE), &report)?;
    for m in report.rows() {
        println!("{}\t{:.4} +/- {:.4}\tn={}", m.metric, m.mean, m.stderr, m.n);
    }
    Ok(())
}

#[derive(Serialize)]
struct CheckLine<'a> {
    name: &'a str,
    passed: bool,
    detail: &'a str,
}

pub fn cmd_check(config: Option<&Path>, out: Option<&Path>, instances: usize, fault: Option<Fault>) -> CliResult<()> {
    if let Some(path) = config {
        ExperimentConfig::load(path)?;
    }
    if instances == 0 {
        return Err(Error::Validation(vec!["instances: must be >= 1".into()]).into());
    }
    let results: Vec<CheckResult> = run_battery(instances, fault);
    let width = results.iter().map(|r| r.name.len()).max().unwrap_or(0);
    for r in &results {
        let status = if r.passed { "PASS" } else { "FAIL" };
        println!("{:<width$}  {status}  {}", r.name, r.detail);
    }
    if let Some(dir) = out {
        prepare_out(dir)?;
        let lines: Vec<CheckLine> = results
            .iter()
            .map(|r| CheckLine {
                name: &r.name,
                passed: r.passed,
                detail: &r.detail,
            })
            .collect();
        let text = serde_json::to_string_pretty(&lines).map_err(Error::from)?;
        write_file(&PathBuf::from(dir).join(CHECK_FILE), &text)?;
    }
    let failed: Vec<String> = results.iter().filter(|r| !r.passed).map(|r| r.name.clone()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::ChecksFailed(failed))
    }
}
