//! The four pipeline commands.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use fairwell::data::{self, SplitPlan, SubjectRecord, SynthConfig};
use fairwell::encoders::{json_hash, Checkpoint};
use fairwell::fairness::{self, FairnessReport, FairnessRow, ParetoRow, PredictionSet};
use fairwell::losses::{self, LossRecord};
use fairwell::training::{self, Model, TrainError};
use fairwell::{Method, Pooling};
use serde_json::Value;

use crate::config::{self, ExperimentConfig};
use crate::error::CliError;
use crate::manifest::{self, with_manifest, OutputLock, RunManifest};
use crate::pipeline::{self, Splits};

pub const CONFIG_FILE: &str = "config.json";
pub const SPLIT_FILE: &str = "split.json";
pub const LOSSES_FILE: &str = "losses.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const PROBE_FILE: &str = "probe.json";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const FAIRNESS_FILE: &str = "fairness.csv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const EVALUATE_MANIFEST_FILE: &str = "evaluate.manifest.json";
pub const PARETO_CSV_FILE: &str = "pareto.csv";
pub const PARETO_SVG_FILE: &str = "pareto.svg";
pub const LOCK_FILE: &str = ".fairwell.lock";

fn say(quiet: bool, msg: impl AsRef<str>) {
    if !quiet {
        eprintln!("{}", msg.as_ref());
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create_file(path: &Path) -> anyhow::Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn prepare_dir(dir: &Path) -> anyhow::Result<OutputLock> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    OutputLock::acquire(dir.join(LOCK_FILE))
}

fn load_data(path: &Path) -> anyhow::Result<Vec<SubjectRecord>> {
    let records = data::load_jsonl(path).with_context(|| format!("loading dataset {}", path.display()))?;
    data::validate_records(&records).with_context(|| format!("validating dataset {}", path.display()))?;
    Ok(records)
}

// ---------------------------------------------------------------------------
// synth

#[derive(Debug, Clone)]
pub struct SynthArgs {
    pub config: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub quiet: bool,
}

/// Subjects per (group, label) cell of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSummary {
    pub n_subjects: usize,
    pub cells: BTreeMap<(String, u8), usize>,
}

impl SynthSummary {
    pub fn of(records: &[SubjectRecord]) -> Self {
        let mut cells = BTreeMap::new();
        for r in records {
            *cells.entry((r.group.clone(), r.label)).or_insert(0) += 1;
        }
        Self { n_subjects: records.len(), cells }
    }

    pub fn render(&self) -> String {
        let n = self.n_subjects.max(1) as f64;
        let mut s = format!("{} subjects\ngroup  label  count  share\n", self.n_subjects);
        for ((g, y), c) in &self.cells {
            s.push_str(&format!("{g:<6} {y:<6} {c:<6} {:.3}\n", *c as f64 / n));
        }
        s
    }
}

pub fn synth(args: &SynthArgs) -> anyhow::Result<SynthSummary> {
    let raw = config::read_config(&args.config, "/seed")?;
    let mut cfg: SynthConfig = config::parse(&raw, "synthetic data")?;
    cfg.seed = config::resolve_seed(args.seed, raw.seed, config::env_seed().as_deref())?;
    cfg.validate()?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let _lock = OutputLock::acquire(with_suffix(&args.out, ".lock"))?;
    let mut m = RunManifest::new("synth");
    m.seed = Some(cfg.seed);
    m.config = serde_json::to_value(&cfg)?;
    m.input(&args.config)?;
    with_manifest(&with_suffix(&args.out, ".manifest.json"), m, |m| {
        let records = data::generate(&cfg)?;
        data::save_jsonl(&args.out, &records)?;
        m.artifact("dataset", &args.out);
        let summary = SynthSummary::of(&records);
        say(args.quiet, format!("wrote {}", args.out.display()));
        Ok(summary)
    })
}

// ---------------------------------------------------------------------------
// pretrain

#[derive(Debug, Clone)]
pub struct PretrainArgs {
    pub config: Option<PathBuf>,
    pub data: PathBuf,
    pub out: PathBuf,
    pub seed: Option<u64>,
    pub method: Option<Method>,
    pub pooling: Option<Pooling>,
    pub quiet: bool,
}

#[derive(Debug, Clone)]
pub struct PretrainSummary {
    pub run_id: String,
    pub config: ExperimentConfig,
    pub steps: usize,
    pub final_epoch_loss: Option<f64>,
}

/// Applies overrides and the seed rule, then validates.
pub fn resolve_experiment(args: &PretrainArgs) -> anyhow::Result<ExperimentConfig> {
    let (mut cfg, config_seed) = match &args.config {
        Some(path) => {
            let raw = config::read_config(path, "/train/seed")?;
            (config::parse::<ExperimentConfig>(&raw, "experiment")?, raw.seed)
        }
        None => (ExperimentConfig::default(), None),
    };
    if let Some(m) = args.method {
        cfg.train.method = m;
    }
    if let Some(p) = args.pooling {
        cfg.train.pooling = p;
    }
    cfg.train.seed = config::resolve_seed(args.seed, config_seed, config::env_seed().as_deref())?;
    cfg.train.validate()?;
    cfg.split.validate()?;
    Ok(cfg)
}

fn write_losses(path: &Path, log: &[LossRecord]) -> anyhow::Result<()> {
    let mut w = create_file(path)?;
    losses::write_loss_csv(&mut w, log)?;
    w.flush()?;
    Ok(())
}

fn save_checkpoint(path: &Path, model: &Model, cfg: &ExperimentConfig) -> anyhow::Result<()> {
    model.to_checkpoint(json_hash(cfg)).save(path)?;
    Ok(())
}

pub fn pretrain(args: &PretrainArgs) -> anyhow::Result<PretrainSummary> {
    let cfg = resolve_experiment(args)?;
    let _lock = prepare_dir(&args.out)?;
    let mut m = RunManifest::new("pretrain");
    m.seed = Some(cfg.train.seed);
    m.config = serde_json::to_value(&cfg)?;
    if let Some(c) = &args.config {
        m.input(c)?;
    }
    m.input(&args.data)?;
    let dir = args.out.clone();
    with_manifest(&dir.join(MANIFEST_FILE), m, |m| {
        let records = load_data(&args.data)?;
        manifest::write_json(&dir.join(CONFIG_FILE), &cfg)?;
        m.artifact("config", &dir.join(CONFIG_FILE));

        let splits = Splits::new(&records, &cfg)?;
        manifest::write_json(&dir.join(SPLIT_FILE), &splits.plan)?;
        m.artifact("split", &dir.join(SPLIT_FILE));

        let run_id = cfg.run_id();
        say(args.quiet, format!("{run_id}: pretraining on {} subjects", splits.train.len()));
        let (model, log) = match pipeline::train_encoders(&splits.train, &cfg) {
            Ok(out) => out,
            Err(TrainError::Diverged { epoch, step, cause, last_good, log }) => {
                write_losses(&dir.join(LOSSES_FILE), &log)?;
                save_checkpoint(&dir.join(CHECKPOINT_FILE), &last_good, &cfg)?;
                m.artifact("losses", &dir.join(LOSSES_FILE));
                m.artifact("checkpoint", &dir.join(CHECKPOINT_FILE));
                return Err(TrainError::Diverged { epoch, step, cause, last_good, log })
                    .context("pretraining aborted; last finite checkpoint retained");
            }
            Err(e) => return Err(e.into()),
        };
        let means = training::epoch_means(&log);
        for (epoch, mean) in &means {
            let method = cfg.train.method.resolve(*epoch);
            say(args.quiet, format!("  epoch {epoch:>3} [{method}] mean loss {mean:.6}"));
        }
        write_losses(&dir.join(LOSSES_FILE), &log)?;
        m.artifact("losses", &dir.join(LOSSES_FILE));
        save_checkpoint(&dir.join(CHECKPOINT_FILE), &model, &cfg)?;
        m.artifact("checkpoint", &dir.join(CHECKPOINT_FILE));
        Ok(PretrainSummary {
            run_id,
            steps: log.len(),
            final_epoch_loss: means.last().map(|e| e.1),
            config: cfg.clone(),
        })
    })
}

// ---------------------------------------------------------------------------
// evaluate

#[derive(Debug, Clone)]
pub struct EvaluateArgs {
    pub run_dir: PathBuf,
    pub data: PathBuf,
    pub quiet: bool,
}

#[derive(Debug, Clone)]
pub struct EvaluateSummary {
    pub run_id: String,
    pub report: FairnessReport,
}

fn read_run_config(dir: &Path) -> anyhow::Result<ExperimentConfig> {
    let path = dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())).into())
}

pub fn evaluate(args: &EvaluateArgs) -> anyhow::Result<EvaluateSummary> {
    let dir = &args.run_dir;
    let ckpt_path = dir.join(CHECKPOINT_FILE);
    if !ckpt_path.is_file() {
        return Err(CliError::Usage(format!("no checkpoint at {}; run `fairwell pretrain` first", ckpt_path.display())).into());
    }
    let cfg = read_run_config(dir)?;
    let _lock = prepare_dir(dir)?;
    let mut m = RunManifest::new("evaluate");
    m.seed = Some(cfg.train.seed);
    m.config = serde_json::to_value(&cfg)?;
    m.input(&args.data)?;
    m.input(&ckpt_path)?;
    m.input(&dir.join(SPLIT_FILE))?;
    with_manifest(&dir.join(EVALUATE_MANIFEST_FILE), m, |m| {
        if let Ok(pre) = RunManifest::load(&dir.join(MANIFEST_FILE)) {
            let now = manifest::file_sha256(&args.data)?;
            if pre.inputs.get(&args.data.display().to_string()).is_some_and(|h| *h != now) {
                say(args.quiet, "warning: dataset changed since pretraining");
            }
        }
        let records = load_data(&args.data)?;
        let plan: SplitPlan = serde_json::from_reader(BufReader::new(
            File::open(dir.join(SPLIT_FILE)).with_context(|| format!("opening {}", dir.join(SPLIT_FILE).display()))?,
        ))?;
        let splits = Splits::from_plan(&records, plan)?;
        let model = Model::from_checkpoint(&Checkpoint::load(&ckpt_path)?)?;
        let eval = pipeline::evaluate_encoders(&model, &splits, &cfg)?;
        manifest::write_json(&dir.join(PROBE_FILE), &eval.probe)?;
        m.artifact("probe", &dir.join(PROBE_FILE));
        let mut w = create_file(&dir.join(PREDICTIONS_FILE))?;
        eval.predictions.write_csv(&mut w)?;
        w.flush()?;
        m.artifact("predictions", &dir.join(PREDICTIONS_FILE));

        let report = eval.report;
        let run_id = cfg.run_id();
        let mut w = create_file(&dir.join(FAIRNESS_FILE))?;
        fairness::write_fairness_csv(&mut w, &[(run_id.clone(), report.clone())])?;
        w.flush()?;
        m.artifact("fairness", &dir.join(FAIRNESS_FILE));
        Ok(EvaluateSummary { run_id, report })
    })
}

/// Reads back a run's predictions.
pub fn read_predictions(dir: &Path) -> anyhow::Result<PredictionSet> {
    let f = File::open(dir.join(PREDICTIONS_FILE)).with_context(|| format!("opening {}", dir.join(PREDICTIONS_FILE).display()))?;
    Ok(PredictionSet::read_csv(BufReader::new(f))?)
}

// ---------------------------------------------------------------------------
// pareto

#[derive(Debug, Clone)]
pub struct ParetoArgs {
    pub run_dirs: Vec<PathBuf>,
    pub out: PathBuf,
    pub quiet: bool,
}

fn read_fairness_rows(dir: &Path) -> anyhow::Result<Option<Vec<FairnessRow>>> {
    let path = dir.join(FAIRNESS_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let rows = fairness::read_fairness_csv(BufReader::new(File::open(&path)?))
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(rows))
}

pub fn pareto(args: &ParetoArgs) -> anyhow::Result<Vec<ParetoRow>> {
    let _lock = prepare_dir(&args.out)?;
    let mut m = RunManifest::new("pareto");
    m.config = Value::from(args.run_dirs.iter().map(|d| d.display().to_string()).collect::<Vec<_>>());
    with_manifest(&args.out.join(MANIFEST_FILE), m, |m| {
        let mut runs = Vec::new();
        for dir in &args.run_dirs {
            match read_fairness_rows(dir)? {
                Some(rows) => {
                    m.input(&dir.join(FAIRNESS_FILE))?;
                    runs.extend(rows.into_iter().map(|r| (r.run_id, r.f1, r.agg_f)));
                }
                None => say(args.quiet, format!("skipping {}: not evaluated", dir.display())),
            }
        }
        if runs.is_empty() {
            return Err(CliError::Usage("no evaluated runs among the given directories".into()).into());
        }
        let rows = fairness::pareto_rows(&runs);
        let mut w = create_file(&args.out.join(PARETO_CSV_FILE))?;
        fairness::write_pareto_csv(&mut w, &rows)?;
        w.flush()?;
        fs::write(args.out.join(PARETO_SVG_FILE), fairness::pareto_svg(&rows))?;
        m.artifact("pareto_csv", &args.out.join(PARETO_CSV_FILE));
        m.artifact("pareto_svg", &args.out.join(PARETO_SVG_FILE));
        Ok(rows)
    })
}
