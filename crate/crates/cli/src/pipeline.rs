//! In-process experiment stages shared by the commands.

use std::collections::BTreeSet;

use fairwell::data::{self, Split, SplitPlan, SubjectRecord};
use fairwell::fairness::{self, FairnessReport, PredictionSet};
use fairwell::losses::LossRecord;
use fairwell::training::{self, Model, Probe};
use fairwell::seed;

use crate::config::ExperimentConfig;
use crate::error::CliError;

#[derive(Debug, Clone)]
pub struct Splits {
    pub plan: SplitPlan,
    pub train: Vec<SubjectRecord>,
    pub val: Vec<SubjectRecord>,
    pub test: Vec<SubjectRecord>,
}

impl Splits {
    /// Stratified split keyed by the run seed.
    pub fn new(records: &[SubjectRecord], cfg: &ExperimentConfig) -> anyhow::Result<Self> {
        let plan = data::split_subjects(records, cfg.split, cfg.train.seed)?;
        Self::from_plan(records, plan)
    }

    /// Re-selects a stored plan, failing if any listed subject is absent.
    pub fn from_plan(records: &[SubjectRecord], plan: SplitPlan) -> anyhow::Result<Self> {
        let pick = |split: Split| -> anyhow::Result<Vec<SubjectRecord>> {
            let chosen: Vec<SubjectRecord> = plan.select(records, split).into_iter().cloned().collect();
            let want = plan.ids(split).len();
            if chosen.len() != want {
                return Err(CliError::Precondition(format!(
                    "dataset is missing {} of the {want} subjects in the {split:?} split; use the data the run was pretrained on",
                    want - chosen.len()
                ))
                .into());
            }
            Ok(chosen)
        };
        Ok(Self { train: pick(Split::Train)?, val: pick(Split::Val)?, test: pick(Split::Test)?, plan })
    }
}

/// Pretraining followed by the optional supervised fine-tune.
pub fn train_encoders(train: &[SubjectRecord], cfg: &ExperimentConfig) -> Result<(Model, Vec<LossRecord>), training::TrainError> {
    let pre = training::pretrain(train, &cfg.train)?;
    let model = if cfg.train.finetune.enabled { training::fine_tune(pre.model, train, &cfg.train)? } else { pre.model };
    Ok((model, pre.log))
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub probe: Probe,
    pub predictions: PredictionSet,
    pub report: FairnessReport,
}

/// Probe on frozen encoders, then performance and fairness on the test split.
pub fn evaluate_encoders(model: &Model, splits: &Splits, cfg: &ExperimentConfig) -> anyhow::Result<Evaluation> {
    let groups: BTreeSet<&str> = splits.test.iter().map(|r| r.group.as_str()).collect();
    if groups.len() != 2 {
        return Err(CliError::Precondition(format!(
            "fairness ratios compare two groups, but the test split contains {groups:?}"
        ))
        .into());
    }
    let probe = training::fit_probe(model, &splits.train, &splits.val, &cfg.train.probe, seed::derive(cfg.train.seed, "probe"))?;
    let predictions = training::predict(model, &probe, &splits.test)?;
    let report = fairness::evaluate(&predictions, cfg.numerator_group.as_deref())?;
    Ok(Evaluation { probe, predictions, report })
}

/// Split, pretrain and evaluate in one go.
pub fn run_experiment(records: &[SubjectRecord], cfg: &ExperimentConfig) -> anyhow::Result<(Model, Vec<LossRecord>, Evaluation)> {
    let splits = Splits::new(records, cfg)?;
    let (model, log) = train_encoders(&splits.train, cfg)?;
    let eval = evaluate_encoders(&model, &splits, cfg)?;
    Ok((model, log, eval))
}
