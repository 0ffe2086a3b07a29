//! Vanilla, noise and retrieval-augmented training of the toy model over
//! several seeds, with heldout evaluation and coverage metrics.

use std::io::Write;

use raf_core::bank::ExpressionBank;
use raf_core::coverage::{coverage_report, CoverageConfig, CoverageReport, SampleSet};
use raf_core::retrieval::{Index, SubstituteMode};
use raf_core::toy::{
    evaluate_heldout, init_state, make_experiment_split, train_toy, EvalResult, ExperimentConfig, ExperimentSplit,
    PlanSource, ToyError, ToyFrame, ToyParams, TrainConfig, TrainOutcome,
};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub seeds: Vec<u64>,
    pub experiment: ExperimentConfig,
    pub params: ToyParams,
    pub train: TrainConfig,
    pub p: f64,
    pub noise_sigma: f64,
    pub coverage: CoverageConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            experiment: ExperimentConfig::default(),
            params: ToyParams::default(),
            train: TrainConfig::default(),
            p: 0.5,
            noise_sigma: 0.08,
            coverage: CoverageConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Vanilla,
    Noise,
    RafTop1,
    RafTop5,
    RafHalfBank,
}

impl Condition {
    pub const ALL: [Condition; 5] =
        [Condition::Vanilla, Condition::Noise, Condition::RafTop1, Condition::RafTop5, Condition::RafHalfBank];

    pub fn name(self) -> &'static str {
        match self {
            Condition::Vanilla => "vanilla",
            Condition::Noise => "noise",
            Condition::RafTop1 => "raf_top1",
            Condition::RafTop5 => "raf_top5",
            Condition::RafHalfBank => "raf_half_bank",
        }
    }

    fn uses_half_bank(self) -> bool {
        self == Condition::RafHalfBank
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub condition: Condition,
    pub seed: u64,
    pub heldout_point_rmse: f64,
    pub heldout_image_loss: f64,
    pub first_train_loss: f64,
    pub last_train_loss: f64,
    /// Coverage of the bank this condition retrieves from (the full bank
    /// for conditions that do not retrieve).
    pub coverage: (CoverageReport, CoverageReport),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub config: SuiteConfig,
    pub runs: Vec<RunResult>,
}

impl SuiteResult {
    pub fn runs_of(&self, c: Condition) -> impl Iterator<Item = &RunResult> {
        self.runs.iter().filter(move |r| r.condition == c)
    }

    pub fn get(&self, c: Condition, seed: u64) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.condition == c && r.seed == seed)
    }

    pub fn mean_rmse(&self, c: Condition) -> f64 {
        let v: Vec<f64> = self.runs_of(c).map(|r| r.heldout_point_rmse).collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Keeps the first half (rounded up) of the bank's identities in order of
/// first appearance.
pub fn half_bank(bank: &ExpressionBank) -> ExpressionBank {
    let ids: Vec<String> = bank.identities().into_iter().map(str::to_owned).collect();
    let keep = &ids[..ids.len().div_ceil(2)];
    bank.filter_identities(|id| keep.iter().any(|k| k == id))
}

/// Fresh initialization, training on the split's train frames and heldout
/// evaluation.
pub fn train_and_eval(
    split: &ExperimentSplit,
    params: &ToyParams,
    train: &TrainConfig,
    source: PlanSource,
) -> Result<(TrainOutcome, EvalResult), ToyError> {
    let d_e = split.world.d_e();
    let state = init_state(params, d_e, &split.train, train.seed)?;
    let outcome = train_toy(state, params, &split.train, source, train)?;
    let eval = evaluate_heldout(&outcome.state, params, &split.heldout, &train.loss)?;
    Ok((outcome, eval))
}

fn code_set(frames: &[ToyFrame]) -> Result<SampleSet, CliError> {
    Ok(SampleSet::from_rows(frames.iter().map(|f| f.expression_code.clone()).collect())?)
}

pub fn coverage_pair(
    split: &ExperimentSplit,
    index: &Index,
    cfg: &CoverageConfig,
) -> Result<(CoverageReport, CoverageReport), CliError> {
    let train = code_set(&split.train)?;
    let test = code_set(&split.heldout)?;
    let ids: Vec<String> = split.train.iter().map(|f| f.identity_id.clone()).collect();
    Ok(coverage_report(&train, &ids, &test, index, cfg)?)
}

/// Runs every condition for every seed. The world, split and banks are
/// generated once per seed and shared by all conditions; `progress` sees
/// each finished run.
pub fn experiment_suite(cfg: &SuiteConfig, mut progress: impl FnMut(&RunResult)) -> Result<SuiteResult, CliError> {
    if cfg.seeds.is_empty() {
        return Err(CliError::usage("at least one seed is required"));
    }
    let mut runs = Vec::with_capacity(cfg.seeds.len() * Condition::ALL.len());
    for &seed in &cfg.seeds {
        let split = make_experiment_split(&ExperimentConfig { seed, ..cfg.experiment.clone() })?;
        let full = Index::build(&split.bank)?;
        let half = Index::build(&half_bank(&split.bank))?;
        let cov_cfg = CoverageConfig { seed, ..cfg.coverage.clone() };
        let cov_full = coverage_pair(&split, &full, &cov_cfg)?;
        let cov_half = coverage_pair(&split, &half, &cov_cfg)?;
        let train = TrainConfig { seed, ..cfg.train.clone() };
        for c in Condition::ALL {
            let source = match c {
                Condition::Vanilla => PlanSource::Vanilla,
                Condition::Noise => PlanSource::Noise { sigma: cfg.noise_sigma },
                Condition::RafTop1 => PlanSource::Raf { index: &full, p: cfg.p, mode: SubstituteMode::Top1 },
                Condition::RafTop5 => PlanSource::Raf { index: &full, p: cfg.p, mode: SubstituteMode::TopKUniform(5) },
                Condition::RafHalfBank => PlanSource::Raf { index: &half, p: cfg.p, mode: SubstituteMode::Top1 },
            };
            let (outcome, eval) = train_and_eval(&split, &cfg.params, &train, source)?;
            let run = RunResult {
                condition: c,
                seed,
                heldout_point_rmse: eval.mean_point_rmse,
                heldout_image_loss: eval.mean_image_loss,
                first_train_loss: outcome.loss_curve[0],
                last_train_loss: *outcome.loss_curve.last().expect("at least one epoch"),
                coverage: if c.uses_half_bank() { cov_half.clone() } else { cov_full.clone() },
            };
            progress(&run);
            runs.push(run);
        }
    }
    Ok(SuiteResult { config: cfg.clone(), runs })
}

pub const CSV_COLUMNS: [&str; 12] = [
    "condition",
    "seed",
    "heldout_point_rmse",
    "heldout_image_loss",
    "first_train_loss",
    "last_train_loss",
    "vanilla_mmd",
    "vanilla_kl",
    "vanilla_b2t",
    "raf_mmd",
    "raf_kl",
    "raf_b2t",
];

fn numbers(r: &RunResult) -> [f64; 10] {
    let (v, m) = &r.coverage;
    [
        r.heldout_point_rmse,
        r.heldout_image_loss,
        r.first_train_loss,
        r.last_train_loss,
        v.mmd,
        v.kl,
        v.b2t,
        m.mmd,
        m.kl,
        m.b2t,
    ]
}

/// One row per (condition, seed), then one `mean` row per condition.
pub fn write_suite_csv<W: Write>(result: &SuiteResult, w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(CSV_COLUMNS)?;
    let row = |name: &str, seed: String, vals: &[f64]| {
        let mut rec = vec![name.to_string(), seed];
        rec.extend(vals.iter().map(f64::to_string));
        rec
    };
    for c in Condition::ALL {
        for r in result.runs_of(c) {
            wr.write_record(row(c.name(), r.seed.to_string(), &numbers(r)))?;
        }
    }
    for c in Condition::ALL {
        let rows: Vec<[f64; 10]> = result.runs_of(c).map(numbers).collect();
        let mean: Vec<f64> = (0..10).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64).collect();
        wr.write_record(row(c.name(), "mean".into(), &mean))?;
    }
    wr.flush()?;
    Ok(())
}
