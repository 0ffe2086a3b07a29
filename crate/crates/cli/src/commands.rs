//! Subcommand flags, resolved settings and implementations.
//!
//! Each command has a clap `*Args` struct whose unset options serialize to
//! nothing, and a `*Settings` struct with defaults. The settings are what
//! gets echoed into artifacts.

use std::fs::File;
use std::io::BufReader;
use std::path::Path;

use clap::{Args, ValueEnum};
use raf_core::augmentation::{
    make_plan_noise, make_plan_raf, make_plan_vanilla, AugmentationPlan, FrameRef, LossWeights, PlanFrame, Source,
};
use raf_core::bank::{
    read_csv_records, read_jsonl_records, write_csv_records, ExpressionBank, FeatureRecord, FeatureVector,
};
use raf_core::coverage::{
    coverage_report, export_pca_scatter, write_scatter_csv, CoverageConfig, KdeBandwidth, SampleSet,
};
use raf_core::retrieval::{Index, QueryConstraint};
use raf_core::toy::{
    evaluate_heldout, make_experiment_split, read_model, write_model, EvalResult, ExperimentConfig, PlanSource,
    ToyFrame, ToyParams, TrainConfig,
};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::{require, resolve};
use crate::error::CliError;
use crate::output::{csv_preamble, json_bytes, meta_path, provenance, Staged};
use crate::suite::{experiment_suite, half_bank, train_and_eval, write_suite_csv, SuiteConfig};
use crate::{Augment, Mode};

fn settings_value(s: &impl Serialize) -> Value {
    serde_json::to_value(s).expect("settings serialize")
}

fn open(path: &str) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::new(crate::error::Category::Io, format!("{path}: {e}")))
}

fn load_bank(path: &str) -> Result<ExpressionBank, CliError> {
    Ok(ExpressionBank::read_from(open(path)?)?)
}

/// Reads a CSV of feature rows. With an `identity_id,frame_id,f0,...` header
/// the ids are kept; with a bare `f0,...` header rows get an empty identity
/// and their row number as frame id.
fn read_feature_csv(path: &str) -> Result<(Vec<FeatureRecord>, usize), CliError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| CliError::new(crate::error::Category::Io, format!("{path}: {e}")))?;
    let header = text.lines().find(|l| !l.starts_with('#')).unwrap_or("");
    if header.starts_with("identity_id") {
        return Ok(read_csv_records(text.as_bytes())?);
    }
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let dim = rdr.headers()?.len();
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let f = row
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| CliError::data(format!("{path} row {i}: {e}")))?;
        if f.len() != dim {
            return Err(CliError::data(format!("{path} row {i}: expected {dim} values, got {}", f.len())));
        }
        out.push(FeatureRecord::new("", i.to_string(), f));
    }
    Ok((out, dim))
}

fn features(records: &[FeatureRecord], path: &str) -> Result<Vec<FeatureVector>, CliError> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| {
            FeatureVector::new(r.feature.clone())
                .ok_or_else(|| CliError::data(format!("{path} row {i}: non-finite value")))
        })
        .collect()
}

fn csv_bytes(preamble: String, write: impl FnOnce(&mut Vec<u8>) -> Result<(), CliError>) -> Result<Vec<u8>, CliError> {
    let mut buf = preamble.into_bytes();
    write(&mut buf)?;
    Ok(buf)
}

// ---------------------------------------------------------------- build-bank

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    Csv,
    Jsonl,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildBankArgs {
    /// Feature records, CSV (`identity_id,frame_id,f0,...`) or JSONL.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub input: Option<String>,
    /// Input format; inferred from the extension when absent.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub format: Option<InputFormat>,
    /// Expected feature dimension.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dim: Option<usize>,
    /// Keep at most this many random frames per identity.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_identity: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BuildBankSettings {
    pub input: Option<String>,
    pub format: Option<InputFormat>,
    pub dim: Option<usize>,
    pub per_identity: Option<usize>,
    pub seed: u64,
    pub out: Option<String>,
}

pub fn build_bank(args: &BuildBankArgs, file: Option<&Value>) -> Result<(), CliError> {
    let s: BuildBankSettings = resolve(args, file)?;
    let input = require(&s.input, "input")?;
    let out = require(&s.out, "out")?;
    let format = s.format.unwrap_or(if input.ends_with(".jsonl") { InputFormat::Jsonl } else { InputFormat::Csv });
    let (records, dim) = match format {
        InputFormat::Csv => {
            let (records, dim) = read_csv_records(open(input)?)?;
            if let Some(d) = s.dim {
                if d != dim {
                    return Err(CliError::data(format!("--dim {d} but the CSV header has {dim} feature columns")));
                }
            }
            (records, dim)
        }
        InputFormat::Jsonl => {
            let records = read_jsonl_records(open(input)?)?;
            let dim = match (s.dim, records.first()) {
                (Some(d), _) => d,
                (None, Some(r)) => r.feature.len(),
                (None, None) => return Err(CliError::data("no records and no --dim")),
            };
            (records, dim)
        }
    };
    let mut bank = ExpressionBank::ingest_records(records, dim)?;
    if let Some(k) = s.per_identity {
        if k == 0 {
            return Err(CliError::usage("--per-identity must be positive"));
        }
        bank = bank.subsample_per_identity(k, s.seed);
    }
    let mut bytes = Vec::new();
    bank.write_to(&mut bytes)?;
    let meta = json!({ "config": provenance("build-bank", &settings_value(&s)), "stats": bank.stats() });
    let mut staged = Staged::new();
    staged.add(out, &bytes)?;
    staged.add(meta_path(Path::new(out)), &json_bytes(&meta)?)?;
    staged.commit()
}

// ---------------------------------------------------------------- query

#[derive(Debug, Args, Serialize)]
pub struct QueryArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bank: Option<String>,
    /// Query features: `identity_id,frame_id,f0,...` or `f0,...`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub query_csv: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exclude_identity: Option<String>,
    /// Draw one substitute per query instead of listing the k nearest.
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct QuerySettings {
    pub bank: Option<String>,
    pub query_csv: Option<String>,
    pub k: usize,
    pub exclude_identity: Option<String>,
    pub mode: Option<Mode>,
    pub seed: u64,
    pub out: Option<String>,
}

impl Default for QuerySettings {
    fn default() -> Self {
        Self { bank: None, query_csv: None, k: 1, exclude_identity: None, mode: None, seed: 0, out: None }
    }
}

pub fn query(args: &QueryArgs, file: Option<&Value>) -> Result<(), CliError> {
    let s: QuerySettings = resolve(args, file)?;
    let bank_path = require(&s.bank, "bank")?;
    let query_path = require(&s.query_csv, "query-csv")?;
    let out = require(&s.out, "out")?;
    let index = Index::build(&load_bank(bank_path)?)?;
    let (records, _) = read_feature_csv(query_path)?;
    let constraint = QueryConstraint { exclude_identity: s.exclude_identity.clone() };

    let mut rows: Vec<(usize, usize, usize, f64)> = Vec::new();
    for (qi, r) in records.iter().enumerate() {
        match s.mode {
            None => {
                for (rank, nb) in index.knn_search(&r.feature, s.k, &constraint)?.into_iter().enumerate() {
                    rows.push((qi, rank + 1, nb.entry_index, nb.distance));
                }
            }
            Some(m) => {
                let mode = m.substitute_mode();
                let neighbors = index.knn_search(&r.feature, mode.k(), &constraint)?;
                let chosen = mode.pick(&neighbors, s.seed, qi as u64);
                let rank = neighbors
                    .iter()
                    .position(|n| n.entry_index == chosen.entry_index)
                    .expect("pick comes from the list");
                rows.push((qi, rank + 1, chosen.entry_index, chosen.distance));
            }
        }
    }
    let bytes = csv_bytes(csv_preamble("query", &settings_value(&s)), |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["query_row", "rank", "identity_id", "frame_id", "distance"])?;
        for (qi, rank, e, d) in rows {
            let entry = index.bank().entry(e);
            w.write_record([
                qi.to_string(),
                rank.to_string(),
                entry.identity_id.clone(),
                entry.frame_id.clone(),
                d.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    })?;
    let mut staged = Staged::new();
    staged.add(out, &bytes)?;
    staged.commit()
}

// ---------------------------------------------------------------- coverage

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KdeRule {
    #[default]
    Scott,
    Silverman,
}

#[derive(Debug, Args, Serialize)]
pub struct CoverageArgs {
    /// Subject training features with identity tags.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bank: Option<String>,
    /// Share of training samples replaced by retrieved neighbors.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fraction: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pca_dims: Option<usize>,
    /// Fixed MMD kernel bandwidth; defaults to the median heuristic.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bandwidth: Option<f64>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kde_rule: Option<KdeRule>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CoverageSettings {
    pub train: Option<String>,
    pub test: Option<String>,
    pub bank: Option<String>,
    pub fraction: f64,
    pub pca_dims: usize,
    pub bandwidth: Option<f64>,
    pub kde_rule: KdeRule,
    pub seed: u64,
    pub out: Option<String>,
}

impl Default for CoverageSettings {
    fn default() -> Self {
        let c = CoverageConfig::default();
        Self {
            train: None,
            test: None,
            bank: None,
            fraction: c.fraction,
            pca_dims: c.pca_dims,
            bandwidth: None,
            kde_rule: KdeRule::Scott,
            seed: 0,
            out: None,
        }
    }
}

fn metrics(r: &raf_core::coverage::CoverageReport) -> Value {
    json!({ "mmd": r.mmd, "kl": r.kl, "b2t": r.b2t })
}

pub fn coverage(args: &CoverageArgs, file: Option<&Value>) -> Result<(), CliError> {
    let s: CoverageSettings = resolve(args, file)?;
    let train_path = require(&s.train, "train")?;
    let test_path = require(&s.test, "test")?;
    let bank_path = require(&s.bank, "bank")?;
    let out = require(&s.out, "out")?;
    let (train_records, _) = read_feature_csv(train_path)?;
    let (test_records, _) = read_feature_csv(test_path)?;
    let identities: Vec<String> = train_records.iter().map(|r| r.identity_id.clone()).collect();
    let train = SampleSet::from_rows(train_records.into_iter().map(|r| r.feature).collect())?;
    let test = SampleSet::from_rows(test_records.into_iter().map(|r| r.feature).collect())?;
    let index = Index::build(&load_bank(bank_path)?)?;
    let cfg = CoverageConfig {
        fraction: s.fraction,
        mmd_bandwidth: s.bandwidth,
        pca_dims: s.pca_dims,
        kde_rule: match s.kde_rule {
            KdeRule::Scott => KdeBandwidth::Scott,
            KdeRule::Silverman => KdeBandwidth::Silverman,
        },
        seed: s.seed,
    };
    let (vanilla, raf) = coverage_report(&train, &identities, &test, &index, &cfg)?;
    let mut config = provenance("coverage", &settings_value(&s));
    config["resolved"] = serde_json::to_value(&vanilla.config)?;
    let report = json!({ "vanilla": metrics(&vanilla), "raf": metrics(&raf), "config": config });
    let mut staged = Staged::new();
    staged.add(out, &json_bytes(&report)?)?;
    staged.commit()
}

// ---------------------------------------------------------------- plan

#[derive(Debug, Args, Serialize)]
pub struct PlanArgs {
    /// Subject frames: `identity_id,frame_id,f0,...`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub frames: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bank: Option<String>,
    /// Identity excluded from retrieval.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub subject: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment: Option<Augment>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epoch: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlanSettings {
    pub frames: Option<String>,
    pub bank: Option<String>,
    pub subject: Option<String>,
    pub p: f64,
    pub mode: Mode,
    pub sigma: f64,
    pub augment: Augment,
    pub epoch: u64,
    pub seed: u64,
    pub out: Option<String>,
}

impl Default for PlanSettings {
    fn default() -> Self {
        Self {
            frames: None,
            bank: None,
            subject: None,
            p: 0.5,
            mode: Mode::Top1,
            sigma: 0.08,
            augment: Augment::Raf,
            epoch: 0,
            seed: 0,
            out: None,
        }
    }
}

fn plan_lines(plan: &AugmentationPlan, index: Option<&Index>) -> Result<Vec<u8>, CliError> {
    let mut buf = Vec::new();
    for item in &plan.items {
        let source = match item.source {
            Source::Native => "native",
            Source::Retrieved(_) => "retrieved",
            Source::Noised => "noised",
        };
        let mut line = json!({
            "frame_ref": item.frame_ref,
            "source": source,
            "conditioning": item.conditioning,
        });
        if let (Some(nb), Some(index)) = (&item.neighbor, index) {
            let e = index.bank().entry(nb.entry_index);
            line["neighbor"] = json!({ "identity_id": e.identity_id, "frame_id": e.frame_id, "distance": nb.distance });
        }
        serde_json::to_writer(&mut buf, &line)?;
        buf.push(b'\n');
    }
    Ok(buf)
}

pub fn plan(args: &PlanArgs, file: Option<&Value>) -> Result<(), CliError> {
    let s: PlanSettings = resolve(args, file)?;
    let frames_path = require(&s.frames, "frames")?;
    let out = require(&s.out, "out")?;
    let (records, _) = read_csv_records(open(frames_path)?)?;
    let feats = features(&records, frames_path)?;
    let frames: Vec<PlanFrame> = records
        .iter()
        .zip(feats)
        .map(|(r, feature)| PlanFrame { frame_ref: FrameRef::new(&r.identity_id, &r.frame_id), feature })
        .collect();
    let mut index = None;
    let plan = match s.augment {
        Augment::Vanilla => make_plan_vanilla(&frames, s.epoch, s.seed),
        Augment::Noise => make_plan_noise(&frames, s.sigma, s.epoch, s.seed)?,
        Augment::Raf => {
            let bank_path = require(&s.bank, "bank")?;
            let subject = require(&s.subject, "subject")?;
            let idx = index.insert(Index::build(&load_bank(bank_path)?)?);
            make_plan_raf(&frames, subject, idx, s.p, s.mode.substitute_mode(), s.epoch, s.seed)?
        }
    };
    let body = plan_lines(&plan, index.as_ref())?;
    let meta = json!({
        "config": provenance("plan", &settings_value(&s)),
        "items": plan.items.len(),
        "retrieved": plan.retrieved_count(),
    });
    let mut staged = Staged::new();
    staged.add(out, &body)?;
    staged.add(meta_path(Path::new(out)), &json_bytes(&meta)?)?;
    staged.commit()
}

// ---------------------------------------------------------------- toy-gen

#[derive(Debug, Args, Serialize)]
pub struct ToyGenArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyGenSettings {
    pub experiment: ExperimentConfig,
    pub seed: u64,
    pub out: Option<String>,
}

fn code_csv(frames: &[ToyFrame], d_e: usize, preamble: String) -> Result<Vec<u8>, CliError> {
    csv_bytes(preamble, |buf| {
        let rows = frames.iter().map(|f| (f.identity_id.as_str(), f.frame_id.as_str(), f.expression_code.as_slice()));
        Ok(write_csv_records(rows, d_e, buf)?)
    })
}

pub fn toy_gen(args: &ToyGenArgs, file: Option<&Value>) -> Result<(), CliError> {
    let s: ToyGenSettings = resolve(args, file)?;
    let out = Path::new(require(&s.out, "out")?);
    let experiment = ExperimentConfig { seed: s.seed, ..s.experiment.clone() };
    let split = make_experiment_split(&experiment)?;
    let d_e = split.world.d_e();
    let settings = settings_value(&ToyGenSettings { experiment, seed: s.seed, out: s.out.clone() });
    let pre = csv_preamble("toy-gen", &settings);
    let mut bank = Vec::new();
    split.bank.write_to(&mut bank)?;
    let world = json!({
        "config": provenance("toy-gen", &settings),
        "subject_id": split.subject_id,
        "train_frames": split.train.len(),
        "heldout_frames": split.heldout.len(),
        "bank": split.bank.stats(),
        "files": ["train.csv", "heldout.csv", "bank.rafb"],
    });
    let mut staged = Staged::new();
    staged.add(out.join("world.json"), &json_bytes(&world)?)?;
    staged.add(out.join("train.csv"), &code_csv(&split.train, d_e, pre.clone())?)?;
    staged.add(out.join("heldout.csv"), &code_csv(&split.heldout, d_e, pre)?)?;
    staged.add(out.join("bank.rafb"), &bank)?;
    staged.commit()
}

// ---------------------------------------------------------------- toy-train / toy-eval

#[derive(Debug, Args, Serialize)]
pub struct ToyTrainArgs {
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub augment: Option<Augment>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    /// Retrieve from roughly half of the bank's identities.
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub half_bank: bool,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
    /// `world.json` written by toy-gen; its experiment settings replace the defaults.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub world: Option<String>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Run directory.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyTrainSettings {
    pub augment: Augment,
    pub p: f64,
    pub sigma: f64,
    pub mode: Mode,
    pub half_bank: bool,
    pub epochs: usize,
    pub lr: f64,
    pub optimizer: raf_core::toy::Optimizer,
    pub schedule: raf_core::toy::Schedule,
    pub loss: LossWeights,
    pub params: ToyParams,
    pub world: Option<String>,
    pub experiment: ExperimentConfig,
    pub seed: u64,
    pub out: Option<String>,
}

impl Default for ToyTrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            augment: Augment::Vanilla,
            p: 0.5,
            sigma: 0.08,
            mode: Mode::Top1,
            half_bank: false,
            epochs: t.epochs,
            lr: t.learning_rate,
            optimizer: t.optimizer,
            schedule: t.schedule,
            loss: t.loss,
            params: ToyParams::default(),
            world: None,
            experiment: ExperimentConfig::default(),
            seed: 0,
            out: None,
        }
    }
}

fn eval_json(command: &str, settings: &Value, split: &str, eval: &EvalResult) -> Result<Vec<u8>, CliError> {
    json_bytes(&json!({
        "config": provenance(command, settings),
        "split": split,
        "mean_image_loss": eval.mean_image_loss,
        "mean_point_rmse": eval.mean_point_rmse,
        "per_frame": eval.per_frame,
    }))
}

pub fn toy_train(args: &ToyTrainArgs, file: Option<&Value>) -> Result<(), CliError> {
    let mut s: ToyTrainSettings = resolve(args, file)?;
    let out = Path::new(require(&s.out, "out")?).to_path_buf();
    match &s.world {
        Some(w) => {
            let v: Value = serde_json::from_reader(open(w)?)?;
            s.experiment = serde_json::from_value(v["config"]["settings"]["experiment"].clone())
                .map_err(|e| CliError::data(format!("{w}: no usable experiment settings: {e}")))?;
        }
        None => s.experiment.seed = s.seed,
    }
    LossWeights::new(s.loss.lambda_l1, s.loss.lambda_perceptual)?;
    let split = make_experiment_split(&s.experiment)?;
    let bank = if s.half_bank { half_bank(&split.bank) } else { split.bank.clone() };
    let index = Index::build(&bank)?;
    let source = match s.augment {
        Augment::Vanilla => PlanSource::Vanilla,
        Augment::Noise => PlanSource::Noise { sigma: s.sigma },
        Augment::Raf => PlanSource::Raf { index: &index, p: s.p, mode: s.mode.substitute_mode() },
    };
    let train = TrainConfig {
        epochs: s.epochs,
        learning_rate: s.lr,
        optimizer: s.optimizer,
        schedule: s.schedule,
        loss: s.loss,
        seed: s.seed,
    };
    let (outcome, eval) = train_and_eval(&split, &s.params, &train, source)?;

    let settings = settings_value(&s);
    let mut model = Vec::new();
    let meta = provenance("toy-train", &settings);
    write_model(&mut model, &outcome.state, &s.params, meta)?;
    let curve = csv_bytes(csv_preamble("toy-train", &settings), |buf| {
        let mut w = csv::Writer::from_writer(buf);
        w.write_record(["epoch", "train_loss"])?;
        for (e, l) in outcome.loss_curve.iter().enumerate() {
            w.write_record([e.to_string(), l.to_string()])?;
        }
        w.flush()?;
        Ok(())
    })?;
    let mut staged = Staged::new();
    staged.add(out.join("model.bin"), &model)?;
    staged.add(out.join("loss_curve.csv"), &curve)?;
    staged.add(out.join("eval.json"), &eval_json("toy-train", &settings, "heldout", &eval)?)?;
    staged.commit()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    #[default]
    Heldout,
    Train,
}

#[derive(Debug, Args, Serialize)]
pub struct ToyEvalArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    #[arg(long, value_enum)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<EvalSplit>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyEvalSettings {
    pub model: Option<String>,
    pub split: EvalSplit,
    pub out: Option<String>,
}

pub fn toy_eval(args: &ToyEvalArgs, file: Option<&Value>) -> Result<(), CliError> {
    let s: ToyEvalSettings = resolve(args, file)?;
    let model_path = require(&s.model, "model")?;
    let out = require(&s.out, "out")?;
    let (state, header) = read_model(open(model_path)?)?;
    let trained: ToyTrainSettings = serde_json::from_value(header.meta["settings"].clone())
        .map_err(|e| CliError::data(format!("{model_path}: model carries no usable training settings: {e}")))?;
    let split = make_experiment_split(&trained.experiment)?;
    let (frames, name) = match s.split {
        EvalSplit::Heldout => (&split.heldout, "heldout"),
        EvalSplit::Train => (&split.train, "train"),
    };
    let eval = evaluate_heldout(&state, &header.params, frames, &trained.loss)?;
    let mut staged = Staged::new();
    staged.add(out, &eval_json("toy-eval", &settings_value(&s), name, &eval)?)?;
    staged.commit()
}

// ---------------------------------------------------------------- pca-export

#[derive(Debug, Args, Serialize)]
pub struct PcaExportArgs {
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub bank: Option<String>,
    /// Query features: `identity_id,frame_id,f0,...` or `f0,...`.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub queries: Option<String>,
    /// Neighbors marked per query.
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[arg(long)]
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaExportSettings {
    pub bank: Option<String>,
    pub queries: Option<String>,
    pub k: usize,
    pub out: Option<String>,
}

impl Default for PcaExportSettings {
    fn default() -> Self {
        Self { bank: None, queries: None, k: 10, out: None }
    }
}

pub fn pca_export(args: &PcaExportArgs, file: Option<&Value>) -> Result<(), CliError> {
    let s: PcaExportSettings = resolve(args, file)?;
    let bank = load_bank(require(&s.bank, "bank")?)?;
    let queries_path = require(&s.queries, "queries")?;
    let out = require(&s.out, "out")?;
    let (records, _) = read_feature_csv(queries_path)?;
    let queries = features(&records, queries_path)?;
    let rows = export_pca_scatter(&bank, &queries, s.k)?;
    let bytes = csv_bytes(csv_preamble("pca-export", &settings_value(&s)), |buf| Ok(write_scatter_csv(&rows, buf)?))?;
    let mut staged = Staged::new();
    staged.add(out, &bytes)?;
    staged.commit()
}

// ---------------------------------------------------------------- suite

#[derive(Debug, Args)]
pub struct SuiteArgs {
    /// Number of seeds, run as 0..n.
    #[arg(long)]
    pub seeds: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub out: Option<String>,
    /// Print one line per finished run on stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteSettings {
    pub suite: SuiteConfig,
    pub out: Option<String>,
}

pub fn suite(args: &SuiteArgs, file: Option<&Value>) -> Result<(), CliError> {
    let mut flags = json!({ "suite": {} });
    if let Some(n) = args.seeds {
        flags["suite"]["seeds"] = json!((0..n).collect::<Vec<u64>>());
    }
    if let Some(e) = args.epochs {
        flags["suite"]["train"] = json!({ "epochs": e });
    }
    if let Some(o) = &args.out {
        flags["out"] = json!(o);
    }
    let s: SuiteSettings = resolve(&flags, file)?;
    let out = require(&s.out, "out")?;
    let result = experiment_suite(&s.suite, |r| {
        if args.verbose {
            eprintln!("raf: suite {} seed {} heldout_point_rmse {}", r.condition.name(), r.seed, r.heldout_point_rmse);
        }
    })?;
    let bytes = csv_bytes(csv_preamble("suite", &settings_value(&s)), |buf| Ok(write_suite_csv(&result, buf)?))?;
    let mut staged = Staged::new();
    staged.add(out, &bytes)?;
    staged.commit()
}
