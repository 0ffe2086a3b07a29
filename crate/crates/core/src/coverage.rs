//! Distribution-coverage diagnostics: RBF-MMD, KDE-based KL in a PCA space,
//! bank-to-train nearest distance, the half-retrieved mixing protocol and a
//! 2-D scatter export.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bank::{ExpressionBank, FeatureVector};
use crate::linalg;
use crate::retrieval::{Index, NeighborResult, QueryConstraint, RetrievalError};
use crate::rng;

/// Floor applied to KDE densities before taking logs.
pub const DENSITY_FLOOR: f64 = 1e-300;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoverageError {
    #[error("all points are identical; no nonzero pairwise distance")]
    DegenerateSet,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("bandwidth must be positive and finite, got {0}")]
    NonPositiveBandwidth(f64),
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("component count {requested} outside 1..={max}")]
    BadComponentCount { requested: usize, max: usize },
    #[error("fraction {0} outside [0, 1]")]
    BadFraction(f64),
    #[error("identity tags: expected {expected}, got {got}")]
    TagCountMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// A set of same-dimension samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

impl SampleSet {
    pub fn new(dim: usize, rows: Vec<Vec<f64>>) -> Result<Self, CoverageError> {
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(CoverageError::DimensionMismatch { expected: dim, got: bad.len() });
        }
        Ok(Self { dim, rows })
    }

    /// Builds a set from non-empty rows, taking the dimension from the first.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, CoverageError> {
        let dim = rows.first().map(Vec::len).ok_or(CoverageError::TooFewSamples { needed: 1, got: 0 })?;
        Self::new(dim, rows)
    }

    pub fn from_features(dim: usize, features: &[FeatureVector]) -> Result<Self, CoverageError> {
        Self::new(dim, features.iter().map(|f| f.as_slice().to_vec()).collect())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn into_rows(self) -> Vec<Vec<f64>> {
        self.rows
    }

    fn union(&self, other: &SampleSet) -> SampleSet {
        let mut rows = self.rows.clone();
        rows.extend(other.rows.iter().cloned());
        SampleSet { dim: self.dim, rows }
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn same_dim(a: &SampleSet, b: &SampleSet) -> Result<(), CoverageError> {
    if a.dim != b.dim {
        return Err(CoverageError::DimensionMismatch { expected: a.dim, got: b.dim });
    }
    Ok(())
}

fn non_empty(s: &SampleSet) -> Result<(), CoverageError> {
    if s.is_empty() {
        return Err(CoverageError::TooFewSamples { needed: 1, got: 0 });
    }
    Ok(())
}

/// Median of the nonzero pairwise Euclidean distances. An even count takes
/// the mean of the two middle values.
pub fn median_bandwidth(pooled: &SampleSet) -> Result<f64, CoverageError> {
    if pooled.len() < 2 {
        return Err(CoverageError::TooFewSamples { needed: 2, got: pooled.len() });
    }
    let rows = &pooled.rows;
    let mut d: Vec<f64> = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let v = sq_dist(&rows[i], &rows[j]).sqrt();
            if v > 0.0 {
                d.push(v);
            }
        }
    }
    if d.is_empty() {
        return Err(CoverageError::DegenerateSet);
    }
    let n = d.len();
    let mid = n / 2;
    let (_, &mut upper, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if n % 2 == 1 {
        return Ok(upper);
    }
    let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(0.5 * (lower + upper))
}

fn kernel_mean(a: &[Vec<f64>], b: &[Vec<f64>], inv_two_s2: f64) -> f64 {
    let mut total = 0.0;
    for x in a {
        let mut row = 0.0;
        for y in b {
            row += (-sq_dist(x, y) * inv_two_s2).exp();
        }
        total += row;
    }
    total / (a.len() as f64 * b.len() as f64)
}

fn canonical_cmp(a: &SampleSet, b: &SampleSet) -> Ordering {
    a.len().cmp(&b.len()).then_with(|| {
        a.rows
            .iter()
            .flatten()
            .zip(b.rows.iter().flatten())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Biased (V-statistic) RBF-MMD, returned as `sqrt(max(0, MMD²))`.
///
/// The two sets are put in a canonical order before summing so that the
/// result is bit-identical under swapping the arguments.
pub fn rbf_mmd(x: &SampleSet, y: &SampleSet, bandwidth: f64) -> Result<f64, CoverageError> {
    same_dim(x, y)?;
    non_empty(x)?;
    non_empty(y)?;
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(CoverageError::NonPositiveBandwidth(bandwidth));
    }
    let (a, b) = if canonical_cmp(x, y) == Ordering::Greater { (y, x) } else { (x, y) };
    let g = 1.0 / (2.0 * bandwidth * bandwidth);
    let v =
        kernel_mean(&a.rows, &a.rows, g) + kernel_mean(&b.rows, &b.rows, g) - 2.0 * kernel_mean(&a.rows, &b.rows, g);
    Ok(v.max(0.0).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub mean: Vec<f64>,
    /// Unit-length principal directions, strongest first.
    pub components: Vec<Vec<f64>>,
    /// Sample-covariance eigenvalues (n − 1 denominator) per component.
    pub explained_variance: Vec<f64>,
    /// Sum of all covariance eigenvalues, including discarded ones.
    pub total_variance: f64,
}

impl PcaModel {
    pub fn fit(data: &SampleSet, n_components: usize) -> Result<Self, CoverageError> {
        let n = data.len();
        if n < 2 {
            return Err(CoverageError::TooFewSamples { needed: 2, got: n });
        }
        let max = data.dim.min(n - 1);
        if n_components == 0 || n_components > max {
            return Err(CoverageError::BadComponentCount { requested: n_components, max });
        }
        let d = data.dim;
        let mut mean = vec![0.0; d];
        for r in &data.rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let cov = covariance(&data.rows, &mean);
        let (values, vectors) = linalg::symmetric_eigen(&cov, d);
        let total_variance = values.iter().map(|v| v.max(0.0)).sum();
        Ok(Self {
            mean,
            components: vectors.into_iter().take(n_components).collect(),
            explained_variance: values.into_iter().take(n_components).map(|v| v.max(0.0)).collect(),
            total_variance,
        })
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn project_row(&self, row: &[f64]) -> Vec<f64> {
        self.components
            .iter()
            .map(|c| c.iter().zip(row.iter().zip(&self.mean)).map(|(w, (x, m))| w * (x - m)).sum())
            .collect()
    }

    pub fn reconstruct_row(&self, coords: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, &a) in self.components.iter().zip(coords) {
            for (o, w) in out.iter_mut().zip(c) {
                *o += a * w;
            }
        }
        out
    }

    pub fn project(&self, set: &SampleSet) -> Result<SampleSet, CoverageError> {
        if set.dim != self.mean.len() {
            return Err(CoverageError::DimensionMismatch { expected: self.mean.len(), got: set.dim });
        }
        Ok(SampleSet { dim: self.n_components(), rows: set.rows.iter().map(|r| self.project_row(r)).collect() })
    }
}

/// Sample covariance (n − 1 denominator), row-major `d×d`.
fn covariance(rows: &[Vec<f64>], mean: &[f64]) -> Vec<f64> {
    let d = mean.len();
    let mut cov = vec![0.0; d * d];
    let mut centered = vec![0.0; d];
    for r in rows {
        for k in 0..d {
            centered[k] = r[k] - mean[k];
        }
        for i in 0..d {
            for j in i..d {
                cov[i * d + j] += centered[i] * centered[j];
            }
        }
    }
    let denom = (rows.len() as f64 - 1.0).max(1.0);
    for i in 0..d {
        for j in i..d {
            cov[i * d + j] /= denom;
            cov[j * d + i] = cov[i * d + j];
        }
    }
    cov
}

pub fn pca_fit_project(
    fit_on: &SampleSet,
    project: &SampleSet,
    n_components: usize,
) -> Result<(PcaModel, SampleSet), CoverageError> {
    let model = PcaModel::fit(fit_on, n_components)?;
    let projected = model.project(project)?;
    Ok((model, projected))
}

/// Bandwidth rule for the Gaussian KDE, expressed as a factor multiplying
/// the data covariance's square root.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdeBandwidth {
    Scott,
    Silverman,
    Factor(f64),
}

impl KdeBandwidth {
    fn factor(self, n: usize, d: usize) -> f64 {
        let n = n as f64;
        let d = d as f64;
        match self {
            KdeBandwidth::Scott => n.powf(-1.0 / (d + 4.0)),
            KdeBandwidth::Silverman => (n * (d + 2.0) / 4.0).powf(-1.0 / (d + 4.0)),
            KdeBandwidth::Factor(f) => f,
        }
    }
}

/// Gaussian KDE with kernel covariance `factor² · Cov(data)`.
struct Kde<'a> {
    data: &'a [Vec<f64>],
    chol: Vec<f64>,
    log_norm: f64,
}

impl<'a> Kde<'a> {
    fn new(data: &'a [Vec<f64>], rule: KdeBandwidth) -> Self {
        let d = data[0].len();
        let n = data.len();
        let mut mean = vec![0.0; d];
        for r in data {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let f = rule.factor(n, d);
        let mut cov: Vec<f64> = covariance(data, &mean).into_iter().map(|c| c * f * f).collect();
        // A rank-deficient sample covariance gets a growing diagonal ridge.
        let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
        let mut ridge = 1e-12 * (trace / d as f64).max(1.0);
        let chol = loop {
            if let Some(l) = linalg::cholesky(&cov, d) {
                break l;
            }
            for i in 0..d {
                cov[i * d + i] += ridge;
            }
            ridge *= 10.0;
        };
        let log_det: f64 = (0..d).map(|i| 2.0 * chol[i * d + i].ln()).sum();
        let log_norm = -0.5 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det) - (n as f64).ln();
        Self { data, chol, log_norm }
    }

    /// `log(max(p̂(x), DENSITY_FLOOR))`.
    fn log_density(&self, x: &[f64]) -> f64 {
        let d = x.len();
        let mut buf = vec![0.0; d];
        let mut exps = Vec::with_capacity(self.data.len());
        for r in self.data {
            for k in 0..d {
                buf[k] = x[k] - r[k];
            }
            linalg::forward_substitute(&self.chol, d, &mut buf);
            exps.push(-0.5 * buf.iter().map(|v| v * v).sum::<f64>());
        }
        let m = exps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + exps.iter().map(|e| (e - m).exp()).sum::<f64>().ln();
        (lse + self.log_norm).max(DENSITY_FLOOR.ln())
    }
}

/// Largest PCA dimension usable for `kde_kl` on sets of these sizes.
pub fn effective_pca_dims(requested: usize, dim: usize, union_len: usize) -> usize {
    requested.min(dim).min(union_len.saturating_sub(1)).max(1)
}

/// Plug-in estimate of KL(P‖Q) from KDEs in a PCA space fitted on P ∪ Q.
///
/// `pca_dims` is clamped to what the data supports (see
/// [`effective_pca_dims`]).
pub fn kde_kl(p: &SampleSet, q: &SampleSet, pca_dims: usize, rule: KdeBandwidth) -> Result<f64, CoverageError> {
    same_dim(p, q)?;
    for s in [p, q] {
        if s.len() < 2 {
            return Err(CoverageError::TooFewSamples { needed: 2, got: s.len() });
        }
    }
    let union = p.union(q);
    let dims = effective_pca_dims(pca_dims, p.dim, union.len());
    let model = PcaModel::fit(&union, dims)?;
    let pp = model.project(p)?;
    let qq = model.project(q)?;
    let kp = Kde::new(&pp.rows, rule);
    let kq = Kde::new(&qq.rows, rule);
    let total: f64 = pp.rows.iter().map(|x| kp.log_density(x) - kq.log_density(x)).sum();
    Ok(total / pp.len() as f64)
}

/// Mean over `test` of the distance to the nearest `train` sample.
pub fn b2t_distance(test: &SampleSet, train: &SampleSet) -> Result<f64, CoverageError> {
    same_dim(test, train)?;
    non_empty(test)?;
    non_empty(train)?;
    let total: f64 =
        test.rows.iter().map(|t| train.rows.iter().map(|r| sq_dist(t, r)).fold(f64::INFINITY, f64::min).sqrt()).sum();
    Ok(total / test.len() as f64)
}

/// Output of [`build_mixed_set`]: the mixed samples and, per row, the
/// neighbor that replaced it (if any).
#[derive(Debug, Clone, PartialEq)]
pub struct MixedSet {
    pub samples: SampleSet,
    pub substitutions: Vec<Option<NeighborResult>>,
}

impl MixedSet {
    pub fn retrieved_count(&self) -> usize {
        self.substitutions.iter().filter(|s| s.is_some()).count()
    }
}

/// Replaces `round(fraction · N)` seeded-chosen rows of `train` with their
/// Top1 neighbor from another identity. `identities[i]` tags row `i`.
pub fn build_mixed_set(
    train: &SampleSet,
    identities: &[String],
    index: &Index,
    fraction: f64,
    seed: u64,
) -> Result<MixedSet, CoverageError> {
    non_empty(train)?;
    if !(0.0..=1.0).contains(&fraction) {
        return Err(CoverageError::BadFraction(fraction));
    }
    if identities.len() != train.len() {
        return Err(CoverageError::TagCountMismatch { expected: train.len(), got: identities.len() });
    }
    if index.dim() != train.dim {
        return Err(CoverageError::DimensionMismatch { expected: index.dim(), got: train.dim });
    }
    let n = train.len();
    let take = (fraction * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut r = rng::keyed(seed, &[rng::tag::MIX_SELECT]);
    for i in 0..take {
        let j = r.random_range(i..n);
        order.swap(i, j);
    }
    let mut rows = train.rows.clone();
    let mut substitutions = vec![None; n];
    for &i in &order[..take] {
        let c = QueryConstraint::excluding(identities[i].clone());
        let nb = index.knn_search(&train.rows[i], 1, &c)?[0];
        rows[i] = index.feature(nb.entry_index).as_slice().to_vec();
        substitutions[i] = Some(nb);
    }
    Ok(MixedSet { samples: SampleSet { dim: train.dim, rows }, substitutions })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageConfig {
    pub fraction: f64,
    /// `None` selects the median heuristic on the pooled vanilla train and test sets.
    pub mmd_bandwidth: Option<f64>,
    pub pca_dims: usize,
    pub kde_rule: KdeBandwidth,
    pub seed: u64,
}

impl Default for CoverageConfig {
    fn default() -> Self {
        Self { fraction: 0.5, mmd_bandwidth: None, pca_dims: 5, kde_rule: KdeBandwidth::Scott, seed: 0 }
    }
}

/// Metric configuration as actually applied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub fraction: f64,
    pub mmd_bandwidth: f64,
    pub pca_dims: usize,
    pub kde_rule: KdeBandwidth,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub mmd: f64,
    pub kl: f64,
    pub b2t: f64,
    pub config: ResolvedConfig,
}

fn report(train: &SampleSet, test: &SampleSet, cfg: &ResolvedConfig) -> Result<CoverageReport, CoverageError> {
    Ok(CoverageReport {
        mmd: rbf_mmd(train, test, cfg.mmd_bandwidth)?,
        kl: kde_kl(train, test, cfg.pca_dims, cfg.kde_rule)?,
        b2t: b2t_distance(test, train)?,
        config: cfg.clone(),
    })
}

/// Vanilla (train vs test) and mixed (half-retrieved train vs test) reports
/// under one shared metric configuration.
pub fn coverage_report(
    train: &SampleSet,
    identities: &[String],
    test: &SampleSet,
    index: &Index,
    config: &CoverageConfig,
) -> Result<(CoverageReport, CoverageReport), CoverageError> {
    same_dim(train, test)?;
    let bandwidth = match config.mmd_bandwidth {
        Some(b) => b,
        None => median_bandwidth(&train.union(test))?,
    };
    let resolved = ResolvedConfig {
        fraction: config.fraction,
        mmd_bandwidth: bandwidth,
        pca_dims: effective_pca_dims(config.pca_dims, train.dim, train.len() + test.len()),
        kde_rule: config.kde_rule,
        seed: config.seed,
    };
    let mixed = build_mixed_set(train, identities, index, config.fraction, config.seed)?;
    let vanilla = report(train, test, &resolved)?;
    let raf = report(&mixed.samples, test, &resolved)?;
    Ok((vanilla, raf))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScatterKind {
    Bank,
    Neighbor,
    Query,
}

impl ScatterKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScatterKind::Bank => "bank",
            ScatterKind::Neighbor => "neighbor",
            ScatterKind::Query => "query",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScatterRow {
    pub x: f64,
    pub y: f64,
    pub kind: ScatterKind,
    /// Queries this row belongs to: the query itself, or every query whose
    /// neighbor set contains this bank entry.
    pub query_ids: Vec<usize>,
    pub identity_id: String,
    pub frame_id: String,
}

/// 2-D PCA scatter of the bank (PCA fitted on the bank) plus queries, with
/// each query's `k` nearest neighbors in the original space marked.
pub fn export_pca_scatter(
    bank: &ExpressionBank,
    queries: &[FeatureVector],
    k: usize,
) -> Result<Vec<ScatterRow>, CoverageError> {
    let index = Index::build(bank)?;
    let bank_set = SampleSet::new(bank.dim(), bank.entries().iter().map(|e| e.feature.as_slice().to_vec()).collect())?;
    let model = PcaModel::fit(&bank_set, 2)?;
    let mut labels: Vec<Vec<usize>> = vec![Vec::new(); bank.len()];
    for (qi, q) in queries.iter().enumerate() {
        for nb in index.knn_search(q.as_slice(), k, &QueryConstraint::none())? {
            labels[nb.entry_index].push(qi);
        }
    }
    let mut out = Vec::with_capacity(bank.len() + queries.len());
    for ((e, row), query_ids) in bank.entries().iter().zip(&bank_set.rows).zip(labels) {
        let p = model.project_row(row);
        out.push(ScatterRow {
            x: p[0],
            y: p[1],
            kind: if query_ids.is_empty() { ScatterKind::Bank } else { ScatterKind::Neighbor },
            query_ids,
            identity_id: e.identity_id.clone(),
            frame_id: e.frame_id.clone(),
        });
    }
    for (qi, q) in queries.iter().enumerate() {
        let p = model.project_row(q.as_slice());
        out.push(ScatterRow {
            x: p[0],
            y: p[1],
            kind: ScatterKind::Query,
            query_ids: vec![qi],
            identity_id: String::new(),
            frame_id: String::new(),
        });
    }
    Ok(out)
}

/// Writes scatter rows as CSV `x,y,kind,query_id,identity_id,frame_id`.
/// Multiple query ids are joined with `;`.
pub fn write_scatter_csv<W: std::io::Write>(rows: &[ScatterRow], w: W) -> Result<(), csv::Error> {
    let mut wr = csv::Writer::from_writer(w);
    wr.write_record(["x", "y", "kind", "query_id", "identity_id", "frame_id"])?;
    for r in rows {
        let ids: Vec<String> = r.query_ids.iter().map(usize::to_string).collect();
        wr.write_record([
            r.x.to_string(),
            r.y.to_string(),
            r.kind.as_str().to_string(),
            ids.join(";"),
            r.identity_id.clone(),
            r.frame_id.clone(),
        ])?;
    }
    wr.flush()?;
    Ok(())
}
