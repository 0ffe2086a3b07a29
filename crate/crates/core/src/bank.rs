//! Identity-tagged expression feature banks.
//!
//! A bank is an ordered, immutable list of `(identity, frame, feature)` rows
//! with a fixed feature dimension. Banks are ingested from CSV or JSON-lines,
//! optionally subsampled per identity, and persisted in a small binary format:
//!
//! ```text
//! "RAFB" | version u32 | dim u32 | count u64
//! | string count u64 | (len u32, utf8 bytes) x string count   -- identity, frame, identity, frame, ...
//! | count x dim f32                                            -- row-major features
//! ```
//!
//! All integers and floats are little-endian.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng;

pub const MAGIC: &[u8; 4] = b"RAFB";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BankError {
    #[error("dimension mismatch at record {record}: expected {expected}, got {got}")]
    DimensionMismatch { record: usize, expected: usize, got: usize },
    #[error("non-finite feature value at record {record}")]
    NonFiniteFeature { record: usize },
    #[error("duplicate key ({identity}, {frame})")]
    DuplicateKey { identity: String, frame: String },
    #[error("empty identity or frame id at record {record}")]
    EmptyId { record: usize },
    #[error("feature dimension must be at least 1")]
    ZeroDimension,
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported bank format version {0}")]
    VersionMismatch(u32),
    #[error("truncated bank file")]
    TruncatedFile,
    #[error("corrupt bank file: {0}")]
    Corrupt(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// A finite real expression coefficient vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct FeatureVector(Vec<f64>);

impl FeatureVector {
    /// Rejects vectors containing NaN or infinities.
    pub fn new(values: Vec<f64>) -> Option<Self> {
        values.iter().all(|v| v.is_finite()).then_some(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl AsRef<[f64]> for FeatureVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

/// One ingestion row before validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub identity_id: String,
    pub frame_id: String,
    pub feature: Vec<f64>,
}

impl FeatureRecord {
    pub fn new(identity_id: impl Into<String>, frame_id: impl Into<String>, feature: Vec<f64>) -> Self {
        Self { identity_id: identity_id.into(), frame_id: frame_id.into(), feature }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankEntry {
    pub identity_id: String,
    pub frame_id: String,
    pub feature: FeatureVector,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BankStats {
    pub entry_count: usize,
    pub identity_count: usize,
    pub frames_per_identity: BTreeMap<String, usize>,
    /// Absent for an empty bank.
    pub mean_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionBank {
    dim: usize,
    entries: Vec<BankEntry>,
}

impl ExpressionBank {
    /// Validates and collects records in input order.
    pub fn ingest_records<I>(records: I, dim: usize) -> Result<Self, BankError>
    where
        I: IntoIterator<Item = FeatureRecord>,
    {
        if dim == 0 {
            return Err(BankError::ZeroDimension);
        }
        let mut seen: HashSet<(String, String)> = HashSet::new();
        let mut entries = Vec::new();
        for (i, rec) in records.into_iter().enumerate() {
            if rec.identity_id.is_empty() || rec.frame_id.is_empty() {
                return Err(BankError::EmptyId { record: i });
            }
            if rec.feature.len() != dim {
                return Err(BankError::DimensionMismatch { record: i, expected: dim, got: rec.feature.len() });
            }
            let feature = FeatureVector::new(rec.feature).ok_or(BankError::NonFiniteFeature { record: i })?;
            if !seen.insert((rec.identity_id.clone(), rec.frame_id.clone())) {
                return Err(BankError::DuplicateKey { identity: rec.identity_id, frame: rec.frame_id });
            }
            entries.push(BankEntry { identity_id: rec.identity_id, frame_id: rec.frame_id, feature });
        }
        Ok(Self { dim, entries })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[BankEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> &BankEntry {
        &self.entries[index]
    }

    /// Distinct identities in order of first appearance.
    pub fn identities(&self) -> Vec<&str> {
        let mut seen = HashSet::new();
        self.entries.iter().filter(|e| seen.insert(e.identity_id.as_str())).map(|e| e.identity_id.as_str()).collect()
    }

    /// Keeps only the entries whose identity satisfies `keep`, in order.
    pub fn filter_identities(&self, mut keep: impl FnMut(&str) -> bool) -> Self {
        Self { dim: self.dim, entries: self.entries.iter().filter(|e| keep(&e.identity_id)).cloned().collect() }
    }

    /// Retains at most `per_identity` entries of every identity, chosen by a
    /// seeded uniform draw without replacement. Retained entries keep their
    /// original relative order.
    pub fn subsample_per_identity(&self, per_identity: usize, seed: u64) -> Self {
        assert!(per_identity >= 1, "per_identity must be at least 1");
        let mut groups: HashMap<&str, Vec<usize>> = HashMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            groups.entry(e.identity_id.as_str()).or_default().push(i);
        }
        let mut keep = vec![false; self.entries.len()];
        for (identity, mut idx) in groups {
            if idx.len() <= per_identity {
                idx.iter().for_each(|&i| keep[i] = true);
                continue;
            }
            let mut rng = rng::keyed(seed, &[rng::tag::SUBSAMPLE, fnv1a(identity.as_bytes())]);
            // partial Fisher-Yates: the first `per_identity` slots are the sample
            for slot in 0..per_identity {
                let j = rand::Rng::random_range(&mut rng, slot..idx.len());
                idx.swap(slot, j);
            }
            idx[..per_identity].iter().for_each(|&i| keep[i] = true);
        }
        Self {
            dim: self.dim,
            entries: self.entries.iter().zip(keep).filter(|(_, k)| *k).map(|(e, _)| e.clone()).collect(),
        }
    }

    pub fn stats(&self) -> BankStats {
        let mut frames_per_identity = BTreeMap::new();
        for e in &self.entries {
            *frames_per_identity.entry(e.identity_id.clone()).or_insert(0) += 1;
        }
        let mean_norm = (!self.entries.is_empty())
            .then(|| self.entries.iter().map(|e| e.feature.norm()).sum::<f64>() / self.entries.len() as f64);
        BankStats {
            entry_count: self.entries.len(),
            identity_count: frames_per_identity.len(),
            frames_per_identity,
            mean_norm,
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), BankError> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        let dim = u32::try_from(self.dim).map_err(|_| BankError::Corrupt("dimension exceeds u32".into()))?;
        w.write_all(&dim.to_le_bytes())?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        w.write_all(&(2 * self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            for s in [&e.identity_id, &e.frame_id] {
                let len = u32::try_from(s.len()).map_err(|_| BankError::Corrupt("id longer than u32".into()))?;
                w.write_all(&len.to_le_bytes())?;
                w.write_all(s.as_bytes())?;
            }
        }
        for e in &self.entries {
            for &v in e.feature.as_slice() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, BankError> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(BankError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(BankError::VersionMismatch(version));
        }
        let dim = read_u32(&mut r)? as usize;
        if dim == 0 {
            return Err(BankError::ZeroDimension);
        }
        let count = usize::try_from(read_u64(&mut r)?).map_err(|_| BankError::Corrupt("entry count".into()))?;
        let strings = read_u64(&mut r)?;
        if strings != 2 * count as u64 {
            return Err(BankError::Corrupt(format!("string table holds {strings} ids for {count} entries")));
        }
        let mut ids = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let identity = read_string(&mut r)?;
            let frame = read_string(&mut r)?;
            ids.push((identity, frame));
        }
        let mut row = vec![0u8; 4 * dim];
        let mut records = Vec::with_capacity(ids.len());
        for (identity, frame) in ids {
            read_exact(&mut r, &mut row)?;
            let feature = row.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
            records.push(FeatureRecord::new(identity, frame, feature));
        }
        Self::ingest_records(records, dim)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), BankError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BankError> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), BankError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => BankError::TruncatedFile,
        _ => BankError::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, BankError> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, BankError> {
    let mut b = [0u8; 8];
    read_exact(r, &mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R) -> Result<String, BankError> {
    let len = read_u32(r)? as usize;
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| BankError::Corrupt("id is not valid UTF-8".into()))
}

/// Reads `identity_id,frame_id,f0,...,f{d-1}` rows. Returns the records and the
/// dimension implied by the header. Lines starting with `#` are skipped.
pub fn read_csv_records<R: Read>(reader: R) -> Result<(Vec<FeatureRecord>, usize), BankError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).comment(Some(b'#')).from_reader(reader);
    let headers = rdr.headers().map_err(|e| BankError::Parse(e.to_string()))?.clone();
    if headers.len() < 3 || &headers[0] != "identity_id" || &headers[1] != "frame_id" {
        return Err(BankError::Parse("expected header identity_id,frame_id,f0,...".into()));
    }
    for (j, h) in headers.iter().skip(2).enumerate() {
        if h != format!("f{j}") {
            return Err(BankError::Parse(format!("feature column {j} is named {h:?}, expected f{j}")));
        }
    }
    let dim = headers.len() - 2;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| BankError::Parse(e.to_string()))?;
        let feature = row
            .iter()
            .skip(2)
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| BankError::Parse(format!("row {i}: {e}")))?;
        out.push(FeatureRecord::new(&row[0], &row[1], feature));
    }
    Ok((out, dim))
}

/// Writes records in the layout read by [`read_csv_records`]. Values use the
/// shortest representation that parses back to the same `f64`.
pub fn write_csv_records<'a, W: Write>(
    records: impl IntoIterator<Item = (&'a str, &'a str, &'a [f64])>,
    dim: usize,
    writer: W,
) -> Result<(), BankError> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["identity_id".to_string(), "frame_id".to_string()];
    header.extend((0..dim).map(|j| format!("f{j}")));
    w.write_record(&header).map_err(|e| BankError::Parse(e.to_string()))?;
    for (identity, frame, feature) in records {
        let mut row = vec![identity.to_string(), frame.to_string()];
        row.extend(feature.iter().map(f64::to_string));
        w.write_record(&row).map_err(|e| BankError::Parse(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads one JSON object per non-blank line with `identity_id`, `frame_id`
/// and `feature` fields.
pub fn read_jsonl_records<R: Read>(reader: R) -> Result<Vec<FeatureRecord>, BankError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecord =
            serde_json::from_str(&line).map_err(|e| BankError::Parse(format!("line {}: {e}", i + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
