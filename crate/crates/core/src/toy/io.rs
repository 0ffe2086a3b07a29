//! `model.bin`: magic `RAFM`, u32 version, u64 header length, a JSON header
//! describing the architecture (plus free-form metadata), then every
//! trainable parameter as little-endian f64 in [`ToyState::flatten`] order.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::model::{CanonicalPointSet, DeformationModel, ToyState};
use super::{ToyError, ToyParams};

const MAGIC: &[u8; 4] = b"RAFM";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub params: ToyParams,
    pub n_points: usize,
    pub d_e: usize,
    /// Anything the producer wants to carry along (configs, provenance).
    pub meta: serde_json::Value,
}

pub fn write_model<W: Write>(
    mut w: W,
    state: &ToyState,
    params: &ToyParams,
    meta: serde_json::Value,
) -> Result<(), ToyError> {
    let header = ModelHeader { params: params.clone(), n_points: state.n(), d_e: state.d_e(), meta };
    let json = serde_json::to_vec(&header).map_err(|e| ToyError::Format(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for v in state.flatten() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<(), ToyError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => ToyError::Format("truncated model file".into()),
        _ => ToyError::Io(e),
    })
}

pub fn read_model<R: Read>(mut r: R) -> Result<(ToyState, ModelHeader), ToyError> {
    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic)?;
    if &magic != MAGIC {
        return Err(ToyError::Format("bad magic".into()));
    }
    let mut b4 = [0u8; 4];
    read_exact_or(&mut r, &mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(ToyError::Format(format!("unsupported version {version}")));
    }
    let mut b8 = [0u8; 8];
    read_exact_or(&mut r, &mut b8)?;
    let len = u64::from_le_bytes(b8);
    if len > 1 << 30 {
        return Err(ToyError::Format("header too large".into()));
    }
    let mut json = vec![0u8; len as usize];
    read_exact_or(&mut r, &mut json)?;
    let header: ModelHeader = serde_json::from_slice(&json).map_err(|e| ToyError::Format(e.to_string()))?;
    let p = &header.params;
    let mut state = ToyState {
        model: DeformationModel::zeros(p.d_g, header.d_e, p.hidden, p.activation, p.tau),
        points: CanonicalPointSet::new(
            vec![[0.0; 2]; header.n_points],
            p.d_g,
            vec![0.0; header.n_points * p.d_g],
            p.landmarks.clone(),
        )?,
    };
    let mut flat = vec![0.0; state.param_count()];
    for v in flat.iter_mut() {
        read_exact_or(&mut r, &mut b8)?;
        *v = f64::from_le_bytes(b8);
    }
    state.unflatten(&flat);
    if !state.is_finite() {
        return Err(ToyError::NonFiniteWeights);
    }
    Ok((state, header))
}
