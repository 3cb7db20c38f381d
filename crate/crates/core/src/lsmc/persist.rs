//! Model files. Binary layout: the 8-byte magic `MFGLSMC2`, a little-endian u64 header length,
//! a JSON header (grid, basis, measure counts, scheme), then for every node the feature centres,
//! the row-major nf x nf feature map and row-major L x K coefficients as little-endian f64.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LsmcModel;
use crate::basis::BasisDescriptor;
use crate::config::TimeGrid;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MFGLSMC2";

#[derive(Serialize, Deserialize)]
struct Header {
    grid: TimeGrid,
    basis: BasisDescriptor,
    q_measure_index: usize,
    measures: usize,
    states: usize,
    scheme: String,
}

pub fn to_bytes(model: &LsmcModel) -> Vec<u8> {
    let header = Header {
        grid: model.grid.clone(),
        basis: model.basis.clone(),
        q_measure_index: model.q_measure_index,
        measures: model.measures,
        states: model.states,
        scheme: model.scheme.clone(),
    };
    let h = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + h.len() + 8 * model.beta.iter().map(|b| b.len() + 8).sum::<usize>());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(h.len() as u64).to_le_bytes());
    out.extend_from_slice(&h);
    for m in 0..model.grid.nodes() {
        for v in model.center[m].iter().chain(&model.whiten[m]).chain(&model.beta[m]) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<LsmcModel> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format("missing MFGLSMC2 magic".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..).ok_or_else(|| Error::Format("truncated".into()))?;
    if body.len() < hlen {
        return Err(Error::Format("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])?;
    let compiled = header.basis.compile()?;
    let (nf, nl) = (compiled.n_features(), compiled.len());
    let mut floats = body[hlen..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    let per_node = nf + nf * nf + nl * header.measures;
    if body[hlen..].len() != 8 * per_node * header.grid.nodes() {
        return Err(Error::Format("coefficient block has the wrong length".into()));
    }
    let mut take = |n: usize| -> Vec<f64> { floats.by_ref().take(n).collect() };
    let (mut center, mut whiten, mut beta) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..header.grid.nodes() {
        center.push(take(nf));
        whiten.push(take(nf * nf));
        beta.push(take(nl * header.measures));
    }
    LsmcModel {
        grid: header.grid,
        basis: header.basis,
        q_measure_index: header.q_measure_index,
        measures: header.measures,
        states: header.states,
        scheme: header.scheme,
        center,
        whiten,
        beta,
        compiled: None,
    }
    .finish()
}

/// Writes JSON when the path ends in `.json`, the binary layout otherwise.
pub fn save(model: &LsmcModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path)?;
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::to_writer(&mut f, model)?;
    } else {
        f.write_all(&to_bytes(model))?;
    }
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<LsmcModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.starts_with(MAGIC) {
        from_bytes(&bytes)
    } else {
        serde_json::from_slice::<LsmcModel>(&bytes)?.finish()
    }
}
