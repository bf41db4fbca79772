//! Binary tensor files for policies and the auxiliary models.
//!
//! Layout (little endian): magic `SEGOTNSR`, `u32` format version, `u32` kind
//! tag, `u32` rank, `u64` per dimension, `u32` metadata count, metadata `f64`s,
//! then the `f64` data in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Result, SegoError};
use crate::models::{LikelihoodEstimator, OptimizerModel, ProposalModel};
use crate::policy::TabularPolicy;
use crate::posterior::WaypointGrid;

const MAGIC: &[u8; 8] = b"SEGOTNSR";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    Policy = 1,
    Proposal = 2,
    Optimizer = 3,
    Likelihood = 4,
}

impl TensorKind {
    fn from_tag(tag: u32) -> Result<Self> {
        Ok(match tag {
            1 => TensorKind::Policy,
            2 => TensorKind::Proposal,
            3 => TensorKind::Optimizer,
            4 => TensorKind::Likelihood,
            _ => return Err(SegoError::Format(format!("unknown tensor kind tag {tag}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub kind: TensorKind,
    pub dims: Vec<usize>,
    pub meta: Vec<f64>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(self.kind as u32).to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for x in self.meta.iter().chain(&self.data) {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Tensor> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(SegoError::Format("bad tensor magic".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(SegoError::Format(format!("unsupported tensor format version {version}")));
        }
        let kind = TensorKind::from_tag(read_u32(&mut r)?)?;
        let rank = read_u32(&mut r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u64(&mut r)? as usize);
        }
        let n_meta = read_u32(&mut r)? as usize;
        let meta = (0..n_meta).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().try_fold(1usize, |a, d| a.checked_mul(*d)).ok_or_else(|| {
            SegoError::Format("tensor dimensions overflow".into())
        })?;
        let mut data = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            data.push(read_f64(&mut r)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(SegoError::Format("trailing bytes after tensor data".into()));
        }
        Ok(Tensor { kind, dims, meta, data })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Tensor> {
        Tensor::read_from(BufReader::new(File::open(path)?))
    }

    fn expect(&self, kind: TensorKind, rank: usize, meta: usize) -> Result<()> {
        if self.kind != kind || self.dims.len() != rank || self.meta.len() != meta {
            return Err(SegoError::Format(format!(
                "expected {kind:?} tensor of rank {rank}, found {:?} of rank {}",
                self.kind,
                self.dims.len()
            )));
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// `[state][goal][action]` logits; metadata is the temperature.
pub fn policy_to_tensor(p: &TabularPolicy) -> Tensor {
    let (s, g, a) = p.dims();
    Tensor { kind: TensorKind::Policy, dims: vec![s, g, a], meta: vec![p.temperature()], data: p.raw_logits().to_vec() }
}

pub fn policy_from_tensor(t: &Tensor) -> Result<TabularPolicy> {
    t.expect(TensorKind::Policy, 3, 1)?;
    TabularPolicy::from_logits(t.dims[0], t.dims[1], t.dims[2], t.data.clone(), t.meta[0])
}

/// `[goal][state][waypoint]` logits; metadata is the smoothing mass.
pub fn proposal_to_tensor(f: &ProposalModel) -> Tensor {
    let grid = f.grid();
    Tensor {
        kind: TensorKind::Proposal,
        dims: vec![grid.num_goals, grid.num_states, grid.len()],
        meta: vec![f.smoothing_eps()],
        data: f.raw_logits().to_vec(),
    }
}

pub fn proposal_from_tensor(t: &Tensor) -> Result<ProposalModel> {
    t.expect(TensorKind::Proposal, 3, 1)?;
    ProposalModel::from_logits(WaypointGrid::new(t.dims[0], t.dims[1]), t.data.clone(), t.meta[0])
}

/// Materialized optimizer rows as `[R, 3 + W]`: goal, state, from-index,
/// then the row logits. Metadata is the smoothing mass and the grid shape.
pub fn optimizer_to_tensor(h: &OptimizerModel) -> Tensor {
    let grid = h.grid();
    let mut data = Vec::with_capacity(h.rows().len() * (3 + grid.len()));
    for (&(g, s, from), row) in h.rows() {
        data.extend([g as f64, s as f64, from as f64]);
        data.extend_from_slice(row);
    }
    Tensor {
        kind: TensorKind::Optimizer,
        dims: vec![h.rows().len(), 3 + grid.len()],
        meta: vec![h.smoothing_eps(), grid.num_goals as f64, grid.num_states as f64],
        data,
    }
}

pub fn optimizer_from_tensor(t: &Tensor) -> Result<OptimizerModel> {
    t.expect(TensorKind::Optimizer, 2, 3)?;
    let grid = WaypointGrid::new(t.meta[1] as usize, t.meta[2] as usize);
    if t.dims[1] != 3 + grid.len() {
        return Err(SegoError::Format("optimizer row width does not match the grid".into()));
    }
    let mut h = OptimizerModel::uniform(grid, t.meta[0]);
    for row in t.data.chunks(t.dims[1]) {
        let (g, s, from) = (row[0] as usize, row[1] as usize, row[2] as usize);
        if g >= grid.num_goals || s >= grid.num_states || from >= grid.len() {
            return Err(SegoError::Format("optimizer row key outside the grid".into()));
        }
        h.set_row(crate::env::GoalId(g), crate::env::StateId(s), grid.waypoint(from), row[3..].to_vec())?;
    }
    Ok(h)
}

/// `[goal][state]` log values; metadata is the version.
pub fn likelihood_to_tensor(m: &LikelihoodEstimator) -> Tensor {
    let (g, s) = m.dims();
    Tensor { kind: TensorKind::Likelihood, dims: vec![g, s], meta: vec![m.version() as f64], data: m.log_values().to_vec() }
}

pub fn likelihood_from_tensor(t: &Tensor) -> Result<LikelihoodEstimator> {
    t.expect(TensorKind::Likelihood, 2, 1)?;
    LikelihoodEstimator::from_log_values(t.dims[0], t.dims[1], t.data.clone(), t.meta[0] as u64)
}
