//! Multiply-accumulate accounting: static per-layer counts and the average
//! cost of early-exit inference.
//!
//! Convolutions cost `k² · (Cin/g) · Cout · Hout · Wout`, linear layers
//! `Cin · Cout`; normalization, activations, pooling, upsampling and additions
//! are counted as zero.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::{BaseNetwork, BranchGraph, MsNetwork, NetworkGraph};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    pub branch: String,
    /// `None` for classifier-head layers.
    pub stage: Option<usize>,
    pub name: String,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCost {
    pub stages: Vec<u64>,
    pub head: u64,
    pub total: u64,
}

impl BranchCost {
    fn from_graph(g: &BranchGraph) -> Self {
        let stages: Vec<u64> = g.stages.iter().map(|s| s.macs()).collect();
        let head = g.head.iter().map(|l| l.macs).sum();
        BranchCost {
            total: stages.iter().sum::<u64>() + head,
            stages,
            head,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostTable {
    pub layers: Vec<LayerCost>,
    pub low: BranchCost,
    pub high: BranchCost,
    /// MACs of the fusion additions (zero under this convention).
    pub fusion: u64,
    /// Per-image cost of the low branch including its classifier.
    pub f_low: u64,
    /// Incremental per-image cost of the high branch: stages, fusion, head.
    pub f_high: u64,
    pub low_res: usize,
    pub high_res: usize,
}

impl CostTable {
    pub fn from_graph(graph: &NetworkGraph, low_res: usize, high_res: usize) -> Result<Self> {
        let find = |name: &str| {
            graph
                .branch(name)
                .ok_or_else(|| Error::InvalidSpec(format!("graph has no {name} branch")))
        };
        let (lg, hg) = (find("low")?, find("high")?);
        let mut layers = Vec::new();
        for g in [lg, hg] {
            for s in &g.stages {
                layers.extend(s.layers.iter().map(|l| LayerCost {
                    branch: g.name.clone(),
                    stage: Some(s.index),
                    name: l.name.clone(),
                    macs: l.macs,
                }));
            }
            layers.extend(g.head.iter().map(|l| LayerCost {
                branch: g.name.clone(),
                stage: None,
                name: l.name.clone(),
                macs: l.macs,
            }));
        }
        let fusion = graph.fusion_points.iter().map(|f| f.macs).sum();
        let (low, high) = (BranchCost::from_graph(lg), BranchCost::from_graph(hg));
        Ok(CostTable {
            layers,
            f_low: low.total,
            f_high: high.total + fusion,
            low,
            high,
            fusion,
            low_res,
            high_res,
        })
    }

    pub fn total(&self) -> u64 {
        self.f_low + self.f_high
    }
}

/// Static costs of `ms` evaluated at the given input resolutions.
pub fn count_static<T: Scalar>(ms: &MsNetwork<T>, low_res: usize, high_res: usize) -> Result<CostTable> {
    CostTable::from_graph(&ms.graph_at(low_res, high_res)?, low_res, high_res)
}

/// Total MACs of a single-scale network at `resolution`.
pub fn count_base<T: Scalar>(net: &BaseNetwork<T>, resolution: usize) -> Result<u64> {
    Ok(net.describe("base", resolution, resolution)?.macs())
}

/// Average per-image cost when `exit_fraction` of the images stop at the
/// low branch: `F_L + (1 - exit_fraction) · F_H`.
pub fn count_dynamic(costs: &CostTable, exit_fraction: f64) -> Result<f64> {
    dynamic_cost(costs.f_low, costs.f_high, exit_fraction)
}

pub(crate) fn dynamic_cost(f_low: u64, f_high: u64, exit_fraction: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&exit_fraction) {
        return Err(Error::OutOfRange(format!(
            "exit fraction must be in [0, 1], got {exit_fraction}"
        )));
    }
    Ok(f_low as f64 + (1.0 - exit_fraction) * f_high as f64)
}

/// MACs in millions with three significant digits, e.g. `"41.2"`.
pub fn format_millions(macs: f64) -> String {
    let m = macs / 1e6;
    if m == 0.0 {
        return "0.00".into();
    }
    let digits = (2 - m.abs().log10().floor() as i32).max(0) as usize;
    format!("{m:.digits$}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub graph: NetworkGraph,
    pub costs: CostTable,
    pub f_low_mmacs: f64,
    pub f_high_mmacs: f64,
    pub total_mmacs: f64,
}

impl CostReport {
    pub fn new(graph: NetworkGraph, costs: CostTable) -> Self {
        CostReport {
            f_low_mmacs: costs.f_low as f64 / 1e6,
            f_high_mmacs: costs.f_high as f64 / 1e6,
            total_mmacs: costs.total() as f64 / 1e6,
            graph,
            costs,
        }
    }
}
