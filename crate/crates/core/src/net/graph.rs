//! Serializable description of an instantiated network: stages, layers,
//! tensor shapes, fusion points and per-layer multiply-accumulate counts.

use serde::{Deserialize, Serialize};

/// `[channels, height, width]` of one image.
pub type Shape3 = [usize; 3];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerOp {
    Conv2d {
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        batchnorm: bool,
        relu: bool,
    },
    ResidualAdd {
        relu: bool,
    },
    GlobalAvgPool,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerGraph {
    pub name: String,
    pub op: LayerOp,
    pub in_shape: Shape3,
    pub out_shape: Shape3,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageGraph {
    pub index: usize,
    pub stem: bool,
    pub out_shape: Shape3,
    pub layers: Vec<LayerGraph>,
}

impl StageGraph {
    pub fn macs(&self) -> u64 {
        self.layers.iter().map(|l| l.macs).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchGraph {
    pub name: String,
    pub input: Shape3,
    pub stages: Vec<StageGraph>,
    pub head: Vec<LayerGraph>,
}

impl BranchGraph {
    pub fn layers(&self) -> impl Iterator<Item = &LayerGraph> {
        self.stages
            .iter()
            .flat_map(|s| s.layers.iter())
            .chain(self.head.iter())
    }

    pub fn macs(&self) -> u64 {
        self.layers().map(|l| l.macs).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AlignKind {
    Identity,
    Crop,
    Pad,
    Mixed,
}

/// Upsample-align-add joining low stage `stage` into the high branch.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionGraph {
    pub stage: usize,
    pub low_shape: Shape3,
    pub upsampled_shape: Shape3,
    pub high_shape: Shape3,
    pub align: AlignKind,
    /// Upsampling, alignment and addition are not multiply-accumulates.
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkGraph {
    pub name: String,
    pub multiscale: bool,
    pub alpha: f64,
    pub num_classes: usize,
    pub branches: Vec<BranchGraph>,
    pub fusion_points: Vec<FusionGraph>,
}

impl NetworkGraph {
    pub fn branch(&self, name: &str) -> Option<&BranchGraph> {
        self.branches.iter().find(|b| b.name == name)
    }
}

pub(crate) fn align_kind(from: (usize, usize), to: (usize, usize)) -> AlignKind {
    use std::cmp::Ordering::*;
    match (from.0.cmp(&to.0), from.1.cmp(&to.1)) {
        (Equal, Equal) => AlignKind::Identity,
        (Greater | Equal, Greater | Equal) => AlignKind::Crop,
        (Less | Equal, Less | Equal) => AlignKind::Pad,
        _ => AlignKind::Mixed,
    }
}
