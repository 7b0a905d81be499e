//! Network descriptions, single-scale instantiation and two-scale wrapping.

pub mod base;
pub mod graph;
pub mod msnet;
pub mod session;
pub mod spec;

pub use base::{build_base, BaseNetwork};
pub use graph::{AlignKind, BranchGraph, FusionGraph, LayerGraph, LayerOp, NetworkGraph, StageGraph};
pub use msnet::{wrap_multiscale, HighFeatures, HighTrace, JointOutput, MsNetwork};
pub use session::{Mode, ParamStore, Session};
pub use spec::{BaseNetworkSpec, LayerSpec, StageSpec};

use sha2::{Digest, Sha256};

use crate::autodiff::BatchStats;
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Access to a network's named tensors, shared by training and checkpoints.
pub trait Parameterized<T: Scalar> {
    fn param_stores(&self) -> Vec<&ParamStore<T>>;
    fn param_stores_mut(&mut self) -> Vec<&mut ParamStore<T>>;
    fn buffer_stores(&self) -> Vec<&ParamStore<T>>;
    fn buffer_stores_mut(&mut self) -> Vec<&mut ParamStore<T>>;
    fn apply_bn_updates(&mut self, updates: &[(String, BatchStats<T>)]) -> Result<()>;
    /// Structural identity (architecture, resolutions); hashed into checkpoints.
    fn identity(&self) -> serde_json::Value;

    fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.param_stores().into_iter().find_map(|s| s.get(name))
    }

    fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.param_stores_mut()
            .into_iter()
            .find_map(|s| s.get_mut(name))
    }

    fn buffer_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.buffer_stores_mut()
            .into_iter()
            .find_map(|s| s.get_mut(name))
    }

    fn param_names(&self) -> Vec<String> {
        self.param_stores()
            .into_iter()
            .flat_map(|s| s.keys().cloned())
            .collect()
    }

    fn num_params(&self) -> usize {
        self.param_stores()
            .into_iter()
            .flat_map(|s| s.values())
            .map(Tensor::len)
            .sum()
    }

    /// First eight bytes (little-endian) of SHA-256 over the identity JSON.
    fn spec_hash(&self) -> u64 {
        let digest = Sha256::digest(self.identity().to_string().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}
