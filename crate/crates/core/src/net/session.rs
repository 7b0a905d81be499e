use std::collections::BTreeMap;

use crate::autodiff::{BatchStats, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Named tensors in deterministic (sorted) order.
pub type ParamStore<T> = BTreeMap<String, Tensor<T>>;

/// Whether batch normalization uses batch statistics (and records them for
/// the running averages) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One forward pass: the tape plus the parameter bindings made on it.
pub struct Session<T: Scalar> {
    pub tape: Tape<T>,
    mode: Mode,
    track_grad: bool,
    bound: BTreeMap<String, Var>,
    bn_updates: Vec<(String, BatchStats<T>)>,
}

impl<T: Scalar> Session<T> {
    pub fn new(mode: Mode, track_grad: bool) -> Self {
        Session {
            tape: Tape::new(),
            mode,
            track_grad,
            bound: BTreeMap::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn training() -> Self {
        Self::new(Mode::Train, true)
    }

    pub fn inference() -> Self {
        Self::new(Mode::Eval, false)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Parameter `name` from `store` as a tape leaf, bound once per session.
    pub fn bind(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let value = store
            .get(name)
            .ok_or_else(|| Error::InvalidSpec(format!("missing parameter {name}")))?
            .clone();
        let v = if self.track_grad {
            self.tape.param(value)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter name to tape variable, for every parameter read so far.
    pub fn bindings(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub(crate) fn record_bn(&mut self, unit: &str, stats: BatchStats<T>) {
        self.bn_updates.push((unit.to_string(), stats));
    }

    /// Batch statistics gathered by training-mode batch norms, keyed by unit.
    pub fn bn_updates(&self) -> &[(String, BatchStats<T>)] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<(String, BatchStats<T>)> {
        std::mem::take(&mut self.bn_updates)
    }
}
