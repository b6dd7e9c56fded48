//! Named parameter storage and tape binding.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Parameters in registration order, each with a gradient buffer.
///
/// Values are reference counted so that tapes can bind them without
/// copying; an optimizer step copies-on-write only if a tape is still alive.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Arc<Tensor>>,
    grads: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(Arc::new(value));
        self.names.push(name.into());
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.values[id.0])
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.values[id.0])
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| g.fill(0.0));
    }

    /// Replaces every value, checking names and shapes.
    pub fn load_values(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.values.len() {
            return Err(Error::Input(format!(
                "expected {} parameters, found {}",
                self.values.len(),
                named.len()
            )));
        }
        for (i, (name, value)) in named.into_iter().enumerate() {
            if name != self.names[i] {
                return Err(Error::Input(format!(
                    "parameter {i} is '{name}', expected '{}'",
                    self.names[i]
                )));
            }
            if value.shape() != self.values[i].shape() {
                return Err(Error::dim(
                    "load parameter",
                    value.shape(),
                    self.values[i].shape(),
                ));
            }
            self.values[i] = Arc::new(value);
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<Arc<Tensor>> {
        self.values.clone()
    }

    pub fn restore(&mut self, snapshot: Vec<Arc<Tensor>>) {
        assert_eq!(snapshot.len(), self.values.len());
        self.values = snapshot;
    }
}

/// Lazily binds parameters onto one tape.
///
/// With `track` off, parameters enter the tape as constants.
pub struct Binder<'a> {
    params: &'a ParamSet,
    vars: Vec<Option<Var>>,
    track: bool,
}

impl<'a> Binder<'a> {
    pub fn new(params: &'a ParamSet, track: bool) -> Self {
        Self {
            params,
            vars: vec![None; params.len()],
            track,
        }
    }

    pub fn tracking(&self) -> bool {
        self.track
    }

    pub fn params(&self) -> &'a ParamSet {
        self.params
    }

    pub fn var(&mut self, tape: &mut Tape, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let v = if self.track {
            tape.param(self.params.shared(id))
        } else {
            tape.constant_shared(self.params.shared(id))
        };
        self.vars[id.0] = Some(v);
        v
    }

    /// Parameters bound so far, with their tape handles.
    pub fn bound(&self) -> Vec<(ParamId, Var)> {
        self.vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect()
    }

    pub fn into_bound(self) -> Vec<(ParamId, Var)> {
        self.bound()
    }
}

/// Adds the tape's leaf gradients into the parameter gradient buffers.
pub fn collect_grads(params: &mut ParamSet, tape: &Tape, bound: &[(ParamId, Var)]) {
    for &(id, var) in bound {
        if let Some(g) = tape.grad(var) {
            params.grads[id.0].add_assign(g);
        }
    }
}
