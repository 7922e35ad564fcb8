use std::collections::HashSet;

use crate::error::{CoreError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, mut t: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        t.requires_grad = true;
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.tensors)
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Attach gradients (as returned by [`Session::param_grads`]).
    pub fn set_grads(&mut self, grads: Vec<Option<Vec<f32>>>) -> Result<()> {
        if grads.len() != self.tensors.len() {
            return Err(CoreError::InvalidArgument(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.tensors.len()
            )));
        }
        for (t, g) in self.tensors.iter_mut().zip(grads) {
            if let Some(g) = &g {
                if g.len() != t.numel() {
                    return Err(CoreError::InvalidArgument(
                        "gradient length mismatch".into(),
                    ));
                }
            }
            t.grad = g;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for t in &mut self.tensors {
            t.grad = None;
        }
    }

    /// Replace the values of `id`, keeping the shape.
    pub fn assign(&mut self, id: ParamId, values: &[f32]) -> Result<()> {
        let t = &mut self.tensors[id.0];
        if values.len() != t.numel() {
            return Err(CoreError::InvalidArgument(format!(
                "assign {}: {} values for {}",
                self.names[id.0],
                values.len(),
                t.numel()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::NonFinite { op: "assign" });
        }
        t.data_mut().copy_from_slice(values);
        Ok(())
    }
}

/// One forward/backward pass over a [`ParamStore`].
///
/// Parameters are copied onto the tape lazily, the first time a forward pass
/// asks for them, so parameters a pass never touches get no gradient entry.
pub struct Session<'p> {
    pub tape: Tape,
    params: &'p ParamStore,
    vars: Vec<Option<Var>>,
    trainable: bool,
    frozen: HashSet<ParamId>,
}

impl<'p> Session<'p> {
    pub fn train(params: &'p ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            params,
            vars: vec![None; params.len()],
            trainable: true,
            frozen: HashSet::new(),
        }
    }

    /// No parameter requires gradient; backward is pointless but harmless.
    pub fn inference(params: &'p ParamStore) -> Self {
        Self {
            trainable: false,
            ..Self::train(params)
        }
    }

    /// Treat `ids` as constants in this session.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let mut t = self.params.get(id).clone();
        t.grad = None;
        t.requires_grad = self.trainable && !self.frozen.contains(&id);
        let v = self.tape.leaf(t);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.tape.backward(loss)
    }

    /// Gradients per parameter, `None` for parameters this pass never read.
    pub fn param_grads(&self) -> Vec<Option<Vec<f32>>> {
        self.vars
            .iter()
            .map(|v| v.and_then(|v| self.tape.grad(v).map(<[f32]>::to_vec)))
            .collect()
    }
}
