//! Named parameter storage and per-forward binding onto a [`Graph`].

use crate::autodiff::{Gradients, Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Updated by the optimizer. Momentum-averaged gate weights are not.
    pub trainable: bool,
    /// Receives decoupled weight decay.
    pub decay: bool,
    /// Multiplies the scheduled learning rate.
    pub lr_scale: f64,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool, decay: bool) -> ParamId {
        let name = name.into();
        debug_assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate parameter {name}"
        );
        self.params.push(Param {
            name,
            value,
            trainable,
            decay,
            lr_scale: 1.0,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of scalar values across all parameters matching `filter`.
    pub fn count(&self, filter: impl Fn(&Param) -> bool) -> usize {
        self.params.iter().filter(|p| filter(p)).map(|p| p.value.numel()).sum()
    }
}

/// One forward pass: a graph plus the parameters bound onto it so far.
pub struct Session<'a> {
    pub graph: Graph<'a>,
    store: &'a ParamStore,
    bound: Vec<Option<Var>>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    /// Graph handle for parameter `id`; trainable parameters require grad.
    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let param = self.store.get(id);
        let v = if param.trainable {
            self.graph.param(&param.value)
        } else {
            self.graph.constant_ref(&param.value)
        };
        self.bound[id.0] = Some(v);
        v
    }

    /// Handle bound without gradient, regardless of trainability.
    pub fn frozen(&mut self, id: ParamId) -> Var {
        let param = self.store.get(id);
        self.graph.constant_ref(&param.value)
    }

    /// Runs backward and adds `scale × grad` into `buffer` for every bound parameter.
    pub fn backward_into(self, loss: Var, buffer: &mut GradBuffer, scale: f64) -> crate::Result<()> {
        let bound = self.bound;
        let grads: Gradients = self.graph.backward(loss)?;
        for (i, v) in bound.iter().enumerate() {
            if let Some(g) = v.and_then(|v| grads.get(v)) {
                for (acc, x) in buffer.grads[i].data_mut().iter_mut().zip(g.data()) {
                    *acc += scale * x;
                }
            }
        }
        Ok(())
    }
}

/// Gradient accumulator shaped like a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct GradBuffer {
    grads: Vec<Tensor>,
}

impl GradBuffer {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            grads: store.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.grads.iter()
    }
}
