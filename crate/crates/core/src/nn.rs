//! Named parameter storage and the dense layer shared by every network.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::error::Result;

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    Grid,
    Network,
    /// Motion-kernel networks; trained with the network rate unless frozen.
    Kernel,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push(ParamEntry { name, value, group });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Copy every parameter into `g`: as a leaf where `trainable` holds, as a
    /// constant otherwise.
    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&ParamEntry) -> bool) -> Binding {
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut live = Vec::with_capacity(self.entries.len());
        for e in &self.entries {
            let t = trainable(e);
            vars.push(if t {
                g.leaf(e.value.clone())
            } else {
                g.constant(e.value.clone())
            });
            live.push(t);
        }
        Binding { vars, live }
    }

    /// Bind the given graph values in place of the stored ones; every other
    /// entry becomes a constant. Used to differentiate through parameters
    /// supplied as external leaves.
    pub fn bind_override(&self, g: &mut Graph, overrides: &[(ParamId, Var)]) -> Binding {
        let mut vars = Vec::with_capacity(self.entries.len());
        let mut live = Vec::with_capacity(self.entries.len());
        for (i, e) in self.entries.iter().enumerate() {
            match overrides.iter().find(|(id, _)| id.0 == i) {
                Some(&(_, v)) => {
                    vars.push(v);
                    live.push(true);
                }
                None => {
                    vars.push(g.constant(e.value.clone()));
                    live.push(false);
                }
            }
        }
        Binding { vars, live }
    }

    /// Bind everything as constants (inference).
    pub fn bind_frozen(&self, g: &mut Graph) -> Binding {
        self.bind(g, |_| false)
    }
}

/// Parameter handles inside one graph.
pub struct Binding {
    vars: Vec<Var>,
    live: Vec<bool>,
}

impl Binding {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.live[id.0]
    }

    /// Per-parameter gradient, `None` for frozen entries.
    pub fn gradients(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .iter()
            .zip(&self.live)
            .map(|(v, &live)| if live { grads.take(*v) } else { None })
            .collect()
    }
}

/// Fully connected layer `y = x W + b`, `W` stored `[inputs, outputs]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform in `±1/sqrt(inputs)` for weights and bias.
    FanIn,
    Zeros,
}

impl Dense {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        group: ParamGroup,
        init: Init,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / (inputs.max(1) as f64).sqrt();
        let mut sample = |n: usize| -> Vec<f64> {
            match init {
                Init::FanIn => (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
                Init::Zeros => vec![0.0; n],
            }
        };
        let w = Tensor::new(vec![inputs, outputs], sample(inputs * outputs)).expect("dense shape");
        let b = Tensor::vector(sample(outputs));
        Dense {
            weight: store.add(format!("{name}.weight"), w, group),
            bias: store.add(format!("{name}.bias"), b, group),
            inputs,
            outputs,
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: Var) -> Result<Var> {
        g.linear(x, bind.var(self.weight), bind.var(self.bias))
    }
}
