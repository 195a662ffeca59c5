use std::collections::HashMap;

use super::graph::{Graph, Var};
use super::optim::{adam_step, OptimizerState};
use super::tensor::Tensor;
use crate::error::{Result, WrdError};

/// Ordered collection of named learnable arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.entries[i].1 = value;
        } else {
            self.index.insert(name.clone(), self.entries.len());
            self.entries.push((name, value));
        }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| WrdError::Input(format!("missing parameter array `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Copies every array into `g`, as differentiable leaves when
    /// `trainable`, else as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// Names existing graph variables after this set's arrays, in order.
    /// Used when the caller owns the leaves, as in gradient checks.
    pub fn bind_vars(&self, vars: &[Var]) -> Result<Bound> {
        if vars.len() != self.entries.len() {
            return Err(WrdError::Input(format!(
                "{} variables for {} parameter arrays",
                vars.len(),
                self.entries.len()
            )));
        }
        Ok(Bound {
            vars: vars.to_vec(),
            index: self.index.clone(),
        })
    }

    /// Applies one Adam update using the gradients that `bound` collected in
    /// `g`. Arrays that received no gradient are treated as zero-gradient.
    pub fn apply_adam(&mut self, g: &Graph, bound: &Bound, state: &mut OptimizerState, lr: f64) -> Result<()> {
        let grads: Vec<Tensor> = self
            .entries
            .iter()
            .zip(&bound.vars)
            .map(|((_, t), &v)| g.grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        let mut params: Vec<&mut Tensor> = self.entries.iter_mut().map(|(_, t)| t).collect();
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        adam_step(&mut params, &grad_refs, state, lr)
    }
}

/// Graph handles for a bound [`ParamSet`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| WrdError::Input(format!("missing parameter array `{name}`")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
