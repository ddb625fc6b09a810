use std::collections::HashMap;

use super::Tensor;
use crate::error::{Error, Result};

/// A named tensor. Buffers (running statistics) are stored alongside the
/// trainable weights but never receive updates from [`sgd_step`].
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub tensor: Tensor,
    pub trainable: bool,
}

/// Insertion-ordered parameter registry. Order is the checkpoint order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, tensor: Tensor, trainable: bool) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push(Param {
            name: name.to_string(),
            tensor,
            trainable,
        });
        Ok(())
    }

    pub fn add_param(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        self.insert(name, tensor, true)
    }

    pub fn add_buffer(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        self.insert(name, tensor, false)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].tensor)
    }

    /// Like [`get`](Self::get) but a missing name is an error.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::Format {
            kind: "checkpoint",
            msg: format!("missing tensor {name}"),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.index.get(name).is_some_and(|&i| self.entries[i].trainable)
    }

    /// Number of trainable scalars.
    pub fn n_trainable(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.tensor.shape.len())
            .sum()
    }

    /// Replaces tensor values from `other`, which must carry exactly the
    /// same names and shapes.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        if other.len() != self.len() {
            return Err(Error::format(
                "checkpoint",
                format!("{} tensors, expected {}", other.len(), self.len()),
            ));
        }
        for p in &mut self.entries {
            let t = other.require(&p.name)?;
            if t.shape != p.tensor.shape {
                return Err(Error::format(
                    "checkpoint",
                    format!("tensor {} has shape {}, expected {}", p.name, t.shape, p.tensor.shape),
                ));
            }
            p.tensor.data.clone_from(&t.data);
        }
        Ok(())
    }
}

/// Named gradient buffers, one per trainable parameter touched by a graph.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    entries: Vec<(String, Vec<f32>)>,
}

impl Gradients {
    pub fn new(entries: Vec<(String, Vec<f32>)>) -> Self {
        Gradients { entries }
    }

    pub fn get(&self, name: &str) -> Option<&[f32]> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, g)| &g[..])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.entries.iter().map(|(n, g)| (n.as_str(), &g[..]))
    }

    /// Squared L2 norm over all entries.
    pub fn norm_sq(&self) -> f64 {
        self.entries
            .iter()
            .flat_map(|(_, g)| g.iter())
            .map(|v| (*v as f64) * (*v as f64))
            .sum()
    }
}

/// Momentum SGD: `v <- momentum * v + g; p <- p - lr * v`.
///
/// `velocity` holds one buffer per named parameter and is created lazily.
/// All gradients are checked before any parameter is touched, so a
/// non-finite gradient leaves both `params` and `velocity` unchanged.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &Gradients,
    velocity: &mut HashMap<String, Vec<f32>>,
    lr: f32,
    momentum: f32,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Domain(format!("learning rate must be positive, got {lr}")));
    }
    for (name, g) in grads.iter() {
        let Some(p) = params.get(name) else {
            return Err(Error::Config(format!("gradient for unknown parameter {name}")));
        };
        if !params.is_trainable(name) {
            return Err(Error::Config(format!("gradient for non-trainable tensor {name}")));
        }
        if p.shape.len() != g.len() {
            return Err(Error::Shape(format!(
                "gradient for {name} has {} values, expected {}",
                g.len(),
                p.shape.len()
            )));
        }
        if let Some(bad) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "gradient of {name} at index {bad} is {}",
                g[bad]
            )));
        }
    }
    for (name, g) in grads.iter() {
        let v = velocity.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
        let p = params.get_mut(name).expect("checked above");
        for ((pv, vv), gv) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
            *vv = momentum * *vv + gv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}
