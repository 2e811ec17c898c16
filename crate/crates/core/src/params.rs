//! Named, ordered parameter collections.
//!
//! All trainable state (base model, critic, embedder, learnable step sizes)
//! lives in `ParameterSet`s. Order is insertion order and is significant:
//! flattening, checkpoint payloads, and optimizer state all follow it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{concat, grad_tensors, Tape, Tensor};

#[derive(Debug, Clone, Default)]
pub struct ParameterSet {
    entries: Vec<(String, Tensor)>,
}

/// Names and shapes only; two sets with equal layouts are interchangeable
/// for flatten/unflatten and checkpoint payloads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    entries: Vec<(String, Vec<usize>)>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    pub fn from_entries(entries: Vec<(String, Tensor)>) -> Result<Self> {
        let mut set = ParameterSet::new();
        for (name, t) in entries {
            set.push(name, t)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::contract("parameter name must be nonempty"));
        }
        if self.get(&name).is_some() {
            return Err(Error::contract(format!("duplicate parameter `{name}`")));
        }
        self.entries.push((name, t));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find_map(|(n, t)| (n == name).then_some(t))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.shape().to_vec()))
                .collect(),
        }
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Registers every tensor as a leaf on `tape`, in order.
    pub fn tracked(&self, tape: &Tape) -> ParameterSet {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), tape.watch(t)))
                .collect(),
        }
    }

    pub fn detached(&self) -> ParameterSet {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(n, t)| (n.clone(), t.detached()))
                .collect(),
        }
    }

    /// All values as one `[1, p]` row in entry order, connected to the same
    /// tape as the inputs. An empty set gives a zero-width row.
    pub fn flatten(&self) -> Result<Tensor> {
        if self.entries.is_empty() {
            return Tensor::from_vec(&[1, 0], Vec::new());
        }
        let rows: Vec<Tensor> = self
            .entries
            .iter()
            .map(|(_, t)| t.reshape(&[1, t.len()]))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = rows.iter().collect();
        concat(&refs, 1)
    }

    /// Inverse of [`flatten`](Self::flatten) for a known layout. Values are
    /// copied, never rounded, so a flatten/unflatten round trip is bitwise.
    pub fn unflatten(flat: &Tensor, layout: &ParamLayout) -> Result<ParameterSet> {
        let (rows, width) = (flat.shape().first(), flat.len());
        if flat.shape().len() != 2 || rows != Some(&1) || width != layout.total() {
            return Err(Error::contract(format!(
                "unflatten: shape {:?} does not hold {} values",
                flat.shape(),
                layout.total()
            )));
        }
        let mut set = ParameterSet::new();
        let mut offset = 0;
        for (name, shape) in &layout.entries {
            let len: usize = shape.iter().product();
            let piece = flat.slice(1, offset, len)?.reshape(shape)?;
            offset += len;
            set.push(name.clone(), piece)?;
        }
        Ok(set)
    }

    /// Raw values in entry order, detached from any tape.
    pub fn flat_data(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for (_, t) in &self.entries {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Rebuilds a set from raw values laid out per `layout`.
    pub fn from_flat_data(layout: &ParamLayout, values: &[f64]) -> Result<ParameterSet> {
        if values.len() != layout.total() {
            return Err(Error::contract(format!(
                "{} values for layout of {}",
                values.len(),
                layout.total()
            )));
        }
        let mut set = ParameterSet::new();
        let mut offset = 0;
        for (name, shape) in &layout.entries {
            let len: usize = shape.iter().product();
            set.push(
                name.clone(),
                Tensor::from_vec(shape, values[offset..offset + len].to_vec())?,
            )?;
            offset += len;
        }
        Ok(set)
    }

    /// Applies `f` to every entry, keeping names and order.
    pub fn map(&self, mut f: impl FnMut(&str, &Tensor) -> Result<Tensor>) -> Result<ParameterSet> {
        let mut set = ParameterSet::new();
        for (name, t) in &self.entries {
            set.push(name.clone(), f(name, t)?)?;
        }
        Ok(set)
    }

    /// True when both sets have the same layout and bitwise-equal values.
    pub fn bitwise_eq(&self, other: &ParameterSet) -> bool {
        self.layout() == other.layout()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((_, a), (_, b))| {
                    a.data()
                        .iter()
                        .zip(b.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
                })
    }
}

impl ParamLayout {
    pub fn from_entries(entries: Vec<(String, Vec<usize>)>) -> ParamLayout {
        ParamLayout { entries }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.entries.iter().map(|(n, s)| (n.as_str(), s.as_slice()))
    }

    pub fn total(&self) -> usize {
        self.entries
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Gradient of a scalar `output` with respect to every entry of `wrt`.
/// See [`grad_tensors`] for reachability and `create_graph` semantics.
pub fn grad(output: &Tensor, wrt: &ParameterSet, create_graph: bool) -> Result<ParameterSet> {
    let tensors: Vec<&Tensor> = wrt.iter().map(|(_, t)| t).collect();
    let grads = grad_tensors(output, &tensors, create_graph)?;
    let entries = wrt
        .iter()
        .map(|(n, _)| n.to_string())
        .zip(grads)
        .collect();
    ParameterSet::from_entries(entries)
}

/// Central-difference gradient of `f` at `params`, one coordinate at a time.
/// Slow and tape-free on purpose: this is the reference the autodiff answers
/// are checked against.
pub fn finite_diff_oracle(
    f: impl Fn(&ParameterSet) -> Result<f64>,
    params: &ParameterSet,
    eps: f64,
) -> Result<ParameterSet> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(Error::contract(format!("finite_diff_oracle: eps {eps}")));
    }
    let base = params.flat_data();
    let layout = params.layout();
    let eval = |values: &[f64]| -> Result<f64> {
        f(&ParameterSet::from_flat_data(&layout, values)?)
    };
    let mut grad_flat = Vec::with_capacity(base.len());
    let mut work = base.clone();
    for i in 0..base.len() {
        work[i] = base[i] + eps;
        let up = eval(&work)?;
        work[i] = base[i] - eps;
        let down = eval(&work)?;
        work[i] = base[i];
        grad_flat.push((up - down) / (2.0 * eps));
    }
    ParameterSet::from_flat_data(&layout, &grad_flat)
}

/// Glorot-uniform values for a `[fan_in, fan_out]` weight matrix.
pub(crate) fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Vec<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..fan_in * fan_out)
        .map(|_| rng.random_range(-limit..limit))
        .collect()
}
