//! The base classifier: a plain MLP with relu hidden layers and linear
//! output logits. Its parameters are the thing the outer loop meta-learns
//! an initialization for.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{glorot, ParamLayout, ParameterSet};
use crate::tensor::Tensor;

pub const DEFAULT_HIDDEN: [usize; 2] = [40, 40];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden: Vec<usize>, classes: usize) -> Result<Self> {
        if input_dim == 0 || classes == 0 || hidden.contains(&0) {
            return Err(Error::contract(format!(
                "model dims must be positive: input {input_dim}, hidden {hidden:?}, classes {classes}"
            )));
        }
        Ok(ModelSpec {
            input_dim,
            hidden,
            classes,
        })
    }

    /// Widths of consecutive layers, input through logits.
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden);
        w.push(self.classes);
        w
    }

    pub fn layout(&self) -> ParamLayout {
        let w = self.widths();
        let mut entries = Vec::new();
        for i in 0..w.len() - 1 {
            entries.push((format!("layer{i}.w"), vec![w[i], w[i + 1]]));
            entries.push((format!("layer{i}.b"), vec![1, w[i + 1]]));
        }
        ParamLayout::from_entries(entries)
    }

    pub fn param_count(&self) -> usize {
        self.layout().total()
    }
}

/// Glorot weights, zero biases, reproducible from `seed`.
pub fn init_params(spec: &ModelSpec, seed: u64) -> Result<ParameterSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = spec.widths();
    let mut set = ParameterSet::new();
    for i in 0..w.len() - 1 {
        let (fan_in, fan_out) = (w[i], w[i + 1]);
        set.push(
            format!("layer{i}.w"),
            Tensor::from_vec(&[fan_in, fan_out], glorot(&mut rng, fan_in, fan_out))?,
        )?;
        set.push(format!("layer{i}.b"), Tensor::zeros(&[1, fan_out]))?;
    }
    Ok(set)
}

/// Logits for a `[n, input_dim]` batch under `params`, whose entries must
/// alternate `layer{i}.w` / `layer{i}.b` as produced by [`init_params`].
pub fn forward(x: &Tensor, params: &ParameterSet) -> Result<Tensor> {
    let pairs = weight_bias_pairs(params, "layer")?;
    feed(x, &pairs)
}

/// Splits a set into (weight, bias) layer pairs named `{prefix}{i}.w` and
/// `{prefix}{i}.b`. Shared with the critic head and the embedder.
pub(crate) fn weight_bias_pairs<'a>(
    params: &'a ParameterSet,
    prefix: &str,
) -> Result<Vec<(&'a Tensor, &'a Tensor)>> {
    let entries: Vec<(&str, &Tensor)> = params.iter().collect();
    if entries.is_empty() || !entries.len().is_multiple_of(2) {
        return Err(Error::contract(format!(
            "expected `{prefix}` weight/bias pairs, got {} tensors",
            entries.len()
        )));
    }
    let mut pairs = Vec::with_capacity(entries.len() / 2);
    for (i, pair) in entries.chunks(2).enumerate() {
        let (wn, w) = pair[0];
        let (bn, b) = pair[1];
        if wn != format!("{prefix}{i}.w") || bn != format!("{prefix}{i}.b") {
            return Err(Error::contract(format!(
                "unexpected parameter names `{wn}`, `{bn}` at layer {i}"
            )));
        }
        pairs.push((w, b));
    }
    Ok(pairs)
}

/// Relu MLP over explicit layer pairs; the last layer stays linear.
pub(crate) fn feed(x: &Tensor, pairs: &[(&Tensor, &Tensor)]) -> Result<Tensor> {
    let mut h = x.clone();
    let last = pairs.len() - 1;
    for (i, (w, b)) in pairs.iter().enumerate() {
        let rows = h.rows()?;
        h = h.matmul(w)?.add(&b.broadcast_row(rows)?)?;
        if i != last {
            h = h.relu();
        }
    }
    Ok(h)
}
