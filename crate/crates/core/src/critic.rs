//! The learned label-free loss C(F, W).
//!
//! Conditioning features per target example are concatenated into one row:
//! softmaxed predictions, the flattened base parameters, and a task
//! embedding, each optional but at least one present. Every row runs through
//! five dilated width-2 convolutions with dense channel concatenation, a
//! positional mean-pool, and a small fully connected head ending in one
//! scalar; the critic value is the mean over rows. The whole thing is tape
//! tracked, so descending it moves the base parameters.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::feed;
use crate::params::{glorot, ParamLayout, ParameterSet};
use crate::tensor::{concat, Tensor};

pub const CONV_LAYERS: usize = 5;

/// Which conditioning features feed the critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CriticFeatureFlags {
    pub use_predictions: bool,
    pub use_params: bool,
    pub use_task_embedding: bool,
}

impl CriticFeatureFlags {
    pub fn validate(&self) -> Result<()> {
        if !(self.use_predictions || self.use_params || self.use_task_embedding) {
            return Err(Error::contract("critic features: no flag set"));
        }
        Ok(())
    }
}

/// Architecture sizes. Defaults follow the reference description: 8 kernels
/// per conv layer, width-32 head, rows zero-padded up to length 32 so five
/// unpadded conv layers (which consume 31 positions) always fit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CriticSpec {
    pub channels: usize,
    pub fc_width: usize,
    pub min_input_len: usize,
}

impl Default for CriticSpec {
    fn default() -> Self {
        CriticSpec {
            channels: 8,
            fc_width: 32,
            min_input_len: 32,
        }
    }
}

/// Positions consumed by the five conv layers: sum of dilations 1+2+4+8+16.
const CONV_SHRINK: usize = 31;

impl CriticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.fc_width == 0 {
            return Err(Error::contract("critic spec: zero-width layer"));
        }
        Ok(())
    }

    /// Row length after the padding policy; errors if still too short for
    /// the conv stack to leave at least one position.
    pub fn padded_len(&self, input_dim: usize) -> Result<usize> {
        let len = input_dim.max(self.min_input_len);
        if len <= CONV_SHRINK {
            return Err(Error::contract(format!(
                "critic input length {len} after padding; the conv stack needs > {CONV_SHRINK}"
            )));
        }
        Ok(len)
    }

    /// Input channels of conv layer `i` under dense connectivity: the raw
    /// row plus every preceding layer's output.
    pub fn in_channels(&self, i: usize) -> usize {
        1 + self.channels * i
    }

    pub fn layout(&self) -> ParamLayout {
        let mut entries = Vec::new();
        for i in 0..CONV_LAYERS {
            entries.push((format!("conv{i}.w"), vec![self.channels, self.in_channels(i), 2]));
        }
        let dims = [self.channels, self.fc_width, self.fc_width, 1];
        for (i, pair) in dims.windows(2).enumerate() {
            entries.push((format!("fc{i}.w"), vec![pair[0], pair[1]]));
            entries.push((format!("fc{i}.b"), vec![1, pair[1]]));
        }
        ParamLayout::from_entries(entries)
    }

    pub fn param_count(&self) -> usize {
        self.layout().total()
    }
}

/// `2^i` for conv layer `i`, the only dilation schedule used.
pub fn dilation_for_layer(i: usize) -> Result<usize> {
    if i >= CONV_LAYERS {
        return Err(Error::contract(format!(
            "dilation_for_layer: layer {i} out of 0..{CONV_LAYERS}"
        )));
    }
    Ok(1 << i)
}

/// The assembled conditioning matrix, one row per target example.
#[derive(Debug, Clone)]
pub struct CriticFeatures {
    matrix: Tensor,
}

impl CriticFeatures {
    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }
}

/// Builds F from target logits, base parameters, and an optional task
/// embedding, in that fixed column order. Shared features (flattened θ,
/// embedding) are broadcast to every row; predictions are softmaxed.
pub fn assemble_features(
    logits_t: &Tensor,
    theta: &ParameterSet,
    task_emb: Option<&Tensor>,
    flags: &CriticFeatureFlags,
) -> Result<CriticFeatures> {
    flags.validate()?;
    let (n, _) = (logits_t.rows()?, logits_t.shape()[1]);
    if n == 0 {
        return Err(Error::contract("assemble_features: empty target set"));
    }
    let mut parts: Vec<Tensor> = Vec::new();
    if flags.use_predictions {
        parts.push(logits_t.softmax()?);
    }
    if flags.use_params {
        parts.push(theta.flatten()?.broadcast_row(n)?);
    }
    if flags.use_task_embedding {
        let emb = task_emb.ok_or_else(|| {
            Error::contract("assemble_features: task embedding flagged but absent")
        })?;
        if emb.shape().len() != 2 || emb.shape()[0] != 1 {
            return Err(Error::contract(format!(
                "assemble_features: task embedding shape {:?}, expected [1, E]",
                emb.shape()
            )));
        }
        parts.push(emb.broadcast_row(n)?);
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    let matrix = concat(&refs, 1)?;
    debug_assert!(
        !flags.use_predictions || {
            let c = logits_t.shape()[1];
            (0..n).all(|i| {
                let s: f64 = matrix.data()[i * matrix.shape()[1]..][..c].iter().sum();
                (s - 1.0).abs() < 1e-9
            })
        },
        "prediction columns must sum to 1"
    );
    Ok(CriticFeatures { matrix })
}

/// Glorot-initialized critic parameters; `input_dim` is checked against the
/// padding policy so an impossible geometry fails here rather than mid-run.
pub fn init_critic(input_dim: usize, spec: &CriticSpec, seed: u64) -> Result<ParameterSet> {
    spec.validate()?;
    spec.padded_len(input_dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParameterSet::new();
    for i in 0..CONV_LAYERS {
        let in_ch = spec.in_channels(i);
        // fan-in counts both taps of the width-2 kernel
        let vals = glorot(&mut rng, in_ch * 2, spec.channels);
        set.push(
            format!("conv{i}.w"),
            Tensor::from_vec(&[spec.channels, in_ch, 2], vals)?,
        )?;
    }
    let dims = [spec.channels, spec.fc_width, spec.fc_width, 1];
    for (i, pair) in dims.windows(2).enumerate() {
        set.push(
            format!("fc{i}.w"),
            Tensor::from_vec(&[pair[0], pair[1]], glorot(&mut rng, pair[0], pair[1]))?,
        )?;
        set.push(format!("fc{i}.b"), Tensor::zeros(&[1, pair[1]]))?;
    }
    Ok(set)
}

/// Scalar critic value for features `f` under parameters `w`.
///
/// Dense connectivity concatenates the raw input with all earlier conv
/// outputs on the channel axis; lengths are aligned by cropping longer
/// features to their valid suffix. The final row-mean sums in canonical
/// order, so permuting feature rows cannot change even the last bit.
pub fn critic_forward(f: &CriticFeatures, w: &ParameterSet, spec: &CriticSpec) -> Result<Tensor> {
    spec.validate()?;
    let (n, d) = f.matrix.dim2()?;
    let len = spec.padded_len(d)?;
    let mut x = f.matrix.reshape(&[n, 1, d])?;
    if len > d {
        x = x.embed(2, 0, len)?;
    }

    // (tensor, current length) for the raw input and each conv output
    let mut feats: Vec<(Tensor, usize)> = vec![(x, len)];
    let mut cur_len = len;
    for i in 0..CONV_LAYERS {
        let dilation = dilation_for_layer(i)?;
        let cropped: Vec<Tensor> = feats
            .iter()
            .map(|(t, l)| {
                if *l == cur_len {
                    Ok(t.clone())
                } else {
                    t.slice(2, l - cur_len, cur_len)
                }
            })
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = cropped.iter().collect();
        let stacked = concat(&refs, 1)?;
        let kernel = w
            .get(&format!("conv{i}.w"))
            .ok_or_else(|| Error::contract(format!("critic parameters missing conv{i}.w")))?;
        let out = stacked.conv1d_dilated(kernel, dilation)?.relu();
        cur_len -= dilation;
        feats.push((out, cur_len));
    }

    // positional mean-pool of the last conv layer: [n, ch, l] -> [n, ch]
    let (last, l_last) = feats.last().expect("conv stack nonempty").clone();
    let pooled = last
        .reshape(&[n * spec.channels, l_last])?
        .sum_cols()?
        .reshape(&[n, spec.channels])?
        .mul_scalar(1.0 / l_last as f64);

    let mut pairs = Vec::with_capacity(3);
    for i in 0..3 {
        let wt = w
            .get(&format!("fc{i}.w"))
            .ok_or_else(|| Error::contract(format!("critic parameters missing fc{i}.w")))?;
        let b = w
            .get(&format!("fc{i}.b"))
            .ok_or_else(|| Error::contract(format!("critic parameters missing fc{i}.b")))?;
        pairs.push((wt, b));
    }
    let per_row = feed(&pooled, &pairs)?;
    Ok(per_row.sum_canonical().mul_scalar(1.0 / n as f64))
}
