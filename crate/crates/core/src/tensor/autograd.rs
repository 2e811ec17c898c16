//! Reverse pass over a tape.
//!
//! Adjoints are ordinary tensors built with the ops from [`super::ops`], so
//! when `create_graph` is set the backward computation is recorded like any
//! forward computation and can be differentiated again. With it unset the
//! tape's recording flag is suspended for the duration of the pass and the
//! returned gradients are plain constants.

use super::{Op, RecordingGuard, Tape, Tensor};
use crate::error::{Error, Result};

/// Gradient of a scalar `output` with respect to each tensor in `wrt`.
///
/// Entries that the output does not depend on (untracked, on another tape,
/// or recorded after the output) come back as zeros of the matching shape.
/// An untracked output yields all zeros.
pub fn grad_tensors(output: &Tensor, wrt: &[&Tensor], create_graph: bool) -> Result<Vec<Tensor>> {
    if output.len() != 1 {
        return Err(Error::contract(format!(
            "grad of non-scalar output, shape {:?}",
            output.shape()
        )));
    }
    let Some((tape, out_id)) = output.node.clone() else {
        return Ok(wrt.iter().map(|t| Tensor::zeros(t.shape())).collect());
    };
    let _guard = RecordingGuard::set(&tape, create_graph);

    let mut adjoints: Vec<Option<Tensor>> = vec![None; out_id + 1];
    adjoints[out_id] = Some(Tensor::from_vec(output.shape(), vec![1.0])?);

    // Nodes appended during the walk (when create_graph is set) have ids
    // beyond out_id and are never revisited.
    for id in (0..=out_id).rev() {
        let Some(g) = adjoints[id].clone() else {
            continue;
        };
        let (op, _) = tape.node_meta(id);
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(&mut adjoints, a, g.clone())?;
                accumulate(&mut adjoints, b, g)?;
            }
            Op::Sub(a, b) => {
                accumulate(&mut adjoints, a, g.clone())?;
                accumulate(&mut adjoints, b, g.neg())?;
            }
            Op::Mul(a, b) => {
                let ta = tape.tensor_for(a);
                let tb = tape.tensor_for(b);
                accumulate(&mut adjoints, a, g.mul(&tb)?)?;
                accumulate(&mut adjoints, b, g.mul(&ta)?)?;
            }
            Op::Div(a, b) => {
                // out = a/b: da = g/b, db = -g/b * out
                let tb = tape.tensor_for(b);
                let out = tape.tensor_for(id);
                let ga = g.div(&tb)?;
                accumulate(&mut adjoints, b, ga.mul(&out)?.neg())?;
                accumulate(&mut adjoints, a, ga)?;
            }
            Op::MulScalar(a, s) => accumulate(&mut adjoints, a, g.mul_scalar(s))?,
            Op::Relu(a) => {
                let mask = zero_one_mask(&tape.tensor_for(a));
                accumulate(&mut adjoints, a, g.mul(&mask)?)?;
            }
            Op::Exp(a) => {
                let out = tape.tensor_for(id);
                accumulate(&mut adjoints, a, g.mul(&out)?)?;
            }
            Op::Log(a) => {
                let ta = tape.tensor_for(a);
                accumulate(&mut adjoints, a, g.div(&ta)?)?;
            }
            Op::Matmul(a, b) => {
                let ta = tape.tensor_for(a);
                let tb = tape.tensor_for(b);
                accumulate(&mut adjoints, a, g.matmul(&tb.transpose()?)?)?;
                accumulate(&mut adjoints, b, ta.transpose()?.matmul(&g)?)?;
            }
            Op::Permute { input, perm } => {
                let mut inverse = vec![0usize; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                accumulate(&mut adjoints, input, g.permute(&inverse)?)?;
            }
            Op::Reshape(a) => {
                accumulate(&mut adjoints, a, g.reshape(&tape.node_shape(a))?)?;
            }
            Op::Slice { input, axis, start } => {
                let extent = tape.node_shape(input)[axis];
                accumulate(&mut adjoints, input, g.embed(axis, start, extent)?)?;
            }
            Op::Embed { input, axis, start } => {
                let len = tape.node_shape(input)[axis];
                accumulate(&mut adjoints, input, g.slice(axis, start, len)?)?;
            }
            Op::Sum(a) => {
                let shape = tape.node_shape(a);
                accumulate(&mut adjoints, a, g.scalar_expand(&shape)?)?;
            }
            Op::ScalarExpand(a) => {
                accumulate(&mut adjoints, a, g.sum().reshape(&tape.node_shape(a))?)?;
            }
            Op::BroadcastRow(a) => accumulate(&mut adjoints, a, g.sum_rows()?)?,
            Op::SumRows(a) => {
                let rows = tape.node_shape(a)[0];
                accumulate(&mut adjoints, a, g.broadcast_row(rows)?)?;
            }
            Op::BroadcastCol(a) => accumulate(&mut adjoints, a, g.sum_cols()?)?,
            Op::SumCols(a) => {
                let cols = tape.node_shape(a)[1];
                accumulate(&mut adjoints, a, g.broadcast_col(cols)?)?;
            }
            Op::RepeatRows { input, times } => {
                accumulate(&mut adjoints, input, g.group_sum_rows(times)?)?;
            }
            Op::TileRows { input, times } => {
                accumulate(&mut adjoints, input, g.fold_rows(times)?)?;
            }
            Op::GroupSumRows { input, group } => {
                accumulate(&mut adjoints, input, g.repeat_rows(group)?)?;
            }
            Op::FoldRows { input, times } => {
                accumulate(&mut adjoints, input, g.tile_rows(times)?)?;
            }
            Op::GatherLabel { input, labels } => {
                let classes = tape.node_shape(input)[1];
                accumulate(&mut adjoints, input, g.scatter_label(&labels, classes)?)?;
            }
            Op::ScatterLabel { input, labels, .. } => {
                accumulate(&mut adjoints, input, g.gather_label(&labels)?)?;
            }
        }
    }

    let grads = wrt
        .iter()
        .map(|t| match &t.node {
            Some((tp, id)) if Tape::ptr_eq(tp, &tape) && *id <= out_id => adjoints[*id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(t.shape())),
            _ => Tensor::zeros(t.shape()),
        })
        .collect();
    Ok(grads)
}

fn accumulate(adjoints: &mut [Option<Tensor>], id: usize, delta: Tensor) -> Result<()> {
    adjoints[id] = Some(match adjoints[id].take() {
        None => delta,
        Some(prev) => prev.add(&delta)?,
    });
    Ok(())
}

/// 1 where the input was strictly positive, 0 elsewhere; an untracked
/// constant, which is exactly the relu derivative convention used forward.
fn zero_one_mask(t: &Tensor) -> Tensor {
    let data: Vec<f64> = t.data().iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
    Tensor::from_vec(t.shape(), data).expect("mask shape")
}
