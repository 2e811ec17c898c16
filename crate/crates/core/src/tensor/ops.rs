//! Forward implementations of the op set.
//!
//! Every method validates shapes, computes the result eagerly, and records a
//! node when any input is tracked on a tape that is currently recording.
//! Reductions default to left-to-right summation; the `canonical` variants
//! sort addends first so the result is exactly invariant under input
//! permutation (the critic and the task embedder rely on that).

use std::rc::Rc;

use super::{canonical_sum, Op, Tape, Tensor};
use crate::error::{Error, Result};

// ── plumbing ──

/// Tape shared by the tracked inputs, if any is recording. Two tracked
/// inputs on different tapes is a caller bug.
fn shared_tape(inputs: &[&Tensor]) -> Result<Option<Tape>> {
    let mut found: Option<&Tape> = None;
    for t in inputs {
        if let Some((tape, _)) = &t.node {
            match found {
                None => found = Some(tape),
                Some(prev) if Tape::ptr_eq(prev, tape) => {}
                Some(_) => {
                    return Err(Error::contract("inputs belong to different tapes"));
                }
            }
        }
    }
    Ok(found.filter(|t| t.is_recording()).cloned())
}

fn emit(
    tape: Option<Tape>,
    what: &'static str,
    shape: Vec<usize>,
    data: Vec<f64>,
    build: impl FnOnce(&Tape) -> Op,
) -> Tensor {
    debug_assert!(
        data.iter().all(|v| !v.is_nan()),
        "NaN produced by op `{what}`"
    );
    let data: Rc<[f64]> = data.into();
    let node = tape.map(|tp| {
        let op = build(&tp);
        let id = tp.push(op, shape.clone(), Rc::clone(&data));
        (tp, id)
    });
    Tensor { shape, data, node }
}

fn same_shape(what: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::contract(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// (outer, extent, inner) block view of `shape` around `axis`.
fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

// ── elementwise and scalar ──

impl Tensor {
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("add", self, rhs)?;
        let tape = shared_tape(&[self, rhs])?;
        let data = self.data.iter().zip(rhs.data.iter()).map(|(a, b)| a + b).collect();
        Ok(emit(tape, "add", self.shape.clone(), data, |tp| {
            Op::Add(tp.intern(self), tp.intern(rhs))
        }))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, rhs)?;
        let tape = shared_tape(&[self, rhs])?;
        let data = self.data.iter().zip(rhs.data.iter()).map(|(a, b)| a - b).collect();
        Ok(emit(tape, "sub", self.shape.clone(), data, |tp| {
            Op::Sub(tp.intern(self), tp.intern(rhs))
        }))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, rhs)?;
        let tape = shared_tape(&[self, rhs])?;
        let data = self.data.iter().zip(rhs.data.iter()).map(|(a, b)| a * b).collect();
        Ok(emit(tape, "mul", self.shape.clone(), data, |tp| {
            Op::Mul(tp.intern(self), tp.intern(rhs))
        }))
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("div", self, rhs)?;
        let tape = shared_tape(&[self, rhs])?;
        let data = self.data.iter().zip(rhs.data.iter()).map(|(a, b)| a / b).collect();
        Ok(emit(tape, "div", self.shape.clone(), data, |tp| {
            Op::Div(tp.intern(self), tp.intern(rhs))
        }))
    }

    pub fn mul_scalar(&self, s: f64) -> Tensor {
        let tape = shared_tape(&[self]).expect("single input");
        let data = self.data.iter().map(|a| a * s).collect();
        emit(tape, "mul_scalar", self.shape.clone(), data, |tp| {
            Op::MulScalar(tp.intern(self), s)
        })
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    /// max(x, 0); the subgradient at zero is taken as zero.
    pub fn relu(&self) -> Tensor {
        let tape = shared_tape(&[self]).expect("single input");
        let data = self.data.iter().map(|a| a.max(0.0)).collect();
        emit(tape, "relu", self.shape.clone(), data, |tp| {
            Op::Relu(tp.intern(self))
        })
    }

    pub fn exp(&self) -> Tensor {
        let tape = shared_tape(&[self]).expect("single input");
        let data = self.data.iter().map(|a| a.exp()).collect();
        emit(tape, "exp", self.shape.clone(), data, |tp| {
            Op::Exp(tp.intern(self))
        })
    }

    pub fn log(&self) -> Tensor {
        let tape = shared_tape(&[self]).expect("single input");
        let data = self.data.iter().map(|a| a.ln()).collect();
        emit(tape, "log", self.shape.clone(), data, |tp| {
            Op::Log(tp.intern(self))
        })
    }
}

// ── linear algebra and layout ──

impl Tensor {
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dim2()?;
        let (k2, n) = rhs.dim2()?;
        if k != k2 {
            return Err(Error::contract(format!(
                "matmul: inner dims {k} and {k2} differ"
            )));
        }
        let tape = shared_tape(&[self, rhs])?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let lhs_row = &self.data[i * k..(i + 1) * k];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (kk, &a) in lhs_row.iter().enumerate() {
                let rhs_row = &rhs.data[kk * n..(kk + 1) * n];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(emit(tape, "matmul", vec![m, n], out, |tp| {
            Op::Matmul(tp.intern(self), tp.intern(rhs))
        }))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::contract(format!(
                "permute: {:?} is not a permutation of 0..{rank}",
                perm
            )));
        }
        let tape = shared_tape(&[self])?;
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let in_strides = strides(&self.shape);
        // stride to advance in the source when the i-th output coordinate ticks
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let mut out = vec![0.0; self.data.len()];
        let mut coord = vec![0usize; rank];
        let mut src = 0usize;
        for slot in out.iter_mut() {
            *slot = self.data[src];
            for d in (0..rank).rev() {
                coord[d] += 1;
                src += src_strides[d];
                if coord[d] < out_shape[d] {
                    break;
                }
                src -= src_strides[d] * out_shape[d];
                coord[d] = 0;
            }
        }
        let perm = perm.to_vec();
        Ok(emit(tape, "permute", out_shape, out, |tp| Op::Permute {
            input: tp.intern(self),
            perm,
        }))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        self.dim2()?;
        self.permute(&[1, 0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let want: usize = shape.iter().product();
        if want != self.data.len() {
            return Err(Error::contract(format!(
                "reshape: {:?} -> {:?} changes element count",
                self.shape, shape
            )));
        }
        let tape = shared_tape(&[self])?;
        Ok(emit(
            tape,
            "reshape",
            shape.to_vec(),
            self.data.to_vec(),
            |tp| Op::Reshape(tp.intern(self)),
        ))
    }

    /// Contiguous range `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::contract(format!(
                "slice: axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        if len == 0 || start + len > self.shape[axis] {
            return Err(Error::contract(format!(
                "slice: range {start}..{} exceeds extent {} on axis {axis}",
                start + len,
                self.shape[axis]
            )));
        }
        let tape = shared_tape(&[self])?;
        let (outer, extent, inner) = axis_blocks(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * extent + start) * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut out_shape = self.shape.clone();
        out_shape[axis] = len;
        Ok(emit(tape, "slice", out_shape, out, |tp| Op::Slice {
            input: tp.intern(self),
            axis,
            start,
        }))
    }

    /// Places `self` at offset `start` along `axis` inside a zero tensor
    /// whose extent on that axis is `extent`. Adjoint of `slice`.
    pub fn embed(&self, axis: usize, start: usize, extent: usize) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(Error::contract(format!(
                "embed: axis {axis} out of range for shape {:?}",
                self.shape
            )));
        }
        if start + self.shape[axis] > extent {
            return Err(Error::contract(format!(
                "embed: block {start}..{} exceeds extent {extent} on axis {axis}",
                start + self.shape[axis]
            )));
        }
        let tape = shared_tape(&[self])?;
        let (outer, in_extent, inner) = axis_blocks(&self.shape, axis);
        let mut out_shape = self.shape.clone();
        out_shape[axis] = extent;
        let mut out = vec![0.0; outer * extent * inner];
        for o in 0..outer {
            let src = o * in_extent * inner;
            let dst = (o * extent + start) * inner;
            out[dst..dst + in_extent * inner]
                .copy_from_slice(&self.data[src..src + in_extent * inner]);
        }
        Ok(emit(tape, "embed", out_shape, out, |tp| Op::Embed {
            input: tp.intern(self),
            axis,
            start,
        }))
    }
}

// ── reductions and broadcasts ──

impl Tensor {
    /// Sum of all elements as a `[1, 1]` tensor, left-to-right order.
    pub fn sum(&self) -> Tensor {
        let tape = shared_tape(&[self]).expect("single input");
        let total = self.data.iter().sum();
        emit(tape, "sum", vec![1, 1], vec![total], |tp| {
            Op::Sum(tp.intern(self))
        })
    }

    /// Permutation-invariant total: addends are sorted before summing.
    pub fn sum_canonical(&self) -> Tensor {
        let tape = shared_tape(&[self]).expect("single input");
        let total = canonical_sum(&mut self.data.to_vec());
        emit(tape, "sum_canonical", vec![1, 1], vec![total], |tp| {
            Op::Sum(tp.intern(self))
        })
    }

    /// Arithmetic mean of all elements as a `[1, 1]` tensor.
    pub fn mean(&self) -> Result<Tensor> {
        if self.data.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        Ok(self.sum().mul_scalar(1.0 / self.data.len() as f64))
    }

    /// One-element tensor replicated to `shape`.
    pub fn scalar_expand(&self, shape: &[usize]) -> Result<Tensor> {
        if self.data.len() != 1 {
            return Err(Error::contract(format!(
                "scalar_expand of shape {:?}",
                self.shape
            )));
        }
        let tape = shared_tape(&[self])?;
        let len = shape.iter().product();
        let data = vec![self.data[0]; len];
        Ok(emit(tape, "scalar_expand", shape.to_vec(), data, |tp| {
            Op::ScalarExpand(tp.intern(self))
        }))
    }

    /// `[1, c]` copied down to `[rows, c]`.
    pub fn broadcast_row(&self, rows: usize) -> Result<Tensor> {
        let (r, c) = self.dim2()?;
        if r != 1 || rows == 0 {
            return Err(Error::contract(format!(
                "broadcast_row: shape {:?} to {rows} rows",
                self.shape
            )));
        }
        let tape = shared_tape(&[self])?;
        let mut data = Vec::with_capacity(rows * c);
        for _ in 0..rows {
            data.extend_from_slice(&self.data);
        }
        Ok(emit(tape, "broadcast_row", vec![rows, c], data, |tp| {
            Op::BroadcastRow(tp.intern(self))
        }))
    }

    /// Column sums: `[r, c]` down to `[1, c]`.
    pub fn sum_rows(&self) -> Result<Tensor> {
        self.sum_rows_impl(false)
    }

    /// Column sums with sorted addends; exact under row permutation.
    pub fn sum_rows_canonical(&self) -> Result<Tensor> {
        self.sum_rows_impl(true)
    }

    fn sum_rows_impl(&self, canonical: bool) -> Result<Tensor> {
        let (r, c) = self.dim2()?;
        let tape = shared_tape(&[self])?;
        let mut out = vec![0.0; c];
        if canonical {
            let mut col = Vec::with_capacity(r);
            for (j, slot) in out.iter_mut().enumerate() {
                col.clear();
                col.extend((0..r).map(|i| self.data[i * c + j]));
                *slot = canonical_sum(&mut col);
            }
        } else {
            for i in 0..r {
                for (slot, v) in out.iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                    *slot += v;
                }
            }
        }
        Ok(emit(tape, "sum_rows", vec![1, c], out, |tp| {
            Op::SumRows(tp.intern(self))
        }))
    }

    /// `[r, 1]` copied across to `[r, cols]`.
    pub fn broadcast_col(&self, cols: usize) -> Result<Tensor> {
        let (r, c) = self.dim2()?;
        if c != 1 || cols == 0 {
            return Err(Error::contract(format!(
                "broadcast_col: shape {:?} to {cols} cols",
                self.shape
            )));
        }
        let tape = shared_tape(&[self])?;
        let mut data = Vec::with_capacity(r * cols);
        for i in 0..r {
            data.extend(std::iter::repeat_n(self.data[i], cols));
        }
        Ok(emit(tape, "broadcast_col", vec![r, cols], data, |tp| {
            Op::BroadcastCol(tp.intern(self))
        }))
    }

    /// Row sums: `[r, c]` down to `[r, 1]`.
    pub fn sum_cols(&self) -> Result<Tensor> {
        let (r, c) = self.dim2()?;
        let tape = shared_tape(&[self])?;
        let out = (0..r)
            .map(|i| self.data[i * c..(i + 1) * c].iter().sum())
            .collect();
        Ok(emit(tape, "sum_cols", vec![r, 1], out, |tp| {
            Op::SumCols(tp.intern(self))
        }))
    }

    /// Each row repeated `times` consecutive times: row `i*times + j` of the
    /// result is row `i` of the input.
    pub fn repeat_rows(&self, times: usize) -> Result<Tensor> {
        let (r, c) = self.dim2()?;
        if times == 0 {
            return Err(Error::contract("repeat_rows: times must be positive"));
        }
        let tape = shared_tape(&[self])?;
        let mut data = Vec::with_capacity(r * times * c);
        for i in 0..r {
            for _ in 0..times {
                data.extend_from_slice(&self.data[i * c..(i + 1) * c]);
            }
        }
        Ok(emit(tape, "repeat_rows", vec![r * times, c], data, |tp| {
            Op::RepeatRows {
                input: tp.intern(self),
                times,
            }
        }))
    }

    /// The whole matrix stacked `times` times: row `j*r + i` of the result
    /// is row `i` of the input.
    pub fn tile_rows(&self, times: usize) -> Result<Tensor> {
        let (r, c) = self.dim2()?;
        if times == 0 {
            return Err(Error::contract("tile_rows: times must be positive"));
        }
        let tape = shared_tape(&[self])?;
        let mut data = Vec::with_capacity(r * times * c);
        for _ in 0..times {
            data.extend_from_slice(&self.data);
        }
        Ok(emit(tape, "tile_rows", vec![r * times, c], data, |tp| {
            Op::TileRows {
                input: tp.intern(self),
                times,
            }
        }))
    }

    /// Sums each run of `group` consecutive rows. Adjoint of `repeat_rows`.
    pub fn group_sum_rows(&self, group: usize) -> Result<Tensor> {
        let (r, c) = self.dim2()?;
        if group == 0 || r % group != 0 {
            return Err(Error::contract(format!(
                "group_sum_rows: {r} rows not divisible into groups of {group}"
            )));
        }
        let tape = shared_tape(&[self])?;
        let out_rows = r / group;
        let mut out = vec![0.0; out_rows * c];
        for i in 0..r {
            let dst = (i / group) * c;
            for (slot, v) in out[dst..dst + c].iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *slot += v;
            }
        }
        Ok(emit(tape, "group_sum_rows", vec![out_rows, c], out, |tp| {
            Op::GroupSumRows {
                input: tp.intern(self),
                group,
            }
        }))
    }

    /// Sums the `times` stacked copies back down. Adjoint of `tile_rows`.
    pub fn fold_rows(&self, times: usize) -> Result<Tensor> {
        let (r, c) = self.dim2()?;
        if times == 0 || r % times != 0 {
            return Err(Error::contract(format!(
                "fold_rows: {r} rows not divisible by {times}"
            )));
        }
        let tape = shared_tape(&[self])?;
        let out_rows = r / times;
        let mut out = vec![0.0; out_rows * c];
        for i in 0..r {
            let dst = (i % out_rows) * c;
            for (slot, v) in out[dst..dst + c].iter_mut().zip(&self.data[i * c..(i + 1) * c]) {
                *slot += v;
            }
        }
        Ok(emit(tape, "fold_rows", vec![out_rows, c], out, |tp| {
            Op::FoldRows {
                input: tp.intern(self),
                times,
            }
        }))
    }

    /// Picks `x[i, labels[i]]` per row: `[n, c]` to `[n, 1]`.
    pub fn gather_label(&self, labels: &[usize]) -> Result<Tensor> {
        let (n, c) = self.dim2()?;
        check_labels(labels, n, c)?;
        let tape = shared_tape(&[self])?;
        let out = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| self.data[i * c + l])
            .collect();
        let labels: Rc<[usize]> = labels.into();
        Ok(emit(tape, "gather_label", vec![n, 1], out, |tp| {
            Op::GatherLabel {
                input: tp.intern(self),
                labels,
            }
        }))
    }

    /// Writes `x[i, 0]` into column `labels[i]` of a zero `[n, classes]`
    /// matrix. Adjoint of `gather_label`.
    pub fn scatter_label(&self, labels: &[usize], classes: usize) -> Result<Tensor> {
        let (n, c) = self.dim2()?;
        if c != 1 {
            return Err(Error::contract(format!(
                "scatter_label: expected [n, 1], got {:?}",
                self.shape
            )));
        }
        check_labels(labels, n, classes)?;
        let tape = shared_tape(&[self])?;
        let mut out = vec![0.0; n * classes];
        for (i, &l) in labels.iter().enumerate() {
            out[i * classes + l] = self.data[i];
        }
        let labels: Rc<[usize]> = labels.into();
        Ok(emit(tape, "scatter_label", vec![n, classes], out, |tp| {
            Op::ScatterLabel {
                input: tp.intern(self),
                labels,
            }
        }))
    }
}

fn check_labels(labels: &[usize], n: usize, classes: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::contract(format!(
            "{} labels for {n} rows",
            labels.len()
        )));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::contract(format!(
            "label {l} out of range for {classes} classes"
        )));
    }
    Ok(())
}

// ── composites ──

/// Concatenation along `axis`, built from `embed` + `add` so it needs no
/// backward rule of its own.
pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts
        .first()
        .ok_or_else(|| Error::contract("concat of zero tensors"))?;
    if axis >= first.shape.len() {
        return Err(Error::contract(format!(
            "concat: axis {axis} out of range for shape {:?}",
            first.shape
        )));
    }
    for p in parts {
        if p.shape.len() != first.shape.len()
            || p.shape
                .iter()
                .zip(&first.shape)
                .enumerate()
                .any(|(d, (a, b))| d != axis && a != b)
        {
            return Err(Error::contract(format!(
                "concat: shape {:?} incompatible with {:?} on axis {axis}",
                p.shape, first.shape
            )));
        }
    }
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let mut acc: Option<Tensor> = None;
    let mut offset = 0;
    for p in parts {
        let placed = p.embed(axis, offset, total)?;
        offset += p.shape[axis];
        acc = Some(match acc {
            None => placed,
            Some(prev) => prev.add(&placed)?,
        });
    }
    Ok(acc.expect("parts nonempty"))
}

impl Tensor {
    /// Row-wise softmax. The row max is subtracted as a constant before
    /// exponentiation; softmax is exactly shift-invariant, so this changes
    /// neither values nor gradients while keeping `exp` in range.
    pub fn softmax(&self) -> Result<Tensor> {
        let (_, c) = self.dim2()?;
        let z = self.sub(&self.row_max()?.broadcast_col(c)?)?;
        let e = z.exp();
        e.div(&e.sum_cols()?.broadcast_col(c)?)
    }

    /// Mean over rows of `log-sum-exp(row) - row[label]`, the cross-entropy
    /// of softmaxed logits against integer labels.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Tensor> {
        let (n, c) = self.dim2()?;
        check_labels(labels, n, c)?;
        let z = self.sub(&self.row_max()?.broadcast_col(c)?)?;
        let lse = z.exp().sum_cols()?.log();
        lse.sub(&z.gather_label(labels)?)?.mean()
    }

    /// Per-row maxima as an untracked `[n, 1]` constant.
    fn row_max(&self) -> Result<Tensor> {
        let (n, c) = self.dim2()?;
        if c == 0 {
            return Err(Error::contract("row_max of zero columns"));
        }
        let data = (0..n)
            .map(|i| self.data[i * c..(i + 1) * c].iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b)))
            .collect();
        Tensor::from_vec(&[n, 1], data)
    }

    /// Dilated width-2 convolution of a batch of sequences: `[n, c_in, l]`
    /// against kernels `[c_out, c_in, 2]` gives `[n, c_out, l - dilation]`
    /// (stride 1, no padding). Output position `t` taps inputs `t` and
    /// `t + dilation`. The two taps are expressed as matrix products so one
    /// call covers the whole batch.
    pub fn conv1d_dilated(&self, kernel: &Tensor, dilation: usize) -> Result<Tensor> {
        if self.shape.len() != 3 {
            return Err(Error::contract(format!(
                "conv1d_dilated: expected [n, c_in, l], got {:?}",
                self.shape
            )));
        }
        if kernel.shape.len() != 3 || kernel.shape[2] != 2 {
            return Err(Error::contract(format!(
                "conv1d_dilated: expected kernel [c_out, c_in, 2], got {:?}",
                kernel.shape
            )));
        }
        let (n, c_in, l) = (self.shape[0], self.shape[1], self.shape[2]);
        let (c_out, kc) = (kernel.shape[0], kernel.shape[1]);
        if kc != c_in {
            return Err(Error::contract(format!(
                "conv1d_dilated: {c_in} input channels but kernel expects {kc}"
            )));
        }
        if dilation == 0 || l <= dilation {
            return Err(Error::contract(format!(
                "conv1d_dilated: input length {l} must exceed dilation {dilation}"
            )));
        }
        let l_out = l - dilation;
        let tap = |start: usize, k_idx: usize| -> Result<Tensor> {
            let t = self
                .slice(2, start, l_out)?
                .permute(&[1, 0, 2])?
                .reshape(&[c_in, n * l_out])?;
            let k = kernel.slice(2, k_idx, 1)?.reshape(&[c_out, c_in])?;
            k.matmul(&t)?
                .reshape(&[c_out, n, l_out])?
                .permute(&[1, 0, 2])
        };
        tap(0, 0)?.add(&tap(dilation, 1)?)
    }
}
