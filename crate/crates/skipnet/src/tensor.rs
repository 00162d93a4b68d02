//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] records primitive operations during a forward pass (define-by-run)
//! and replays them in reverse to accumulate gradients. Tapes are rebuilt per
//! forward pass and confined to a single thread; everything is 64-bit.

use crate::error::{Error, Result};

/// Plain dense tensor value: row-major f64 data plus shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(data.len(), numel, "data length must match shape product");
        Tensor { data, shape }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { data: vec![0.0; numel], shape }
    }

    pub fn filled(value: f64, shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor { data: vec![value; numel], shape }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { data: vec![value], shape: vec![1] }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend_from_slice(row);
        }
        Tensor { data, shape: vec![r, c] }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Rows of a 2-D tensor (the leading extent otherwise).
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Columns of a 2-D tensor.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(0)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }
}

/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

/// Primitive operations recorded on the tape, with whatever the backward
/// rule needs to replay them.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Relu { x: usize },
    Sigmoid { x: usize },
    Tanh { x: usize },
    AddBiasRow { x: usize, bias: usize },
    ConcatCols { parts: Vec<usize>, widths: Vec<usize> },
    SliceCols { x: usize, start: usize, end: usize },
    SoftmaxRows { x: usize },
    MaskedSoftmaxRows { x: usize },
    BroadcastCol { x: usize },
    SumAll { x: usize },
    MeanAll { x: usize },
    EmbeddingLookup { table: usize, ids: Vec<usize> },
    BceMasked { p: usize, y: Vec<f64>, mask: Vec<f64>, count: usize },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    /// True when this node is (or depends on) a differentiable leaf.
    needs_grad: bool,
    op: Op,
}

/// Clamp bound for probabilities inside the BCE loss.
pub const BCE_EPS: f64 = 1e-12;

/// Records one forward pass; rebuilt per pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// c[m x n] += a[m x k] @ b[k x n]
fn matmul_acc(c: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += a_ip * bv;
            }
        }
    }
}

// c[m x k] += g[m x n] @ b[k x n]^T
fn matmul_nt_acc(c: &mut [f64], g: &[f64], b: &[f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let c_row = &mut c[i * k..(i + 1) * k];
        for (p, cv) in c_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let dot: f64 = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
            *cv += dot;
        }
    }
}

// c[k x n] += a[m x k]^T @ g[m x n]
fn matmul_tn_acc(c: &mut [f64], a: &[f64], g: &[f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, gv) in c_row.iter_mut().zip(g_row) {
                *cv += a_ip * gv;
            }
        }
    }
}

fn require_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    if t.shape.len() != 2 {
        return Err(Error::Dimension(format!("{what} must be 2-D, got shape {:?}", t.shape)));
    }
    Ok((t.shape[0], t.shape[1]))
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, op: Op) -> TensorId {
        let id = self.nodes.len();
        self.nodes.push(Node { value, grad: None, needs_grad, op });
        TensorId(id)
    }

    /// Differentiable leaf (a parameter).
    pub fn var(&mut self, value: Tensor) -> TensorId {
        self.push(value, true, Op::Leaf)
    }

    /// Non-differentiable leaf (data, masks, one-hots).
    pub fn constant(&mut self, value: Tensor) -> TensorId {
        self.push(value, false, Op::Leaf)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> TensorId {
        self.constant(Tensor::zeros(shape))
    }

    pub fn value(&self, id: TensorId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].value.shape
    }

    /// Gradient accumulated by the last `backward`; `None` means no gradient
    /// flowed here (identically zero).
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Like `grad`, densified: zeros where nothing flowed.
    pub fn grad_dense(&self, id: TensorId) -> Vec<f64> {
        match &self.nodes[id.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[id.0].value.numel()],
        }
    }

    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn needs(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].needs_grad)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, k) = require_2d(self.value(a), "matmul lhs")?;
        let (k2, n) = require_2d(self.value(b), "matmul rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions disagree: [{m}x{k}] vs [{k2}x{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(&mut out, &self.value(a).data, &self.value(b).data, m, k, n);
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(Tensor::new(out, vec![m, n]), needs, Op::MatMul { a: a.0, b: b.0 }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "add shapes disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(Tensor::new(out, shape), needs, Op::Add { a: a.0, b: b.0 }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "mul shapes disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape.clone();
        let needs = self.needs(&[a.0, b.0]);
        Ok(self.push(Tensor::new(out, shape), needs, Op::Mul { a: a.0, b: b.0 }))
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.value(x).data.iter().map(|&v| v.max(0.0)).collect();
        let shape = self.value(x).shape.clone();
        let needs = self.needs(&[x.0]);
        self.push(Tensor::new(out, shape), needs, Op::Relu { x: x.0 })
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.value(x).data.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        let shape = self.value(x).shape.clone();
        let needs = self.needs(&[x.0]);
        self.push(Tensor::new(out, shape), needs, Op::Sigmoid { x: x.0 })
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        let out: Vec<f64> = self.value(x).data.iter().map(|&v| v.tanh()).collect();
        let shape = self.value(x).shape.clone();
        let needs = self.needs(&[x.0]);
        self.push(Tensor::new(out, shape), needs, Op::Tanh { x: x.0 })
    }

    /// `x[m x n] + bias[n]` broadcast over rows.
    pub fn add_bias_row(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (m, n) = require_2d(self.value(x), "add_bias_row input")?;
        let b = self.value(bias);
        if b.shape != [n] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match row width {n}",
                b.shape
            )));
        }
        let mut out = self.value(x).data.clone();
        for i in 0..m {
            for (o, bv) in out[i * n..(i + 1) * n].iter_mut().zip(&self.value(bias).data) {
                *o += bv;
            }
        }
        let needs = self.needs(&[x.0, bias.0]);
        Ok(self.push(Tensor::new(out, vec![m, n]), needs, Op::AddBiasRow { x: x.0, bias: bias.0 }))
    }

    /// Concatenate 2-D tensors along the last axis.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols needs at least one input".into()));
        }
        let (m, _) = require_2d(self.value(parts[0]), "concat_cols input")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (mp, np) = require_2d(self.value(p), "concat_cols input")?;
            if mp != m {
                return Err(Error::Dimension(format!(
                    "concat_cols row counts disagree: {m} vs {mp}"
                )));
            }
            widths.push(np);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        for i in 0..m {
            let mut off = 0;
            for (&p, &w) in parts.iter().zip(&widths) {
                let src = &self.value(p).data[i * w..(i + 1) * w];
                out[i * total + off..i * total + off + w].copy_from_slice(src);
                off += w;
            }
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        let needs = self.needs(&ids);
        Ok(self.push(Tensor::new(out, vec![m, total]), needs, Op::ConcatCols { parts: ids, widths }))
    }

    /// Columns `start..end` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, end: usize) -> Result<TensorId> {
        let (m, n) = require_2d(self.value(x), "slice_cols input")?;
        if start > end || end > n {
            return Err(Error::Dimension(format!(
                "slice_cols range {start}..{end} out of bounds for width {n}"
            )));
        }
        let w = end - start;
        let mut out = vec![0.0; m * w];
        for i in 0..m {
            out[i * w..(i + 1) * w].copy_from_slice(&self.value(x).data[i * n + start..i * n + end]);
        }
        let needs = self.needs(&[x.0]);
        Ok(self.push(Tensor::new(out, vec![m, w]), needs, Op::SliceCols { x: x.0, start, end }))
    }

    /// Row-wise softmax with max-subtraction.
    pub fn softmax_rows(&mut self, x: TensorId) -> Result<TensorId> {
        let (m, n) = require_2d(self.value(x), "softmax_rows input")?;
        if self.value(x).data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("softmax_rows input contains a non-finite value".into()));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = self.value(x).row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, &v) in row.iter().enumerate() {
                let e = (v - max).exp();
                out[i * n + j] = e;
                sum += e;
            }
            for o in &mut out[i * n..(i + 1) * n] {
                *o /= sum;
            }
        }
        let needs = self.needs(&[x.0]);
        Ok(self.push(Tensor::new(out, vec![m, n]), needs, Op::SoftmaxRows { x: x.0 }))
    }

    /// Row-wise softmax restricted to `mask == 1` entries; masked entries get
    /// weight exactly 0. Errors on a fully masked row.
    pub fn masked_softmax_rows(&mut self, x: TensorId, mask: &Tensor) -> Result<TensorId> {
        let (m, n) = require_2d(self.value(x), "masked_softmax_rows input")?;
        if mask.shape != [m, n] {
            return Err(Error::Dimension(format!(
                "mask shape {:?} does not match input [{m}, {n}]",
                mask.shape
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = self.value(x).row(i);
            let mrow = mask.row(i);
            let mut max = f64::NEG_INFINITY;
            for (v, mk) in row.iter().zip(mrow) {
                if *mk != 0.0 {
                    if !v.is_finite() {
                        return Err(Error::Numeric(
                            "masked_softmax_rows input contains a non-finite value".into(),
                        ));
                    }
                    max = max.max(*v);
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(Error::Contract(format!("row {i} is fully masked")));
            }
            let mut sum = 0.0;
            for (j, (&v, &mk)) in row.iter().zip(mrow).enumerate() {
                if mk != 0.0 {
                    let e = (v - max).exp();
                    out[i * n + j] = e;
                    sum += e;
                }
            }
            for (o, &mk) in out[i * n..(i + 1) * n].iter_mut().zip(mrow) {
                if mk != 0.0 {
                    *o /= sum;
                }
            }
        }
        let needs = self.needs(&[x.0]);
        Ok(self.push(Tensor::new(out, vec![m, n]), needs, Op::MaskedSoftmaxRows { x: x.0 }))
    }

    /// Repeat a `[m x 1]` column `n` times to `[m x n]`.
    pub fn broadcast_col(&mut self, x: TensorId, n: usize) -> Result<TensorId> {
        let (m, w) = require_2d(self.value(x), "broadcast_col input")?;
        if w != 1 {
            return Err(Error::Dimension(format!("broadcast_col expects [m x 1], got [{m} x {w}]")));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let v = self.value(x).data[i];
            out[i * n..(i + 1) * n].fill(v);
        }
        let needs = self.needs(&[x.0]);
        Ok(self.push(Tensor::new(out, vec![m, n]), needs, Op::BroadcastCol { x: x.0 }))
    }

    pub fn sum_all(&mut self, x: TensorId) -> TensorId {
        let s: f64 = self.value(x).data.iter().sum();
        let needs = self.needs(&[x.0]);
        self.push(Tensor::scalar(s), needs, Op::SumAll { x: x.0 })
    }

    pub fn mean_all(&mut self, x: TensorId) -> TensorId {
        let n = self.value(x).numel() as f64;
        let s: f64 = self.value(x).data.iter().sum();
        let needs = self.needs(&[x.0]);
        self.push(Tensor::scalar(s / n), needs, Op::MeanAll { x: x.0 })
    }

    /// Gather rows of `table` by index; gradient scatter-adds into those rows.
    pub fn embedding_lookup(&mut self, table: TensorId, ids: &[usize]) -> Result<TensorId> {
        let (v, d) = require_2d(self.value(table), "embedding table")?;
        for &id in ids {
            if id >= v {
                return Err(Error::UnknownIndex { id, size: v });
            }
        }
        let mut out = vec![0.0; ids.len() * d];
        for (r, &id) in ids.iter().enumerate() {
            out[r * d..(r + 1) * d].copy_from_slice(self.value(table).row(id));
        }
        let needs = self.needs(&[table.0]);
        Ok(self.push(
            Tensor::new(out, vec![ids.len(), d]),
            needs,
            Op::EmbeddingLookup { table: table.0, ids: ids.to_vec() },
        ))
    }

    /// Mean binary cross entropy over `mask == 1` positions, with `p` clamped
    /// to `[BCE_EPS, 1 - BCE_EPS]`.
    pub fn bce_masked(&mut self, p: TensorId, y: &Tensor, mask: &Tensor) -> Result<TensorId> {
        let pv = self.value(p);
        if y.shape != pv.shape || mask.shape != pv.shape {
            return Err(Error::Dimension(format!(
                "bce_masked shapes disagree: p {:?}, y {:?}, mask {:?}",
                pv.shape, y.shape, mask.shape
            )));
        }
        for v in &y.data {
            if *v != 0.0 && *v != 1.0 {
                return Err(Error::Validation(format!("bce_masked label {v} is not 0/1")));
            }
        }
        let count = mask.data.iter().filter(|&&m| m != 0.0).count();
        if count == 0 {
            return Err(Error::Contract("bce_masked mask is all zero".into()));
        }
        let mut total = 0.0;
        for ((&pi, &yi), &mi) in pv.data.iter().zip(&y.data).zip(&mask.data) {
            if mi != 0.0 {
                let ph = pi.clamp(BCE_EPS, 1.0 - BCE_EPS);
                total -= yi * ph.ln() + (1.0 - yi) * (1.0 - ph).ln();
            }
        }
        let needs = self.needs(&[p.0]);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            needs,
            Op::BceMasked { p: p.0, y: y.data.clone(), mask: mask.data.clone(), count },
        ))
    }

    /// Reverse pass from a scalar loss; gradients accumulate (sum) over
    /// fan-out in fixed tape order, so repeated runs are bit-identical.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape
            )));
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad || self.nodes[i].grad.is_none() {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let grad = self.nodes[i].grad.as_ref().unwrap().clone();
            match op {
                Op::Leaf => {}
                Op::MatMul { a, b } => {
                    let m = self.nodes[i].value.shape[0];
                    let n = self.nodes[i].value.shape[1];
                    let k = self.nodes[a].value.shape[1];
                    if self.nodes[a].needs_grad {
                        let b_data = self.nodes[b].value.data.clone();
                        let ga = self.grad_buf(a);
                        matmul_nt_acc(ga, &grad, &b_data, m, n, k);
                    }
                    if self.nodes[b].needs_grad {
                        let a_data = self.nodes[a].value.data.clone();
                        let gb = self.grad_buf(b);
                        matmul_tn_acc(gb, &a_data, &grad, m, k, n);
                    }
                }
                Op::Add { a, b } => {
                    for side in [a, b] {
                        if self.nodes[side].needs_grad {
                            let g = self.grad_buf(side);
                            for (gv, &dv) in g.iter_mut().zip(&grad) {
                                *gv += dv;
                            }
                        }
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[a].needs_grad {
                        let other = self.nodes[b].value.data.clone();
                        let g = self.grad_buf(a);
                        for ((gv, &dv), &ov) in g.iter_mut().zip(&grad).zip(&other) {
                            *gv += dv * ov;
                        }
                    }
                    if self.nodes[b].needs_grad {
                        let other = self.nodes[a].value.data.clone();
                        let g = self.grad_buf(b);
                        for ((gv, &dv), &ov) in g.iter_mut().zip(&grad).zip(&other) {
                            *gv += dv * ov;
                        }
                    }
                }
                Op::Relu { x } => {
                    if self.nodes[x].needs_grad {
                        let input = self.nodes[x].value.data.clone();
                        let g = self.grad_buf(x);
                        for ((gv, &dv), &xv) in g.iter_mut().zip(&grad).zip(&input) {
                            if xv > 0.0 {
                                *gv += dv;
                            }
                        }
                    }
                }
                Op::Sigmoid { x } => {
                    if self.nodes[x].needs_grad {
                        let out = self.nodes[i].value.data.clone();
                        let g = self.grad_buf(x);
                        for ((gv, &dv), &s) in g.iter_mut().zip(&grad).zip(&out) {
                            *gv += dv * s * (1.0 - s);
                        }
                    }
                }
                Op::Tanh { x } => {
                    if self.nodes[x].needs_grad {
                        let out = self.nodes[i].value.data.clone();
                        let g = self.grad_buf(x);
                        for ((gv, &dv), &t) in g.iter_mut().zip(&grad).zip(&out) {
                            *gv += dv * (1.0 - t * t);
                        }
                    }
                }
                Op::AddBiasRow { x, bias } => {
                    let (m, n) = (self.nodes[i].value.shape[0], self.nodes[i].value.shape[1]);
                    if self.nodes[x].needs_grad {
                        let g = self.grad_buf(x);
                        for (gv, &dv) in g.iter_mut().zip(&grad) {
                            *gv += dv;
                        }
                    }
                    if self.nodes[bias].needs_grad {
                        let g = self.grad_buf(bias);
                        for i_row in 0..m {
                            for (gv, &dv) in g.iter_mut().zip(&grad[i_row * n..(i_row + 1) * n]) {
                                *gv += dv;
                            }
                        }
                    }
                }
                Op::ConcatCols { parts, widths } => {
                    let m = self.nodes[i].value.shape[0];
                    let total = self.nodes[i].value.shape[1];
                    let mut off = 0;
                    for (&part, &w) in parts.iter().zip(&widths) {
                        if self.nodes[part].needs_grad {
                            let g = self.grad_buf(part);
                            for r in 0..m {
                                let src = &grad[r * total + off..r * total + off + w];
                                for (gv, &dv) in g[r * w..(r + 1) * w].iter_mut().zip(src) {
                                    *gv += dv;
                                }
                            }
                        }
                        off += w;
                    }
                }
                Op::SliceCols { x, start, end } => {
                    if self.nodes[x].needs_grad {
                        let m = self.nodes[i].value.shape[0];
                        let w = end - start;
                        let n = self.nodes[x].value.shape[1];
                        let g = self.grad_buf(x);
                        for r in 0..m {
                            for (gv, &dv) in
                                g[r * n + start..r * n + end].iter_mut().zip(&grad[r * w..(r + 1) * w])
                            {
                                *gv += dv;
                            }
                        }
                    }
                }
                Op::SoftmaxRows { x } | Op::MaskedSoftmaxRows { x } => {
                    if self.nodes[x].needs_grad {
                        let (m, n) = (self.nodes[i].value.shape[0], self.nodes[i].value.shape[1]);
                        let out = self.nodes[i].value.data.clone();
                        let g = self.grad_buf(x);
                        for r in 0..m {
                            let s = &out[r * n..(r + 1) * n];
                            let dv = &grad[r * n..(r + 1) * n];
                            let dot: f64 = s.iter().zip(dv).map(|(a, b)| a * b).sum();
                            for j in 0..n {
                                g[r * n + j] += s[j] * (dv[j] - dot);
                            }
                        }
                    }
                }
                Op::BroadcastCol { x } => {
                    if self.nodes[x].needs_grad {
                        let (m, n) = (self.nodes[i].value.shape[0], self.nodes[i].value.shape[1]);
                        let g = self.grad_buf(x);
                        for r in 0..m {
                            g[r] += grad[r * n..(r + 1) * n].iter().sum::<f64>();
                        }
                    }
                }
                Op::SumAll { x } => {
                    if self.nodes[x].needs_grad {
                        let d = grad[0];
                        let g = self.grad_buf(x);
                        for gv in g.iter_mut() {
                            *gv += d;
                        }
                    }
                }
                Op::MeanAll { x } => {
                    if self.nodes[x].needs_grad {
                        let n = self.nodes[x].value.numel() as f64;
                        let d = grad[0] / n;
                        let g = self.grad_buf(x);
                        for gv in g.iter_mut() {
                            *gv += d;
                        }
                    }
                }
                Op::EmbeddingLookup { table, ids } => {
                    if self.nodes[table].needs_grad {
                        let d = self.nodes[table].value.shape[1];
                        let g = self.grad_buf(table);
                        for (r, &id) in ids.iter().enumerate() {
                            for (gv, &dv) in
                                g[id * d..(id + 1) * d].iter_mut().zip(&grad[r * d..(r + 1) * d])
                            {
                                *gv += dv;
                            }
                        }
                    }
                }
                Op::BceMasked { p, y, mask, count } => {
                    if self.nodes[p].needs_grad {
                        let pv = self.nodes[p].value.data.clone();
                        let d = grad[0] / count as f64;
                        let g = self.grad_buf(p);
                        for (j, gv) in g.iter_mut().enumerate() {
                            if mask[j] != 0.0 {
                                let pi = pv[j];
                                if pi > BCE_EPS && pi < 1.0 - BCE_EPS {
                                    *gv += d * (pi - y[j]) / (pi * (1.0 - pi));
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    fn grad_buf(&mut self, id: usize) -> &mut Vec<f64> {
        let numel = self.nodes[id].value.numel();
        self.nodes[id].grad.get_or_insert_with(|| vec![0.0; numel])
    }
}

/// Per-parameter result of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub param: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub step: f64,
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.entries.iter().all(|e| e.pass)
    }

    pub fn failures(&self) -> Vec<&GradCheckEntry> {
        self.entries.iter().filter(|e| !e.pass).collect()
    }
}

/// Compare analytic gradients of `builder` against central finite differences.
///
/// `builder` must deterministically map leafed-in parameters to a scalar loss;
/// per entry the relative error is `|analytic - numeric| / max(1, |numeric|)`.
pub fn grad_check<F>(builder: F, params: &[(String, Tensor)], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[TensorId]) -> Result<TensorId>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::Contract(format!("finite-difference step {step} outside [1e-7, 1e-3]")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<TensorId> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = builder(&mut tape, &ids)?;
        if tape.value(loss).numel() != 1 {
            return Err(Error::Contract("builder must return a scalar loss".into()));
        }
        Ok(tape.value(loss).data[0])
    };

    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let l0 = eval(&base)?;
    let l1 = eval(&base)?;
    if l0.to_bits() != l1.to_bits() {
        return Err(Error::Oracle(format!(
            "builder is not deterministic: {l0} vs {l1} at the same point"
        )));
    }

    // Analytic gradients.
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = params.iter().map(|(_, t)| tape.var(t.clone())).collect();
    let loss = builder(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids.iter().map(|&id| tape.grad_dense(id)).collect();

    let mut entries = Vec::with_capacity(params.len());
    for (p, (name, tensor)) in params.iter().enumerate() {
        let mut max_rel = 0.0;
        let mut worst = (0usize, 0.0f64, 0.0f64);
        for j in 0..tensor.numel() {
            let mut plus = base.clone();
            plus[p].data[j] += step;
            let mut minus = base.clone();
            minus[p].data[j] -= step;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * step);
            let rel = (analytic[p][j] - numeric).abs() / numeric.abs().max(1.0);
            if rel >= max_rel {
                max_rel = rel;
                worst = (j, analytic[p][j], numeric);
            }
        }
        entries.push(GradCheckEntry {
            param: name.clone(),
            entries: tensor.numel(),
            max_rel_err: max_rel,
            worst_index: worst.0,
            worst_analytic: worst.1,
            worst_numeric: worst.2,
            pass: max_rel <= tol,
        });
    }
    Ok(GradCheckReport { tol, step, entries })
}
