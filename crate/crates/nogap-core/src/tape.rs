//! Reverse-mode automatic differentiation on an eager tape.
//!
//! Each operation computes its value immediately and appends a node recording
//! the operation and its inputs; `backward` walks the node list in reverse,
//! applying vector-Jacobian products. The op catalog is exactly what the
//! operator network and the likelihood need — no broadcasting beyond
//! scalar·tensor, shapes must match explicitly.

use crate::error::{NogapError, Result};
use crate::tensor::{strides, Tensor};
use crate::wavelet::{dwt_packed, filter_coeffs, idwt_packed, WaveletName};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    MulElem,
    Matmul,
    Scale(f64),
    Reshape,
    ConcatLastDim,
    Slice { axis: usize, start: usize },
    Sum,
    Mean,
    Gelu,
    /// Pointwise channel map over the last axis: inputs (x, w) or (x, w, b).
    Conv1x1,
    Dwt { wavelet: WaveletName, levels: usize, spatial_dim: usize },
    Idwt { wavelet: WaveletName, levels: usize, spatial_dim: usize },
}

struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Recorded computation; single-writer (one logical thread per tape).
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node id.
pub struct Adjoints {
    grads: Vec<Option<Tensor>>,
}

impl Adjoints {
    /// Adjoint of a node, if any gradient flowed to it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Adjoint of a node, or zeros of the given shape when none flowed.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape.to_vec()),
        }
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let t = (C * (x + A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
}

/// Plain row-major matrix product of two rank-2 tensors.
pub(crate) fn matmul_2d(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
        return Err(NogapError::shape(
            "matmul",
            "[m,k] x [k,n]".to_string(),
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = ad[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += aip * brow[j];
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

fn transpose_2d(a: &Tensor) -> Tensor {
    let (m, n) = (a.shape()[0], a.shape()[1]);
    let ad = a.data();
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = ad[i * n + j];
        }
    }
    Tensor::new(vec![n, m], out).expect("transpose preserves element count")
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value of a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, inputs, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input tensor. Leaves must be finite.
    pub fn leaf(&mut self, value: Tensor) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(NogapError::numeric("leaf", "non-finite entry in input tensor"));
        }
        Ok(self.push(Op::Leaf, vec![], value))
    }

    fn binary_same_shape(&mut self, op: Op, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64) -> Result<NodeId> {
        let value = self.value(a).zip_map(self.value(b), f)?;
        Ok(self.push(op, vec![a, b], value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul_elementwise(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same_shape(Op::MulElem, a, b, |x, y| x * y)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul_2d(self.value(a), self.value(b))?;
        Ok(self.push(Op::Matmul, vec![a, b], value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).map(|x| c * x);
        self.push(Op::Scale(c), vec![a], value)
    }

    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(Op::Reshape, vec![a], value))
    }

    pub fn concat_lastdim(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(NogapError::domain("concat_lastdim", "no inputs"));
        }
        let first = self.value(parts[0]).shape().to_vec();
        if first.is_empty() {
            return Err(NogapError::shape("concat_lastdim", "rank >= 1", "rank 0"));
        }
        let prefix = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != first.len() || &s[..s.len() - 1] != prefix {
                return Err(NogapError::shape(
                    "concat_lastdim",
                    format!("{:?} x last", prefix),
                    format!("{:?}", s),
                ));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = prefix.iter().product();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(widths.iter()) {
            let d = self.value(p).data();
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&d[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        let mut shape = prefix.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::ConcatLastDim, parts.to_vec(), value))
    }

    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.value(a).shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(NogapError::shape(
                "slice",
                format!("axis {axis} range within {:?}", shape),
                format!("start {start} len {len}"),
            ));
        }
        let st = strides(&shape);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let out_st = strides(&out_shape);
        let total: usize = out_shape.iter().product();
        let d = self.value(a).data();
        let mut out = vec![0.0; total];
        for (flat, slot) in out.iter_mut().enumerate() {
            // Decompose flat index in the output, map to the source.
            let mut rem = flat;
            let mut src = 0usize;
            for ax in 0..out_shape.len() {
                let i = rem / out_st[ax];
                rem %= out_st[ax];
                let j = if ax == axis { i + start } else { i };
                src += j * st[ax];
            }
            *slot = d[src];
        }
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(Op::Slice { axis, start }, vec![a], value))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Sum, vec![a], Tensor::scalar(s))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let n = self.value(a).len().max(1);
        let s: f64 = self.value(a).data().iter().sum();
        self.push(Op::Mean, vec![a], Tensor::scalar(s / n as f64))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(gelu_scalar);
        self.push(Op::Gelu, vec![a], value)
    }

    /// Pointwise channel map: `x [.., c_in] · w [c_in, c_out] (+ b [c_out])`.
    pub fn conv1x1_channels(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.is_empty() || ws.len() != 2 || xs[xs.len() - 1] != ws[0] {
            return Err(NogapError::shape(
                "conv1x1_channels",
                "x [.., c_in] and w [c_in, c_out]".to_string(),
                format!("{:?} and {:?}", xs, ws),
            ));
        }
        let (cin, cout) = (ws[0], ws[1]);
        let rows = self.value(x).len() / cin;
        let xd = self.value(x).data();
        let wd = self.value(w).data();
        let mut out = vec![0.0; rows * cout];
        for r in 0..rows {
            let xrow = &xd[r * cin..(r + 1) * cin];
            let orow = &mut out[r * cout..(r + 1) * cout];
            for (ci, &xv) in xrow.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let wrow = &wd[ci * cout..(ci + 1) * cout];
                for co in 0..cout {
                    orow[co] += xv * wrow[co];
                }
            }
        }
        let mut inputs = vec![x, w];
        if let Some(bid) = b {
            let bs = self.value(bid).shape();
            if bs != [cout] {
                return Err(NogapError::shape(
                    "conv1x1_channels",
                    format!("bias [{cout}]"),
                    format!("{:?}", bs),
                ));
            }
            let bd = self.value(bid).data().to_vec();
            for r in 0..rows {
                for co in 0..cout {
                    out[r * cout + co] += bd[co];
                }
            }
            inputs.push(bid);
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        let value = Tensor::new(shape, out)?;
        Ok(self.push(Op::Conv1x1, inputs, value))
    }

    /// Forward DWT over the grid axes of `[batch, grid…, channels]`, packed layout.
    pub fn dwt_hook(&mut self, a: NodeId, wavelet: WaveletName, levels: usize, spatial_dim: usize) -> Result<NodeId> {
        let filter = filter_coeffs(wavelet);
        let value = dwt_packed(self.value(a), &filter, levels, spatial_dim)?;
        Ok(self.push(Op::Dwt { wavelet, levels, spatial_dim }, vec![a], value))
    }

    /// Inverse DWT (packed layout), same shape contract as [`Tape::dwt_hook`].
    pub fn idwt_hook(&mut self, a: NodeId, wavelet: WaveletName, levels: usize, spatial_dim: usize) -> Result<NodeId> {
        let filter = filter_coeffs(wavelet);
        let value = idwt_packed(self.value(a), &filter, levels, spatial_dim)?;
        Ok(self.push(Op::Idwt { wavelet, levels, spatial_dim }, vec![a], value))
    }

    fn accumulate(slot: &mut Option<Tensor>, grad: Tensor) -> Result<()> {
        match slot {
            Some(existing) => {
                *existing = existing.zip_map(&grad, |a, b| a + b)?;
            }
            None => *slot = Some(grad),
        }
        Ok(())
    }

    /// Reverse sweep from `root`, seeding its adjoint with `seed`.
    ///
    /// Returns the adjoint of every node gradient flowed to; the adjoint of
    /// `root` equals `seed` (plus any contribution through later consumers if
    /// `root` feeds other recorded nodes — the sweep covers the whole tape).
    pub fn backward(&self, root: NodeId, seed: Tensor) -> Result<Adjoints> {
        if root.0 >= self.nodes.len() {
            return Err(NogapError::domain("backward", format!("unknown root node {}", root.0)));
        }
        let root_shape = self.nodes[root.0].value.shape();
        if seed.shape() != root_shape {
            return Err(NogapError::shape(
                "backward",
                format!("seed shape {:?}", root_shape),
                format!("{:?}", seed.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(dy) = grads[i].clone() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::Add => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    Self::accumulate(&mut grads[a.0], dy.clone())?;
                    Self::accumulate(&mut grads[b.0], dy)?;
                }
                Op::Sub => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    Self::accumulate(&mut grads[a.0], dy.clone())?;
                    Self::accumulate(&mut grads[b.0], dy.map(|x| -x))?;
                }
                Op::MulElem => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let da = dy.zip_map(&self.nodes[b.0].value, |g, v| g * v)?;
                    let db = dy.zip_map(&self.nodes[a.0].value, |g, v| g * v)?;
                    Self::accumulate(&mut grads[a.0], da)?;
                    Self::accumulate(&mut grads[b.0], db)?;
                }
                Op::Matmul => {
                    let (a, b) = (node.inputs[0], node.inputs[1]);
                    let bt = transpose_2d(&self.nodes[b.0].value);
                    let at = transpose_2d(&self.nodes[a.0].value);
                    let da = matmul_2d(&dy, &bt)?;
                    let db = matmul_2d(&at, &dy)?;
                    Self::accumulate(&mut grads[a.0], da)?;
                    Self::accumulate(&mut grads[b.0], db)?;
                }
                Op::Scale(c) => {
                    let c = *c;
                    Self::accumulate(&mut grads[node.inputs[0].0], dy.map(|x| c * x))?;
                }
                Op::Reshape => {
                    let src_shape = self.nodes[node.inputs[0].0].value.shape().to_vec();
                    Self::accumulate(&mut grads[node.inputs[0].0], dy.reshape(src_shape)?)?;
                }
                Op::ConcatLastDim => {
                    let out_shape = node.value.shape();
                    let total = out_shape[out_shape.len() - 1];
                    let rows: usize = out_shape[..out_shape.len() - 1].iter().product();
                    let dyd = dy.data();
                    let mut offset = 0;
                    for &p in &node.inputs {
                        let pshape = self.nodes[p.0].value.shape().to_vec();
                        let w = pshape[pshape.len() - 1];
                        let mut part = vec![0.0; rows * w];
                        for r in 0..rows {
                            part[r * w..(r + 1) * w]
                                .copy_from_slice(&dyd[r * total + offset..r * total + offset + w]);
                        }
                        Self::accumulate(&mut grads[p.0], Tensor::new(pshape, part)?)?;
                        offset += w;
                    }
                }
                Op::Slice { axis, start } => {
                    let src_shape = self.nodes[node.inputs[0].0].value.shape().to_vec();
                    let st = strides(&src_shape);
                    let out_shape = node.value.shape().to_vec();
                    let out_st = strides(&out_shape);
                    let mut full = vec![0.0; src_shape.iter().product()];
                    let dyd = dy.data();
                    for (flat, &g) in dyd.iter().enumerate() {
                        let mut rem = flat;
                        let mut dst = 0usize;
                        for ax in 0..out_shape.len() {
                            let i = rem / out_st[ax];
                            rem %= out_st[ax];
                            let j = if ax == *axis { i + start } else { i };
                            dst += j * st[ax];
                        }
                        full[dst] = g;
                    }
                    Self::accumulate(&mut grads[node.inputs[0].0], Tensor::new(src_shape, full)?)?;
                }
                Op::Sum => {
                    let g = dy.item()?;
                    let src_shape = self.nodes[node.inputs[0].0].value.shape().to_vec();
                    let n: usize = src_shape.iter().product();
                    Self::accumulate(&mut grads[node.inputs[0].0], Tensor::new(src_shape, vec![g; n])?)?;
                }
                Op::Mean => {
                    let src_shape = self.nodes[node.inputs[0].0].value.shape().to_vec();
                    let n: usize = src_shape.iter().product::<usize>().max(1);
                    let g = dy.item()? / n as f64;
                    Self::accumulate(&mut grads[node.inputs[0].0], Tensor::new(src_shape, vec![g; n])?)?;
                }
                Op::Gelu => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    let dx = dy.zip_map(x, |g, v| g * gelu_grad_scalar(v))?;
                    Self::accumulate(&mut grads[node.inputs[0].0], dx)?;
                }
                Op::Conv1x1 => {
                    let x = &self.nodes[node.inputs[0].0].value;
                    let w = &self.nodes[node.inputs[1].0].value;
                    let (cin, cout) = (w.shape()[0], w.shape()[1]);
                    let rows = x.len() / cin;
                    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
                    let mut dx = vec![0.0; rows * cin];
                    let mut dw = vec![0.0; cin * cout];
                    for r in 0..rows {
                        let dyrow = &dyd[r * cout..(r + 1) * cout];
                        let xrow = &xd[r * cin..(r + 1) * cin];
                        for ci in 0..cin {
                            let wrow = &wd[ci * cout..(ci + 1) * cout];
                            let mut acc = 0.0;
                            for co in 0..cout {
                                acc += dyrow[co] * wrow[co];
                                dw[ci * cout + co] += xrow[ci] * dyrow[co];
                            }
                            dx[r * cin + ci] += acc;
                        }
                    }
                    Self::accumulate(&mut grads[node.inputs[0].0], Tensor::new(x.shape().to_vec(), dx)?)?;
                    Self::accumulate(&mut grads[node.inputs[1].0], Tensor::new(vec![cin, cout], dw)?)?;
                    if node.inputs.len() == 3 {
                        let mut db = vec![0.0; cout];
                        for r in 0..rows {
                            for co in 0..cout {
                                db[co] += dyd[r * cout + co];
                            }
                        }
                        Self::accumulate(&mut grads[node.inputs[2].0], Tensor::new(vec![cout], db)?)?;
                    }
                }
                Op::Dwt { wavelet, levels, spatial_dim } => {
                    // Orthonormal: the Jacobian transpose is the inverse transform.
                    let filter = filter_coeffs(*wavelet);
                    let dx = idwt_packed(&dy, &filter, *levels, *spatial_dim)?;
                    Self::accumulate(&mut grads[node.inputs[0].0], dx)?;
                }
                Op::Idwt { wavelet, levels, spatial_dim } => {
                    let filter = filter_coeffs(*wavelet);
                    let dx = dwt_packed(&dy, &filter, *levels, *spatial_dim)?;
                    Self::accumulate(&mut grads[node.inputs[0].0], dx)?;
                }
            }
        }
        Ok(Adjoints { grads })
    }
}

/// Check the analytic gradient of a scalar-valued tape program against central
/// finite differences at `point`.
///
/// `f` receives a fresh tape and the leaf id of the evaluation point and must
/// return a scalar node. Returns the max over coordinates of
/// `|analytic - central difference| / max(1, |analytic|)`.
pub fn gradcheck<F>(f: F, point: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, NodeId) -> Result<NodeId>,
{
    if eps <= 0.0 {
        return Err(NogapError::domain("gradcheck", "eps must be positive"));
    }
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(t.clone())?;
        let root = f(&mut tape, leaf)?;
        let v = tape.value(root);
        if v.len() != 1 {
            return Err(NogapError::Contract(format!(
                "gradcheck function must return a scalar, got shape {:?}",
                v.shape()
            )));
        }
        Ok(v.data()[0])
    };
    let mut tape = Tape::new();
    let leaf = tape.leaf(point.clone())?;
    let root = f(&mut tape, leaf)?;
    if tape.value(root).len() != 1 {
        return Err(NogapError::Contract(format!(
            "gradcheck function must return a scalar, got shape {:?}",
            tape.value(root).shape()
        )));
    }
    let seed = Tensor::new(tape.value(root).shape().to_vec(), vec![1.0])?;
    let adjoints = tape.backward(root, seed)?;
    let analytic = adjoints.get_or_zeros(leaf, point.shape());
    let mut worst: f64 = 0.0;
    let base = point.data().to_vec();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += eps;
        let mut minus = base.clone();
        minus[i] -= eps;
        let fp = eval(&Tensor::new(point.shape().to_vec(), plus)?)?;
        let fm = eval(&Tensor::new(point.shape().to_vec(), minus)?)?;
        let fd = (fp - fm) / (2.0 * eps);
        let a = analytic.data()[i];
        let rel = (a - fd).abs() / a.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // Frozen reference for the tanh approximation evaluated at x = 1.
        assert!((gelu_scalar(1.0) - 0.8411919906082767).abs() < 1e-15);
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let eye = tape
            .leaf(Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap())
            .unwrap();
        let x = tape.leaf(random_tensor(&[3, 5], 1)).unwrap();
        let y = tape.matmul(eye, x).unwrap();
        assert_eq!(tape.value(y).data(), tape.value(x).data());
    }

    #[test]
    fn leaf_rejects_non_finite() {
        let mut tape = Tape::new();
        let bad = Tensor::new(vec![2], vec![1.0, f64::NAN]).unwrap();
        assert!(tape.leaf(bad).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&[4], 2)).unwrap();
        let s = tape.sum(x);
        let adj = tape.backward(s, Tensor::scalar(1.0)).unwrap();
        assert_eq!(adj.get(x).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::scalar(3.0)).unwrap();
        let y = tape.mul_elementwise(x, x).unwrap();
        let adj = tape.backward(y, Tensor::scalar(1.0)).unwrap();
        assert_eq!(adj.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_unknown_root_rejected() {
        let tape = Tape::new();
        assert!(tape.backward(NodeId(3), Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn adjoint_linearity() {
        // backward through (f + g) equals backward(f) + backward(g).
        let x0 = random_tensor(&[6], 3);
        let build = |tape: &mut Tape, leaf: NodeId| -> (NodeId, NodeId) {
            let a = tape.gelu(leaf);
            let f = tape.sum(a);
            let b = tape.mul_elementwise(leaf, leaf).unwrap();
            let g = tape.mean(b);
            (f, g)
        };
        let mut tape = Tape::new();
        let leaf = tape.leaf(x0.clone()).unwrap();
        let (f, g) = build(&mut tape, leaf);
        let combined = tape.add(f, g).unwrap();
        let adj_combined = tape.backward(combined, Tensor::scalar(1.0)).unwrap();
        let adj_f = tape.backward(f, Tensor::scalar(1.0)).unwrap();
        let adj_g = tape.backward(g, Tensor::scalar(1.0)).unwrap();
        for i in 0..x0.len() {
            let lhs = adj_combined.get(leaf).unwrap().data()[i];
            let rhs = adj_f.get(leaf).unwrap().data()[i] + adj_g.get(leaf).unwrap().data()[i];
            assert!((lhs - rhs).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_is_deterministic() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&[8], 4)).unwrap();
        let g = tape.gelu(x);
        let s = tape.sum(g);
        let a1 = tape.backward(s, Tensor::scalar(1.0)).unwrap();
        let a2 = tape.backward(s, Tensor::scalar(1.0)).unwrap();
        assert_eq!(a1.get(x).unwrap().data(), a2.get(x).unwrap().data());
    }

    #[test]
    fn gradcheck_linear_map_is_exact() {
        let c = random_tensor(&[5], 10);
        let cc = c.clone();
        let err = gradcheck(
            move |tape, leaf| {
                let cid = tape.leaf(cc.clone())?;
                let prod = tape.mul_elementwise(cid, leaf)?;
                Ok(tape.sum(prod))
            },
            &random_tensor(&[5], 11),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "{err:e}");
    }

    #[test]
    fn gradcheck_norm_squared() {
        let err = gradcheck(
            |tape, leaf| {
                let sq = tape.mul_elementwise(leaf, leaf)?;
                Ok(tape.sum(sq))
            },
            &random_tensor(&[7], 12),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err:e}");
    }

    // Dense(gelu(Dense(gelu(Dense(x))))) with weights folded into the leaf:
    // checks the chained vjps of matmul, gelu, slice, reshape together.
    #[test]
    fn gradcheck_three_layer_dense_network() {
        let dims = [(4usize, 5usize), (5, 5), (5, 1)];
        let n_w: usize = dims.iter().map(|(a, b)| a * b).sum();
        let point = random_tensor(&[n_w + 4], 13);
        let err = gradcheck(
            move |tape, leaf| {
                let mut offset = 0;
                let mut ws = Vec::new();
                for (a, b) in dims {
                    let flat = tape.slice(leaf, 0, offset, a * b)?;
                    ws.push(tape.reshape(flat, vec![a, b])?);
                    offset += a * b;
                }
                let x = tape.slice(leaf, 0, offset, 4)?;
                let mut h = tape.reshape(x, vec![1, 4])?;
                for (i, w) in ws.iter().enumerate() {
                    h = tape.matmul(h, *w)?;
                    if i + 1 < ws.len() {
                        h = tape.gelu(h);
                    }
                }
                Ok(tape.sum(h))
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err:e}");
    }

    // Every catalog op with a backward rule, embedded in a scalar loss and
    // checked against central differences at random points.
    #[test]
    fn gradcheck_op_catalog() {
        for trial in 0..20u64 {
            let point = random_tensor(&[12], 100 + trial);
            let aux = random_tensor(&[12], 200 + trial);
            let aux2 = aux.clone();
            let err = gradcheck(
                move |tape, leaf| {
                    let other = tape.leaf(aux2.clone())?;
                    let a = tape.add(leaf, other)?;
                    let s = tape.sub(a, leaf)?;
                    let m = tape.mul_elementwise(s, leaf)?;
                    let sc = tape.scale(m, 1.7);
                    let r = tape.reshape(sc, vec![3, 4])?;
                    let sl = tape.slice(r, 1, 1, 2)?;
                    let g = tape.gelu(sl);
                    let cat = tape.concat_lastdim(&[g, g])?;
                    let flat = tape.reshape(cat, vec![3, 4])?;
                    let w = tape.leaf(Tensor::new(vec![4, 2], (0..8).map(|i| 0.1 * i as f64).collect())?)?;
                    let mm = tape.matmul(flat, w)?;
                    let mn = tape.mean(mm);
                    let sm_in = tape.mul_elementwise(leaf, leaf)?;
                    let sm = tape.sum(sm_in);
                    let half = tape.scale(sm, 0.01);
                    let mn2 = tape.reshape(mn, vec![])?;
                    tape.add(mn2, half)
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "trial {trial}: {err:e}");
        }
    }

    #[test]
    fn gradcheck_conv1x1_and_bias() {
        let point = random_tensor(&[2 * 6 * 3 + 3 * 2 + 2], 42);
        let err = gradcheck(
            move |tape, leaf| {
                let xf = tape.slice(leaf, 0, 0, 36)?;
                let x = tape.reshape(xf, vec![2, 6, 3])?;
                let wf = tape.slice(leaf, 0, 36, 6)?;
                let w = tape.reshape(wf, vec![3, 2])?;
                let b = tape.slice(leaf, 0, 42, 2)?;
                let y = tape.conv1x1_channels(x, w, Some(b))?;
                let sq = tape.mul_elementwise(y, y)?;
                Ok(tape.sum(sq))
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err:e}");
    }

    #[test]
    fn gradcheck_dwt_idwt_hooks() {
        for wavelet in [WaveletName::Db4, WaveletName::Db6] {
            let point = random_tensor(&[1 * 16 * 2], 77);
            let err = gradcheck(
                move |tape, leaf| {
                    let x = tape.reshape(leaf, vec![1, 16, 2])?;
                    let c = tape.dwt_hook(x, wavelet, 2, 1)?;
                    let y = tape.idwt_hook(c, wavelet, 2, 1)?;
                    let g = tape.gelu(y);
                    let c2 = tape.dwt_hook(g, wavelet, 1, 1)?;
                    let sq = tape.mul_elementwise(c2, c2)?;
                    Ok(tape.sum(sq))
                },
                &point,
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-5, "{wavelet:?}: {err:e}");
        }
    }

    #[test]
    fn dwt_hook_round_trip_on_tape() {
        let mut tape = Tape::new();
        let x = tape.leaf(random_tensor(&[2, 8, 8, 3], 9)).unwrap();
        let c = tape.dwt_hook(x, WaveletName::Db4, 2, 2).unwrap();
        let y = tape.idwt_hook(c, WaveletName::Db4, 2, 2).unwrap();
        let max_err = tape
            .value(x)
            .data()
            .iter()
            .zip(tape.value(y).data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 1e-10, "{max_err:e}");
    }
}
