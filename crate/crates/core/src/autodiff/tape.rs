use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{axis_split, for_each_tile_index, inverse_perm, permute};
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::real::Real;
use crate::tensor::{numel, Tensor};

/// Floor applied inside `log` so saturated probabilities stay finite.
pub const LOG_CLAMP: f64 = 1e-12;
/// Variance epsilon used by `layernorm`.
pub const LAYERNORM_EPS: f64 = 1e-6;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Symbolic tag of a recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Mul,
    Scale,
    Reshape,
    Transpose,
    Tile,
    Concat,
    Slice,
    Softmax,
    LayerNorm,
    Gelu,
    LeakyRelu,
    Mean,
    Sum,
    EmbedLookup,
    L2Normalize,
    Log,
    Exp,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Reshape => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Tile => "tile",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layernorm",
            OpKind::Gelu => "gelu",
            OpKind::LeakyRelu => "leaky-relu",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::EmbedLookup => "embed-lookup",
            OpKind::L2Normalize => "l2-normalize",
            OpKind::Log => "log",
            OpKind::Exp => "exp",
        }
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    /// Larger operand first; the second broadcasts over the leading axes.
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Reshape(Var),
    Transpose(Var, Vec<usize>),
    Tile(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Softmax(Var),
    /// Saved reciprocal standard deviation per row.
    LayerNorm(Var, Vec<T>),
    Gelu(Var),
    LeakyRelu(Var, T),
    Mean(Var, Option<usize>),
    Sum(Var, Option<usize>),
    EmbedLookup(Var, Vec<usize>),
    /// Saved norm per row.
    L2Normalize(Var, Vec<T>),
    Log(Var),
    Exp(Var),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Reshape(..) => OpKind::Reshape,
            Op::Transpose(..) => OpKind::Transpose,
            Op::Tile(..) => OpKind::Tile,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Softmax(..) => OpKind::Softmax,
            Op::LayerNorm(..) => OpKind::LayerNorm,
            Op::Gelu(..) => OpKind::Gelu,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Mean(..) => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::EmbedLookup(..) => OpKind::EmbedLookup,
            Op::L2Normalize(..) => OpKind::L2Normalize,
            Op::Log(..) => OpKind::Log,
            Op::Exp(..) => OpKind::Exp,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    is_param: bool,
}

/// A single-threaded recording of tensor operations.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
    clamp_count: usize,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar root with respect to every parameter leaf.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient for `var`, if it is a parameter leaf of the tape.
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradients for `vars` in order, cloned out.
    pub fn collect(&self, vars: &[Var]) -> Result<Vec<Tensor<T>>> {
        vars.iter()
            .map(|&v| {
                self.get(v)
                    .cloned()
                    .ok_or_else(|| Error::invalid("gradient", alloc::format!("{v:?} is not a parameter leaf")))
            })
            .collect()
    }
}

fn check_finite<T: Real>(op: OpKind, t: &Tensor<T>) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: op.name() })
    }
}

/// Number of times `small` repeats to cover `big` when `small` is a shape suffix of `big`.
fn suffix_repeats(op: &'static str, big: &[usize], small: &[usize]) -> Result<usize> {
    if small.len() > big.len() || big[big.len() - small.len()..] != *small {
        return Err(Error::shape(op, big, small));
    }
    Ok(numel(&big[..big.len() - small.len()]))
}

fn reduce_repeats<T: Real>(g: &[T], inner: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; inner];
    for chunk in g.chunks_exact(inner) {
        for (o, &v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
}

const INV_SQRT_2: f64 = core::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl<T: Real> Tape<T> {
    /// A tape that records operations for [`Tape::backward`].
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            clamp_count: 0,
        }
    }

    /// A value-only tape; `backward` is unavailable.
    pub fn inference() -> Self {
        Tape {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of elements clamped by `log` so far.
    pub fn clamp_count(&self) -> usize {
        self.clamp_count
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        check_finite(op.kind(), &value)?;
        let needs_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            is_param: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A trainable leaf. Its gradient is reported by `backward`.
    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        check_finite(OpKind::Leaf, &value)?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: self.recording,
            is_param: true,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        check_finite(OpKind::Leaf, &value)?;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            is_param: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers every tensor of `params` as a parameter leaf, in order.
    pub fn bind(&mut self, params: &ParamSet<T>) -> Result<Vec<Var>> {
        params.tensors().iter().map(|t| self.param(t.clone())).collect()
    }

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is either `[k, n]`
    /// (shared across the batch) or `[.., k, n]` with the same batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared = sb.len() == 2;
        if k != kb || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", sa, sb));
        }
        let batch = numel(&sa[..sa.len() - 2]);
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend_from_slice(&[m, n]);
        let mut out = vec![T::ZERO; batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        if shared {
            T::gemm(batch * m, k, n, T::ONE, av, k, 1, bv, n, 1, T::ZERO, &mut out, n);
        } else {
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    T::ONE,
                    &av[i * m * k..(i + 1) * m * k],
                    k,
                    1,
                    &bv[i * k * n..(i + 1) * k * n],
                    n,
                    1,
                    T::ZERO,
                    &mut out[i * m * n..(i + 1) * m * n],
                    n,
                );
            }
        }
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    fn binary(&mut self, kind: OpKind, a: Var, b: Var) -> Result<Var> {
        let (big, small) = if self.shape(a).len() >= self.shape(b).len() {
            (a, b)
        } else {
            (b, a)
        };
        let (sbig, ssmall) = (self.shape(big), self.shape(small));
        suffix_repeats(kind.name(), sbig, ssmall)?;
        let bv = self.value(big);
        let inner = self.value(small).len();
        let sv = self.value(small).data();
        let data: Vec<T> = match kind {
            OpKind::Add => bv
                .data()
                .chunks_exact(inner)
                .flat_map(|c| c.iter().zip(sv).map(|(&x, &y)| x + y))
                .collect(),
            _ => bv
                .data()
                .chunks_exact(inner)
                .flat_map(|c| c.iter().zip(sv).map(|(&x, &y)| x * y))
                .collect(),
        };
        let value = Tensor::new(bv.shape().to_vec(), data)?;
        let op = if kind == OpKind::Add {
            Op::Add(big, small)
        } else {
            Op::Mul(big, small)
        };
        self.push(value, op, &[a, b])
    }

    /// Element-wise sum. One operand may have a shape that is a suffix of the
    /// other's, in which case it is broadcast over the leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add, a, b)
    }

    /// Element-wise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale(x, c), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .reshape(shape)
            .map_err(|_| Error::shape("reshape", self.shape(x), shape))?;
        self.push(value, Op::Reshape(x), &[x])
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn transpose(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || core::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("transpose", shape, perm));
        }
        let (data, out_shape) = permute(self.value(x).data(), shape, perm);
        let value = Tensor::new(out_shape, data)?;
        self.push(value, Op::Transpose(x, perm.to_vec()), &[x])
    }

    /// Swaps the last two axes.
    pub fn transpose_last(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::shape("transpose", self.shape(x), &[]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.transpose(x, &perm)
    }

    /// Repeats `x` `reps[i]` times along axis `i`.
    pub fn tile(&mut self, x: Var, reps: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if reps.len() != shape.len() || reps.contains(&0) {
            return Err(Error::shape("tile", &shape, reps));
        }
        let out_shape: Vec<usize> = shape.iter().zip(reps).map(|(s, r)| s * r).collect();
        let src = self.value(x).data();
        let mut out = vec![T::ZERO; numel(&out_shape)];
        for_each_tile_index(&shape, reps, |o, i| out[o] = src[i]);
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::Tile(x, reps.to_vec()), &[x])
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("concat"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let len = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x).data()[o * len..(o + 1) * len]);
            }
        }
        let mut out_shape = base;
        out_shape[axis] = total;
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::Concat(xs.to_vec(), axis), xs)
    }

    /// `len` entries of axis `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, len]));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        self.push(value, Op::Slice { x, axis, start }, &[x])
    }

    fn last_dim(&self, op: &'static str, x: Var) -> Result<usize> {
        self.shape(x)
            .last()
            .copied()
            .ok_or_else(|| Error::shape(op, self.shape(x), &[]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim("softmax", x)?;
        let src = self.value(x);
        let mut out = Vec::with_capacity(src.len());
        for row in src.data().chunks_exact(d) {
            let m = row.iter().copied().fold(row[0], T::max);
            let start = out.len();
            let mut z = T::ZERO;
            for &v in row {
                let e = (v - m).exp();
                z += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= z;
            }
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        self.push(value, Op::Softmax(x), &[x])
    }

    /// Normalises the last axis to zero mean and unit variance (no affine).
    pub fn layernorm(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim("layernorm", x)?;
        let src = self.value(x);
        let eps = T::from_f64(LAYERNORM_EPS);
        let inv_d = T::ONE / T::from_usize(d);
        let mut out = Vec::with_capacity(src.len());
        let mut rstd = Vec::with_capacity(src.len() / d);
        for row in src.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let r = T::ONE / (var + eps).sqrt();
            rstd.push(r);
            out.extend(row.iter().map(|&v| (v - mean) * r));
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        self.push(value, Op::LayerNorm(x, rstd), &[x])
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let half = T::from_f64(0.5);
        let k = T::from_f64(INV_SQRT_2);
        let value = self.value(x).map(|v| half * v * (T::ONE + (v * k).erf()));
        self.push(value, Op::Gelu(x), &[x])
    }

    /// `max(x, 0) + slope * min(x, 0)`; slope 0 is ReLU.
    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Result<Var> {
        let value = self.value(x).map(|v| if v > T::ZERO { v } else { v * slope });
        self.push(value, Op::LeakyRelu(x, slope), &[x])
    }

    fn reduce(&mut self, x: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let src = self.value(x).data();
        let (value, op) = match axis {
            None => {
                let mut s: T = src.iter().copied().sum();
                if mean {
                    s /= T::from_usize(src.len());
                }
                (Tensor::scalar(s), if mean { Op::Mean(x, None) } else { Op::Sum(x, None) })
            }
            Some(axis) => {
                if axis >= shape.len() {
                    return Err(Error::shape(if mean { "mean" } else { "sum" }, &shape, &[axis]));
                }
                let (outer, n, inner) = axis_split(&shape, axis);
                let mut out = vec![T::ZERO; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let row = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                        for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                if mean {
                    let inv = T::ONE / T::from_usize(n);
                    out.iter_mut().for_each(|v| *v *= inv);
                }
                let mut out_shape = shape.clone();
                out_shape.remove(axis);
                let t = Tensor::new(out_shape, out)?;
                (t, if mean { Op::Mean(x, Some(axis)) } else { Op::Sum(x, Some(axis)) })
            }
        };
        self.push(value, op, &[x])
    }

    /// Mean of all elements (`axis = None`, scalar result) or along one axis.
    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, true)
    }

    /// Sum of all elements (`axis = None`, scalar result) or along one axis.
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(x, axis, false)
    }

    /// Gathers rows of a `[rows, d]` table.
    pub fn embed_lookup(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || indices.is_empty() {
            return Err(Error::shape("embed-lookup", &shape, indices));
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid("embed-lookup", alloc::format!("row {bad} out of {rows}")));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let value = Tensor::new([indices.len(), d], out)?;
        self.push(value, Op::EmbedLookup(table, indices.to_vec()), &[table])
    }

    /// Scales each vector along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let d = self.last_dim("l2-normalize", x)?;
        let src = self.value(x);
        let mut out = Vec::with_capacity(src.len());
        let mut norms = Vec::with_capacity(src.len() / d);
        for row in src.data().chunks_exact(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if n == T::ZERO {
                return Err(Error::ZeroNorm("l2-normalize"));
            }
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let value = Tensor::new(src.shape().to_vec(), out)?;
        self.push(value, Op::L2Normalize(x, norms), &[x])
    }

    /// Natural log with inputs floored at [`LOG_CLAMP`]; each floored element
    /// increments [`Tape::clamp_count`].
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let floor = T::from_f64(LOG_CLAMP);
        let value = self.value(x).map(|v| {
            if v < floor {
                floor.ln()
            } else {
                v.ln()
            }
        });
        self.clamp_count += self.value(x).data().iter().filter(|&&v| v < floor).count();
        self.push(value, Op::Log(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v.exp());
        self.push(value, Op::Exp(x), &[x])
    }

    /// Gradients of the scalar `root` with respect to every parameter leaf.
    /// Parameters that do not influence `root` get zero tensors.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::NotRecording);
        }
        if self.value(root).len() != 1 {
            return Err(Error::NonScalarRoot(self.shape(root).to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::new(self.shape(root).to_vec(), vec![T::ONE])?);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                node.is_param
                    .then(|| g.unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec())))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = numel(&sa[..sa.len() - 2]);
                let shared = sb.len() == 2;
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    let mut da = vec![T::ZERO; av.len()];
                    if shared {
                        T::gemm(batch * m, n, k, T::ONE, gd, n, 1, bv, 1, n, T::ZERO, &mut da, k);
                    } else {
                        for t in 0..batch {
                            T::gemm(
                                m,
                                n,
                                k,
                                T::ONE,
                                &gd[t * m * n..(t + 1) * m * n],
                                n,
                                1,
                                &bv[t * k * n..(t + 1) * k * n],
                                1,
                                n,
                                T::ZERO,
                                &mut da[t * m * k..(t + 1) * m * k],
                                k,
                            );
                        }
                    }
                    self.accumulate(grads, *a, Tensor::new(sa.to_vec(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![T::ZERO; bv.len()];
                    if shared {
                        T::gemm(k, batch * m, n, T::ONE, av, 1, k, gd, n, 1, T::ZERO, &mut db, n);
                    } else {
                        for t in 0..batch {
                            T::gemm(
                                k,
                                m,
                                n,
                                T::ONE,
                                &av[t * m * k..(t + 1) * m * k],
                                1,
                                k,
                                &gd[t * m * n..(t + 1) * m * n],
                                n,
                                1,
                                T::ZERO,
                                &mut db[t * k * n..(t + 1) * k * n],
                                n,
                            );
                        }
                    }
                    self.accumulate(grads, *b, Tensor::new(sb.to_vec(), db)?);
                }
            }
            Op::Add(big, small) => {
                if self.wants(*big) {
                    self.accumulate(grads, *big, g.clone());
                }
                if self.wants(*small) {
                    let inner = self.value(*small).len();
                    let d = reduce_repeats(gd, inner);
                    self.accumulate(grads, *small, Tensor::new(self.shape(*small).to_vec(), d)?);
                }
            }
            Op::Mul(big, small) => {
                let bv = self.value(*big).data();
                let sv = self.value(*small).data();
                let inner = sv.len();
                if self.wants(*big) {
                    let d: Vec<T> = gd
                        .chunks_exact(inner)
                        .flat_map(|c| c.iter().zip(sv).map(|(&gg, &s)| gg * s))
                        .collect();
                    self.accumulate(grads, *big, Tensor::new(self.shape(*big).to_vec(), d)?);
                }
                if self.wants(*small) {
                    let prod: Vec<T> = gd.iter().zip(bv).map(|(&gg, &b)| gg * b).collect();
                    let d = reduce_repeats(&prod, inner);
                    self.accumulate(grads, *small, Tensor::new(self.shape(*small).to_vec(), d)?);
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.map(|v| v * *c));
            }
            Op::Reshape(x) => {
                self.accumulate(grads, *x, g.reshape(self.shape(*x))?);
            }
            Op::Transpose(x, perm) => {
                let (d, s) = permute(gd, g.shape(), &inverse_perm(perm));
                self.accumulate(grads, *x, Tensor::new(s, d)?);
            }
            Op::Tile(x, reps) => {
                let shape = self.shape(*x).to_vec();
                let mut d = vec![T::ZERO; numel(&shape)];
                for_each_tile_index(&shape, reps, |o, i| d[i] += gd[o]);
                self.accumulate(grads, *x, Tensor::new(shape, d)?);
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(y.shape(), *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.wants(x) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            d.extend_from_slice(&gd[base..base + len * inner]);
                        }
                        self.accumulate(grads, x, Tensor::new(self.shape(x).to_vec(), d)?);
                    }
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, n, inner) = axis_split(&shape, *axis);
                let len = y.shape()[*axis];
                let mut d = vec![T::ZERO; numel(&shape)];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate(grads, *x, Tensor::new(shape, d)?);
            }
            Op::Softmax(x) => {
                let dlen = *y.shape().last().unwrap_or(&1);
                let mut d = Vec::with_capacity(y.len());
                for (yr, gr) in y.data().chunks_exact(dlen).zip(gd.chunks_exact(dlen)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(&yy, &gg)| yy * (gg - dot)));
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::LayerNorm(x, rstd) => {
                let dlen = *y.shape().last().unwrap_or(&1);
                let inv_d = T::ONE / T::from_usize(dlen);
                let mut d = Vec::with_capacity(y.len());
                for ((yr, gr), &r) in y.data().chunks_exact(dlen).zip(gd.chunks_exact(dlen)).zip(rstd) {
                    let mean_g = gr.iter().copied().sum::<T>() * inv_d;
                    let mean_gy = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>() * inv_d;
                    d.extend(yr.iter().zip(gr).map(|(&yy, &gg)| r * (gg - mean_g - yy * mean_gy)));
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                let half = T::from_f64(0.5);
                let k = T::from_f64(INV_SQRT_2);
                let c = T::from_f64(INV_SQRT_2PI);
                let d: Vec<T> = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gg)| {
                        let cdf = half * (T::ONE + (v * k).erf());
                        let pdf = c * (-half * v * v).exp();
                        gg * (cdf + v * pdf)
                    })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::LeakyRelu(x, slope) => {
                let xv = self.value(*x).data();
                let d: Vec<T> = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gg)| if v > T::ZERO { gg } else { gg * *slope })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Mean(x, axis) | Op::Sum(x, axis) => {
                let is_mean = matches!(node.op, Op::Mean(..));
                let shape = self.shape(*x).to_vec();
                let d = match axis {
                    None => {
                        let mut v = gd[0];
                        if is_mean {
                            v /= T::from_usize(numel(&shape));
                        }
                        vec![v; numel(&shape)]
                    }
                    Some(axis) => {
                        let (outer, n, inner) = axis_split(&shape, *axis);
                        let scale = if is_mean { T::ONE / T::from_usize(n) } else { T::ONE };
                        let mut d = Vec::with_capacity(numel(&shape));
                        for o in 0..outer {
                            let row = &gd[o * inner..(o + 1) * inner];
                            for _ in 0..n {
                                d.extend(row.iter().map(|&v| v * scale));
                            }
                        }
                        d
                    }
                };
                self.accumulate(grads, *x, Tensor::new(shape, d)?);
            }
            Op::EmbedLookup(table, indices) => {
                let shape = self.shape(*table).to_vec();
                let dd = shape[1];
                let mut d = vec![T::ZERO; numel(&shape)];
                for (r, &idx) in indices.iter().enumerate() {
                    for (acc, &v) in d[idx * dd..(idx + 1) * dd].iter_mut().zip(&gd[r * dd..(r + 1) * dd]) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(shape, d)?);
            }
            Op::L2Normalize(x, norms) => {
                let dlen = *y.shape().last().unwrap_or(&1);
                let mut d = Vec::with_capacity(y.len());
                for ((yr, gr), &n) in y.data().chunks_exact(dlen).zip(gd.chunks_exact(dlen)).zip(norms) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(&yy, &gg)| (gg - yy * dot) / n));
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Log(x) => {
                let floor = T::from_f64(LOG_CLAMP);
                let xv = self.value(*x).data();
                let d: Vec<T> = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &gg)| if v < floor { T::ZERO } else { gg / v })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
            Op::Exp(x) => {
                let d: Vec<T> = y.data().iter().zip(gd).map(|(&yy, &gg)| yy * gg).collect();
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), d)?);
            }
        }
        Ok(())
    }
}
