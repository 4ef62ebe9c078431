use super::tensor::{gemm, inverse_permutation, numel, permute_into, MatRef, Scalar, Tensor};
use super::GradError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation. Every kind except `Leaf` has a backward rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Gelu,
    Relu,
    Sqrt,
    Square,
    Softmax,
    LayerNorm,
    Reshape,
    Permute,
    MeanAxis,
    Sum,
    Mean,
    Expand,
    Narrow,
    Concat,
    Mse,
    CrossEntropy,
}

impl OpKind {
    pub const DIFFERENTIABLE: [OpKind; 22] = [
        OpKind::MatMul,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Gelu,
        OpKind::Relu,
        OpKind::Sqrt,
        OpKind::Square,
        OpKind::Softmax,
        OpKind::LayerNorm,
        OpKind::Reshape,
        OpKind::Permute,
        OpKind::MeanAxis,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Expand,
        OpKind::Narrow,
        OpKind::Concat,
        OpKind::Mse,
        OpKind::CrossEntropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add_scalar",
            OpKind::Gelu => "gelu",
            OpKind::Relu => "relu",
            OpKind::Sqrt => "sqrt",
            OpKind::Square => "square",
            OpKind::Softmax => "softmax",
            OpKind::LayerNorm => "layernorm",
            OpKind::Reshape => "reshape",
            OpKind::Permute => "permute",
            OpKind::MeanAxis => "mean_axis",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Expand => "expand",
            OpKind::Narrow => "narrow",
            OpKind::Concat => "concat",
            OpKind::Mse => "mse",
            OpKind::CrossEntropy => "cross_entropy",
        }
    }

    pub fn from_name(name: &str) -> Option<OpKind> {
        Self::DIFFERENTIABLE.into_iter().find(|k| k.name() == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, pairs: Vec<(usize, usize)>, m: usize, k: usize, n: usize },
    Binary { kind: BinKind, a: Var, b: Var },
    Scale { a: Var, s: T },
    AddScalar { a: Var },
    Gelu { a: Var, tanh: Vec<T> },
    Relu { a: Var },
    Sqrt { a: Var },
    Square { a: Var },
    Softmax { a: Var, outer: usize, len: usize, inner: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Reshape { a: Var },
    Permute { a: Var, axes: Vec<usize> },
    MeanAxis { a: Var, outer: usize, len: usize, inner: usize },
    Sum { a: Var },
    Mean { a: Var },
    Expand { a: Var, outer: usize, count: usize, inner: usize },
    Narrow { a: Var, outer: usize, len: usize, inner: usize, start: usize, width: usize },
    Concat { a: Var, b: Var, outer: usize, la: usize, lb: usize, inner: usize },
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::MatMul { .. } => OpKind::MatMul,
            Op::Binary { kind: BinKind::Add, .. } => OpKind::Add,
            Op::Binary { kind: BinKind::Sub, .. } => OpKind::Sub,
            Op::Binary { kind: BinKind::Mul, .. } => OpKind::Mul,
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::Gelu { .. } => OpKind::Gelu,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sqrt { .. } => OpKind::Sqrt,
            Op::Square { .. } => OpKind::Square,
            Op::Softmax { .. } => OpKind::Softmax,
            Op::LayerNorm { .. } => OpKind::LayerNorm,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Permute { .. } => OpKind::Permute,
            Op::MeanAxis { .. } => OpKind::MeanAxis,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::Expand { .. } => OpKind::Expand,
            Op::Narrow { .. } => OpKind::Narrow,
            Op::Concat { .. } => OpKind::Concat,
            Op::Mse { .. } => OpKind::Mse,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Records a forward computation so gradients can be propagated back through it.
///
/// Nodes are appended in execution order, so the node list is always a
/// topological order of the graph.
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
    first_non_finite: Option<(Var, OpKind)>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn nonempty_shape(mut shape: Vec<usize>) -> Vec<usize> {
    if shape.is_empty() {
        shape.push(1);
    }
    shape
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: None, first_non_finite: None }
    }

    /// Tape whose backward rule for `kind` is deliberately wrong (upstream
    /// gradient scaled by 1.5). Exists so gradient checking can be shown to
    /// catch a broken rule.
    pub fn with_fault(kind: OpKind) -> Self {
        Self { fault: Some(kind), ..Self::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    /// First operation that produced a non-finite value from finite inputs.
    pub fn first_non_finite(&self) -> Option<(Var, OpKind)> {
        self.first_non_finite
    }

    /// Leaves that require gradients, in creation order.
    pub fn trainable_leaves(&self) -> Vec<Var> {
        (0..self.nodes.len())
            .filter(|&i| matches!(self.nodes[i].op, Op::Leaf) && self.nodes[i].requires_grad)
            .map(Var)
            .collect()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let id = Var(self.nodes.len());
        if cfg!(debug_assertions)
            && self.first_non_finite.is_none()
            && !value.all_finite()
            && inputs.iter().all(|v| self.nodes[v.0].value.all_finite())
        {
            self.first_non_finite = Some((id, op.kind()));
        }
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        id
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---------------------------------------------------------------- forward

    /// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]` with
    /// broadcast batch extents.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(GradError::Shape(format!("matmul: cannot multiply {:?} by {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut out_batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(GradError::Shape(format!(
                    "matmul: batch extents of {:?} and {:?} do not broadcast",
                    sa, sb
                )));
            }
            out_batch.push(x.max(y));
        }
        let nb = numel(&out_batch);
        let mut pairs = Vec::with_capacity(nb);
        let mut idx = vec![0usize; rank];
        for _ in 0..nb {
            let (mut ai, mut bi) = (0, 0);
            for d in 0..rank {
                ai = ai * pa[d] + if pa[d] == 1 { 0 } else { idx[d] };
                bi = bi * pb[d] + if pb[d] == 1 { 0 } else { idx[d] };
            }
            pairs.push((ai, bi));
            for d in (0..rank).rev() {
                idx[d] += 1;
                if idx[d] < out_batch[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut out = vec![T::zero(); nb * m * n];
        {
            let (ad, bd) = (self.data(a), self.data(b));
            if bb.is_empty() && ba.iter().product::<usize>() == nb {
                gemm(nb * m, k, n, MatRef::n(ad), MatRef::n(bd), T::zero(), &mut out);
            } else {
                for (o, &(ai, bi)) in pairs.iter().enumerate() {
                    gemm(
                        m,
                        k,
                        n,
                        MatRef::n(&ad[ai * m * k..(ai + 1) * m * k]),
                        MatRef::n(&bd[bi * k * n..(bi + 1) * k * n]),
                        T::zero(),
                        &mut out[o * m * n..(o + 1) * m * n],
                    );
                }
            }
        }
        let mut shape = out_batch;
        shape.extend_from_slice(&[m, n]);
        Ok(self.push(Tensor::from_vec(shape, out), Op::MatMul { a, b, pairs, m, k, n }, &[a, b]))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var, GradError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(GradError::Shape(format!(
                "{:?}: shape {:?} does not broadcast onto {:?}",
                kind, sb, sa
            )));
        }
        let shape = sa.to_vec();
        let (ad, bd) = (self.data(a), self.data(b));
        let out = match kind {
            BinKind::Add => broadcast_zip(ad, bd, |x, y| x + y),
            BinKind::Sub => broadcast_zip(ad, bd, |x, y| x - y),
            BinKind::Mul => broadcast_zip(ad, bd, |x, y| x * y),
        };
        Ok(self.push(Tensor::from_vec(shape, out), Op::Binary { kind, a, b }, &[a, b]))
    }

    /// Elementwise sum; `b` may be a trailing-suffix broadcast of `a` (e.g. a bias).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        self.binary(BinKind::Mul, a, b)
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let v = self.value(a);
        let out = Tensor::from_vec(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect());
        self.push(out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.map(a, Op::Scale { a, s }, |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.map(a, Op::AddScalar { a }, |x| x + s)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let (k, c, half) = (T::lit(GELU_K), T::lit(GELU_C), T::lit(0.5));
        let v = self.value(a);
        let mut tanh: Vec<T> = v.data().iter().map(|&x| k * (x + c * x * x * x)).collect();
        T::tanh_in_place(&mut tanh);
        let out = v.data().iter().zip(&tanh).map(|(&x, &t)| half * x * (T::one() + t)).collect();
        let out = Tensor::from_vec(v.shape().to_vec(), out);
        self.push(out, Op::Gelu { a, tanh }, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu { a }, |x| x.max(T::zero()))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, Op::Sqrt { a }, |x| x.sqrt())
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square { a }, |x| x * x)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, GradError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(GradError::Shape(format!("softmax: axis {} out of range for {:?}", axis, shape)));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let mut out = self.data(a).to_vec();
        softmax_in_place(&mut out, outer, len, inner);
        Ok(self.push(Tensor::from_vec(shape, out), Op::Softmax { a, outer, len, inner }, &[a]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, GradError> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(GradError::Shape(format!(
                "layernorm: gamma {:?} / beta {:?} must be [{}]",
                self.shape(gamma),
                self.shape(beta),
                d
            )));
        }
        let rows = numel(&shape) / d;
        let (xd, g, b) = (self.data(x), self.data(gamma), self.data(beta));
        let eps = T::lit(eps);
        let dn = T::lit(d as f64);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::from_vec(shape, out),
            Op::LayerNorm { x, gamma, beta, xhat, rstd },
            &[x, gamma, beta],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, GradError> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape { a }, &[a]))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var, GradError> {
        let t = self.value(a).permute(axes)?;
        Ok(self.push(t, Op::Permute { a, axes: axes.to_vec() }, &[a]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, GradError> {
        let r = self.shape(a).len();
        if r < 2 {
            return Err(GradError::Shape(format!("transpose needs rank >= 2, got {:?}", self.shape(a))));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 1, r - 2);
        self.permute(a, &axes)
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var, GradError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(GradError::Shape(format!("mean_axis: axis {} out of range for {:?}", axis, shape)));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let ad = self.data(a);
        let inv = T::one() / T::lit(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &ad[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
            for d in dst.iter_mut() {
                *d = *d * inv;
            }
        }
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        let out_shape = nonempty_shape(out_shape);
        Ok(self.push(Tensor::from_vec(out_shape, out), Op::MeanAxis { a, outer, len, inner }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let d = self.data(a);
        let s = d.iter().copied().sum::<T>() / T::lit(d.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    /// Inserts a new axis of extent `count` at position `axis`, repeating the input.
    pub fn expand(&mut self, a: Var, axis: usize, count: usize) -> Result<Var, GradError> {
        let shape = self.shape(a).to_vec();
        if axis > shape.len() || count == 0 {
            return Err(GradError::Shape(format!("expand: invalid axis {} for {:?}", axis, shape)));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let ad = self.data(a);
        let mut out = Vec::with_capacity(outer * count * inner);
        for o in 0..outer {
            for _ in 0..count {
                out.extend_from_slice(&ad[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, count);
        Ok(self.push(Tensor::from_vec(out_shape, out), Op::Expand { a, outer, count, inner }, &[a]))
    }

    /// Slice `start..start + width` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, width: usize) -> Result<Var, GradError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || width == 0 || start + width > shape[axis] {
            return Err(GradError::Shape(format!(
                "narrow: range {}..{} on axis {} out of bounds for {:?}",
                start,
                start + width,
                axis,
                shape
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let ad = self.data(a);
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            out.extend_from_slice(&ad[(o * len + start) * inner..(o * len + start + width) * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        Ok(self.push(
            Tensor::from_vec(out_shape, out),
            Op::Narrow { a, outer, len, inner, start, width },
            &[a],
        ))
    }

    /// Concatenation of `a` and `b` along `axis`; all other extents must agree.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var, GradError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let compatible = sa.len() == sb.len()
            && axis < sa.len()
            && sa.iter().zip(&sb).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !compatible {
            return Err(GradError::Shape(format!("concat: {:?} and {:?} on axis {}", sa, sb, axis)));
        }
        let (outer, la, inner) = split_axis(&sa, axis);
        let lb = sb[axis];
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for o in 0..outer {
            out.extend_from_slice(&ad[o * la * inner..(o + 1) * la * inner]);
            out.extend_from_slice(&bd[o * lb * inner..(o + 1) * lb * inner]);
        }
        let mut shape = sa;
        shape[axis] = la + lb;
        Ok(self.push(Tensor::from_vec(shape, out), Op::Concat { a, b, outer, la, lb, inner }, &[a, b]))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var, GradError> {
        if self.shape(a) != self.shape(b) {
            return Err(GradError::Shape(format!(
                "mse: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let s = ad.iter().zip(bd).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>() / T::lit(ad.len() as f64);
        Ok(self.push(Tensor::scalar(s), Op::Mse { a, b }, &[a, b]))
    }

    /// Mean cross-entropy of `[M, C]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var, GradError> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != labels.len() || labels.iter().any(|&l| l >= shape[1]) {
            return Err(GradError::Shape(format!(
                "cross_entropy: logits {:?} with {} labels",
                shape,
                labels.len()
            )));
        }
        let (rows, c) = (shape[0], shape[1]);
        let mut probs = self.data(logits).to_vec();
        softmax_in_place(&mut probs, rows, c, 1);
        let tiny = T::min_positive_value();
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -(probs[r * c + l].max(tiny)).ln())
            .sum::<T>()
            / T::lit(rows as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            &[logits],
        ))
    }

    // --------------------------------------------------------------- backward

    /// Propagates d(loss)/d(leaf) into every leaf that requires a gradient.
    /// Gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), GradError> {
        if !self.value(loss).is_scalar() {
            return Err(GradError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_seeded(loss, vec![T::one()])
    }

    /// Vector-Jacobian product: propagates `seed` as the gradient of `out`.
    pub fn backward_seeded(&mut self, out: Var, seed: Vec<T>) -> Result<(), GradError> {
        if seed.len() != self.value(out).len() {
            return Err(GradError::Shape(format!(
                "seed of length {} for output {:?}",
                seed.len(),
                self.shape(out)
            )));
        }
        let mut adj: Vec<Option<Vec<T>>> = Vec::new();
        adj.resize_with(out.0 + 1, || None);
        adj[out.0] = Some(seed);
        for id in (0..=out.0).rev() {
            let Some(mut g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if self.fault == Some(self.nodes[id].op.kind()) {
                let f = T::lit(1.5);
                g.iter_mut().for_each(|x| *x = *x * f);
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &x)| *a = *a + x),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.backprop_node(id, &g, &mut adj);
        }
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[id].value.data();
        match &nodes[id].op {
            Op::Leaf => {}
            Op::MatMul { a, b, pairs, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let b_is_matrix = self.shape(*b).len() == 2;
                let fused = b_is_matrix && pairs.iter().all(|p| p.1 == 0) && val(*a).len() == pairs.len() * m * k;
                if needs(*a) {
                    let bd = val(*b);
                    let da = slot(adj, *a, val(*a).len());
                    if fused {
                        let rows = pairs.len() * m;
                        gemm(rows, n, k, MatRef::n(g), MatRef::t(bd), T::one(), da);
                    } else {
                        for (o, &(ai, bi)) in pairs.iter().enumerate() {
                            gemm(
                                m,
                                n,
                                k,
                                MatRef::n(&g[o * m * n..(o + 1) * m * n]),
                                MatRef::t(&bd[bi * k * n..(bi + 1) * k * n]),
                                T::one(),
                                &mut da[ai * m * k..(ai + 1) * m * k],
                            );
                        }
                    }
                }
                if needs(*b) {
                    let ad = val(*a);
                    let db = slot(adj, *b, val(*b).len());
                    if fused {
                        let rows = pairs.len() * m;
                        gemm(k, rows, n, MatRef::t(ad), MatRef::n(g), T::one(), db);
                    } else {
                        for (o, &(ai, bi)) in pairs.iter().enumerate() {
                            gemm(
                                k,
                                m,
                                n,
                                MatRef::t(&ad[ai * m * k..(ai + 1) * m * k]),
                                MatRef::n(&g[o * m * n..(o + 1) * m * n]),
                                T::one(),
                                &mut db[bi * k * n..(bi + 1) * k * n],
                            );
                        }
                    }
                }
            }
            Op::Binary { kind, a, b } => {
                let nb = val(*b).len();
                if needs(*a) {
                    let da = slot(adj, *a, g.len());
                    match kind {
                        BinKind::Add | BinKind::Sub => add_into(da, g),
                        BinKind::Mul => {
                            let bd = val(*b);
                            for (dchunk, gchunk) in da.chunks_mut(nb).zip(g.chunks(nb)) {
                                for ((d, &gv), &bv) in dchunk.iter_mut().zip(gchunk).zip(bd) {
                                    *d = *d + gv * bv;
                                }
                            }
                        }
                    }
                }
                if needs(*b) {
                    let ad = val(*a);
                    let db = slot(adj, *b, nb);
                    for (i, gchunk) in g.chunks(nb).enumerate() {
                        match kind {
                            BinKind::Add => add_into(db, gchunk),
                            BinKind::Sub => db.iter_mut().zip(gchunk).for_each(|(d, &gv)| *d = *d - gv),
                            BinKind::Mul => {
                                let achunk = &ad[i * nb..(i + 1) * nb];
                                for ((d, &gv), &av) in db.iter_mut().zip(gchunk).zip(achunk) {
                                    *d = *d + gv * av;
                                }
                            }
                        }
                    }
                }
            }
            Op::Scale { a, s } => {
                let s = *s;
                zip_into(slot(adj, *a, g.len()), g, val(*a), |gv, _| gv * s);
            }
            Op::AddScalar { a } => add_into(slot(adj, *a, g.len()), g),
            Op::Gelu { a, tanh } => {
                let (k, c, half) = (T::lit(GELU_K), T::lit(GELU_C), T::lit(0.5));
                let three = T::lit(3.0);
                let da = slot(adj, *a, g.len());
                for (((d, &gv), &x), &t) in da.iter_mut().zip(g).zip(val(*a)).zip(tanh) {
                    let dt = half * (T::one() + t) + half * x * (T::one() - t * t) * k * (T::one() + three * c * x * x);
                    *d = *d + gv * dt;
                }
            }
            Op::Relu { a } => {
                zip_into(slot(adj, *a, g.len()), g, val(*a), |gv, x| if x > T::zero() { gv } else { T::zero() });
            }
            Op::Sqrt { a } => {
                let half = T::lit(0.5);
                zip_into(slot(adj, *a, g.len()), g, out, |gv, y| gv * half / y);
            }
            Op::Square { a } => {
                let two = T::lit(2.0);
                zip_into(slot(adj, *a, g.len()), g, val(*a), |gv, x| gv * two * x);
            }
            Op::Softmax { a, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let da = slot(adj, *a, g.len());
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot = (0..len).map(|l| g[base + l * inner] * out[base + l * inner]).sum::<T>();
                        for l in 0..len {
                            let p = base + l * inner;
                            da[p] = da[p] + out[p] * (g[p] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let d = val(*gamma).len();
                let rows = rstd.len();
                if needs(*x) {
                    let gm = val(*gamma);
                    let dn = T::lit(d as f64);
                    let dx = slot(adj, *x, g.len());
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gm[j];
                        }
                        let m1 = dxhat.iter().copied().sum::<T>() / dn;
                        let m2 = dxhat.iter().zip(hr).map(|(&a, &h)| a * h).sum::<T>() / dn;
                        for j in 0..d {
                            let p = r * d + j;
                            dx[p] = dx[p] + rstd[r] * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
                if needs(*gamma) {
                    let dg = slot(adj, *gamma, d);
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] = dg[j] + g[r * d + j] * xhat[r * d + j];
                        }
                    }
                }
                if needs(*beta) {
                    let db = slot(adj, *beta, d);
                    for r in 0..rows {
                        add_into(db, &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::Reshape { a } => add_into(slot(adj, *a, g.len()), g),
            Op::Permute { a, axes } => {
                let inv = inverse_permutation(axes);
                let mut tmp = vec![T::zero(); g.len()];
                permute_into(g, nodes[id].value.shape(), &inv, &mut tmp);
                add_into(slot(adj, *a, g.len()), &tmp);
            }
            Op::MeanAxis { a, outer, len, inner } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                let inv = T::one() / T::lit(len as f64);
                let da = slot(adj, *a, outer * len * inner);
                for o in 0..outer {
                    let gsrc = &g[o * inner..(o + 1) * inner];
                    for l in 0..len {
                        let dst = &mut da[(o * len + l) * inner..(o * len + l + 1) * inner];
                        dst.iter_mut().zip(gsrc).for_each(|(d, &gv)| *d = *d + gv * inv);
                    }
                }
            }
            Op::Sum { a } => {
                let gv = g[0];
                let n = val(*a).len();
                slot(adj, *a, n).iter_mut().for_each(|d| *d = *d + gv);
            }
            Op::Mean { a } => {
                let n = val(*a).len();
                let gv = g[0] / T::lit(n as f64);
                slot(adj, *a, n).iter_mut().for_each(|d| *d = *d + gv);
            }
            Op::Expand { a, outer, count, inner } => {
                let (outer, count, inner) = (*outer, *count, *inner);
                let da = slot(adj, *a, outer * inner);
                for o in 0..outer {
                    let dst = &mut da[o * inner..(o + 1) * inner];
                    for c in 0..count {
                        add_into(dst, &g[(o * count + c) * inner..(o * count + c + 1) * inner]);
                    }
                }
            }
            Op::Narrow { a, outer, len, inner, start, width } => {
                let (outer, len, inner, start, width) = (*outer, *len, *inner, *start, *width);
                let da = slot(adj, *a, outer * len * inner);
                for o in 0..outer {
                    add_into(
                        &mut da[(o * len + start) * inner..(o * len + start + width) * inner],
                        &g[o * width * inner..(o + 1) * width * inner],
                    );
                }
            }
            Op::Concat { a, b, outer, la, lb, inner } => {
                let (outer, la, lb, inner) = (*outer, *la, *lb, *inner);
                let row = (la + lb) * inner;
                if needs(*a) {
                    let da = slot(adj, *a, outer * la * inner);
                    for o in 0..outer {
                        add_into(&mut da[o * la * inner..(o + 1) * la * inner], &g[o * row..o * row + la * inner]);
                    }
                }
                if needs(*b) {
                    let db = slot(adj, *b, outer * lb * inner);
                    for o in 0..outer {
                        add_into(&mut db[o * lb * inner..(o + 1) * lb * inner], &g[o * row + la * inner..(o + 1) * row]);
                    }
                }
            }
            Op::Mse { a, b } => {
                let (ad, bd) = (val(*a), val(*b));
                let scale = T::lit(2.0) * g[0] / T::lit(ad.len() as f64);
                if needs(*a) {
                    let da = slot(adj, *a, ad.len());
                    for ((d, &x), &y) in da.iter_mut().zip(ad).zip(bd) {
                        *d = *d + scale * (x - y);
                    }
                }
                if needs(*b) {
                    let db = slot(adj, *b, bd.len());
                    for ((d, &x), &y) in db.iter_mut().zip(ad).zip(bd) {
                        *d = *d - scale * (x - y);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let rows = labels.len();
                let c = probs.len() / rows;
                let scale = g[0] / T::lit(rows as f64);
                let dl = slot(adj, *logits, probs.len());
                for (r, &l) in labels.iter().enumerate() {
                    for j in 0..c {
                        let onehot = if j == l { T::one() } else { T::zero() };
                        let p = r * c + j;
                        dl[p] = dl[p] + scale * (probs[p] - onehot);
                    }
                }
            }
        }
    }
}

fn broadcast_zip<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    let mut out = Vec::with_capacity(a.len());
    for chunk in a.chunks(b.len()) {
        out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
    }
    out
}

fn slot<T: Scalar>(adj: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    adj[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

fn zip_into<T: Scalar>(dst: &mut [T], g: &[T], x: &[T], f: impl Fn(T, T) -> T) {
    for ((d, &gv), &xv) in dst.iter_mut().zip(g).zip(x) {
        *d = *d + f(gv, xv);
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(data: &mut [T], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            let mut mx = T::neg_infinity();
            for l in 0..len {
                mx = mx.max(data[base + l * inner]);
            }
            let mut total = T::zero();
            for l in 0..len {
                let e = (data[base + l * inner] - mx).exp();
                data[base + l * inner] = e;
                total = total + e;
            }
            for l in 0..len {
                data[base + l * inner] = data[base + l * inner] / total;
            }
        }
    }
}

