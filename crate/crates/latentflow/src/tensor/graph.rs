//! Reverse-mode tape. Ops append nodes; `backward` walks the tape in
//! reverse, accumulating gradients into every node that (transitively)
//! depends on a differentiable leaf.
//!
//! Construction and backward are single-threaded; two identical forward
//! passes produce bitwise-identical values.

use super::kernels as k;
use super::{numel, Element, Tensor, TensorError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Clone, Copy, Debug)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinKind {
    fn name(self) -> &'static str {
        match self {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum UnKind {
    Relu,
    Gelu,
    Tanh,
    Sigmoid,
    Abs,
}

impl UnKind {
    fn name(self) -> &'static str {
        match self {
            UnKind::Relu => "relu",
            UnKind::Gelu => "gelu",
            UnKind::Tanh => "tanh",
            UnKind::Sigmoid => "sigmoid",
            UnKind::Abs => "abs",
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Binary { kind: BinKind, a: usize, b: usize },
    Unary { kind: UnKind, a: usize },
    Scale { a: usize, factor: f64 },
    AddScalar { a: usize },
    MatMul { a: usize, b: usize },
    Bmm { a: usize, b: usize },
    Conv2d { x: usize, w: usize, bias: Option<usize>, stride: usize, pad: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gamma: usize, beta: usize },
    Concat { inputs: Vec<usize>, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    Reshape { a: usize },
    Permute { a: usize, axes: Vec<usize> },
    BroadcastTo { a: usize },
    SumAxis { a: usize, axis: usize, mean: bool },
    SumAll { a: usize, mean: bool },
    Bilinear { map: usize, coords: usize },
    PosEmbed { coords: usize },
    Unfold3x3 { a: usize },
    ZeroPad2d { a: usize, pb: usize, pr: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary { kind, .. } => kind.name(),
            Op::Unary { kind, .. } => kind.name(),
            Op::Scale { .. } => "scale",
            Op::AddScalar { .. } => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Bmm { .. } => "bmm",
            Op::Conv2d { .. } => "conv2d",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape { .. } => "reshape",
            Op::Permute { .. } => "permute",
            Op::BroadcastTo { .. } => "broadcast_to",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll { .. } => "sum_all",
            Op::Bilinear { .. } => "bilinear_sample",
            Op::PosEmbed { .. } => "positional_embedding",
            Op::Unfold3x3 { .. } => "unfold3x3",
            Op::ZeroPad2d { .. } => "zero_pad2d",
        }
    }
}

pub struct Graph<T: Element> {
    values: Vec<Tensor<T>>,
    grads: Vec<Option<Vec<T>>>,
    ops: Vec<Op>,
    needs: Vec<bool>,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { values: Vec::new(), grads: Vec::new(), ops: Vec::new(), needs: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs: bool) -> NodeId {
        self.values.push(value);
        self.grads.push(None);
        self.ops.push(op);
        self.needs.push(needs);
        NodeId(self.values.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, false)
    }

    /// Differentiable input; `backward` will populate its gradient.
    pub fn leaf(&mut self, t: Tensor<T>) -> NodeId {
        self.push(t, Op::Leaf, true)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.values[id.0].shape()
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.grads[id.0].as_deref()
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.ops[id.0].name()
    }

    /// Rough working-set size: value and gradient buffers currently held.
    pub fn approx_bytes(&self) -> usize {
        let elem = std::mem::size_of::<T>();
        let vals: usize = self.values.iter().map(|v| v.numel() * elem).sum();
        let grads: usize = self.grads.iter().flatten().map(|g| g.len() * elem).sum();
        vals + grads
    }

    /// First node (in construction order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(NodeId, &'static str)> {
        self.values
            .iter()
            .position(|v| !v.all_finite())
            .map(|i| (NodeId(i), self.ops[i].name()))
    }

    /// Every softmax node with its axis, for attention/mask audits.
    pub fn softmax_nodes(&self) -> Vec<(NodeId, usize)> {
        self.ops
            .iter()
            .enumerate()
            .filter_map(|(i, op)| match op {
                Op::Softmax { axis, .. } => Some((NodeId(i), *axis)),
                _ => None,
            })
            .collect()
    }

    // ── elementwise ─────────────────────────────────────────────────────

    fn binary(&mut self, kind: BinKind, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let shape = k::broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| {
            TensorError::NotBroadcastable {
                op: kind.name(),
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            }
        })?;
        let f: fn(T, T) -> T = match kind {
            BinKind::Add => |x, y| x + y,
            BinKind::Sub => |x, y| x - y,
            BinKind::Mul => |x, y| x * y,
            BinKind::Div => |x, y| x / y,
        };
        let data = k::binary_bcast(va.data(), va.shape(), vb.data(), vb.shape(), &shape, f);
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(
            Tensor::from_vec(&shape, data).expect("broadcast volume"),
            Op::Binary { kind, a: a.0, b: b.0 },
            needs,
        ))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary(BinKind::Div, a, b)
    }

    fn unary(&mut self, kind: UnKind, a: NodeId) -> NodeId {
        let va = &self.values[a.0];
        let data: Vec<T> = match kind {
            UnKind::Relu => va.data().iter().map(|&x| if x > T::zero() { x } else { T::zero() }).collect(),
            UnKind::Gelu => va.data().iter().map(|&x| k::gelu(x)).collect(),
            UnKind::Tanh => va.data().iter().map(|&x| x.tanh()).collect(),
            UnKind::Sigmoid => va.data().iter().map(|&x| k::sigmoid(x)).collect(),
            UnKind::Abs => va.data().iter().map(|&x| x.abs()).collect(),
        };
        let t = Tensor::from_vec(va.shape(), data).expect("same volume");
        let needs = self.needs[a.0];
        self.push(t, Op::Unary { kind, a: a.0 }, needs)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(UnKind::Relu, a)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.unary(UnKind::Gelu, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(UnKind::Tanh, a)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(UnKind::Sigmoid, a)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(UnKind::Abs, a)
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let va = &self.values[a.0];
        let f = T::from_f64(factor);
        let data: Vec<T> = va.data().iter().map(|&x| x * f).collect();
        let t = Tensor::from_vec(va.shape(), data).expect("same volume");
        let needs = self.needs[a.0];
        self.push(t, Op::Scale { a: a.0, factor }, needs)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let va = &self.values[a.0];
        let cv = T::from_f64(c);
        let data: Vec<T> = va.data().iter().map(|&x| x + cv).collect();
        let t = Tensor::from_vec(va.shape(), data).expect("same volume");
        let needs = self.needs[a.0];
        self.push(t, Op::AddScalar { a: a.0 }, needs)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch { op: "matmul", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (m, kk, n) = (sa[0], sa[1], sb[1]);
        let data = k::mm_nn(va.data(), vb.data(), m, kk, n);
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(
            Tensor::from_vec(&[m, n], data).expect("matmul volume"),
            Op::MatMul { a: a.0, b: b.0 },
            needs,
        ))
    }

    /// Batched matmul: [batch,m,k] · [batch,k,n] → [batch,m,n].
    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        let (sa, sb) = (va.shape(), vb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(TensorError::ShapeMismatch { op: "bmm", lhs: sa.to_vec(), rhs: sb.to_vec() });
        }
        let (bt, m, kk, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut data = Vec::with_capacity(bt * m * n);
        for bi in 0..bt {
            data.extend(k::mm_nn(
                &va.data()[bi * m * kk..(bi + 1) * m * kk],
                &vb.data()[bi * kk * n..(bi + 1) * kk * n],
                m,
                kk,
                n,
            ));
        }
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(
            Tensor::from_vec(&[bt, m, n], data).expect("bmm volume"),
            Op::Bmm { a: a.0, b: b.0 },
            needs,
        ))
    }

    /// Channels-last convolution: x [b,h,w,ci], w [co,kh,kw,ci], bias [co].
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        bias: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, TensorError> {
        let (vx, vw) = (&self.values[x.0], &self.values[w.0]);
        let (sx, sw) = (vx.shape(), vw.shape());
        if sx.len() != 4 || sw.len() != 4 || sx[3] != sw[3] {
            return Err(TensorError::ShapeMismatch { op: "conv2d", lhs: sx.to_vec(), rhs: sw.to_vec() });
        }
        let (b, h, wd, ci) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, kh, kw) = (sw[0], sw[1], sw[2]);
        if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
            return Err(TensorError::Invalid {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} stride {stride} does not fit input {h}x{wd} pad {pad}"),
            });
        }
        if let Some(bid) = bias {
            let sb = self.values[bid.0].shape();
            if sb != [co] {
                return Err(TensorError::ShapeMismatch { op: "conv2d bias", lhs: sb.to_vec(), rhs: vec![co] });
            }
        }
        let (ho, wo) = k::conv2d_out_hw(h, wd, kh, kw, stride, pad);
        let data = k::conv2d(
            vx.data(),
            b,
            h,
            wd,
            ci,
            vw.data(),
            co,
            kh,
            kw,
            bias.map(|bid| self.values[bid.0].data()),
            stride,
            pad,
        );
        let needs =
            self.needs[x.0] || self.needs[w.0] || bias.map(|bid| self.needs[bid.0]).unwrap_or(false);
        Ok(self.push(
            Tensor::from_vec(&[b, ho, wo, co], data).expect("conv volume"),
            Op::Conv2d { x: x.0, w: w.0, bias: bias.map(|b| b.0), stride, pad },
            needs,
        ))
    }

    // ── normalization ───────────────────────────────────────────────────

    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let va = &self.values[a.0];
        if axis >= va.rank() {
            return Err(TensorError::AxisOutOfRange { op: "softmax", axis, rank: va.rank() });
        }
        if va.shape()[axis] == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax", axis, shape: va.shape().to_vec() });
        }
        let data = k::softmax(va.data(), va.shape(), axis);
        let t = Tensor::from_vec(va.shape(), data).expect("same volume");
        let needs = self.needs[a.0];
        Ok(self.push(t, Op::Softmax { a: a.0, axis }, needs))
    }

    /// Layer norm over the last axis; gamma and beta have that axis's length.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> Result<NodeId, TensorError> {
        let vx = &self.values[x.0];
        if vx.rank() == 0 || *vx.shape().last().unwrap() == 0 {
            return Err(TensorError::EmptyAxis {
                op: "layer_norm",
                axis: vx.rank().saturating_sub(1),
                shape: vx.shape().to_vec(),
            });
        }
        let d = *vx.shape().last().unwrap();
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            let s = self.values[id.0].shape();
            if s != [d] {
                let _ = name;
                return Err(TensorError::ShapeMismatch { op: "layer_norm", lhs: s.to_vec(), rhs: vec![d] });
            }
        }
        let data = k::layer_norm(
            vx.data(),
            d,
            self.values[gamma.0].data(),
            self.values[beta.0].data(),
            T::from_f64(LN_EPS),
        );
        let t = Tensor::from_vec(vx.shape(), data).expect("same volume");
        let needs = self.needs[x.0] || self.needs[gamma.0] || self.needs[beta.0];
        Ok(self.push(t, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0 }, needs))
    }

    // ── structure ───────────────────────────────────────────────────────

    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        if inputs.is_empty() {
            return Err(TensorError::Invalid { op: "concat", msg: "no inputs".into() });
        }
        let first = self.values[inputs[0].0].shape().to_vec();
        if axis >= first.len() {
            return Err(TensorError::AxisOutOfRange { op: "concat", axis, rank: first.len() });
        }
        let mut total = 0;
        for id in inputs {
            let s = self.values[id.0].shape();
            if s.len() != first.len()
                || s.iter().enumerate().any(|(i, &e)| i != axis && e != first[i])
            {
                return Err(TensorError::ShapeMismatch { op: "concat", lhs: first, rhs: s.to_vec() });
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = k::axis_split(&shape, axis);
        let mut data = vec![T::zero(); numel(&shape)];
        let mut off_axis = 0usize;
        for id in inputs {
            let v = &self.values[id.0];
            let len_i = v.shape()[axis];
            for o in 0..outer {
                let src = o * len_i * inner;
                let dst = (o * total + off_axis) * inner;
                data[dst..dst + len_i * inner].copy_from_slice(&v.data()[src..src + len_i * inner]);
            }
            off_axis += len_i;
        }
        let needs = inputs.iter().any(|id| self.needs[id.0]);
        Ok(self.push(
            Tensor::from_vec(&shape, data).expect("concat volume"),
            Op::Concat { inputs: inputs.iter().map(|i| i.0).collect(), axis },
            needs,
        ))
    }

    pub fn narrow(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId, TensorError> {
        let va = &self.values[a.0];
        if axis >= va.rank() {
            return Err(TensorError::AxisOutOfRange { op: "narrow", axis, rank: va.rank() });
        }
        if len == 0 || start + len > va.shape()[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {start}..{} out of axis length {}", start + len, va.shape()[axis]),
            });
        }
        let (outer, full, inner) = k::axis_split(va.shape(), axis);
        let mut shape = va.shape().to_vec();
        shape[axis] = len;
        let mut data = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src = (o * full + start) * inner;
            let dst = o * len * inner;
            data[dst..dst + len * inner].copy_from_slice(&va.data()[src..src + len * inner]);
        }
        let needs = self.needs[a.0];
        Ok(self.push(
            Tensor::from_vec(&shape, data).expect("narrow volume"),
            Op::Narrow { a: a.0, axis, start },
            needs,
        ))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let va = &self.values[a.0];
        if numel(shape) != va.numel() {
            return Err(TensorError::DataLength {
                op: "reshape",
                shape: shape.to_vec(),
                expected: numel(shape),
                got: va.numel(),
            });
        }
        let t = Tensor::from_vec(shape, va.data().to_vec()).expect("same volume");
        let needs = self.needs[a.0];
        Ok(self.push(t, Op::Reshape { a: a.0 }, needs))
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId, TensorError> {
        let va = &self.values[a.0];
        let rank = va.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(TensorError::Invalid {
                op: "permute",
                msg: format!("axes {axes:?} is not a permutation of 0..{rank}"),
            });
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| va.shape()[ax]).collect();
        let data = k::permute(va.data(), va.shape(), axes);
        let needs = self.needs[a.0];
        Ok(self.push(
            Tensor::from_vec(&out_shape, data).expect("permute volume"),
            Op::Permute { a: a.0, axes: axes.to_vec() },
            needs,
        ))
    }

    pub fn broadcast_to(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, TensorError> {
        let va = &self.values[a.0];
        let joint = k::broadcast_shape(va.shape(), shape);
        if joint.as_deref() != Some(shape) {
            return Err(TensorError::NotBroadcastable {
                op: "broadcast_to",
                lhs: va.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let data = k::broadcast_to(va.data(), va.shape(), shape);
        let needs = self.needs[a.0];
        Ok(self.push(
            Tensor::from_vec(shape, data).expect("broadcast volume"),
            Op::BroadcastTo { a: a.0 },
            needs,
        ))
    }

    // ── reductions ──────────────────────────────────────────────────────

    fn reduce_axis(&mut self, a: NodeId, axis: usize, mean: bool) -> Result<NodeId, TensorError> {
        let va = &self.values[a.0];
        let op = if mean { "mean_axis" } else { "sum_axis" };
        if axis >= va.rank() {
            return Err(TensorError::AxisOutOfRange { op, axis, rank: va.rank() });
        }
        if va.shape()[axis] == 0 {
            return Err(TensorError::EmptyAxis { op, axis, shape: va.shape().to_vec() });
        }
        let mut data = k::sum_axis(va.data(), va.shape(), axis);
        if mean {
            let inv = T::one() / T::from_f64(va.shape()[axis] as f64);
            for v in &mut data {
                *v = *v * inv;
            }
        }
        let mut shape = va.shape().to_vec();
        shape.remove(axis);
        let needs = self.needs[a.0];
        Ok(self.push(
            Tensor::from_vec(&shape, data).expect("reduce volume"),
            Op::SumAxis { a: a.0, axis, mean },
            needs,
        ))
    }

    pub fn sum_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        self.reduce_axis(a, axis, true)
    }

    fn reduce_all(&mut self, a: NodeId, mean: bool) -> NodeId {
        let va = &self.values[a.0];
        let mut acc = T::zero();
        for &v in va.data() {
            acc = acc + v;
        }
        if mean && va.numel() > 0 {
            acc = acc / T::from_f64(va.numel() as f64);
        }
        let needs = self.needs[a.0];
        self.push(Tensor::scalar(acc), Op::SumAll { a: a.0, mean }, needs)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        self.reduce_all(a, false)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        self.reduce_all(a, true)
    }

    // ── sampling and embedding ──────────────────────────────────────────

    /// map [h,w] sampled at coords [n,2] (x, y) with zero padding → [n].
    /// Differentiable in both the map and the coordinates.
    pub fn bilinear_sample(&mut self, map: NodeId, coords: NodeId) -> Result<NodeId, TensorError> {
        let (vm, vc) = (&self.values[map.0], &self.values[coords.0]);
        if vm.rank() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "bilinear_sample",
                lhs: vm.shape().to_vec(),
                rhs: vec![0, 0],
            });
        }
        if vc.rank() != 2 || vc.shape()[1] != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "bilinear_sample coords",
                lhs: vc.shape().to_vec(),
                rhs: vec![vc.shape().first().copied().unwrap_or(0), 2],
            });
        }
        let (h, w) = (vm.shape()[0], vm.shape()[1]);
        let n = vc.shape()[0];
        let data = k::bilinear_sample(vm.data(), h, w, vc.data());
        let needs = self.needs[map.0] || self.needs[coords.0];
        Ok(self.push(
            Tensor::from_vec(&[n], data).expect("sample volume"),
            Op::Bilinear { map: map.0, coords: coords.0 },
            needs,
        ))
    }

    /// Sinusoidal position features of coords [n,2] → [n,dim], dim % 4 == 0.
    pub fn pos_embed(&mut self, coords: NodeId, dim: usize) -> Result<NodeId, TensorError> {
        let vc = &self.values[coords.0];
        if vc.rank() != 2 || vc.shape()[1] != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "positional_embedding",
                lhs: vc.shape().to_vec(),
                rhs: vec![vc.shape().first().copied().unwrap_or(0), 2],
            });
        }
        if dim == 0 || dim % 4 != 0 {
            return Err(TensorError::Invalid {
                op: "positional_embedding",
                msg: format!("dim {dim} must be a positive multiple of 4"),
            });
        }
        let n = vc.shape()[0];
        let data = k::pos_embed(vc.data(), dim);
        let needs = self.needs[coords.0];
        Ok(self.push(
            Tensor::from_vec(&[n, dim], data).expect("embed volume"),
            Op::PosEmbed { coords: coords.0 },
            needs,
        ))
    }

    /// [h,w,c] → [h,w,9,c] zero-padded 3×3 neighborhoods.
    pub fn unfold3x3(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        let va = &self.values[a.0];
        if va.rank() != 3 {
            return Err(TensorError::ShapeMismatch {
                op: "unfold3x3",
                lhs: va.shape().to_vec(),
                rhs: vec![0, 0, 0],
            });
        }
        let (h, w, c) = (va.shape()[0], va.shape()[1], va.shape()[2]);
        let data = k::unfold3x3(va.data(), h, w, c);
        let needs = self.needs[a.0];
        Ok(self.push(
            Tensor::from_vec(&[h, w, 9, c], data).expect("unfold volume"),
            Op::Unfold3x3 { a: a.0 },
            needs,
        ))
    }

    /// Zero padding on the bottom/right of [b,h,w,c].
    pub fn zero_pad2d(&mut self, a: NodeId, pb: usize, pr: usize) -> Result<NodeId, TensorError> {
        let va = &self.values[a.0];
        if va.rank() != 4 {
            return Err(TensorError::ShapeMismatch {
                op: "zero_pad2d",
                lhs: va.shape().to_vec(),
                rhs: vec![0, 0, 0, 0],
            });
        }
        let (b, h, w, c) = (va.shape()[0], va.shape()[1], va.shape()[2], va.shape()[3]);
        let data = k::zero_pad2d(va.data(), b, h, w, c, pb, pr);
        let needs = self.needs[a.0];
        Ok(self.push(
            Tensor::from_vec(&[b, h + pb, w + pr, c], data).expect("pad volume"),
            Op::ZeroPad2d { a: a.0, pb, pr },
            needs,
        ))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Accumulates gradients of `root` (a scalar) with respect to every node
    /// that needs them. Call once per graph.
    pub fn backward(&mut self, root: NodeId) -> Result<(), TensorError> {
        if self.values[root.0].numel() != 1 {
            return Err(TensorError::Invalid {
                op: "backward",
                msg: format!("root must be scalar, got shape {:?}", self.values[root.0].shape()),
            });
        }
        self.grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if !self.needs[i] {
                continue;
            }
            let Some(g) = self.grads[i].take() else { continue };
            self.dispatch_backward(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn take_buf(&mut self, id: usize) -> Vec<T> {
        match self.grads[id].take() {
            Some(buf) => buf,
            None => vec![T::zero(); self.values[id].numel()],
        }
    }

    fn put_buf(&mut self, id: usize, buf: Vec<T>) {
        match self.grads[id].take() {
            // the slot was refilled while we held the buffer (aliased inputs)
            Some(mut old) => {
                for (o, b) in old.iter_mut().zip(&buf) {
                    *o = *o + *b;
                }
                self.grads[id] = Some(old);
            }
            None => self.grads[id] = Some(buf),
        }
    }

    fn needs_buf(&self, id: usize) -> bool {
        self.needs[id]
    }

    fn dispatch_backward(&mut self, i: usize, g: &[T]) {
        let op = self.ops[i].clone();
        match op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let out_shape = self.values[i].shape().to_vec();
                let (wa, wb) = (self.needs_buf(a), self.needs_buf(b));
                let mut ba = if wa { Some(self.take_buf(a)) } else { None };
                let mut bb = if wb { Some(self.take_buf(b)) } else { None };
                {
                    let (va, vb) = (&self.values[a], &self.values[b]);
                    let one = T::one();
                    let (dfa, dfb): (fn(T, T) -> T, fn(T, T) -> T) = match kind {
                        BinKind::Add => (|_, _| T::one(), |_, _| T::one()),
                        BinKind::Sub => (|_, _| T::one(), |_, _| -T::one()),
                        BinKind::Mul => (|_, y| y, |x, _| x),
                        BinKind::Div => (|_, y| T::one() / y, |x, y| -x / (y * y)),
                    };
                    let _ = one;
                    k::binary_bcast_backward(
                        va.data(),
                        va.shape(),
                        vb.data(),
                        vb.shape(),
                        &out_shape,
                        g,
                        ba.as_deref_mut(),
                        bb.as_deref_mut(),
                        dfa,
                        dfb,
                    );
                }
                if let Some(buf) = ba {
                    self.put_buf(a, buf);
                }
                if let Some(buf) = bb {
                    self.put_buf(b, buf);
                }
            }
            Op::Unary { kind, a } => {
                if !self.needs_buf(a) {
                    return;
                }
                let mut buf = self.take_buf(a);
                {
                    let x = self.values[a].data();
                    let y = self.values[i].data();
                    match kind {
                        UnKind::Relu => {
                            for j in 0..buf.len() {
                                if x[j] > T::zero() {
                                    buf[j] = buf[j] + g[j];
                                }
                            }
                        }
                        UnKind::Gelu => {
                            for j in 0..buf.len() {
                                buf[j] = buf[j] + g[j] * k::gelu_grad(x[j]);
                            }
                        }
                        UnKind::Tanh => {
                            for j in 0..buf.len() {
                                buf[j] = buf[j] + g[j] * (T::one() - y[j] * y[j]);
                            }
                        }
                        UnKind::Sigmoid => {
                            for j in 0..buf.len() {
                                buf[j] = buf[j] + g[j] * y[j] * (T::one() - y[j]);
                            }
                        }
                        UnKind::Abs => {
                            for j in 0..buf.len() {
                                let s = if x[j] > T::zero() {
                                    T::one()
                                } else if x[j] < T::zero() {
                                    -T::one()
                                } else {
                                    T::zero()
                                };
                                buf[j] = buf[j] + g[j] * s;
                            }
                        }
                    }
                }
                self.put_buf(a, buf);
            }
            Op::Scale { a, factor } => {
                if !self.needs_buf(a) {
                    return;
                }
                let mut buf = self.take_buf(a);
                let f = T::from_f64(factor);
                for j in 0..buf.len() {
                    buf[j] = buf[j] + g[j] * f;
                }
                self.put_buf(a, buf);
            }
            Op::AddScalar { a } => {
                if !self.needs_buf(a) {
                    return;
                }
                let mut buf = self.take_buf(a);
                for j in 0..buf.len() {
                    buf[j] = buf[j] + g[j];
                }
                self.put_buf(a, buf);
            }
            Op::MatMul { a, b } => {
                let (m, kk) = (self.values[a].shape()[0], self.values[a].shape()[1]);
                let n = self.values[b].shape()[1];
                if self.needs_buf(a) {
                    let mut buf = self.take_buf(a);
                    k::mm_nt_acc(g, self.values[b].data(), m, n, kk, &mut buf);
                    self.put_buf(a, buf);
                }
                if self.needs_buf(b) {
                    let mut buf = self.take_buf(b);
                    k::mm_tn_acc(self.values[a].data(), g, kk, m, n, &mut buf);
                    self.put_buf(b, buf);
                }
            }
            Op::Bmm { a, b } => {
                let sa = self.values[a].shape().to_vec();
                let sb = self.values[b].shape().to_vec();
                let (bt, m, kk, n) = (sa[0], sa[1], sa[2], sb[2]);
                if self.needs_buf(a) {
                    let mut buf = self.take_buf(a);
                    for bi in 0..bt {
                        k::mm_nt_acc(
                            &g[bi * m * n..(bi + 1) * m * n],
                            &self.values[b].data()[bi * kk * n..(bi + 1) * kk * n],
                            m,
                            n,
                            kk,
                            &mut buf[bi * m * kk..(bi + 1) * m * kk],
                        );
                    }
                    self.put_buf(a, buf);
                }
                if self.needs_buf(b) {
                    let mut buf = self.take_buf(b);
                    for bi in 0..bt {
                        k::mm_tn_acc(
                            &self.values[a].data()[bi * m * kk..(bi + 1) * m * kk],
                            &g[bi * m * n..(bi + 1) * m * n],
                            kk,
                            m,
                            n,
                            &mut buf[bi * kk * n..(bi + 1) * kk * n],
                        );
                    }
                    self.put_buf(b, buf);
                }
            }
            Op::Conv2d { x, w, bias, stride, pad } => {
                let sx = self.values[x].shape().to_vec();
                let sw = self.values[w].shape().to_vec();
                let (b, h, wd, ci) = (sx[0], sx[1], sx[2], sx[3]);
                let (co, kh, kw) = (sw[0], sw[1], sw[2]);
                let want_x = self.needs_buf(x);
                let want_w = self.needs_buf(w);
                let want_b = bias.map(|bid| self.needs_buf(bid)).unwrap_or(false);
                let mut bx = if want_x { Some(self.take_buf(x)) } else { None };
                let mut bw = if want_w { Some(self.take_buf(w)) } else { None };
                let mut bb = if want_b { Some(self.take_buf(bias.unwrap())) } else { None };
                k::conv2d_backward(
                    self.values[x].data(),
                    b,
                    h,
                    wd,
                    ci,
                    self.values[w].data(),
                    co,
                    kh,
                    kw,
                    stride,
                    pad,
                    g,
                    bx.as_deref_mut(),
                    bw.as_deref_mut(),
                    bb.as_deref_mut(),
                );
                if let Some(buf) = bx {
                    self.put_buf(x, buf);
                }
                if let Some(buf) = bw {
                    self.put_buf(w, buf);
                }
                if let Some(buf) = bb {
                    self.put_buf(bias.unwrap(), buf);
                }
            }
            Op::Softmax { a, axis } => {
                if !self.needs_buf(a) {
                    return;
                }
                let mut buf = self.take_buf(a);
                let s = self.values[i].data();
                let shape = self.values[i].shape().to_vec();
                k::softmax_backward(s, &shape, axis, g, &mut buf);
                self.put_buf(a, buf);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let d = *self.values[x].shape().last().unwrap();
                let want_x = self.needs_buf(x);
                let want_g = self.needs_buf(gamma);
                let want_b = self.needs_buf(beta);
                let mut bx = if want_x { Some(self.take_buf(x)) } else { None };
                let mut bg = if want_g { Some(self.take_buf(gamma)) } else { None };
                let mut bb = if want_b { Some(self.take_buf(beta)) } else { None };
                k::layer_norm_backward(
                    self.values[x].data(),
                    d,
                    self.values[gamma].data(),
                    T::from_f64(LN_EPS),
                    g,
                    bx.as_deref_mut(),
                    bg.as_deref_mut(),
                    bb.as_deref_mut(),
                );
                if let Some(buf) = bx {
                    self.put_buf(x, buf);
                }
                if let Some(buf) = bg {
                    self.put_buf(gamma, buf);
                }
                if let Some(buf) = bb {
                    self.put_buf(beta, buf);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = self.values[i].shape().to_vec();
                let (outer, total, inner) = k::axis_split(&shape, axis);
                let mut off_axis = 0usize;
                for id in inputs {
                    let len_i = self.values[id].shape()[axis];
                    if self.needs_buf(id) {
                        let mut buf = self.take_buf(id);
                        for o in 0..outer {
                            let src = (o * total + off_axis) * inner;
                            let dst = o * len_i * inner;
                            for j in 0..len_i * inner {
                                buf[dst + j] = buf[dst + j] + g[src + j];
                            }
                        }
                        self.put_buf(id, buf);
                    }
                    off_axis += len_i;
                }
            }
            Op::Narrow { a, axis, start } => {
                if !self.needs_buf(a) {
                    return;
                }
                let mut buf = self.take_buf(a);
                let full_shape = self.values[a].shape().to_vec();
                let (outer, full, inner) = k::axis_split(&full_shape, axis);
                let len = self.values[i].shape()[axis];
                for o in 0..outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    for j in 0..len * inner {
                        buf[dst + j] = buf[dst + j] + g[src + j];
                    }
                }
                self.put_buf(a, buf);
            }
            Op::Reshape { a } => {
                if !self.needs_buf(a) {
                    return;
                }
                let mut buf = self.take_buf(a);
                for j in 0..buf.len() {
                    buf[j] = buf[j] + g[j];
                }
                self.put_buf(a, buf);
            }
            Op::Permute { a, axes } => {
                if !self.needs_buf(a) {
                    return;
                }
                let mut buf = self.take_buf(a);
                let in_shape = self.values[a].shape().to_vec();
                k::permute_backward(g, &in_shape, &axes, &mut buf);
                self.put_buf(a, buf);
            }
            Op::BroadcastTo { a } => {
                if !self.needs_buf(a) {
                    return;
                }
                let mut buf = self.take_buf(a);
                let in_shape = self.values[a].shape().to_vec();
                let out_shape = self.values[i].shape().to_vec();
                k::broadcast_to_backward(&in_shape, &out_shape, g, &mut buf);
                self.put_buf(a, buf);
            }
            Op::SumAxis { a, axis, mean } => {
                if !self.needs_buf(a) {
                    return;
                }
                let mut buf = self.take_buf(a);
                let in_shape = self.values[a].shape().to_vec();
                let scale = if mean {
                    T::one() / T::from_f64(in_shape[axis] as f64)
                } else {
                    T::one()
                };
                k::sum_axis_backward(&in_shape, axis, g, scale, &mut buf);
                self.put_buf(a, buf);
            }
            Op::SumAll { a, mean } => {
                if !self.needs_buf(a) {
                    return;
                }
                let mut buf = self.take_buf(a);
                let scale = if mean {
                    T::one() / T::from_f64(buf.len() as f64)
                } else {
                    T::one()
                };
                let gv = g[0] * scale;
                for v in &mut buf {
                    *v = *v + gv;
                }
                self.put_buf(a, buf);
            }
            Op::Bilinear { map, coords } => {
                let (h, w) = (self.values[map].shape()[0], self.values[map].shape()[1]);
                let want_m = self.needs_buf(map);
                let want_c = self.needs_buf(coords);
                let mut bm = if want_m { Some(self.take_buf(map)) } else { None };
                let mut bc = if want_c { Some(self.take_buf(coords)) } else { None };
                k::bilinear_sample_backward(
                    self.values[map].data(),
                    h,
                    w,
                    self.values[coords].data(),
                    g,
                    bm.as_deref_mut(),
                    bc.as_deref_mut(),
                );
                if let Some(buf) = bm {
                    self.put_buf(map, buf);
                }
                if let Some(buf) = bc {
                    self.put_buf(coords, buf);
                }
            }
            Op::PosEmbed { coords } => {
                if !self.needs_buf(coords) {
                    return;
                }
                let mut buf = self.take_buf(coords);
                let dim = self.values[i].shape()[1];
                k::pos_embed_backward(self.values[coords].data(), dim, g, &mut buf);
                self.put_buf(coords, buf);
            }
            Op::Unfold3x3 { a } => {
                if !self.needs_buf(a) {
                    return;
                }
                let mut buf = self.take_buf(a);
                let s = self.values[a].shape().to_vec();
                k::unfold3x3_backward(g, s[0], s[1], s[2], &mut buf);
                self.put_buf(a, buf);
            }
            Op::ZeroPad2d { a, pb, pr } => {
                if !self.needs_buf(a) {
                    return;
                }
                let mut buf = self.take_buf(a);
                let s = self.values[a].shape().to_vec();
                k::zero_pad2d_backward(g, s[0], s[1], s[2], s[3], pb, pr, &mut buf);
                self.put_buf(a, buf);
            }
        }
    }
}

const LN_EPS: f64 = 1e-5;
