//! Reverse-mode differentiation tape.
//!
//! Every forward operation appends one node holding its output value and the
//! ids of its inputs. Nodes are only ever appended, so the node order is a
//! topological order and `backward` is a single reverse sweep.

use crate::conv::{self, ConvShapes, ConvSpec, PoolGeometry};
use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec },
    ConvTranspose2d { input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec },
    AvgPool { input: Var, k: usize },
    GlobalAvgPool { input: Var },
    Relu { input: Var },
    Prelu { input: Var, slope: Var },
    Sigmoid { input: Var },
    Abs { input: Var },
    Log { input: Var },
    Square { input: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    ScaleChannels { x: Var, w: Var },
    ScalePixels { x: Var, a: Var },
    MulScalar { input: Var, c: f64 },
    BatchedMatmul { a: Var, b: Var },
    TransposeLast2 { input: Var },
    Reshape { input: Var },
    ConcatChannels { inputs: Vec<Var> },
    SliceChannels { input: Var, start: usize },
    Sum { input: Var },
    Mean { input: Var },
    RowNormalize { input: Var, eps: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::AvgPool { .. } => "avg_pool2d",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Relu { .. } => "relu",
            Op::Prelu { .. } => "prelu",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Abs { .. } => "abs",
            Op::Log { .. } => "log",
            Op::Square { .. } => "square",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "hadamard",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::ScalePixels { .. } => "scale_pixels",
            Op::MulScalar { .. } => "mul_scalar",
            Op::BatchedMatmul { .. } => "batched_matmul",
            Op::TransposeLast2 { .. } => "transpose_last2",
            Op::Reshape { .. } => "reshape",
            Op::ConcatChannels { .. } => "concat_channels",
            Op::SliceChannels { .. } => "slice_channels",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::RowNormalize { .. } => "row_normalize",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Single-owner record of a forward computation.
pub struct Tape<T: Element = f32> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar w.r.t. every node that required one.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Number of nodes holding a gradient buffer.
    pub fn populated(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(TensorError::dim(op, format!("shapes {a:?} and {b:?} differ")));
    }
    Ok(())
}

fn dims4(op: &'static str, t: &[usize]) -> Result<[usize; 4]> {
    match *t {
        [b, c, h, w] => Ok([b, c, h, w]),
        _ => Err(TensorError::dim(op, format!("expected B×C×H×W, got {t:?}"))),
    }
}

fn dims3(op: &'static str, t: &[usize]) -> Result<[usize; 3]> {
    match *t {
        [b, m, n] => Ok([b, m, n]),
        _ => Err(TensorError::dim(op, format!("expected rank-3 B×M×N, got {t:?}"))),
    }
}

fn accumulate<T: Element>(slot: &mut Option<Tensor<T>>, shape: &[usize], grad: Vec<T>) {
    match slot {
        Some(existing) => {
            for (d, g) in existing.data_mut().iter_mut().zip(grad) {
                *d += g;
            }
        }
        None => *slot = Some(Tensor::from_parts(shape.to_vec(), grad)),
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; no node will ever require a gradient.
    pub fn no_grad() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Names of the recorded operations in tape order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let requires_grad = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: ConvSpec) -> Result<Var> {
        const OP: &str = "conv2d";
        spec.validate(OP)?;
        let [b, c, h, w] = dims4(OP, self.shape(input))?;
        if c != spec.in_channels {
            return Err(TensorError::dim(
                OP,
                format!("input channel axis (C) is {c}, spec expects {}", spec.in_channels),
            ));
        }
        let expect = spec.weight_shape();
        if self.shape(weight) != expect {
            return Err(TensorError::dim(
                OP,
                format!(
                    "weight shape {:?} does not match Cout×Cin/groups×kh×kw = {expect:?}",
                    self.shape(weight)
                ),
            ));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [spec.out_channels] {
                return Err(TensorError::dim(
                    OP,
                    format!("bias shape {:?}, expected [{}]", self.shape(bv), spec.out_channels),
                ));
            }
        }
        let (oh, ow) = spec.output_hw(h, w)?;
        let shapes = ConvShapes { batch: b, h, w, oh, ow };
        let out = conv::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|bv| self.value(bv).data()),
            &spec,
            &shapes,
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::from_parts(vec![b, spec.out_channels, oh, ow], out),
            Op::Conv2d { input, weight, bias, spec },
            &inputs,
        ))
    }

    /// Depthwise conv (`groups = Cin`) followed by a pointwise 1×1 conv.
    pub fn depthwise_separable_conv(
        &mut self,
        input: Var,
        dw_weight: Var,
        dw_bias: Option<Var>,
        pw_weight: Var,
        pw_bias: Option<Var>,
        dw_spec: ConvSpec,
    ) -> Result<Var> {
        if dw_spec.groups != dw_spec.in_channels || dw_spec.out_channels != dw_spec.in_channels {
            return Err(TensorError::config(
                "depthwise_separable_conv",
                "depthwise stage needs groups == in_channels == out_channels",
            ));
        }
        let [cout, cin, kh, kw] = dims4("depthwise_separable_conv", self.shape(pw_weight))?;
        if (kh, kw) != (1, 1) || cin != dw_spec.in_channels {
            return Err(TensorError::dim(
                "depthwise_separable_conv",
                format!(
                    "pointwise weight must be Cout×{}×1×1, got {:?}",
                    dw_spec.in_channels,
                    self.shape(pw_weight)
                ),
            ));
        }
        let mid = self.conv2d(input, dw_weight, dw_bias, dw_spec)?;
        let pw_spec = ConvSpec::new(cin, cout, 1);
        self.conv2d(mid, pw_weight, pw_bias, pw_spec)
    }

    pub fn conv_transpose2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        spec: ConvSpec,
    ) -> Result<Var> {
        const OP: &str = "conv_transpose2d";
        spec.validate(OP)?;
        if spec.groups != 1 {
            return Err(TensorError::config(OP, "grouped transposed convolution is not supported"));
        }
        if spec.pad_mode != conv::PadMode::Zeros {
            return Err(TensorError::config(OP, "transposed convolution pads with zeros only"));
        }
        let [b, c, h, w] = dims4(OP, self.shape(input))?;
        if c != spec.in_channels {
            return Err(TensorError::dim(
                OP,
                format!("input channel axis (C) is {c}, spec expects {}", spec.in_channels),
            ));
        }
        let expect = spec.transposed_weight_shape();
        if self.shape(weight) != expect {
            return Err(TensorError::dim(
                OP,
                format!("weight shape {:?} does not match Cin×Cout×kh×kw = {expect:?}", self.shape(weight)),
            ));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [spec.out_channels] {
                return Err(TensorError::dim(OP, format!("bias shape {:?}", self.shape(bv))));
            }
        }
        let (oh, ow) = spec.transposed_output_hw(h, w)?;
        let shapes = ConvShapes { batch: b, h, w, oh, ow };
        let out = conv::conv_transpose2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|bv| self.value(bv).data()),
            &spec,
            &shapes,
        );
        let mut inputs = vec![input, weight];
        inputs.extend(bias);
        Ok(self.push(
            Tensor::from_parts(vec![b, spec.out_channels, oh, ow], out),
            Op::ConvTranspose2d { input, weight, bias, spec },
            &inputs,
        ))
    }

    /// Average pooling by `factor = 1/k`. Inputs whose sides are not
    /// multiples of `k` are reflect-padded at the bottom/right first.
    pub fn avg_pool2d(&mut self, input: Var, factor: f64) -> Result<Var> {
        const OP: &str = "avg_pool2d";
        let k = pool_window(factor)?;
        let [b, c, h, w] = dims4(OP, self.shape(input))?;
        let g = PoolGeometry::new(k, h, w);
        let out = conv::avg_pool_forward(self.value(input).data(), b * c, &g);
        Ok(self.push(
            Tensor::from_parts(vec![b, c, g.oh, g.ow], out),
            Op::AvgPool { input, k },
            &[input],
        ))
    }

    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = dims4("global_avg_pool", self.shape(input))?;
        let plane = h * w;
        let inv = T::from_f64(1.0 / plane as f64);
        let x = self.value(input).data();
        let out: Vec<T> = (0..b * c)
            .map(|p| x[p * plane..(p + 1) * plane].iter().copied().sum::<T>() * inv)
            .collect();
        Ok(self.push(
            Tensor::from_parts(vec![b, c, 1, 1], out),
            Op::GlobalAvgPool { input },
            &[input],
        ))
    }

    fn unary(&mut self, input: Var, op: Op, f: impl Fn(T) -> T) -> Var {
        let value = self.value(input).map(f);
        self.push(value, op, &[input])
    }

    pub fn relu(&mut self, input: Var) -> Var {
        self.unary(input, Op::Relu { input }, |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn sigmoid(&mut self, input: Var) -> Var {
        self.unary(input, Op::Sigmoid { input }, |v| T::one() / (T::one() + (-v).exp()))
    }

    pub fn abs(&mut self, input: Var) -> Var {
        self.unary(input, Op::Abs { input }, |v| v.abs())
    }

    pub fn log(&mut self, input: Var) -> Var {
        self.unary(input, Op::Log { input }, |v| v.ln())
    }

    pub fn square(&mut self, input: Var) -> Var {
        self.unary(input, Op::Square { input }, |v| v * v)
    }

    pub fn mul_scalar(&mut self, input: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        self.unary(input, Op::MulScalar { input, c }, |v| v * cv)
    }

    /// Parametric ReLU with one learnable slope per channel (axis 1).
    pub fn prelu(&mut self, input: Var, slope: Var) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if shape.len() < 2 || self.shape(slope) != [shape[1]] {
            return Err(TensorError::dim(
                "prelu",
                format!("slope shape {:?} must be [C] for input {shape:?}", self.shape(slope)),
            ));
        }
        let plane: usize = shape[2..].iter().product();
        let channels = shape[1];
        let a = self.value(slope).data();
        let out: Vec<T> = self
            .value(input)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| if v > T::zero() { v } else { v * a[(i / plane) % channels] })
            .collect();
        Ok(self.push(Tensor::from_parts(shape, out), Op::Prelu { input, slope }, &[input, slope]))
    }

    fn binary(&mut self, op_name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(T, T) -> T) -> Result<Var> {
        same_shape(op_name, self.shape(a), self.shape(b))?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, Op::Add { a, b }, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, Op::Sub { a, b }, |x, y| x - y)
    }

    /// Elementwise (Hadamard) product of equal shapes.
    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("hadamard", a, b, Op::Mul { a, b }, |x, y| x * y)
    }

    /// `x ⊙ w` with `w` of shape `B × C × 1 × 1` broadcast over H, W.
    pub fn scale_channels(&mut self, x: Var, w: Var) -> Result<Var> {
        let [b, c, h, wd] = dims4("scale_channels", self.shape(x))?;
        if self.shape(w) != [b, c, 1, 1] {
            return Err(TensorError::dim(
                "scale_channels",
                format!("weights {:?} must be [{b}, {c}, 1, 1]", self.shape(w)),
            ));
        }
        let plane = h * wd;
        let wv = self.value(w).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * wv[i / plane])
            .collect();
        Ok(self.push(Tensor::from_parts(vec![b, c, h, wd], out), Op::ScaleChannels { x, w }, &[x, w]))
    }

    /// `x ⊙ a` with `a` of shape `B × 1 × H × W` broadcast over channels.
    pub fn scale_pixels(&mut self, x: Var, a: Var) -> Result<Var> {
        let [b, c, h, w] = dims4("scale_pixels", self.shape(x))?;
        if self.shape(a) != [b, 1, h, w] {
            return Err(TensorError::dim(
                "scale_pixels",
                format!("map {:?} must be [{b}, 1, {h}, {w}]", self.shape(a)),
            ));
        }
        let plane = h * w;
        let av = self.value(a).data();
        let out: Vec<T> = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * av[(i / (c * plane)) * plane + i % plane])
            .collect();
        Ok(self.push(Tensor::from_parts(vec![b, c, h, w], out), Op::ScalePixels { x, a }, &[x, a]))
    }

    /// `[B, M, K] × [B, K, N] → [B, M, N]`.
    pub fn batched_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        const OP: &str = "batched_matmul";
        let [ba, m, k] = dims3(OP, self.shape(a))?;
        let [bb, k2, n] = dims3(OP, self.shape(b))?;
        if ba != bb {
            return Err(TensorError::dim(OP, format!("batch axis {ba} vs {bb}")));
        }
        if k != k2 {
            return Err(TensorError::dim(OP, format!("inner axes differ: lhs K={k}, rhs K={k2}")));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); ba * m * n];
        for i in 0..ba {
            T::gemm(
                m, k, n, T::one(),
                &av[i * m * k..], k, 1,
                &bv[i * k * n..], n, 1,
                T::zero(), &mut out[i * m * n..], n, 1,
            );
        }
        Ok(self.push(Tensor::from_parts(vec![ba, m, n], out), Op::BatchedMatmul { a, b }, &[a, b]))
    }

    pub fn transpose_last2(&mut self, input: Var) -> Result<Var> {
        let [b, m, n] = dims3("transpose_last2", self.shape(input))?;
        let out = transpose_batches(self.value(input).data(), b, m, n);
        Ok(self.push(Tensor::from_parts(vec![b, n, m], out), Op::TransposeLast2 { input }, &[input]))
    }

    pub fn reshape(&mut self, input: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.value(input).numel() {
            return Err(TensorError::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape(input)),
            ));
        }
        let data = self.value(input).data().to_vec();
        Ok(self.push(Tensor::from_parts(shape, data), Op::Reshape { input }, &[input]))
    }

    /// `B × C × H × W → B × C × (H·W)`.
    pub fn flatten_spatial(&mut self, input: Var) -> Result<Var> {
        let [b, c, h, w] = dims4("flatten_spatial", self.shape(input))?;
        self.reshape(input, vec![b, c, h * w])
    }

    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        const OP: &str = "concat_channels";
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::dim(OP, "no inputs"))?;
        let [b, _, h, w] = dims4(OP, self.shape(first))?;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let [bi, ci, hi, wi] = dims4(OP, self.shape(v))?;
            if (bi, hi, wi) != (b, h, w) {
                return Err(TensorError::dim(
                    OP,
                    format!("B/H/W axes {:?} vs {:?}", (bi, hi, wi), (b, h, w)),
                ));
            }
            channels.push(ci);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(b * total * plane);
        for bi in 0..b {
            for (&v, &ci) in inputs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(v).data()[bi * ci * plane..(bi + 1) * ci * plane]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, total, h, w], out),
            Op::ConcatChannels { inputs: inputs.to_vec() },
            inputs,
        ))
    }

    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let [b, c, h, w] = dims4("slice_channels", self.shape(input))?;
        if len == 0 || start + len > c {
            return Err(TensorError::dim(
                "slice_channels",
                format!("channels {start}..{} out of range for C={c}", start + len),
            ));
        }
        let plane = h * w;
        let x = self.value(input).data();
        let mut out = Vec::with_capacity(b * len * plane);
        for bi in 0..b {
            out.extend_from_slice(&x[(bi * c + start) * plane..(bi * c + start + len) * plane]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![b, len, h, w], out),
            Op::SliceChannels { input, start },
            &[input],
        ))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let v = self.value(input).sum();
        self.push(Tensor::scalar(v), Op::Sum { input }, &[input])
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let v = self.value(input).mean();
        self.push(Tensor::scalar(v), Op::Mean { input }, &[input])
    }

    /// `(x + eps) / Σ_last (x + eps)` along the last axis.
    pub fn row_normalize(&mut self, input: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        let n = *shape
            .last()
            .ok_or_else(|| TensorError::dim("row_normalize", "scalar input"))?;
        let e = T::from_f64(eps);
        let mut out = self.value(input).data().to_vec();
        for row in out.chunks_mut(n) {
            row.iter_mut().for_each(|v| *v += e);
            let s: T = row.iter().copied().sum();
            row.iter_mut().for_each(|v| *v = *v / s);
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::RowNormalize { input, eps }, &[input]))
    }

    /// Gradients of the scalar `loss` w.r.t. all nodes that require them.
    /// Nodes that do not participate receive no buffer; callers treat a
    /// missing buffer as zero.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::from_parts(lv.shape().to_vec(), vec![T::one()]));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (var, grad) in self.node_backward(node, g.data())? {
                let shape = self.shape(var).to_vec();
                accumulate(&mut grads[var.0], &shape, grad);
            }
            // Keep intermediate gradients around for inspection.
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node<T>, g: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let mut out = Vec::new();
        match node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, spec } => {
                let [b, _, h, w] = dims4("conv2d", self.shape(input))?;
                let [_, _, oh, ow] = dims4("conv2d", node.value.shape())?;
                let grads = conv::conv2d_backward(
                    self.value(input).data(),
                    self.value(weight).data(),
                    g,
                    &spec,
                    &ConvShapes { batch: b, h, w, oh, ow },
                    self.wants(input),
                    self.wants(weight),
                    bias.is_some_and(|bv| self.wants(bv)),
                );
                out.extend(grads.input.map(|d| (input, d)));
                out.extend(grads.weight.map(|d| (weight, d)));
                if let (Some(bv), Some(d)) = (bias, grads.bias) {
                    out.push((bv, d));
                }
            }
            Op::ConvTranspose2d { input, weight, bias, spec } => {
                let [b, _, h, w] = dims4("conv_transpose2d", self.shape(input))?;
                let [_, _, oh, ow] = dims4("conv_transpose2d", node.value.shape())?;
                let grads = conv::conv_transpose2d_backward(
                    self.value(input).data(),
                    self.value(weight).data(),
                    g,
                    &spec,
                    &ConvShapes { batch: b, h, w, oh, ow },
                    self.wants(input),
                    self.wants(weight),
                    bias.is_some_and(|bv| self.wants(bv)),
                );
                out.extend(grads.input.map(|d| (input, d)));
                out.extend(grads.weight.map(|d| (weight, d)));
                if let (Some(bv), Some(d)) = (bias, grads.bias) {
                    out.push((bv, d));
                }
            }
            Op::AvgPool { input, k } => {
                let [b, c, h, w] = dims4("avg_pool2d", self.shape(input))?;
                let geom = PoolGeometry::new(k, h, w);
                out.push((input, conv::avg_pool_backward(g, b * c, &geom)));
            }
            Op::GlobalAvgPool { input } => {
                let [_, _, h, w] = dims4("global_avg_pool", self.shape(input))?;
                let plane = h * w;
                let inv = T::from_f64(1.0 / plane as f64);
                let d = (0..self.value(input).numel()).map(|i| g[i / plane] * inv).collect();
                out.push((input, d));
            }
            Op::Relu { input } => {
                // Subgradient 0 at exactly 0.
                let x = self.value(input).data();
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                out.push((input, d));
            }
            Op::Prelu { input, slope } => {
                let shape = self.shape(input);
                let channels = shape[1];
                let plane: usize = shape[2..].iter().product();
                let x = self.value(input).data();
                let a = self.value(slope).data();
                if self.wants(input) {
                    let d = x
                        .iter()
                        .zip(g)
                        .enumerate()
                        .map(|(i, (&xv, &gv))| if xv > T::zero() { gv } else { gv * a[(i / plane) % channels] })
                        .collect();
                    out.push((input, d));
                }
                if self.wants(slope) {
                    let mut d = vec![T::zero(); channels];
                    for (i, (&xv, &gv)) in x.iter().zip(g).enumerate() {
                        if xv <= T::zero() {
                            d[(i / plane) % channels] += gv * xv;
                        }
                    }
                    out.push((slope, d));
                }
            }
            Op::Sigmoid { input } => {
                let y = node.value.data();
                let d = y.iter().zip(g).map(|(&yv, &gv)| gv * yv * (T::one() - yv)).collect();
                out.push((input, d));
            }
            Op::Abs { input } => {
                let x = self.value(input).data();
                let d = x
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| {
                        if xv > T::zero() {
                            gv
                        } else if xv < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                out.push((input, d));
            }
            Op::Log { input } => {
                let x = self.value(input).data();
                out.push((input, x.iter().zip(g).map(|(&xv, &gv)| gv / xv).collect()));
            }
            Op::Square { input } => {
                let x = self.value(input).data();
                let two = T::from_f64(2.0);
                out.push((input, x.iter().zip(g).map(|(&xv, &gv)| two * xv * gv).collect()));
            }
            Op::Add { a, b } => {
                if self.wants(a) {
                    out.push((a, g.to_vec()));
                }
                if self.wants(b) {
                    out.push((b, g.to_vec()));
                }
            }
            Op::Sub { a, b } => {
                if self.wants(a) {
                    out.push((a, g.to_vec()));
                }
                if self.wants(b) {
                    out.push((b, g.iter().map(|&v| -v).collect()));
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    out.push((a, g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect()));
                }
                if self.wants(b) {
                    out.push((b, g.iter().zip(av).map(|(&gv, &x)| gv * x).collect()));
                }
            }
            Op::ScaleChannels { x, w } => {
                let [_, _, h, wd] = dims4("scale_channels", self.shape(x))?;
                let plane = h * wd;
                let (xv, wv) = (self.value(x).data(), self.value(w).data());
                if self.wants(x) {
                    out.push((x, g.iter().enumerate().map(|(i, &gv)| gv * wv[i / plane]).collect()));
                }
                if self.wants(w) {
                    let d = g
                        .chunks(plane)
                        .zip(xv.chunks(plane))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    out.push((w, d));
                }
            }
            Op::ScalePixels { x, a } => {
                let [b, c, h, w] = dims4("scale_pixels", self.shape(x))?;
                let plane = h * w;
                let (xv, av) = (self.value(x).data(), self.value(a).data());
                if self.wants(x) {
                    let d = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * av[(i / (c * plane)) * plane + i % plane])
                        .collect();
                    out.push((x, d));
                }
                if self.wants(a) {
                    let mut d = vec![T::zero(); b * plane];
                    for bi in 0..b {
                        let dst = &mut d[bi * plane..(bi + 1) * plane];
                        for ci in 0..c {
                            let off = (bi * c + ci) * plane;
                            for ((dv, &gv), &x_) in dst.iter_mut().zip(&g[off..off + plane]).zip(&xv[off..off + plane]) {
                                *dv += gv * x_;
                            }
                        }
                    }
                    out.push((a, d));
                }
            }
            Op::MulScalar { input, c } => {
                let cv = T::from_f64(c);
                out.push((input, g.iter().map(|&gv| gv * cv).collect()));
            }
            Op::BatchedMatmul { a, b } => {
                let [bs, m, k] = dims3("batched_matmul", self.shape(a))?;
                let n = self.shape(b)[2];
                let (av, bv) = (self.value(a).data(), self.value(b).data());
                if self.wants(a) {
                    // dA = G · Bᵀ
                    let mut d = vec![T::zero(); bs * m * k];
                    for i in 0..bs {
                        T::gemm(m, n, k, T::one(), &g[i * m * n..], n, 1, &bv[i * k * n..], 1, n, T::zero(), &mut d[i * m * k..], k, 1);
                    }
                    out.push((a, d));
                }
                if self.wants(b) {
                    // dB = Aᵀ · G
                    let mut d = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        T::gemm(k, m, n, T::one(), &av[i * m * k..], 1, k, &g[i * m * n..], n, 1, T::zero(), &mut d[i * k * n..], n, 1);
                    }
                    out.push((b, d));
                }
            }
            Op::TransposeLast2 { input } => {
                let [b, m, n] = dims3("transpose_last2", self.shape(input))?;
                out.push((input, transpose_batches(g, b, n, m)));
            }
            Op::Reshape { input } => out.push((input, g.to_vec())),
            Op::ConcatChannels { ref inputs } => {
                let [b, total, h, w] = dims4("concat_channels", node.value.shape())?;
                let plane = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let ci = self.shape(v)[1];
                    if self.wants(v) {
                        let mut d = Vec::with_capacity(b * ci * plane);
                        for bi in 0..b {
                            d.extend_from_slice(&g[(bi * total + offset) * plane..(bi * total + offset + ci) * plane]);
                        }
                        out.push((v, d));
                    }
                    offset += ci;
                }
            }
            Op::SliceChannels { input, start } => {
                let [b, c, h, w] = dims4("slice_channels", self.shape(input))?;
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut d = vec![T::zero(); b * c * plane];
                for bi in 0..b {
                    d[(bi * c + start) * plane..(bi * c + start + len) * plane]
                        .copy_from_slice(&g[bi * len * plane..(bi + 1) * len * plane]);
                }
                out.push((input, d));
            }
            Op::Sum { input } => out.push((input, vec![g[0]; self.value(input).numel()])),
            Op::Mean { input } => {
                let n = self.value(input).numel();
                out.push((input, vec![g[0] / T::from_f64(n as f64); n]));
            }
            Op::RowNormalize { input, eps } => {
                let n = *self.shape(input).last().unwrap_or(&1);
                let e = T::from_f64(eps);
                let x = self.value(input).data();
                let p = node.value.data();
                let mut d = vec![T::zero(); x.len()];
                for ((dr, xr), (pr, gr)) in d
                    .chunks_mut(n)
                    .zip(x.chunks(n))
                    .zip(p.chunks(n).zip(g.chunks(n)))
                {
                    let s: T = xr.iter().map(|&v| v + e).sum();
                    let dot: T = pr.iter().zip(gr).map(|(&pv, &gv)| pv * gv).sum();
                    for (dv, &gv) in dr.iter_mut().zip(gr) {
                        *dv = (gv - dot) / s;
                    }
                }
                out.push((input, d));
            }
        }
        out.retain(|(v, _)| self.wants(*v));
        Ok(out)
    }
}

fn transpose_batches<T: Element>(x: &[T], b: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); b * m * n];
    for bi in 0..b {
        let src = &x[bi * m * n..(bi + 1) * m * n];
        let dst = &mut out[bi * m * n..(bi + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                dst[j * m + i] = src[i * n + j];
            }
        }
    }
    out
}

/// Window size `k` for a pooling factor `1/k`.
pub fn pool_window(factor: f64) -> Result<usize> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(TensorError::config(
            "avg_pool2d",
            format!("factor {factor} must lie in (0, 1]"),
        ));
    }
    let k = (1.0 / factor).round();
    if (1.0 / k - factor).abs() > 1e-9 {
        return Err(TensorError::config(
            "avg_pool2d",
            format!("factor {factor} is not of the form 1/k"),
        ));
    }
    Ok(k as usize)
}
