use super::{
    conv2d_backward, conv2d_forward, grid_sample_backward, grid_sample_forward, upsample2x_backward,
    upsample2x_forward, ParamId, ParamStore, Real, Tensor,
};
use crate::error::{contract_err, dim_err, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// `exp(x)` with the input clamped to [`EXP_INPUT_MAX`] so outputs stay finite.
    Exponential,
}

pub const EXP_INPUT_MAX: f64 = 30.0;

/// A differentiable operation defined outside this module.
///
/// `backward` returns one entry per input; entries for inputs whose
/// `needs_grad` flag is false may be `None`.
pub trait CustomOp<T: Real> {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>>;
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_output: &[T],
        needs_grad: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

enum Op<T: Real> {
    Leaf,
    Binary(BinaryKind, Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Var,
    },
    Upsample2x(Var),
    Activation(Activation, Var),
    GridSample {
        plane: Var,
        coords: Tensor<T>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    Custom {
        op: Box<dyn CustomOp<T> + 'static>,
        inputs: Vec<Var>,
    },
}

struct Node<T: Real> {
    value: Option<Tensor<T>>,
    param: Option<ParamId>,
    op: Op<T>,
    needs_grad: bool,
}

/// Tape of operations recorded during one forward pass.
///
/// Parameter leaves read directly from the borrowed [`ParamStore`], so large
/// feature planes are never copied onto the tape.
pub struct Graph<'p, T: Real> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new() -> Self {
        Self {
            params: None,
            nodes: Vec::new(),
        }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self {
            params: Some(params),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (node.param, &node.value) {
            (Some(id), _) => self.params.expect("param leaf without store").value(id),
            (None, Some(t)) => t,
            (None, None) => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            param: None,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, what: &str, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var> {
        value.ensure_finite(what)?;
        Ok(self.push(value, op, needs_grad))
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf that owns its value (not stored in a [`ParamStore`]).
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf bound to a stored parameter.
    pub fn param(&mut self, id: ParamId) -> Var {
        let store = self.params.expect("Graph::param requires Graph::with_params");
        let needs_grad = store.get(id).requires_grad;
        self.nodes.push(Node {
            value: None,
            param: Some(id),
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Elementwise `a (op) b`. `b` may have a shape equal to a trailing suffix
    /// of `a`'s shape, in which case it repeats along the leading dimensions.
    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(dim_err!("{kind:?}: cannot broadcast {sb:?} onto {sa:?}"));
        }
        let bn = bv.numel();
        let mut out = av.data().to_vec();
        if bn > 0 {
            for chunk in out.chunks_mut(bn) {
                let it = chunk.iter_mut().zip(bv.data());
                match kind {
                    BinaryKind::Add => it.for_each(|(x, &y)| *x += y),
                    BinaryKind::Sub => it.for_each(|(x, &y)| *x -= y),
                    BinaryKind::Mul => it.for_each(|(x, &y)| *x *= y),
                }
            }
        }
        let value = Tensor::new(sa, out)?;
        let ng = self.needs(&[a, b]);
        self.push_checked("elementwise", value, Op::Binary(kind, a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| x * factor).collect();
        let value = Tensor::new(av.shape(), data)?;
        let ng = self.needs(&[a]);
        self.push_checked("scale", value, Op::Scale(a, factor), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = match (av.shape(), bv.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => return Err(dim_err!("matmul: incompatible shapes {sa:?} and {sb:?}")),
        };
        let mut out = vec![T::zero(); m * n];
        matmul_kernel(av.data(), bv.data(), &mut out, m, k, n);
        let value = Tensor::new(&[m, n], out)?;
        let ng = self.needs(&[a, b]);
        self.push_checked("matmul", value, Op::MatMul(a, b), ng)
    }

    /// "Same" 2-D cross-correlation: input `[C_in, H, W]`, kernel
    /// `[C_out, C_in, k, k]` with odd `k`, bias `[C_out]`; padding `(k-1)/2`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, padding: usize) -> Result<Var> {
        let (iv, kv, bv) = (self.value(input), self.value(kernel), self.value(bias));
        let (cin, h, w) = match iv.shape() {
            [c, h, w] => (*c, *h, *w),
            s => return Err(dim_err!("conv2d: input must be [C,H,W], got {s:?}")),
        };
        let (cout, kcin, k) = match kv.shape() {
            [co, ci, kh, kw] if kh == kw => (*co, *ci, *kh),
            s => return Err(dim_err!("conv2d: kernel must be [C_out,C_in,k,k], got {s:?}")),
        };
        if kcin != cin {
            return Err(dim_err!("conv2d: input has {cin} channels, kernel expects {kcin}"));
        }
        if bv.shape() != [cout] {
            return Err(dim_err!("conv2d: bias shape {:?}, expected [{cout}]", bv.shape()));
        }
        if k % 2 == 0 || padding != (k - 1) / 2 {
            return Err(contract_err!(
                "conv2d: kernel size {k} with padding {padding} is not a same-size convolution"
            ));
        }
        let out = conv2d_forward(iv.data(), cin, h, w, kv.data(), cout, k, bv.data());
        let value = Tensor::new(&[cout, h, w], out)?;
        let ng = self.needs(&[input, kernel, bias]);
        self.push_checked("conv2d", value, Op::Conv2d { input, kernel, bias }, ng)
    }

    /// Bilinear 2x upsampling of `[C, H, W]` with half-pixel sample centers.
    pub fn upsample2x(&mut self, input: Var) -> Result<Var> {
        let iv = self.value(input);
        let (c, h, w) = match iv.shape() {
            [c, h, w] if *h > 0 && *w > 0 => (*c, *h, *w),
            s => return Err(dim_err!("upsample2x: input must be non-empty [C,H,W], got {s:?}")),
        };
        let out = upsample2x_forward(iv.data(), c, h, w);
        let value = Tensor::new(&[c, 2 * h, 2 * w], out)?;
        let ng = self.needs(&[input]);
        self.push_checked("upsample2x", value, Op::Upsample2x(input), ng)
    }

    pub fn activation(&mut self, kind: Activation, input: Var) -> Result<Var> {
        let iv = self.value(input);
        let data: Vec<T> = match kind {
            Activation::Relu => iv.data().iter().map(|&x| x.max(T::zero())).collect(),
            Activation::Sigmoid => iv.data().iter().map(|&x| sigmoid(x)).collect(),
            Activation::Exponential => {
                let cap = T::of(EXP_INPUT_MAX);
                iv.data().iter().map(|&x| x.min(cap).exp()).collect()
            }
        };
        let value = Tensor::new(iv.shape(), data)?;
        let ng = self.needs(&[input]);
        self.push_checked("activation", value, Op::Activation(kind, input), ng)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Exponential, x)
    }

    /// Bilinear lookup into `plane` (`[D, R_a, R_b]`) at normalized `coords`
    /// (`[N, 2]`, column 0 along `R_a`, column 1 along `R_b`). Grid nodes sit
    /// at `i / (R - 1)`; coordinates outside `[0, 1]` are clamped. Gradients
    /// flow to the plane only.
    pub fn grid_sample(&mut self, plane: Var, coords: Tensor<T>) -> Result<Var> {
        let pv = self.value(plane);
        let (d, ra, rb) = match pv.shape() {
            [d, ra, rb] => (*d, *ra, *rb),
            s => return Err(dim_err!("grid_sample: plane must be [D,Ra,Rb], got {s:?}")),
        };
        let n = match coords.shape() {
            [n, 2] => *n,
            s => return Err(dim_err!("grid_sample: coords must be [N,2], got {s:?}")),
        };
        let out = grid_sample_forward(pv.data(), d, ra, rb, coords.data());
        let value = Tensor::new(&[n, d], out)?;
        let ng = self.needs(&[plane]);
        self.push_checked("grid_sample", value, Op::GridSample { plane, coords }, ng)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| contract_err!("concat of an empty list"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(dim_err!("concat: axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err!(
                    "concat: shape {s:?} incompatible with {base:?} on axis {axis}"
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let len = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        let ng = self.needs(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            ng,
        ))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let iv = self.value(input);
        let shape = iv.shape();
        if shape.is_empty() || start > end || end > shape[0] {
            return Err(dim_err!("slice_rows: {start}..{end} out of range for {shape:?}"));
        }
        let row: usize = shape[1..].iter().product();
        let data = iv.data()[start * row..end * row].to_vec();
        let mut s = shape.to_vec();
        s[0] = end - start;
        let value = Tensor::new(&s, data)?;
        let ng = self.needs(&[input]);
        Ok(self.push(value, Op::SliceRows { input, start }, ng))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(input).clone().reshaped(shape)?;
        let ng = self.needs(&[input]);
        Ok(self.push(value, Op::Reshape(input), ng))
    }

    /// Transpose of a 2-D tensor.
    pub fn transpose(&mut self, input: Var) -> Result<Var> {
        let iv = self.value(input);
        let (r, c) = match iv.shape() {
            [r, c] => (*r, *c),
            s => return Err(dim_err!("transpose: expected 2-D, got {s:?}")),
        };
        let src = iv.data();
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let value = Tensor::new(&[c, r], out)?;
        let ng = self.needs(&[input]);
        Ok(self.push(value, Op::Transpose(input), ng))
    }

    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let s: T = self.value(input).data().iter().copied().sum();
        let ng = self.needs(&[input]);
        self.push_checked("sum", Tensor::scalar(s), Op::Sum(input), ng)
    }

    pub fn mean(&mut self, input: Var) -> Result<Var> {
        let iv = self.value(input);
        if iv.numel() == 0 {
            return Err(contract_err!("mean of an empty tensor"));
        }
        let s: T = iv.data().iter().copied().sum::<T>() / T::of(iv.numel() as f64);
        let ng = self.needs(&[input]);
        self.push_checked("mean", Tensor::scalar(s), Op::Mean(input), ng)
    }

    /// Mean squared difference between `pred` and a constant target.
    pub fn mse(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(dim_err!(
                "mse: prediction {:?} vs target {:?}",
                self.shape(pred),
                target.shape()
            ));
        }
        let t = self.constant(target.clone());
        let diff = self.sub(pred, t)?;
        let sq = self.mul(diff, diff)?;
        self.mean(sq)
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp<T> + 'static>, inputs: &[Var]) -> Result<Var> {
        let value = {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
            op.forward(&ins)?
        };
        value.ensure_finite(op.name())?;
        let ng = self.needs(inputs);
        Ok(self.push(
            value,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            ng,
        ))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(contract_err!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            ));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(crate::error::Error::NonFinite(format!("gradient of node {i}")));
                }
            }
        }
        let params = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.param.map(|id| (id, i)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let bn = bv.numel();
                if needs(*a) {
                    let ga: Vec<T> = match kind {
                        BinaryKind::Add | BinaryKind::Sub => g.to_vec(),
                        BinaryKind::Mul => g.iter().enumerate().map(|(i, &gi)| gi * bv.data()[i % bn]).collect(),
                    };
                    accumulate(grads, *a, ga);
                }
                if needs(*b) {
                    let mut gb = vec![T::zero(); bn];
                    for (i, &gi) in g.iter().enumerate() {
                        let j = i % bn;
                        gb[j] += match kind {
                            BinaryKind::Add => gi,
                            BinaryKind::Sub => -gi,
                            BinaryKind::Mul => gi * av.data()[i],
                        };
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, f) => {
                if needs(*a) {
                    accumulate(grads, *a, g.iter().map(|&x| x * *f).collect());
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if needs(*a) {
                    // dA = G · Bᵀ
                    let mut ga = vec![T::zero(); m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let brow = &bv.data()[kk * n..(kk + 1) * n];
                            ga[i * k + kk] = dot(grow, brow);
                        }
                    }
                    accumulate(grads, *a, ga);
                }
                if needs(*b) {
                    // dB = Aᵀ · G
                    let mut gb = vec![T::zero(); k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for kk in 0..k {
                            let s = av.data()[i * k + kk];
                            if s != T::zero() {
                                axpy(s, grow, &mut gb[kk * n..(kk + 1) * n]);
                            }
                        }
                    }
                    accumulate(grads, *b, gb);
                }
            }
            Op::Conv2d { input, kernel, bias } => {
                let (iv, kv) = (self.value(*input), self.value(*kernel));
                let [cin, h, w] = iv.shape() else { unreachable!() };
                let [cout, _, k, _] = kv.shape() else { unreachable!() };
                let (gi, gk, gb) = conv2d_backward(
                    iv.data(),
                    *cin,
                    *h,
                    *w,
                    kv.data(),
                    *cout,
                    *k,
                    g,
                    needs(*input),
                    needs(*kernel),
                    needs(*bias),
                );
                if let Some(gi) = gi {
                    accumulate(grads, *input, gi);
                }
                if let Some(gk) = gk {
                    accumulate(grads, *kernel, gk);
                }
                if let Some(gb) = gb {
                    accumulate(grads, *bias, gb);
                }
            }
            Op::Upsample2x(input) => {
                if needs(*input) {
                    let [c, h, w] = self.value(*input).shape() else {
                        unreachable!()
                    };
                    accumulate(grads, *input, upsample2x_backward(g, *c, *h, *w));
                }
            }
            Op::Activation(kind, input) => {
                if needs(*input) {
                    let x = self.value(*input).data();
                    let y = node.value.as_ref().expect("op value").data();
                    let gi: Vec<T> = match kind {
                        Activation::Relu => g
                            .iter()
                            .zip(x)
                            .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                            .collect(),
                        Activation::Sigmoid => g.iter().zip(y).map(|(&gi, &yi)| gi * yi * (T::one() - yi)).collect(),
                        Activation::Exponential => {
                            let cap = T::of(EXP_INPUT_MAX);
                            g.iter()
                                .zip(y.iter().zip(x))
                                .map(|(&gi, (&yi, &xi))| if xi > cap { T::zero() } else { gi * yi })
                                .collect()
                        }
                    };
                    accumulate(grads, *input, gi);
                }
            }
            Op::GridSample { plane, coords } => {
                if needs(*plane) {
                    let [d, ra, rb] = self.value(*plane).shape() else {
                        unreachable!()
                    };
                    let gp = grid_sample_backward(g, *d, *ra, *rb, coords.data());
                    accumulate(grads, *plane, gp);
                }
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.as_ref().expect("op value").shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis] * inner;
                    if needs(*v) {
                        let mut gv = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let start = o * total * inner + offset;
                            gv.extend_from_slice(&g[start..start + len]);
                        }
                        accumulate(grads, *v, gv);
                    }
                    offset += len;
                }
            }
            Op::SliceRows { input, start } => {
                if needs(*input) {
                    let iv = self.value(*input);
                    let row: usize = iv.shape()[1..].iter().product();
                    let mut gi = vec![T::zero(); iv.numel()];
                    gi[start * row..start * row + g.len()].copy_from_slice(g);
                    accumulate(grads, *input, gi);
                }
            }
            Op::Reshape(input) => {
                if needs(*input) {
                    accumulate(grads, *input, g.to_vec());
                }
            }
            Op::Transpose(input) => {
                if needs(*input) {
                    let [r, c] = self.value(*input).shape() else {
                        unreachable!()
                    };
                    let (r, c) = (*r, *c);
                    let mut gi = vec![T::zero(); r * c];
                    for i in 0..r {
                        for j in 0..c {
                            gi[i * c + j] = g[j * r + i];
                        }
                    }
                    accumulate(grads, *input, gi);
                }
            }
            Op::Sum(input) => {
                if needs(*input) {
                    accumulate(grads, *input, vec![g[0]; self.value(*input).numel()]);
                }
            }
            Op::Mean(input) => {
                if needs(*input) {
                    let n = self.value(*input).numel();
                    accumulate(grads, *input, vec![g[0] / T::of(n as f64); n]);
                }
            }
            Op::Custom { op, inputs } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let flags: Vec<bool> = inputs.iter().map(|v| needs(*v)).collect();
                let out = node.value.as_ref().expect("op value");
                let gs = op.backward(&ins, out, g, &flags);
                for ((v, gv), flag) in inputs.iter().zip(gs).zip(flags) {
                    if let (Some(gv), true) = (gv, flag) {
                        accumulate(grads, *v, gv);
                    }
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, usize)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Per-parameter-leaf gradients, in tape order. A parameter bound to the
    /// graph more than once appears once per binding.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params
            .iter()
            .filter_map(|&(id, i)| self.grads[i].as_deref().map(|g| (id, g)))
    }
}

#[inline]
pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    // Keep the open interval even where the float rounds to an endpoint.
    y.max(T::min_positive_value()).min(T::one() - T::epsilon())
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    y.iter_mut().zip(x).for_each(|(yi, &xi)| *yi += alpha * xi);
}

fn matmul_kernel<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    if n == 0 {
        return;
    }
    let row = |i: usize, orow: &mut [T]| {
        for kk in 0..k {
            let s = a[i * k + kk];
            if s != T::zero() {
                axpy(s, &b[kk * n..(kk + 1) * n], orow);
            }
        }
    };
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if m * k * n > 1 << 16 {
            out.par_chunks_mut(n).enumerate().for_each(|(i, orow)| row(i, orow));
            return;
        }
    }
    let _ = m;
    for (i, orow) in out.chunks_mut(n).enumerate() {
        row(i, orow);
    }
}
