//! Recording tape and the adjoint rule of every primitive.

use crate::conv::{conv3d_backward, conv3d_forward, ConvGeom};
use crate::error::{Result, TensorError};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identifies one dropout application: the mask is a pure function of
/// `(seed, op_id, step)` and the element index.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub op_id: u64,
    pub step: u64,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Silu(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ChannelAdd {
        x: Var,
        b: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    Upsample2x(Var),
    Downsample2x(Var),
    ConcatChannels(Var, Var),
    Reshape(Var),
    MatMul(Var, Var),
    TransposeLast2(Var),
    Softmax(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Record of executed primitives. Nodes are appended in execution order, so
/// the node list is itself a valid topological order.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn axis_mismatch(op: &'static str, axis: usize, expected: usize, found: usize) -> TensorError {
    TensorError::AxisMismatch {
        op,
        axis,
        expected,
        found,
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient will be populated by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the loss passed to [`Tape::backward`] with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        op: Op,
        op_name: &'static str,
        inputs: &[Var],
    ) -> Result<Var> {
        if cfg!(debug_assertions)
            && inputs.iter().all(|v| self.nodes[v.0].value.is_finite())
            && !value.is_finite()
        {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, a: Var, op: Op, name: &'static str, f: impl Fn(T) -> T) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(value, op, name, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.push(value, Op::Add(a, b), "add", &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        self.push(value, Op::Sub(a, b), "sub", &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), "mul", |x, y| x * y)?;
        self.push(value, Op::Mul(a, b), "mul", &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let f = T::of(factor);
        let value = self.value(a).map(|x| x * f);
        self.push(value, Op::Scale(a, factor), "scale", &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Relu(a), "relu", |x| {
            if x > T::zero() {
                x
            } else {
                T::zero()
            }
        })
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Silu(a), "silu", |x| x / (T::one() + (-x).exp()))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Abs(a), "abs", |x| x.abs())
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(a, Op::Square(a), "square", |x| x * x)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum_f64();
        self.push(Tensor::scalar(T::of(s)), Op::Sum(a), "sum", &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).mean_f64();
        self.push(Tensor::scalar(T::of(m)), Op::Mean(a), "mean", &[a])
    }

    /// Cross-correlation of `x: [N,Cin,D,H,W]` with `w: [Cout,Cin,k,k,k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, stride: usize, padding: usize) -> Result<Var> {
        self.conv3d_bias(x, w, None, stride, padding)
    }

    pub fn conv3d_bias(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.value(x), self.value(w), stride, padding)?;
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [geom.cout] {
                return Err(TensorError::Shape {
                    op: "conv3d bias",
                    left: vec![geom.cout],
                    right: bs.to_vec(),
                });
            }
        }
        let value = conv3d_forward(
            &geom,
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
        );
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Conv3d { x, w, b, geom }, "conv3d", &inputs)
    }

    /// Adds `b` (shape `[C]` or `[N, C]`) to every voxel of channel `c` of
    /// `x: [N, C, ...]`.
    pub fn channel_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(b).to_vec();
        if xs.len() < 2 {
            return Err(TensorError::Rank {
                op: "channel_add",
                expected: 2,
                found: xs,
            });
        }
        let per_sample = match bs.as_slice() {
            [c] if *c == xs[1] => false,
            [n, c] if *n == xs[0] && *c == xs[1] => true,
            _ => {
                return Err(TensorError::Shape {
                    op: "channel_add",
                    left: xs,
                    right: bs,
                })
            }
        };
        let inner: usize = xs[2..].iter().product();
        let (n, c) = (xs[0], xs[1]);
        let bv = self.value(b).data();
        let mut out = self.value(x).data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let add = if per_sample { bv[ni * c + ci] } else { bv[ci] };
                let base = (ni * c + ci) * inner;
                out[base..base + inner]
                    .iter_mut()
                    .for_each(|v| *v = *v + add);
            }
        }
        let value = Tensor::from_vec(xs, out)?;
        self.push(value, Op::ChannelAdd { x, b }, "channel_add", &[x, b])
    }

    /// `x: [N, in]`, `w: [out, in]`, `b: [out]` → `x·wᵀ + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.value(x).expect_rank(2, "linear input")?;
        self.value(w).expect_rank(2, "linear weight")?;
        let (n, fin) = (self.shape(x)[0], self.shape(x)[1]);
        let (fout, win) = (self.shape(w)[0], self.shape(w)[1]);
        if fin != win {
            return Err(axis_mismatch("linear", 1, win, fin));
        }
        let mut out = vec![T::zero(); n * fout];
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(TensorError::Shape {
                    op: "linear bias",
                    left: vec![fout],
                    right: self.shape(b).to_vec(),
                });
            }
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(
            n,
            fin,
            fout,
            T::one(),
            self.value(x).data(),
            (fin as isize, 1),
            self.value(w).data(),
            (1, fin as isize),
            if b.is_some() { T::one() } else { T::zero() },
            &mut out,
            (fout as isize, 1),
        );
        let value = Tensor::from_vec(vec![n, fout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(value, Op::Linear { x, w, b }, "linear", &inputs)
    }

    /// Group normalization over `x: [N, C, ...]` with per-channel affine
    /// `gamma, beta: [C]`. Statistics use the population variance.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() < 2 {
            return Err(TensorError::Rank {
                op: "group_norm",
                expected: 2,
                found: xs,
            });
        }
        let (n, c) = (xs[0], xs[1]);
        if groups == 0 || c % groups != 0 {
            return Err(TensorError::Config(format!(
                "group_norm: {c} channels not divisible into {groups} groups"
            )));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(TensorError::Shape {
                    op: "group_norm affine",
                    left: vec![c],
                    right: self.shape(p).to_vec(),
                });
            }
        }
        let inner: usize = xs[2..].iter().product();
        let group_len = (c / groups) * inner;
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut mean = Vec::with_capacity(n * groups);
        let mut rstd = Vec::with_capacity(n * groups);
        let mut out = vec![T::zero(); xv.len()];
        for (gi, chunk) in xv.chunks(group_len).enumerate() {
            let m = chunk.iter().map(|v| v.f64()).sum::<f64>() / group_len as f64;
            let var = chunk.iter().map(|v| (v.f64() - m).powi(2)).sum::<f64>() / group_len as f64;
            let r = 1.0 / (var + eps).sqrt();
            mean.push(m);
            rstd.push(r);
            let g = gi % groups;
            for (j, &v) in chunk.iter().enumerate() {
                let ch = g * (c / groups) + j / inner;
                let xhat = (v.f64() - m) * r;
                out[gi * group_len + j] = T::of(xhat * gv[ch].f64() + bv[ch].f64());
            }
        }
        let value = Tensor::from_vec(xs, out)?;
        self.push(
            value,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            },
            "group_norm",
            &[x, gamma, beta],
        )
    }

    /// Inverted dropout: survivors are scaled by `1/(1-p)` in training mode;
    /// identity otherwise.
    pub fn dropout(&mut self, x: Var, p: f64, key: DropoutKey, training: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Config(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let stream = rng::mix(&[key.seed, key.op_id, key.step]);
        let keep = 1.0 / (1.0 - p);
        let scale: Vec<f64> = (0..self.value(x).len() as u64)
            .map(|i| {
                if rng::uniform(stream, i) < p {
                    0.0
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let out: Vec<T> = xv
            .data()
            .iter()
            .zip(&scale)
            .map(|(&v, &s)| v * T::of(s))
            .collect();
        let value = Tensor::from_vec(xv.shape().to_vec(), out)?;
        self.push(value, Op::Dropout { x, scale }, "dropout", &[x])
    }

    /// Nearest-neighbour ×2 upsampling of the three trailing axes of a 5D tensor.
    pub fn nearest_upsample2x(&mut self, x: Var) -> Result<Var> {
        self.value(x).expect_rank(5, "nearest_upsample2x")?;
        let s = self.shape(x).to_vec();
        let (d, h, w) = (s[2], s[3], s[4]);
        let out_shape = vec![s[0], s[1], 2 * d, 2 * h, 2 * w];
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(xv.len() * 8);
        for plane in xv.chunks(d * h * w) {
            for z in 0..2 * d {
                for y in 0..2 * h {
                    let row = &plane[((z / 2) * h + y / 2) * w..][..w];
                    for &v in row {
                        out.push(v);
                        out.push(v);
                    }
                }
            }
        }
        let value = Tensor::from_vec(out_shape, out)?;
        self.push(value, Op::Upsample2x(x), "nearest_upsample2x", &[x])
    }

    /// Keeps every second voxel along the three trailing axes of a 5D tensor.
    pub fn strided_downsample2x(&mut self, x: Var) -> Result<Var> {
        self.value(x).expect_rank(5, "strided_downsample2x")?;
        let s = self.shape(x).to_vec();
        let (d, h, w) = (s[2], s[3], s[4]);
        let (od, oh, ow) = (d.div_ceil(2), h.div_ceil(2), w.div_ceil(2));
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * od * oh * ow);
        for plane in xv.chunks(d * h * w) {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        out.push(plane[((2 * z) * h + 2 * y) * w + 2 * xx]);
                    }
                }
            }
        }
        let value = Tensor::from_vec(vec![s[0], s[1], od, oh, ow], out)?;
        self.push(value, Op::Downsample2x(x), "strided_downsample2x", &[x])
    }

    /// Concatenates `[N, Ca, ...]` and `[N, Cb, ...]` along axis 1.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sa.len() != sb.len() {
            return Err(TensorError::Shape {
                op: "concat_channels",
                left: sa,
                right: sb,
            });
        }
        for axis in (0..sa.len()).filter(|&ax| ax != 1) {
            if sa[axis] != sb[axis] {
                return Err(axis_mismatch("concat_channels", axis, sa[axis], sb[axis]));
            }
        }
        let inner: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1], sb[1]);
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = Vec::with_capacity(av.len() + bv.len());
        for n in 0..sa[0] {
            out.extend_from_slice(&av[n * ca * inner..(n + 1) * ca * inner]);
            out.extend_from_slice(&bv[n * cb * inner..(n + 1) * cb * inner]);
        }
        let mut shape = sa;
        shape[1] = ca + cb;
        let value = Tensor::from_vec(shape, out)?;
        self.push(value, Op::ConcatChannels(a, b), "concat_channels", &[a, b])
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        self.push(value, Op::Reshape(x), "reshape", &[x])
    }

    /// Batched product `[B, M, K] · [B, K, N] → [B, M, N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).expect_rank(3, "matmul lhs")?;
        self.value(b).expect_rank(3, "matmul rhs")?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa[0] != sb[0] {
            return Err(axis_mismatch("matmul", 0, sa[0], sb[0]));
        }
        if sa[2] != sb[1] {
            return Err(axis_mismatch("matmul", 1, sa[2], sb[1]));
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[i * m * k..(i + 1) * m * k],
                (k as isize, 1),
                &bv[i * k * n..(i + 1) * k * n],
                (n as isize, 1),
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n as isize, 1),
            );
        }
        let value = Tensor::from_vec(vec![batch, m, n], out)?;
        self.push(value, Op::MatMul(a, b), "matmul", &[a, b])
    }

    /// `[B, M, N] → [B, N, M]`.
    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        self.value(x).expect_rank(3, "transpose_last2")?;
        let s = self.shape(x).to_vec();
        let value = Tensor::from_vec(
            vec![s[0], s[2], s[1]],
            transpose3(self.value(x).data(), s[0], s[1], s[2]),
        )?;
        self.push(value, Op::TransposeLast2(x), "transpose_last2", &[x])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let last = *s.last().ok_or(TensorError::Rank {
            op: "softmax",
            expected: 1,
            found: vec![],
        })?;
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.value(x).data().chunks(last) {
            let max = row
                .iter()
                .map(|v| v.f64())
                .fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|v| (v.f64() - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|e| T::of(e / total)));
        }
        let value = Tensor::from_vec(s, out)?;
        self.push(value, Op::Softmax(x), "softmax", &[x])
    }

    /// Populates gradients of the scalar `loss` on every node that depends on
    /// a [`Tape::param`]. A tape supports a single backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(TensorError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            let shape = self.nodes[id].value.shape().to_vec();
            self.nodes[id].grad =
                Some(Tensor::from_vec(shape, g).expect("gradient matches value shape"));
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let val = |v: Var| self.nodes[v.0].value.data();
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing
                    .iter_mut()
                    .zip(contrib)
                    .for_each(|(e, c)| *e = *e + c),
                slot @ None => *slot = Some(contrib),
            }
        };
        let zip = |a: &[T], f: &dyn Fn(T, T) -> T| -> Vec<T> {
            a.iter().zip(g).map(|(&x, &gi)| f(x, gi)).collect()
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, g.to_vec());
                acc(*b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, zip(val(*b), &|y, gi| y * gi));
                }
                if wants(*b) {
                    acc(*b, zip(val(*a), &|x, gi| x * gi));
                }
            }
            Op::Scale(a, f) => {
                let f = T::of(*f);
                acc(*a, g.iter().map(|&x| x * f).collect());
            }
            Op::Relu(a) => acc(
                *a,
                zip(val(*a), &|x, gi| if x > T::zero() { gi } else { T::zero() }),
            ),
            Op::Silu(a) => acc(
                *a,
                zip(val(*a), &|x, gi| {
                    let s = T::one() / (T::one() + (-x).exp());
                    gi * s * (T::one() + x * (T::one() - s))
                }),
            ),
            Op::Abs(a) => acc(
                *a,
                zip(val(*a), &|x, gi| {
                    if x > T::zero() {
                        gi
                    } else if x < T::zero() {
                        -gi
                    } else {
                        T::zero()
                    }
                }),
            ),
            Op::Square(a) => acc(*a, zip(val(*a), &|x, gi| T::of(2.0) * x * gi)),
            Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
            Op::Mean(a) => {
                let n = val(*a).len();
                acc(*a, vec![T::of(g[0].f64() / n as f64); n]);
            }
            Op::Conv3d { x, w, b, geom } => {
                let grads_ = conv3d_backward(
                    geom,
                    &self.nodes[x.0].value,
                    &self.nodes[w.0].value,
                    g,
                    (wants(*x), wants(*w), b.is_some_and(wants)),
                );
                if let Some(dx) = grads_.dx {
                    acc(*x, dx);
                }
                if let Some(dw) = grads_.dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, grads_.db) {
                    acc(*b, db);
                }
            }
            Op::ChannelAdd { x, b } => {
                acc(*x, g.to_vec());
                if wants(*b) {
                    let xs = self.nodes[x.0].value.shape();
                    let (n, c) = (xs[0], xs[1]);
                    let inner: usize = xs[2..].iter().product();
                    let per_sample = self.nodes[b.0].value.rank() == 2;
                    let mut db = vec![0.0f64; if per_sample { n * c } else { c }];
                    for (row, chunk) in g.chunks(inner).enumerate() {
                        let slot = if per_sample { row } else { row % c };
                        db[slot] += chunk.iter().map(|v| v.f64()).sum::<f64>();
                    }
                    acc(*b, db.into_iter().map(T::of).collect());
                }
            }
            Op::Linear { x, w, b } => {
                let (n, fin) = (
                    self.nodes[x.0].value.shape()[0],
                    self.nodes[x.0].value.shape()[1],
                );
                let fout = self.nodes[w.0].value.shape()[0];
                if wants(*x) {
                    let mut dx = vec![T::zero(); n * fin];
                    T::gemm(
                        n,
                        fout,
                        fin,
                        T::one(),
                        g,
                        (fout as isize, 1),
                        val(*w),
                        (fin as isize, 1),
                        T::zero(),
                        &mut dx,
                        (fin as isize, 1),
                    );
                    acc(*x, dx);
                }
                if wants(*w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    T::gemm(
                        fout,
                        n,
                        fin,
                        T::one(),
                        g,
                        (1, fout as isize),
                        val(*x),
                        (fin as isize, 1),
                        T::zero(),
                        &mut dw,
                        (fin as isize, 1),
                    );
                    acc(*w, dw);
                }
                if let Some(b) = b {
                    if wants(*b) {
                        let db = (0..fout)
                            .map(|o| T::of((0..n).map(|r| g[r * fout + o].f64()).sum::<f64>()))
                            .collect();
                        acc(*b, db);
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                mean,
                rstd,
            } => {
                let xs = self.nodes[x.0].value.shape();
                let c = xs[1];
                let inner: usize = xs[2..].iter().product();
                let per_group = c / groups;
                let group_len = per_group * inner;
                let xv = val(*x);
                let gv = val(*gamma);
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                let mut dx = vec![T::zero(); xv.len()];
                for gi in 0..mean.len() {
                    let (m, r) = (mean[gi], rstd[gi]);
                    let gidx = gi % groups;
                    let base = gi * group_len;
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..group_len {
                        let ch = gidx * per_group + j / inner;
                        let xhat = (xv[base + j].f64() - m) * r;
                        let gj = g[base + j].f64();
                        dgamma[ch] += gj * xhat;
                        dbeta[ch] += gj;
                        let dxhat = gj * gv[ch].f64();
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    let inv_n = 1.0 / group_len as f64;
                    for j in 0..group_len {
                        let ch = gidx * per_group + j / inner;
                        let xhat = (xv[base + j].f64() - m) * r;
                        let dxhat = g[base + j].f64() * gv[ch].f64();
                        dx[base + j] =
                            T::of(r * (dxhat - inv_n * sum_dxhat - xhat * inv_n * sum_dxhat_xhat));
                    }
                }
                acc(*x, dx);
                acc(*gamma, dgamma.into_iter().map(T::of).collect());
                acc(*beta, dbeta.into_iter().map(T::of).collect());
            }
            Op::Dropout { x, scale } => acc(
                *x,
                g.iter().zip(scale).map(|(&gi, &s)| gi * T::of(s)).collect(),
            ),
            Op::Upsample2x(x) => {
                let s = self.nodes[x.0].value.shape();
                let (d, h, w) = (s[2], s[3], s[4]);
                let mut dx = vec![T::zero(); val(*x).len()];
                for (p, plane) in g.chunks(8 * d * h * w).enumerate() {
                    let out = &mut dx[p * d * h * w..(p + 1) * d * h * w];
                    for z in 0..2 * d {
                        for y in 0..2 * h {
                            for xx in 0..2 * w {
                                let i = ((z / 2) * h + y / 2) * w + xx / 2;
                                out[i] = out[i] + plane[(z * 2 * h + y) * 2 * w + xx];
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Downsample2x(x) => {
                let s = self.nodes[x.0].value.shape();
                let (d, h, w) = (s[2], s[3], s[4]);
                let (od, oh, ow) = (d.div_ceil(2), h.div_ceil(2), w.div_ceil(2));
                let mut dx = vec![T::zero(); val(*x).len()];
                for (p, plane) in g.chunks(od * oh * ow).enumerate() {
                    let out = &mut dx[p * d * h * w..(p + 1) * d * h * w];
                    for z in 0..od {
                        for y in 0..oh {
                            for xx in 0..ow {
                                out[((2 * z) * h + 2 * y) * w + 2 * xx] =
                                    plane[(z * oh + y) * ow + xx];
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let inner: usize = sa[2..].iter().product();
                let (la, lb) = (sa[1] * inner, sb[1] * inner);
                let mut da = Vec::with_capacity(val(*a).len());
                let mut db = Vec::with_capacity(val(*b).len());
                for chunk in g.chunks(la + lb) {
                    da.extend_from_slice(&chunk[..la]);
                    db.extend_from_slice(&chunk[la..]);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::MatMul(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let sb = self.nodes[b.0].value.shape();
                let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
                if wants(*a) {
                    let mut da = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &g[i * m * n..],
                            (n as isize, 1),
                            &val(*b)[i * k * n..],
                            (1, n as isize),
                            T::zero(),
                            &mut da[i * m * k..],
                            (k as isize, 1),
                        );
                    }
                    acc(*a, da);
                }
                if wants(*b) {
                    let mut db = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            &val(*a)[i * m * k..],
                            (1, k as isize),
                            &g[i * m * n..],
                            (n as isize, 1),
                            T::zero(),
                            &mut db[i * k * n..],
                            (n as isize, 1),
                        );
                    }
                    acc(*b, db);
                }
            }
            Op::TransposeLast2(x) => {
                let s = self.nodes[x.0].value.shape();
                acc(*x, transpose3(g, s[0], s[2], s[1]));
            }
            Op::Softmax(x) => {
                let last = *node.value.shape().last().unwrap();
                let y = node.value.data();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(last).zip(g.chunks(last)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.f64() * b.f64()).sum();
                    dx.extend(
                        yr.iter()
                            .zip(gr)
                            .map(|(yi, gi)| T::of(yi.f64() * (gi.f64() - dot))),
                    );
                }
                acc(*x, dx);
            }
        }
    }
}

fn transpose3<T: Scalar>(data: &[T], batch: usize, rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); data.len()];
    for b in 0..batch {
        let src = &data[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                dst[c * rows + r] = src[r * cols + c];
            }
        }
    }
    out
}
