use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op lines up with the left one.
#[derive(Clone, Debug)]
enum Broadcast {
    Same,
    Scalar,
    /// Same rank, singleton axes expanded; maps each output index to the
    /// right operand's index.
    Expand(Rc<[usize]>),
}

impl Broadcast {
    fn resolve(lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        if lhs == rhs {
            return Ok(Broadcast::Same);
        }
        if rhs.iter().product::<usize>() == 1 {
            return Ok(Broadcast::Scalar);
        }
        let expandable = lhs.len() == rhs.len()
            && lhs.iter().zip(rhs).all(|(&l, &r)| r == l || r == 1);
        if !expandable {
            return Err(Error::dim(format!("cannot broadcast {rhs:?} onto {lhs:?}")));
        }
        let numel: usize = lhs.iter().product();
        let mut strides = vec![0usize; rhs.len()];
        let mut acc = 1;
        for ax in (0..rhs.len()).rev() {
            strides[ax] = if rhs[ax] == 1 { 0 } else { acc };
            acc *= rhs[ax];
        }
        let mut map = Vec::with_capacity(numel);
        let mut coord = vec![0usize; lhs.len()];
        for _ in 0..numel {
            map.push(coord.iter().zip(&strides).map(|(c, s)| c * s).sum());
            for ax in (0..lhs.len()).rev() {
                coord[ax] += 1;
                if coord[ax] < lhs[ax] {
                    break;
                }
                coord[ax] = 0;
            }
        }
        Ok(Broadcast::Expand(map.into()))
    }

    #[inline]
    fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Expand(map) => map[i],
        }
    }
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Unary {
    Relu,
    Sigmoid,
    Abs,
    Exp,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Binary {
        kind: Binary,
        lhs: Var,
        rhs: Var,
        bcast: Broadcast,
    },
    Unary {
        kind: Unary,
        x: Var,
    },
    AddScalar {
        x: Var,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Reshape {
        x: Var,
    },
    /// out[i] = in[source[i]]
    Gather {
        x: Var,
        source: Vec<usize>,
    },
    SoftmaxRows {
        x: Var,
        cols: usize,
    },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        depthwise: bool,
    },
    GlobalAvgPool {
        x: Var,
        plane: usize,
    },
    Concat {
        xs: Vec<Var>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Ordered record of executed operations.
///
/// Every op's inputs are recorded before the op itself, so a single
/// reverse sweep over the node list is a valid backward traversal.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Number of recorded nodes, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A leaf that takes part in differentiation.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last [`backward`](Self::backward) target with respect
    /// to `v`; `None` if `v` does not require a gradient or was not reached.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            data: g.clone(),
        })
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, lhs: Var, rhs: Var) -> Result<Var> {
        let bcast = Broadcast::resolve(self.shape(lhs), self.shape(rhs))?;
        let a = self.value(lhs);
        let b = self.value(rhs).data();
        let data = a
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let y = b[bcast.index(i)];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let value = Tensor {
            shape: a.shape.clone(),
            data,
        };
        let rg = self.needs(lhs) || self.needs(rhs);
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                lhs,
                rhs,
                bcast,
            },
            rg,
        ))
    }

    /// `lhs + rhs`; `rhs` may be a scalar or have singleton axes.
    pub fn add(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(Binary::Add, lhs, rhs)
    }

    pub fn sub(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(Binary::Sub, lhs, rhs)
    }

    /// Elementwise product (⊗); `rhs` may be a scalar or have singleton axes.
    pub fn mul(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(Binary::Mul, lhs, rhs)
    }

    pub fn div(&mut self, lhs: Var, rhs: Var) -> Result<Var> {
        self.binary(Binary::Div, lhs, rhs)
    }

    fn unary(&mut self, kind: Unary, x: Var) -> Var {
        let value = self.value(x).map(|v| match kind {
            Unary::Relu => {
                if v > T::zero() {
                    v
                } else {
                    T::zero()
                }
            }
            Unary::Sigmoid => T::one() / (T::one() + (-v).exp()),
            Unary::Abs => v.abs(),
            Unary::Exp => v.exp(),
        });
        let rg = self.needs(x);
        self.push(value, Op::Unary { kind, x }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(Unary::Abs, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        let rg = self.needs(x);
        self.push(value, Op::AddScalar { x }, rg)
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.needs(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.mul(x, x).expect("same-shape product")
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::lit(t.numel() as f64);
        let rg = self.needs(x);
        self.push(Tensor::scalar(s), Op::Mean { x }, rg)
    }

    /// Per-channel spatial mean: `[C,H,W] -> [C,1,1]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 3 {
            return Err(Error::dim(format!(
                "global_avg_pool expects [C,H,W], got {:?}",
                t.shape()
            )));
        }
        let (c, plane) = (t.shape[0], t.shape[1] * t.shape[2]);
        let inv = T::one() / T::lit(plane as f64);
        let data = t
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor {
            shape: vec![c, 1, 1],
            data,
        };
        let rg = self.needs(x);
        Ok(self.push(value, Op::GlobalAvgPool { x, plane }, rg))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim(format!("matmul of {sa:?} by {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        let value = Tensor {
            shape: vec![m, n],
            data,
        };
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Row-wise softmax over the last axis of a matrix, computed with the
    /// row maximum subtracted.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::dim(format!("softmax_rows expects a matrix, got {:?}", t.shape())));
        }
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("softmax_rows input contains NaN".into()));
        }
        let cols = t.shape[1];
        let mut data = Vec::with_capacity(t.numel());
        for row in t.data().chunks_exact(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = data.len();
            data.extend(row.iter().map(|&v| (v - max).exp()));
            let z = data[start..].iter().copied().sum::<T>();
            data[start..].iter_mut().for_each(|v| *v /= z);
        }
        let value = Tensor {
            shape: t.shape.clone(),
            data,
        };
        let rg = self.needs(x);
        Ok(self.push(value, Op::SoftmaxRows { x, cols }, rg))
    }

    // ---- layout ------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.needs(x);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::dim(format!(
                "permutation {axes:?} is invalid for shape {:?}",
                t.shape()
            )));
        }
        let in_strides = strides(t.shape());
        let out_shape: Vec<usize> = axes.iter().map(|&a| t.shape[a]).collect();
        let numel = t.numel();
        let mut source = Vec::with_capacity(numel);
        let mut coord = vec![0usize; rank];
        for _ in 0..numel {
            source.push(coord.iter().zip(axes).map(|(&c, &a)| c * in_strides[a]).sum());
            for ax in (0..rank).rev() {
                coord[ax] += 1;
                if coord[ax] < out_shape[ax] {
                    break;
                }
                coord[ax] = 0;
            }
        }
        let data = source.iter().map(|&i| t.data[i]).collect();
        let value = Tensor {
            shape: out_shape,
            data,
        };
        let rg = self.needs(x);
        Ok(self.push(value, Op::Gather { x, source }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.permute(x, &[1, 0])
    }

    /// Stacks tensors along axis 0; trailing axes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs
            .first()
            .ok_or_else(|| Error::dim("concat of an empty list"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let t = self.value(x);
            if t.shape[1..] != tail[..] {
                return Err(Error::dim(format!(
                    "concat: trailing shape {:?} differs from {:?}",
                    &t.shape[1..],
                    tail
                )));
            }
            lead += t.shape[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = xs.iter().any(|&x| self.needs(x));
        Ok(self.push(Tensor { shape, data }, Op::Concat { xs: xs.to_vec() }, rg))
    }

    // ---- convolution -------------------------------------------------

    /// Zero-padded stride-1 cross-correlation.
    ///
    /// `input` is `[C_in,H,W]`, `weight` is `[C_out,C_in,k,k]`, `bias` is
    /// `[C_out]`. Output is `[C_out, H+2p-k+1, W+2p-k+1]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let geom = self.conv_geom(input, weight, bias, padding, false)?;
        let data = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor {
            shape: vec![geom.cout, geom.out_h(), geom.out_w()],
            data,
        };
        let rg = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                depthwise: false,
            },
            rg,
        ))
    }

    /// One filter per channel, no cross-channel mixing. `weight` is
    /// `[C,1,k,k]`.
    pub fn depthwise_conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        padding: usize,
    ) -> Result<Var> {
        let geom = self.conv_geom(input, weight, bias, padding, true)?;
        let data = kernels::depthwise_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geom,
        );
        let value = Tensor {
            shape: vec![geom.cout, geom.out_h(), geom.out_w()],
            data,
        };
        let rg = self.needs(input) || self.needs(weight) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                depthwise: true,
            },
            rg,
        ))
    }

    fn conv_geom(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        pad: usize,
        depthwise: bool,
    ) -> Result<ConvGeom> {
        let (si, sw) = (self.shape(input), self.shape(weight));
        if si.len() != 3 || sw.len() != 4 || sw[2] != sw[3] {
            return Err(Error::dim(format!(
                "convolution expects input [C,H,W] and square weight [O,I,k,k], got {si:?} and {sw:?}"
            )));
        }
        let (cin, h, w) = (si[0], si[1], si[2]);
        let (cout, k) = (sw[0], sw[2]);
        if depthwise {
            if sw[1] != 1 || cout != cin {
                return Err(Error::dim(format!(
                    "depthwise weight {sw:?} does not match {cin} input channels"
                )));
            }
        } else if sw[1] != cin {
            return Err(Error::dim(format!(
                "weight expects {} input channels but input has {cin}",
                sw[1]
            )));
        }
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::dim(format!(
                "kernel {k}x{k} larger than padded input {h}x{w} (padding {pad})"
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [cout] {
                return Err(Error::dim(format!(
                    "bias shape {:?} does not match {cout} output channels",
                    self.shape(b)
                )));
            }
        }
        Ok(ConvGeom {
            cin,
            cout,
            h,
            w,
            k,
            pad,
        })
    }

    // ---- backward ----------------------------------------------------

    /// Reverse sweep from a one-element `loss`. Gradients from earlier
    /// calls are discarded; fan-out contributions accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = vec![None; self.nodes.len()];
        if !self.needs(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![T::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = self.grads[id].take() else {
                continue;
            };
            self.propagate(id, &g);
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&mut self, id: usize, g: &[T]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                lhs,
                rhs,
                bcast,
            } => {
                let (lhs, rhs, kind, bcast) = (*lhs, *rhs, *kind, bcast.clone());
                let a = self.value(lhs).data();
                let b = self.value(rhs).data();
                let dl = self.needs(lhs).then(|| {
                    g.iter()
                        .enumerate()
                        .map(|(i, &gi)| match kind {
                            Binary::Add | Binary::Sub => gi,
                            Binary::Mul => gi * b[bcast.index(i)],
                            Binary::Div => gi / b[bcast.index(i)],
                        })
                        .collect::<Vec<_>>()
                });
                let dr = self.needs(rhs).then(|| {
                    let mut dr = vec![T::zero(); b.len()];
                    for (i, &gi) in g.iter().enumerate() {
                        let j = bcast.index(i);
                        dr[j] += match kind {
                            Binary::Add => gi,
                            Binary::Sub => -gi,
                            Binary::Mul => gi * a[i],
                            Binary::Div => -gi * a[i] / (b[j] * b[j]),
                        };
                    }
                    dr
                });
                if let Some(dl) = dl {
                    self.accumulate(lhs, dl);
                }
                if let Some(dr) = dr {
                    self.accumulate(rhs, dr);
                }
            }
            Op::Unary { kind, x } => {
                let (kind, x) = (*kind, *x);
                let input = self.value(x).data();
                let out = node.value.data();
                let dx = g
                    .iter()
                    .zip(input.iter().zip(out))
                    .map(|(&gi, (&xi, &yi))| match kind {
                        Unary::Relu => {
                            if xi > T::zero() {
                                gi
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Sigmoid => gi * yi * (T::one() - yi),
                        Unary::Abs => {
                            if xi > T::zero() {
                                gi
                            } else if xi < T::zero() {
                                -gi
                            } else {
                                T::zero()
                            }
                        }
                        Unary::Exp => gi * yi,
                    })
                    .collect();
                self.accumulate(x, dx);
            }
            Op::AddScalar { x } => {
                let x = *x;
                self.accumulate(x, g.to_vec());
            }
            Op::Scale { x, factor } => {
                let (x, f) = (*x, *factor);
                self.accumulate(x, g.iter().map(|&v| v * f).collect());
            }
            Op::Sum { x } => {
                let x = *x;
                let n = self.value(x).numel();
                self.accumulate(x, vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let x = *x;
                let n = self.value(x).numel();
                self.accumulate(x, vec![g[0] / T::lit(n as f64); n]);
            }
            Op::GlobalAvgPool { x, plane } => {
                let (x, plane) = (*x, *plane);
                let inv = T::one() / T::lit(plane as f64);
                let dx = g.iter().flat_map(|&gc| std::iter::repeat_n(gc * inv, plane)).collect();
                self.accumulate(x, dx);
            }
            Op::MatMul { a, b, m, k, n } => {
                let (a, b, m, k, n) = (*a, *b, *m, *k, *n);
                let da = self.needs(a).then(|| {
                    let mut da = vec![T::zero(); m * k];
                    kernels::matmul_grad_lhs(g, self.value(b).data(), &mut da, m, k, n);
                    da
                });
                let db = self.needs(b).then(|| {
                    let mut db = vec![T::zero(); k * n];
                    kernels::matmul_grad_rhs(self.value(a).data(), g, &mut db, m, k, n);
                    db
                });
                if let Some(da) = da {
                    self.accumulate(a, da);
                }
                if let Some(db) = db {
                    self.accumulate(b, db);
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                self.accumulate(x, g.to_vec());
            }
            Op::Gather { x, source } => {
                let x = *x;
                let mut dx = vec![T::zero(); self.value(x).numel()];
                for (&s, &gi) in source.iter().zip(g) {
                    dx[s] += gi;
                }
                self.accumulate(x, dx);
            }
            Op::SoftmaxRows { x, cols } => {
                let (x, cols) = (*x, *cols);
                let y = node.value.data();
                let mut dx = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                    let dot = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    dx.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
                }
                self.accumulate(x, dx);
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                depthwise,
            } => {
                let (input, weight, bias, geom, depthwise) = (*input, *weight, *bias, *geom, *depthwise);
                let mut din = self.needs(input).then(|| vec![T::zero(); self.value(input).numel()]);
                let mut dw = self.needs(weight).then(|| vec![T::zero(); self.value(weight).numel()]);
                let mut db = bias
                    .filter(|&b| self.needs(b))
                    .map(|_| vec![T::zero(); geom.cout]);
                let backward = if depthwise {
                    kernels::depthwise_backward
                } else {
                    kernels::conv2d_backward
                };
                backward(
                    self.value(input).data(),
                    self.value(weight).data(),
                    g,
                    &geom,
                    din.as_deref_mut(),
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                );
                if let Some(d) = din {
                    self.accumulate(input, d);
                }
                if let Some(d) = dw {
                    self.accumulate(weight, d);
                }
                if let (Some(b), Some(d)) = (bias, db) {
                    self.accumulate(b, d);
                }
            }
            Op::Concat { xs } => {
                let xs = xs.clone();
                let mut at = 0;
                for x in xs {
                    let n = self.value(x).numel();
                    self.accumulate(x, g[at..at + n].to_vec());
                    at += n;
                }
            }
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for ax in (0..shape.len().saturating_sub(1)).rev() {
        s[ax] = s[ax + 1] * shape[ax + 1];
    }
    s
}
