use std::collections::HashMap;

use super::kernels::{self, ConvGeom, MatRef};
use super::linalg::Cholesky;
use super::{numel, Tensor};
use crate::error::{Error, Result};
use crate::params::{Group, ParamId, ParamStore};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Scale(f64),
    AddScalar(f64),
    Square,
    Sqrt,
    Exp,
    Log,
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
    Softplus,
}

#[derive(Clone, Copy, Debug)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug)]
enum Reduce {
    Sum,
    Mean,
    LogSumExp,
}

enum Op {
    Leaf,
    Unary(Var, Unary),
    Binary(Var, Var, Binary),
    MatMul(Var, Var),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        out_ch: usize,
        cols: Vec<f64>,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        // geometry of the equivalent forward convolution on the output
        geom: ConvGeom,
        in_ch: usize,
    },
    Reduce(Var, usize, Reduce),
    ReduceAll(Var, Reduce),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    L2Normalize(Var, usize, Vec<f64>),
    // per-plane 1/sqrt(var + eps)
    InstanceNorm(Var, Vec<f64>),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Take(Var, Vec<usize>),
    CholeskySolve(Var, Var, Cholesky),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Tape of recorded operations.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and [`Graph::backward`] walks it once in reverse.
/// Graph tensors are never mutated after they are recorded.
pub struct Graph {
    nodes: Vec<Node>,
    bound: HashMap<ParamId, Var>,
    frozen: Vec<Group>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar with respect to every leaf of a graph.
pub struct Gradients {
    leaves: HashMap<usize, Tensor>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient of a leaf, or `None` when it is detached or unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v.0)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::Index {
            what: op,
            index: axis,
            extent: shape.len(),
        });
    }
    Ok(())
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: HashMap::new(),
            frozen: Vec::new(),
        }
    }

    /// A graph in which parameters of the given groups bind as constants.
    pub fn with_frozen(groups: &[Group]) -> Self {
        Self {
            frozen: groups.to_vec(),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a stored parameter. Repeated binds of the same id return the same
    /// node, so every use shares one gradient accumulator.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        let trainable = !self.frozen.contains(&p.group);
        let v = self.push(p.value.clone(), Op::Leaf, trainable);
        self.bound.insert(id, v);
        v
    }

    /// Copy of `v` cut from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    // ---- elementwise -------------------------------------------------------

    fn unary(&mut self, x: Var, kind: Unary) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let f: fn(f64, f64) -> f64 = match kind {
            Unary::Neg => |v, _| -v,
            Unary::Scale(_) => |v, c| v * c,
            Unary::AddScalar(_) => |v, c| v + c,
            Unary::Square => |v, _| v * v,
            Unary::Sqrt => |v, _| v.sqrt(),
            Unary::Exp => |v, _| v.exp(),
            Unary::Log => |v, _| v.ln(),
            Unary::Relu => |v, _| v.max(0.0),
            Unary::LeakyRelu(_) => |v, s| if v > 0.0 { v } else { s * v },
            Unary::Tanh => |v, _| v.tanh(),
            Unary::Sigmoid => |v, _| sigmoid(v),
            Unary::Softplus => |v, _| softplus(v),
        };
        let c = match kind {
            Unary::Scale(c) | Unary::AddScalar(c) | Unary::LeakyRelu(c) => c,
            _ => 0.0,
        };
        match kind {
            Unary::Log if xv.data().iter().any(|&v| v <= 0.0) => {
                return Err(Error::Domain {
                    op: "log",
                    detail: "non-positive operand".into(),
                })
            }
            Unary::Sqrt if xv.data().iter().any(|&v| v < 0.0) => {
                return Err(Error::Domain {
                    op: "sqrt",
                    detail: "negative operand".into(),
                })
            }
            _ => {}
        }
        let out = Tensor::from_parts(
            xv.shape().to_vec(),
            xv.data().iter().map(|&v| f(v, c)).collect(),
        );
        let ng = self.needs(x);
        Ok(self.push(out, Op::Unary(x, kind), ng))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg).expect("infallible")
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::Scale(c)).expect("infallible")
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::AddScalar(c)).expect("infallible")
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square).expect("infallible")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sqrt)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp).expect("infallible")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Log)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu).expect("infallible")
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope)).expect("infallible")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh).expect("infallible")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid).expect("infallible")
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus).expect("infallible")
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = kernels::broadcast_shape(av.shape(), bv.shape())
            .ok_or_else(|| Error::shape(name, av.shape(), bv.shape()))?;
        if matches!(kind, Binary::Div) && bv.data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let zip = |f: fn(f64, f64) -> f64| kernels::broadcast_zip(av.data(), av.shape(), bv.data(), bv.shape(), &shape, f);
        let data = match kind {
            Binary::Add => zip(|x, y| x + y),
            Binary::Sub => zip(|x, y| x - y),
            Binary::Mul => zip(|x, y| x * y),
            Binary::Div => zip(|x, y| x / y),
        };
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Binary(a, b, kind), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    // ---- linear algebra ----------------------------------------------------

    /// Product of two matrices.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.ndim() != 2 || bv.ndim() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            MatRef::new(av.data(), m, k),
            MatRef::new(bv.data(), k, n),
            &mut out,
            0.0,
        );
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), ng))
    }

    /// Swap the two axes of a matrix.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::shape("transpose", self.shape(a), &[0, 0]));
        }
        self.permute(a, &[1, 0])
    }

    /// Solve `A X = B` for symmetric positive definite `A` (`n×n`) and `B`
    /// of shape `n×m`. Only the lower triangle of `A` is read.
    pub fn cholesky_solve(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.ndim() != 2 || av.shape()[0] != av.shape()[1] || bv.ndim() != 2 || bv.shape()[0] != av.shape()[0] {
            return Err(Error::shape("cholesky_solve", av.shape(), bv.shape()));
        }
        let n = av.shape()[0];
        let m = bv.shape()[1];
        let chol = Cholesky::factor(av.data(), n)?;
        let x = chol.solve(bv.data(), m);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            Tensor::from_parts(vec![n, m], x),
            Op::CholeskySolve(a, b, chol),
            ng,
        ))
    }

    // ---- convolution -------------------------------------------------------

    /// 2-D convolution of `x` (`B×C×H×W`) with `w` (`O×C×k×k`) and optional
    /// bias (`O`).
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
            return Err(Error::shape("conv2d", xs, ws));
        }
        let (b, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let o = ws[0];
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: wd,
            kernel: ws[2],
            stride,
            padding,
        };
        let (ho, wo) = geom.out_hw().ok_or_else(|| Error::shape("conv2d", xs, ws))?;
        if let Some(bias) = bias {
            if self.nodes[bias.0].value.shape() != [o] {
                return Err(Error::shape("conv2d", ws, self.shape(bias)));
            }
        }
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let col_len = geom.col_rows() * ho * wo;
        let mut cols = vec![0.0; b * col_len];
        let mut out = vec![0.0; b * o * ho * wo];
        let in_plane = c * h * wd;
        let out_plane = o * ho * wo;
        for i in 0..b {
            let col = &mut cols[i * col_len..(i + 1) * col_len];
            kernels::im2col(&xv.data()[i * in_plane..(i + 1) * in_plane], geom, col);
            kernels::gemm(
                MatRef::new(wv.data(), o, geom.col_rows()),
                MatRef::new(col, geom.col_rows(), ho * wo),
                &mut out[i * out_plane..(i + 1) * out_plane],
                0.0,
            );
        }
        if let Some(bias) = bias {
            add_channel_bias(&mut out, self.nodes[bias.0].value.data(), b, o, ho * wo);
        }
        let ng = self.needs(x) || self.needs(w) || bias.is_some_and(|v| self.needs(v));
        let keep_cols = self.needs(w);
        Ok(self.push(
            Tensor::from_parts(vec![b, o, ho, wo], out),
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                out_ch: o,
                cols: if keep_cols { cols } else { Vec::new() },
            },
            ng,
        ))
    }

    /// Transposed 2-D convolution of `x` (`B×Ci×H×W`) with `w`
    /// (`Ci×Co×k×k`); output extent is `(H−1)·stride − 2·padding + k`.
    pub fn conv_transpose2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[0] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::shape("transposed_conv2d", xs, ws));
        }
        let (b, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, k) = (ws[1], ws[2]);
        let ho = ((h - 1) * stride + k)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::shape("transposed_conv2d", xs, ws))?;
        let wo = ((wd - 1) * stride + k)
            .checked_sub(2 * padding)
            .filter(|&v| v > 0)
            .ok_or_else(|| Error::shape("transposed_conv2d", xs, ws))?;
        let geom = ConvGeom {
            channels: co,
            height: ho,
            width: wo,
            kernel: k,
            stride,
            padding,
        };
        if geom.out_hw() != Some((h, wd)) {
            return Err(Error::shape("transposed_conv2d", xs, ws));
        }
        if let Some(bias) = bias {
            if self.nodes[bias.0].value.shape() != [co] {
                return Err(Error::shape("transposed_conv2d", ws, self.shape(bias)));
            }
        }
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let in_plane = ci * h * wd;
        let out_plane = co * ho * wo;
        let mut cols = vec![0.0; geom.col_rows() * h * wd];
        let mut out = vec![0.0; b * out_plane];
        for i in 0..b {
            kernels::gemm(
                MatRef::t(wv.data(), ci, geom.col_rows()),
                MatRef::new(&xv.data()[i * in_plane..(i + 1) * in_plane], ci, h * wd),
                &mut cols,
                0.0,
            );
            kernels::col2im(&cols, geom, &mut out[i * out_plane..(i + 1) * out_plane]);
        }
        if let Some(bias) = bias {
            add_channel_bias(&mut out, self.nodes[bias.0].value.data(), b, co, ho * wo);
        }
        let ng = self.needs(x) || self.needs(w) || bias.is_some_and(|v| self.needs(v));
        Ok(self.push(
            Tensor::from_parts(vec![b, co, ho, wo], out),
            Op::ConvTranspose2d {
                x,
                w,
                bias,
                geom,
                in_ch: ci,
            },
            ng,
        ))
    }

    // ---- reductions and normalisations -------------------------------------

    fn reduce(&mut self, x: Var, axis: usize, kind: Reduce) -> Result<Var> {
        let name = match kind {
            Reduce::Sum => "sum",
            Reduce::Mean => "mean",
            Reduce::LogSumExp => "logsumexp",
        };
        let xv = &self.nodes[x.0].value;
        check_axis(name, xv.shape(), axis)?;
        let (outer, n, inner) = kernels::axis_split(xv.shape(), axis);
        if n == 0 {
            return Err(Error::Contract(format!("{name} over empty axis")));
        }
        let d = xv.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let line = (0..n).map(|j| d[(o * n + j) * inner + i]);
                out[o * inner + i] = match kind {
                    Reduce::Sum => line.sum(),
                    Reduce::Mean => line.sum::<f64>() / n as f64,
                    Reduce::LogSumExp => {
                        let m = line.clone().fold(f64::NEG_INFINITY, f64::max);
                        m + line.map(|v| (v - m).exp()).sum::<f64>().ln()
                    }
                };
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = 1;
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Reduce(x, axis, kind), ng))
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, Reduce::Sum)
    }

    /// Mean along `axis`, keeping it with extent 1.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, Reduce::Mean)
    }

    /// `ln Σ exp` along `axis`, keeping it with extent 1.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, axis, Reduce::LogSumExp)
    }

    fn reduce_all(&mut self, x: Var, kind: Reduce) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = xv.len() as f64;
        let s: f64 = xv.data().iter().sum();
        let v = match kind {
            Reduce::Sum => s,
            Reduce::Mean => s / n,
            Reduce::LogSumExp => unreachable!(),
        };
        let ng = self.needs(x);
        self.push(Tensor::scalar(v), Op::ReduceAll(x, kind), ng)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        self.reduce_all(x, Reduce::Sum)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        self.reduce_all(x, Reduce::Mean)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_values(x, axis, "softmax", false)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Softmax(x, axis), ng))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_values(x, axis, "log_softmax", true)?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::LogSoftmax(x, axis), ng))
    }

    fn softmax_values(&self, x: Var, axis: usize, name: &'static str, log: bool) -> Result<Tensor> {
        let xv = &self.nodes[x.0].value;
        check_axis(name, xv.shape(), axis)?;
        let (outer, n, inner) = kernels::axis_split(xv.shape(), axis);
        let mut out = xv.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let m = (0..n).map(|j| out[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..n).map(|j| (out[idx(j)] - m).exp()).sum();
                for j in 0..n {
                    let v = out[idx(j)] - m;
                    out[idx(j)] = if log { v - z.ln() } else { v.exp() / z };
                }
            }
        }
        Ok(Tensor::from_parts(xv.shape().to_vec(), out))
    }

    /// Normalise every `H×W` plane of an `[N, C, H, W]` tensor to zero mean
    /// and unit variance, with `eps` added to the variance.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::shape("instance_norm", s, &[0, 0, 0, 0]));
        }
        let plane = s[2] * s[3];
        let mut out = xv.data().to_vec();
        let mut inv = Vec::with_capacity(s[0] * s[1]);
        for row in out.chunks_mut(plane.max(1)) {
            let mean = row.iter().sum::<f64>() / plane as f64;
            row.iter_mut().for_each(|v| *v -= mean);
            let var = row.iter().map(|v| v * v).sum::<f64>() / plane as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= r);
            inv.push(r);
        }
        let out = Tensor::from_parts(s.to_vec(), out);
        let ng = self.needs(x);
        Ok(self.push(out, Op::InstanceNorm(x, inv), ng))
    }

    /// Scale each line along `axis` to unit Euclidean norm. Zero lines map to
    /// zero with zero gradient.
    pub fn l2_normalize(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        check_axis("l2_normalize", xv.shape(), axis)?;
        let (outer, n, inner) = kernels::axis_split(xv.shape(), axis);
        let mut out = xv.data().to_vec();
        let mut norms = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * n + j) * inner + i;
                let norm = (0..n).map(|j| out[idx(j)].powi(2)).sum::<f64>().sqrt();
                norms[o * inner + i] = norm;
                for j in 0..n {
                    out[idx(j)] = if norm > 0.0 { out[idx(j)] / norm } else { 0.0 };
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(
            Tensor::from_parts(xv.shape().to_vec(), out),
            Op::L2Normalize(x, axis, norms),
            ng,
        ))
    }

    // ---- structural --------------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut extent = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            extent += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = extent;
        let (outer, _, inner) = kernels::axis_split(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let v = &self.nodes[p.0].value;
                let chunk = v.shape()[axis] * inner;
                out.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let ng = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(Tensor::from_parts(shape, out), Op::Concat(parts.to_vec(), axis), ng))
    }

    /// Range `start..end` of `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        check_axis("slice", xv.shape(), axis)?;
        if start > end || end > xv.shape()[axis] {
            return Err(Error::Index {
                what: "slice",
                index: end,
                extent: xv.shape()[axis],
            });
        }
        let (outer, n, inner) = kernels::axis_split(xv.shape(), axis);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv.data()[(o * n + start) * inner..(o * n + end) * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = end - start;
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Slice(x, axis, start), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.reshape(shape.to_vec())?;
        let ng = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let nd = xv.ndim();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape("permute", xv.shape(), axes));
        }
        let out = permute_data(xv, axes);
        let ng = self.needs(x);
        Ok(self.push(out, Op::Permute(x, axes.to_vec()), ng))
    }

    /// Gather flat elements of `x` by index into a tensor of `shape`.
    pub fn take(&mut self, x: Var, indices: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        if numel(shape) != indices.len() {
            return Err(Error::shape("take", &[indices.len()], shape));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::Index {
                what: "take",
                index: bad,
                extent: xv.len(),
            });
        }
        let out = indices.iter().map(|&i| xv.data()[i]).collect();
        let ng = self.needs(x);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), out), Op::Take(x, indices), ng))
    }

    // ---- backward ----------------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut leaves = HashMap::new();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                leaves.insert(i, Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.backprop(node, &g, &mut grads);
        }
        Ok(Gradients {
            leaves,
            params: self.bound.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(x, kind) => {
                let xv = self.value(*x).data();
                let yv = y.data();
                let d: Vec<f64> = (0..g.len())
                    .map(|i| {
                        let (xi, yi) = (xv[i], yv[i]);
                        g[i] * match *kind {
                            Unary::Neg => -1.0,
                            Unary::Scale(c) => c,
                            Unary::AddScalar(_) => 1.0,
                            Unary::Square => 2.0 * xi,
                            Unary::Sqrt => 0.5 / yi,
                            Unary::Exp => yi,
                            Unary::Log => 1.0 / xi,
                            Unary::Relu => (xi > 0.0) as u8 as f64,
                            Unary::LeakyRelu(s) => {
                                if xi > 0.0 {
                                    1.0
                                } else {
                                    s
                                }
                            }
                            Unary::Tanh => 1.0 - yi * yi,
                            Unary::Sigmoid => yi * (1.0 - yi),
                            Unary::Softplus => sigmoid(xi),
                        }
                    })
                    .collect();
                self.accumulate(grads, *x, d);
            }
            Op::Binary(a, b, kind) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let out_shape = y.shape();
                let with_a = |f: fn(f64, f64) -> f64| kernels::broadcast_zip(g, out_shape, av.data(), av.shape(), out_shape, f);
                let with_b = |f: fn(f64, f64) -> f64| kernels::broadcast_zip(g, out_shape, bv.data(), bv.shape(), out_shape, f);
                if self.needs(*a) {
                    let ga: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => g.to_vec(),
                        Binary::Mul => with_b(|g, b| g * b),
                        Binary::Div => with_b(|g, b| g / b),
                    };
                    let ga = kernels::reduce_to(&ga, out_shape, av.shape());
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let gb: Vec<f64> = match kind {
                        Binary::Add => g.to_vec(),
                        Binary::Sub => g.iter().map(|v| -v).collect(),
                        Binary::Mul => with_a(|g, a| g * a),
                        Binary::Div => {
                            let ga = with_a(|g, a| g * a);
                            kernels::broadcast_zip(&ga, out_shape, bv.data(), bv.shape(), out_shape, |t, b| -t / (b * b))
                        }
                    };
                    let gb = kernels::reduce_to(&gb, out_shape, bv.shape());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    kernels::gemm(MatRef::new(g, m, n), MatRef::t(bv.data(), k, n), &mut ga, 0.0);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm(MatRef::t(av.data(), m, k), MatRef::new(g, m, n), &mut gb, 0.0);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::CholeskySolve(a, b, chol) => {
                let n = chol.dim();
                let m = self.value(*b).shape()[1];
                let gb = chol.solve(g, m);
                if self.needs(*a) {
                    // dA = -gB Xᵀ, folded onto the lower triangle that the
                    // factorisation actually reads.
                    let x = y.data();
                    let mut full = vec![0.0; n * n];
                    kernels::gemm(MatRef::new(&gb, n, m), MatRef::t(x, n, m), &mut full, 0.0);
                    let mut ga = vec![0.0; n * n];
                    for i in 0..n {
                        ga[i * n + i] = -full[i * n + i];
                        for j in 0..i {
                            ga[i * n + j] = -(full[i * n + j] + full[j * n + i]);
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                self.accumulate(grads, *b, gb);
            }
            Op::Conv2d {
                x,
                w,
                bias,
                geom,
                out_ch,
                cols,
            } => {
                let xs = self.value(*x).shape();
                let (b, o) = (xs[0], *out_ch);
                let (ho, wo) = geom.out_hw().expect("valid");
                let plane = ho * wo;
                let col_len = geom.col_rows() * plane;
                let in_plane = geom.channels * geom.height * geom.width;
                if let Some(bias) = bias {
                    self.accumulate(grads, *bias, channel_sums(g, b, o, plane));
                }
                if self.needs(*w) {
                    let mut gw = vec![0.0; o * geom.col_rows()];
                    for i in 0..b {
                        kernels::gemm(
                            MatRef::new(&g[i * o * plane..(i + 1) * o * plane], o, plane),
                            MatRef::t(&cols[i * col_len..(i + 1) * col_len], geom.col_rows(), plane),
                            &mut gw,
                            1.0,
                        );
                    }
                    self.accumulate(grads, *w, gw);
                }
                if self.needs(*x) {
                    let wv = self.value(*w).data();
                    let mut gx = vec![0.0; b * in_plane];
                    let mut dcols = vec![0.0; col_len];
                    for i in 0..b {
                        kernels::gemm(
                            MatRef::t(wv, o, geom.col_rows()),
                            MatRef::new(&g[i * o * plane..(i + 1) * o * plane], o, plane),
                            &mut dcols,
                            0.0,
                        );
                        kernels::col2im(&dcols, *geom, &mut gx[i * in_plane..(i + 1) * in_plane]);
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                bias,
                geom,
                in_ch,
            } => {
                let xv = self.value(*x);
                let b = xv.shape()[0];
                let (h, wd) = geom.out_hw().expect("valid");
                let ci = *in_ch;
                let co = geom.channels;
                let out_plane = co * geom.height * geom.width;
                let in_plane = ci * h * wd;
                if let Some(bias) = bias {
                    self.accumulate(grads, *bias, channel_sums(g, b, co, geom.height * geom.width));
                }
                let wv = self.value(*w).data();
                let mut cols = vec![0.0; geom.col_rows() * h * wd];
                let mut gx = self.needs(*x).then(|| vec![0.0; b * in_plane]);
                let mut gw = self.needs(*w).then(|| vec![0.0; ci * geom.col_rows()]);
                for i in 0..b {
                    kernels::im2col(&g[i * out_plane..(i + 1) * out_plane], *geom, &mut cols);
                    if let Some(gx) = gx.as_mut() {
                        kernels::gemm(
                            MatRef::new(wv, ci, geom.col_rows()),
                            MatRef::new(&cols, geom.col_rows(), h * wd),
                            &mut gx[i * in_plane..(i + 1) * in_plane],
                            0.0,
                        );
                    }
                    if let Some(gw) = gw.as_mut() {
                        kernels::gemm(
                            MatRef::new(&xv.data()[i * in_plane..(i + 1) * in_plane], ci, h * wd),
                            MatRef::t(&cols, geom.col_rows(), h * wd),
                            gw,
                            1.0,
                        );
                    }
                }
                if let Some(gx) = gx {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = gw {
                    self.accumulate(grads, *w, gw);
                }
            }
            Op::Reduce(x, axis, kind) => {
                let xv = self.value(*x);
                let (outer, n, inner) = kernels::axis_split(xv.shape(), *axis);
                let mut gx = vec![0.0; xv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let gi = g[o * inner + i];
                        let yi = y.data()[o * inner + i];
                        for j in 0..n {
                            let idx = (o * n + j) * inner + i;
                            gx[idx] = match kind {
                                Reduce::Sum => gi,
                                Reduce::Mean => gi / n as f64,
                                Reduce::LogSumExp => gi * (xv.data()[idx] - yi).exp(),
                            };
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ReduceAll(x, kind) => {
                let n = self.value(*x).len();
                let v = match kind {
                    Reduce::Mean => g[0] / n as f64,
                    _ => g[0],
                };
                self.accumulate(grads, *x, vec![v; n]);
            }
            Op::Softmax(x, axis) | Op::LogSoftmax(x, axis) => {
                let log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, n, inner) = kernels::axis_split(y.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * n + j) * inner + i;
                        if log {
                            let gs: f64 = (0..n).map(|j| g[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] = g[idx(j)] - y.data()[idx(j)].exp() * gs;
                            }
                        } else {
                            let dot: f64 = (0..n).map(|j| g[idx(j)] * y.data()[idx(j)]).sum();
                            for j in 0..n {
                                gx[idx(j)] = y.data()[idx(j)] * (g[idx(j)] - dot);
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::InstanceNorm(x, inv) => {
                let plane = y.len() / inv.len().max(1);
                let mut gx = vec![0.0; y.len()];
                for (p, &r) in inv.iter().enumerate() {
                    let span = p * plane..(p + 1) * plane;
                    let (gp, yp) = (&g[span.clone()], &y.data()[span.clone()]);
                    let gm = gp.iter().sum::<f64>() / plane as f64;
                    let gy = gp.iter().zip(yp).map(|(a, b)| a * b).sum::<f64>() / plane as f64;
                    for ((o, &gi), &yi) in gx[span].iter_mut().zip(gp).zip(yp) {
                        *o = r * (gi - gm - yi * gy);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::L2Normalize(x, axis, norms) => {
                let (outer, n, inner) = kernels::axis_split(y.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let norm = norms[o * inner + i];
                        if norm == 0.0 {
                            continue;
                        }
                        let idx = |j: usize| (o * n + j) * inner + i;
                        let dot: f64 = (0..n).map(|j| g[idx(j)] * y.data()[idx(j)]).sum();
                        for j in 0..n {
                            gx[idx(j)] = (g[idx(j)] - y.data()[idx(j)] * dot) / norm;
                        }
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Concat(parts, axis) => {
                let (outer, _, inner) = kernels::axis_split(y.shape(), *axis);
                let mut offset = 0;
                let total = y.shape()[*axis] * inner;
                for p in parts {
                    let ext = self.shape(*p)[*axis] * inner;
                    if self.needs(*p) {
                        let mut gp = Vec::with_capacity(outer * ext);
                        for o in 0..outer {
                            gp.extend_from_slice(&g[o * total + offset..o * total + offset + ext]);
                        }
                        self.accumulate(grads, *p, gp);
                    }
                    offset += ext;
                }
            }
            Op::Slice(x, axis, start) => {
                let xv = self.value(*x);
                let (outer, n, inner) = kernels::axis_split(xv.shape(), *axis);
                let len = y.shape()[*axis] * inner;
                let mut gx = vec![0.0; xv.len()];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    gx[dst..dst + len].copy_from_slice(&g[o * len..(o + 1) * len]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let gt = Tensor::from_parts(y.shape().to_vec(), g.to_vec());
                self.accumulate(grads, *x, permute_data(&gt, &inverse).into_data());
            }
            Op::Take(x, indices) => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (&i, &gi) in indices.iter().zip(g) {
                    gx[i] += gi;
                }
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], batch: usize, ch: usize, plane: usize) {
    for b in 0..batch {
        for (c, &bv) in bias.iter().enumerate().take(ch) {
            let s = (b * ch + c) * plane;
            out[s..s + plane].iter_mut().for_each(|v| *v += bv);
        }
    }
}

fn channel_sums(g: &[f64], batch: usize, ch: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; ch];
    for b in 0..batch {
        for (c, acc) in out.iter_mut().enumerate() {
            let s = (b * ch + c) * plane;
            *acc += g[s..s + plane].iter().sum::<f64>();
        }
    }
    out
}

fn permute_data(x: &Tensor, axes: &[usize]) -> Tensor {
    let in_shape = x.shape();
    let nd = in_shape.len();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * in_shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let total = x.len();
    let mut out = Vec::with_capacity(total);
    let mut index = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(x.data()[off]);
        for ax in (0..nd).rev() {
            index[ax] += 1;
            off += strides[ax];
            if index[ax] < out_shape[ax] {
                break;
            }
            off -= strides[ax] * index[ax];
            index[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, out)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}
