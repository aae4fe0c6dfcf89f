use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::{Gradients, Neighborhood, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Vectors with a Euclidean norm below this are mapped to zero by
/// [`Tape::l2_normalize_rows`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var, f64),
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    Matmul(Var, Var),
    VecMat(Var, Var),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        cols: Vec<f64>,
        geom: ConvGeom,
    },
    MaxPool(Var, Vec<usize>),
    SoftmaxRows(Var, f64),
    L2NormRows(Var, Vec<f64>),
    LocalAffinity {
        src: Var,
        dst: Var,
        temperature: f64,
        graph: Arc<Neighborhood>,
    },
    LocalWalk {
        x: Var,
        values: Var,
        graph: Arc<Neighborhood>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Define-by-run record of a forward computation.
///
/// Every operation appends one node; inputs always precede their outputs,
/// so a reverse sweep over the node list is a valid backward order.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Whether gradients flow into `v`.
    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records a value that gradients are not propagated into.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a differentiable input that is not a stored parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = &self.nodes[x.0].value;
        let out = Tensor::from_fn(t.shape(), |i| f(t.data()[i]));
        let tracked = self.tracked(&[x]);
        self.push(out, op, tracked)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let out = Tensor::from_fn(ta.shape(), |i| f(ta.data()[i], tb.data()[i]));
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(out, op, tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        self.unary(x, |v| scale * v + shift, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        self.affine(x, factor, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Natural log; inputs must be positive.
    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Log(x, 0.0))
    }

    /// `ln(max(x, floor))`; zero gradient where the clamp is active.
    pub fn log_clamped(&mut self, x: Var, floor: f64) -> Var {
        self.unary(x, |v| v.max(floor).ln(), Op::Log(x, floor))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let tracked = self.tracked(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.nodes[x.0].value.clone().reshape(shape)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::Reshape(x), tracked))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let &[n, m] = t.shape() else {
            return Err(Error::shape("transpose", t.shape(), &[0, 0]));
        };
        let src = t.data();
        let out = Tensor::from_fn(&[m, n], |k| src[(k % n) * m + k / n]);
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::Transpose(x), tracked))
    }

    /// `[n,k] x [k,m] -> [n,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (&[n, k], &[k2, m]) = (sa, sb) else {
            return Err(Error::shape("matmul", sa, sb));
        };
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let mut out = vec![0.0; n * m];
        kernels::gemm(n, k, m, self.data(a), false, self.data(b), false, &mut out, 0.0);
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::Matmul(a, b), tracked))
    }

    /// Row vector times square matrix: `[m] x [m,m] -> [m]`.
    pub fn vecmat(&mut self, x: Var, a: Var) -> Result<Var> {
        let (sx, sa) = (self.shape(x), self.shape(a));
        let m = sx.iter().product::<usize>();
        if sx.len() != 1 || sa != [m, m] {
            return Err(Error::shape("vecmat", sx, sa));
        }
        let y = kernels::vecmat(self.data(x), self.data(a));
        let tracked = self.tracked(&[x, a]);
        Ok(self.push(Tensor::new(&[m], y)?, Op::VecMat(x, a), tracked))
    }

    /// Concatenates tensors along axis 0; trailing dimensions must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::invalid("concat", "no inputs"));
        };
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape("concat", self.shape(*first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![lead];
        shape.extend(&tail);
        let tracked = self.tracked(parts);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()), tracked))
    }

    /// Flat-index gather: output `[indices.len()]`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let src = self.data(x);
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(
                "gather",
                format!("index {bad} out of range for {} elements", src.len()),
            ));
        }
        let out: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Tensor::new(&[indices.len()], out)?,
            Op::Gather(x, indices.to_vec()),
            tracked,
        ))
    }

    /// Zero-padded stride-1 cross-correlation preserving spatial size.
    ///
    /// `input [C,H,W]`, `weight [K,C,kh,kw]`, `bias [K]` -> `[K,H,W]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (si, sw, sb) = (self.shape(input), self.shape(weight), self.shape(bias));
        let (&[c, h, w], &[k, wc, kh, kw]) = (si, sw) else {
            return Err(Error::shape("conv2d", si, sw));
        };
        if c != wc {
            return Err(Error::shape("conv2d", si, sw));
        }
        if sb != [k] {
            return Err(Error::shape("conv2d bias", sw, sb));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::invalid("conv2d", format!("kernel {kh}x{kw} is not odd")));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
        };
        let cols = kernels::im2col(self.data(input), geom);
        let hw = h * w;
        let mut out = vec![0.0; k * hw];
        for (o, &b) in out.chunks_mut(hw).zip(self.data(bias)) {
            o.fill(b);
        }
        kernels::gemm(k, geom.rows(), hw, self.data(weight), false, &cols, false, &mut out, 1.0);
        let tracked = self.tracked(&[input, weight, bias]);
        Ok(self.push(
            Tensor::new(&[k, h, w], out)?,
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
                geom,
            },
            tracked,
        ))
    }

    /// Max pooling with replicate-edge padding; output is `ceil(H/stride) x ceil(W/stride)`.
    ///
    /// The window for output `(oy, ox)` covers rows `oy*stride .. oy*stride+kernel`
    /// (clamped to the last row) and likewise for columns. Ties go to the
    /// first cell in row-major window order.
    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x);
        let &[c, h, w] = s else {
            return Err(Error::shape("maxpool2d", s, &[0, 0, 0]));
        };
        if kernel == 0 || stride == 0 {
            return Err(Error::invalid("maxpool2d", "kernel and stride must be positive"));
        }
        if kernel > h || kernel > w {
            return Err(Error::invalid(
                "maxpool2d",
                format!("kernel {kernel} larger than input {h}x{w}"),
            ));
        }
        let (oh, ow) = (h.div_ceil(stride), w.div_ceil(stride));
        let src = self.data(x);
        let mut out = Vec::with_capacity(c * oh * ow);
        let mut argmax = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for dy in 0..kernel {
                        let y = (oy * stride + dy).min(h - 1);
                        for dx in 0..kernel {
                            let xx = (ox * stride + dx).min(w - 1);
                            let i = base + y * w + xx;
                            if src[i] > best {
                                best = src[i];
                                best_i = i;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(Tensor::new(&[c, oh, ow], out)?, Op::MaxPool(x, argmax), tracked))
    }

    /// Row-wise `softmax(x / temperature)` over a `[N,M]` matrix.
    pub fn softmax_rows(&mut self, x: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(
                "softmax_rows",
                format!("temperature must be positive, got {temperature}"),
            ));
        }
        let s = self.shape(x);
        let &[n, m] = s else {
            return Err(Error::shape("softmax_rows", s, &[0, 0]));
        };
        let mut out = vec![0.0; n * m];
        for (o, row) in out.chunks_mut(m).zip(self.data(x).chunks(m)) {
            kernels::softmax_into(row, temperature, o);
        }
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Tensor::new(&[n, m], out)?,
            Op::SoftmaxRows(x, temperature),
            tracked,
        ))
    }

    /// Normalizes each vector along the last axis to unit length. Vectors
    /// with norm below [`NORM_EPS`] become zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let Some(&d) = t.shape().last() else {
            return Err(Error::shape("l2_normalize", t.shape(), &[0]));
        };
        let mut out = t.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d.max(1));
        if d > 0 {
            for row in out.chunks_mut(d) {
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n < NORM_EPS {
                    row.fill(0.0);
                } else {
                    row.iter_mut().for_each(|v| *v /= n);
                }
                norms.push(n);
            }
        }
        let out = Tensor::new(t.shape(), out)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(out, Op::L2NormRows(x, norms), tracked))
    }

    /// Softmax affinities restricted to a neighborhood graph.
    ///
    /// `src [m,D]`, `dst [m,D]`; the output holds one probability per edge of
    /// `graph`, each node's edges summing to one.
    pub fn local_affinity(
        &mut self,
        src: Var,
        dst: Var,
        temperature: f64,
        graph: Arc<Neighborhood>,
    ) -> Result<Var> {
        if !(temperature > 0.0) {
            return Err(Error::invalid(
                "local_affinity",
                format!("temperature must be positive, got {temperature}"),
            ));
        }
        let (ss, sd) = (self.shape(src), self.shape(dst));
        let (&[m, d], &[m2, d2]) = (ss, sd) else {
            return Err(Error::shape("local_affinity", ss, sd));
        };
        if m != m2 || d != d2 || graph.nodes() != m {
            return Err(Error::shape("local_affinity", ss, sd));
        }
        let (qs, qd) = (self.data(src), self.data(dst));
        let mut values = vec![0.0; graph.nnz()];
        let mut logits = Vec::with_capacity(graph.max_degree());
        for i in 0..m {
            let qi = &qs[i * d..(i + 1) * d];
            logits.clear();
            for &j in graph.neighbors(i) {
                let qj = &qd[j * d..(j + 1) * d];
                logits.push(qi.iter().zip(qj).map(|(a, b)| a * b).sum::<f64>());
            }
            kernels::softmax_into(&logits, temperature, &mut values[graph.span(i)]);
        }
        let tracked = self.tracked(&[src, dst]);
        let n = values.len();
        Ok(self.push(
            Tensor::new(&[n], values)?,
            Op::LocalAffinity {
                src,
                dst,
                temperature,
                graph,
            },
            tracked,
        ))
    }

    /// One walk step over a sparse transition: `y[j] = sum_i x[i] * values[edge(i,j)]`.
    pub fn local_walk(&mut self, x: Var, values: Var, graph: Arc<Neighborhood>) -> Result<Var> {
        let (sx, sv) = (self.shape(x), self.shape(values));
        if sx != [graph.nodes()] || sv != [graph.nnz()] {
            return Err(Error::shape("local_walk", sx, sv));
        }
        let y = graph.propagate(self.data(x), self.data(values));
        let tracked = self.tracked(&[x, values]);
        let m = y.len();
        Ok(self.push(Tensor::new(&[m], y)?, Op::LocalWalk { x, values, graph }, tracked))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Backward> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", lt.shape()),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.tracked {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Backward { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, g));
                self.acc(grads, *b, |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * vb[i];
                    }
                });
                self.acc(grads, *b, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * va[i];
                    }
                });
            }
            Op::Affine(x, s) => self.acc(grads, *x, |d| {
                d.iter_mut().zip(g).for_each(|(d, g)| *d += s * g)
            }),
            Op::Sigmoid(x) => self.acc(grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Tanh(x) => self.acc(grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::Relu(x) => {
                let vx = self.data(*x);
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        if vx[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                })
            }
            Op::Exp(x) => self.acc(grads, *x, |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i];
                }
            }),
            Op::Log(x, floor) => {
                let vx = self.data(*x);
                self.acc(grads, *x, |d| {
                    for i in 0..d.len() {
                        if *floor <= 0.0 || vx[i] > *floor {
                            d[i] += g[i] / vx[i];
                        }
                    }
                })
            }
            Op::Sum(x) => self.acc(grads, *x, |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::Reshape(x) => self.acc(grads, *x, |d| add_into(d, g)),
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (n, m) = (s[0], s[1]);
                self.acc(grads, *x, |d| {
                    for i in 0..n {
                        for j in 0..m {
                            d[i * m + j] += g[j * n + i];
                        }
                    }
                })
            }
            Op::Matmul(a, b) => {
                let (n, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let m = self.shape(*b)[1];
                let (va, vb) = (self.data(*a), self.data(*b));
                self.acc(grads, *a, |d| kernels::gemm(n, m, k, g, false, vb, true, d, 1.0));
                self.acc(grads, *b, |d| kernels::gemm(k, n, m, va, true, g, false, d, 1.0));
            }
            Op::VecMat(x, a) => {
                let (vx, va) = (self.data(*x), self.data(*a));
                let m = vx.len();
                self.acc(grads, *x, |d| {
                    for i in 0..m {
                        let row = &va[i * m..(i + 1) * m];
                        d[i] += row.iter().zip(g).map(|(a, g)| a * g).sum::<f64>();
                    }
                });
                self.acc(grads, *a, |d| {
                    for i in 0..m {
                        for j in 0..m {
                            d[i * m + j] += vx[i] * g[j];
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.acc(grads, p, |d| add_into(d, &g[off..off + n]));
                    off += n;
                }
            }
            Op::Gather(x, idx) => self.acc(grads, *x, |d| {
                for (gi, &i) in g.iter().zip(idx) {
                    d[i] += gi;
                }
            }),
            Op::Conv2d {
                input,
                weight,
                bias,
                cols,
                geom,
            } => {
                let hw = geom.cols();
                let rows = geom.rows();
                let k = g.len() / hw;
                self.acc(grads, *bias, |d| {
                    for (db, gk) in d.iter_mut().zip(g.chunks(hw)) {
                        *db += gk.iter().sum::<f64>();
                    }
                });
                self.acc(grads, *weight, |d| {
                    kernels::gemm(k, hw, rows, g, false, cols, true, d, 1.0)
                });
                let vw = self.data(*weight);
                self.acc(grads, *input, |d| {
                    let mut dcols = vec![0.0; rows * hw];
                    kernels::gemm(rows, k, hw, vw, true, g, false, &mut dcols, 0.0);
                    kernels::col2im(&dcols, *geom, d);
                });
            }
            Op::MaxPool(x, argmax) => self.acc(grads, *x, |d| {
                for (gi, &i) in g.iter().zip(argmax) {
                    d[i] += gi;
                }
            }),
            Op::SoftmaxRows(x, tau) => {
                let m = self.shape(*x)[1];
                self.acc(grads, *x, |d| {
                    for ((dr, yr), gr) in d.chunks_mut(m).zip(y.chunks(m)).zip(g.chunks(m)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..m {
                            dr[j] += yr[j] * (gr[j] - dot) / tau;
                        }
                    }
                })
            }
            Op::L2NormRows(x, norms) => {
                let dim = *self.shape(*x).last().unwrap_or(&1);
                self.acc(grads, *x, |d| {
                    let rows = d.chunks_mut(dim).zip(y.chunks(dim)).zip(g.chunks(dim));
                    for (((dr, yr), gr), &n) in rows.zip(norms) {
                        if n < NORM_EPS {
                            continue;
                        }
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..dim {
                            dr[j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                })
            }
            Op::LocalAffinity {
                src,
                dst,
                temperature,
                graph,
            } => {
                let d = self.shape(*src)[1];
                let (qs, qd) = (self.data(*src), self.data(*dst));
                let mut glogit = vec![0.0; y.len()];
                for i in 0..graph.nodes() {
                    let span = graph.span(i);
                    let (ys, gs) = (&y[span.clone()], &g[span.clone()]);
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for (k, gl) in span.clone().zip(&mut glogit[span]) {
                        *gl = y[k] * (g[k] - dot) / temperature;
                    }
                }
                self.acc(grads, *src, |ds| {
                    for i in 0..graph.nodes() {
                        let span = graph.span(i);
                        let di = &mut ds[i * d..(i + 1) * d];
                        for (&j, &gl) in graph.neighbors(i).iter().zip(&glogit[span]) {
                            let qj = &qd[j * d..(j + 1) * d];
                            di.iter_mut().zip(qj).for_each(|(a, b)| *a += gl * b);
                        }
                    }
                });
                self.acc(grads, *dst, |dd| {
                    for i in 0..graph.nodes() {
                        let span = graph.span(i);
                        let qi = &qs[i * d..(i + 1) * d];
                        for (&j, &gl) in graph.neighbors(i).iter().zip(&glogit[span]) {
                            let dj = &mut dd[j * d..(j + 1) * d];
                            dj.iter_mut().zip(qi).for_each(|(a, b)| *a += gl * b);
                        }
                    }
                });
            }
            Op::LocalWalk { x, values, graph } => {
                let (vx, vv) = (self.data(*x), self.data(*values));
                self.acc(grads, *x, |d| {
                    for i in 0..graph.nodes() {
                        let span = graph.span(i);
                        d[i] += graph
                            .neighbors(i)
                            .iter()
                            .zip(&vv[span])
                            .map(|(&j, v)| v * g[j])
                            .sum::<f64>();
                    }
                });
                self.acc(grads, *values, |d| {
                    for i in 0..graph.nodes() {
                        let span = graph.span(i);
                        for (&j, dk) in graph.neighbors(i).iter().zip(&mut d[span]) {
                            *dk += vx[i] * g[j];
                        }
                    }
                });
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
        f(slot);
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Backward {
    grads: Vec<Option<Vec<f64>>>,
}

impl Backward {
    /// Gradient with respect to `v`; zeros if the loss does not depend on it.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v);
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Sums gradients of every parameter leaf on `tape` into a map keyed by parameter id.
    pub fn param_grads(&self, tape: &Tape, store: &ParamStore) -> Gradients {
        let mut out = Gradients::zeros_like(store);
        for (i, node) in tape.nodes.iter().enumerate().take(self.grads.len()) {
            if let (Op::Param(id), Some(g)) = (&node.op, &self.grads[i]) {
                out.accumulate(*id, g);
            }
        }
        out
    }
}
