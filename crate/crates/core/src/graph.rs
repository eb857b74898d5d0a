//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records one forward pass as an append-only list of nodes; node
//! ids ([`Var`]) are handed out in creation order, so the append order is a
//! topological order. [`Graph::backward`] walks the tape once in reverse and
//! consumes it: a second call fails with [`Error::GraphConsumed`]. Build a
//! fresh graph for every forward pass.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::kernels::{self, ConvDims};
use crate::srtg::FusionMode;
use crate::{math, Error, Result, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dGeom {
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dGeom {
    pub fn new(stride: [usize; 3], padding: [usize; 3]) -> Self {
        Conv3dGeom { stride, padding }
    }
}

impl Default for Conv3dGeom {
    fn default() -> Self {
        Conv3dGeom {
            stride: [1; 3],
            padding: [0; 3],
        }
    }
}

/// Batch statistics produced by a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    /// Number of elements reduced per channel.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        dims: ConvDims,
    },
    MaxPool3d {
        x: Var,
        argmax: Vec<usize>,
    },
    SpatialAvgPool {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Transpose {
        a: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: f64,
    },
    AddBias {
        a: Var,
        bias: Var,
    },
    Sigmoid {
        a: Var,
    },
    Tanh {
        a: Var,
    },
    Relu {
        a: Var,
    },
    SoftmaxLast {
        a: Var,
    },
    ConcatLast {
        a: Var,
        b: Var,
    },
    SliceTime {
        a: Var,
        t: usize,
    },
    StackTime {
        parts: Vec<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        training: bool,
    },
    Fuse {
        main: Var,
        rec: Var,
        mode: FusionMode,
        open: Vec<bool>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Append-only computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a tensor; it is differentiated iff `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Records a tensor as a differentiable leaf regardless of its flag.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shapes are validated on creation")
    }

    /// Gradient of the last backward pass with respect to `v`; `None` when
    /// `v` does not require a gradient or received none.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    // ---------------------------------------------------------------- ops

    /// 3D convolution over (N, C, T, H, W) with zero padding.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: Conv3dGeom) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 5 {
            return Err(Error::shape("conv3d", "input rank", format!("expected (N,C,T,H,W), got {:?}", xs)));
        }
        if ws.len() != 5 {
            return Err(Error::shape("conv3d", "kernel rank", format!("expected (O,I,kT,kH,kW), got {:?}", ws)));
        }
        if ws[1] != xs[1] {
            return Err(Error::shape(
                "conv3d",
                "in_channels",
                format!("kernel expects {} input channels, input has {}", ws[1], xs[1]),
            ));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(
                    "conv3d",
                    "bias",
                    format!("bias shape {:?}, expected [{}]", self.shape(b), ws[0]),
                ));
            }
        }
        const AXES: [&str; 3] = ["frames", "height", "width"];
        let mut out = [0usize; 3];
        for a in 0..3 {
            out[a] = kernels::out_extent(xs[2 + a], ws[2 + a], geom.stride[a], geom.padding[a])
                .ok_or(Error::EmptyOutput { op: "conv3d", dim: AXES[a] })?;
        }
        let dims = ConvDims {
            n: xs[0],
            ci: xs[1],
            co: ws[0],
            inp: [xs[2], xs[3], xs[4]],
            k: [ws[2], ws[3], ws[4]],
            out,
            stride: geom.stride,
            pad: geom.padding,
        };
        let shape = vec![dims.n, dims.co, out[0], out[1], out[2]];
        let mut y = vec![0.0; shape.iter().product()];
        kernels::conv3d_forward(&dims, self.value(x), self.value(w), b.map(|b| self.value(b)), &mut y);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(shape, y, rg, Op::Conv3d { x, w, b, dims }))
    }

    pub fn max_pool3d(&mut self, x: Var, kernel: [usize; 3], geom: Conv3dGeom) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(Error::shape("max_pool3d", "input rank", format!("{:?}", xs)));
        }
        const AXES: [&str; 3] = ["frames", "height", "width"];
        let mut out = [0usize; 3];
        for a in 0..3 {
            if geom.padding[a] >= kernel[a] {
                return Err(Error::InvalidArgument(format!(
                    "max_pool3d padding {} must be smaller than kernel {}",
                    geom.padding[a], kernel[a]
                )));
            }
            out[a] = kernels::out_extent(xs[2 + a], kernel[a], geom.stride[a], geom.padding[a])
                .ok_or(Error::EmptyOutput { op: "max_pool3d", dim: AXES[a] })?;
        }
        let dims = ConvDims {
            n: xs[0],
            ci: xs[1],
            co: xs[1],
            inp: [xs[2], xs[3], xs[4]],
            k: kernel,
            out,
            stride: geom.stride,
            pad: geom.padding,
        };
        let shape = vec![xs[0], xs[1], out[0], out[1], out[2]];
        let mut y = vec![0.0; shape.iter().product()];
        let argmax = kernels::max_pool3d_forward(&dims, self.value(x), &mut y);
        let rg = self.rg(x);
        Ok(self.push(shape, y, rg, Op::MaxPool3d { x, argmax }))
    }

    /// (N, C, T, H, W) -> (N, T, C): mean over the spatial plane of every
    /// frame and channel.
    pub fn spatial_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(Error::shape("spatial_avg_pool", "input rank", format!("{:?}", xs)));
        }
        let (n, c, t, hw) = (xs[0], xs[1], xs[2], xs[3] * xs[4]);
        let mut y = vec![0.0; n * t * c];
        kernels::spatial_avg_pool(self.value(x), n, c, t, hw, &mut y);
        let rg = self.rg(x);
        Ok(self.push(vec![n, t, c], y, rg, Op::SpatialAvgPool { x }))
    }

    /// (N, C, T, H, W) -> (N, C).
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 5 {
            return Err(Error::shape("global_avg_pool", "input rank", format!("{:?}", xs)));
        }
        let (nc, inner) = (xs[0] * xs[1], xs[2] * xs[3] * xs[4]);
        let inv = 1.0 / inner as f64;
        let xv = self.value(x);
        let y: Vec<f64> = (0..nc).map(|i| xv[i * inner..][..inner].iter().sum::<f64>() * inv).collect();
        let rg = self.rg(x);
        Ok(self.push(vec![xs[0], xs[1]], y, rg, Op::GlobalAvgPool { x }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
            return Err(Error::shape("matmul", "inner", format!("{:?} x {:?}", as_, bs)));
        }
        let (m, k, n) = (as_[0], as_[1], bs[1]);
        let y = matmul_raw(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], y, rg, Op::MatMul { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::shape("transpose", "rank", format!("{:?}", s)));
        }
        let y = transpose_raw(self.value(a), s[0], s[1]);
        let rg = self.rg(a);
        Ok(self.push(vec![s[1], s[0]], y, rg, Op::Transpose { a }))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, "operands", format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(self.shape(a).to_vec())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("add", a, b)?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, y, rg, Op::Add { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("mul", a, b)?;
        let y = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(s, y, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let y = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, y, rg, Op::Scale { a, s })
    }

    /// Adds `bias` (length = last extent of `a`) to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let n = *s.last().expect("shapes are non-empty");
        if self.shape(bias) != [n] {
            return Err(Error::shape("add_bias", "bias", format!("{:?} onto {:?}", self.shape(bias), s)));
        }
        let bv = self.value(bias);
        let y = self.value(a).iter().enumerate().map(|(i, x)| x + bv[i % n]).collect();
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(s, y, rg, Op::AddBias { a, bias }))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let y = self.value(a).iter().map(|&x| f(x)).collect();
        let rg = self.rg(a);
        let shape = self.shape(a).to_vec();
        self.push(shape, y, rg, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, math::sigmoid, Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, math::tanh, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu { a })
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let n = *s.last().expect("shapes are non-empty");
        let av = self.value(a);
        if av.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax_last"));
        }
        let mut y = vec![0.0; av.len()];
        for (row, out) in av.chunks(n).zip(y.chunks_mut(n)) {
            softmax_row(row, out);
        }
        let rg = self.rg(a);
        Ok(self.push(s, y, rg, Op::SoftmaxLast { a }))
    }

    /// Concatenates two (N, a) and (N, b) matrices into (N, a + b).
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let (as_, bs) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if as_.len() != 2 || bs.len() != 2 || as_[0] != bs[0] {
            return Err(Error::shape("concat_last", "rows", format!("{:?} ++ {:?}", as_, bs)));
        }
        let (rows, ca, cb) = (as_[0], as_[1], bs[1]);
        let mut y = Vec::with_capacity(rows * (ca + cb));
        for r in 0..rows {
            y.extend_from_slice(&self.value(a)[r * ca..][..ca]);
            y.extend_from_slice(&self.value(b)[r * cb..][..cb]);
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![rows, ca + cb], y, rg, Op::ConcatLast { a, b }))
    }

    /// (N, T, C) -> (N, C) at time `t`.
    pub fn slice_time(&mut self, a: Var, t: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || t >= s[1] {
            return Err(Error::shape("slice_time", "frames", format!("t={} of {:?}", t, s)));
        }
        let (n, tt, c) = (s[0], s[1], s[2]);
        let av = self.value(a);
        let mut y = Vec::with_capacity(n * c);
        for ni in 0..n {
            y.extend_from_slice(&av[(ni * tt + t) * c..][..c]);
        }
        let rg = self.rg(a);
        Ok(self.push(vec![n, c], y, rg, Op::SliceTime { a, t }))
    }

    /// Stacks T (N, C) matrices into (N, T, C).
    pub fn stack_time(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("stack_time"))?;
        let s = self.shape(first).to_vec();
        if s.len() != 2 || parts.iter().any(|&p| self.shape(p) != s.as_slice()) {
            return Err(Error::shape("stack_time", "parts", format!("expected all {:?}", s)));
        }
        let (n, c, t) = (s[0], s[1], parts.len());
        let mut y = vec![0.0; n * t * c];
        for (ti, &p) in parts.iter().enumerate() {
            let pv = self.value(p);
            for ni in 0..n {
                y[(ni * t + ti) * c..][..c].copy_from_slice(&pv[ni * c..][..c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![n, t, c], y, rg, Op::StackTime { parts: parts.to_vec() }))
    }

    /// Per-channel batch norm over axis 1 of an (N, C, ...) tensor.
    ///
    /// With `running = None` the batch statistics are used and returned;
    /// otherwise the given (mean, var) are used as constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[f64], &[f64])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::shape("batch_norm", "input rank", format!("{:?}", s)));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::shape("batch_norm", "channels", format!("affine params must be [{}]", c)));
        }
        let (mean, var, stats) = match running {
            Some((m, v)) => {
                if m.len() != c || v.len() != c {
                    return Err(Error::shape("batch_norm", "running stats", format!("expected {} channels", c)));
                }
                (m.to_vec(), v.to_vec(), None)
            }
            None => {
                let st = kernels::bn_stats(self.value(x), n, c, inner);
                let stats = BatchStats {
                    mean: st.mean.clone(),
                    var: st.var.clone(),
                    count: n * inner,
                };
                (st.mean, st.var, Some(stats))
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / math::sqrt(v + eps)).collect();
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; xv.len()];
        let mut y = vec![0.0; xv.len()];
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * inner;
                for i in off..off + inner {
                    let h = (xv[i] - mean[ci]) * inv_std[ci];
                    xhat[i] = h;
                    y[i] = gv[ci] * h + bv[ci];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let training = running.is_none();
        let v = self.push(
            s,
            y,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            },
        );
        Ok((v, stats))
    }

    /// Fuses a (N, T, C) recurrent embedding into a (N, C, T, H, W) volume,
    /// broadcasting over H and W. Clips with `open[n] == false` pass through
    /// unchanged (bit-exact copy).
    pub fn fuse(&mut self, main: Var, rec: Var, mode: FusionMode, open: &[bool]) -> Result<Var> {
        let ms = self.shape(main).to_vec();
        let rs = self.shape(rec).to_vec();
        if ms.len() != 5 {
            return Err(Error::shape("fuse", "main rank", format!("{:?}", ms)));
        }
        if rs != [ms[0], ms[2], ms[1]] {
            return Err(Error::shape(
                "fuse",
                "recurrent",
                format!("expected (N,T,C) = {:?}, got {:?}", [ms[0], ms[2], ms[1]], rs),
            ));
        }
        if open.len() != ms[0] {
            return Err(Error::shape("fuse", "gate mask", format!("{} flags for {} clips", open.len(), ms[0])));
        }
        let (n, c, t, hw) = (ms[0], ms[1], ms[2], ms[3] * ms[4]);
        let (mv, rv) = (self.value(main), self.value(rec));
        let mut y = mv.to_vec();
        for ni in (0..n).filter(|&i| open[i]) {
            for ci in 0..c {
                for ti in 0..t {
                    let r = rv[(ni * t + ti) * c + ci];
                    let plane = &mut y[((ni * c + ci) * t + ti) * hw..][..hw];
                    match mode {
                        FusionMode::Multiplicative => {
                            let s = math::sigmoid(r);
                            plane.iter_mut().for_each(|v| *v *= s);
                        }
                        FusionMode::Additive => plane.iter_mut().for_each(|v| *v += r),
                    }
                }
            }
        }
        let rg = self.rg(main) || self.rg(rec);
        Ok(self.push(
            ms,
            y,
            rg,
            Op::Fuse {
                main,
                rec,
                mode,
                open: open.to_vec(),
            },
        ))
    }

    /// Mean cross-entropy of (N, K) logits against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape(
                "softmax_cross_entropy",
                "batch",
                format!("logits {:?}, {} labels", s, labels.len()),
            ));
        }
        let (n, k) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::InvalidArgument(format!("label {} out of range for {} classes", bad, k)));
        }
        let lv = self.value(logits);
        if lv.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("softmax_cross_entropy"));
        }
        let mut probs = vec![0.0; n * k];
        let mut loss = 0.0;
        for i in 0..n {
            let row = &lv[i * k..][..k];
            softmax_row(row, &mut probs[i * k..][..k]);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + math::ln(row.iter().map(|v| math::exp(v - max)).sum::<f64>());
            loss += lse - row[labels[i]];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss / n as f64],
            rg,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let y = self.value(a).iter().sum();
        let rg = self.rg(a);
        self.push(vec![1], vec![y], rg, Op::Sum { a })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let y = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(vec![1], vec![y], rg, Op::Mean { a })
    }

    // ----------------------------------------------------------- backward

    /// Differentiates the scalar `loss` with respect to every node that
    /// requires a gradient. Gradients from fan-out accumulate additively.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.rg(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.as_slice();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let node = &nodes[v.0];
            if node.requires_grad {
                let g = grads[v.0].get_or_insert_with(|| vec![0.0; node.value.len()]);
                f(g);
            }
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, dims } => {
                let mut gx = nodes[x.0].requires_grad.then(|| vec![0.0; nodes[x.0].value.len()]);
                let mut gw = nodes[w.0].requires_grad.then(|| vec![0.0; nodes[w.0].value.len()]);
                let mut gb = b.filter(|b| nodes[b.0].requires_grad).map(|_| vec![0.0; dims.co]);
                kernels::conv3d_backward(
                    dims,
                    val(*x),
                    val(*w),
                    gy,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                if let Some(gx) = gx {
                    acc(*x, &mut |g| add_into(g, &gx));
                }
                if let Some(gw) = gw {
                    acc(*w, &mut |g| add_into(g, &gw));
                }
                if let (Some(b), Some(gb)) = (b, gb) {
                    acc(*b, &mut |g| add_into(g, &gb));
                }
            }
            Op::MaxPool3d { x, argmax } => acc(*x, &mut |g| {
                for (o, &src) in argmax.iter().enumerate() {
                    g[src] += gy[o];
                }
            }),
            Op::SpatialAvgPool { x } => {
                let s = &nodes[x.0].shape;
                acc(*x, &mut |g| kernels::spatial_avg_pool_backward(gy, s[0], s[1], s[2], s[3] * s[4], g));
            }
            Op::GlobalAvgPool { x } => {
                let s = &nodes[x.0].shape;
                let inner = s[2] * s[3] * s[4];
                let inv = 1.0 / inner as f64;
                acc(*x, &mut |g| {
                    for (i, gv) in g.iter_mut().enumerate() {
                        *gv += gy[i / inner] * inv;
                    }
                });
            }
            Op::MatMul { a, b } => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if nodes[a.0].requires_grad {
                    let bt = transpose_raw(val(*b), k, n);
                    let ga = matmul_raw(gy, &bt, m, n, k);
                    acc(*a, &mut |g| add_into(g, &ga));
                }
                if nodes[b.0].requires_grad {
                    let at = transpose_raw(val(*a), m, k);
                    let gb = matmul_raw(&at, gy, k, m, n);
                    acc(*b, &mut |g| add_into(g, &gb));
                }
            }
            Op::Transpose { a } => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let ga = transpose_raw(gy, c, r);
                acc(*a, &mut |g| add_into(g, &ga));
            }
            Op::Add { a, b } => {
                acc(*a, &mut |g| add_into(g, gy));
                acc(*b, &mut |g| add_into(g, gy));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |g| {
                    for ((gv, d), o) in g.iter_mut().zip(gy).zip(bv) {
                        *gv += d * o;
                    }
                });
                acc(*b, &mut |g| {
                    for ((gv, d), o) in g.iter_mut().zip(gy).zip(av) {
                        *gv += d * o;
                    }
                });
            }
            Op::Scale { a, s } => acc(*a, &mut |g| {
                for (gv, d) in g.iter_mut().zip(gy) {
                    *gv += s * d;
                }
            }),
            Op::AddBias { a, bias } => {
                acc(*a, &mut |g| add_into(g, gy));
                let n = nodes[bias.0].value.len();
                acc(*bias, &mut |g| {
                    for (j, d) in gy.iter().enumerate() {
                        g[j % n] += d;
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = &nodes[i].value;
                acc(*a, &mut |g| {
                    for ((gv, d), s) in g.iter_mut().zip(gy).zip(y) {
                        *gv += d * s * (1.0 - s);
                    }
                });
            }
            Op::Tanh { a } => {
                let y = &nodes[i].value;
                acc(*a, &mut |g| {
                    for ((gv, d), t) in g.iter_mut().zip(gy).zip(y) {
                        *gv += d * (1.0 - t * t);
                    }
                });
            }
            Op::Relu { a } => {
                let xv = val(*a);
                acc(*a, &mut |g| {
                    for ((gv, d), x) in g.iter_mut().zip(gy).zip(xv) {
                        if *x > 0.0 {
                            *gv += d;
                        }
                    }
                });
            }
            Op::SoftmaxLast { a } => {
                let y = &nodes[i].value;
                let n = *nodes[i].shape.last().expect("non-empty");
                acc(*a, &mut |g| {
                    for ((gr, dr), yr) in g.chunks_mut(n).zip(gy.chunks(n)).zip(y.chunks(n)) {
                        let dot: f64 = dr.iter().zip(yr).map(|(d, y)| d * y).sum();
                        for ((gv, d), y) in gr.iter_mut().zip(dr).zip(yr) {
                            *gv += y * (d - dot);
                        }
                    }
                });
            }
            Op::ConcatLast { a, b } => {
                let (ca, cb) = (nodes[a.0].shape[1], nodes[b.0].shape[1]);
                let w = ca + cb;
                acc(*a, &mut |g| {
                    for (r, gr) in g.chunks_mut(ca).enumerate() {
                        add_into(gr, &gy[r * w..][..ca]);
                    }
                });
                acc(*b, &mut |g| {
                    for (r, gr) in g.chunks_mut(cb).enumerate() {
                        add_into(gr, &gy[r * w + ca..][..cb]);
                    }
                });
            }
            Op::SliceTime { a, t } => {
                let s = &nodes[a.0].shape;
                let (n, tt, c) = (s[0], s[1], s[2]);
                acc(*a, &mut |g| {
                    for ni in 0..n {
                        add_into(&mut g[(ni * tt + t) * c..][..c], &gy[ni * c..][..c]);
                    }
                });
            }
            Op::StackTime { parts } => {
                let s = &nodes[i].shape;
                let (n, t, c) = (s[0], s[1], s[2]);
                for (ti, &p) in parts.iter().enumerate() {
                    acc(p, &mut |g| {
                        for ni in 0..n {
                            add_into(&mut g[ni * c..][..c], &gy[(ni * t + ti) * c..][..c]);
                        }
                    });
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                training,
            } => {
                let s = &nodes[x.0].shape;
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let gv = val(*gamma);
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * inner;
                        for j in off..off + inner {
                            sum_dy[ci] += gy[j];
                            sum_dy_xhat[ci] += gy[j] * xhat[j];
                        }
                    }
                }
                acc(*gamma, &mut |g| add_into(g, &sum_dy_xhat));
                acc(*beta, &mut |g| add_into(g, &sum_dy));
                let m = (n * inner) as f64;
                acc(*x, &mut |g| {
                    for ni in 0..n {
                        for ci in 0..c {
                            let off = (ni * c + ci) * inner;
                            let k = gv[ci] * inv_std[ci];
                            for j in off..off + inner {
                                g[j] += if *training {
                                    k * (gy[j] - sum_dy[ci] / m - xhat[j] * sum_dy_xhat[ci] / m)
                                } else {
                                    k * gy[j]
                                };
                            }
                        }
                    }
                });
            }
            Op::Fuse { main, rec, mode, open } => {
                let s = &nodes[main.0].shape;
                let (n, c, t, hw) = (s[0], s[1], s[2], s[3] * s[4]);
                let (mv, rv) = (val(*main), val(*rec));
                acc(*main, &mut |g| {
                    for ni in 0..n {
                        for ci in 0..c {
                            for ti in 0..t {
                                let off = ((ni * c + ci) * t + ti) * hw;
                                let (gp, dp) = (&mut g[off..][..hw], &gy[off..][..hw]);
                                if open[ni] && *mode == FusionMode::Multiplicative {
                                    let sg = math::sigmoid(rv[(ni * t + ti) * c + ci]);
                                    for (gv, d) in gp.iter_mut().zip(dp) {
                                        *gv += d * sg;
                                    }
                                } else {
                                    add_into(gp, dp);
                                }
                            }
                        }
                    }
                });
                acc(*rec, &mut |g| {
                    for ni in (0..n).filter(|&i| open[i]) {
                        for ci in 0..c {
                            for ti in 0..t {
                                let off = ((ni * c + ci) * t + ti) * hw;
                                let ri = (ni * t + ti) * c + ci;
                                match mode {
                                    FusionMode::Multiplicative => {
                                        let dot: f64 =
                                            gy[off..][..hw].iter().zip(&mv[off..][..hw]).map(|(d, m)| d * m).sum();
                                        let sg = math::sigmoid(rv[ri]);
                                        g[ri] += dot * sg * (1.0 - sg);
                                    }
                                    FusionMode::Additive => {
                                        g[ri] += gy[off..][..hw].iter().sum::<f64>();
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                let k = nodes[logits.0].shape[1];
                let scale = gy[0] / labels.len() as f64;
                acc(*logits, &mut |g| {
                    for (r, &l) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == l { 1.0 } else { 0.0 };
                            g[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                });
            }
            Op::Sum { a } => acc(*a, &mut |g| g.iter_mut().for_each(|v| *v += gy[0])),
            Op::Mean { a } => {
                let inv = 1.0 / nodes[a.0].value.len() as f64;
                acc(*a, &mut |g| g.iter_mut().for_each(|v| *v += gy[0] * inv));
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub(crate) fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, v) in out.iter_mut().zip(row) {
        *o = math::exp(v - max);
        s += *o;
    }
    out.iter_mut().for_each(|o| *o /= s);
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    for i in 0..m {
        let yr = &mut y[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            for (yv, bv) in yr.iter_mut().zip(&b[p * n..][..n]) {
                *yv += av * bv;
            }
        }
    }
    y
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut y = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            y[j * r + i] = a[i * c + j];
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros(&[3]).unwrap());
        let s = g.sigmoid(x);
        assert_eq!(g.value(s), &[0.5; 3]);
        let l = g.sum(s);
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.25; 3]);
    }

    #[test]
    fn tanh_zero() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(&[1]).unwrap());
        let y = g.tanh(x);
        assert_eq!(g.value(y), &[0.0]);
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(&[3]).unwrap());
        let y = g.softmax_last(x).unwrap();
        for v in g.value(y) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1.5, -0.5]));
        let y = g.add(x, x).unwrap();
        let z = g.mul(y, x).unwrap();
        let l = g.sum(z);
        g.backward(l).unwrap();
        // d/dx of 2x^2 = 4x
        assert_eq!(g.grad(x).unwrap(), &[6.0, -2.0]);
    }

    #[test]
    fn backward_errors() {
        let mut g = Graph::new();
        let x = g.param(&t(&[2], &[1.0, 2.0]));
        assert_eq!(g.backward(x), Err(Error::NonScalarLoss(alloc::vec![2])));
        let l = g.sum(x);
        g.backward(l).unwrap();
        assert_eq!(g.backward(l), Err(Error::GraphConsumed));
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..24).map(|i| i as f64 * 0.25 - 1.0).collect();
        let x = g.input(&t(&[1, 1, 2, 3, 4], &data));
        let w = g.input(&t(&[1, 1, 1, 1, 1], &[1.0]));
        let b = g.input(&t(&[1], &[0.0]));
        let y = g.conv3d(x, w, Some(b), Conv3dGeom::default()).unwrap();
        assert_eq!(g.value(y), data.as_slice());
    }

    #[test]
    fn conv_sum_of_ones() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::full(&[1, 1, 3, 3, 3], 1.0).unwrap());
        let w = g.input(&Tensor::full(&[1, 1, 3, 3, 3], 1.0).unwrap());
        let y = g.conv3d(x, w, None, Conv3dGeom::default()).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1, 1]);
        assert_eq!(g.value(y), &[27.0]);
    }

    #[test]
    fn conv_shape_errors() {
        let mut g = Graph::new();
        let x = g.input(&Tensor::zeros(&[1, 2, 2, 2, 2]).unwrap());
        let w = g.input(&Tensor::zeros(&[1, 3, 1, 1, 1]).unwrap());
        match g.conv3d(x, w, None, Conv3dGeom::default()) {
            Err(Error::ShapeMismatch { dim, .. }) => assert_eq!(dim, "in_channels"),
            other => panic!("unexpected {:?}", other),
        }
        let w = g.input(&Tensor::zeros(&[1, 2, 3, 1, 1]).unwrap());
        assert_eq!(
            g.conv3d(x, w, None, Conv3dGeom::default()),
            Err(Error::EmptyOutput { op: "conv3d", dim: "frames" })
        );
    }

    #[test]
    fn spatial_pool_constants() {
        let mut g = Graph::new();
        let mut data = alloc::vec![1.0; 4];
        data.extend([3.0; 4]);
        let x = g.input(&t(&[1, 1, 2, 2, 2], &data));
        let y = g.spatial_avg_pool(x).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 1]);
        assert_eq!(g.value(y), &[1.0, 3.0]);
    }

    #[test]
    fn fuse_closed_clip_is_copy() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..16).map(|i| (i as f64).sin()).collect();
        let m = g.input(&t(&[2, 1, 2, 2, 2], &data));
        let r = g.input(&t(&[2, 2, 1], &[0.3, -0.2, 0.0, 0.0]));
        let y = g.fuse(m, r, FusionMode::Multiplicative, &[false, true]).unwrap();
        assert_eq!(&g.value(y)[..8], &data[..8]);
        for (a, b) in g.value(y)[8..].iter().zip(&data[8..]) {
            assert_eq!(*a, 0.5 * b);
        }
    }

    #[test]
    fn cross_entropy_uniform() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros(&[2, 4]).unwrap());
        let l = g.softmax_cross_entropy(x, &[0, 3]).unwrap();
        assert!((g.value(l)[0] - libm::log(4.0)).abs() < 1e-14);
        g.backward(l).unwrap();
        let gr = g.grad(x).unwrap();
        assert!((gr[0] - (0.25 - 1.0) / 2.0).abs() < 1e-15);
        assert!((gr[1] - 0.125).abs() < 1e-15);
    }
}
