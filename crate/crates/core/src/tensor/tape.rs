use super::conv::{col2im_add, col2im_add_ld, im2col, im2col_ld, ConvGeom};
use super::{numel, Real};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Tanh,
    Sigmoid,
    Softplus,
    Exp,
    Log,
    Square,
    Neg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Min,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Dense {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
        // im2col of every batch item; kept only when the kernel needs a gradient
        cols: Vec<T>,
    },
    Deconv {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    Unary {
        x: Var,
        f: Unary,
    },
    Binary {
        a: Var,
        b: Var,
        f: Binary,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Shift {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    SumRows {
        x: Var,
        cols: usize,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        rows: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
        total: usize,
    },
    Clamp {
        x: Var,
        lo: T,
        hi: T,
    },
    Crop {
        x: Var,
        planes: usize,
        in_h: usize,
        in_w: usize,
        top: usize,
        left: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    grad: Option<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Debug)]
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        let n = &self.nodes[v.0];
        debug_assert_eq!(n.value.len(), 1, "scalar() on non-scalar node");
        n.value[0]
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            grad: None,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Vec<T>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if numel(shape) != value.len() {
            return Err(Error::shape("leaf", shape, &[value.len()]));
        }
        Ok(self.push(shape.to_vec(), value, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, value: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape, false)
    }

    pub fn variable(&mut self, value: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape, true)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, value) = (n.shape.clone(), n.value.clone());
        self.push(shape, value, Op::Leaf, false)
    }

    /// `x · w + b` for `x: [rows, in]`, `w: [in, out]`, `b: [out]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let ws = self.shape(w);
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::shape("dense", xs, ws));
        }
        let (rows, inp, out) = (xs[0], xs[1], ws[1]);
        let mut y = vec![T::zero(); rows * out];
        if let Some(b) = b {
            let bs = self.shape(b);
            if bs != [out] {
                return Err(Error::shape("dense bias", bs, &[out]));
            }
            let bv = self.value(b);
            for row in y.chunks_exact_mut(out) {
                row.copy_from_slice(bv);
            }
        }
        T::gemm(rows, inp, out, self.value(x), false, self.value(w), false, &mut y, b.is_some());
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(vec![rows, out], y, Op::Dense { x, w, b }, rg))
    }

    /// 2D convolution of `x: [B, C, H, W]` with `k: [O, C, kh, kw]`.
    ///
    /// Output spatial size is `floor((in + 2·pad − kernel) / stride) + 1`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || stride == 0 {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ks[0], ks[2], ks[3]);
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape("conv2d", &xs, &ks));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (w + 2 * pad - kw) / stride + 1,
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[o]));
            }
        }
        // The whole batch goes through one GEMM: columns of image `bi` occupy
        // `bi·ncols..(bi+1)·ncols` of a `[rows, batch·ncols]` matrix.
        let (rows, ncols) = (geom.rows(), geom.cols());
        let wide = batch * ncols;
        let mut cols = vec![T::zero(); rows * wide];
        let xv = &self.nodes[x.0].value;
        for bi in 0..batch {
            im2col_ld(&geom, &xv[bi * geom.image_len()..(bi + 1) * geom.image_len()], &mut cols[bi * ncols..], wide);
        }
        let mut yt = vec![T::zero(); o * wide];
        T::gemm(o, rows, wide, &self.nodes[k.0].value, false, &cols, false, &mut yt, false);
        let bv = b.map(|b| self.nodes[b.0].value.as_slice());
        let mut y = vec![T::zero(); batch * o * ncols];
        for (bi, yb) in y.chunks_exact_mut(o * ncols).enumerate() {
            for (oc, row) in yb.chunks_exact_mut(ncols).enumerate() {
                row.copy_from_slice(&yt[oc * wide + bi * ncols..][..ncols]);
                if let Some(bv) = bv {
                    row.iter_mut().for_each(|v| *v += bv[oc]);
                }
            }
        }
        if !self.rg(k) {
            cols = Vec::new();
        }
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        let shape = vec![batch, o, geom.out_h, geom.out_w];
        Ok(self.push(
            shape,
            y,
            Op::Conv {
                x,
                k,
                b,
                geom,
                batch,
                cols,
            },
            rg,
        ))
    }

    /// Transposed convolution of `x: [B, C, H, W]` with `k: [C, O, kh, kw]`.
    ///
    /// Output spatial size is `(in − 1)·stride − 2·pad + kernel`, the exact
    /// inverse of [`Tape::conv2d`]'s size rule.
    pub fn deconv2d(&mut self, x: Var, k: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(k).to_vec();
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[0] || stride == 0 {
            return Err(Error::shape("deconv2d", &xs, &ks));
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, kh, kw) = (ks[1], ks[2], ks[3]);
        let full_h = (h.max(1) - 1) * stride + kh;
        let full_w = (w.max(1) - 1) * stride + kw;
        if h == 0 || w == 0 || full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(Error::shape("deconv2d", &xs, &ks));
        }
        let geom = ConvGeom {
            channels: o,
            height: full_h - 2 * pad,
            width: full_w - 2 * pad,
            kh,
            kw,
            stride,
            pad,
            out_h: h,
            out_w: w,
        };
        if let Some(b) = b {
            if self.shape(b) != [o] {
                return Err(Error::shape("deconv2d bias", self.shape(b), &[o]));
            }
        }
        let (rows, ncols, img) = (geom.rows(), geom.cols(), geom.image_len());
        let mut cols = vec![T::zero(); rows * ncols];
        let mut y = vec![T::zero(); batch * img];
        let xv = &self.nodes[x.0].value;
        let kv = &self.nodes[k.0].value;
        let bv = b.map(|b| self.nodes[b.0].value.as_slice());
        let plane = geom.height * geom.width;
        for bi in 0..batch {
            T::gemm(rows, c, ncols, kv, true, &xv[bi * c * ncols..(bi + 1) * c * ncols], false, &mut cols, false);
            let yb = &mut y[bi * img..(bi + 1) * img];
            col2im_add(&geom, &cols, yb);
            if let Some(bv) = bv {
                for (p, &bias) in yb.chunks_exact_mut(plane).zip(bv) {
                    p.iter_mut().for_each(|v| *v += bias);
                }
            }
        }
        let rg = self.rg(x) || self.rg(k) || b.is_some_and(|b| self.rg(b));
        let shape = vec![batch, o, geom.height, geom.width];
        Ok(self.push(
            shape,
            y,
            Op::Deconv {
                x,
                k,
                b,
                geom,
                batch,
            },
            rg,
        ))
    }

    fn unary(&mut self, x: Var, f: Unary) -> Var {
        let xv = self.value(x);
        let y: Vec<T> = match f {
            Unary::Relu => xv.iter().map(|&v| v.max(T::zero())).collect(),
            Unary::Tanh => xv.iter().map(|&v| v.tanh()).collect(),
            Unary::Sigmoid => xv.iter().map(|&v| sigmoid(v)).collect(),
            Unary::Softplus => xv.iter().map(|&v| softplus(v)).collect(),
            Unary::Exp => xv.iter().map(|&v| v.exp()).collect(),
            Unary::Log => xv.iter().map(|&v| v.ln()).collect(),
            Unary::Square => xv.iter().map(|&v| v * v).collect(),
            Unary::Neg => xv.iter().map(|&v| -v).collect(),
        };
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, y, Op::Unary { x, f }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    fn binary(&mut self, a: Var, b: Var, f: Binary) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            let name = match f {
                Binary::Add => "add",
                Binary::Sub => "sub",
                Binary::Mul => "mul",
                Binary::Min => "min2",
            };
            return Err(Error::shape(name, self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let y: Vec<T> = av
            .iter()
            .zip(bv)
            .map(|(&p, &q)| match f {
                Binary::Add => p + q,
                Binary::Sub => p - q,
                Binary::Mul => p * q,
                Binary::Min => {
                    if p <= q {
                        p
                    } else {
                        q
                    }
                }
            })
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, y, Op::Binary { a, b, f }, rg))
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

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn min2(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Min)
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x).iter().map(|&v| v * factor).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, y, Op::Scale { x, factor }, rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let y = self.value(x).iter().map(|&v| v + c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, y, Op::Shift { x }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum { x }, rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s: T = xv.iter().copied().sum::<T>() / T::lit(xv.len().max(1) as f64);
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Mean { x }, rg)
    }

    /// `[rows, cols] → [rows, 1]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(Error::shape("sum_rows", xs, &[]));
        }
        let (rows, cols) = (xs[0], xs[1]);
        let y = self.value(x).chunks_exact(cols.max(1)).map(|r| r.iter().copied().sum()).collect();
        let y = if cols == 0 { vec![T::zero(); rows] } else { y };
        let rg = self.rg(x);
        Ok(self.push(vec![rows, 1], y, Op::SumRows { x, cols }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != numel(self.shape(x)) {
            return Err(Error::shape("reshape", self.shape(x), shape));
        }
        let y = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), y, Op::Reshape { x }, rg))
    }

    /// Concatenate 2D nodes along their second axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::shape("concat", &[], &[]));
        };
        let rows = self.shape(first).first().copied().unwrap_or(0);
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::shape("concat", self.shape(first), s));
            }
            widths.push((p, s[1]));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut y = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, w) in &widths {
                y.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, total], y, Op::Concat { parts: widths, rows }, rg))
    }

    /// Columns `start..start + width` of a 2D node.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || start + width > xs[1] {
            return Err(Error::shape("slice_cols", xs, &[start, width]));
        }
        let (rows, total) = (xs[0], xs[1]);
        let xv = self.value(x);
        let mut y = Vec::with_capacity(rows * width);
        for r in 0..rows {
            y.extend_from_slice(&xv[r * total + start..r * total + start + width]);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![rows, width], y, Op::SliceCols { x, start, total }, rg))
    }

    /// Elementwise clamp; the gradient passes only inside `[lo, hi]`.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let y = self.value(x).iter().map(|&v| v.max(lo).min(hi)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(shape, y, Op::Clamp { x, lo, hi }, rg)
    }

    /// Spatial crop of `[B, C, H, W]` to `[B, C, h, w]` at `(top, left)`.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 4 || top + h > xs[2] || left + w > xs[3] {
            return Err(Error::shape("crop2d", xs, &[top, left, h, w]));
        }
        let (planes, in_h, in_w) = (xs[0] * xs[1], xs[2], xs[3]);
        let out_shape = vec![xs[0], xs[1], h, w];
        let xv = self.value(x);
        let mut y = Vec::with_capacity(planes * h * w);
        for p in 0..planes {
            for r in 0..h {
                let s = p * in_h * in_w + (top + r) * in_w + left;
                y.extend_from_slice(&xv[s..s + w]);
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            out_shape,
            y,
            Op::Crop {
                x,
                planes,
                in_h,
                in_w,
                top,
                left,
            },
            rg,
        ))
    }

    /// Branch pattern of every piecewise operator on the tape (relu sign,
    /// min2 selection, clamp saturation). Two evaluations with equal
    /// signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            match &n.op {
                Op::Unary { x, f: Unary::Relu } => {
                    sig.extend(self.value(*x).iter().map(|&v| v > T::zero()));
                }
                Op::Binary { a, b, f: Binary::Min } => {
                    sig.extend(self.value(*a).iter().zip(self.value(*b)).map(|(p, q)| p <= q));
                }
                Op::Clamp { x, lo, hi } => {
                    for &v in self.value(*x) {
                        sig.push(v < *lo);
                        sig.push(v > *hi);
                    }
                }
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from a single-element node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward", &self.nodes[loss.0].shape, &[1]));
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            propagate(node, g, before);
        }
        Ok(())
    }
}

fn sigmoid<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(v: T) -> T {
    v.max(T::zero()) + (-v.abs()).exp().ln_1p()
}

fn accumulate<T: Real>(nodes: &mut [Node<T>], v: Var, contrib: &[T]) {
    let n = &mut nodes[v.0];
    match &mut n.grad {
        Some(g) => g.iter_mut().zip(contrib).for_each(|(g, &c)| *g += c),
        None => n.grad = Some(contrib.to_vec()),
    }
}

fn wants<T: Real>(nodes: &[Node<T>], v: Var) -> bool {
    nodes[v.0].requires_grad
}

fn bias_grad<T: Real>(g: &[T], batch: usize, channels: usize, plane: usize) -> Vec<T> {
    let mut db = vec![T::zero(); channels];
    for bi in 0..batch {
        for (c, d) in db.iter_mut().enumerate() {
            let s = (bi * channels + c) * plane;
            *d += g[s..s + plane].iter().copied().sum::<T>();
        }
    }
    db
}

fn propagate<T: Real>(node: &Node<T>, g: &[T], nodes: &mut [Node<T>]) {
    match &node.op {
        Op::Leaf => {}
        Op::Dense { x, w, b } => {
            let (rows, inp) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
            let out = nodes[w.0].shape[1];
            if wants(nodes, *x) {
                let mut dx = vec![T::zero(); rows * inp];
                T::gemm(rows, out, inp, g, false, &nodes[w.0].value, true, &mut dx, false);
                accumulate(nodes, *x, &dx);
            }
            if wants(nodes, *w) {
                let mut dw = vec![T::zero(); inp * out];
                T::gemm(inp, rows, out, &nodes[x.0].value, true, g, false, &mut dw, false);
                accumulate(nodes, *w, &dw);
            }
            if let Some(b) = b.filter(|b| wants(nodes, *b)) {
                accumulate(nodes, b, &bias_grad(g, rows, out, 1));
            }
        }
        Op::Conv {
            x,
            k,
            b,
            geom,
            batch,
            cols,
        } => {
            let (rows, ncols, img) = (geom.rows(), geom.cols(), geom.image_len());
            let o = nodes[k.0].shape[0];
            let wide = batch * ncols;
            let need_k = wants(nodes, *k);
            let need_x = wants(nodes, *x);
            // output gradient regrouped as [o, batch·ncols]
            let mut gt = Vec::new();
            if need_k || need_x {
                gt = vec![T::zero(); o * wide];
                for (bi, gb) in g.chunks_exact(o * ncols).enumerate() {
                    for (oc, row) in gb.chunks_exact(ncols).enumerate() {
                        gt[oc * wide + bi * ncols..][..ncols].copy_from_slice(row);
                    }
                }
            }
            if need_k {
                let mut dk = vec![T::zero(); o * rows];
                T::gemm(o, wide, rows, &gt, false, cols, true, &mut dk, false);
                accumulate(nodes, *k, &dk);
            }
            if need_x {
                let mut dcols = vec![T::zero(); rows * wide];
                T::gemm(rows, o, wide, &nodes[k.0].value, true, &gt, false, &mut dcols, false);
                let mut dx = vec![T::zero(); batch * img];
                for (bi, dxb) in dx.chunks_exact_mut(img).enumerate() {
                    col2im_add_ld(geom, &dcols[bi * ncols..], dxb, wide);
                }
                accumulate(nodes, *x, &dx);
            }
            if let Some(b) = b.filter(|b| wants(nodes, *b)) {
                accumulate(nodes, b, &bias_grad(g, *batch, o, ncols));
            }
        }
        Op::Deconv { x, k, b, geom, batch } => {
            let (rows, ncols, img) = (geom.rows(), geom.cols(), geom.image_len());
            let c = nodes[x.0].shape[1];
            let mut dcols = vec![T::zero(); rows * ncols];
            let need_x = wants(nodes, *x);
            let need_k = wants(nodes, *k);
            let mut dx = if need_x { vec![T::zero(); batch * c * ncols] } else { Vec::new() };
            let mut dk = if need_k { vec![T::zero(); c * rows] } else { Vec::new() };
            if need_x || need_k {
                for bi in 0..*batch {
                    im2col(geom, &g[bi * img..(bi + 1) * img], &mut dcols);
                    if need_x {
                        T::gemm(
                            c,
                            rows,
                            ncols,
                            &nodes[k.0].value,
                            false,
                            &dcols,
                            false,
                            &mut dx[bi * c * ncols..(bi + 1) * c * ncols],
                            false,
                        );
                    }
                    if need_k {
                        T::gemm(
                            c,
                            ncols,
                            rows,
                            &nodes[x.0].value[bi * c * ncols..(bi + 1) * c * ncols],
                            false,
                            &dcols,
                            true,
                            &mut dk,
                            true,
                        );
                    }
                }
            }
            if need_x {
                accumulate(nodes, *x, &dx);
            }
            if need_k {
                accumulate(nodes, *k, &dk);
            }
            if let Some(b) = b.filter(|b| wants(nodes, *b)) {
                accumulate(nodes, b, &bias_grad(g, *batch, geom.channels, geom.height * geom.width));
            }
        }
        Op::Unary { x, f } => {
            if !wants(nodes, *x) {
                return;
            }
            let xv = &nodes[x.0].value;
            let y = &node.value;
            let d: Vec<T> = match f {
                Unary::Relu => xv
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
                Unary::Tanh => y.iter().zip(g).map(|(&y, &g)| g * (T::one() - y * y)).collect(),
                Unary::Sigmoid => y.iter().zip(g).map(|(&y, &g)| g * y * (T::one() - y)).collect(),
                Unary::Softplus => xv.iter().zip(g).map(|(&v, &g)| g * sigmoid(v)).collect(),
                Unary::Exp => y.iter().zip(g).map(|(&y, &g)| g * y).collect(),
                Unary::Log => xv.iter().zip(g).map(|(&v, &g)| g / v).collect(),
                Unary::Square => xv.iter().zip(g).map(|(&v, &g)| g * (v + v)).collect(),
                Unary::Neg => g.iter().map(|&g| -g).collect(),
            };
            accumulate(nodes, *x, &d);
        }
        Op::Binary { a, b, f } => {
            let (a, b) = (*a, *b);
            let (da, db): (Option<Vec<T>>, Option<Vec<T>>) = {
                let av = &nodes[a.0].value;
                let bv = &nodes[b.0].value;
                let need_a = wants(nodes, a);
                let need_b = wants(nodes, b);
                match f {
                    Binary::Add => (need_a.then(|| g.to_vec()), need_b.then(|| g.to_vec())),
                    Binary::Sub => (need_a.then(|| g.to_vec()), need_b.then(|| g.iter().map(|&g| -g).collect())),
                    Binary::Mul => (
                        need_a.then(|| g.iter().zip(bv).map(|(&g, &q)| g * q).collect()),
                        need_b.then(|| g.iter().zip(av).map(|(&g, &p)| g * p).collect()),
                    ),
                    Binary::Min => {
                        let pick: Vec<bool> = av.iter().zip(bv).map(|(p, q)| p <= q).collect();
                        (
                            need_a.then(|| g.iter().zip(&pick).map(|(&g, &s)| if s { g } else { T::zero() }).collect()),
                            need_b.then(|| g.iter().zip(&pick).map(|(&g, &s)| if s { T::zero() } else { g }).collect()),
                        )
                    }
                }
            };
            if let Some(da) = da {
                accumulate(nodes, a, &da);
            }
            if let Some(db) = db {
                accumulate(nodes, b, &db);
            }
        }
        Op::Scale { x, factor } => {
            if wants(nodes, *x) {
                let d: Vec<T> = g.iter().map(|&g| g * *factor).collect();
                accumulate(nodes, *x, &d);
            }
        }
        Op::Shift { x } | Op::Reshape { x } => {
            if wants(nodes, *x) {
                accumulate(nodes, *x, g);
            }
        }
        Op::Sum { x } => {
            if wants(nodes, *x) {
                let d = vec![g[0]; nodes[x.0].value.len()];
                accumulate(nodes, *x, &d);
            }
        }
        Op::Mean { x } => {
            if wants(nodes, *x) {
                let n = nodes[x.0].value.len();
                let d = vec![g[0] / T::lit(n.max(1) as f64); n];
                accumulate(nodes, *x, &d);
            }
        }
        Op::SumRows { x, cols } => {
            if wants(nodes, *x) {
                let d: Vec<T> = g.iter().flat_map(|&g| std::iter::repeat(g).take(*cols)).collect();
                accumulate(nodes, *x, &d);
            }
        }
        Op::Concat { parts, rows } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(p, w) in parts {
                if wants(nodes, p) {
                    let mut d = Vec::with_capacity(rows * w);
                    for r in 0..*rows {
                        d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    accumulate(nodes, p, &d);
                }
                offset += w;
            }
        }
        Op::SliceCols { x, start, total } => {
            if wants(nodes, *x) {
                let width = node.shape[1];
                let rows = node.shape[0];
                let mut d = vec![T::zero(); rows * total];
                for r in 0..rows {
                    d[r * total + start..r * total + start + width].copy_from_slice(&g[r * width..(r + 1) * width]);
                }
                accumulate(nodes, *x, &d);
            }
        }
        Op::Clamp { x, lo, hi } => {
            if wants(nodes, *x) {
                let d: Vec<T> = nodes[x.0]
                    .value
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| if v >= *lo && v <= *hi { g } else { T::zero() })
                    .collect();
                accumulate(nodes, *x, &d);
            }
        }
        Op::Crop {
            x,
            planes,
            in_h,
            in_w,
            top,
            left,
        } => {
            if wants(nodes, *x) {
                let (h, w) = (node.shape[2], node.shape[3]);
                let mut d = vec![T::zero(); planes * in_h * in_w];
                for p in 0..*planes {
                    for r in 0..h {
                        let s = p * in_h * in_w + (top + r) * in_w + left;
                        d[s..s + w].copy_from_slice(&g[(p * h + r) * w..(p * h + r + 1) * w]);
                    }
                }
                accumulate(nodes, *x, &d);
            }
        }
    }
}
