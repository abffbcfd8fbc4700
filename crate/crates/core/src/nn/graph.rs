//! Tape-based reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of that scalar with respect to every node that requires one.
//! Nodes created with [`Graph::constant`] never receive gradients, and no
//! gradient work is done for subgraphs that depend only on constants.

use matrixmultiply::dgemm;

/// Dense row-major tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor data does not match shape {shape:?}");
        Self { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Dimensions of a 4-D `[N, C, H, W]` tensor.
    pub fn dims4(&self) -> (usize, usize, usize, usize) {
        assert_eq!(self.shape.len(), 4, "expected NCHW tensor, got {:?}", self.shape);
        (self.shape[0], self.shape[1], self.shape[2], self.shape[3])
    }
}

/// Handle to a node on a [`Graph`].
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
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        // im2col buffers per batch element, kept only when the weight needs a gradient
        cols: Option<Vec<f64>>,
    },
    Upsample2x(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddChannel(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    LeakyRelu(Var, f64),
    Tanh(Var),
    Concat(Var, Var),
    Affine(Var, f64),
    MeanSqDev(Var, f64),
    MeanAbsDiff(Var, Var),
    Dot(Var, Vec<f64>),
    WeightedSum(Vec<(Var, f64)>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Concatenates the gradients of `vars` in order; missing gradients are zeros.
    pub fn flatten(&self, vars: &[Var], sizes: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(sizes.iter().sum());
        for (v, &n) in vars.iter().zip(sizes) {
            match self.get(*v) {
                Some(g) => out.extend_from_slice(g),
                None => out.extend(std::iter::repeat_n(0.0, n)),
            }
        }
        out
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// 2-D convolution with square kernels. `x: [N,Cin,H,W]`, `w: [Cout,Cin,k,k]`, `b: [Cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (n, cin, h, wd) = self.value(x).dims4();
        let ws = &self.value(w).shape;
        assert_eq!(ws.len(), 4);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(wcin, cin, "conv2d channel mismatch");
        assert_eq!(self.value(b).len(), cout);
        assert!(h + 2 * pad >= kh && wd + 2 * pad >= kw, "kernel larger than padded input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let k = cin * kh * kw;
        let p = ho * wo;
        let geom = ConvGeom { cin, h, w: wd, kh, kw, ho, wo, stride, pad };
        let keep_cols = self.needs(w);
        let mut cols_all = if keep_cols { Vec::with_capacity(n * k * p) } else { Vec::new() };
        let mut out = vec![0.0; n * cout * p];
        let mut cols = vec![0.0; k * p];
        {
            let xv = &self.value(x).data;
            let wv = &self.value(w).data;
            let bv = &self.value(b).data;
            for s in 0..n {
                im2col(&xv[s * cin * h * wd..(s + 1) * cin * h * wd], &geom, &mut cols);
                let o = &mut out[s * cout * p..(s + 1) * cout * p];
                for (co, row) in o.chunks_mut(p).enumerate() {
                    row.fill(bv[co]);
                }
                unsafe {
                    dgemm(
                        cout,
                        k,
                        p,
                        1.0,
                        wv.as_ptr(),
                        k as isize,
                        1,
                        cols.as_ptr(),
                        p as isize,
                        1,
                        1.0,
                        o.as_mut_ptr(),
                        p as isize,
                        1,
                    );
                }
                if keep_cols {
                    cols_all.extend_from_slice(&cols);
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let cols = keep_cols.then_some(cols_all);
        self.push(Tensor::new(vec![n, cout, ho, wo], out), Op::Conv2d { x, w, b, stride, pad, cols }, needs)
    }

    /// Nearest-neighbour 2x upsampling of an NCHW tensor.
    pub fn upsample2x(&mut self, x: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        let xv = &self.value(x).data;
        let (h2, w2) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * h2 * w2];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * h2 * w2..(plane + 1) * h2 * w2];
            for r in 0..h2 {
                let srow = &src[(r / 2) * w..(r / 2 + 1) * w];
                let drow = &mut dst[r * w2..(r + 1) * w2];
                for (cidx, d) in drow.iter_mut().enumerate() {
                    *d = srow[cidx / 2];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new(vec![n, c, h2, w2], out), Op::Upsample2x(x), needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "add shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x + y).collect();
        let shape = av.shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "sub shape mismatch");
        let data = av.data.iter().zip(&bv.data).map(|(x, y)| x - y).collect();
        let shape = av.shape.clone();
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(shape, data), Op::Sub(a, b), needs)
    }

    /// Adds a per-sample, per-channel vector `v: [N,C]` to every pixel of `x: [N,C,H,W]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let (n, c, h, w) = self.value(x).dims4();
        assert_eq!(self.value(v).shape, vec![n, c], "add_channel shape mismatch");
        let mut data = self.value(x).data.clone();
        let vv = &self.value(v).data;
        for (plane, chunk) in data.chunks_mut(h * w).enumerate() {
            let add = vv[plane];
            chunk.iter_mut().for_each(|d| *d += add);
        }
        let needs = self.needs(x) || self.needs(v);
        self.push(Tensor::new(vec![n, c, h, w], data), Op::AddChannel(x, v), needs)
    }

    /// Dense layer: `x: [N,Din]`, `w: [Dout,Din]`, `b: [Dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = &self.value(x).shape;
        assert_eq!(xs.len(), 2);
        let (n, din) = (xs[0], xs[1]);
        let ws = &self.value(w).shape;
        assert_eq!(ws[1], din, "linear input mismatch");
        let dout = ws[0];
        let mut out = vec![0.0; n * dout];
        let (xv, wv, bv) = (&self.value(x).data, &self.value(w).data, &self.value(b).data);
        for s in 0..n {
            let xr = &xv[s * din..(s + 1) * din];
            for o in 0..dout {
                let wr = &wv[o * din..(o + 1) * din];
                out[s * dout + o] = bv[o] + xr.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        self.push(Tensor::new(vec![n, dout], out), Op::Linear { x, w, b }, needs)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect();
        let shape = xv.shape.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data), Op::LeakyRelu(x, slope), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data.iter().map(|v| v.tanh()).collect();
        let shape = xv.shape.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data), Op::Tanh(x), needs)
    }

    /// Channel-wise concatenation of two NCHW tensors.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (n, ca, h, w) = self.value(a).dims4();
        let (nb, cb, hb, wb) = self.value(b).dims4();
        assert!(n == nb && h == hb && w == wb, "concat shape mismatch");
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for s in 0..n {
            data.extend_from_slice(&self.value(a).data[s * ca * plane..(s + 1) * ca * plane]);
            data.extend_from_slice(&self.value(b).data[s * cb * plane..(s + 1) * cb * plane]);
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::new(vec![n, ca + cb, h, w], data), Op::Concat(a, b), needs)
    }

    /// `scale * x + offset`, where `offset` is a constant of the same shape (or none).
    pub fn affine(&mut self, x: Var, scale: f64, offset: Option<&Tensor>) -> Var {
        let xv = self.value(x);
        let mut data: Vec<f64> = xv.data.iter().map(|v| scale * v).collect();
        if let Some(off) = offset {
            assert_eq!(off.shape, xv.shape, "affine offset shape mismatch");
            data.iter_mut().zip(&off.data).for_each(|(d, o)| *d += o);
        }
        let shape = xv.shape.clone();
        let needs = self.needs(x);
        self.push(Tensor::new(shape, data), Op::Affine(x, scale), needs)
    }

    /// Scalar `mean((x - target)^2)`.
    pub fn mean_sq_dev(&mut self, x: Var, target: f64) -> Var {
        let xv = self.value(x);
        let m = xv.data.iter().map(|v| (v - target) * (v - target)).sum::<f64>() / xv.len() as f64;
        let needs = self.needs(x);
        self.push(Tensor::scalar(m), Op::MeanSqDev(x, target), needs)
    }

    /// Scalar `mean(|a - b|)`.
    pub fn mean_abs_diff(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape, bv.shape, "mean_abs_diff shape mismatch");
        let m = av.data.iter().zip(&bv.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / av.len() as f64;
        let needs = self.needs(a) || self.needs(b);
        self.push(Tensor::scalar(m), Op::MeanAbsDiff(a, b), needs)
    }

    /// Scalar `sum(x * weights)` against constant weights.
    pub fn dot(&mut self, x: Var, weights: Vec<f64>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len(), weights.len());
        let s = xv.data.iter().zip(&weights).map(|(a, b)| a * b).sum();
        let needs = self.needs(x);
        self.push(Tensor::scalar(s), Op::Dot(x, weights), needs)
    }

    /// Weighted sum of scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Var {
        let s = terms.iter().map(|&(v, c)| c * self.scalar(v)).sum();
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        self.push(Tensor::scalar(s), Op::WeightedSum(terms.to_vec()), needs)
    }

    /// Gradient of the scalar `loss` with respect to every node that needs one.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).len(), 1, "backward requires a scalar");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &gy, &mut grads);
            grads[idx] = Some(gy);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.needs(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.value(v).len()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, idx: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad, cols } => {
                let (n, cin, h, wd) = self.value(*x).dims4();
                let (_, cout, ho, wo) = node.value.dims4();
                let ws = &self.value(*w).shape;
                let (kh, kw) = (ws[2], ws[3]);
                let k = cin * kh * kw;
                let p = ho * wo;
                let geom = ConvGeom { cin, h, w: wd, kh, kw, ho, wo, stride: *stride, pad: *pad };
                self.accumulate(grads, *b, |gb| {
                    for s in 0..n {
                        for (co, row) in gy[s * cout * p..(s + 1) * cout * p].chunks(p).enumerate() {
                            gb[co] += row.iter().sum::<f64>();
                        }
                    }
                });
                if let Some(cols) = cols {
                    self.accumulate(grads, *w, |gw| {
                        for s in 0..n {
                            let dy = &gy[s * cout * p..(s + 1) * cout * p];
                            let c = &cols[s * k * p..(s + 1) * k * p];
                            unsafe {
                                dgemm(
                                    cout,
                                    p,
                                    k,
                                    1.0,
                                    dy.as_ptr(),
                                    p as isize,
                                    1,
                                    c.as_ptr(),
                                    1,
                                    p as isize,
                                    1.0,
                                    gw.as_mut_ptr(),
                                    k as isize,
                                    1,
                                );
                            }
                        }
                    });
                }
                if self.needs(*x) {
                    let wv = &self.value(*w).data;
                    let mut dcols = vec![0.0; k * p];
                    self.accumulate(grads, *x, |gx| {
                        for s in 0..n {
                            let dy = &gy[s * cout * p..(s + 1) * cout * p];
                            unsafe {
                                dgemm(
                                    k,
                                    cout,
                                    p,
                                    1.0,
                                    wv.as_ptr(),
                                    1,
                                    k as isize,
                                    dy.as_ptr(),
                                    p as isize,
                                    1,
                                    0.0,
                                    dcols.as_mut_ptr(),
                                    p as isize,
                                    1,
                                );
                            }
                            col2im(&dcols, &geom, &mut gx[s * cin * h * wd..(s + 1) * cin * h * wd]);
                        }
                    });
                }
            }
            Op::Upsample2x(x) => {
                let (n, c, h, w) = self.value(*x).dims4();
                let (h2, w2) = (2 * h, 2 * w);
                self.accumulate(grads, *x, |gx| {
                    for plane in 0..n * c {
                        let src = &gy[plane * h2 * w2..(plane + 1) * h2 * w2];
                        let dst = &mut gx[plane * h * w..(plane + 1) * h * w];
                        for r in 0..h2 {
                            for cc in 0..w2 {
                                dst[(r / 2) * w + cc / 2] += src[r * w2 + cc];
                            }
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, gy));
                self.accumulate(grads, *b, |g| add_into(g, gy));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, gy));
                self.accumulate(grads, *b, |g| g.iter_mut().zip(gy).for_each(|(d, s)| *d -= s));
            }
            Op::AddChannel(x, v) => {
                let (_, _, h, w) = self.value(*x).dims4();
                self.accumulate(grads, *x, |g| add_into(g, gy));
                self.accumulate(grads, *v, |g| {
                    for (plane, chunk) in gy.chunks(h * w).enumerate() {
                        g[plane] += chunk.iter().sum::<f64>();
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let din = self.value(*x).shape[1];
                let n = self.value(*x).shape[0];
                let dout = self.value(*w).shape[0];
                let (xv, wv) = (&self.value(*x).data, &self.value(*w).data);
                self.accumulate(grads, *b, |g| {
                    for s in 0..n {
                        add_into(g, &gy[s * dout..(s + 1) * dout]);
                    }
                });
                self.accumulate(grads, *w, |g| {
                    for s in 0..n {
                        for o in 0..dout {
                            let go = gy[s * dout + o];
                            let row = &mut g[o * din..(o + 1) * din];
                            row.iter_mut().zip(&xv[s * din..(s + 1) * din]).for_each(|(d, xi)| *d += go * xi);
                        }
                    }
                });
                self.accumulate(grads, *x, |g| {
                    for s in 0..n {
                        for o in 0..dout {
                            let go = gy[s * dout + o];
                            let wr = &wv[o * din..(o + 1) * din];
                            g[s * din..(s + 1) * din].iter_mut().zip(wr).for_each(|(d, wi)| *d += go * wi);
                        }
                    }
                });
            }
            Op::LeakyRelu(x, slope) => {
                let xv = &self.value(*x).data;
                self.accumulate(grads, *x, |g| {
                    for ((d, s), xi) in g.iter_mut().zip(gy).zip(xv) {
                        *d += if *xi > 0.0 { *s } else { slope * s };
                    }
                });
            }
            Op::Tanh(x) => {
                let yv = &node.value.data;
                self.accumulate(grads, *x, |g| {
                    for ((d, s), y) in g.iter_mut().zip(gy).zip(yv) {
                        *d += s * (1.0 - y * y);
                    }
                });
            }
            Op::Concat(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4();
                let cb = self.value(*b).shape[1];
                let plane = h * w;
                let ct = ca + cb;
                self.accumulate(grads, *a, |g| {
                    for s in 0..n {
                        add_into(
                            &mut g[s * ca * plane..(s + 1) * ca * plane],
                            &gy[s * ct * plane..(s * ct + ca) * plane],
                        );
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for s in 0..n {
                        add_into(
                            &mut g[s * cb * plane..(s + 1) * cb * plane],
                            &gy[(s * ct + ca) * plane..(s + 1) * ct * plane],
                        );
                    }
                });
            }
            Op::Affine(x, scale) => {
                self.accumulate(grads, *x, |g| g.iter_mut().zip(gy).for_each(|(d, s)| *d += scale * s));
            }
            Op::MeanSqDev(x, target) => {
                let xv = &self.value(*x).data;
                let c = 2.0 * gy[0] / xv.len() as f64;
                self.accumulate(grads, *x, |g| {
                    g.iter_mut().zip(xv).for_each(|(d, v)| *d += c * (v - target));
                });
            }
            Op::MeanAbsDiff(a, b) => {
                let (av, bv) = (&self.value(*a).data, &self.value(*b).data);
                let c = gy[0] / av.len() as f64;
                let sign = |x: f64, y: f64| {
                    if x > y {
                        c
                    } else if x < y {
                        -c
                    } else {
                        0.0
                    }
                };
                self.accumulate(grads, *a, |g| {
                    for ((d, x), y) in g.iter_mut().zip(av).zip(bv) {
                        *d += sign(*x, *y);
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for ((d, x), y) in g.iter_mut().zip(av).zip(bv) {
                        *d -= sign(*x, *y);
                    }
                });
            }
            Op::Dot(x, weights) => {
                let c = gy[0];
                self.accumulate(grads, *x, |g| g.iter_mut().zip(weights).for_each(|(d, w)| *d += c * w));
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    self.accumulate(grads, v, |g| g[0] += c * gy[0]);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `kidx`.
fn valid_range(kidx: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    // input index = o*stride + kidx - pad must lie in [0, len)
    let lo = if kidx >= pad { 0 } else { (pad - kidx).div_ceil(stride) };
    let hi = if len + pad > kidx { ((len + pad - kidx - 1) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let p = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(ki, g.pad, g.stride, g.h, g.ho);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(kj, g.pad, g.stride, g.w, g.wo);
                let row = &mut cols[((c * g.kh + ki) * g.kw + kj) * p..][..p];
                row.fill(0.0);
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    let dst = &mut row[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let ix0 = xlo + kj - g.pad;
                        dst[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            dst[ox] = src[ox * g.stride + kj - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64]) {
    let p = g.ho * g.wo;
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (ylo, yhi) = valid_range(ki, g.pad, g.stride, g.h, g.ho);
            for kj in 0..g.kw {
                let (xlo, xhi) = valid_range(kj, g.pad, g.stride, g.w, g.wo);
                let row = &cols[((c * g.kh + ki) * g.kw + kj) * p..][..p];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let src = &row[oy * g.wo..(oy + 1) * g.wo];
                    for ox in xlo..xhi {
                        dst[ox * g.stride + kj - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}
