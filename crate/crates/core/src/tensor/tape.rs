use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Recorded operation. Parents always precede the node that references them,
/// so reverse insertion order is a valid topological order.
pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Abs(Var),
    Maximum(Var, Var),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    Relu(Var),
    Tanh(Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    AddRow {
        x: Var,
        row: Var,
        d: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cout: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        // Geometry of the adjoint convolution (output image -> input image).
        geom: ConvGeom,
        cin: usize,
    },
    Depthwise {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    AvgPool2 {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
    },
    MaxPool2 {
        x: Var,
        argmax: Vec<usize>,
    },
    Upsample2 {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        d: usize,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Reshape(Var),
    Transpose {
        x: Var,
        r: usize,
        c: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        lens: Vec<usize>,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        len_in: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Patchify {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
        p: usize,
    },
    Unpatchify {
        x: Var,
        c: usize,
        h: usize,
        w: usize,
        p: usize,
    },
    SobelMag {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
        gx: Vec<f64>,
        gy: Vec<f64>,
    },
    Blur {
        x: Var,
        planes: usize,
        h: usize,
        w: usize,
        taps: Vec<f64>,
        valid: bool,
    },
    PearsonChannels {
        a: Var,
        b: Var,
        c: usize,
        n: usize,
    },
}

pub(crate) struct Node {
    pub value: Tensor,
    pub op: Op,
    pub requires_grad: bool,
}

/// Append-only record of a computation.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
}

/// Result of one backward sweep: `∂loss/∂v` for every node that requires grad.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor; zeros when the loss does not depend on `v`.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value out of the graph as a constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_with_seed(loss, 1.0)
    }

    /// Reverse sweep seeded with `d loss = seed`.
    pub fn backward_with_seed(&self, loss: Var, seed: f64) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![seed]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect() })
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let y = node.value.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * bv[i];
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / guard_den(bv[i]);
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        d[i] -= g[i] * y[i] / guard_den(bv[i]);
                    }
                });
            }
            Op::Neg(a) => acc(*a, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d -= g)),
            Op::Abs(a) => {
                let av = val(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * sign(av[i]);
                    }
                });
            }
            Op::Maximum(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                // Ties route the gradient to the first argument.
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if av[i] >= bv[i] {
                            d[i] += g[i];
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for i in 0..d.len() {
                        if av[i] < bv[i] {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Exp(a) => acc(*a, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i];
                }
            }),
            Op::Log(a) => {
                let av = val(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / (av[i] + super::GUARD);
                    }
                });
            }
            Op::Sigmoid(a) => acc(*a, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * y[i] * (1.0 - y[i]);
                }
            }),
            Op::Relu(a) => {
                let av = val(*a);
                acc(*a, &mut |d| {
                    for i in 0..d.len() {
                        if av[i] > 0.0 {
                            d[i] += g[i];
                        }
                    }
                });
            }
            Op::Tanh(a) => acc(*a, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }),
            Op::AddScalar(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::MulScalar(a, s) => acc(*a, &mut |d| {
                for i in 0..d.len() {
                    d[i] += g[i] * s;
                }
            }),
            Op::Matmul { a, b, m, k, n } => {
                let (av, bv) = (val(*a), val(*b));
                acc(*a, &mut |d| kernels::gemm(*m, *n, *k, g, false, bv, true, d, true));
                acc(*b, &mut |d| kernels::gemm(*k, *m, *n, av, true, g, false, d, true));
            }
            Op::AddRow { x, row, d: dim } => {
                acc(*x, &mut |d| add_into(d, g));
                acc(*row, &mut |d| {
                    for chunk in g.chunks(*dim) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Conv2d { x, w, b, geom, cout } => {
                let (ho, wo) = geom.out_hw();
                let plane = ho * wo;
                let kk = geom.c * geom.k * geom.k;
                let need_x = self.nodes[x.0].requires_grad;
                let need_w = self.nodes[w.0].requires_grad;
                if need_w {
                    let mut cols = vec![0.0; kk * plane];
                    kernels::im2col(val(*x), *geom, &mut cols);
                    acc(*w, &mut |d| kernels::gemm(*cout, plane, kk, g, false, &cols, true, d, true));
                }
                if need_x {
                    let wv = val(*w);
                    let mut dcols = vec![0.0; kk * plane];
                    kernels::gemm(kk, *cout, plane, wv, true, g, false, &mut dcols, false);
                    acc(*x, &mut |d| kernels::col2im(&dcols, *geom, d));
                }
                if let Some(b) = b {
                    acc(*b, &mut |d| channel_sums_into(d, g, plane));
                }
            }
            Op::ConvTranspose2d { x, w, b, geom, cin } => {
                // Forward was: out = col2im(Wᵀ · x). Here geom.c = cout and
                // geom.h/w = output extents; x is [cin, hi*wi].
                let (hi, wi) = geom.out_hw();
                let plane_in = hi * wi;
                let kk = geom.c * geom.k * geom.k;
                let mut cols = vec![0.0; kk * plane_in];
                kernels::im2col(g, *geom, &mut cols);
                let xv = val(*x);
                let wv = val(*w);
                acc(*x, &mut |d| kernels::gemm(*cin, kk, plane_in, wv, false, &cols, false, d, true));
                acc(*w, &mut |d| kernels::gemm(*cin, plane_in, kk, xv, false, &cols, true, d, true));
                if let Some(b) = b {
                    acc(*b, &mut |d| channel_sums_into(d, g, geom.h * geom.w));
                }
            }
            Op::Depthwise { x, w, b, geom } => {
                let xv = val(*x);
                let wv = val(*w);
                let (c, h, wd, k, pad) = (geom.c, geom.h, geom.w, geom.k, geom.pad as isize);
                acc(*x, &mut |d| {
                    for ch in 0..c {
                        let wk = &wv[ch * k * k..(ch + 1) * k * k];
                        for yy in 0..h {
                            for xx in 0..wd {
                                let gv = g[(ch * h + yy) * wd + xx];
                                for ky in 0..k {
                                    let iy = yy as isize + ky as isize - pad;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = xx as isize + kx as isize - pad;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        d[(ch * h + iy as usize) * wd + ix as usize] += wk[ky * k + kx] * gv;
                                    }
                                }
                            }
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for ch in 0..c {
                        for yy in 0..h {
                            for xx in 0..wd {
                                let gv = g[(ch * h + yy) * wd + xx];
                                for ky in 0..k {
                                    let iy = yy as isize + ky as isize - pad;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..k {
                                        let ix = xx as isize + kx as isize - pad;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        d[ch * k * k + ky * k + kx] +=
                                            xv[(ch * h + iy as usize) * wd + ix as usize] * gv;
                                    }
                                }
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |d| channel_sums_into(d, g, h * wd));
                }
            }
            Op::AvgPool2 { x, c, h, w } => acc(*x, &mut |d| {
                let (ho, wo) = (h / 2, w / 2);
                for ch in 0..*c {
                    for yy in 0..*h {
                        for xx in 0..*w {
                            d[(ch * h + yy) * w + xx] += 0.25 * g[(ch * ho + yy / 2) * wo + xx / 2];
                        }
                    }
                }
            }),
            Op::MaxPool2 { x, argmax } => acc(*x, &mut |d| {
                for (o, &src) in argmax.iter().enumerate() {
                    d[src] += g[o];
                }
            }),
            Op::Upsample2 { x, c, h, w } => acc(*x, &mut |d| {
                let (ho, wo) = (h * 2, w * 2);
                for ch in 0..*c {
                    for yy in 0..ho {
                        for xx in 0..wo {
                            d[(ch * h + yy / 2) * w + xx / 2] += g[(ch * ho + yy) * wo + xx];
                        }
                    }
                }
            }),
            Op::Softmax { x, outer, len, inner } => acc(*x, &mut |d| {
                for o in 0..*outer {
                    for i in 0..*inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..*len {
                            d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
            }),
            Op::LayerNorm { x, gamma, beta, d: dim, xhat, inv_std } => {
                let gv = val(*gamma);
                acc(*x, &mut |d| {
                    let n = *dim as f64;
                    for (r, &is) in inv_std.iter().enumerate() {
                        let row = r * dim..(r + 1) * dim;
                        let gy: Vec<f64> = row.clone().map(|i| g[i] * gv[i - r * dim]).collect();
                        let mean_gy: f64 = gy.iter().sum::<f64>() / n;
                        let mean_gyx: f64 = gy.iter().zip(&xhat[row.clone()]).map(|(a, b)| a * b).sum::<f64>() / n;
                        for (j, i) in row.enumerate() {
                            d[i] += is * (gy[j] - mean_gy - xhat[i] * mean_gyx);
                        }
                    }
                });
                acc(*gamma, &mut |d| {
                    for (i, (gi, xh)) in g.iter().zip(xhat).enumerate() {
                        d[i % dim] += gi * xh;
                    }
                });
                acc(*beta, &mut |d| {
                    for chunk in g.chunks(*dim) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::SumAxis { x, outer, len, inner } => acc(*x, &mut |d| {
                for o in 0..*outer {
                    for j in 0..*len {
                        for i in 0..*inner {
                            d[(o * len + j) * inner + i] += g[o * inner + i];
                        }
                    }
                }
            }),
            Op::Reshape(a) => acc(*a, &mut |d| add_into(d, g)),
            Op::Transpose { x, r, c } => acc(*x, &mut |d| {
                for i in 0..*r {
                    for j in 0..*c {
                        d[i * c + j] += g[j * r + i];
                    }
                }
            }),
            Op::Concat { parts, outer, lens, inner } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (p, &len) in parts.iter().zip(lens) {
                    acc(*p, &mut |d| {
                        for o in 0..*outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                            add_into(&mut d[o * len * inner..(o + 1) * len * inner], src);
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { x, outer, len_in, start, len, inner } => acc(*x, &mut |d| {
                for o in 0..*outer {
                    let dst = &mut d[(o * len_in + start) * inner..(o * len_in + start + len) * inner];
                    add_into(dst, &g[o * len * inner..(o + 1) * len * inner]);
                }
            }),
            Op::Patchify { x, c, h, w, p } => acc(*x, &mut |d| {
                for_each_patch_index(*c, *h, *w, *p, |src, dst| d[src] += g[dst]);
            }),
            Op::Unpatchify { x, c, h, w, p } => acc(*x, &mut |d| {
                for_each_patch_index(*c, *h, *w, *p, |img, tok| d[tok] += g[img]);
            }),
            Op::SobelMag { x, planes, h, w, gx, gy } => acc(*x, &mut |d| {
                let dgx: Vec<f64> = g.iter().zip(gx).map(|(g, v)| 0.5 * g * sign(*v)).collect();
                let dgy: Vec<f64> = g.iter().zip(gy).map(|(g, v)| 0.5 * g * sign(*v)).collect();
                kernels::correlate3_same_adjoint(&dgx, *planes, *h, *w, &kernels::SOBEL_X, d);
                kernels::correlate3_same_adjoint(&dgy, *planes, *h, *w, &kernels::SOBEL_Y, d);
            }),
            Op::Blur { x, planes, h, w, taps, valid } => {
                acc(*x, &mut |d| kernels::separable_blur_adjoint(g, *planes, *h, *w, taps, *valid, d))
            }
            Op::PearsonChannels { a, b, c, n } => {
                let (av, bv) = (val(*a), val(*b));
                let nf = *n as f64;
                let mut da = vec![0.0; c * n];
                let mut db = vec![0.0; c * n];
                for ch in 0..*c {
                    let xa = &av[ch * n..(ch + 1) * n];
                    let xb = &bv[ch * n..(ch + 1) * n];
                    let Some(st) = pearson_stats(xa, xb) else { continue };
                    let sab = (st.var_a * st.var_b).sqrt();
                    for i in 0..*n {
                        let ca = xa[i] - st.mean_a;
                        let cb = xb[i] - st.mean_b;
                        da[ch * n + i] = g[ch] * (cb / sab - st.r * ca / st.var_a) / nf;
                        db[ch * n + i] = g[ch] * (ca / sab - st.r * cb / st.var_b) / nf;
                    }
                }
                acc(*a, &mut |d| add_into(d, &da));
                acc(*b, &mut |d| add_into(d, &db));
            }
        }
    }
}

pub(crate) struct PearsonStats {
    pub mean_a: f64,
    pub mean_b: f64,
    pub var_a: f64,
    pub var_b: f64,
    pub r: f64,
}

/// Population statistics; `None` when either side has (numerically) zero variance.
pub(crate) fn pearson_stats(a: &[f64], b: &[f64]) -> Option<PearsonStats> {
    let n = a.len() as f64;
    let mean_a = a.iter().sum::<f64>() / n;
    let mean_b = b.iter().sum::<f64>() / n;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - mean_a, y - mean_b);
        va += dx * dx;
        vb += dy * dy;
        cov += dx * dy;
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    if va <= 1e-20 || vb <= 1e-20 {
        return None;
    }
    Some(PearsonStats { mean_a, mean_b, var_a: va, var_b: vb, r: cov / (va * vb).sqrt() })
}

pub(crate) fn guard_den(b: f64) -> f64 {
    if b >= 0.0 {
        b + super::GUARD
    } else {
        b - super::GUARD
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    d.iter_mut().zip(g).for_each(|(d, g)| *d += g);
}

fn channel_sums_into(d: &mut [f64], g: &[f64], plane: usize) {
    for (c, chunk) in g.chunks(plane).enumerate() {
        d[c] += chunk.iter().sum::<f64>();
    }
}

/// Visits `(image index, token index)` pairs for a `p×p` patch layout where
/// token `t = py·(w/p) + px` holds features ordered `(dy, dx, c)`, so a
/// `[tokens, p·p·c]` matrix reshapes to per-pixel `[tokens·p·p, c]` rows.
pub(crate) fn for_each_patch_index(c: usize, h: usize, w: usize, p: usize, mut f: impl FnMut(usize, usize)) {
    let (nh, nw) = (h / p, w / p);
    let dim = c * p * p;
    for py in 0..nh {
        for px in 0..nw {
            let t = py * nw + px;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        let img = (ch * h + py * p + dy) * w + px * p + dx;
                        let tok = t * dim + (dy * p + dx) * c + ch;
                        f(img, tok);
                    }
                }
            }
        }
    }
}
