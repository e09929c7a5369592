use super::kernels::{self, ConvGeom};
use super::tape::{for_each_patch_index, guard_den, pearson_stats, Op, Tape, Var};
use super::{Tensor, GUARD};
use crate::error::{Error, Result};

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (av, bv) = (self.value(a), self.value(b));
        Tensor::from_fn(av.shape(), |i| f(av.data()[i], bv.data()[i]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a).map(f);
        self.push(t, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    /// Guarded division: `a / (b ± 1e-12)` with the guard following the sign of `b`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let t = self.zip_with(a, b, |x, y| x / guard_den(y));
        Ok(self.push(t, Op::Div(a, b), &[a, b]))
    }

    /// Elementwise maximum.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let t = self.zip_with(a, b, f64::max);
        Ok(self.push(t, Op::Maximum(a, b), &[a, b]))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    /// Guarded natural log: `ln(x + 1e-12)`.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| (x + GUARD).ln(), Op::Log(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x + s, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, |x| x * s, Op::MulScalar(a, s))
    }

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out, false);
        let t = Tensor::new(vec![m, n], out)?;
        Ok(self.push(t, Op::Matmul { a, b, m, k, n }, &[a, b]))
    }

    /// Adds a `[d]` row vector to every row of a `[n, d]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        let d = match (sx, sr) {
            ([_, d], [d2]) if d == d2 => *d,
            _ => return Err(Error::shape("add_row", sx, sr)),
        };
        let rv = self.value(row).data().to_vec();
        let xv = self.value(x);
        let t = Tensor::from_fn(xv.shape(), |i| xv.data()[i] + rv[i % d]);
        Ok(self.push(t, Op::AddRow { x, row, d }, &[x, row]))
    }

    /// 2-D convolution of `[Cin, H, W]` with `[Cout, Cin, k, k]`, zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (cin, h, wd, cout, k) = match (&sx[..], &sw[..]) {
            ([c, h, w], [co, ci, k1, k2]) if c == ci && k1 == k2 => (*c, *h, *w, *co, *k1),
            _ => return Err(Error::shape("conv2d", &sx, &sw)),
        };
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv2d bias", self.shape(b), &[cout]));
            }
        }
        let geom = ConvGeom { c: cin, h, w: wd, k, stride, pad };
        if !geom.valid() {
            return Err(Error::invalid("conv2d", format!("kernel {k} too large for {h}x{wd}")));
        }
        let (ho, wo) = geom.out_hw();
        let plane = ho * wo;
        let kk = cin * k * k;
        let mut cols = vec![0.0; kk * plane];
        kernels::im2col(self.value(x).data(), geom, &mut cols);
        let mut out = vec![0.0; cout * plane];
        if let Some(b) = b {
            for (c, &bv) in self.value(b).data().iter().enumerate() {
                out[c * plane..(c + 1) * plane].fill(bv);
            }
        }
        kernels::gemm(cout, kk, plane, self.value(w).data(), false, &cols, false, &mut out, b.is_some());
        let t = Tensor::new(vec![cout, ho, wo], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::Conv2d { x, w, b, geom, cout }, &inputs))
    }

    /// Transposed convolution of `[Cin, H, W]` with `[Cin, Cout, k, k]`.
    /// Output extent is `(H - 1)·stride + k - 2·pad`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (cin, h, wd, cout, k) = match (&sx[..], &sw[..]) {
            ([c, h, w], [ci, co, k1, k2]) if c == ci && k1 == k2 => (*c, *h, *w, *co, *k1),
            _ => return Err(Error::shape("conv_transpose2d", &sx, &sw)),
        };
        if (h - 1) * stride + k < 2 * pad + 1 || (wd - 1) * stride + k < 2 * pad + 1 {
            return Err(Error::invalid("conv_transpose2d", "padding exceeds output"));
        }
        let ho = (h - 1) * stride + k - 2 * pad;
        let wo = (wd - 1) * stride + k - 2 * pad;
        let geom = ConvGeom { c: cout, h: ho, w: wo, k, stride, pad };
        debug_assert_eq!(geom.out_hw(), (h, wd));
        let kk = cout * k * k;
        let mut cols = vec![0.0; kk * h * wd];
        kernels::gemm(kk, cin, h * wd, self.value(w).data(), true, self.value(x).data(), false, &mut cols, false);
        let mut out = vec![0.0; cout * ho * wo];
        kernels::col2im(&cols, geom, &mut out);
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape("conv_transpose2d bias", self.shape(b), &[cout]));
            }
            for (c, &bv) in self.value(b).data().iter().enumerate() {
                out[c * ho * wo..(c + 1) * ho * wo].iter_mut().for_each(|v| *v += bv);
            }
        }
        let t = Tensor::new(vec![cout, ho, wo], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::ConvTranspose2d { x, w, b, geom, cin }, &inputs))
    }

    /// Depthwise `k×k` convolution, stride 1, same size; weight `[C, 1, k, k]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let (c, h, wd, k) = match (&sx[..], &sw[..]) {
            ([c, h, w], [c2, 1, k1, k2]) if c == c2 && k1 == k2 && k1 % 2 == 1 => (*c, *h, *w, *k1),
            _ => return Err(Error::shape("depthwise_conv2d", &sx, &sw)),
        };
        let pad = k / 2;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![0.0; c * h * wd];
        for ch in 0..c {
            let wk = &wv[ch * k * k..(ch + 1) * k * k];
            for yy in 0..h {
                for xx in 0..wd {
                    let mut s = 0.0;
                    for ky in 0..k {
                        let iy = yy as isize + ky as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = xx as isize + kx as isize - pad as isize;
                            if ix < 0 || ix >= wd as isize {
                                continue;
                            }
                            s += wk[ky * k + kx] * xv[(ch * h + iy as usize) * wd + ix as usize];
                        }
                    }
                    out[(ch * h + yy) * wd + xx] = s;
                }
            }
        }
        if let Some(b) = b {
            if self.shape(b) != [c] {
                return Err(Error::shape("depthwise_conv2d bias", self.shape(b), &[c]));
            }
            for (ch, &bv) in self.value(b).data().iter().enumerate() {
                out[ch * h * wd..(ch + 1) * h * wd].iter_mut().for_each(|v| *v += bv);
            }
        }
        let geom = ConvGeom { c, h, w: wd, k, stride: 1, pad };
        let t = Tensor::new(vec![c, h, wd], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push(t, Op::Depthwise { x, w, b, geom }, &inputs))
    }

    fn even_chw(&self, op: &'static str, x: Var) -> Result<(usize, usize, usize)> {
        let (c, h, w) = self.value(x).chw()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::invalid(op, format!("odd extent {h}x{w}")));
        }
        Ok((c, h, w))
    }

    pub fn avg_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.even_chw("avg_pool2", x)?;
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let t = Tensor::from_fn(&[c, ho, wo], |i| {
            let (ch, r) = (i / (ho * wo), i % (ho * wo));
            let (y, xx) = (2 * (r / wo), 2 * (r % wo));
            let at = |dy: usize, dx: usize| xv[(ch * h + y + dy) * w + xx + dx];
            0.25 * (at(0, 0) + at(0, 1) + at(1, 0) + at(1, 1))
        });
        Ok(self.push(t, Op::AvgPool2 { x, c, h, w }, &[x]))
    }

    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.even_chw("max_pool2", x)?;
        let (ho, wo) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut argmax = Vec::with_capacity(c * ho * wo);
        let mut out = Vec::with_capacity(c * ho * wo);
        for ch in 0..c {
            for y in 0..ho {
                for xx in 0..wo {
                    let mut best = (ch * h + 2 * y) * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (ch * h + 2 * y + dy) * w + 2 * xx + dx;
                        if xv[i] > xv[best] {
                            best = i;
                        }
                    }
                    argmax.push(best);
                    out.push(xv[best]);
                }
            }
        }
        let t = Tensor::new(vec![c, ho, wo], out)?;
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, &[x]))
    }

    /// Nearest-neighbour 2× upsampling.
    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        let (ho, wo) = (2 * h, 2 * w);
        let xv = self.value(x).data();
        let t = Tensor::from_fn(&[c, ho, wo], |i| {
            let (ch, r) = (i / (ho * wo), i % (ho * wo));
            xv[(ch * h + (r / wo) / 2) * w + (r % wo) / 2]
        });
        Ok(self.push(t, Op::Upsample2 { x, c, h, w }, &[x]))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("softmax", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let m = (0..len).map(|j| xv[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for j in 0..len {
                    let e = (xv[at(j)] - m).exp();
                    out[at(j)] = e;
                    s += e;
                }
                for j in 0..len {
                    out[at(j)] /= s;
                }
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Softmax { x, outer, len, inner }, &[x]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of length `d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("non-empty shape");
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * gv[j] + bv[j];
            }
        }
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::LayerNorm { x, gamma, beta, d, xhat, inv_std }, &[x, gamma, beta]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sums out `axis`, removing it from the shape (a 1-D input yields `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid("sum_axis", format!("axis {axis} for {shape:?}")));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += xv[(o * len + j) * inner + i];
                }
            }
        }
        let mut new_shape: Vec<usize> = shape.clone();
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let t = Tensor::new(new_shape, out)?;
        Ok(self.push(t, Op::SumAxis { x, outer, len, inner }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let len = *self.shape(x).get(axis).ok_or_else(|| Error::invalid("mean_axis", format!("axis {axis}")))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.mul_scalar(s, 1.0 / len as f64))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Transpose of a 2-D matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = match self.shape(x) {
            [r, c] => (*r, *c),
            s => return Err(Error::invalid("transpose", format!("expected 2-D, got {s:?}"))),
        };
        let xv = self.value(x).data();
        let t = Tensor::from_fn(&[c, r], |i| xv[(i % r) * c + i / r]);
        Ok(self.push(t, Op::Transpose { x, r, c }, &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid("concat", format!("axis {axis} for {first:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape("concat", &first, s));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &len) in parts.iter().zip(&lens) {
                out.extend_from_slice(&self.value(p).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::Concat { parts: parts.to_vec(), outer, lens, inner }, parts))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::invalid("slice", format!("[{start}, {}) on axis {axis} of {shape:?}", start + len)));
        }
        let (outer, len_in, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&xv[(o * len_in + start) * inner..(o * len_in + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let t = Tensor::new(new_shape, out)?;
        Ok(self.push(t, Op::Slice { x, outer, len_in, start, len, inner }, &[x]))
    }

    /// `[C, H, W]` → `[(H/p)·(W/p), C·p·p]` non-overlapping patch tokens.
    pub fn patchify(&mut self, x: Var, p: usize) -> Result<Var> {
        let (c, h, w) = self.value(x).chw()?;
        if p == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::invalid("patchify", format!("{h}x{w} not divisible by {p}")));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for_each_patch_index(c, h, w, p, |img, tok| out[tok] = xv[img]);
        let t = Tensor::new(vec![(h / p) * (w / p), c * p * p], out)?;
        Ok(self.push(t, Op::Patchify { x, c, h, w, p }, &[x]))
    }

    /// Inverse of [`Tape::patchify`].
    pub fn unpatchify(&mut self, x: Var, c: usize, h: usize, w: usize, p: usize) -> Result<Var> {
        let want = [(h / p) * (w / p), c * p * p];
        if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) || self.shape(x) != want {
            return Err(Error::shape("unpatchify", self.shape(x), &want));
        }
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for_each_patch_index(c, h, w, p, |img, tok| out[img] = xv[tok]);
        let t = Tensor::new(vec![c, h, w], out)?;
        Ok(self.push(t, Op::Unpatchify { x, c, h, w, p }, &[x]))
    }

    /// Per-plane Sobel gradient magnitude `½(|Gx| + |Gy|)`, zero padded.
    pub fn sobel_mag(&mut self, x: Var) -> Result<Var> {
        let (planes, h, w) = self.value(x).chw()?;
        let xv = self.value(x).data();
        let gx = kernels::correlate3_same(xv, planes, h, w, &kernels::SOBEL_X);
        let gy = kernels::correlate3_same(xv, planes, h, w, &kernels::SOBEL_Y);
        let out: Vec<f64> = gx.iter().zip(&gy).map(|(a, b)| 0.5 * (a.abs() + b.abs())).collect();
        let t = Tensor::new(vec![planes, h, w], out)?;
        Ok(self.push(t, Op::SobelMag { x, planes, h, w, gx, gy }, &[x]))
    }

    /// Separable Gaussian blur of each plane; `valid` drops the zero-padded border.
    pub fn gaussian_blur(&mut self, x: Var, size: usize, sigma: f64, valid: bool) -> Result<Var> {
        let (planes, h, w) = self.value(x).chw()?;
        if size.is_multiple_of(2) || (valid && (h < size || w < size)) {
            return Err(Error::invalid("gaussian_blur", format!("window {size} on {h}x{w}")));
        }
        let taps = kernels::gaussian_taps(size, sigma);
        let (out, ho, wo) = kernels::separable_blur(self.value(x).data(), planes, h, w, &taps, valid);
        let t = Tensor::new(vec![planes, ho, wo], out)?;
        Ok(self.push(t, Op::Blur { x, planes, h, w, taps, valid }, &[x]))
    }

    /// Pearson correlation per channel of two `[C, ...]` tensors → `[C]`.
    /// A channel with zero variance on either side yields 0.
    pub fn pearson_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("pearson_channels", a, b)?;
        let c = self.shape(a)[0];
        let n = self.value(a).len() / c;
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let r: Vec<f64> = (0..c)
            .map(|ch| pearson_stats(&av[ch * n..(ch + 1) * n], &bv[ch * n..(ch + 1) * n]).map_or(0.0, |s| s.r))
            .collect();
        let t = Tensor::new(vec![c], r)?;
        Ok(self.push(t, Op::PearsonChannels { a, b, c, n }, &[a, b]))
    }

    // Convenience compositions.

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a).expect("same var")
    }

    /// Population variance of all elements.
    pub fn variance(&mut self, a: Var) -> Var {
        let ones = self.constant(Tensor::full(self.shape(a), 1.0));
        let m = self.mean(a);
        let mb = self.broadcast_scalar(m, ones);
        let centered = self.sub(a, mb).expect("same shape");
        let sq = self.square(centered);
        self.mean(sq)
    }

    /// Population covariance of all elements of `a` and `b`.
    pub fn covariance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("covariance", a, b)?;
        let ones = self.constant(Tensor::full(self.shape(a), 1.0));
        let ma = self.mean(a);
        let mb = self.mean(b);
        let ma = self.broadcast_scalar(ma, ones);
        let mb = self.broadcast_scalar(mb, ones);
        let ca = self.sub(a, ma)?;
        let cb = self.sub(b, mb)?;
        let p = self.mul(ca, cb)?;
        Ok(self.mean(p))
    }

    /// `s · like`, where `s` is a one-element var and `like` a constant of ones.
    fn broadcast_scalar(&mut self, s: Var, ones: Var) -> Var {
        let n = self.value(ones).len();
        let flat = self.reshape(ones, &[n, 1]).expect("reshape");
        let s2 = self.reshape(s, &[1, 1]).expect("scalar");
        let col = self.matmul(flat, s2).expect("outer");
        let shape = self.shape(ones).to_vec();
        self.reshape(col, &shape).expect("reshape")
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
