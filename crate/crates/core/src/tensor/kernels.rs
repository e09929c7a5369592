// Slice-level numeric kernels shared by the tape ops and the metrics.

/// `c (+)= op(a) · op(b)` for row-major matrices; `op(a)` is `m×k`, `op(b)` is `k×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: strides describe exactly the buffers checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        ((self.h + 2 * self.pad - self.k) / self.stride + 1, (self.w + 2 * self.pad - self.k) / self.stride + 1)
    }

    pub fn valid(&self) -> bool {
        self.k > 0 && self.stride > 0 && self.h + 2 * self.pad >= self.k && self.w + 2 * self.pad >= self.k
    }
}

/// Unfolds `[C, H, W]` into `[C·k·k, Ho·Wo]`, zero padded.
pub(crate) fn im2col(x: &[f64], g: ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let mut row = 0;
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: folds columns back, accumulating into `x`.
pub(crate) fn col2im(cols: &[f64], g: ConvGeom, x: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let plane = ho * wo;
    let mut row = 0;
    for c in 0..g.c {
        let xc = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Cross-correlation of each `h×w` plane with a 3×3 kernel, zero padded, same size.
pub(crate) fn correlate3_same(x: &[f64], planes: usize, h: usize, w: usize, k: &[f64; 9]) -> Vec<f64> {
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let mut acc = 0.0;
                for dy in 0..3 {
                    let iy = y as isize + dy as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..3 {
                        let ix = xx as isize + dx as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        acc += k[dy * 3 + dx] * src[iy as usize * w + ix as usize];
                    }
                }
                dst[y * w + xx] = acc;
            }
        }
    }
    out
}

/// Adjoint of [`correlate3_same`], accumulated into `dx`.
pub(crate) fn correlate3_same_adjoint(g: &[f64], planes: usize, h: usize, w: usize, k: &[f64; 9], dx: &mut [f64]) {
    for p in 0..planes {
        let src = &g[p * h * w..(p + 1) * h * w];
        let dst = &mut dx[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for xx in 0..w {
                let gv = src[y * w + xx];
                if gv == 0.0 {
                    continue;
                }
                for dy in 0..3 {
                    let iy = y as isize + dy as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx_ in 0..3 {
                        let ix = xx as isize + dx_ as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[iy as usize * w + ix as usize] += k[dy * 3 + dx_] * gv;
                    }
                }
            }
        }
    }
}

pub(crate) const SOBEL_X: [f64; 9] = [-1.0, 0.0, 1.0, -2.0, 0.0, 2.0, -1.0, 0.0, 1.0];
pub(crate) const SOBEL_Y: [f64; 9] = [-1.0, -2.0, -1.0, 0.0, 0.0, 0.0, 1.0, 2.0, 1.0];

/// Normalized 1-D Gaussian taps of odd length `size`.
pub(crate) fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size as f64 - 1.0) / 2.0;
    let mut taps: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= s);
    taps
}

/// Separable correlation of each plane with `taps` along both axes.
/// `valid` keeps only fully covered positions; otherwise zero padded, same size.
pub(crate) fn separable_blur(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    taps: &[f64],
    valid: bool,
) -> (Vec<f64>, usize, usize) {
    let n = taps.len();
    let (ho, wo) = if valid { (h + 1 - n, w + 1 - n) } else { (h, w) };
    let off = if valid { 0 } else { (n / 2) as isize };
    let mut tmp = vec![0.0; planes * h * wo];
    for p in 0..planes {
        for y in 0..h {
            let src = &x[(p * h + y) * w..(p * h + y + 1) * w];
            let dst = &mut tmp[(p * h + y) * wo..(p * h + y + 1) * wo];
            for (ox, d) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (t, &tv) in taps.iter().enumerate() {
                    let ix = ox as isize + t as isize - off;
                    if ix >= 0 && (ix as usize) < w {
                        acc += tv * src[ix as usize];
                    }
                }
                *d = acc;
            }
        }
    }
    let mut out = vec![0.0; planes * ho * wo];
    for p in 0..planes {
        for oy in 0..ho {
            let dst = &mut out[(p * ho + oy) * wo..(p * ho + oy + 1) * wo];
            for (t, &tv) in taps.iter().enumerate() {
                let iy = oy as isize + t as isize - off;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                let src = &tmp[(p * h + iy as usize) * wo..(p * h + iy as usize + 1) * wo];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += tv * s;
                }
            }
        }
    }
    (out, ho, wo)
}

/// Adjoint of [`separable_blur`]; `g` has the blurred extents.
pub(crate) fn separable_blur_adjoint(
    g: &[f64],
    planes: usize,
    h: usize,
    w: usize,
    taps: &[f64],
    valid: bool,
    dx: &mut [f64],
) {
    let n = taps.len();
    let (ho, wo) = if valid { (h + 1 - n, w + 1 - n) } else { (h, w) };
    let off = if valid { 0 } else { (n / 2) as isize };
    let mut tmp = vec![0.0; planes * h * wo];
    for p in 0..planes {
        for oy in 0..ho {
            let src = &g[(p * ho + oy) * wo..(p * ho + oy + 1) * wo];
            for (t, &tv) in taps.iter().enumerate() {
                let iy = oy as isize + t as isize - off;
                if iy < 0 || iy as usize >= h {
                    continue;
                }
                let dst = &mut tmp[(p * h + iy as usize) * wo..(p * h + iy as usize + 1) * wo];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += tv * s;
                }
            }
        }
    }
    for p in 0..planes {
        for y in 0..h {
            let src = &tmp[(p * h + y) * wo..(p * h + y + 1) * wo];
            let dst = &mut dx[(p * h + y) * w..(p * h + y + 1) * w];
            for (ox, &gv) in src.iter().enumerate() {
                for (t, &tv) in taps.iter().enumerate() {
                    let ix = ox as isize + t as isize - off;
                    if ix >= 0 && (ix as usize) < w {
                        dst[ix as usize] += tv * gv;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_all_transpose_combinations() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive_matmul(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (aa, a_t) in [(&a, false), (&at, true)] {
            for (bb, b_t) in [(&b, false), (&bt, true)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, a_t, bb, b_t, &mut c, false);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom { c: 2, h: 5, w: 6, k: 3, stride: 2, pad: 1 };
        let (ho, wo) = g.out_hw();
        let x: Vec<f64> = (0..2 * 5 * 6).map(|i| (i as f64 * 0.7).sin()).collect();
        let y: Vec<f64> = (0..2 * 9 * ho * wo).map(|i| (i as f64 * 0.3).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, g, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, g, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn blur_adjoint_identity() {
        let taps = gaussian_taps(5, 1.1);
        for valid in [false, true] {
            let (h, w) = (7, 9);
            let x: Vec<f64> = (0..h * w).map(|i| (i as f64 * 0.9).sin()).collect();
            let (y, ho, wo) = separable_blur(&x, 1, h, w, &taps, valid);
            let r: Vec<f64> = (0..ho * wo).map(|i| (i as f64 * 0.2).cos()).collect();
            let lhs: f64 = y.iter().zip(&r).map(|(a, b)| a * b).sum();
            let mut back = vec![0.0; h * w];
            separable_blur_adjoint(&r, 1, h, w, &taps, valid, &mut back);
            let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10, "valid={valid}");
        }
    }

    #[test]
    fn gaussian_taps_normalized_and_symmetric() {
        let t = gaussian_taps(11, 1.5);
        assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..5 {
            assert_eq!(t[i], t[10 - i]);
        }
    }
}
