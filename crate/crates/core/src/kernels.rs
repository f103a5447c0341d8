//! Slice-level forward and backward kernels.
//!
//! Every function works on contiguous row-major buffers. Shapes are
//! validated by the callers in `graph`; here they are only debug-asserted.

use crate::tensor::Scalar;

/// Row-major matrix operand, optionally read transposed.
#[derive(Clone, Copy)]
pub struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    /// Distance between consecutive rows in `data` (>= cols).
    pub stride: usize,
    pub transposed: bool,
}

impl<'a, T> Mat<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            stride: cols,
            transposed: false,
        }
    }

    pub fn strided(data: &'a [T], rows: usize, cols: usize, stride: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            stride,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical (rows, cols) after the optional transpose.
    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    /// Logical (row stride, col stride).
    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.stride as isize)
        } else {
            (self.stride as isize, 1)
        }
    }

    fn fits(&self) -> bool {
        self.rows == 0 || self.cols == 0 || (self.rows - 1) * self.stride + self.cols <= self.data.len()
    }
}

/// `c[m×n] (row stride ldc) = a·b + (accumulate ? c : 0)`.
pub fn gemm<T: Scalar>(a: Mat<'_, T>, b: Mat<'_, T>, c: &mut [T], ldc: usize, accumulate: bool) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert!(a.fits() && b.fits(), "gemm operand out of bounds");
    assert!(ldc >= n, "gemm output stride");
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * ldc + n <= c.len(), "gemm output out of bounds");
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                c[i * ldc..i * ldc + n].fill(T::zero());
            }
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: bounds of a, b and c were asserted above for the strides used.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over a single `C×H×W` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    /// Output spatial size, or `None` when it would be smaller than 1.
    pub fn out_hw(&self) -> Option<(usize, usize)> {
        let span_h = self.h + 2 * self.padding;
        let span_w = self.w + 2 * self.padding;
        if self.stride == 0 || span_h < self.k || span_w < self.k {
            return None;
        }
        Some(((span_h - self.k) / self.stride + 1, (span_w - self.k) / self.stride + 1))
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Unfolds `x` into a `(c_in·k·k) × (ho·wo)` patch matrix.
fn im2col<T: Scalar>(x: &[T], g: ConvGeom, ho: usize, wo: usize, cols: &mut [T]) {
    let ConvGeom {
        c_in,
        h,
        w,
        k,
        stride,
        padding,
    } = g;
    let plane = ho * wo;
    for c in 0..c_in {
        let src = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        let lo = padding.saturating_sub(kx).min(wo);
                        let hi = (w + padding).saturating_sub(kx).min(wo).max(lo);
                        line.fill(T::zero());
                        if lo < hi {
                            line[lo..hi].copy_from_slice(&srow[lo + kx - padding..hi + kx - padding]);
                        }
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Folds a patch-matrix gradient back onto the input, accumulating.
fn col2im<T: Scalar>(cols: &[T], g: ConvGeom, ho: usize, wo: usize, dx: &mut [T]) {
    let ConvGeom {
        c_in,
        h,
        w,
        k,
        stride,
        padding,
    } = g;
    let plane = ho * wo;
    for c in 0..c_in {
        let dst = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    if stride == 1 {
                        let lo = padding.saturating_sub(kx).min(wo);
                        let hi = (w + padding).saturating_sub(kx).min(wo).max(lo);
                        if lo < hi {
                            let line = &src[oy * wo + lo..oy * wo + hi];
                            for (d, &v) in drow[lo + kx - padding..hi + kx - padding].iter_mut().zip(line) {
                                *d += v;
                            }
                        }
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - padding as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. `weight` is `c_out × c_in × k × k`.
pub fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    c_out: usize,
    g: ConvGeom,
) -> Vec<T> {
    let (ho, wo) = g.out_hw().expect("validated conv geometry");
    let plane = ho * wo;
    let patch = g.c_in * g.k * g.k;
    let mut out = vec![T::zero(); c_out * plane];
    let wmat = Mat::new(weight, c_out, patch);
    if g.is_pointwise() {
        gemm(wmat, Mat::new(x, patch, plane), &mut out, plane, false);
    } else {
        let mut cols = vec![T::zero(); patch * plane];
        im2col(x, g, ho, wo, &mut cols);
        gemm(wmat, Mat::new(&cols, patch, plane), &mut out, plane, false);
    }
    if let Some(b) = bias {
        for (row, &bv) in out.chunks_exact_mut(plane).zip(b) {
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

/// Gradients of `conv2d_forward`; each requested buffer is accumulated into.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    c_out: usize,
    g: ConvGeom,
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (ho, wo) = g.out_hw().expect("validated conv geometry");
    let plane = ho * wo;
    let patch = g.c_in * g.k * g.k;
    let dmat = Mat::new(dout, c_out, plane);
    if let Some(db) = db {
        for (acc, row) in db.iter_mut().zip(dout.chunks_exact(plane)) {
            *acc += row.iter().copied().sum::<T>();
        }
    }
    let pointwise = g.is_pointwise();
    if let Some(dw) = dw {
        if pointwise {
            gemm(dmat, Mat::new(x, patch, plane).t(), dw, patch, true);
        } else {
            let mut cols = vec![T::zero(); patch * plane];
            im2col(x, g, ho, wo, &mut cols);
            gemm(dmat, Mat::new(&cols, patch, plane).t(), dw, patch, true);
        }
    }
    if let Some(dx) = dx {
        let wmat = Mat::new(weight, c_out, patch).t();
        if pointwise {
            gemm(wmat, dmat, dx, plane, true);
        } else {
            let mut dcols = vec![T::zero(); patch * plane];
            gemm(wmat, dmat, &mut dcols, plane, false);
            col2im(&dcols, g, ho, wo, dx);
        }
    }
}

/// 2×2 stride-2 transposed convolution. `weight` is `c_in × c_out × 2 × 2`;
/// output is `c_out × 2h × 2w`.
pub fn conv_transpose2x2_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
) -> Vec<T> {
    let plane = h * w;
    let mut cols = vec![T::zero(); c_out * 4 * plane];
    gemm(
        Mat::new(weight, c_in, c_out * 4).t(),
        Mat::new(x, c_in, plane),
        &mut cols,
        plane,
        false,
    );
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c_out * oh * ow];
    for co in 0..c_out {
        let b = bias.map_or(T::zero(), |b| b[co]);
        for a in 0..2 {
            for bb in 0..2 {
                let src = &cols[(co * 4 + a * 2 + bb) * plane..][..plane];
                for i in 0..h {
                    let dst = &mut out[(co * oh + 2 * i + a) * ow..][..ow];
                    for j in 0..w {
                        dst[2 * j + bb] = src[i * w + j] + b;
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2x2_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    dout: &[T],
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let plane = h * w;
    let (oh, ow) = (2 * h, 2 * w);
    if let Some(db) = db {
        for (acc, ch) in db.iter_mut().zip(dout.chunks_exact(oh * ow)) {
            *acc += ch.iter().copied().sum::<T>();
        }
    }
    if dx.is_none() && dw.is_none() {
        return;
    }
    let mut dcols = vec![T::zero(); c_out * 4 * plane];
    for co in 0..c_out {
        for a in 0..2 {
            for bb in 0..2 {
                let dst = &mut dcols[(co * 4 + a * 2 + bb) * plane..][..plane];
                for i in 0..h {
                    let src = &dout[(co * oh + 2 * i + a) * ow..][..ow];
                    for j in 0..w {
                        dst[i * w + j] = src[2 * j + bb];
                    }
                }
            }
        }
    }
    let dmat = Mat::new(&dcols, c_out * 4, plane);
    if let Some(dx) = dx {
        gemm(Mat::new(weight, c_in, c_out * 4), dmat, dx, plane, true);
    }
    if let Some(dw) = dw {
        gemm(Mat::new(x, c_in, plane), dmat.t(), dw, c_out * 4, true);
    }
}

/// Per-channel `k×k` convolution with stride 1 and the given padding.
/// Accumulates in kernel order and adds the bias last.
pub fn depthwise_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    padding: usize,
) -> Vec<T> {
    let ho = h + 2 * padding + 1 - k;
    let wo = w + 2 * padding + 1 - k;
    let mut out = vec![T::zero(); c * ho * wo];
    for ch in 0..c {
        let src = &x[ch * h * w..][..h * w];
        let ker = &weight[ch * k * k..][..k * k];
        let dst = &mut out[ch * ho * wo..][..ho * wo];
        for oy in 0..ho {
            let row = &mut dst[oy * wo..][..wo];
            for ky in 0..k {
                let Some(iy) = (oy + ky).checked_sub(padding).filter(|&iy| iy < h) else {
                    continue;
                };
                let line = &src[iy * w..][..w];
                for kx in 0..k {
                    let (lo, hi) = valid_cols(wo, w, kx, padding);
                    if lo == hi {
                        continue;
                    }
                    let kv = ker[ky * k + kx];
                    let shifted = &line[lo + kx - padding..hi + kx - padding];
                    for (o, &v) in row[lo..hi].iter_mut().zip(shifted) {
                        *o += kv * v;
                    }
                }
            }
        }
        if let Some(b) = bias {
            dst.iter_mut().for_each(|o| *o += b[ch]);
        }
    }
    out
}

/// Output columns `[lo, hi)` whose tap `kx` lands inside a row of width `w`.
fn valid_cols(wo: usize, w: usize, kx: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(kx).min(wo);
    let hi = (w + padding).saturating_sub(kx).min(wo).max(lo);
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    padding: usize,
    dout: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    mut db: Option<&mut [T]>,
) {
    let ho = h + 2 * padding + 1 - k;
    let wo = w + 2 * padding + 1 - k;
    for ch in 0..c {
        let src = &x[ch * h * w..][..h * w];
        let ker = &weight[ch * k * k..][..k * k];
        let g = &dout[ch * ho * wo..][..ho * wo];
        if let Some(db) = db.as_deref_mut() {
            db[ch] += g.iter().copied().sum::<T>();
        }
        for oy in 0..ho {
            let grow = &g[oy * wo..][..wo];
            for ky in 0..k {
                let Some(iy) = (oy + ky).checked_sub(padding).filter(|&iy| iy < h) else {
                    continue;
                };
                for kx in 0..k {
                    let (lo, hi) = valid_cols(wo, w, kx, padding);
                    if lo == hi {
                        continue;
                    }
                    let start = iy * w + lo + kx - padding;
                    let len = hi - lo;
                    if let Some(dw) = dw.as_deref_mut() {
                        let line = &src[start..start + len];
                        dw[ch * k * k + ky * k + kx] +=
                            grow[lo..hi].iter().zip(line).map(|(&gv, &v)| gv * v).sum::<T>();
                    }
                    if let Some(dx) = dx.as_deref_mut() {
                        let kv = ker[ky * k + kx];
                        let base = ch * h * w + start;
                        for (d, &gv) in dx[base..base + len].iter_mut().zip(&grow[lo..hi]) {
                            *d += gv * kv;
                        }
                    }
                }
            }
        }
    }
}

/// Standard normal CDF.
pub fn phi_cdf<T: Scalar>(x: T) -> T {
    T::lit(0.5) * (T::one() + (x * T::lit(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

/// Standard normal density.
pub fn phi_pdf<T: Scalar>(x: T) -> T {
    T::lit(1.0 / (2.0 * std::f64::consts::PI).sqrt()) * (-(x * x) * T::lit(0.5)).exp()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// In-place softmax over a contiguous row, with max subtraction.
pub fn softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = T::one() / total;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Geometry of multi-head attention over `n` tokens of width `d`.
#[derive(Clone, Copy, Debug)]
pub struct AttnGeom {
    pub n: usize,
    pub d: usize,
    pub heads: usize,
}

impl AttnGeom {
    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    pub fn scale<T: Scalar>(&self) -> T {
        T::one() / T::lit(self.head_dim() as f64).sqrt()
    }
}

/// Softmax(Q_h K_hᵀ / √head_dim) for every head, laid out `heads × n × n`.
pub fn attention_probs<T: Scalar>(q: &[T], k: &[T], g: AttnGeom) -> Vec<T> {
    let AttnGeom { n, d, heads } = g;
    let hd = g.head_dim();
    let mut probs = vec![T::zero(); heads * n * n];
    for h in 0..heads {
        let p = &mut probs[h * n * n..][..n * n];
        let qh = Mat::strided(&q[h * hd..], n, hd, d);
        let kh = Mat::strided(&k[h * hd..], n, hd, d);
        gemm(qh, kh.t(), p, n, false);
        let scale = g.scale::<T>();
        for row in p.chunks_exact_mut(n) {
            row.iter_mut().for_each(|v| *v *= scale);
            softmax_row(row);
        }
    }
    probs
}

/// Concatenated per-head `P_h V_h`, `n × d`.
pub fn attention_apply<T: Scalar>(probs: &[T], v: &[T], g: AttnGeom) -> Vec<T> {
    let AttnGeom { n, d, heads } = g;
    let hd = g.head_dim();
    let mut out = vec![T::zero(); n * d];
    for h in 0..heads {
        let p = Mat::new(&probs[h * n * n..][..n * n], n, n);
        let vh = Mat::strided(&v[h * hd..], n, hd, d);
        gemm(p, vh, &mut out[h * hd..], d, false);
    }
    out
}

/// Gradients of the fused attention; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
    g: AttnGeom,
    dq: Option<&mut [T]>,
    dk: Option<&mut [T]>,
    dv: Option<&mut [T]>,
) {
    let AttnGeom { n, d, heads } = g;
    let hd = g.head_dim();
    let scale = g.scale::<T>();
    let mut dq = dq;
    let mut dk = dk;
    let mut dv = dv;
    let mut ds = vec![T::zero(); n * n];
    for h in 0..heads {
        let p = &probs[h * n * n..][..n * n];
        let pm = Mat::new(p, n, n);
        let doh = Mat::strided(&dout[h * hd..], n, hd, d);
        if let Some(dv) = dv.as_deref_mut() {
            gemm(pm.t(), doh, &mut dv[h * hd..], d, true);
        }
        if dq.is_none() && dk.is_none() {
            continue;
        }
        let vh = Mat::strided(&v[h * hd..], n, hd, d);
        gemm(doh, vh.t(), &mut ds, n, false);
        for (drow, prow) in ds.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
            let dot = drow
                .iter()
                .zip(prow)
                .fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            for (dv_, &pv) in drow.iter_mut().zip(prow) {
                *dv_ = pv * (*dv_ - dot) * scale;
            }
        }
        let dsm = Mat::new(&ds, n, n);
        if let Some(dq) = dq.as_deref_mut() {
            let kh = Mat::strided(&k[h * hd..], n, hd, d);
            gemm(dsm, kh, &mut dq[h * hd..], d, true);
        }
        if let Some(dk) = dk.as_deref_mut() {
            let qh = Mat::strided(&q[h * hd..], n, hd, d);
            gemm(dsm.t(), qh, &mut dk[h * hd..], d, true);
        }
    }
}
