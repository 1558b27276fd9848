//! Raw forward/backward kernels over contiguous slices.

use super::Scalar;

/// Row-major `C = alpha * op(A) op(B) + beta * C` with `op(A)` of shape
/// `m x k` and `op(B)` of shape `k x n`. A transposed operand is stored in
/// its own row-major layout (`k x m` or `n x k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
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
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one `[C, H, W]` image into `[C*kh*kw, Ho*Wo]` patches.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *o = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.c {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv_forward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    f: usize,
    bias: Option<&[T]>,
) -> Vec<T> {
    let hw = g.col_cols();
    let mut y = vec![T::zero(); n * f * hw];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); g.col_rows() * hw]
    };
    for b in 0..n {
        let xb = &x[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
        let yb = &mut y[b * f * hw..(b + 1) * f * hw];
        if let Some(bias) = bias {
            for (fi, bv) in bias.iter().enumerate() {
                yb[fi * hw..(fi + 1) * hw].fill(*bv);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let src: &[T] = if g.is_pointwise() {
            xb
        } else {
            im2col(xb, g, &mut cols);
            &cols
        };
        gemm(false, false, f, g.col_rows(), hw, T::one(), w, src, beta, yb);
    }
    y
}

/// Returns `(dx, dw, db)`; `dx` is skipped when not needed.
#[allow(clippy::too_many_arguments)]
pub fn conv_backward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    f: usize,
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let hw = g.col_cols();
    let ckk = g.col_rows();
    let image = g.c * g.h * g.w;
    let mut dx = need_dx.then(|| vec![T::zero(); n * image]);
    let mut dw = vec![T::zero(); if need_dw { f * ckk } else { 0 }];
    let mut db = vec![T::zero(); f];
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { ckk * hw }];
    let mut dcols = vec![T::zero(); if need_dx && !g.is_pointwise() { ckk * hw } else { 0 }];
    for b in 0..n {
        let xb = &x[b * image..(b + 1) * image];
        let dyb = &dy[b * f * hw..(b + 1) * f * hw];
        for fi in 0..f {
            let s: f64 = dyb[fi * hw..(fi + 1) * hw].iter().map(|v| v.as_f64()).sum();
            db[fi] = db[fi] + T::from_f64(s);
        }
        if need_dw {
            let src: &[T] = if g.is_pointwise() {
                xb
            } else {
                im2col(xb, g, &mut cols);
                &cols
            };
            gemm(false, true, f, hw, ckk, T::one(), dyb, src, T::one(), &mut dw);
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * image..(b + 1) * image];
            if g.is_pointwise() {
                gemm(true, false, ckk, f, hw, T::one(), w, dyb, T::zero(), dxb);
            } else {
                gemm(true, false, ckk, f, hw, T::one(), w, dyb, T::zero(), &mut dcols);
                col2im(&dcols, g, dxb);
            }
        }
    }
    (dx, dw, db)
}

/// Max pooling over `planes` planes of `h x w`; returns values and the
/// in-plane index of each maximum (first wins on ties).
pub fn maxpool_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
) -> (Vec<T>, Vec<u32>) {
    let ho = (h - k) / s + 1;
    let wo = (w - k) / s + 1;
    let mut y = Vec::with_capacity(planes * ho * wo);
    let mut idx = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = oy * s * w + ox * s;
                for i in 0..k {
                    for j in 0..k {
                        let at = (oy * s + i) * w + ox * s + j;
                        if plane[at] > plane[best] {
                            best = at;
                        }
                    }
                }
                y.push(plane[best]);
                idx.push(best as u32);
            }
        }
    }
    (y, idx)
}

/// Per-axis bilinear taps for upsampling `len` by `factor` (half-pixel centers).
pub fn bilinear_taps(len: usize, factor: usize) -> Vec<(usize, usize, f64)> {
    (0..len * factor)
        .map(|o| {
            let src = ((o as f64 + 0.5) / factor as f64 - 0.5).clamp(0.0, (len - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let mut y = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut y[p * ho * wo..(p + 1) * ho * wo];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = (1.0 - fy) * ((1.0 - fx) * src[y0 * w + x0].as_f64() + fx * src[y0 * w + x1].as_f64())
                    + fy * ((1.0 - fx) * src[y1 * w + x0].as_f64() + fx * src[y1 * w + x1].as_f64());
                dst[oy * wo + ox] = T::from_f64(v);
            }
        }
    }
    y
}

pub fn upsample_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    h: usize,
    w: usize,
    factor: usize,
) -> Vec<T> {
    let ty = bilinear_taps(h, factor);
    let tx = bilinear_taps(w, factor);
    let (ho, wo) = (h * factor, w * factor);
    let mut dx = vec![0.0f64; planes * h * w];
    for p in 0..planes {
        let g = &dy[p * ho * wo..(p + 1) * ho * wo];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * wo + ox].as_f64();
                d[y0 * w + x0] += (1.0 - fy) * (1.0 - fx) * v;
                d[y0 * w + x1] += (1.0 - fy) * fx * v;
                d[y1 * w + x0] += fy * (1.0 - fx) * v;
                d[y1 * w + x1] += fy * fx * v;
            }
        }
    }
    dx.into_iter().map(T::from_f64).collect()
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Group statistics `(mean, 1/std)` per `(n, group)`.
pub fn group_stats<T: Scalar>(x: &[T], n: usize, c: usize, hw: usize, groups: usize) -> Vec<(f64, f64)> {
    let size = c / groups * hw;
    (0..n * groups)
        .map(|i| {
            let s = &x[i * size..(i + 1) * size];
            let mean = s.iter().map(|v| v.as_f64()).sum::<f64>() / size as f64;
            let var = s
                .iter()
                .map(|v| {
                    let d = v.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / size as f64;
            (mean, 1.0 / (var + GROUP_NORM_EPS).sqrt())
        })
        .collect()
}

/// Log-softmax over each contiguous plane of `len` values.
pub fn log_softmax_planes<T: Scalar>(x: &[T], len: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(x.len());
    for plane in x.chunks(len) {
        let max = plane
            .iter()
            .fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let sum: f64 = plane.iter().map(|v| (v.as_f64() - max).exp()).sum();
        let lse = max + sum.ln();
        y.extend(plane.iter().map(|v| T::from_f64(v.as_f64() - lse)));
    }
    y
}
