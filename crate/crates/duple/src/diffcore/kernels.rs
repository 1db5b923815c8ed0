//! Convolution and matrix kernels on plain `f64` slices.
//!
//! Convolutions are lowered to im2col plus a row-major axpy GEMM so the
//! inner loops stream over contiguous memory and auto-vectorize.  The
//! backward pass recomputes the im2col buffer instead of caching it;
//! the buffers are large relative to the weights and recomputation is
//! cheaper than holding them across the whole episode graph.

/// Output length of a strided, padded convolution along one axis.
pub fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    debug_assert!(stride > 0 && k > 0);
    debug_assert!(
        input + 2 * pad >= k,
        "conv window {k} larger than padded input {}",
        input + 2 * pad
    );
    (input + 2 * pad - k) / stride + 1
}

/// `y[m,n] = w[m,kdim] · xc[kdim,n] (+ bias[m])`, accumulated row by row.
pub fn gemm_axpy(
    y: &mut [f64],
    w: &[f64],
    xc: &[f64],
    m: usize,
    kdim: usize,
    n: usize,
    bias: Option<&[f64]>,
) {
    debug_assert_eq!(y.len(), m * n);
    debug_assert_eq!(w.len(), m * kdim);
    debug_assert_eq!(xc.len(), kdim * n);
    for i in 0..m {
        let yrow = &mut y[i * n..(i + 1) * n];
        match bias {
            Some(b) => yrow.fill(b[i]),
            None => yrow.fill(0.0),
        }
        let wrow = &w[i * kdim..(i + 1) * kdim];
        for (kk, &wv) in wrow.iter().enumerate() {
            let xrow = &xc[kk * n..(kk + 1) * n];
            for (yv, &xv) in yrow.iter_mut().zip(xrow.iter()) {
                *yv += wv * xv;
            }
        }
    }
}

/// Gradients of [`gemm_axpy`] with respect to the weights and the
/// im2col buffer.  Both output buffers are overwritten.
pub fn gemm_axpy_back(
    dy: &[f64],
    w: &[f64],
    xc: &[f64],
    m: usize,
    kdim: usize,
    n: usize,
    dw: &mut [f64],
    dxc: &mut [f64],
) {
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(dw.len(), m * kdim);
    debug_assert_eq!(dxc.len(), kdim * n);
    dxc.fill(0.0);
    for i in 0..m {
        let dyrow = &dy[i * n..(i + 1) * n];
        let wrow = &w[i * kdim..(i + 1) * kdim];
        let dwrow = &mut dw[i * kdim..(i + 1) * kdim];
        for kk in 0..kdim {
            let xrow = &xc[kk * n..(kk + 1) * n];
            let dxrow = &mut dxc[kk * n..(kk + 1) * n];
            let wv = wrow[kk];
            let mut acc = 0.0;
            for j in 0..n {
                acc += dyrow[j] * xrow[j];
                dxrow[j] += wv * dyrow[j];
            }
            dwrow[kk] = acc;
        }
    }
}

/// Per-row sums of a `[m, n]` buffer; the bias gradient of a conv/GEMM.
pub fn row_sums(dy: &[f64], m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(dy.len(), m * n);
    debug_assert_eq!(out.len(), m);
    for i in 0..m {
        out[i] = dy[i * n..(i + 1) * n].iter().sum();
    }
}

/// Valid output range of `j` such that `j*stride + kk - pad` lands
/// inside `[0, t)`; returns `(j_lo, j_hi_exclusive)` clamped to
/// `[0, t_out]`.
fn valid_range(t: usize, stride: usize, off: isize, t_out: usize) -> (usize, usize) {
    let lo = if off >= 0 {
        0
    } else {
        (((-off) as usize) + stride - 1) / stride
    };
    let hi_num = t as isize - 1 - off;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = ((hi_num as usize) / stride + 1).min(t_out);
    (lo.min(hi), hi)
}

/// Unrolls a `[c_in, t]` signal into im2col layout `[c_in*k, t_out]`.
pub fn im2col1d(
    x: &[f64],
    c_in: usize,
    t: usize,
    k: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
    xc: &mut [f64],
) {
    debug_assert_eq!(x.len(), c_in * t);
    debug_assert_eq!(xc.len(), c_in * k * t_out);
    for ci in 0..c_in {
        let xrow = &x[ci * t..(ci + 1) * t];
        for kk in 0..k {
            let row = &mut xc[(ci * k + kk) * t_out..(ci * k + kk + 1) * t_out];
            let off = kk as isize - pad as isize;
            let (lo, hi) = valid_range(t, stride, off, t_out);
            row[..lo].fill(0.0);
            for (j, rv) in row[lo..hi].iter_mut().enumerate() {
                *rv = xrow[((lo + j) * stride).wrapping_add_signed(off)];
            }
            row[hi..].fill(0.0);
        }
    }
}

/// Scatter-adds an im2col-layout gradient back onto the `[c_in, t]`
/// input gradient.  `dx` is overwritten.
pub fn col2im1d(
    dxc: &[f64],
    c_in: usize,
    t: usize,
    k: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
    dx: &mut [f64],
) {
    debug_assert_eq!(dx.len(), c_in * t);
    debug_assert_eq!(dxc.len(), c_in * k * t_out);
    dx.fill(0.0);
    for ci in 0..c_in {
        let dxrow = &mut dx[ci * t..(ci + 1) * t];
        for kk in 0..k {
            let row = &dxc[(ci * k + kk) * t_out..(ci * k + kk + 1) * t_out];
            let off = kk as isize - pad as isize;
            let (lo, hi) = valid_range(t, stride, off, t_out);
            for (j, &rv) in row[lo..hi].iter().enumerate() {
                dxrow[((lo + j) * stride).wrapping_add_signed(off)] += rv;
            }
        }
    }
}

/// Unrolls a `[c_in, h, w]` image into im2col layout
/// `[c_in*kh*kw, h_out*w_out]`.
#[allow(clippy::too_many_arguments)]
pub fn im2col2d(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    xc: &mut [f64],
) {
    debug_assert_eq!(x.len(), c_in * h * w);
    let n = h_out * w_out;
    debug_assert_eq!(xc.len(), c_in * kh * kw * n);
    for ci in 0..c_in {
        let xch = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut xc[(ci * kh * kw + ky * kw + kx) * n..][..n];
                let offx = kx as isize - pad as isize;
                let (lox, hix) = valid_range(w, stride, offx, w_out);
                for oy in 0..h_out {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut row[oy * w_out..(oy + 1) * w_out];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let srow = &xch[(sy as usize) * w..(sy as usize + 1) * w];
                    dst[..lox].fill(0.0);
                    for (ox, dv) in dst[lox..hix].iter_mut().enumerate() {
                        *dv = srow[((lox + ox) * stride).wrapping_add_signed(offx)];
                    }
                    dst[hix..].fill(0.0);
                }
            }
        }
    }
}

/// Scatter-adds a 2-D im2col-layout gradient back onto the
/// `[c_in, h, w]` input gradient.  `dx` is overwritten.
#[allow(clippy::too_many_arguments)]
pub fn col2im2d(
    dxc: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    dx: &mut [f64],
) {
    debug_assert_eq!(dx.len(), c_in * h * w);
    let n = h_out * w_out;
    debug_assert_eq!(dxc.len(), c_in * kh * kw * n);
    dx.fill(0.0);
    for ci in 0..c_in {
        let base = ci * h * w;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &dxc[(ci * kh * kw + ky * kw + kx) * n..][..n];
                let offx = kx as isize - pad as isize;
                let (lox, hix) = valid_range(w, stride, offx, w_out);
                for oy in 0..h_out {
                    let sy = (oy * stride + ky) as isize - pad as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[oy * w_out..(oy + 1) * w_out];
                    let drow = &mut dx[base + (sy as usize) * w..][..w];
                    for (ox, &sv) in src[lox..hix].iter().enumerate() {
                        drow[((lox + ox) * stride).wrapping_add_signed(offx)] += sv;
                    }
                }
            }
        }
    }
}

/// `y[m] = w[m,n] · x[n] (+ b[m])`.
pub fn matvec(w: &[f64], x: &[f64], b: Option<&[f64]>, m: usize, n: usize, y: &mut [f64]) {
    debug_assert_eq!(w.len(), m * n);
    debug_assert_eq!(x.len(), n);
    debug_assert_eq!(y.len(), m);
    for i in 0..m {
        let wrow = &w[i * n..(i + 1) * n];
        let mut acc = match b {
            Some(b) => b[i],
            None => 0.0,
        };
        for (wv, xv) in wrow.iter().zip(x.iter()) {
            acc += wv * xv;
        }
        y[i] = acc;
    }
}

/// Gradients of [`matvec`]: `dw` is accumulated into, `dx` overwritten.
pub fn matvec_back(dy: &[f64], w: &[f64], x: &[f64], m: usize, n: usize, dw: &mut [f64], dx: &mut [f64]) {
    debug_assert_eq!(dy.len(), m);
    debug_assert_eq!(dw.len(), m * n);
    debug_assert_eq!(dx.len(), n);
    dx.fill(0.0);
    for i in 0..m {
        let g = dy[i];
        let wrow = &w[i * n..(i + 1) * n];
        let dwrow = &mut dw[i * n..(i + 1) * n];
        for j in 0..n {
            dwrow[j] += g * x[j];
            dx[j] += g * wrow[j];
        }
    }
}
