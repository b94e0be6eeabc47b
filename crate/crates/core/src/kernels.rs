//! Raw numeric kernels on flat row-major buffers. Shapes are validated by
//! the callers in [`crate::autodiff`].

use crate::error::{Error, Result};

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`; `a`, `b`, `c` are row-major and `trans_*` selects the
/// transposed view of the stored matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above guarantee every strided access stays inside
    // the three slices, and `c` does not alias `a` or `b`.
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

/// Output extent of a convolution along one axis (floor semantics).
pub fn conv_out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("convolution stride must be >= 1".into()));
    }
    if input + 2 * pad < kernel {
        return Err(Error::InvalidArgument(format!(
            "kernel {kernel} larger than padded input {input}+2*{pad}"
        )));
    }
    Ok((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

fn im2col(g: &ConvGeom, x: &[f64], cols: &mut [f64]) {
    let ncols = g.col_cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        dst[oy * g.ow + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            plane[iy as usize * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], dx: &mut [f64]) {
    let ncols = g.col_cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * g.oh * g.ow;
    let mut out = vec![0.0; g.n * out_sz];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0; g.col_rows() * g.col_cols()]
    };
    for n in 0..g.n {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        let src = if g.is_pointwise() {
            xn
        } else {
            im2col(g, xn, &mut cols);
            &cols[..]
        };
        gemm(
            g.cout,
            g.col_rows(),
            g.col_cols(),
            w,
            false,
            src,
            false,
            &mut out[n * out_sz..(n + 1) * out_sz],
            0.0,
        );
    }
    out
}

/// Returns `(dx, dw)`; either is skipped (empty) when not requested.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Vec<f64>, Vec<f64>) {
    let in_sz = g.cin * g.h * g.w;
    let out_sz = g.cout * g.oh * g.ow;
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut dx = if want_dx { vec![0.0; g.n * in_sz] } else { Vec::new() };
    let mut dw = if want_dw { vec![0.0; w.len()] } else { Vec::new() };
    let mut cols = vec![0.0; rows * ncols];
    for n in 0..g.n {
        let dyn_ = &dy[n * out_sz..(n + 1) * out_sz];
        if want_dw {
            let xn = &x[n * in_sz..(n + 1) * in_sz];
            let src = if g.is_pointwise() {
                xn
            } else {
                im2col(g, xn, &mut cols);
                &cols[..]
            };
            gemm(g.cout, ncols, rows, dyn_, false, src, true, &mut dw, 1.0);
        }
        if want_dx {
            let dxn = &mut dx[n * in_sz..(n + 1) * in_sz];
            if g.is_pointwise() {
                gemm(rows, g.cout, ncols, w, true, dyn_, false, dxn, 0.0);
            } else {
                gemm(rows, g.cout, ncols, w, true, dyn_, false, &mut cols, 0.0);
                col2im_add(g, &cols, dxn);
            }
        }
    }
    (dx, dw)
}

/// Depthwise convolution: `g.cin == g.cout`, weight layout `(C, 1, Kh, Kw)`.
pub(crate) fn depthwise_forward(g: &ConvGeom, x: &[f64], w: &[f64]) -> Vec<f64> {
    let c = g.cin;
    let mut out = vec![0.0; g.n * c * g.oh * g.ow];
    for n in 0..g.n {
        for ch in 0..c {
            let plane = &x[(n * c + ch) * g.h * g.w..][..g.h * g.w];
            let k = &w[ch * g.kh * g.kw..][..g.kh * g.kw];
            let dst = &mut out[(n * c + ch) * g.oh * g.ow..][..g.oh * g.ow];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < g.w {
                                acc += plane[iy as usize * g.w + ix as usize] * k[ky * g.kw + kx];
                            }
                        }
                    }
                    dst[oy * g.ow + ox] = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    want_dx: bool,
    want_dw: bool,
) -> (Vec<f64>, Vec<f64>) {
    let c = g.cin;
    let mut dx = if want_dx { vec![0.0; x.len()] } else { Vec::new() };
    let mut dw = if want_dw { vec![0.0; w.len()] } else { Vec::new() };
    for n in 0..g.n {
        for ch in 0..c {
            let base_in = (n * c + ch) * g.h * g.w;
            let base_out = (n * c + ch) * g.oh * g.ow;
            let kbase = ch * g.kh * g.kw;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let d = dy[base_out + oy * g.ow + ox];
                    if d == 0.0 {
                        continue;
                    }
                    for ky in 0..g.kh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy as usize >= g.h {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix < 0 || ix as usize >= g.w {
                                continue;
                            }
                            let xi = base_in + iy as usize * g.w + ix as usize;
                            let ki = kbase + ky * g.kw + kx;
                            if want_dw {
                                dw[ki] += d * x[xi];
                            }
                            if want_dx {
                                dx[xi] += d * w[ki];
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}
