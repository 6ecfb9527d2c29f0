//! 2-D cross-correlation via im2col and GEMM.

use crate::error::{ensure, Result};
use crate::tensor::Tensor;

pub(super) struct Geometry {
    n: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    h_out: usize,
    w_out: usize,
}

impl Geometry {
    pub(super) fn new(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        ensure!(input.len() == 4, "conv2d input must be NCHW, got {input:?}");
        ensure!(
            kernel.len() == 4,
            "conv2d kernel must be [C_out,C_in,k,k], got {kernel:?}"
        );
        let (n, c_in, h, w) = (input[0], input[1], input[2], input[3]);
        let (c_out, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        ensure!(
            kc == c_in,
            "conv2d channel mismatch: input has {c_in}, kernel expects {kc}"
        );
        ensure!(
            kh == kw && kh % 2 == 1,
            "conv2d kernel must be square with odd side, got {kh}x{kw}"
        );
        ensure!(stride >= 1, "conv2d stride must be at least 1");
        ensure!(
            bias == [c_out],
            "conv2d bias must have shape [{c_out}], got {bias:?}"
        );
        ensure!(
            h + 2 * padding >= kh && w + 2 * padding >= kw,
            "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        );
        let h_out = (h + 2 * padding - kh) / stride + 1;
        let w_out = (w + 2 * padding - kw) / stride + 1;
        Ok(Geometry {
            n,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            padding,
            h_out,
            w_out,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    /// A 1x1, stride-1, unpadded convolution reads its input as the column matrix.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.padding == 0
    }

    /// Output rows per im2col band, sized so a band stays cache resident.
    fn band_rows(&self) -> usize {
        (BAND_COLUMNS / self.w_out).clamp(1, self.h_out)
    }

    /// Patch matrix for output rows `row0..row0 + rows`: `patch_len x (rows * w_out)`.
    fn im2col_band(&self, x: &[f64], row0: usize, rows: usize, cols: &mut [f64]) {
        let t = rows * self.w_out;
        let pad = self.padding as isize;
        for c in 0..self.c_in {
            let src = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let dst = &mut cols[row * t..(row + 1) * t];
                    for r in 0..rows {
                        let oi = row0 + r;
                        let ii = (oi * self.stride + ki) as isize - pad;
                        let line = &mut dst[r * self.w_out..(r + 1) * self.w_out];
                        if ii < 0 || ii >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let srow = &src[ii as usize * self.w..(ii as usize + 1) * self.w];
                        for (oj, v) in line.iter_mut().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - pad;
                            *v = if jj < 0 || jj >= self.w as isize {
                                0.0
                            } else {
                                srow[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_band(&self, cols: &[f64], row0: usize, rows: usize, dx: &mut [f64]) {
        let t = rows * self.w_out;
        let pad = self.padding as isize;
        for c in 0..self.c_in {
            let dst = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..self.k {
                for kj in 0..self.k {
                    let row = (c * self.k + ki) * self.k + kj;
                    let src = &cols[row * t..(row + 1) * t];
                    for r in 0..rows {
                        let oi = row0 + r;
                        let ii = (oi * self.stride + ki) as isize - pad;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let drow = &mut dst[ii as usize * self.w..(ii as usize + 1) * self.w];
                        let srow = &src[r * self.w_out..(r + 1) * self.w_out];
                        for (oj, v) in srow.iter().enumerate() {
                            let jj = (oj * self.stride + kj) as isize - pad;
                            if jj >= 0 && jj < self.w as isize {
                                drow[jj as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Target number of output positions per im2col band.
const BAND_COLUMNS: usize = 512;

/// `c (m x n) = a (m x k) * b (k x n) + beta * c`, all operands strided.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
    rsc: isize,
) {
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
        (rows.saturating_sub(1)) as isize * rs + (cols.saturating_sub(1)) as isize * cs
    };
    assert!(last(m, k, rsa, csa) < a.len() as isize);
    assert!(last(k, n, rsb, csb) < b.len() as isize);
    assert!(last(m, n, rsc, 1) < c.len() as isize);
    // SAFETY: the assertions above spell out the invariant every caller
    // upholds: each slice covers all indices reachable through its strides,
    // and `c` is exclusively borrowed.
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
            rsc,
            1,
        );
    }
}

pub(super) fn forward(geom: &Geometry, x: &[f64], kernel: &[f64], bias: &[f64]) -> Tensor {
    let (kl, p) = (geom.patch_len(), geom.out_plane());
    let in_len = geom.c_in * geom.h * geom.w;
    let out_len = geom.c_out * p;
    let mut out = vec![0.0; geom.n * out_len];
    let band = geom.band_rows();
    let mut cols = vec![0.0; kl * band * geom.w_out];
    for s in 0..geom.n {
        let xs = &x[s * in_len..(s + 1) * in_len];
        let os = &mut out[s * out_len..(s + 1) * out_len];
        for (co, plane) in os.chunks_mut(p).enumerate() {
            plane.fill(bias[co]);
        }
        if geom.is_pointwise() {
            let ka = (kl as isize, 1);
            gemm(geom.c_out, kl, p, kernel, ka, xs, (p as isize, 1), 1.0, os, p as isize);
            continue;
        }
        for row0 in (0..geom.h_out).step_by(band) {
            let rows = band.min(geom.h_out - row0);
            let t = rows * geom.w_out;
            geom.im2col_band(xs, row0, rows, &mut cols);
            gemm(
                geom.c_out,
                kl,
                t,
                kernel,
                (kl as isize, 1),
                &cols,
                (t as isize, 1),
                1.0,
                &mut os[row0 * geom.w_out..],
                p as isize,
            );
        }
    }
    Tensor::new(vec![geom.n, geom.c_out, geom.h_out, geom.w_out], out).expect("conv output shape")
}

pub(super) fn backward(
    geom: &Geometry,
    x: &[f64],
    kernel: &[f64],
    g: &[f64],
    mut dx: Option<&mut [f64]>,
    mut dk: Option<&mut [f64]>,
) {
    let (kl, p) = (geom.patch_len(), geom.out_plane());
    let in_len = geom.c_in * geom.h * geom.w;
    let out_len = geom.c_out * p;
    let band = geom.band_rows();
    let mut cols = vec![0.0; kl * band * geom.w_out];
    let mut dcols = vec![0.0; kl * band * geom.w_out];
    let kt = (1, kl as isize);
    for s in 0..geom.n {
        let gs = &g[s * out_len..(s + 1) * out_len];
        let xs = &x[s * in_len..(s + 1) * in_len];
        if geom.is_pointwise() {
            if let Some(dk) = dk.as_deref_mut() {
                gemm(geom.c_out, p, kl, gs, (p as isize, 1), xs, (1, p as isize), 1.0, dk, kl as isize);
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxs = &mut dx[s * in_len..(s + 1) * in_len];
                gemm(kl, geom.c_out, p, kernel, kt, gs, (p as isize, 1), 1.0, dxs, p as isize);
            }
            continue;
        }
        for row0 in (0..geom.h_out).step_by(band) {
            let rows = band.min(geom.h_out - row0);
            let t = rows * geom.w_out;
            let g_band = &gs[row0 * geom.w_out..];
            if let Some(dk) = dk.as_deref_mut() {
                // dK (c_out x kl) += G_band (c_out x t) * cols^T (t x kl)
                geom.im2col_band(xs, row0, rows, &mut cols);
                gemm(geom.c_out, t, kl, g_band, (p as isize, 1), &cols, (1, t as isize), 1.0, dk, kl as isize);
            }
            if let Some(dx) = dx.as_deref_mut() {
                // dcols (kl x t) = K^T (kl x c_out) * G_band (c_out x t)
                gemm(kl, geom.c_out, t, kernel, kt, g_band, (p as isize, 1), 0.0, &mut dcols, t as isize);
                geom.col2im_band(&dcols, row0, rows, &mut dx[s * in_len..(s + 1) * in_len]);
            }
        }
    }
}

pub(super) fn bias_grad(geom: &Geometry, g: &[f64], d: &mut [f64]) {
    let p = geom.out_plane();
    for (i, plane) in g.chunks(p).enumerate() {
        d[i % geom.c_out] += plane.iter().sum::<f64>();
    }
}
