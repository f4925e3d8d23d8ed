//! im2col convolution kernels backed by a strided GEMM.
//!
//! Input channels that are identically zero over the batch are dropped from the
//! column matrix, and output channels outside `out_active` are never computed.
//! Under channel gating this makes a thin step cost roughly p² of a full one.

/// `c = alpha * a·b + beta * c` over strided row/column views.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
    rsc: usize,
    csc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            for j in 0..n {
                c[i * rsc + j * csc] *= beta;
            }
        }
        return;
    }
    assert!((m - 1) * rsa + (k - 1) * csa < a.len(), "gemm: a out of bounds");
    assert!((k - 1) * rsb + (n - 1) * csb < b.len(), "gemm: b out of bounds");
    assert!((m - 1) * rsc + (n - 1) * csc < c.len(), "gemm: c out of bounds");
    // SAFETY: every index reachable from the strides was bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn plane_out(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn cols(&self) -> usize {
        self.n * self.plane_out()
    }
}

/// Column matrix of shape (|channels|·k·k) × (N·H_out·W_out).
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, channels: &[usize]) -> Vec<f64> {
    let kk = g.k * g.k;
    let ncols = g.cols();
    let plane_out = g.plane_out();
    let mut cols = vec![0.0; channels.len() * kk * ncols];
    for (ci_pos, &ci) in channels.iter().enumerate() {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci_pos * kk + ky * g.k + kx) * ncols;
                for n in 0..g.n {
                    let src = &x[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut cols[row + n * plane_out..][..plane_out];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        let dst_row = &mut dst[oy * g.w_out..][..g.w_out];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a full-channel column matrix back into an input-shaped buffer.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let kk = g.k * g.k;
    let ncols = g.cols();
    let plane_out = g.plane_out();
    for ci in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (ci * kk + ky * g.k + kx) * ncols;
                for n in 0..g.n {
                    let src = &cols[row + n * plane_out..][..plane_out];
                    let dst = &mut dx[(n * g.c_in + ci) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..g.h_out {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[oy * g.w_out..][..g.w_out];
                        let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                        for (ox, s) in src_row.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Indices of input channels with at least one nonzero value across the batch.
pub(crate) fn nonzero_channels(x: &[f64], g: &ConvGeom) -> Vec<usize> {
    let plane = g.h * g.w;
    (0..g.c_in)
        .filter(|&c| {
            (0..g.n).any(|n| {
                x[(n * g.c_in + c) * plane..][..plane]
                    .iter()
                    .any(|&v| v != 0.0)
            })
        })
        .collect()
}

/// Gathers `weight[out, in, :, :]` for the given channel subsets into a dense
/// |outs| × (|ins|·k·k) matrix.
pub(crate) fn gather_weight(weight: &[f64], g: &ConvGeom, outs: &[usize], ins: &[usize]) -> Vec<f64> {
    let kk = g.k * g.k;
    let mut w = Vec::with_capacity(outs.len() * ins.len() * kk);
    for &o in outs {
        for &i in ins {
            w.extend_from_slice(&weight[(o * g.c_in + i) * kk..][..kk]);
        }
    }
    w
}

pub(crate) struct ConvForward {
    pub y: Vec<f64>,
    pub cols: Vec<f64>,
    pub in_idx: Vec<usize>,
}

pub(crate) fn conv_forward(
    x: &[f64],
    weight: &[f64],
    bias: Option<&[f64]>,
    g: &ConvGeom,
    out_idx: &[usize],
) -> ConvForward {
    let in_idx = nonzero_channels(x, g);
    let cols = im2col(x, g, &in_idx);
    let kdim = in_idx.len() * g.k * g.k;
    let wg = gather_weight(weight, g, out_idx, &in_idx);
    let ncols = g.cols();
    let mut yg = vec![0.0; out_idx.len() * ncols];
    gemm(
        out_idx.len(),
        kdim,
        ncols,
        &wg,
        kdim,
        1,
        &cols,
        ncols,
        1,
        0.0,
        &mut yg,
        ncols,
        1,
    );
    let plane_out = g.plane_out();
    let mut y = vec![0.0; g.n * g.c_out * plane_out];
    for (j, &o) in out_idx.iter().enumerate() {
        let b = bias.map_or(0.0, |b| b[o]);
        for n in 0..g.n {
            let src = &yg[j * ncols + n * plane_out..][..plane_out];
            let dst = &mut y[(n * g.c_out + o) * plane_out..][..plane_out];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = s + b;
            }
        }
    }
    ConvForward { y, cols, in_idx }
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    dy: &[f64],
    weight: &[f64],
    g: &ConvGeom,
    fwd_cols: &[f64],
    in_idx: &[usize],
    out_idx: &[usize],
    need_dx: bool,
) -> ConvGrads {
    let kk = g.k * g.k;
    let ncols = g.cols();
    let plane_out = g.plane_out();
    let m = out_idx.len();

    let mut dyg = vec![0.0; m * ncols];
    for (j, &o) in out_idx.iter().enumerate() {
        for n in 0..g.n {
            dyg[j * ncols + n * plane_out..][..plane_out]
                .copy_from_slice(&dy[(n * g.c_out + o) * plane_out..][..plane_out]);
        }
    }

    let mut db = vec![0.0; g.c_out];
    for (j, &o) in out_idx.iter().enumerate() {
        db[o] = dyg[j * ncols..][..ncols].iter().sum();
    }

    // dW' = dY' · colsᵀ
    let kdim = in_idx.len() * kk;
    let mut dwg = vec![0.0; m * kdim];
    gemm(
        m, ncols, kdim, &dyg, ncols, 1, fwd_cols, 1, ncols, 0.0, &mut dwg, kdim, 1,
    );
    let mut dw = vec![0.0; g.c_out * g.c_in * kk];
    for (j, &o) in out_idx.iter().enumerate() {
        for (ip, &i) in in_idx.iter().enumerate() {
            dw[(o * g.c_in + i) * kk..][..kk].copy_from_slice(&dwg[j * kdim + ip * kk..][..kk]);
        }
    }

    let dx = need_dx.then(|| {
        // dcols = W_rowsᵀ · dY' over every input channel.
        let all_in: Vec<usize> = (0..g.c_in).collect();
        let wrows = gather_weight(weight, g, out_idx, &all_in);
        let kfull = g.c_in * kk;
        let mut dcols = vec![0.0; kfull * ncols];
        gemm(
            kfull, m, ncols, &wrows, 1, kfull, &dyg, ncols, 1, 0.0, &mut dcols, ncols, 1,
        );
        let mut dx = vec![0.0; g.n * g.c_in * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });

    ConvGrads { dx, dw, db }
}
