//! Slice-level numeric kernels.
//!
//! Every reduction uses a fixed summation order that does not depend on how
//! work is split across threads, so results are bit-identical for any rayon
//! pool size.

use rayon::prelude::*;

use super::{conv_same, Real};

const LANES: usize = 8;

pub(crate) fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); LANES];
    let chunks = a.chunks_exact(LANES);
    let rem = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            acc[l] += c[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for &v in rem {
        s += v;
    }
    s
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            axpy(av, &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn<T: Real>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            axpy(a[p * m + i], brow, &mut c[i * n..(i + 1) * n]);
        }
    }
}

/// Geometry of a 3D convolution over `[C, D, H, W]` inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    /// Output positions `o` along one axis with `o*stride + kk - pad` inside `[0, len)`.
    fn valid(&self, kk: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let shift = kk as isize - self.pad as isize;
        // o*s + shift >= 0  and  o*s + shift <= in_len - 1
        let lo = if shift >= 0 { 0 } else { ((-shift) + s - 1) / s };
        let hi_num = in_len as isize - 1 - shift;
        let hi = if hi_num < 0 { 0 } else { (hi_num / s + 1).min(out_len as isize) };
        let lo = lo.min(out_len as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    fn src(&self, o: usize, kk: usize) -> usize {
        o * self.stride + kk - self.pad
    }
}

pub(crate) fn conv3d_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: &[T], out: &mut [T]) {
    if conv_same::applies(g) {
        conv_same::forward(g, x, w, bias, out)
    } else {
        conv3d_forward_direct(g, x, w, bias, out)
    }
}

pub(crate) fn conv3d_backward_input<T: Real>(g: &ConvGeom, grad: &[T], w: &[T], dx: &mut [T]) {
    if conv_same::applies(g) {
        conv_same::backward_input(g, grad, w, dx)
    } else {
        conv3d_backward_input_direct(g, grad, w, dx)
    }
}

/// Weight and bias gradients; `dw` is `[cout, cin, k, k, k]`, `db` is `[cout]`.
pub(crate) fn conv3d_backward_params<T: Real>(g: &ConvGeom, grad: &[T], x: &[T], dw: &mut [T], db: &mut [T]) {
    if conv_same::applies(g) {
        let op = g.out_plane();
        for (co, dbc) in db.iter_mut().enumerate() {
            *dbc = sum(&grad[co * op..(co + 1) * op]);
        }
        conv_same::backward_weights(g, grad, x, dw)
    } else {
        conv3d_backward_params_direct(g, grad, x, dw, db)
    }
}

/// Direct loops for any stride and padding.
pub(crate) fn conv3d_forward_direct<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: &[T], out: &mut [T]) {
    let [d, h, wd] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.k;
    let ip = g.in_plane();
    out.par_chunks_mut(g.out_plane()).enumerate().for_each(|(co, plane)| {
        plane.fill(bias[co]);
        for ci in 0..g.cin {
            let xin = &x[ci * ip..(ci + 1) * ip];
            let wbase = (co * g.cin + ci) * k * k * k;
            for kz in 0..k {
                let (z0, z1) = g.valid(kz, od, d);
                for ky in 0..k {
                    let (y0, y1) = g.valid(ky, oh, h);
                    let wrow = &w[wbase + (kz * k + ky) * k..][..k];
                    for oz in z0..z1 {
                        let iz = g.src(oz, kz);
                        for oy in y0..y1 {
                            let iy = g.src(oy, ky);
                            let orow = &mut plane[(oz * oh + oy) * ow..][..ow];
                            let irow = &xin[(iz * h + iy) * wd..][..wd];
                            for (kx, &wv) in wrow.iter().enumerate() {
                                let (x0, x1) = g.valid(kx, ow, wd);
                                if x0 >= x1 {
                                    continue;
                                }
                                if g.stride == 1 {
                                    let s0 = g.src(x0, kx);
                                    axpy(wv, &irow[s0..s0 + (x1 - x0)], &mut orow[x0..x1]);
                                } else {
                                    for ox in x0..x1 {
                                        orow[ox] += wv * irow[g.src(ox, kx)];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

pub(crate) fn conv3d_backward_input_direct<T: Real>(g: &ConvGeom, grad: &[T], w: &[T], dx: &mut [T]) {
    let [d, h, wd] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.k;
    let op = g.out_plane();
    dx.par_chunks_mut(g.in_plane()).enumerate().for_each(|(ci, plane)| {
        for co in 0..g.cout {
            let gout = &grad[co * op..(co + 1) * op];
            let wbase = (co * g.cin + ci) * k * k * k;
            for kz in 0..k {
                let (z0, z1) = g.valid(kz, od, d);
                for ky in 0..k {
                    let (y0, y1) = g.valid(ky, oh, h);
                    let wrow = &w[wbase + (kz * k + ky) * k..][..k];
                    for oz in z0..z1 {
                        let iz = g.src(oz, kz);
                        for oy in y0..y1 {
                            let iy = g.src(oy, ky);
                            let grow = &gout[(oz * oh + oy) * ow..][..ow];
                            let drow = &mut plane[(iz * h + iy) * wd..][..wd];
                            for (kx, &wv) in wrow.iter().enumerate() {
                                let (x0, x1) = g.valid(kx, ow, wd);
                                if x0 >= x1 {
                                    continue;
                                }
                                if g.stride == 1 {
                                    let s0 = g.src(x0, kx);
                                    axpy(wv, &grow[x0..x1], &mut drow[s0..s0 + (x1 - x0)]);
                                } else {
                                    for ox in x0..x1 {
                                        drow[g.src(ox, kx)] += wv * grow[ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

pub(crate) fn conv3d_backward_params_direct<T: Real>(
    g: &ConvGeom,
    grad: &[T],
    x: &[T],
    dw: &mut [T],
    db: &mut [T],
) {
    let [d, h, wd] = g.input;
    let [od, oh, ow] = g.output;
    let k = g.k;
    let (ip, op) = (g.in_plane(), g.out_plane());
    let wsz = g.cin * k * k * k;
    dw.par_chunks_mut(wsz)
        .zip(db.par_iter_mut())
        .enumerate()
        .for_each(|(co, (dwc, dbc))| {
            let gout = &grad[co * op..(co + 1) * op];
            *dbc = sum(gout);
            let mut scratch = vec![T::zero(); ow];
            for ci in 0..g.cin {
                let xin = &x[ci * ip..(ci + 1) * ip];
                for kz in 0..k {
                    let (z0, z1) = g.valid(kz, od, d);
                    for ky in 0..k {
                        let (y0, y1) = g.valid(ky, oh, h);
                        for kx in 0..k {
                            let (x0, x1) = g.valid(kx, ow, wd);
                            let mut acc = T::zero();
                            if x0 < x1 {
                                for oz in z0..z1 {
                                    let iz = g.src(oz, kz);
                                    for oy in y0..y1 {
                                        let iy = g.src(oy, ky);
                                        let grow = &gout[(oz * oh + oy) * ow..][..ow];
                                        let irow = &xin[(iz * h + iy) * wd..][..wd];
                                        if g.stride == 1 {
                                            let s0 = g.src(x0, kx);
                                            acc += dot(&grow[x0..x1], &irow[s0..s0 + (x1 - x0)]);
                                        } else {
                                            let n = x1 - x0;
                                            for (j, ox) in (x0..x1).enumerate() {
                                                scratch[j] = irow[g.src(ox, kx)];
                                            }
                                            acc += dot(&grow[x0..x1], &scratch[..n]);
                                        }
                                    }
                                }
                            }
                            dwc[((ci * k + kz) * k + ky) * k + kx] = acc;
                        }
                    }
                }
            }
        });
}

/// Geometry of a transposed 3D convolution (no padding).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct DeconvGeom {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

/// `w` is `[cin, cout, k, k, k]`.
pub(crate) fn deconv3d_forward<T: Real>(g: &DeconvGeom, x: &[T], w: &[T], bias: &[T], out: &mut [T]) {
    let [d, h, wd] = g.input;
    let [_, oh, ow] = g.output;
    let (k, s) = (g.k, g.stride);
    let ip: usize = g.input.iter().product();
    let op: usize = g.output.iter().product();
    out.par_chunks_mut(op).enumerate().for_each(|(co, plane)| {
        plane.fill(bias[co]);
        for ci in 0..g.cin {
            let xin = &x[ci * ip..(ci + 1) * ip];
            let wbase = (ci * g.cout + co) * k * k * k;
            for kz in 0..k {
                for ky in 0..k {
                    let wrow = &w[wbase + (kz * k + ky) * k..][..k];
                    for iz in 0..d {
                        for iy in 0..h {
                            let irow = &xin[(iz * h + iy) * wd..][..wd];
                            let orow = &mut plane[((iz * s + kz) * oh + iy * s + ky) * ow..][..ow];
                            for (kx, &wv) in wrow.iter().enumerate() {
                                for (ix, &xv) in irow.iter().enumerate() {
                                    orow[ix * s + kx] += wv * xv;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

pub(crate) fn deconv3d_backward_input<T: Real>(g: &DeconvGeom, grad: &[T], w: &[T], dx: &mut [T]) {
    let [d, h, wd] = g.input;
    let [_, oh, ow] = g.output;
    let (k, s) = (g.k, g.stride);
    let ip: usize = g.input.iter().product();
    let op: usize = g.output.iter().product();
    dx.par_chunks_mut(ip).enumerate().for_each(|(ci, plane)| {
        for co in 0..g.cout {
            let gout = &grad[co * op..(co + 1) * op];
            let wbase = (ci * g.cout + co) * k * k * k;
            for kz in 0..k {
                for ky in 0..k {
                    let wrow = &w[wbase + (kz * k + ky) * k..][..k];
                    for iz in 0..d {
                        for iy in 0..h {
                            let grow = &gout[((iz * s + kz) * oh + iy * s + ky) * ow..][..ow];
                            let drow = &mut plane[(iz * h + iy) * wd..][..wd];
                            for (kx, &wv) in wrow.iter().enumerate() {
                                for (ix, dv) in drow.iter_mut().enumerate() {
                                    *dv += wv * grow[ix * s + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

pub(crate) fn deconv3d_backward_params<T: Real>(
    g: &DeconvGeom,
    grad: &[T],
    x: &[T],
    dw: &mut [T],
    db: &mut [T],
) {
    let [d, h, wd] = g.input;
    let [_, oh, ow] = g.output;
    let (k, s) = (g.k, g.stride);
    let ip: usize = g.input.iter().product();
    let op: usize = g.output.iter().product();
    for (co, dbc) in db.iter_mut().enumerate() {
        *dbc = sum(&grad[co * op..(co + 1) * op]);
    }
    let per_ci = g.cout * k * k * k;
    dw.par_chunks_mut(per_ci).enumerate().for_each(|(ci, dwc)| {
        let xin = &x[ci * ip..(ci + 1) * ip];
        let mut scratch = vec![T::zero(); wd];
        for co in 0..g.cout {
            let gout = &grad[co * op..(co + 1) * op];
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let mut acc = T::zero();
                        for iz in 0..d {
                            for iy in 0..h {
                                let grow = &gout[((iz * s + kz) * oh + iy * s + ky) * ow..][..ow];
                                for (ix, sv) in scratch.iter_mut().enumerate() {
                                    *sv = grow[ix * s + kx];
                                }
                                acc += dot(&xin[(iz * h + iy) * wd..][..wd], &scratch);
                            }
                        }
                        dwc[((co * k + kz) * k + ky) * k + kx] = acc;
                    }
                }
            }
        }
    });
}

/// Mean and reciprocal standard deviation of a row (population variance).
pub(crate) fn moments<T: Real>(row: &[T], eps: T) -> (T, T) {
    let n = T::from_usize(row.len()).unwrap();
    let mean = sum(row) / n;
    let mut acc = [T::zero(); LANES];
    let chunks = row.chunks_exact(LANES);
    let rem = chunks.remainder();
    for c in chunks {
        for l in 0..LANES {
            let dv = c[l] - mean;
            acc[l] += dv * dv;
        }
    }
    let mut ss = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for &v in rem {
        ss += (v - mean) * (v - mean);
    }
    let var = ss / n;
    (mean, (var + eps).sqrt().recip())
}

/// Normalizes each row of `x` (rows of length `len`), then applies a
/// per-row (`per_row_affine`) or per-column affine transform.
pub(crate) fn normalize_rows<T: Real>(
    x: &[T],
    len: usize,
    gamma: &[T],
    beta: &[T],
    per_row_affine: bool,
    eps: T,
    out: &mut [T],
    stats: &mut [(T, T)],
) {
    out.par_chunks_mut(len)
        .zip(x.par_chunks(len))
        .zip(stats.par_iter_mut())
        .enumerate()
        .for_each(|(r, ((orow, xrow), st))| {
            let (mean, rstd) = moments(xrow, eps);
            *st = (mean, rstd);
            if per_row_affine {
                let (gm, bt) = (gamma[r], beta[r]);
                for (o, &v) in orow.iter_mut().zip(xrow) {
                    *o = (v - mean) * rstd * gm + bt;
                }
            } else {
                for (i, (o, &v)) in orow.iter_mut().zip(xrow).enumerate() {
                    *o = (v - mean) * rstd * gamma[i] + beta[i];
                }
            }
        });
}

/// Backward of [`normalize_rows`]. Returns `(dx, dgamma, dbeta)`.
pub(crate) fn normalize_rows_backward<T: Real>(
    x: &[T],
    grad: &[T],
    len: usize,
    gamma: &[T],
    per_row_affine: bool,
    stats: &[(T, T)],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / len;
    let n = T::from_usize(len).unwrap();
    let mut dx = vec![T::zero(); x.len()];
    // Per-row partial sums of gamma/beta gradients; reduced afterwards in row order.
    let mut partial: Vec<(T, T)> = vec![(T::zero(), T::zero()); if per_row_affine { rows } else { 0 }];
    dx.par_chunks_mut(len)
        .zip(x.par_chunks(len))
        .zip(grad.par_chunks(len))
        .enumerate()
        .for_each(|(r, ((drow, xrow), grow))| {
            let (mean, rstd) = stats[r];
            let mut s_dxh = T::zero();
            let mut s_dxh_xh = T::zero();
            for (i, (&xv, &gv)) in xrow.iter().zip(grow).enumerate() {
                let gm = if per_row_affine { gamma[r] } else { gamma[i] };
                let xh = (xv - mean) * rstd;
                let dxh = gv * gm;
                s_dxh += dxh;
                s_dxh_xh += dxh * xh;
            }
            let m1 = s_dxh / n;
            let m2 = s_dxh_xh / n;
            for (i, ((d, &xv), &gv)) in drow.iter_mut().zip(xrow).zip(grow).enumerate() {
                let gm = if per_row_affine { gamma[r] } else { gamma[i] };
                let xh = (xv - mean) * rstd;
                *d = rstd * (gv * gm - m1 - xh * m2);
            }
        });
    let mut dgamma = vec![T::zero(); gamma.len()];
    let mut dbeta = vec![T::zero(); gamma.len()];
    if per_row_affine {
        partial
            .par_iter_mut()
            .zip(x.par_chunks(len))
            .zip(grad.par_chunks(len))
            .enumerate()
            .for_each(|(r, ((p, xrow), grow))| {
                let (mean, rstd) = stats[r];
                let mut sg = T::zero();
                let mut sb = T::zero();
                for (&xv, &gv) in xrow.iter().zip(grow) {
                    sg += gv * (xv - mean) * rstd;
                    sb += gv;
                }
                *p = (sg, sb);
            });
        for (r, &(sg, sb)) in partial.iter().enumerate() {
            dgamma[r] += sg;
            dbeta[r] += sb;
        }
    } else {
        for r in 0..rows {
            let (mean, rstd) = stats[r];
            let xrow = &x[r * len..(r + 1) * len];
            let grow = &grad[r * len..(r + 1) * len];
            for i in 0..len {
                dgamma[i] += grow[i] * (xrow[i] - mean) * rstd;
                dbeta[i] += grow[i];
            }
        }
    }
    (dx, dgamma, dbeta)
}
