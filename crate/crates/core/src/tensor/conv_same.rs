//! Stride-1 convolutions with "same" padding (`pad = (k - 1) / 2`, odd `k`).
//!
//! The input is copied once into a zero-padded buffer. In that layout every
//! kernel tap is a constant offset from the output position in flat memory,
//! so the inner loop is a register-blocked multiply-add over contiguous
//! positions. Outputs are computed in the padded row layout and compacted
//! afterwards; the extra columns are discarded.
//!
//! Every output is a sum over (input channel, tap) in a fixed order, and no
//! fused multiply-add is used, so the AVX2 and baseline builds of the same
//! loop give bit-identical results.

use rayon::prelude::*;

use super::kernels::ConvGeom;
use super::Real;

/// Positions per register tile.
const L: usize = 16;
/// Output channels per register tile.
const NC: usize = 4;

struct Layout {
    dims: [usize; 3],
    pad: usize,
    /// Padded extents along H and W.
    ph: usize,
    pw: usize,
    /// Size of one padded channel plane, with slack for the last tile.
    plane: usize,
    /// Number of output positions covered by tiles (multiple of `L`).
    span: usize,
    /// Flat offset of each tap in `(kz, ky, kx)` order.
    offsets: Vec<usize>,
}

impl Layout {
    fn new(dims: [usize; 3], k: usize) -> Self {
        let pad = (k - 1) / 2;
        let [d, h, w] = dims;
        let (pd, ph, pw) = (d + 2 * pad, h + 2 * pad, w + 2 * pad);
        let last = (d - 1) * ph * pw + (h - 1) * pw + w;
        let span = last.div_ceil(L) * L;
        let max_off = (k - 1) * ph * pw + (k - 1) * pw + (k - 1);
        let plane = (pd * ph * pw).max(span + max_off);
        let mut offsets = Vec::with_capacity(k * k * k);
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    offsets.push((kz * ph + ky) * pw + kx);
                }
            }
        }
        Self {
            dims,
            pad,
            ph,
            pw,
            plane,
            span,
            offsets,
        }
    }

    /// `[C, D, H, W]` into zero-padded planes.
    fn pad_input<T: Real>(&self, x: &[T], channels: usize) -> Vec<T> {
        let [d, h, w] = self.dims;
        let p = self.pad;
        let mut out = vec![T::zero(); channels * self.plane];
        out.par_chunks_mut(self.plane).enumerate().for_each(|(c, dst)| {
            let src = &x[c * d * h * w..(c + 1) * d * h * w];
            for z in 0..d {
                for y in 0..h {
                    let o = ((z + p) * self.ph + y + p) * self.pw + p;
                    dst[o..o + w].copy_from_slice(&src[(z * h + y) * w..][..w]);
                }
            }
        });
        out
    }

    /// `[C, D, H, W]` into the output row layout (stride `ph`, `pw`), zeros elsewhere.
    fn spread_output<T: Real>(&self, g: &[T], channels: usize) -> Vec<T> {
        let [d, h, w] = self.dims;
        let mut out = vec![T::zero(); channels * self.span];
        out.par_chunks_mut(self.span).enumerate().for_each(|(c, dst)| {
            let src = &g[c * d * h * w..(c + 1) * d * h * w];
            for z in 0..d {
                for y in 0..h {
                    let o = (z * self.ph + y) * self.pw;
                    dst[o..o + w].copy_from_slice(&src[(z * h + y) * w..][..w]);
                }
            }
        });
        out
    }

    fn compact_into<T: Real>(&self, src: &[T], dst: &mut [T]) {
        let [d, h, w] = self.dims;
        for z in 0..d {
            for y in 0..h {
                let o = (z * self.ph + y) * self.pw;
                for (a, &b) in dst[(z * h + y) * w..][..w].iter_mut().zip(&src[o..o + w]) {
                    *a += b;
                }
            }
        }
    }
}

pub(crate) fn applies(g: &ConvGeom) -> bool {
    g.stride == 1 && g.k % 2 == 1 && 2 * g.pad == g.k - 1
}

/// Packs `w[co][ci][tap]` as `[co block][ci][tap][NC]`, zero-filling the
/// missing channels of the last block.
fn pack_weights<T: Real>(w: &[T], cout: usize, cin: usize, taps: usize) -> Vec<T> {
    let blocks = cout.div_ceil(NC);
    let mut out = vec![T::zero(); blocks * cin * taps * NC];
    for co in 0..cout {
        let (b, c) = (co / NC, co % NC);
        for ci in 0..cin {
            for t in 0..taps {
                out[((b * cin + ci) * taps + t) * NC + c] = w[(co * cin + ci) * taps + t];
            }
        }
    }
    out
}

/// One block of up to `NC` output channels over every tile.
#[inline(always)]
fn forward_block<T: Real>(lay: &Layout, xp: &[T], wb: &[T], cin: usize, init: [T; NC], out: &mut [T]) {
    let taps = lay.offsets.len();
    for t0 in (0..lay.span).step_by(L) {
        let mut acc = [[T::zero(); L]; NC];
        for (c, a) in acc.iter_mut().enumerate() {
            *a = [init[c]; L];
        }
        for ci in 0..cin {
            let xb = &xp[ci * lay.plane + t0..];
            let wc = &wb[ci * taps * NC..(ci + 1) * taps * NC];
            for (t, &off) in lay.offsets.iter().enumerate() {
                let xs: &[T; L] = xb[off..off + L].try_into().unwrap();
                let wv: &[T; NC] = wc[t * NC..(t + 1) * NC].try_into().unwrap();
                for c in 0..NC {
                    for l in 0..L {
                        acc[c][l] += wv[c] * xs[l];
                    }
                }
            }
        }
        for c in 0..NC {
            out[c * lay.span + t0..][..L].copy_from_slice(&acc[c]);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn forward_block_avx2<T: Real>(lay: &Layout, xp: &[T], wb: &[T], cin: usize, init: [T; NC], out: &mut [T]) {
    forward_block(lay, xp, wb, cin, init, out)
}

fn run_forward_block<T: Real>(lay: &Layout, xp: &[T], wb: &[T], cin: usize, init: [T; NC], out: &mut [T]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { forward_block_avx2(lay, xp, wb, cin, init, out) };
    }
    forward_block(lay, xp, wb, cin, init, out)
}

/// `out[co] += bias[co] + Σ_ci Σ_tap w[co][ci][tap] · x[ci] shifted by tap`,
/// with `x` already padded by [`Layout::pad_input`].
fn correlate<T: Real>(lay: &Layout, xp: &[T], w: &[T], bias: Option<&[T]>, cin: usize, cout: usize, out: &mut [T]) {
    let taps = lay.offsets.len();
    let packed = pack_weights(w, cout, cin, taps);
    let cube: usize = lay.dims.iter().product();
    out.par_chunks_mut(NC * cube).enumerate().for_each(|(b, dst)| {
        let mut init = [T::zero(); NC];
        if let Some(bias) = bias {
            for c in 0..NC.min(cout - b * NC) {
                init[c] = bias[b * NC + c];
            }
        }
        let mut tile = vec![T::zero(); NC * lay.span];
        run_forward_block(lay, xp, &packed[b * cin * taps * NC..(b + 1) * cin * taps * NC], cin, init, &mut tile);
        for (c, plane) in dst.chunks_mut(cube).enumerate() {
            lay.compact_into(&tile[c * lay.span..(c + 1) * lay.span], plane);
        }
    });
}

pub(crate) fn forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: &[T], out: &mut [T]) {
    let lay = Layout::new(g.input, g.k);
    let xp = lay.pad_input(x, g.cin);
    out.fill(T::zero());
    correlate(&lay, &xp, w, Some(bias), g.cin, g.cout, out);
}

/// Input gradient: the same correlation applied to the output gradient with
/// the kernel flipped and its channel axes swapped.
pub(crate) fn backward_input<T: Real>(g: &ConvGeom, grad: &[T], w: &[T], dx: &mut [T]) {
    let taps = g.k * g.k * g.k;
    let mut wt = vec![T::zero(); w.len()];
    for co in 0..g.cout {
        for ci in 0..g.cin {
            for t in 0..taps {
                wt[(ci * g.cout + co) * taps + (taps - 1 - t)] = w[(co * g.cin + ci) * taps + t];
            }
        }
    }
    let lay = Layout::new(g.input, g.k);
    let gp = lay.pad_input(grad, g.cout);
    correlate(&lay, &gp, &wt, None, g.cout, g.cin, dx);
}

/// `acc[c][t] = Σ_o dy[c][o] · x[o + off_t]` for one input channel.
#[inline(always)]
fn params_block<T: Real>(lay: &Layout, xc: &[T], dy: &[T], acc: &mut [[T; NC]]) {
    for (t, &off) in lay.offsets.iter().enumerate() {
        let mut lanes = [[T::zero(); L]; NC];
        for t0 in (0..lay.span).step_by(L) {
            let xs: &[T; L] = xc[t0 + off..t0 + off + L].try_into().unwrap();
            for c in 0..NC {
                let ds: &[T; L] = dy[c * lay.span + t0..][..L].try_into().unwrap();
                for l in 0..L {
                    lanes[c][l] += ds[l] * xs[l];
                }
            }
        }
        for c in 0..NC {
            acc[t][c] = super::kernels::sum(&lanes[c]);
        }
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn params_block_avx2<T: Real>(lay: &Layout, xc: &[T], dy: &[T], acc: &mut [[T; NC]]) {
    params_block(lay, xc, dy, acc)
}

fn run_params_block<T: Real>(lay: &Layout, xc: &[T], dy: &[T], acc: &mut [[T; NC]]) {
    #[cfg(target_arch = "x86_64")]
    if std::is_x86_feature_detected!("avx2") {
        // SAFETY: the CPU supports AVX2, checked just above.
        return unsafe { params_block_avx2(lay, xc, dy, acc) };
    }
    params_block(lay, xc, dy, acc)
}

/// Weight gradient `dw: [cout, cin, k, k, k]`; the bias gradient is left to the caller.
pub(crate) fn backward_weights<T: Real>(g: &ConvGeom, grad: &[T], x: &[T], dw: &mut [T]) {
    let taps = g.k * g.k * g.k;
    let lay = Layout::new(g.input, g.k);
    let xp = lay.pad_input(x, g.cin);
    let blocks = g.cout.div_ceil(NC);
    let mut dy = lay.spread_output(grad, g.cout);
    dy.resize(blocks * NC * lay.span, T::zero());
    dw.par_chunks_mut(NC * g.cin * taps).enumerate().for_each(|(b, dst)| {
        let dyb = &dy[b * NC * lay.span..(b + 1) * NC * lay.span];
        let mut acc = vec![[T::zero(); NC]; taps];
        for ci in 0..g.cin {
            run_params_block(&lay, &xp[ci * lay.plane..(ci + 1) * lay.plane], dyb, &mut acc);
            for c in 0..NC.min(g.cout - b * NC) {
                for t in 0..taps {
                    dst[(c * g.cin + ci) * taps + t] = acc[t][c];
                }
            }
        }
    });
}
