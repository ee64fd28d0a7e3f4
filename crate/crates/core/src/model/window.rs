//! Window partitioning, cyclic shifts and masked window attention over
//! channel-last token grids `[D, H, W, C]`.

use std::sync::Arc;

use super::{config_err, Params, Result};
use crate::tensor::{Graph, Real, Tensor, Var, GATHER_ZERO};

/// Additive attention bias for disallowed token pairs.
pub const MASK_NEG: f64 = -1e9;

/// Window layout for one token grid. Axes no longer than the configured
/// window use a single window spanning the axis and are never shifted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowGeometry {
    pub dims: [usize; 3],
    pub window: [usize; 3],
    pub shift: [usize; 3],
    pub padded: [usize; 3],
    pub grid: [usize; 3],
}

impl WindowGeometry {
    pub fn new(dims: [usize; 3], m: usize, shift: usize) -> Self {
        let mut window = [0; 3];
        let mut sh = [0; 3];
        for a in 0..3 {
            if dims[a] <= m {
                window[a] = dims[a];
            } else {
                window[a] = m;
                sh[a] = shift;
            }
        }
        let grid = [0, 1, 2].map(|a| dims[a].div_ceil(window[a]));
        let padded = [0, 1, 2].map(|a| grid[a] * window[a]);
        Self {
            dims,
            window,
            shift: sh,
            padded,
            grid,
        }
    }

    pub fn num_windows(&self) -> usize {
        self.grid.iter().product()
    }

    pub fn window_len(&self) -> usize {
        self.window.iter().product()
    }

    pub fn num_tokens(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_shifted(&self) -> bool {
        self.shift.iter().any(|&s| s > 0)
    }

    pub fn is_padded(&self) -> bool {
        self.padded != self.dims
    }

    pub fn local(&self, t: usize) -> [usize; 3] {
        let w = self.window;
        [t / (w[1] * w[2]), (t / w[2]) % w[1], t % w[2]]
    }

    /// Coordinate of token `t` of window `n` on the rolled, padded grid.
    fn rolled(&self, n: usize, t: usize) -> [usize; 3] {
        let g = self.grid;
        let wi = [n / (g[1] * g[2]), (n / g[2]) % g[1], n % g[2]];
        let l = self.local(t);
        [0, 1, 2].map(|a| wi[a] * self.window[a] + l[a])
    }

    /// Grid coordinate that token `t` of window `n` was taken from, or
    /// `None` for padding.
    pub fn source_coord(&self, n: usize, t: usize) -> Option<[usize; 3]> {
        let r = self.rolled(n, t);
        let mut c = [0; 3];
        for a in 0..3 {
            c[a] = (r[a] + self.shift[a]) % self.padded[a];
            if c[a] >= self.dims[a] {
                return None;
            }
        }
        Some(c)
    }

    pub fn source(&self, n: usize, t: usize) -> Option<usize> {
        self.source_coord(n, t)
            .map(|c| (c[0] * self.dims[1] + c[1]) * self.dims[2] + c[2])
    }

    /// Pre-shift region of a token: tokens of one window that wrapped around
    /// the grid edge belong to different regions than the rest.
    fn region(&self, n: usize, t: usize) -> [u8; 3] {
        let r = self.rolled(n, t);
        [0, 1, 2].map(|a| {
            let (p, w, s) = (self.padded[a], self.window[a], self.shift[a]);
            if s == 0 || r[a] < p - w {
                0
            } else if r[a] < p - s {
                1
            } else {
                2
            }
        })
    }

    fn partition_index(&self, c: usize) -> Vec<u32> {
        let t_len = self.window_len();
        let mut idx = Vec::with_capacity(self.num_windows() * t_len * c);
        for n in 0..self.num_windows() {
            for t in 0..t_len {
                match self.source(n, t) {
                    Some(s) => idx.extend((0..c).map(|ch| (s * c + ch) as u32)),
                    None => idx.extend(std::iter::repeat_n(GATHER_ZERO, c)),
                }
            }
        }
        idx
    }

    fn reverse_index(&self, c: usize) -> Vec<u32> {
        let t_len = self.window_len();
        let mut slot = vec![0usize; self.num_tokens()];
        for n in 0..self.num_windows() {
            for t in 0..t_len {
                if let Some(s) = self.source(n, t) {
                    slot[s] = n * t_len + t;
                }
            }
        }
        slot.iter()
            .flat_map(|&s| (0..c).map(move |ch| (s * c + ch) as u32))
            .collect()
    }
}

fn token_dims(g_shape: &[usize]) -> Result<([usize; 3], usize)> {
    if g_shape.len() != 4 {
        return Err(config_err(format!("expected a [D, H, W, C] token grid, got {g_shape:?}")));
    }
    Ok(([g_shape[0], g_shape[1], g_shape[2]], g_shape[3]))
}

/// `[D, H, W, C]` → `[Nw, T, C]`: pads to whole windows, rolls by `-shift`
/// and splits into windows. Padding tokens are zero.
pub fn window_partition<T: Real>(g: &mut Graph<T>, x: Var, geom: &WindowGeometry) -> Result<Var> {
    let (dims, c) = token_dims(g.shape(x))?;
    if dims != geom.dims {
        return Err(config_err(format!("token grid {dims:?} does not match geometry {:?}", geom.dims)));
    }
    let idx: Arc<[u32]> = geom.partition_index(c).into();
    Ok(g.gather(x, idx, &[geom.num_windows(), geom.window_len(), c])?)
}

/// Inverse of [`window_partition`]; padding tokens are dropped.
pub fn window_reverse<T: Real>(g: &mut Graph<T>, w: Var, geom: &WindowGeometry) -> Result<Var> {
    let s = g.shape(w).to_vec();
    if s.len() != 3 || s[0] != geom.num_windows() || s[1] != geom.window_len() {
        return Err(config_err(format!("window tensor {s:?} does not match geometry {geom:?}")));
    }
    let c = s[2];
    let idx: Arc<[u32]> = geom.reverse_index(c).into();
    let d = geom.dims;
    Ok(g.gather(w, idx, &[d[0], d[1], d[2], c])?)
}

/// `[Nw, T, T]` additive mask that is [`MASK_NEG`] between tokens of one
/// window coming from different pre-shift regions, zero elsewhere.
pub fn build_shift_mask<T: Real>(geom: &WindowGeometry) -> Tensor<T> {
    let (nw, t_len) = (geom.num_windows(), geom.window_len());
    let neg = T::from_f64_lossy(MASK_NEG);
    let mut data = vec![T::zero(); nw * t_len * t_len];
    if geom.is_shifted() {
        for n in 0..nw {
            let regions: Vec<[u8; 3]> = (0..t_len).map(|t| geom.region(n, t)).collect();
            for i in 0..t_len {
                for j in 0..t_len {
                    if regions[i] != regions[j] {
                        data[(n * t_len + i) * t_len + j] = neg;
                    }
                }
            }
        }
    }
    Tensor::new(&[nw, t_len, t_len], data).expect("mask extents are positive")
}

/// Shift mask plus masking of padding keys, shaped `[Nw, 1, T, T]` to
/// broadcast over heads; `None` when nothing is masked.
fn attention_mask<T: Real>(geom: &WindowGeometry) -> Option<Tensor<T>> {
    if !geom.is_shifted() && !geom.is_padded() {
        return None;
    }
    let (nw, t_len) = (geom.num_windows(), geom.window_len());
    let mut mask = build_shift_mask::<T>(geom);
    let neg = T::from_f64_lossy(MASK_NEG);
    let data = mask.data_mut();
    for n in 0..nw {
        for j in 0..t_len {
            if geom.source(n, j).is_none() {
                for i in 0..t_len {
                    data[(n * t_len + i) * t_len + j] = neg;
                }
            }
        }
    }
    Some(mask.reshaped(&[nw, 1, t_len, t_len]).expect("same element count"))
}

/// Index of the relative-position table row for every token pair of a
/// window, laid out `[heads, T, T]` over a `[(2M-1)³, heads]` table.
fn rel_pos_index(geom: &WindowGeometry, m: usize, heads: usize) -> Vec<u32> {
    let t_len = geom.window_len();
    let span = 2 * m - 1;
    let mut pair = Vec::with_capacity(t_len * t_len);
    for i in 0..t_len {
        let li = geom.local(i);
        for j in 0..t_len {
            let lj = geom.local(j);
            let r = [0, 1, 2].map(|a| li[a] + m - 1 - lj[a]);
            pair.push((r[0] * span + r[1]) * span + r[2]);
        }
    }
    (0..heads)
        .flat_map(|h| pair.iter().map(move |&row| (row * heads + h) as u32))
        .collect()
}

/// Multi-head self-attention inside (optionally shifted) windows over a
/// `[D, H, W, C]` token grid. Parameters are read from `{prefix}.qkv`,
/// `{prefix}.proj` and, when present, `{prefix}.rpb`.
pub fn window_attention<T: Real>(
    g: &mut Graph<T>,
    p: &Params,
    prefix: &str,
    x: Var,
    m: usize,
    heads: usize,
    shifted: bool,
    use_rel_pos_bias: bool,
) -> Result<Var> {
    let (dims, c) = token_dims(g.shape(x))?;
    if heads == 0 || c % heads != 0 {
        return Err(config_err(format!("width {c} is not divisible by {heads} heads")));
    }
    let d = c / heads;
    let geom = WindowGeometry::new(dims, m, if shifted { m / 2 } else { 0 });
    let (nw, t_len) = (geom.num_windows(), geom.window_len());

    let xw = window_partition(g, x, &geom)?;
    let qkv = g.linear(xw, p.get(&format!("{prefix}.qkv.w"))?, Some(p.get(&format!("{prefix}.qkv.b"))?))?;
    // qkv is [Nw, T, 3, heads, d]; split into q, v: [Nw, heads, T, d] and kᵀ: [Nw, heads, d, T].
    let qkv_at = |n: usize, t: usize, part: usize, h: usize, e: usize| (((n * t_len + t) * 3 + part) * heads + h) * d + e;
    let mut iq = Vec::with_capacity(nw * heads * t_len * d);
    let mut ik = Vec::with_capacity(iq.capacity());
    let mut iv = Vec::with_capacity(iq.capacity());
    for n in 0..nw {
        for h in 0..heads {
            for t in 0..t_len {
                for e in 0..d {
                    iq.push(qkv_at(n, t, 0, h, e) as u32);
                    iv.push(qkv_at(n, t, 2, h, e) as u32);
                }
            }
            for e in 0..d {
                for t in 0..t_len {
                    ik.push(qkv_at(n, t, 1, h, e) as u32);
                }
            }
        }
    }
    let q = g.gather(qkv, iq.into(), &[nw, heads, t_len, d])?;
    let q = g.scale(q, 1.0 / (d as f64).sqrt())?;
    let kt = g.gather(qkv, ik.into(), &[nw, heads, d, t_len])?;
    let v = g.gather(qkv, iv.into(), &[nw, heads, t_len, d])?;

    let mut scores = g.matmul(q, kt)?;
    if use_rel_pos_bias {
        let table = p.get(&format!("{prefix}.rpb"))?;
        let rows = g.shape(table)[0];
        if rows != (2 * m - 1).pow(3) || g.shape(table)[1] != heads {
            return Err(config_err(format!(
                "relative position table {:?} does not fit window {m} with {heads} heads",
                g.shape(table)
            )));
        }
        let bias = g.gather(table, rel_pos_index(&geom, m, heads).into(), &[heads, t_len, t_len])?;
        scores = g.add(scores, bias)?;
    }
    if let Some(mask) = attention_mask::<T>(&geom) {
        let mask = g.constant(mask);
        scores = g.add(scores, mask)?;
    }
    let attn = g.softmax(scores, 3)?;
    let o = g.matmul(attn, v)?;
    // [Nw, heads, T, d] → [Nw, T, heads·d]
    let o = g.permute(o, &[0, 2, 1, 3])?;
    let o = g.reshape(o, &[nw, t_len, c])?;
    let o = g.linear(o, p.get(&format!("{prefix}.proj.w"))?, Some(p.get(&format!("{prefix}.proj.b"))?))?;
    window_reverse(g, o, &geom)
}
