use std::sync::Arc;

use super::graph::{Graph, Var};
use super::kernels::{self, ConvGeom, DeconvGeom};
use super::{shape_err, strides_of, Real, Result, Tensor, TensorError};

/// Sentinel in gather index maps: the output element is zero.
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Sigmoid,
    Gelu,
}

/// Stride-0 broadcasting plan for a binary op.
#[derive(Clone, Debug)]
pub(crate) struct Broadcast {
    out_shape: Vec<usize>,
    a_strides: Vec<usize>,
    b_strides: Vec<usize>,
}

impl Broadcast {
    fn plan(a: &[usize], b: &[usize], op: &'static str) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out_shape = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(shape_err(op, format!("cannot broadcast {a:?} with {b:?}")));
            }
            out_shape.push(x.max(y));
        }
        let bstrides = |p: &[usize]| -> Vec<usize> {
            let s = strides_of(p);
            p.iter().zip(s).map(|(&d, st)| if d == 1 { 0 } else { st }).collect()
        };
        Ok(Self {
            a_strides: bstrides(&pa),
            b_strides: bstrides(&pb),
            out_shape,
        })
    }

    /// Calls `f(out_offset, a_offset, b_offset)` for every output element in order.
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let rank = self.out_shape.len();
        if rank == 0 {
            f(0, 0, 0);
            return;
        }
        let last = rank - 1;
        let inner = self.out_shape[last];
        let (sa, sb) = (self.a_strides[last], self.b_strides[last]);
        let outer: usize = self.out_shape[..last].iter().product();
        let mut idx = vec![0usize; last];
        let (mut ia, mut ib) = (0usize, 0usize);
        let mut o = 0;
        for _ in 0..outer {
            for j in 0..inner {
                f(o, ia + j * sa, ib + j * sb);
                o += 1;
            }
            // odometer over leading dims
            for d in (0..last).rev() {
                idx[d] += 1;
                ia += self.a_strides[d];
                ib += self.b_strides[d];
                if idx[d] < self.out_shape[d] {
                    break;
                }
                ia -= self.a_strides[d] * idx[d];
                ib -= self.b_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct MatMulPlan {
    m: usize,
    k: usize,
    n: usize,
    /// (a matrix index, b matrix index) for each output matrix.
    pairs: Vec<(usize, usize)>,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisSplit {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Binary {
        kind: BinaryKind,
        bcast: Option<Broadcast>,
    },
    Scale(T),
    AddScalar,
    Unary(UnaryKind),
    MatMul(MatMulPlan),
    Conv3d(ConvGeom),
    Deconv3d(DeconvGeom),
    Norm {
        len: usize,
        per_row_affine: bool,
        stats: Vec<(T, T)>,
    },
    Softmax(AxisSplit),
    Reshape,
    Gather(Arc<[u32]>),
    Concat {
        split: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    SumAll,
    MeanAll,
    SumAxis {
        split: AxisSplit,
        mean: bool,
    },
}

impl<T: Real> Op<T> {
    pub(crate) fn backward(
        &self,
        inputs: &[&Tensor<T>],
        out: &Tensor<T>,
        g: &Tensor<T>,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor<T>>>> {
        let gd = g.data();
        Ok(match self {
            Op::Leaf => vec![],
            Op::Binary { kind, bcast } => binary_backward(*kind, bcast.as_ref(), inputs[0], inputs[1], g, needs),
            Op::Scale(c) => vec![Some(g.map(|v| v * *c))],
            Op::AddScalar => vec![Some(g.clone())],
            Op::Unary(UnaryKind::Sigmoid) => {
                let data = gd
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                vec![Some(Tensor::new(out.shape(), data)?)]
            }
            Op::Unary(UnaryKind::Gelu) => {
                let inv_sqrt_2pi = T::from_f64_lossy(0.398_942_280_401_432_7);
                let half = T::from_f64_lossy(0.5);
                let data = gd
                    .iter()
                    .zip(inputs[0].data())
                    .map(|(&gv, &x)| gv * (x.normal_cdf() + x * inv_sqrt_2pi * (-half * x * x).exp()))
                    .collect();
                vec![Some(Tensor::new(out.shape(), data)?)]
            }
            Op::MatMul(plan) => matmul_backward(plan, inputs[0], inputs[1], g, needs)?,
            Op::Conv3d(geom) => {
                let (x, w) = (inputs[0], inputs[1]);
                let dx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); x.numel()];
                    kernels::conv3d_backward_input(geom, gd, w.data(), &mut dx);
                    Tensor::new(x.shape(), dx)
                });
                let (dw, db) = if needs[1] || needs[2] {
                    let mut dw = vec![T::zero(); w.numel()];
                    let mut db = vec![T::zero(); geom.cout];
                    kernels::conv3d_backward_params(geom, gd, x.data(), &mut dw, &mut db);
                    (Some(Tensor::new(w.shape(), dw)?), Some(Tensor::new(&[geom.cout], db)?))
                } else {
                    (None, None)
                };
                vec![dx.transpose()?, dw, db]
            }
            Op::Deconv3d(geom) => {
                let (x, w) = (inputs[0], inputs[1]);
                let dx = needs[0].then(|| {
                    let mut dx = vec![T::zero(); x.numel()];
                    kernels::deconv3d_backward_input(geom, gd, w.data(), &mut dx);
                    Tensor::new(x.shape(), dx)
                });
                let (dw, db) = if needs[1] || needs[2] {
                    let mut dw = vec![T::zero(); w.numel()];
                    let mut db = vec![T::zero(); geom.cout];
                    kernels::deconv3d_backward_params(geom, gd, x.data(), &mut dw, &mut db);
                    (Some(Tensor::new(w.shape(), dw)?), Some(Tensor::new(&[geom.cout], db)?))
                } else {
                    (None, None)
                };
                vec![dx.transpose()?, dw, db]
            }
            Op::Norm {
                len,
                per_row_affine,
                stats,
            } => {
                let (x, gamma) = (inputs[0], inputs[1]);
                let (dx, dg, db) =
                    kernels::normalize_rows_backward(x.data(), gd, *len, gamma.data(), *per_row_affine, stats);
                vec![
                    Some(Tensor::new(x.shape(), dx)?),
                    Some(Tensor::new(gamma.shape(), dg)?),
                    Some(Tensor::new(gamma.shape(), db)?),
                ]
            }
            Op::Softmax(split) => {
                let y = out.data();
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..split.outer {
                    for i in 0..split.inner {
                        let base = o * split.len * split.inner + i;
                        let mut s = T::zero();
                        for j in 0..split.len {
                            let p = base + j * split.inner;
                            s += gd[p] * y[p];
                        }
                        for j in 0..split.len {
                            let p = base + j * split.inner;
                            dx[p] = y[p] * (gd[p] - s);
                        }
                    }
                }
                vec![Some(Tensor::new(out.shape(), dx)?)]
            }
            Op::Reshape => vec![Some(g.clone().reshaped(inputs[0].shape())?)],
            Op::Gather(index) => {
                let mut dx = vec![T::zero(); inputs[0].numel()];
                for (&src, &gv) in index.iter().zip(gd) {
                    if src != GATHER_ZERO {
                        dx[src as usize] += gv;
                    }
                }
                vec![Some(Tensor::new(inputs[0].shape(), dx)?)]
            }
            Op::Concat { split, outer, inner } => {
                let total: usize = split.iter().sum();
                let mut out_grads = Vec::with_capacity(split.len());
                let mut offset = 0;
                for (t, &len) in inputs.iter().zip(split) {
                    let block = len * inner;
                    let mut d = Vec::with_capacity(t.numel());
                    for o in 0..*outer {
                        let start = o * total * inner + offset * inner;
                        d.extend_from_slice(&gd[start..start + block]);
                    }
                    offset += len;
                    out_grads.push(Some(Tensor::new(t.shape(), d)?));
                }
                out_grads
            }
            Op::SumAll => vec![Some(Tensor::full(inputs[0].shape(), gd[0]))],
            Op::MeanAll => {
                let n = T::from_usize(inputs[0].numel()).unwrap();
                vec![Some(Tensor::full(inputs[0].shape(), gd[0] / n))]
            }
            Op::SumAxis { split, mean } => {
                let scale = if *mean {
                    T::one() / T::from_usize(split.len).unwrap()
                } else {
                    T::one()
                };
                let mut dx = vec![T::zero(); inputs[0].numel()];
                for o in 0..split.outer {
                    for j in 0..split.len {
                        let dst = (o * split.len + j) * split.inner;
                        let src = o * split.inner;
                        for i in 0..split.inner {
                            dx[dst + i] = gd[src + i] * scale;
                        }
                    }
                }
                vec![Some(Tensor::new(inputs[0].shape(), dx)?)]
            }
        })
    }
}

fn binary_backward<T: Real>(
    kind: BinaryKind,
    bcast: Option<&Broadcast>,
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    needs: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    let mut ga = needs[0].then(|| vec![T::zero(); a.numel()]);
    let mut gb = needs[1].then(|| vec![T::zero(); b.numel()]);
    let mut step = |o: usize, ia: usize, ib: usize| {
        let gv = gd[o];
        let (da, db) = match kind {
            BinaryKind::Add => (gv, gv),
            BinaryKind::Sub => (gv, -gv),
            BinaryKind::Mul => (gv * bd[ib], gv * ad[ia]),
            BinaryKind::Div => (gv / bd[ib], -gv * ad[ia] / (bd[ib] * bd[ib])),
        };
        if let Some(ga) = ga.as_mut() {
            ga[ia] += da;
        }
        if let Some(gb) = gb.as_mut() {
            gb[ib] += db;
        }
    };
    match bcast {
        None => (0..gd.len()).for_each(|i| step(i, i, i)),
        Some(plan) => plan.for_each(step),
    }
    vec![
        ga.map(|d| Tensor::new(a.shape(), d).expect("grad shape")),
        gb.map(|d| Tensor::new(b.shape(), d).expect("grad shape")),
    ]
}

fn matmul_backward<T: Real>(
    plan: &MatMulPlan,
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    needs: &[bool],
) -> Result<Vec<Option<Tensor<T>>>> {
    let MatMulPlan { m, k, n, pairs } = plan;
    let (m, k, n) = (*m, *k, *n);
    let (sa, sb, sc) = (m * k, k * n, m * n);
    let mut ga = needs[0].then(|| vec![T::zero(); a.numel()]);
    let mut gb = needs[1].then(|| vec![T::zero(); b.numel()]);
    for (bi, &(ia, ib)) in pairs.iter().enumerate() {
        let gm = &g.data()[bi * sc..(bi + 1) * sc];
        if let Some(ga) = ga.as_mut() {
            kernels::gemm_nt(m, k, n, gm, &b.data()[ib * sb..(ib + 1) * sb], &mut ga[ia * sa..(ia + 1) * sa]);
        }
        if let Some(gb) = gb.as_mut() {
            kernels::gemm_tn(k, n, m, &a.data()[ia * sa..(ia + 1) * sa], gm, &mut gb[ib * sb..(ib + 1) * sb]);
        }
    }
    Ok(vec![
        ga.map(|d| Tensor::new(a.shape(), d)).transpose()?,
        gb.map(|d| Tensor::new(b.shape(), d)).transpose()?,
    ])
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(shape_err(op, format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

/// Output extent of a strided, padded window along one axis.
pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if stride == 0 || k == 0 || padded < k || (padded - k) % stride != 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

/// Index map for `permute`: `out[i] = in[map[i]]`.
pub(crate) fn permute_index(shape: &[usize], perm: &[usize]) -> Vec<u32> {
    let strides = strides_of(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let out_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    map_from_strides(&out_shape, &out_strides, 0)
}

fn map_from_strides(out_shape: &[usize], src_strides: &[usize], base: usize) -> Vec<u32> {
    let n: usize = out_shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let rank = out_shape.len();
    if rank == 0 {
        map.push(base as u32);
        return map;
    }
    let mut idx = vec![0usize; rank];
    let mut off = base;
    let last = rank - 1;
    let (inner, s_last) = (out_shape[last], src_strides[last]);
    for _ in 0..n / inner {
        for j in 0..inner {
            map.push((off + j * s_last) as u32);
        }
        for d in (0..last).rev() {
            idx[d] += 1;
            off += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            off -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Calls `f(out_offset, out_index)` over a shape in row-major order.
pub(crate) fn for_each_index(shape: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let n: usize = shape.iter().product();
    let mut idx = vec![0usize; shape.len()];
    for o in 0..n {
        f(o, &idx);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

impl<T: Real> Graph<T> {
    fn binary(&mut self, kind: BinaryKind, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let f = |x: T, y: T| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let (value, bcast) = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            (Tensor::new(ta.shape(), data)?, None)
        } else {
            let plan = Broadcast::plan(ta.shape(), tb.shape(), name)?;
            let mut data = vec![T::zero(); plan.out_shape.iter().product()];
            let (ad, bd) = (ta.data(), tb.data());
            plan.for_each(|o, ia, ib| data[o] = f(ad[ia], bd[ib]));
            (Tensor::new(&plan.out_shape, data)?, Some(plan))
        };
        self.record(name, value, Op::Binary { kind, bcast }, vec![a, b])
    }

    /// Elementwise sum with NumPy broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, "div", a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        let value = self.value(x).map(|v| v * c);
        self.record("scale", value, Op::Scale(c), vec![x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = T::from_f64_lossy(c);
        let value = self.value(x).map(|v| v + c);
        self.record("add_scalar", value, Op::AddScalar, vec![x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| T::one() / (T::one() + (-v).exp()));
        self.record("sigmoid", value, Op::Unary(UnaryKind::Sigmoid), vec![x])
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v.normal_cdf());
        self.record("gelu", value, Op::Unary(UnaryKind::Gelu), vec![x])
    }

    /// Batched matrix product `[.., m, k] · [.., k, n]` with broadcast batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(shape_err("matmul", format!("incompatible shapes {sa:?} and {sb:?}")));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let na: usize = ba.iter().product();
        let pairs: Vec<(usize, usize)>;
        let mut out_shape: Vec<usize>;
        let mut rows = m;
        if bb.is_empty() {
            // A plain matrix on the right: fold a's batch dims into its rows.
            pairs = vec![(0, 0)];
            out_shape = ba.to_vec();
            rows = na * m;
        } else if ba == bb {
            pairs = (0..na).map(|i| (i, i)).collect();
            out_shape = ba.to_vec();
        } else {
            let plan = Broadcast::plan(ba, bb, "matmul")
                .map_err(|_| shape_err("matmul", format!("batch dims of {sa:?} and {sb:?} do not broadcast")))?;
            let mut p = Vec::new();
            plan.for_each(|_, ia, ib| p.push((ia, ib)));
            pairs = p;
            out_shape = plan.out_shape.clone();
        }
        out_shape.extend_from_slice(&[m, n]);
        let m = rows;
        let mut out = vec![T::zero(); pairs.len() * m * n];
        let (ad, bd) = (ta.data(), tb.data());
        for (bi, &(ia, ib)) in pairs.iter().enumerate() {
            kernels::gemm_nn(
                m,
                n,
                k,
                &ad[ia * m * k..(ia + 1) * m * k],
                &bd[ib * k * n..(ib + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let value = Tensor::new(&out_shape, out)?;
        self.record("matmul", value, Op::MatMul(MatMulPlan { m, k, n, pairs }), vec![a, b])
    }

    /// `x·w + b` over the last axis; `w` is `[in, out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Cross-correlation of `x: [Cin, D, H, W]` with `w: [Cout, Cin, k, k, k]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 4 || sw.len() != 5 || sw[1] != sx[0] || sw[2] != sw[3] || sw[3] != sw[4] || sb != [sw[0]] {
            return Err(shape_err(
                "conv3d",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?} are inconsistent"),
            ));
        }
        let k = sw[2];
        let mut output = [0; 3];
        for a in 0..3 {
            output[a] = conv_out_len(sx[a + 1], k, stride, pad).ok_or_else(|| {
                shape_err(
                    "conv3d",
                    format!("extent {} with k={k}, stride={stride}, pad={pad} is not integral", sx[a + 1]),
                )
            })?;
        }
        let geom = ConvGeom {
            cin: sx[0],
            cout: sw[0],
            k,
            stride,
            pad,
            input: [sx[1], sx[2], sx[3]],
            output,
        };
        let mut out = vec![T::zero(); geom.cout * output.iter().product::<usize>()];
        kernels::conv3d_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(&[geom.cout, output[0], output[1], output[2]], out)?;
        self.record("conv3d", value, Op::Conv3d(geom), vec![x, w, b])
    }

    /// Transposed convolution; `w` is `[Cin, Cout, k, k, k]`, no padding.
    /// Output extent is `(n - 1)·stride + k`.
    pub fn conv_transpose3d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if stride == 0 {
            return Err(TensorError::Argument {
                op: "conv_transpose3d",
                detail: "stride must be >= 1".into(),
            });
        }
        if sx.len() != 4 || sw.len() != 5 || sw[0] != sx[0] || sw[2] != sw[3] || sw[3] != sw[4] || sb != [sw[1]] {
            return Err(shape_err(
                "conv_transpose3d",
                format!("input {sx:?}, weight {sw:?}, bias {sb:?} are inconsistent"),
            ));
        }
        let k = sw[2];
        let input = [sx[1], sx[2], sx[3]];
        let output = input.map(|n| (n - 1) * stride + k);
        let geom = DeconvGeom {
            cin: sx[0],
            cout: sw[1],
            k,
            stride,
            input,
            output,
        };
        let mut out = vec![T::zero(); geom.cout * output.iter().product::<usize>()];
        kernels::deconv3d_forward(&geom, self.value(x).data(), self.value(w).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(&[geom.cout, output[0], output[1], output[2]], out)?;
        self.record("conv_transpose3d", value, Op::Deconv3d(geom), vec![x, w, b])
    }

    /// Per-channel normalization over all trailing axes of `x: [C, ...]`.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() < 2 || self.shape(gamma) != [sx[0]] || self.shape(beta) != [sx[0]] {
            return Err(shape_err("instance_norm", format!("input {sx:?} with affine of wrong shape")));
        }
        self.normalize("instance_norm", x, gamma, beta, eps, sx[1..].iter().product(), true)
    }

    /// Normalization over the last axis with per-feature affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().ok_or_else(|| shape_err("layer_norm", "scalar input"))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("layer_norm", format!("input {sx:?} with affine of wrong shape")));
        }
        self.normalize("layer_norm", x, gamma, beta, eps, c, false)
    }

    #[allow(clippy::too_many_arguments)]
    fn normalize(
        &mut self,
        name: &'static str,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        len: usize,
        per_row_affine: bool,
    ) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Argument {
                op: name,
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let tx = self.value(x);
        let rows = tx.numel() / len;
        let mut out = vec![T::zero(); tx.numel()];
        let mut stats = vec![(T::zero(), T::zero()); rows];
        kernels::normalize_rows(
            tx.data(),
            len,
            self.value(gamma).data(),
            self.value(beta).data(),
            per_row_affine,
            T::from_f64_lossy(eps),
            &mut out,
            &mut stats,
        );
        let value = Tensor::new(tx.shape(), out)?;
        self.record(
            name,
            value,
            Op::Norm {
                len,
                per_row_affine,
                stats,
            },
            vec![x, gamma, beta],
        )
    }

    /// Max-stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        check_axis("softmax", tx.shape(), axis)?;
        let split = AxisSplit::of(tx.shape(), axis);
        let xd = tx.data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..split.outer {
            for i in 0..split.inner {
                let base = o * split.len * split.inner + i;
                let mut mx = T::neg_infinity();
                for j in 0..split.len {
                    mx = mx.max(xd[base + j * split.inner]);
                }
                let mut s = T::zero();
                for j in 0..split.len {
                    let p = base + j * split.inner;
                    let e = (xd[p] - mx).exp();
                    out[p] = e;
                    s += e;
                }
                for j in 0..split.len {
                    out[base + j * split.inner] /= s;
                }
            }
        }
        let value = Tensor::new(tx.shape(), out)?;
        self.record("softmax", value, Op::Softmax(split), vec![x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.record("reshape", value, Op::Reshape, vec![x])
    }

    /// `out[i] = x.flat[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, index: Arc<[u32]>, out_shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let n: usize = out_shape.iter().product();
        if n != index.len() {
            return Err(shape_err(
                "gather",
                format!("index of length {} for output {out_shape:?}", index.len()),
            ));
        }
        let xd = tx.data();
        if index.iter().any(|&i| i != GATHER_ZERO && i as usize >= xd.len()) {
            return Err(shape_err("gather", format!("index out of range for input {:?}", tx.shape())));
        }
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { T::zero() } else { xd[i as usize] })
            .collect();
        let value = Tensor::new(out_shape, data)?;
        self.record("gather", value, Op::Gather(index), vec![x])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} is not a permutation of {shape:?}")));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let index = permute_index(&shape, perm);
        self.gather(x, index.into(), &out_shape)
    }

    /// Zero padding; `widths[a] = (before, after)` for every axis.
    pub fn pad(&mut self, x: Var, widths: &[(usize, usize)]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if widths.len() != shape.len() {
            return Err(shape_err("pad", format!("{} widths for rank {}", widths.len(), shape.len())));
        }
        let out_shape: Vec<usize> = shape.iter().zip(widths).map(|(&d, &(lo, hi))| d + lo + hi).collect();
        let strides = strides_of(&shape);
        let mut index = vec![0u32; out_shape.iter().product()];
        for_each_index(&out_shape, |o, idx| {
            let mut off = 0usize;
            for a in 0..idx.len() {
                let (lo, _) = widths[a];
                if idx[a] < lo || idx[a] >= lo + shape[a] {
                    index[o] = GATHER_ZERO;
                    return;
                }
                off += (idx[a] - lo) * strides[a];
            }
            index[o] = off as u32;
        });
        self.gather(x, index.into(), &out_shape)
    }

    /// `len` elements along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("slice", &shape, axis)?;
        if len == 0 || start + len > shape[axis] {
            return Err(shape_err(
                "slice",
                format!("[{start}, {}) along axis {axis} of {shape:?}", start + len),
            ));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let strides = strides_of(&shape);
        let index = map_from_strides(&out_shape, &strides, start * strides[axis]);
        self.gather(x, index.into(), &out_shape)
    }

    /// Selects `indices` along `axis` in the given order.
    pub fn index_select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_axis("index_select", &shape, axis)?;
        if indices.is_empty() || indices.iter().any(|&i| i >= shape[axis]) {
            return Err(shape_err("index_select", format!("{indices:?} along axis {axis} of {shape:?}")));
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = indices.len();
        let strides = strides_of(&shape);
        let mut index = vec![0u32; out_shape.iter().product()];
        for_each_index(&out_shape, |o, idx| {
            let mut off = 0;
            for a in 0..idx.len() {
                let i = if a == axis { indices[idx[a]] } else { idx[a] };
                off += i * strides[a];
            }
            index[o] = off as u32;
        });
        self.gather(x, index.into(), &out_shape)
    }

    /// Cyclic shift: `out[i] = x[(i - shift) mod n]` along each axis.
    pub fn roll(&mut self, x: Var, shifts: &[isize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shifts.len() != shape.len() {
            return Err(shape_err("roll", format!("{} shifts for rank {}", shifts.len(), shape.len())));
        }
        let strides = strides_of(&shape);
        let mut index = vec![0u32; shape.iter().product()];
        for_each_index(&shape, |o, idx| {
            let mut off = 0;
            for a in 0..idx.len() {
                let n = shape[a] as isize;
                let src = (idx[a] as isize - shifts[a]).rem_euclid(n) as usize;
                off += src * strides[a];
            }
            index[o] = off as u32;
        });
        self.gather(x, index.into(), &shape)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| shape_err("concat", "no inputs"))?)
            .to_vec();
        check_axis("concat", &first, axis)?;
        let mut split = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(a, (x, y))| a == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", format!("{s:?} does not match {first:?} off axis {axis}")));
            }
            split.push(s[axis]);
        }
        let total: usize = split.iter().sum();
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &len) in xs.iter().zip(&split) {
                let d = self.value(v).data();
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let value = Tensor::new(&out_shape, data)?;
        self.record("concat", value, Op::Concat { split, outer, inner }, xs.to_vec())
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.record("sum", value, Op::SumAll, vec![x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let value = Tensor::scalar(tx.sum() / T::from_usize(tx.numel()).unwrap());
        self.record("mean", value, Op::MeanAll, vec![x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce_axis(x, axis, keepdim, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize, keepdim: bool) -> Result<Var> {
        self.reduce_axis(x, axis, keepdim, true)
    }

    fn reduce_axis(&mut self, x: Var, axis: usize, keepdim: bool, mean: bool) -> Result<Var> {
        let tx = self.value(x);
        check_axis("reduce", tx.shape(), axis)?;
        let split = AxisSplit::of(tx.shape(), axis);
        let xd = tx.data();
        let scale = if mean {
            T::one() / T::from_usize(split.len).unwrap()
        } else {
            T::one()
        };
        let mut out = vec![T::zero(); split.outer * split.inner];
        for o in 0..split.outer {
            let dst = &mut out[o * split.inner..(o + 1) * split.inner];
            for j in 0..split.len {
                let src = &xd[(o * split.len + j) * split.inner..][..split.inner];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d *= scale;
            }
        }
        let mut out_shape = tx.shape().to_vec();
        if keepdim {
            out_shape[axis] = 1;
        } else {
            out_shape.remove(axis);
        }
        let value = Tensor::new(&out_shape, out)?;
        self.record("reduce", value, Op::SumAxis { split, mean }, vec![x])
    }
}
