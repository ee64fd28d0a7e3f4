//! Brute-force reference implementations shared by the integration and
//! acceptance tests. Each one avoids the library code path it checks.
#![allow(dead_code)]

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use swinseg::tensor::{Real, Tensor};

pub fn random_tensor<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(
        shape,
        (0..n).map(|_| T::from_f64_lossy(rng.gen_range(-scale..scale))).collect(),
    )
    .unwrap()
}

/// Weights of one attention layer, in the library's `[in, out]` layout.
pub struct AttnWeights {
    pub qkv_w: Tensor<f64>,
    pub qkv_b: Tensor<f64>,
    pub proj_w: Tensor<f64>,
    pub proj_b: Tensor<f64>,
    pub rpb: Option<Tensor<f64>>,
}

impl AttnWeights {
    pub fn random(rng: &mut ChaCha8Rng, c: usize, heads: usize, m: usize, rel_pos: bool) -> Self {
        Self {
            qkv_w: random_tensor(rng, &[c, 3 * c], 0.8),
            qkv_b: random_tensor(rng, &[3 * c], 0.3),
            proj_w: random_tensor(rng, &[c, c], 0.8),
            proj_b: random_tensor(rng, &[c], 0.3),
            rpb: rel_pos.then(|| random_tensor(rng, &[(2 * m - 1).pow(3), heads], 1.0)),
        }
    }

    pub fn store(&self, prefix: &str) -> BTreeMap<String, Tensor<f64>> {
        let mut s = BTreeMap::new();
        s.insert(format!("{prefix}.qkv.w"), self.qkv_w.clone());
        s.insert(format!("{prefix}.qkv.b"), self.qkv_b.clone());
        s.insert(format!("{prefix}.proj.w"), self.proj_w.clone());
        s.insert(format!("{prefix}.proj.b"), self.proj_b.clone());
        if let Some(t) = &self.rpb {
            s.insert(format!("{prefix}.rpb"), t.clone());
        }
        s
    }
}

fn affine(x: &[f64], w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<f64> {
    let (cin, cout) = (w.shape()[0], w.shape()[1]);
    (0..cout)
        .map(|o| b.data()[o] + (0..cin).map(|i| x[i] * w.data()[i * cout + o]).sum::<f64>())
        .collect()
}

/// Shifted-window attention computed region by region: every real token is
/// assigned to the region `floor((coord - shift) / window)` per axis, and
/// plain attention runs over each region's token set. No roll, no padding
/// and no mask are involved.
pub fn region_attention_oracle(
    x: &Tensor<f64>,
    w: &AttnWeights,
    m: usize,
    heads: usize,
    shifted: bool,
) -> Tensor<f64> {
    let s = x.shape();
    let (dims, c) = ([s[0], s[1], s[2]], s[3]);
    let d = c / heads;
    let mut win = [0usize; 3];
    let mut shift = [0i64; 3];
    for a in 0..3 {
        if dims[a] <= m {
            win[a] = dims[a];
        } else {
            win[a] = m;
            shift[a] = if shifted { (m / 2) as i64 } else { 0 };
        }
    }
    let mut groups: BTreeMap<[i64; 3], Vec<[usize; 3]>> = BTreeMap::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for xx in 0..dims[2] {
                let p = [z, y, xx];
                let key = [0, 1, 2].map(|a| (p[a] as i64 - shift[a]).div_euclid(win[a] as i64));
                groups.entry(key).or_default().push(p);
            }
        }
    }
    let flat = |p: [usize; 3]| (p[0] * dims[1] + p[1]) * dims[2] + p[2];
    let mut out = vec![0.0; x.numel()];
    let span = (2 * m - 1) as i64;
    for tokens in groups.values() {
        let qkv: Vec<Vec<f64>> = tokens
            .iter()
            .map(|&p| affine(&x.data()[flat(p) * c..(flat(p) + 1) * c], &w.qkv_w, &w.qkv_b))
            .collect();
        for (i, &pi) in tokens.iter().enumerate() {
            let mut concat = vec![0.0; c];
            for h in 0..heads {
                let q = &qkv[i][h * d..(h + 1) * d];
                let scores: Vec<f64> = tokens
                    .iter()
                    .enumerate()
                    .map(|(j, &pj)| {
                        let k = &qkv[j][c + h * d..c + (h + 1) * d];
                        let mut sc = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt();
                        if let Some(t) = &w.rpb {
                            let r = [0, 1, 2].map(|a| pi[a] as i64 - pj[a] as i64 + m as i64 - 1);
                            let row = ((r[0] * span + r[1]) * span + r[2]) as usize;
                            sc += t.data()[row * heads + h];
                        }
                        sc
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    let v = &qkv[j][2 * c + h * d..2 * c + (h + 1) * d];
                    for t in 0..d {
                        concat[h * d + t] += ej / z * v[t];
                    }
                }
            }
            let o = affine(&concat, &w.proj_w, &w.proj_b);
            out[flat(pi) * c..(flat(pi) + 1) * c].copy_from_slice(&o);
        }
    }
    Tensor::new(s, out).unwrap()
}

/// Connected components by breadth-first flood fill. Returns a component
/// id per voxel (`usize::MAX` outside the mask) and the component count.
pub fn bfs_components(mask: &[bool], dims: [usize; 3], connectivity: usize) -> (Vec<usize>, usize) {
    let mut offsets = Vec::new();
    for dz in -1i64..=1 {
        for dy in -1i64..=1 {
            for dx in -1i64..=1 {
                let manhattan = dz.abs() + dy.abs() + dx.abs();
                if manhattan == 0 || (connectivity == 6 && manhattan > 1) {
                    continue;
                }
                offsets.push([dz, dy, dx]);
            }
        }
    }
    let mut id = vec![usize::MAX; mask.len()];
    let mut count = 0;
    for start in 0..mask.len() {
        if !mask[start] || id[start] != usize::MAX {
            continue;
        }
        id[start] = count;
        let mut queue = VecDeque::from([start]);
        while let Some(v) = queue.pop_front() {
            let p = [v / (dims[1] * dims[2]), (v / dims[2]) % dims[1], v % dims[2]];
            for o in &offsets {
                let q = [0, 1, 2].map(|a| p[a] as i64 + o[a]);
                if (0..3).any(|a| q[a] < 0 || q[a] >= dims[a] as i64) {
                    continue;
                }
                let u = ((q[0] as usize * dims[1]) + q[1] as usize) * dims[2] + q[2] as usize;
                if mask[u] && id[u] == usize::MAX {
                    id[u] = count;
                    queue.push_back(u);
                }
            }
        }
        count += 1;
    }
    (id, count)
}

/// True when two labelings induce the same partition of the voxels.
pub fn same_partition(a: &[usize], b: &[usize]) -> bool {
    let mut ab = BTreeMap::new();
    let mut ba = BTreeMap::new();
    a.iter().zip(b).all(|(&x, &y)| *ab.entry(x).or_insert(y) == y && *ba.entry(y).or_insert(x) == x)
}

/// Random binary mask made of a few random boxes plus salt noise.
pub fn random_mask(rng: &mut ChaCha8Rng, dims: [usize; 3], density: f64) -> Vec<bool> {
    let n = dims.iter().product();
    let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(density)).collect();
    for _ in 0..rng.gen_range(0..4) {
        let lo = dims.map(|d| rng.gen_range(0..d));
        let hi = [0, 1, 2].map(|a| (lo[a] + rng.gen_range(1..5)).min(dims[a]));
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    mask[(z * dims[1] + y) * dims[2] + x] = true;
                }
            }
        }
    }
    mask
}

/// Surface voxels (6-neighbour boundary) of a mask, in mm coordinates.
pub fn surface_points(mask: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<[f64; 3]> {
    let at = |z: i64, y: i64, x: i64| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < dims[0]
            && (y as usize) < dims[1]
            && (x as usize) < dims[2]
            && mask[((z as usize) * dims[1] + y as usize) * dims[2] + x as usize]
    };
    let mut pts = Vec::new();
    for z in 0..dims[0] as i64 {
        for y in 0..dims[1] as i64 {
            for x in 0..dims[2] as i64 {
                if !at(z, y, x) {
                    continue;
                }
                let inner = at(z - 1, y, x) && at(z + 1, y, x) && at(z, y - 1, x) && at(z, y + 1, x) && at(z, y, x - 1) && at(z, y, x + 1);
                if !inner {
                    pts.push([z as f64 * spacing[0], y as f64 * spacing[1], x as f64 * spacing[2]]);
                }
            }
        }
    }
    pts
}

/// Normalized surface Dice by exhaustive pairwise distances.
pub fn nsd_oracle(a: &[bool], b: &[bool], dims: [usize; 3], spacing: [f64; 3], tau: f64) -> f64 {
    let (sa, sb) = (surface_points(a, dims, spacing), surface_points(b, dims, spacing));
    match (sa.is_empty(), sb.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let within = |p: &[f64; 3], set: &[[f64; 3]]| {
        set.iter()
            .any(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt() <= tau)
    };
    let hits = sa.iter().filter(|p| within(p, &sb)).count() + sb.iter().filter(|p| within(p, &sa)).count();
    hits as f64 / (sa.len() + sb.len()) as f64
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
