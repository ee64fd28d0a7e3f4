//! Random rigid augmentation shared by an image and its labels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::volumeio::{linear_index, Dims, LabelMap, Volume};

/// Rotation about the grid centre `(n - 1) / 2` followed by an integer
/// translation. Angles are in radians about the D, H and W axes, applied in
/// that order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub angles: [f64; 3],
    pub translation: [i64; 3],
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            angles: [0.0; 3],
            translation: [0; 3],
        }
    }

    /// Angles uniform in `±max_degrees` and translations uniform in
    /// `±max_shift` voxels, independently per axis.
    pub fn random(rng: &mut ChaCha8Rng, max_degrees: f64, max_shift: usize) -> Self {
        let r = max_degrees.to_radians();
        let s = max_shift as i64;
        let angles = [0; 3].map(|_| if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 });
        let translation = [0; 3].map(|_| rng.gen_range(-s..=s));
        Self { angles, translation }
    }

    /// Rotation matrix `R = R_w · R_h · R_d` in (z, y, x) coordinates.
    fn rotation(&self) -> [[f64; 3]; 3] {
        let rot = |axis: usize, a: f64| {
            let (s, c) = a.sin_cos();
            let (i, j) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let mut m = [[0.0; 3]; 3];
            m[axis][axis] = 1.0;
            m[i][i] = c;
            m[j][j] = c;
            m[i][j] = -s;
            m[j][i] = s;
            m
        };
        let mul = |a: [[f64; 3]; 3], b: [[f64; 3]; 3]| {
            let mut m = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
                }
            }
            m
        };
        mul(rot(2, self.angles[2]), mul(rot(1, self.angles[1]), rot(0, self.angles[0])))
    }

    /// Source coordinate of every output voxel: `Rᵀ·(p − t − c) + c`.
    fn source_coords(&self, dims: Dims) -> impl Iterator<Item = [f64; 3]> {
        let r = self.rotation();
        let c = dims.map(|n| (n as f64 - 1.0) / 2.0);
        let t = self.translation.map(|v| v as f64);
        let identity = self.angles == [0.0; 3];
        (0..dims[0]).flat_map(move |z| {
            (0..dims[1]).flat_map(move |y| {
                (0..dims[2]).map(move |x| {
                    let p = [z as f64, y as f64, x as f64];
                    let q = [0, 1, 2].map(|a| p[a] - t[a]);
                    if identity {
                        return q;
                    }
                    let d = [0, 1, 2].map(|a| q[a] - c[a]);
                    [0, 1, 2].map(|a| r[0][a] * d[0] + r[1][a] * d[1] + r[2][a] * d[2] + c[a])
                })
            })
        })
    }

    /// Trilinear resampling; samples outside the grid read as zero.
    pub fn apply_volume(&self, v: &Volume) -> Volume {
        let voxels = self.source_coords(v.dims).map(|s| trilinear_zero(v, s)).collect();
        Volume {
            dims: v.dims,
            spacing: v.spacing,
            voxels,
        }
    }

    /// Nearest-neighbour resampling; samples outside the grid are background.
    pub fn apply_labels(&self, l: &LabelMap) -> LabelMap {
        let d = l.dims;
        let labels = self
            .source_coords(d)
            .map(|s| {
                let i = s.map(|v| (v + 0.5).floor());
                if (0..3).all(|a| i[a] >= 0.0 && i[a] < d[a] as f64) {
                    l.labels[linear_index(d, i[0] as usize, i[1] as usize, i[2] as usize)]
                } else {
                    0
                }
            })
            .collect();
        LabelMap { labels, ..l.clone() }
    }
}

fn trilinear_zero(v: &Volume, s: [f64; 3]) -> f32 {
    let f = s.map(f64::floor);
    let t = [0, 1, 2].map(|a| s[a] - f[a]);
    let mut acc = 0.0f64;
    for dz in 0..2 {
        let wz = if dz == 0 { 1.0 - t[0] } else { t[0] };
        let z = f[0] as i64 + dz;
        if wz == 0.0 || z < 0 || z >= v.dims[0] as i64 {
            continue;
        }
        for dy in 0..2 {
            let wy = if dy == 0 { 1.0 - t[1] } else { t[1] };
            let y = f[1] as i64 + dy;
            if wy == 0.0 || y < 0 || y >= v.dims[1] as i64 {
                continue;
            }
            for dx in 0..2 {
                let wx = if dx == 0 { 1.0 - t[2] } else { t[2] };
                let x = f[2] as i64 + dx;
                if wx == 0.0 || x < 0 || x >= v.dims[2] as i64 {
                    continue;
                }
                acc += wz * wy * wx * v.at(z as usize, y as usize, x as usize) as f64;
            }
        }
    }
    acc as f32
}

/// Draws one transform and applies it to both grids.
pub fn augment(
    v: &Volume,
    l: &LabelMap,
    rng: &mut ChaCha8Rng,
    max_degrees: f64,
    max_shift: usize,
) -> (Volume, LabelMap) {
    assert_eq!(v.dims, l.dims, "image and labels must share a grid");
    let t = RigidTransform::random(rng, max_degrees, max_shift);
    (t.apply_volume(v), t.apply_labels(l))
}
