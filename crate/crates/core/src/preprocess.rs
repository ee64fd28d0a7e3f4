//! Foreground cropping, spacing normalization and Z-score standardization.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volumeio::{linear_index, voxel_count, Dims, LabelMap, Spacing, Volume};

/// Floor for the standard deviation in [`zscore`].
pub const SIGMA_EPS: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum PreprocessError {
    #[error("volume has no non-zero voxel to crop to")]
    EmptyForeground,
    #[error("{0} interpolation cannot be used for label maps")]
    LabelInterpolation(Interpolation),
    #[error("invalid target spacing {0:?}")]
    Spacing(Spacing),
    #[error("crop box {lo:?}..{hi:?} does not fit dims {dims:?}")]
    BadBox { lo: Dims, hi: Dims, dims: Dims },
}

pub type Result<T, E = PreprocessError> = std::result::Result<T, E>;

/// Axis-aligned box: `lo` inclusive, `hi` exclusive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropBox {
    pub lo: Dims,
    pub hi: Dims,
}

impl CropBox {
    pub fn whole(dims: Dims) -> Self {
        Self { lo: [0; 3], hi: dims }
    }

    pub fn dims(&self) -> Dims {
        [self.hi[0] - self.lo[0], self.hi[1] - self.lo[1], self.hi[2] - self.lo[2]]
    }

    pub fn check(&self, dims: Dims) -> Result<()> {
        let ok = (0..3).all(|a| self.lo[a] < self.hi[a] && self.hi[a] <= dims[a]);
        if ok {
            Ok(())
        } else {
            Err(PreprocessError::BadBox {
                lo: self.lo,
                hi: self.hi,
                dims,
            })
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZScoreParams {
    pub mu: f64,
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

impl std::fmt::Display for Interpolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Interpolation::Trilinear => "trilinear",
            Interpolation::Nearest => "nearest",
        })
    }
}

fn crop_buffer<T: Copy>(src: &[T], dims: Dims, b: &CropBox) -> Vec<T> {
    let mut out = Vec::with_capacity(voxel_count(b.dims()));
    for z in b.lo[0]..b.hi[0] {
        for y in b.lo[1]..b.hi[1] {
            let start = linear_index(dims, z, y, b.lo[2]);
            out.extend_from_slice(&src[start..start + (b.hi[2] - b.lo[2])]);
        }
    }
    out
}

/// Tight bounding box of voxels with `|value| > 0`, and the cropped volume.
pub fn crop_nonzero(v: &Volume) -> Result<(Volume, CropBox)> {
    let mut lo = v.dims;
    let mut hi = [0usize; 3];
    for z in 0..v.dims[0] {
        for y in 0..v.dims[1] {
            for x in 0..v.dims[2] {
                if v.at(z, y, x) != 0.0 {
                    for (a, c) in [z, y, x].into_iter().enumerate() {
                        lo[a] = lo[a].min(c);
                        hi[a] = hi[a].max(c + 1);
                    }
                }
            }
        }
    }
    if hi[0] == 0 {
        return Err(PreprocessError::EmptyForeground);
    }
    let b = CropBox { lo, hi };
    Ok((crop_volume(v, &b)?, b))
}

pub fn crop_volume(v: &Volume, b: &CropBox) -> Result<Volume> {
    b.check(v.dims)?;
    Ok(Volume {
        dims: b.dims(),
        spacing: v.spacing,
        voxels: crop_buffer(&v.voxels, v.dims, b),
    })
}

pub fn crop_labels(l: &LabelMap, b: &CropBox) -> Result<LabelMap> {
    b.check(l.dims)?;
    Ok(LabelMap {
        dims: b.dims(),
        labels: crop_buffer(&l.labels, l.dims, b),
        ..l.clone()
    })
}

fn embed_buffer<T: Copy>(src: &[T], src_dims: Dims, b: &CropBox, dst: &mut [T], dims: Dims) {
    let row = src_dims[2];
    for z in 0..src_dims[0] {
        for y in 0..src_dims[1] {
            let s = linear_index(src_dims, z, y, 0);
            let d = linear_index(dims, z + b.lo[0], y + b.lo[1], b.lo[2]);
            dst[d..d + row].copy_from_slice(&src[s..s + row]);
        }
    }
}

fn check_embed(b: &CropBox, cropped: Dims, dims: Dims) -> Result<()> {
    b.check(dims)?;
    if b.dims() != cropped {
        return Err(PreprocessError::BadBox {
            lo: b.lo,
            hi: b.hi,
            dims: cropped,
        });
    }
    Ok(())
}

/// Places a cropped volume back into a zero-filled grid of `dims`.
pub fn embed_volume(cropped: &Volume, b: &CropBox, dims: Dims) -> Result<Volume> {
    check_embed(b, cropped.dims, dims)?;
    let mut out = Volume::filled(dims, cropped.spacing, 0.0);
    embed_buffer(&cropped.voxels, cropped.dims, b, &mut out.voxels, dims);
    Ok(out)
}

/// Places cropped labels back into a background grid of `dims`.
pub fn embed_labels(cropped: &LabelMap, b: &CropBox, dims: Dims) -> Result<LabelMap> {
    check_embed(b, cropped.dims, dims)?;
    let mut labels = vec![0u8; voxel_count(dims)];
    embed_buffer(&cropped.labels, cropped.dims, b, &mut labels, dims);
    Ok(LabelMap {
        dims,
        labels,
        ..cropped.clone()
    })
}

fn resampled_dims(dims: Dims, from: Spacing, to: Spacing) -> Dims {
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = ((dims[a] as f64 * from[a] / to[a]).round() as usize).max(1);
    }
    out
}

fn check_spacing(target: Spacing) -> Result<()> {
    if target.iter().all(|&s| s > 0.0 && s.is_finite()) {
        Ok(())
    } else {
        Err(PreprocessError::Spacing(target))
    }
}

/// Continuous source index of output voxel `i` (voxel centres aligned),
/// clamped to the source grid.
fn source_coord(i: usize, from: f64, to: f64, len: usize) -> f64 {
    let c = (i as f64 + 0.5) * to / from - 0.5;
    c.clamp(0.0, (len - 1) as f64)
}

fn nearest_index(c: f64, len: usize) -> usize {
    ((c + 0.5).floor() as usize).min(len - 1)
}

pub fn resample_volume(v: &Volume, target: Spacing, mode: Interpolation) -> Result<Volume> {
    check_spacing(target)?;
    if target == v.spacing {
        return Ok(v.clone());
    }
    let dims = resampled_dims(v.dims, v.spacing, target);
    let coords: Vec<Vec<f64>> = (0..3)
        .map(|a| (0..dims[a]).map(|i| source_coord(i, v.spacing[a], target[a], v.dims[a])).collect())
        .collect();
    let mut voxels = Vec::with_capacity(voxel_count(dims));
    for &cz in &coords[0] {
        for &cy in &coords[1] {
            for &cx in &coords[2] {
                let value = match mode {
                    Interpolation::Nearest => v.at(
                        nearest_index(cz, v.dims[0]),
                        nearest_index(cy, v.dims[1]),
                        nearest_index(cx, v.dims[2]),
                    ),
                    Interpolation::Trilinear => trilinear(v, [cz, cy, cx]),
                };
                voxels.push(value);
            }
        }
    }
    Ok(Volume {
        dims,
        spacing: target,
        voxels,
    })
}

/// Trilinear interpolation at a continuous index inside the grid.
pub(crate) fn trilinear(v: &Volume, c: [f64; 3]) -> f32 {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut t = [0f64; 3];
    for a in 0..3 {
        let f = c[a].floor();
        i0[a] = f as usize;
        i1[a] = (i0[a] + 1).min(v.dims[a] - 1);
        t[a] = c[a] - f;
    }
    let mut acc = 0.0f64;
    for (dz, wz) in [(i0[0], 1.0 - t[0]), (i1[0], t[0])] {
        if wz == 0.0 {
            continue;
        }
        for (dy, wy) in [(i0[1], 1.0 - t[1]), (i1[1], t[1])] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(i0[2], 1.0 - t[2]), (i1[2], t[2])] {
                if wx == 0.0 {
                    continue;
                }
                acc += wz * wy * wx * v.at(dz, dy, dx) as f64;
            }
        }
    }
    acc as f32
}

/// Nearest-neighbour resampling of labels; the availability set is kept.
pub fn resample_labels(l: &LabelMap, target: Spacing, mode: Interpolation) -> Result<LabelMap> {
    if mode != Interpolation::Nearest {
        return Err(PreprocessError::LabelInterpolation(mode));
    }
    check_spacing(target)?;
    if target == l.spacing {
        return Ok(l.clone());
    }
    Ok(resample_labels_onto(l, resampled_dims(l.dims, l.spacing, target), target))
}

/// Nearest-neighbour resampling onto an explicit grid, used to map labels
/// back to a grid whose extents rounding would not reproduce.
pub fn resample_labels_onto(l: &LabelMap, dims: Dims, spacing: Spacing) -> LabelMap {
    let idx: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            (0..dims[a])
                .map(|i| nearest_index(source_coord(i, l.spacing[a], spacing[a], l.dims[a]), l.dims[a]))
                .collect()
        })
        .collect();
    let mut labels = Vec::with_capacity(voxel_count(dims));
    for &z in &idx[0] {
        for &y in &idx[1] {
            for &x in &idx[2] {
                labels.push(l.at(z, y, x));
            }
        }
    }
    LabelMap {
        dims,
        spacing,
        labels,
        ..l.clone()
    }
}

/// `(x − μ) / max(σ, ε)` over the whole volume, with μ and σ (population)
/// measured inside `region` (default: the whole volume).
pub fn zscore(v: &Volume, region: Option<&CropBox>) -> Result<(Volume, ZScoreParams)> {
    let whole = CropBox::whole(v.dims);
    let region = region.unwrap_or(&whole);
    region.check(v.dims)?;
    let values = crop_buffer(&v.voxels, v.dims, region);
    let n = values.len() as f64;
    let mu = values.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = values.iter().map(|&x| (x as f64 - mu).powi(2)).sum::<f64>() / n;
    let sigma = var.sqrt();
    let denom = sigma.max(SIGMA_EPS);
    let voxels = v.voxels.iter().map(|&x| ((x as f64 - mu) / denom) as f32).collect();
    Ok((
        Volume {
            dims: v.dims,
            spacing: v.spacing,
            voxels,
        },
        ZScoreParams { mu, sigma },
    ))
}

/// Output of the full preprocessing chain for one case.
#[derive(Clone, Debug)]
pub struct Preprocessed {
    pub image: Volume,
    pub labels: Option<LabelMap>,
    pub crop: CropBox,
    pub zscore: ZScoreParams,
}

/// Crop to the non-zero image region, resample both grids to `target`,
/// then standardize the image over the cropped region.
pub fn preprocess_case(image: &Volume, labels: Option<&LabelMap>, target: Spacing) -> Result<Preprocessed> {
    let (cropped, crop) = crop_nonzero(image)?;
    let resampled = resample_volume(&cropped, target, Interpolation::Trilinear)?;
    let labels = labels
        .map(|l| {
            let c = crop_labels(l, &crop)?;
            resample_labels(&c, target, Interpolation::Nearest)
        })
        .transpose()?;
    let (image, params) = zscore(&resampled, None)?;
    Ok(Preprocessed {
        image,
        labels,
        crop,
        zscore: params,
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::volumeio::ClassSet;

    #[test]
    fn crop_examples() {
        let mut v = Volume::filled([5, 6, 7], [1.0; 3], 0.0);
        v.voxels[linear_index(v.dims, 2, 3, 4)] = -3.0;
        let (c, b) = crop_nonzero(&v).unwrap();
        assert_eq!(c.dims, [1, 1, 1]);
        assert_eq!(b.lo, [2, 3, 4]);
        assert_eq!(c.voxels, vec![-3.0]);

        let full = Volume::filled([3, 2, 4], [1.0; 3], 1.5);
        let (c, b) = crop_nonzero(&full).unwrap();
        assert_eq!(c, full);
        assert_eq!(b, CropBox::whole(full.dims));

        let zeros = Volume::filled([2, 2, 2], [1.0; 3], 0.0);
        assert_eq!(crop_nonzero(&zeros).unwrap_err(), PreprocessError::EmptyForeground);
    }

    #[test]
    fn resample_examples() {
        let v = Volume::new([2, 2, 3], [1.0, 2.0, 0.7], (0..12).map(|i| i as f32 * 1.1).collect()).unwrap();
        let same = resample_volume(&v, v.spacing, Interpolation::Trilinear).unwrap();
        assert_eq!(same.voxels.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), v.voxels.iter().map(|x| x.to_bits()).collect::<Vec<_>>());

        let l = LabelMap::new([4, 4, 4], [1.0; 3], 1, ClassSet::full(1), vec![1; 64]).unwrap();
        let r = resample_labels(&l, [2.0; 3], Interpolation::Nearest).unwrap();
        assert_eq!(r.dims, [2, 2, 2]);
        assert!(r.labels.iter().all(|&x| x == 1));
        assert_eq!(r.available, l.available);

        let ramp = Volume::new([1, 1, 2], [1.0; 3], vec![0.0, 1.0]).unwrap();
        let mid = resample_volume(&ramp, [1.0, 1.0, 2.0], Interpolation::Trilinear).unwrap();
        assert_eq!(mid.dims, [1, 1, 1]);
        assert_eq!(mid.voxels, vec![0.5]);

        assert_eq!(
            resample_labels(&l, [2.0; 3], Interpolation::Trilinear).unwrap_err(),
            PreprocessError::LabelInterpolation(Interpolation::Trilinear)
        );
    }

    #[test]
    fn zscore_examples() {
        let v = Volume::new([1, 1, 3], [1.0; 3], vec![2.0, 4.0, 6.0]).unwrap();
        let (z, p) = zscore(&v, None).unwrap();
        assert!((p.mu - 4.0).abs() < 1e-12);
        assert!((p.sigma - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let mean: f64 = z.voxels.iter().map(|&x| x as f64).sum::<f64>() / 3.0;
        assert!(mean.abs() < 1e-9);

        let c = Volume::filled([2, 2, 2], [1.0; 3], 7.0);
        let (z, p) = zscore(&c, None).unwrap();
        assert_eq!(p.sigma, 0.0);
        assert!(z.voxels.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn preprocess_case_keeps_labels_aligned() {
        let mut v = Volume::filled([6, 6, 6], [1.0; 3], 0.0);
        let mut l = LabelMap::background([6, 6, 6], [1.0; 3], 2);
        for z in 1..5 {
            for y in 2..5 {
                for x in 1..4 {
                    let i = linear_index(v.dims, z, y, x);
                    v.voxels[i] = 10.0 + x as f32;
                    if x == 2 {
                        l.labels[i] = 2;
                    }
                }
            }
        }
        let p = preprocess_case(&v, Some(&l), [1.0; 3]).unwrap();
        assert_eq!(p.crop, CropBox { lo: [1, 2, 1], hi: [5, 5, 4] });
        let labels = p.labels.unwrap();
        assert_eq!(labels.dims, p.image.dims);
        assert_eq!(labels.count(2), 12);
        assert_eq!(labels.at(0, 0, 1), 2);
    }

    fn arb_volume() -> impl Strategy<Value = Volume> {
        (1usize..6, 1usize..6, 1usize..6, any::<u64>()).prop_map(|(d, h, w, seed)| {
            let n = d * h * w;
            let voxels = (0..n)
                .map(|i| {
                    let r = seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64 * 1442695040888963407) >> 40;
                    if r % 3 == 0 { 0.0 } else { (r % 2000) as f32 / 7.0 - 140.0 }
                })
                .collect();
            Volume::new([d, h, w], [1.0, 1.5, 0.8], voxels).unwrap()
        })
    }

    proptest! {
        #[test]
        fn crop_then_embed_restores_nonzero_content(v in arb_volume()) {
            prop_assume!(v.voxels.iter().any(|&x| x != 0.0));
            let (c, b) = crop_nonzero(&v).unwrap();
            prop_assert_eq!(embed_volume(&c, &b, v.dims).unwrap(), v);
        }

        #[test]
        fn nearest_resampling_only_emits_input_labels(
            dims in prop::array::uniform3(1usize..7), target in prop::array::uniform3(0.4f64..3.0), seed in any::<u64>()
        ) {
            let n = voxel_count(dims);
            let labels: Vec<u8> = (0..n).map(|i| [0u8, 1, 3][((seed >> (i % 50)) as usize + i) % 3]).collect();
            let l = LabelMap::new(dims, [1.0; 3], 3, ClassSet::full(3), labels).unwrap();
            let r = resample_labels(&l, target, Interpolation::Nearest).unwrap();
            prop_assert!(r.present().is_subset(&l.present()));
            let again = resample_labels(&r, target, Interpolation::Nearest).unwrap();
            prop_assert_eq!(again, r);
        }

        #[test]
        fn zscore_standardizes_and_is_affine_invariant(v in arb_volume(), a in 0.1f32..10.0, b in -50f32..50.0) {
            let (z, p) = zscore(&v, None).unwrap();
            prop_assume!(p.sigma > 1e-3);
            let n = z.voxels.len() as f64;
            let mean = z.voxels.iter().map(|&x| x as f64).sum::<f64>() / n;
            let std = (z.voxels.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
            prop_assert!(mean.abs() <= 1e-6);
            prop_assert!((std - 1.0).abs() <= 1e-4);
            let shifted = Volume { voxels: v.voxels.iter().map(|&x| a * x + b).collect(), ..v.clone() };
            let (z2, _) = zscore(&shifted, None).unwrap();
            for (x, y) in z.voxels.iter().zip(&z2.voxels) {
                prop_assert!((x - y).abs() <= 1e-4 * x.abs().max(1.0), "{} vs {}", x, y);
            }
        }
    }
}
