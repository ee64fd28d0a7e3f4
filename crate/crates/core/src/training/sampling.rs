//! Foreground-biased patch sampling and case selection.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::volumeio::{linear_index, voxel_count, Dims, LabelMap, Volume};

/// A patch cut from a case, with the sampled centre and the patch origin in
/// case coordinates (the origin is the clamped corner, so it may differ
/// from `center - size / 2`).
#[derive(Clone, Debug, PartialEq)]
pub struct Patch {
    pub image: Volume,
    pub labels: LabelMap,
    pub center: Dims,
    pub origin: Dims,
    /// Whether the centre was drawn from the foreground.
    pub positive: bool,
}

/// With probability `pos_prob` the centre is a uniformly chosen foreground
/// voxel, otherwise a uniformly chosen voxel. Cases without foreground fall
/// back to uniform centres. The patch is shifted to stay inside the volume
/// and zero-padded along axes where the volume is smaller than `size`.
pub fn sample_patch(v: &Volume, l: &LabelMap, size: Dims, pos_prob: f64, rng: &mut ChaCha8Rng) -> Patch {
    assert_eq!(v.dims, l.dims, "image and labels must share a grid");
    let dims = v.dims;
    let want_positive = rng.gen_bool(pos_prob.clamp(0.0, 1.0));
    let mut positive = false;
    let mut center_index = None;
    if want_positive {
        let count = l.labels.iter().filter(|&&c| c != 0).count();
        if count > 0 {
            let k = rng.gen_range(0..count);
            center_index = l.labels.iter().enumerate().filter(|(_, &c)| c != 0).nth(k).map(|(i, _)| i);
            positive = true;
        }
    }
    let i = center_index.unwrap_or_else(|| rng.gen_range(0..voxel_count(dims)));
    let center = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
    let origin = [0, 1, 2].map(|a| {
        if dims[a] <= size[a] {
            0
        } else {
            center[a].saturating_sub(size[a] / 2).min(dims[a] - size[a])
        }
    });
    let (image, labels) = extract(v, l, origin, size);
    Patch {
        image,
        labels,
        center,
        origin,
        positive,
    }
}

/// Copies `[origin, origin + size)`, zero outside the source grid.
pub fn extract(v: &Volume, l: &LabelMap, origin: Dims, size: Dims) -> (Volume, LabelMap) {
    let n = voxel_count(size);
    let mut voxels = vec![0.0f32; n];
    let mut labels = vec![0u8; n];
    let d = v.dims;
    for z in 0..size[0].min(d[0].saturating_sub(origin[0])) {
        for y in 0..size[1].min(d[1].saturating_sub(origin[1])) {
            let w = size[2].min(d[2].saturating_sub(origin[2]));
            let src = linear_index(d, origin[0] + z, origin[1] + y, origin[2]);
            let dst = linear_index(size, z, y, 0);
            voxels[dst..dst + w].copy_from_slice(&v.voxels[src..src + w]);
            labels[dst..dst + w].copy_from_slice(&l.labels[src..src + w]);
        }
    }
    (
        Volume {
            dims: size,
            spacing: v.spacing,
            voxels,
        },
        LabelMap {
            dims: size,
            labels,
            ..l.clone()
        },
    )
}
