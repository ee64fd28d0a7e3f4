//! Sliding-window inference and pseudo-label generation.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use super::{prepare_case, InferConfig, Result, TrainError};
use crate::model::{predict_labels, SwinUnetr};
use crate::phantom::MANIFEST_FILE;
use crate::postprocess::keep_largest_per_label;
use crate::preprocess::{embed_labels, resample_labels_onto};
use crate::tensor::Tensor;
use crate::volumeio::{read_volume, write_mvol, CaseEntry, DatasetManifest, Dims, LabelMap, Split, Volume};

/// Directory (under the output root) that receives pseudo-label maps.
pub const PSEUDO_DIR: &str = "pseudo";

/// Window origins along one axis: multiples of `stride` while the window
/// fits, then one window aligned to the end. A single origin 0 when the
/// axis is not longer than the patch.
pub fn window_starts(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    if len <= patch {
        return vec![0];
    }
    let stride = stride.max(1);
    let mut out: Vec<usize> = (0..).map(|i| i * stride).take_while(|&s| s + patch < len).collect();
    out.push(len - patch);
    out
}

fn pad_to(image: &Tensor<f32>, dims: Dims) -> Result<Tensor<f32>> {
    let s = image.shape();
    let (c, src) = (s[0], [s[1], s[2], s[3]]);
    if src == dims {
        return Ok(image.clone());
    }
    let mut data = vec![0.0f32; c * dims.iter().product::<usize>()];
    for ch in 0..c {
        for z in 0..src[0] {
            for y in 0..src[1] {
                let from = ((ch * src[0] + z) * src[1] + y) * src[2];
                let to = ((ch * dims[0] + z) * dims[1] + y) * dims[2];
                data[to..to + src[2]].copy_from_slice(&image.data()[from..from + src[2]]);
            }
        }
    }
    Ok(Tensor::new(&[c, dims[0], dims[1], dims[2]], data)?)
}

fn window(image: &Tensor<f32>, origin: Dims, size: Dims) -> Result<Tensor<f32>> {
    let s = image.shape();
    let c = s[0];
    let mut data = Vec::with_capacity(c * size.iter().product::<usize>());
    for ch in 0..c {
        for z in 0..size[0] {
            for y in 0..size[1] {
                let from = ((ch * s[1] + origin[0] + z) * s[2] + origin[1] + y) * s[3] + origin[2];
                data.extend_from_slice(&image.data()[from..from + size[2]]);
            }
        }
    }
    Ok(Tensor::new(&[c, size[0], size[1], size[2]], data)?)
}

/// Tiles `image: [C, D, H, W]` with windows of `patch` at stride
/// `floor(patch · (1 − overlap))`, calls `predict` on each window and
/// averages overlapping outputs uniformly. Axes shorter than the patch are
/// zero-padded for prediction and cropped afterwards. Windows run in
/// parallel; their outputs are summed in a fixed order.
pub fn sliding_window<F>(image: &Tensor<f32>, patch: Dims, overlap: f64, predict: F) -> Result<Tensor<f32>>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    let s = image.shape();
    if s.len() != 4 {
        return Err(TrainError::Config(format!("sliding window input {s:?} is not [C, D, H, W]")));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(TrainError::Config(format!("overlap {overlap} must be in [0, 1)")));
    }
    let dims = [s[1], s[2], s[3]];
    let padded = [0, 1, 2].map(|a| dims[a].max(patch[a]));
    let image = pad_to(image, padded)?;
    let starts: Vec<Vec<usize>> = (0..3)
        .map(|a| {
            let stride = (patch[a] as f64 * (1.0 - overlap)).floor() as usize;
            window_starts(padded[a], patch[a], stride)
        })
        .collect();
    let mut origins = Vec::new();
    for &z in &starts[0] {
        for &y in &starts[1] {
            for &x in &starts[2] {
                origins.push([z, y, x]);
            }
        }
    }
    let outputs: Vec<Tensor<f32>> = origins
        .par_iter()
        .map(|&o| predict(&window(&image, o, patch)?))
        .collect::<Result<_>>()?;

    let channels = outputs[0].shape()[0];
    let n: usize = padded.iter().product();
    let mut sum = vec![0.0f64; channels * n];
    let mut count = vec![0u32; n];
    for (o, out) in origins.iter().zip(&outputs) {
        if out.shape() != [channels, patch[0], patch[1], patch[2]] {
            return Err(TrainError::Config(format!(
                "window prediction has shape {:?}, expected [{channels}, {patch:?}]",
                out.shape()
            )));
        }
        for z in 0..patch[0] {
            for y in 0..patch[1] {
                let row = ((o[0] + z) * padded[1] + o[1] + y) * padded[2] + o[2];
                for c in 0..channels {
                    let src = &out.data()[((c * patch[0] + z) * patch[1] + y) * patch[2]..][..patch[2]];
                    for (acc, &v) in sum[c * n + row..][..patch[2]].iter_mut().zip(src) {
                        *acc += v as f64;
                    }
                }
                for k in &mut count[row..row + patch[2]] {
                    *k += 1;
                }
            }
        }
    }
    let mut data = Vec::with_capacity(channels * dims.iter().product::<usize>());
    for c in 0..channels {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                let row = (z * padded[1] + y) * padded[2];
                for x in 0..dims[2] {
                    data.push((sum[c * n + row + x] / count[row + x] as f64) as f32);
                }
            }
        }
    }
    Ok(Tensor::new(&[channels, dims[0], dims[1], dims[2]], data)?)
}

/// Averaged sigmoid probabilities `[J + 1, D, H, W]` of `model` over a
/// preprocessed single-channel volume.
pub fn sliding_window_infer(model: &SwinUnetr<f32>, v: &Volume, patch: Dims, overlap: f64) -> Result<Tensor<f32>> {
    let d = v.dims;
    let image = Tensor::new(&[1, d[0], d[1], d[2]], v.voxels.clone())?;
    sliding_window(&image, patch, overlap, |t| Ok(model.predict(t)?))
}

/// Label map of a raw image on its own grid: preprocess as in training,
/// sliding-window probabilities, argmax, optional confidence threshold,
/// map back to the original grid and optionally keep the largest
/// component per class. Every class is marked available.
pub fn infer_case(model: &SwinUnetr<f32>, image: &Volume, cfg: &InferConfig) -> Result<LabelMap> {
    cfg.validate(model.config())?;
    let prep = prepare_case(image, None, cfg.target_spacing)?;
    let probs = sliding_window_infer(model, &prep.image, cfg.patch_size, cfg.overlap)?;
    let mut labels = predict_labels(&probs, prep.image.spacing)?;
    if let Some(threshold) = cfg.min_confidence {
        let n = labels.labels.len();
        for (i, l) in labels.labels.iter_mut().enumerate() {
            if (probs.data()[*l as usize * n + i] as f64) < threshold {
                *l = 0;
            }
        }
    }
    let back = resample_labels_onto(&labels, prep.crop.dims(), image.spacing);
    let full = embed_labels(&back, &prep.crop, image.dims)?;
    Ok(if cfg.postprocess {
        keep_largest_per_label(&full, cfg.connectivity, cfg.min_component_size)
    } else {
        full
    })
}

/// Path of `p` (relative to `from`) expressed relative to `to` when possible.
fn rebase(from: &DatasetManifest, p: &Path, to: &Path) -> Result<PathBuf> {
    let abs = std::path::absolute(from.resolve(p)).map_err(super::io_err(p))?;
    let base = std::path::absolute(to).map_err(super::io_err(to))?;
    Ok(pathdiff::diff_paths(&abs, &base).unwrap_or(abs))
}

/// Predicts every unlabeled case, post-processes it with the largest
/// component per class and writes it under `out/pseudo/`. Returns (and
/// saves as `out/manifest.json`) the source manifest re-rooted at `out`
/// plus one `pseudo` entry per unlabeled case, reusing its image.
pub fn generate_pseudo_labels(
    model: &SwinUnetr<f32>,
    manifest: &DatasetManifest,
    out: &Path,
    cfg: &InferConfig,
) -> Result<DatasetManifest> {
    let mut result = DatasetManifest::new(out);
    for c in &manifest.cases {
        result.cases.push(CaseEntry {
            id: c.id.clone(),
            image: rebase(manifest, &c.image, out)?,
            label: c.label.as_ref().map(|l| rebase(manifest, l, out)).transpose()?,
            split: c.split,
        });
    }
    let unlabeled: Vec<&CaseEntry> = manifest.split(Split::Unlabeled).collect();
    if unlabeled.is_empty() {
        log::warn!("no unlabeled cases; the manifest is unchanged");
    }
    let cfg = InferConfig {
        postprocess: true,
        ..cfg.clone()
    };
    for c in unlabeled {
        let image = read_volume(&manifest.resolve(&c.image))?;
        let labels = infer_case(model, &image, &cfg)?;
        let rel = PathBuf::from(PSEUDO_DIR).join(format!("{}.mvol", c.id));
        write_mvol(&labels.into(), &out.join(&rel))?;
        result.cases.push(CaseEntry {
            id: format!("{}_pseudo", c.id),
            image: rebase(manifest, &c.image, out)?,
            label: Some(rel),
            split: Split::Pseudo,
        });
    }
    result.save(&out.join(MANIFEST_FILE))?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: &[usize]) -> Tensor<f32> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|i| (i % 97) as f32 / 97.0).collect()).unwrap()
    }

    #[test]
    fn window_starts_cover_the_axis() {
        assert_eq!(window_starts(20, 32, 16), vec![0]);
        assert_eq!(window_starts(32, 32, 16), vec![0]);
        assert_eq!(window_starts(64, 32, 16), vec![0, 16, 32]);
        assert_eq!(window_starts(70, 32, 16), vec![0, 16, 32, 38]);
        assert_eq!(window_starts(40, 32, 0), (0..=8).collect::<Vec<_>>());
    }

    #[test]
    fn single_window_equals_direct_prediction() {
        let x = ramp(&[1, 8, 8, 8]);
        let f = |t: &Tensor<f32>| Ok(Tensor::new(t.shape(), t.data().iter().map(|v| v * v + 0.1).collect())?);
        let out = sliding_window(&x, [8, 8, 8], 0.5, f).unwrap();
        assert_eq!(out, f(&x).unwrap());
    }

    #[test]
    fn constant_model_gives_constant_output() {
        let x = ramp(&[1, 13, 20, 9]);
        let out = sliding_window(&x, [8, 8, 8], 0.25, |t| {
            let s = t.shape();
            Ok(Tensor::new(&[2, s[1], s[2], s[3]], vec![0.7; 2 * s[1] * s[2] * s[3]])?)
        })
        .unwrap();
        assert_eq!(out.shape(), &[2, 13, 20, 9]);
        assert!(out.data().iter().all(|&v| v == 0.7));
    }

    #[test]
    fn overlap_averages_two_windows() {
        // Two windows along W: origins 0 and 4; the first predicts 0.2 and
        // the second 0.4, identified by the input value at their origin.
        let mut x = Tensor::new(&[1, 4, 4, 12], vec![0.0; 192]).unwrap();
        for z in 0..4 {
            for y in 0..4 {
                x.data_mut()[(z * 4 + y) * 12 + 4] = 1.0;
            }
        }
        let out = sliding_window(&x, [4, 4, 8], 0.5, |t| {
            let p = if t.data()[0] == 1.0 { 0.4 } else { 0.2 };
            Ok(Tensor::new(t.shape(), vec![p; t.numel()])?)
        })
        .unwrap();
        for x in 0..12 {
            let want = match x {
                0..=3 => 0.2,
                4..=7 => 0.3,
                _ => 0.4,
            };
            assert!((out.data()[x] - want).abs() < 1e-7, "x={x}: {}", out.data()[x]);
        }
    }

    #[test]
    fn output_is_bounded_by_window_outputs() {
        let x = ramp(&[1, 11, 7, 18]);
        let out = sliding_window(&x, [4, 4, 8], 0.6, |t| {
            let m = t.data().iter().sum::<f32>() / t.numel() as f32;
            Ok(Tensor::new(t.shape(), t.data().iter().map(|v| v * 0.5 + m).collect())?)
        })
        .unwrap();
        // Every window output lies in [0, 1.5).
        assert!(out.data().iter().all(|&v| (0.0..1.5).contains(&v)));
        let lo = x.data().iter().zip(out.data()).all(|(a, b)| *b >= a * 0.5 - 1e-6);
        assert!(lo);
    }
}
