//! Synthetic CT-like phantoms: random ellipsoid "organs" with class-specific
//! intensities, a small "tumor" sphere inside organ 1, partial-label
//! simulation and labeled/unlabeled/val dataset generation.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::volumeio::{
    linear_index, voxel_count, write_mvol, CaseEntry, ClassSet, DatasetManifest, Dims, LabelMap, Spacing, Split,
    Volume, VolumeError, MAX_CLASS,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGE_DIR: &str = "images";
pub const LABEL_DIR: &str = "labels";
/// Full ground truth of every case, including unlabeled and partial ones.
/// Never referenced by the manifest.
pub const TRUTH_DIR: &str = "truth";

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid phantom config: {0}")]
    Config(String),
    #[error("could not place class {class} after {attempts} attempts; use smaller organs or fewer classes")]
    Placement { class: u8, attempts: usize },
    #[error("class {class} mean intensity {mean:.2} is within {margin} of the background mean {background:.2}")]
    Contrast {
        class: u8,
        mean: f64,
        background: f64,
        margin: f64,
    },
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

pub type Result<T, E = PhantomError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: Dims,
    pub spacing: Spacing,
    /// J; classes `1..J` are organs and class J is the tumor (J ≥ 2).
    pub num_classes: u8,
    /// Mean intensity per class `1..=J`.
    pub class_means: Vec<f64>,
    /// Texture of each class: per-voxel spread added on top of `noise_std`.
    pub class_stds: Vec<f64>,
    pub background_mean: f64,
    pub background_std: f64,
    /// Per-voxel noise inside classes.
    pub noise_std: f64,
    /// Range of organ semi-axes in voxels.
    pub organ_radius: [f64; 2],
    /// Per-organ multiplier on `organ_radius`, one entry per organ class.
    pub organ_scales: Vec<f64>,
    /// Range of the tumor radius in voxels.
    pub tumor_radius: [f64; 2],
    /// Minimum gap between organs in voxels (Chebyshev distance).
    pub min_separation: usize,
    /// Organ centres fall in the central box spanning this fraction of each
    /// axis, so organs cluster like an abdomen (1: anywhere).
    pub organ_region: f64,
    pub max_attempts: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self::with_classes(5)
    }
}

impl PhantomConfig {
    /// Desk defaults for `j` classes: 64³ at 1 mm. Organ 1 is bright, organ 2
    /// dark and organ 3 strongly textured around a slightly bright mean;
    /// further organs alternate bright and dark at growing contrast. The
    /// tumor is darker than background inside the bright organ 1. Each of the
    /// first three organs is thus the extreme class along one simple feature
    /// (intensity up, intensity down, local variance), and the tumor is set
    /// apart by its surroundings.
    pub fn with_classes(j: u8) -> Self {
        let organs = if j >= 2 { j as usize - 1 } else { j as usize };
        let organ = |k: usize| match k {
            0 => (60.0, 0.0),
            1 => (-60.0, 0.0),
            2 => (30.0, 150.0),
            _ => {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                (sign * (120.0 + 60.0 * ((k - 3) / 2) as f64), 0.0)
            }
        };
        let mut class_means: Vec<f64> = (0..organs).map(|k| organ(k).0).collect();
        let mut class_stds: Vec<f64> = (0..organs).map(|k| organ(k).1).collect();
        if j >= 2 {
            class_means.push(-35.0);
            class_stds.push(0.0);
        }
        Self {
            dims: [64; 3],
            spacing: [1.0; 3],
            num_classes: j,
            class_means,
            class_stds,
            background_mean: 0.0,
            background_std: 15.0,
            noise_std: 10.0,
            organ_radius: [5.0, 9.0],
            organ_scales: vec![1.0; organs],
            tumor_radius: [2.5, 4.0],
            min_separation: 2,
            organ_region: 0.4,
            max_attempts: 500,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(PhantomError::Config(m));
        let j = self.num_classes;
        if j == 0 || j > MAX_CLASS {
            return err(format!("num_classes {j} must be in 1..={MAX_CLASS}"));
        }
        if self.class_means.len() != j as usize || self.class_stds.len() != j as usize {
            return err(format!(
                "class_means and class_stds need {j} entries, got {} and {}",
                self.class_means.len(),
                self.class_stds.len()
            ));
        }
        if self.dims.iter().any(|&d| d == 0) || self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return err(format!("dims {:?} and spacing {:?} must be positive", self.dims, self.spacing));
        }
        let stds = [self.background_std, self.noise_std].into_iter().chain(self.class_stds.iter().copied());
        if stds.into_iter().any(|s| !(s >= 0.0 && s.is_finite())) {
            return err("standard deviations must be finite and non-negative".into());
        }
        let means: Vec<f64> = std::iter::once(self.background_mean).chain(self.class_means.iter().copied()).collect();
        let margin = 2.0 * self.noise_std;
        for a in 0..means.len() {
            for b in a + 1..means.len() {
                if (means[a] - means[b]).abs() < margin || !means[a].is_finite() {
                    return err(format!(
                        "intensity means {} and {} (classes {a} and {b}) are closer than 2 x noise std = {margin}",
                        means[a], means[b]
                    ));
                }
            }
        }
        for (name, r) in [("organ_radius", self.organ_radius), ("tumor_radius", self.tumor_radius)] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return err(format!("{name} {r:?} must be a positive range"));
            }
        }
        if self.organ_scales.len() != self.num_organs() as usize {
            return err(format!(
                "organ_scales needs {} entries, got {}",
                self.num_organs(),
                self.organ_scales.len()
            ));
        }
        if self.organ_scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return err(format!("organ_scales {:?} must be positive", self.organ_scales));
        }
        let largest = self.organ_scales.iter().cloned().fold(0.0, f64::max) * self.organ_radius[0];
        let fits = self.dims.iter().all(|&d| d as f64 > 2.0 * largest + 2.0);
        if !fits {
            return err(format!("dims {:?} cannot hold an organ of radius {largest}", self.dims));
        }
        if !(self.organ_region > 0.0 && self.organ_region <= 1.0) {
            return err(format!("organ_region {} must be in (0, 1]", self.organ_region));
        }
        if self.max_attempts == 0 {
            return err("max_attempts must be positive".into());
        }
        Ok(())
    }

    fn num_organs(&self) -> u8 {
        if self.num_classes == 1 {
            1
        } else {
            self.num_classes - 1
        }
    }

    fn has_tumor(&self) -> bool {
        self.num_classes >= 2
    }
}

/// Uniform random rotation from a normalized Gaussian quaternion.
fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    let mut q = [0.0f64; 4];
    loop {
        for v in q.iter_mut() {
            *v = StandardNormal.sample(rng);
        }
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n > 1e-9 {
            q.iter_mut().for_each(|v| *v /= n);
            break;
        }
    }
    let [w, x, y, z] = q;
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Voxels of a rotated ellipsoid, clipped to the grid.
fn ellipsoid_voxels(dims: Dims, center: [f64; 3], axes: [f64; 3], rot: [[f64; 3]; 3]) -> Vec<usize> {
    let reach = axes.iter().cloned().fold(0.0, f64::max);
    let range = |a: usize| {
        let lo = (center[a] - reach).floor().max(0.0) as usize;
        let hi = ((center[a] + reach).ceil() as usize + 1).min(dims[a]);
        lo..hi
    };
    let mut out = Vec::new();
    for z in range(0) {
        for y in range(1) {
            for x in range(2) {
                let d = [z as f64 - center[0], y as f64 - center[1], x as f64 - center[2]];
                // Coordinates in the ellipsoid frame: rotᵀ · d.
                let mut r = 0.0;
                for (i, ax) in axes.iter().enumerate() {
                    let u = rot[0][i] * d[0] + rot[1][i] * d[1] + rot[2][i] * d[2];
                    r += (u / ax) * (u / ax);
                }
                if r <= 1.0 {
                    out.push(linear_index(dims, z, y, x));
                }
            }
        }
    }
    out
}

fn coords(dims: Dims, i: usize) -> [usize; 3] {
    [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]
}

/// Marks every voxel within Chebyshev distance `r` of `voxels`.
fn block_around(blocked: &mut [bool], dims: Dims, voxels: &[usize], r: usize) {
    for &i in voxels {
        let c = coords(dims, i);
        let lo = c.map(|v| v.saturating_sub(r));
        let hi = [0, 1, 2].map(|a| (c[a] + r + 1).min(dims[a]));
        for z in lo[0]..hi[0] {
            for y in lo[1]..hi[1] {
                for x in lo[2]..hi[2] {
                    blocked[linear_index(dims, z, y, x)] = true;
                }
            }
        }
    }
}

fn place_organ(
    cfg: &PhantomConfig,
    rng: &mut ChaCha8Rng,
    class: u8,
    blocked: &[bool],
) -> Result<Vec<usize>> {
    let scale = cfg.organ_scales[class as usize - 1];
    let [r0, r1] = cfg.organ_radius.map(|r| r * scale);
    // Organ 1 must be able to host the tumor with a margin.
    let r0 = if class == 1 && cfg.has_tumor() { r0.max(cfg.tumor_radius[1] + 2.0).min(r1) } else { r0 };
    for _ in 0..cfg.max_attempts {
        let axes = [0; 3].map(|_| rng.gen_range(r0..=r1));
        let reach = axes.iter().cloned().fold(0.0, f64::max);
        let mut center = [0.0; 3];
        for a in 0..3 {
            let n = cfg.dims[a] as f64;
            let lo = (reach + 1.0).max(n * (1.0 - cfg.organ_region) / 2.0).min(n / 2.0);
            let hi = (n - 2.0 - reach).min(n * (1.0 + cfg.organ_region) / 2.0).max(lo);
            center[a] = rng.gen_range(lo..=hi);
        }
        let rot = random_rotation(rng);
        let voxels = ellipsoid_voxels(cfg.dims, center, axes, rot);
        if !voxels.is_empty() && voxels.iter().all(|&i| !blocked[i]) {
            return Ok(voxels);
        }
    }
    Err(PhantomError::Placement {
        class,
        attempts: cfg.max_attempts,
    })
}

fn place_tumor(cfg: &PhantomConfig, rng: &mut ChaCha8Rng, labels: &[u8], organ: &[usize]) -> Result<Vec<usize>> {
    let dims = cfg.dims;
    for _ in 0..cfg.max_attempts {
        let r = rng.gen_range(cfg.tumor_radius[0]..=cfg.tumor_radius[1]);
        let c = coords(dims, organ[rng.gen_range(0..organ.len())]).map(|v| v as f64);
        let eye = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        let voxels = ellipsoid_voxels(dims, c, [r; 3], eye);
        // The sphere grown by one voxel must sit inside organ 1 and the grid,
        // so the tumor is strictly interior.
        let inside_grid = (0..3).all(|a| c[a] - r - 1.0 >= 0.0 && c[a] + r + 1.0 <= (dims[a] - 1) as f64);
        if inside_grid && ellipsoid_voxels(dims, c, [r + 1.0; 3], eye).iter().all(|&i| labels[i] == 1) {
            return Ok(voxels);
        }
    }
    Err(PhantomError::Placement {
        class: cfg.num_classes,
        attempts: cfg.max_attempts,
    })
}

/// One phantom with full availability. Organs are placed by rejection so
/// that they keep `min_separation` voxels apart.
pub fn generate_phantom(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<(Volume, LabelMap)> {
    cfg.validate()?;
    let dims = cfg.dims;
    let n = voxel_count(dims);
    let mut labels = vec![0u8; n];
    let mut blocked = vec![false; n];
    let mut organ1 = Vec::new();
    for class in 1..=cfg.num_organs() {
        let voxels = place_organ(cfg, rng, class, &blocked)?;
        for &i in &voxels {
            debug_assert_eq!(labels[i], 0, "organs overlap");
            labels[i] = class;
        }
        block_around(&mut blocked, dims, &voxels, cfg.min_separation);
        if class == 1 {
            organ1 = voxels;
        }
    }
    if cfg.has_tumor() {
        for i in place_tumor(cfg, rng, &labels, &organ1)? {
            labels[i] = cfg.num_classes;
        }
    }

    let mut classes = Vec::with_capacity(cfg.num_classes as usize);
    for (&mean, &std) in cfg.class_means.iter().zip(&cfg.class_stds) {
        let spread = std.hypot(cfg.noise_std);
        classes.push(Normal::new(mean, spread).map_err(|e| PhantomError::Config(e.to_string()))?);
    }
    let bg = Normal::new(cfg.background_mean, cfg.background_std).map_err(|e| PhantomError::Config(e.to_string()))?;
    let voxels: Vec<f32> = labels
        .iter()
        .map(|&l| match l {
            0 => bg.sample(rng) as f32,
            c => classes[c as usize - 1].sample(rng) as f32,
        })
        .collect();

    check_contrast(cfg, &voxels, &labels)?;
    let image = Volume::new(dims, cfg.spacing, voxels)?;
    let labels = LabelMap::new(dims, cfg.spacing, cfg.num_classes, ClassSet::full(cfg.num_classes), labels)?;
    Ok((image, labels))
}

/// Every present class must differ from the background in mean intensity
/// by at least one noise standard deviation.
fn check_contrast(cfg: &PhantomConfig, voxels: &[f32], labels: &[u8]) -> Result<()> {
    let j = cfg.num_classes as usize;
    let mut sums = vec![0.0f64; j + 1];
    let mut counts = vec![0usize; j + 1];
    for (&v, &l) in voxels.iter().zip(labels) {
        sums[l as usize] += v as f64;
        counts[l as usize] += 1;
    }
    let mean = |c: usize| sums[c] / counts[c].max(1) as f64;
    let background = if counts[0] > 0 { mean(0) } else { cfg.background_mean };
    let margin = cfg.noise_std;
    for c in 1..=j {
        if counts[c] > 0 && (mean(c) - background).abs() < margin {
            return Err(PhantomError::Contrast {
                class: c as u8,
                mean: mean(c),
                background,
                margin,
            });
        }
    }
    Ok(())
}

/// Keeps the classes in `keep`; all other foreground becomes background and
/// availability is set to `keep`.
pub fn make_partial(labels: &LabelMap, keep: ClassSet) -> Result<LabelMap> {
    if keep.is_empty() {
        return Err(PhantomError::Config("partial label keep set is empty".into()));
    }
    if let Some(c) = keep.iter().find(|&c| c == 0 || c > labels.classes) {
        return Err(PhantomError::Config(format!(
            "class {c} is outside 1..={}",
            labels.classes
        )));
    }
    let kept = labels.labels.iter().map(|&l| if keep.contains(l) { l } else { 0 }).collect();
    Ok(LabelMap::new(labels.dims, labels.spacing, labels.classes, keep, kept)?)
}

/// Split sizes and partial-label probability of a generated dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub labeled: usize,
    pub unlabeled: usize,
    pub val: usize,
    /// Chance that a labeled case keeps only a random nonempty proper subset of classes.
    pub partial_prob: f64,
}

struct GeneratedCase {
    entry: CaseEntry,
    image: Volume,
    label: Option<LabelMap>,
    truth: LabelMap,
}

fn generate_case(cfg: &PhantomConfig, spec: &DatasetSpec, index: usize, split: Split, id: String) -> Result<GeneratedCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let (image, truth) = generate_phantom(cfg, &mut rng)?;
    let j = cfg.num_classes;
    let label = match split {
        Split::Unlabeled => None,
        Split::Labeled if j >= 2 && rng.gen_bool(spec.partial_prob) => {
            // Uniform over nonempty proper subsets, encoded as bitmasks 1..2^J-1.
            let bits: u64 = rng.gen_range(1..(1u64 << j) - 1);
            let keep = ClassSet::from_classes((1..=j).filter(|c| bits >> (c - 1) & 1 == 1));
            Some(make_partial(&truth, keep)?)
        }
        _ => Some(truth.clone()),
    };
    let entry = CaseEntry {
        image: PathBuf::from(IMAGE_DIR).join(format!("{id}.mvol")),
        label: label.as_ref().map(|_| PathBuf::from(LABEL_DIR).join(format!("{id}.mvol"))),
        id,
        split,
    };
    Ok(GeneratedCase {
        entry,
        image,
        label,
        truth,
    })
}

/// Writes images, labels, hidden truth and `manifest.json` under `out`.
/// Case `i` (labeled first, then unlabeled, then val) draws from stream `i`
/// of a generator seeded with `cfg.seed`, so the output does not depend on
/// the thread count.
pub fn build_dataset(cfg: &PhantomConfig, spec: &DatasetSpec, out: &Path) -> Result<DatasetManifest> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&spec.partial_prob) {
        return Err(PhantomError::Config(format!("partial_prob {} is not in [0, 1]", spec.partial_prob)));
    }
    if spec.labeled + spec.val == 0 {
        return Err(PhantomError::Config("at least one labeled or val case is required".into()));
    }
    let plan: Vec<(Split, String)> = [
        (Split::Labeled, "labeled", spec.labeled),
        (Split::Unlabeled, "unlabeled", spec.unlabeled),
        (Split::Val, "val", spec.val),
    ]
    .into_iter()
    .flat_map(|(split, name, n)| (0..n).map(move |i| (split, format!("{name}_{i:03}"))))
    .collect();
    let cases: Vec<GeneratedCase> = plan
        .into_par_iter()
        .enumerate()
        .map(|(i, (split, id))| generate_case(cfg, spec, i, split, id))
        .collect::<Result<_>>()?;

    let mut manifest = DatasetManifest::new(out);
    for c in cases {
        write_mvol(&c.image.into(), &out.join(&c.entry.image))?;
        if let (Some(l), Some(p)) = (c.label, &c.entry.label) {
            write_mvol(&l.into(), &out.join(p))?;
        }
        write_mvol(&c.truth.into(), &truth_path(out, &c.entry.id))?;
        manifest.cases.push(c.entry);
    }
    manifest.save(&out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Location of the hidden full label map of case `id` in a generated dataset.
pub fn truth_path(root: &Path, id: &str) -> PathBuf {
    root.join(TRUTH_DIR).join(format!("{id}.mvol"))
}
