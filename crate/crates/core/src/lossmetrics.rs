//! Soft Dice loss with class-availability masking, and DSC / NSD metrics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Graph, Real, Tensor, TensorError, Var};
use crate::volumeio::{linear_index, ClassSet, Dims, LabelMap, Spacing};

/// Smoothing term of the Dice denominator.
pub const DICE_EPS: f64 = 1e-6;
/// Probabilities may leave `[0, 1]` by at most this much.
pub const PROB_TOLERANCE: f64 = 1e-6;
pub const DEFAULT_TAU_MM: f64 = 1.0;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("probability {value} outside [0, 1]")]
    Domain { value: f64 },
    #[error("no class is available for the loss")]
    NoClasses,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("spacing mismatch: {0:?} vs {1:?}")]
    Spacing(Spacing, Spacing),
    #[error("tolerance must be positive, got {0}")]
    Tau(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

/// One-hot ground truth `[J + 1, D, H, W]` and the channels that enter the loss.
#[derive(Clone, Debug, PartialEq)]
pub struct OneHotTarget<T: Real> {
    pub onehot: Tensor<T>,
    pub channels: Vec<usize>,
}

impl<T: Real> OneHotTarget<T> {
    /// Uses the map's available foreground classes, plus channel 0 when
    /// `include_background` is set.
    pub fn from_labels(labels: &LabelMap, include_background: bool) -> Result<Self> {
        let j1 = labels.classes as usize + 1;
        let n = labels.labels.len();
        let mut data = vec![T::zero(); j1 * n];
        for (i, &l) in labels.labels.iter().enumerate() {
            data[l as usize * n + i] = T::one();
        }
        let d = labels.dims;
        let onehot = Tensor::new(&[j1, d[0], d[1], d[2]], data)?;
        let mut channels: Vec<usize> = include_background.then_some(0).into_iter().collect();
        channels.extend(labels.available.iter().map(usize::from));
        Ok(Self { onehot, channels })
    }

    pub fn with_channels(onehot: Tensor<T>, available: &ClassSet, include_background: bool) -> Self {
        let mut channels: Vec<usize> = include_background.then_some(0).into_iter().collect();
        channels.extend(available.iter().map(usize::from));
        Self { onehot, channels }
    }
}

/// `1 − (2/J′)·Σ_j ΣG·Y / (ΣG² + ΣY² + ε)` over the target's channels.
pub fn soft_dice_loss<T: Real>(g: &mut Graph<T>, probs: Var, target: &OneHotTarget<T>) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape != target.onehot.shape() {
        return Err(MetricError::Shape(format!(
            "probabilities {shape:?} vs target {:?}",
            target.onehot.shape()
        )));
    }
    if target.channels.is_empty() {
        return Err(MetricError::NoClasses);
    }
    if let Some(&c) = target.channels.iter().find(|&&c| c >= shape[0]) {
        return Err(MetricError::Shape(format!("channel {c} of {} channels", shape[0])));
    }
    if let Some(&v) = g.value(probs).data().iter().find(|&&v| {
        let v = v.as_f64();
        !(-PROB_TOLERANCE..=1.0 + PROB_TOLERANCE).contains(&v)
    }) {
        return Err(MetricError::Domain { value: v.as_f64() });
    }
    let k = target.channels.len();
    let n: usize = shape[1..].iter().product();
    let gt_rows: Vec<T> = target
        .channels
        .iter()
        .flat_map(|&c| target.onehot.data()[c * n..(c + 1) * n].iter().copied())
        .collect();
    let gt_sq: Vec<T> = gt_rows
        .chunks(n)
        .map(|row| row.iter().map(|&x| x * x).sum::<T>() + T::from_f64_lossy(DICE_EPS))
        .collect();

    let y = g.index_select(probs, 0, &target.channels)?;
    let y = g.reshape(y, &[k, n])?;
    let gt = g.constant(Tensor::new(&[k, n], gt_rows)?);
    let inter = g.mul(y, gt)?;
    let inter = g.sum_axis(inter, 1, false)?;
    let y2 = g.mul(y, y)?;
    let y2 = g.sum_axis(y2, 1, false)?;
    let g2 = g.constant(Tensor::new(&[k], gt_sq)?);
    let den = g.add(y2, g2)?;
    let ratio = g.div(inter, den)?;
    let total = g.sum(ratio)?;
    let scaled = g.scale(total, -2.0 / k as f64)?;
    Ok(g.add_scalar(scaled, 1.0)?)
}

fn check_pair(a: &LabelMap, b: &LabelMap) -> Result<()> {
    if a.dims != b.dims {
        return Err(MetricError::Shape(format!("dims {:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

/// `2|P∩R| / (|P|+|R|)`; 1 when both are empty.
pub fn dsc(pred: &LabelMap, reference: &LabelMap, class: u8) -> Result<f64> {
    check_pair(pred, reference)?;
    Ok(dsc_masks(&pred.mask(class), &reference.mask(class)))
}

pub fn dsc_masks(p: &[bool], r: &[bool]) -> f64 {
    let (mut both, mut np, mut nr) = (0usize, 0usize, 0usize);
    for (&a, &b) in p.iter().zip(r) {
        np += usize::from(a);
        nr += usize::from(b);
        both += usize::from(a && b);
    }
    if np + nr == 0 {
        1.0
    } else {
        2.0 * both as f64 / (np + nr) as f64
    }
}

/// Mask voxels with a face neighbour outside the mask or on the volume border.
pub fn extract_surface(mask: &[bool], dims: Dims) -> Vec<usize> {
    let mut out = Vec::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = linear_index(dims, z, y, x);
                if !mask[i] {
                    continue;
                }
                let border = z == 0 || y == 0 || x == 0 || z + 1 == dims[0] || y + 1 == dims[1] || x + 1 == dims[2];
                if border
                    || !mask[i - dims[1] * dims[2]]
                    || !mask[i + dims[1] * dims[2]]
                    || !mask[i - dims[2]]
                    || !mask[i + dims[2]]
                    || !mask[i - 1]
                    || !mask[i + 1]
                {
                    out.push(i);
                }
            }
        }
    }
    out
}

fn coords(i: usize, dims: Dims) -> [usize; 3] {
    [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]]
}

/// Count of `from` voxels having a `to` voxel within `tau` mm, scanning only
/// the box of grid offsets that can reach that distance.
fn within_tolerance(from: &[usize], to_grid: &[bool], dims: Dims, spacing: Spacing, tau: f64) -> usize {
    let reach = [0, 1, 2].map(|a| (tau / spacing[a]).ceil() as i64);
    from.iter()
        .filter(|&&i| {
            let c = coords(i, dims);
            let lo = [0, 1, 2].map(|a| (c[a] as i64 - reach[a]).max(0) as usize);
            let hi = [0, 1, 2].map(|a| (c[a] as i64 + reach[a]).min(dims[a] as i64 - 1) as usize);
            for z in lo[0]..=hi[0] {
                let dz = (z as f64 - c[0] as f64) * spacing[0];
                for y in lo[1]..=hi[1] {
                    let dy = (y as f64 - c[1] as f64) * spacing[1];
                    for x in lo[2]..=hi[2] {
                        let dx = (x as f64 - c[2] as f64) * spacing[2];
                        if to_grid[linear_index(dims, z, y, x)] && (dz * dz + dy * dy + dx * dx).sqrt() <= tau {
                            return true;
                        }
                    }
                }
            }
            false
        })
        .count()
}

/// Normalized surface Dice at tolerance `tau_mm` between two masks.
pub fn nsd_masks(p: &[bool], r: &[bool], dims: Dims, spacing: Spacing, tau_mm: f64) -> Result<f64> {
    if !(tau_mm > 0.0 && tau_mm.is_finite()) {
        return Err(MetricError::Tau(tau_mm));
    }
    let (sp, sr) = (extract_surface(p, dims), extract_surface(r, dims));
    match (sp.is_empty(), sr.is_empty()) {
        (true, true) => return Ok(1.0),
        (true, false) | (false, true) => return Ok(0.0),
        _ => {}
    }
    let grid = |s: &[usize]| {
        let mut g = vec![false; p.len()];
        for &i in s {
            g[i] = true;
        }
        g
    };
    let (gp, gr) = (grid(&sp), grid(&sr));
    let hits = within_tolerance(&sp, &gr, dims, spacing, tau_mm) + within_tolerance(&sr, &gp, dims, spacing, tau_mm);
    Ok(hits as f64 / (sp.len() + sr.len()) as f64)
}

pub fn nsd(pred: &LabelMap, reference: &LabelMap, class: u8, tau_mm: f64) -> Result<f64> {
    check_pair(pred, reference)?;
    if pred.spacing != reference.spacing {
        return Err(MetricError::Spacing(pred.spacing, reference.spacing));
    }
    nsd_masks(&pred.mask(class), &reference.mask(class), pred.dims, pred.spacing, tau_mm)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class: u8,
    pub dsc: f64,
    pub nsd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub case: Option<String>,
    pub per_class: Vec<ClassScore>,
    pub mean_dsc: f64,
    pub mean_nsd: f64,
    pub tau_mm: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl SegReport {
    /// Scores every foreground class available in `reference`. Means are NaN
    /// (serialized as null) when no class is evaluated.
    pub fn evaluate(pred: &LabelMap, reference: &LabelMap, tau_mm: f64) -> Result<Self> {
        let mut per_class = Vec::new();
        for class in reference.available.iter() {
            per_class.push(ClassScore {
                class,
                dsc: dsc(pred, reference, class)?,
                nsd: nsd(pred, reference, class, tau_mm)?,
            });
        }
        Ok(Self::from_scores(None, per_class, tau_mm))
    }

    pub fn from_scores(case: Option<String>, per_class: Vec<ClassScore>, tau_mm: f64) -> Self {
        Self {
            case,
            mean_dsc: mean(per_class.iter().map(|c| c.dsc)),
            mean_nsd: mean(per_class.iter().map(|c| c.nsd)),
            per_class,
            tau_mm,
        }
    }
}

/// Aggregate over several cases; means are taken over case means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetReport {
    pub cases: Vec<SegReport>,
    pub mean_dsc: f64,
    pub mean_nsd: f64,
    pub tau_mm: f64,
}

impl DatasetReport {
    pub fn new(cases: Vec<SegReport>, tau_mm: f64) -> Self {
        Self {
            mean_dsc: mean(cases.iter().map(|c| c.mean_dsc).filter(|v| !v.is_nan())),
            mean_nsd: mean(cases.iter().map(|c| c.mean_nsd).filter(|v| !v.is_nan())),
            cases,
            tau_mm,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(dims: Dims, lo: [usize; 3], side: usize) -> Vec<bool> {
        let mut m = vec![false; dims.iter().product()];
        for z in lo[0]..lo[0] + side {
            for y in lo[1]..lo[1] + side {
                for x in lo[2]..lo[2] + side {
                    m[linear_index(dims, z, y, x)] = true;
                }
            }
        }
        m
    }

    fn loss_value(probs: &[f64], gt: &[f64], shape: &[usize], channels: Vec<usize>) -> f64 {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::new(shape, probs.to_vec()).unwrap());
        let target = OneHotTarget {
            onehot: Tensor::new(shape, gt.to_vec()).unwrap(),
            channels,
        };
        let l = soft_dice_loss(&mut g, p, &target).unwrap();
        g.value(l).item()
    }

    #[test]
    fn dice_loss_examples() {
        let shape = [2, 1, 1, 4];
        let gt = [0., 1., 1., 0., 1., 0., 0., 1.];
        assert!(loss_value(&gt, &gt, &shape, vec![1]) <= 1e-4);
        let disjoint = [1., 0., 0., 1., 0., 1., 1., 0.];
        assert!(loss_value(&disjoint, &gt, &shape, vec![1]) >= 1.0 - 1e-4);

        let shape = [2, 1, 1, 2];
        let l = loss_value(&[0.5, 0.5, 0.5, 0.5], &[0., 1., 1., 0.], &shape, vec![1]);
        let want = 1.0 - 2.0 * 0.5 / (1.0 + 0.5 + DICE_EPS);
        assert!((l - want).abs() < 1e-12);
        assert!((l - 1.0 / 3.0).abs() <= 1e-6);
    }

    #[test]
    fn dice_loss_rejects_bad_input() {
        let mut g = Graph::<f64>::new();
        let p = g.constant(Tensor::from_f64(&[2, 1, 1, 1], &[0.5, 1.5]).unwrap());
        let target = OneHotTarget {
            onehot: Tensor::from_f64(&[2, 1, 1, 1], &[1.0, 0.0]).unwrap(),
            channels: vec![1],
        };
        assert_eq!(soft_dice_loss(&mut g, p, &target).unwrap_err(), MetricError::Domain { value: 1.5 });
        let empty = OneHotTarget {
            channels: vec![],
            ..target
        };
        let p = g.constant(Tensor::from_f64(&[2, 1, 1, 1], &[0.5, 0.5]).unwrap());
        assert_eq!(soft_dice_loss(&mut g, p, &empty).unwrap_err(), MetricError::NoClasses);
    }

    #[test]
    fn dsc_examples() {
        let dims = [4, 4, 4];
        let r = cube(dims, [0, 0, 0], 2);
        assert_eq!(dsc_masks(&r, &r), 1.0);
        assert_eq!(dsc_masks(&r, &cube(dims, [2, 2, 2], 2)), 0.0);
        let mut p = vec![false; 64];
        for (i, _) in r.iter().enumerate().filter(|(_, &v)| v).take(4) {
            p[i] = true;
        }
        assert!((dsc_masks(&p, &r) - 2.0 * 4.0 / 12.0).abs() < 1e-15);
        assert_eq!(dsc_masks(&[false; 8], &[false; 8]), 1.0);
        assert_eq!(dsc_masks(&r, &[false; 64]), 0.0);
    }

    #[test]
    fn surface_examples() {
        let dims = [5, 5, 5];
        let solid = cube(dims, [1, 1, 1], 3);
        let s = extract_surface(&solid, dims);
        assert_eq!(s.len(), 26);
        assert!(!s.contains(&linear_index(dims, 2, 2, 2)));
        let single = cube(dims, [2, 2, 2], 1);
        assert_eq!(extract_surface(&single, dims), vec![linear_index(dims, 2, 2, 2)]);
        assert!(extract_surface(&[false; 125], dims).is_empty());
    }

    #[test]
    fn nsd_examples() {
        let dims = [8, 8, 8];
        let a = cube(dims, [2, 2, 2], 3);
        assert_eq!(nsd_masks(&a, &a, dims, [1.0; 3], 1.0).unwrap(), 1.0);
        let far = cube(dims, [0, 0, 0], 1);
        let b = cube(dims, [6, 6, 6], 2);
        assert_eq!(nsd_masks(&far, &b, dims, [1.0; 3], 1.0).unwrap(), 0.0);
        let u = cube(dims, [3, 3, 3], 1);
        let shifted = cube(dims, [3, 3, 4], 1);
        assert_eq!(nsd_masks(&u, &shifted, dims, [1.0; 3], 1.0).unwrap(), 1.0);
        assert_eq!(nsd_masks(&u, &shifted, dims, [1.0; 3], 0.5).unwrap(), 0.0);
        assert_eq!(nsd_masks(&u, &[false; 512], dims, [1.0; 3], 1.0).unwrap(), 0.0);
        assert!(matches!(nsd_masks(&u, &u, dims, [1.0; 3], 0.0), Err(MetricError::Tau(_))));
    }

    #[test]
    fn report_skips_unavailable_classes() {
        let dims = [4, 4, 4];
        let mut labels = vec![0u8; 64];
        labels[0] = 1;
        labels[63] = 2;
        let reference = LabelMap::new(dims, [1.0; 3], 2, ClassSet::from_classes([1]), {
            let mut l = labels.clone();
            l[63] = 0;
            l
        })
        .unwrap();
        let pred = LabelMap::new(dims, [1.0; 3], 2, ClassSet::full(2), labels).unwrap();
        let r = SegReport::evaluate(&pred, &reference, 1.0).unwrap();
        assert_eq!(r.per_class.len(), 1);
        assert_eq!((r.mean_dsc, r.mean_nsd), (1.0, 1.0));
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["per_class"][0]["class"], 1);
        assert_eq!(json["tau_mm"], 1.0);
    }
}
