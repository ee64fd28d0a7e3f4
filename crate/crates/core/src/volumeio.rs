//! Volume and label containers, the MVOL file format and dataset manifests.
//!
//! MVOL layout (all integers little-endian):
//!
//! ```text
//! 0   8 bytes  magic "MVOL0001"
//! 8   u32      header length N
//! 12  N bytes  UTF-8 JSON header {kind, dims, spacing, classes, available}
//! 12+N         payload: D·H·W f32 (images) or u8 (labels), W fastest
//! ```

use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MVOL_MAGIC: &[u8; 8] = b"MVOL0001";

/// Largest class id representable in a [`ClassSet`].
pub const MAX_CLASS: u8 = 63;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("malformed MVOL data at byte {offset}: {detail}")]
    Format { offset: usize, detail: String },
    #[error("invalid volume: {0}")]
    Invalid(String),
    #[error("invalid manifest: {0}")]
    Manifest(String),
}

pub type Result<T, E = VolumeError> = std::result::Result<T, E>;

pub(crate) fn io_err(path: &Path) -> impl FnOnce(io::Error) -> VolumeError + '_ {
    move |source| VolumeError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Voxel grid extents in (D, H, W) = (slices, rows, columns) order.
pub type Dims = [usize; 3];
/// Voxel spacing in millimetres, (sz, sy, sx).
pub type Spacing = [f64; 3];

pub fn voxel_count(dims: Dims) -> usize {
    dims[0] * dims[1] * dims[2]
}

#[inline]
pub fn linear_index(dims: Dims, z: usize, y: usize, x: usize) -> usize {
    (z * dims[1] + y) * dims[2] + x
}

fn check_geometry(dims: Dims, spacing: Spacing, len: usize) -> Result<()> {
    if dims.iter().any(|&d| d == 0) {
        return Err(VolumeError::Invalid(format!("zero extent in dims {dims:?}")));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(VolumeError::Invalid(format!("spacing {spacing:?} must be positive")));
    }
    if voxel_count(dims) != len {
        return Err(VolumeError::Invalid(format!(
            "dims {dims:?} need {} voxels, buffer has {len}",
            voxel_count(dims)
        )));
    }
    Ok(())
}

/// Dense scalar image.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub dims: Dims,
    pub spacing: Spacing,
    pub voxels: Vec<f32>,
}

impl Volume {
    pub fn new(dims: Dims, spacing: Spacing, voxels: Vec<f32>) -> Result<Self> {
        let v = Self { dims, spacing, voxels };
        v.validate()?;
        Ok(v)
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: f32) -> Self {
        Self {
            dims,
            spacing,
            voxels: vec![value; voxel_count(dims)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_geometry(self.dims, self.spacing, self.voxels.len())?;
        if let Some(i) = self.voxels.iter().position(|v| !v.is_finite()) {
            return Err(VolumeError::Invalid(format!("non-finite voxel at linear index {i}")));
        }
        Ok(())
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f32 {
        self.voxels[linear_index(self.dims, z, y, x)]
    }
}

/// Set of class ids in `1..=63`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ClassSet(u64);

impl ClassSet {
    pub fn empty() -> Self {
        Self(0)
    }

    /// `{1, ..., classes}`.
    pub fn full(classes: u8) -> Self {
        assert!(classes <= MAX_CLASS);
        Self((1..=classes).fold(0, |acc, c| acc | (1u64 << c)))
    }

    pub fn from_classes(classes: impl IntoIterator<Item = u8>) -> Self {
        let mut s = Self::empty();
        for c in classes {
            s.insert(c);
        }
        s
    }

    pub fn insert(&mut self, class: u8) {
        assert!((1..=MAX_CLASS).contains(&class), "class id {class} out of range");
        self.0 |= 1 << class;
    }

    pub fn remove(&mut self, class: u8) {
        if class <= MAX_CLASS {
            self.0 &= !(1 << class);
        }
    }

    pub fn contains(&self, class: u8) -> bool {
        class <= MAX_CLASS && self.0 & (1 << class) != 0
    }

    pub fn len(&self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.0 == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (1..=MAX_CLASS).filter(move |&c| self.contains(c))
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.iter().collect()
    }
}

/// Integer label grid: 0 is background, `1..=classes` are foreground classes.
/// `available` records which classes were actually annotated.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelMap {
    pub dims: Dims,
    pub spacing: Spacing,
    pub classes: u8,
    pub available: ClassSet,
    pub labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(dims: Dims, spacing: Spacing, classes: u8, available: ClassSet, labels: Vec<u8>) -> Result<Self> {
        let l = Self {
            dims,
            spacing,
            classes,
            available,
            labels,
        };
        l.validate()?;
        Ok(l)
    }

    /// All-background map with every class available.
    pub fn background(dims: Dims, spacing: Spacing, classes: u8) -> Self {
        Self {
            dims,
            spacing,
            classes,
            available: ClassSet::full(classes),
            labels: vec![0; voxel_count(dims)],
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_geometry(self.dims, self.spacing, self.labels.len())?;
        if self.classes > MAX_CLASS {
            return Err(VolumeError::Invalid(format!("{} classes exceeds {MAX_CLASS}", self.classes)));
        }
        if let Some(c) = self.available.iter().find(|&c| c > self.classes) {
            return Err(VolumeError::Invalid(format!(
                "available class {c} exceeds class count {}",
                self.classes
            )));
        }
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        if let Some(bad) = (1..256).find(|&c| seen[c] && !self.available.contains(c as u8)) {
            return Err(VolumeError::Invalid(format!(
                "label value {bad} is not in the available set {:?}",
                self.available.to_vec()
            )));
        }
        Ok(())
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[linear_index(self.dims, z, y, x)]
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.iter().filter(|&&l| l == class).count()
    }

    /// Distinct label values present, including background.
    pub fn present(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().collect()
    }

    pub fn mask(&self, class: u8) -> Vec<bool> {
        self.labels.iter().map(|&l| l == class).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MvolKind {
    Image,
    Label,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct MvolHeader {
    kind: MvolKind,
    dims: Dims,
    spacing: Spacing,
    classes: u8,
    available: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Mvol {
    Image(Volume),
    Label(LabelMap),
}

impl From<Volume> for Mvol {
    fn from(v: Volume) -> Self {
        Mvol::Image(v)
    }
}

impl From<LabelMap> for Mvol {
    fn from(l: LabelMap) -> Self {
        Mvol::Label(l)
    }
}

pub fn encode_mvol(data: &Mvol) -> Result<Vec<u8>> {
    let (header, payload): (MvolHeader, Vec<u8>) = match data {
        Mvol::Image(v) => {
            v.validate()?;
            let mut p = Vec::with_capacity(v.voxels.len() * 4);
            for x in &v.voxels {
                p.extend_from_slice(&x.to_le_bytes());
            }
            (
                MvolHeader {
                    kind: MvolKind::Image,
                    dims: v.dims,
                    spacing: v.spacing,
                    classes: 0,
                    available: Vec::new(),
                },
                p,
            )
        }
        Mvol::Label(l) => {
            l.validate()?;
            (
                MvolHeader {
                    kind: MvolKind::Label,
                    dims: l.dims,
                    spacing: l.spacing,
                    classes: l.classes,
                    available: l.available.to_vec(),
                },
                l.labels.clone(),
            )
        }
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MVOL_MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode_mvol(bytes: &[u8]) -> Result<Mvol> {
    let fmt = |offset: usize, detail: String| VolumeError::Format { offset, detail };
    if bytes.len() < 8 || &bytes[..8] != MVOL_MAGIC {
        return Err(fmt(0, "bad magic, expected \"MVOL0001\"".into()));
    }
    if bytes.len() < 12 {
        return Err(fmt(bytes.len(), "truncated header length".into()));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = 12 + hlen;
    if bytes.len() < body {
        return Err(fmt(bytes.len(), format!("truncated header, expected {hlen} bytes")));
    }
    let header: MvolHeader =
        serde_json::from_slice(&bytes[12..body]).map_err(|e| fmt(12 + e.column().saturating_sub(1), e.to_string()))?;
    if header.dims.iter().any(|&d| d == 0) {
        return Err(fmt(12, format!("zero extent in dims {:?}", header.dims)));
    }
    let n = voxel_count(header.dims);
    let payload = &bytes[body..];
    let width = match header.kind {
        MvolKind::Image => 4,
        MvolKind::Label => 1,
    };
    if payload.len() != n * width {
        return Err(fmt(
            body + payload.len().min(n * width),
            format!(
                "payload holds {} bytes ({} values), dims {:?} need {n}",
                payload.len(),
                payload.len() / width,
                header.dims
            ),
        ));
    }
    match header.kind {
        MvolKind::Image => {
            let voxels = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Mvol::Image(Volume::new(header.dims, header.spacing, voxels)?))
        }
        MvolKind::Label => {
            if let Some(&c) = header.available.iter().find(|&&c| c == 0 || c > MAX_CLASS) {
                return Err(VolumeError::Invalid(format!("available class {c} out of range")));
            }
            let available = ClassSet::from_classes(header.available.iter().copied());
            Ok(Mvol::Label(LabelMap::new(
                header.dims,
                header.spacing,
                header.classes,
                available,
                payload.to_vec(),
            )?))
        }
    }
}

/// Writes atomically-enough for a batch pipeline: full buffer, single write.
pub fn write_mvol(data: &Mvol, path: &Path) -> Result<()> {
    let bytes = encode_mvol(data)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(&bytes).map_err(io_err(path))?;
    Ok(())
}

pub fn read_mvol(path: &Path) -> Result<Mvol> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode_mvol(&bytes)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    match read_mvol(path)? {
        Mvol::Image(v) => Ok(v),
        Mvol::Label(_) => Err(VolumeError::Invalid(format!("{} holds labels, expected an image", path.display()))),
    }
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    match read_mvol(path)? {
        Mvol::Label(l) => Ok(l),
        Mvol::Image(_) => Err(VolumeError::Invalid(format!("{} holds an image, expected labels", path.display()))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Labeled,
    Unlabeled,
    Val,
    Pseudo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseEntry {
    pub id: String,
    pub image: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<PathBuf>,
    pub split: Split,
}

/// Case list; relative paths resolve against `root` (the manifest's directory).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub cases: Vec<CaseEntry>,
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            cases: Vec::new(),
            root: root.into(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &CaseEntry> {
        self.cases.iter().filter(move |c| c.split == split)
    }

    /// Structural checks: unique ids and split/label consistency.
    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for c in &self.cases {
            if !ids.insert(c.id.as_str()) {
                return Err(VolumeError::Manifest(format!("duplicate case id \"{}\"", c.id)));
            }
            match (c.split, &c.label) {
                (Split::Unlabeled, Some(_)) => {
                    return Err(VolumeError::Manifest(format!(
                        "case \"{}\" is unlabeled but has a label path",
                        c.id
                    )))
                }
                (Split::Labeled | Split::Val | Split::Pseudo, None) => {
                    return Err(VolumeError::Manifest(format!(
                        "case \"{}\" in split {:?} is missing its label path",
                        c.id, c.split
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    fn check_files(&self) -> Result<()> {
        for c in &self.cases {
            for p in std::iter::once(&c.image).chain(c.label.as_ref()) {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(VolumeError::Manifest(format!(
                        "case \"{}\" references missing file {}",
                        c.id,
                        full.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let json = serde_json::to_vec_pretty(self).expect("manifest serializes");
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).map_err(io_err(parent))?;
        }
        fs::write(path, json).map_err(io_err(path))
    }
}

/// Parses, validates and stat-checks a manifest file.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut m: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| VolumeError::Manifest(format!("{}: {e}", path.display())))?;
    m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.validate()?;
    m.check_files()?;
    Ok(m)
}
