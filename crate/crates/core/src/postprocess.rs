//! 3D connected components and largest-component retention per label.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::volumeio::{Dims, LabelMap};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    /// Face neighbours only.
    #[serde(rename = "6")]
    Six,
    /// Face, edge and corner neighbours.
    #[default]
    #[serde(rename = "26")]
    TwentySix,
}

impl Connectivity {
    pub fn from_count(n: u32) -> Option<Self> {
        match n {
            6 => Some(Self::Six),
            26 => Some(Self::TwentySix),
            _ => None,
        }
    }

    pub fn count(self) -> u32 {
        match self {
            Self::Six => 6,
            Self::TwentySix => 26,
        }
    }

    /// Neighbour offsets that precede a voxel in raster order.
    fn backward_offsets(self) -> Vec<[i64; 3]> {
        let mut out = Vec::new();
        for dz in -1i64..=1 {
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let before = (dz, dy, dx) < (0, 0, 0);
                    let face = dz.abs() + dy.abs() + dx.abs() == 1;
                    if before && (face || self == Self::TwentySix) {
                        out.push([dz, dy, dx]);
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Component {
    /// 1-based; 1 is the largest component.
    pub id: u32,
    pub size: usize,
    /// Inclusive lower and exclusive upper corner.
    pub lo: [usize; 3],
    pub hi: [usize; 3],
    /// Smallest linear index in the component.
    pub seed: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Components {
    /// Component id per voxel, 0 outside the mask.
    pub ids: Vec<u32>,
    pub table: Vec<Component>,
}

fn find(parent: &mut [u32], mut x: u32) -> u32 {
    while parent[x as usize] != x {
        let p = parent[x as usize];
        parent[x as usize] = parent[p as usize];
        x = p;
    }
    x
}

/// Maximal connected sets of `mask`, numbered by decreasing size with ties
/// going to the component whose seed comes first.
pub fn connected_components_3d(mask: &[bool], dims: Dims, connectivity: Connectivity) -> Components {
    assert_eq!(mask.len(), dims.iter().product::<usize>(), "mask does not match dims");
    let offsets = connectivity.backward_offsets();
    // Provisional label per voxel; u32::MAX outside the mask.
    let mut label = vec![u32::MAX; mask.len()];
    let mut parent: Vec<u32> = Vec::new();
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let i = (z * dims[1] + y) * dims[2] + x;
                if !mask[i] {
                    continue;
                }
                let mut mine = u32::MAX;
                for o in &offsets {
                    let (nz, ny, nx) = (z as i64 + o[0], y as i64 + o[1], x as i64 + o[2]);
                    if nz < 0 || ny < 0 || nx < 0 || ny >= dims[1] as i64 || nx >= dims[2] as i64 {
                        continue;
                    }
                    let j = (nz as usize * dims[1] + ny as usize) * dims[2] + nx as usize;
                    let l = label[j];
                    if l == u32::MAX {
                        continue;
                    }
                    if mine == u32::MAX {
                        mine = find(&mut parent, l);
                    } else {
                        let (a, b) = (find(&mut parent, mine), find(&mut parent, l));
                        if a != b {
                            let (lo, hi) = (a.min(b), a.max(b));
                            parent[hi as usize] = lo;
                            mine = lo;
                        }
                    }
                }
                if mine == u32::MAX {
                    mine = parent.len() as u32;
                    parent.push(mine);
                }
                label[i] = mine;
            }
        }
    }

    // Roots in order of first appearance, so root order follows seeds.
    let mut stats: BTreeMap<u32, Component> = BTreeMap::new();
    for (i, l) in label.iter_mut().enumerate() {
        if *l == u32::MAX {
            continue;
        }
        let root = find(&mut parent, *l);
        *l = root;
        let c = [i / (dims[1] * dims[2]), (i / dims[2]) % dims[1], i % dims[2]];
        let e = stats.entry(root).or_insert(Component {
            id: 0,
            size: 0,
            lo: c,
            hi: c.map(|v| v + 1),
            seed: i,
        });
        e.size += 1;
        for a in 0..3 {
            e.lo[a] = e.lo[a].min(c[a]);
            e.hi[a] = e.hi[a].max(c[a] + 1);
        }
    }
    let mut table: Vec<(u32, Component)> = stats.into_iter().collect();
    table.sort_by(|a, b| b.1.size.cmp(&a.1.size).then(a.1.seed.cmp(&b.1.seed)));
    let mut renumber = BTreeMap::new();
    for (k, (root, comp)) in table.iter_mut().enumerate() {
        comp.id = k as u32 + 1;
        renumber.insert(*root, comp.id);
    }
    let ids = label
        .iter()
        .map(|&l| if l == u32::MAX { 0 } else { renumber[&l] })
        .collect();
    Components {
        ids,
        table: table.into_iter().map(|(_, c)| c).collect(),
    }
}

/// Components of every foreground class present in `labels`.
pub fn component_table(labels: &LabelMap, connectivity: Connectivity) -> BTreeMap<u8, Vec<Component>> {
    labels
        .present()
        .into_iter()
        .filter(|&c| c != 0)
        .map(|c| (c, connected_components_3d(&labels.mask(c), labels.dims, connectivity).table))
        .collect()
}

/// Per class, keeps only the largest component, and drops it as well when
/// it has fewer than `min_size` voxels. Removed voxels become background.
pub fn keep_largest_per_label(labels: &LabelMap, connectivity: Connectivity, min_size: usize) -> LabelMap {
    let mut out = labels.clone();
    for class in labels.present() {
        if class == 0 {
            continue;
        }
        let comps = connected_components_3d(&labels.mask(class), labels.dims, connectivity);
        let keep_largest = comps.table.first().is_some_and(|c| c.size >= min_size);
        for (v, &id) in out.labels.iter_mut().zip(&comps.ids) {
            if id != 0 && !(id == 1 && keep_largest) {
                *v = 0;
            }
        }
    }
    out
}
