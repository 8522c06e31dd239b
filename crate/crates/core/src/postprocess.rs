//! Anatomically constrained clean-up of label predictions.

use std::collections::VecDeque;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::BG;
use crate::volume::{Geometry, LabelVolume};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Connectivity {
    /// Face neighbours in 3D.
    Six,
    /// Face neighbours within one z-slice.
    FourInPlane,
}

/// Connected components of a binary mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentMap {
    pub geometry: Geometry,
    /// Per voxel, 0 for background, otherwise 1-based component id. Ids
    /// follow the scan order of each component's first voxel.
    pub ids: Vec<u32>,
    /// Voxel count of component `id` at index `id - 1`.
    pub sizes: Vec<usize>,
}

impl ComponentMap {
    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn size_ml(&self, id: u32) -> f64 {
        self.sizes[id as usize - 1] as f64 * self.geometry.voxel_volume() / 1000.0
    }

    /// Id of the largest component; ties go to the lowest id.
    pub fn largest(&self) -> Option<u32> {
        let mut best: Option<(usize, u32)> = None;
        for (i, &s) in self.sizes.iter().enumerate() {
            if best.is_none_or(|(b, _)| s > b) {
                best = Some((s, i as u32 + 1));
            }
        }
        best.map(|(_, id)| id)
    }
}

/// Labels the `true` voxels of `mask` by breadth-first flood fill.
pub fn connected_components(mask: &[bool], geometry: Geometry, conn: Connectivity) -> ComponentMap {
    let [nx, ny, nz] = geometry.dims;
    let mut ids = vec![0u32; mask.len()];
    let mut sizes = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || ids[start] != 0 {
            continue;
        }
        let id = sizes.len() as u32 + 1;
        ids[start] = id;
        queue.push_back(start);
        let mut size = 0;
        while let Some(v) = queue.pop_front() {
            size += 1;
            let (i, j, k) = (v % nx, (v / nx) % ny, v / (nx * ny));
            let mut push = |u: usize| {
                if mask[u] && ids[u] == 0 {
                    ids[u] = id;
                    queue.push_back(u);
                }
            };
            if i > 0 {
                push(v - 1);
            }
            if i + 1 < nx {
                push(v + 1);
            }
            if j > 0 {
                push(v - nx);
            }
            if j + 1 < ny {
                push(v + nx);
            }
            if conn == Connectivity::Six {
                if k > 0 {
                    push(v - nx * ny);
                }
                if k + 1 < nz {
                    push(v + nx * ny);
                }
            }
        }
        sizes.push(size);
    }
    ComponentMap { geometry, ids, sizes }
}

fn foreground(pred: &LabelVolume) -> Vec<bool> {
    pred.data().iter().map(|&l| l != BG).collect()
}

fn keep_ids(pred: &LabelVolume, cm: &ComponentMap, keep: &[bool]) -> LabelVolume {
    let data = pred
        .data()
        .iter()
        .zip(&cm.ids)
        .map(|(&l, &id)| if id == 0 || keep[id as usize - 1] { l } else { BG })
        .collect();
    pred.with_data(data).expect("same length")
}

/// Keeps only the largest 6-connected component of the union of all
/// foreground labels.
pub fn remove_disconnected_3d(pred: &LabelVolume) -> LabelVolume {
    let cm = connected_components(&foreground(pred), *pred.geometry(), Connectivity::Six);
    let mut keep = vec![false; cm.len()];
    if let Some(id) = cm.largest() {
        keep[id as usize - 1] = true;
    }
    keep_ids(pred, &cm, &keep)
}

/// Keeps, in every z-slice, only the largest 4-connected foreground component.
pub fn remove_disconnected_2d(pred: &LabelVolume) -> LabelVolume {
    let cm = connected_components(&foreground(pred), *pred.geometry(), Connectivity::FourInPlane);
    let [nx, ny, nz] = pred.dims();
    let plane = nx * ny;
    // components never cross slices, so the best per slice is found from
    // each component's first voxel
    let mut slice_of = vec![0usize; cm.len()];
    for (v, &id) in cm.ids.iter().enumerate() {
        if id != 0 {
            slice_of[id as usize - 1] = v / plane;
        }
    }
    let mut best: Vec<Option<u32>> = vec![None; nz];
    for (i, &s) in cm.sizes.iter().enumerate() {
        let z = slice_of[i];
        if best[z].is_none_or(|b| s > cm.sizes[b as usize - 1]) {
            best[z] = Some(i as u32 + 1);
        }
    }
    let mut keep = vec![false; cm.len()];
    for id in best.into_iter().flatten() {
        keep[id as usize - 1] = true;
    }
    keep_ids(pred, &cm, &keep)
}

/// Which end of the z axis is the cardiac base.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseAt {
    #[default]
    ZMax,
    ZMin,
}

impl FromStr for BaseAt {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "zmax" | "z_max" => Ok(BaseAt::ZMax),
            "zmin" | "z_min" => Ok(BaseAt::ZMin),
            _ => Err(Error::Config(format!("unknown base orientation {s:?} (zmax|zmin)"))),
        }
    }
}

/// Clears the foreground of the slice nearest the base when it holds less
/// than half the foreground of its neighbour toward the apex.
pub fn remove_topmost_slice(pred: &LabelVolume, base_at: BaseAt) -> LabelVolume {
    let [nx, ny, nz] = pred.dims();
    let plane = nx * ny;
    let counts: Vec<usize> = pred
        .data()
        .chunks(plane)
        .map(|s| s.iter().filter(|&&l| l != BG).count())
        .collect();
    let (top, next) = match base_at {
        BaseAt::ZMax => match (0..nz).rev().find(|&z| counts[z] > 0) {
            Some(z) if z > 0 => (z, z - 1),
            _ => return pred.clone(),
        },
        BaseAt::ZMin => match (0..nz).find(|&z| counts[z] > 0) {
            Some(z) if z + 1 < nz => (z, z + 1),
            _ => return pred.clone(),
        },
    };
    if (counts[top] as f64) < 0.5 * counts[next] as f64 {
        let mut data = pred.data().to_vec();
        data[top * plane..(top + 1) * plane].fill(BG);
        pred.with_data(data).expect("same length")
    } else {
        pred.clone()
    }
}

/// Parameters of the outlier-region step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutlierConfig {
    /// Components below this volume are outliers.
    pub min_ml: f64,
    /// Vote weight width, mm.
    pub sigma_mm: f64,
    /// Voting window in voxels (x, y, z); odd.
    pub window: [usize; 3],
}

impl Default for OutlierConfig {
    fn default() -> Self {
        OutlierConfig {
            min_ml: 0.1,
            sigma_mm: 2.0,
            window: [9, 9, 5],
        }
    }
}

/// Voxels belonging to a per-label 6-connected component smaller than
/// `min_ml`. Background is never an outlier.
pub fn outlier_mask(pred: &LabelVolume, min_ml: f64) -> Vec<bool> {
    let mut out = vec![false; pred.data().len()];
    for code in pred.label_set().into_iter().filter(|&c| c != BG) {
        let cm = connected_components(&pred.mask(code), *pred.geometry(), Connectivity::Six);
        let small: Vec<bool> = (1..=cm.len() as u32).map(|id| cm.size_ml(id) < min_ml).collect();
        for (o, &id) in out.iter_mut().zip(&cm.ids) {
            if id != 0 && small[id as usize - 1] {
                *o = true;
            }
        }
    }
    out
}

/// Gaussian-weighted label vote at voxel `v` over the non-excluded voxels of
/// the window. `None` when nobody votes; ties go to the lower code.
pub fn vote(pred: &LabelVolume, excluded: &[bool], v: usize, cfg: &OutlierConfig) -> Option<u8> {
    let g = pred.geometry();
    let [nx, ny, nz] = g.dims;
    let [i, j, k] = g.coords(v);
    let h = cfg.window.map(|w| (w / 2) as isize);
    let mut score = [0.0f64; 256];
    let mut any = false;
    for dz in -h[2]..=h[2] {
        for dy in -h[1]..=h[1] {
            for dx in -h[0]..=h[0] {
                let (x, y, z) = (i as isize + dx, j as isize + dy, k as isize + dz);
                if x < 0 || y < 0 || z < 0 || x >= nx as isize || y >= ny as isize || z >= nz as isize {
                    continue;
                }
                let u = g.index(x as usize, y as usize, z as usize);
                if excluded[u] {
                    continue;
                }
                let d2: f64 = [dx, dy, dz]
                    .iter()
                    .zip(g.spacing)
                    .map(|(&d, s)| (d as f64 * s as f64).powi(2))
                    .sum();
                score[pred.data()[u] as usize] += (-d2 / (2.0 * cfg.sigma_mm * cfg.sigma_mm)).exp();
                any = true;
            }
        }
    }
    if !any {
        return None;
    }
    let mut best = 0;
    for c in 1..256 {
        if score[c] > score[best] {
            best = c;
        }
    }
    Some(best as u8)
}

/// Relabels every voxel of a small per-label component by a Gaussian vote of
/// the surrounding non-outlier voxels, all from the unmodified input.
pub fn replace_outlier_regions(pred: &LabelVolume, cfg: &OutlierConfig) -> LabelVolume {
    let outliers = outlier_mask(pred, cfg.min_ml);
    let mut data = pred.data().to_vec();
    for (v, _) in outliers.iter().enumerate().filter(|(_, &o)| o) {
        if let Some(l) = vote(pred, &outliers, v, cfg) {
            data[v] = l;
        }
    }
    pred.with_data(data).expect("same length")
}

/// Step toggles for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    pub disconnected_3d: bool,
    pub disconnected_2d: bool,
    pub topmost_slice: bool,
    pub outliers: bool,
    pub base_at: BaseAt,
    pub outlier: OutlierConfig,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        PostprocessConfig {
            disconnected_3d: true,
            disconnected_2d: true,
            topmost_slice: true,
            outliers: true,
            base_at: BaseAt::ZMax,
            outlier: OutlierConfig::default(),
        }
    }
}

/// The enabled steps in order: 3D components, 2D components, top slice,
/// outlier regions.
pub fn postprocess_pipeline(pred: &LabelVolume, cfg: &PostprocessConfig) -> LabelVolume {
    let mut p = pred.clone();
    if cfg.disconnected_3d {
        p = remove_disconnected_3d(&p);
    }
    if cfg.disconnected_2d {
        p = remove_disconnected_2d(&p);
    }
    if cfg.topmost_slice {
        p = remove_topmost_slice(&p, cfg.base_at);
    }
    if cfg.outliers {
        p = replace_outlier_regions(&p, &cfg.outlier);
    }
    p
}
