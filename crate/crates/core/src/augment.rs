//! Intensity normalization and seeded training-time augmentation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{resample_trilinear, Geometry, LabelVolume, ScalarVolume};

/// Value ranges for [`sample_params`]. Symmetric ranges are given by their
/// half-width, scale ranges as `[lo, hi]`; voxel quantities refer to the
/// output grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentRanges {
    pub translation: f64,
    pub rotation: f64,
    pub iso_scale: [f64; 2],
    pub aniso_scale: [f64; 2],
    pub elastic: f64,
    pub elastic_nodes: usize,
    pub intensity_shift: f64,
    pub intensity_scale: [f64; 2],
    pub label_shift: f64,
    pub label_scale: [f64; 2],
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            translation: 20.0,
            rotation: 0.35,
            iso_scale: [0.8, 1.2],
            aniso_scale: [0.9, 1.1],
            elastic: 15.0,
            elastic_nodes: 8,
            intensity_shift: 0.2,
            intensity_scale: [0.6, 1.4],
            label_shift: 0.2,
            label_scale: [0.9, 1.1],
        }
    }
}

impl AugmentRanges {
    /// Defaults with the voxel-valued ranges rescaled from a 128-voxel grid
    /// to `grid` voxels, so the displacements cover the same fraction of the
    /// field of view.
    pub fn scaled_to(grid: usize) -> Self {
        let f = grid as f64 / 128.0;
        let d = Self::default();
        AugmentRanges {
            translation: d.translation * f,
            elastic: d.elastic * f,
            ..d
        }
    }

    /// Ranges that only produce identity parameters.
    pub fn identity() -> Self {
        AugmentRanges {
            translation: 0.0,
            rotation: 0.0,
            iso_scale: [1.0, 1.0],
            aniso_scale: [1.0, 1.0],
            elastic: 0.0,
            elastic_nodes: 8,
            intensity_shift: 0.0,
            intensity_scale: [1.0, 1.0],
            label_shift: 0.0,
            label_scale: [1.0, 1.0],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let half = [self.translation, self.rotation, self.elastic, self.intensity_shift, self.label_shift];
        let spans = [self.iso_scale, self.aniso_scale, self.intensity_scale, self.label_scale];
        let ok = half.iter().all(|&h| h >= 0.0 && h.is_finite())
            && spans.iter().all(|s| s[0] > 0.0 && s[0] <= s[1] && s[1].is_finite())
            && self.elastic_nodes >= 2;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid augmentation ranges {self:?}")))
        }
    }
}

/// One draw of every augmentation parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentParams {
    /// Output-grid voxels.
    pub translation: [f64; 3],
    /// Radians about x, y, z (intrinsic order).
    pub rotation: [f64; 3],
    pub iso_scale: f64,
    pub aniso_scale: [f64; 3],
    pub elastic_nodes: usize,
    /// Node displacements in output voxels, x fastest over the node grid.
    pub elastic: Vec<[f64; 3]>,
    pub intensity_shift: f64,
    pub intensity_scale: f64,
    pub per_label_shift: Vec<f64>,
    pub per_label_scale: Vec<f64>,
}

impl AugmentParams {
    pub fn identity(k: usize, nodes: usize) -> Self {
        AugmentParams {
            translation: [0.0; 3],
            rotation: [0.0; 3],
            iso_scale: 1.0,
            aniso_scale: [1.0; 3],
            elastic_nodes: nodes,
            elastic: vec![[0.0; 3]; nodes * nodes * nodes],
            intensity_shift: 0.0,
            intensity_scale: 1.0,
            per_label_shift: vec![0.0; k],
            per_label_scale: vec![1.0; k],
        }
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Draws every field independently and uniformly from `ranges`, for `k`
/// label classes.
pub fn sample_params<R: Rng + ?Sized>(rng: &mut R, k: usize, ranges: &AugmentRanges) -> AugmentParams {
    let sym = |rng: &mut R, h: f64| uniform(rng, -h, h);
    let translation = std::array::from_fn(|_| sym(rng, ranges.translation));
    let rotation = std::array::from_fn(|_| sym(rng, ranges.rotation));
    let iso_scale = uniform(rng, ranges.iso_scale[0], ranges.iso_scale[1]);
    let aniso_scale = std::array::from_fn(|_| uniform(rng, ranges.aniso_scale[0], ranges.aniso_scale[1]));
    let n = ranges.elastic_nodes;
    let elastic = (0..n * n * n)
        .map(|_| std::array::from_fn(|_| sym(rng, ranges.elastic)))
        .collect();
    let intensity_shift = sym(rng, ranges.intensity_shift);
    let intensity_scale = uniform(rng, ranges.intensity_scale[0], ranges.intensity_scale[1]);
    let per_label_shift = (0..k).map(|_| sym(rng, ranges.label_shift)).collect();
    let per_label_scale = (0..k)
        .map(|_| uniform(rng, ranges.label_scale[0], ranges.label_scale[1]))
        .collect();
    AugmentParams {
        translation,
        rotation,
        iso_scale,
        aniso_scale,
        elastic_nodes: n,
        elastic,
        intensity_shift,
        intensity_scale,
        per_label_shift,
        per_label_scale,
    }
}

/// Percentile `p` (0..=100) with linear interpolation between order
/// statistics of the sorted values: position `p/100 · (n − 1)`.
pub fn percentile(sorted: &[f32], p: f64) -> f64 {
    let pos = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let t = pos - lo as f64;
    sorted[lo] as f64 * (1.0 - t) + sorted[hi] as f64 * t
}

/// Affine map sending the 10th percentile to −1 and the 90th to +1.
pub fn normalize_percentile(img: &ScalarVolume) -> Result<ScalarVolume> {
    let mut sorted = img.data().to_vec();
    sorted.sort_by(f32::total_cmp);
    let p10 = percentile(&sorted, 10.0);
    let p90 = percentile(&sorted, 90.0);
    if p90 - p10 <= 0.0 {
        return Err(Error::DegenerateIntensities(p10));
    }
    let s = 2.0 / (p90 - p10);
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = ((*v as f64 - p10) * s - 1.0) as f32;
    }
    Ok(out)
}

/// Normalization followed by resampling onto the network grid.
pub fn preprocess_eval(img: &ScalarVolume, out_dims: [usize; 3], out_spacing: [f32; 3]) -> Result<ScalarVolume> {
    resample_trilinear(&normalize_percentile(img)?, out_dims, out_spacing)
}

/// Output-voxel → source-voxel coordinate map of one parameter draw.
struct SpatialMap<'a> {
    p: &'a AugmentParams,
    rot: [[f64; 3]; 3],
    center: [f64; 3],
    out_dims: [usize; 3],
    /// output spacing / source spacing per axis
    ratio: [f64; 3],
}

impl<'a> SpatialMap<'a> {
    fn new(p: &'a AugmentParams, src: &Geometry, out: &Geometry) -> Self {
        let [a, b, c] = p.rotation;
        let rx = [[1.0, 0.0, 0.0], [0.0, a.cos(), -a.sin()], [0.0, a.sin(), a.cos()]];
        let ry = [[b.cos(), 0.0, b.sin()], [0.0, 1.0, 0.0], [-b.sin(), 0.0, b.cos()]];
        let rz = [[c.cos(), -c.sin(), 0.0], [c.sin(), c.cos(), 0.0], [0.0, 0.0, 1.0]];
        SpatialMap {
            p,
            rot: matmul(&matmul(&rx, &ry), &rz),
            center: std::array::from_fn(|a| (out.dims[a] as f64 - 1.0) / 2.0),
            out_dims: out.dims,
            ratio: std::array::from_fn(|a| out.spacing[a] as f64 / src.spacing[a] as f64),
        }
    }

    /// Elastic displacement at output voxel `u`, trilinear over the node grid
    /// whose corner nodes sit on the corner voxels.
    fn elastic(&self, u: [f64; 3]) -> [f64; 3] {
        let n = self.p.elastic_nodes;
        let mut i0 = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let span = (self.out_dims[a] as f64 - 1.0).max(1.0);
            let g = (u[a] / span * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
            i0[a] = (g.floor() as usize).min(n - 2);
            t[a] = g - i0[a] as f64;
        }
        let mut d = [0.0; 3];
        for corner in 0..8 {
            let off = [corner & 1, (corner >> 1) & 1, corner >> 2];
            let mut w = 1.0;
            for a in 0..3 {
                w *= if off[a] == 1 { t[a] } else { 1.0 - t[a] };
            }
            if w == 0.0 {
                continue;
            }
            let node = &self.p.elastic[((i0[2] + off[2]) * n + i0[1] + off[1]) * n + i0[0] + off[0]];
            for a in 0..3 {
                d[a] += w * node[a];
            }
        }
        d
    }

    fn map(&self, u: [usize; 3]) -> [f64; 3] {
        let u = u.map(|v| v as f64);
        let e = self.elastic(u);
        let d: [f64; 3] = std::array::from_fn(|a| (u[a] + e[a] - self.center[a]) * self.p.aniso_scale[a] * self.p.iso_scale);
        let r: [f64; 3] = std::array::from_fn(|a| (0..3).map(|b| self.rot[a][b] * d[b]).sum());
        std::array::from_fn(|a| (self.center[a] + r[a] + self.p.translation[a]) * self.ratio[a])
    }
}

fn matmul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    std::array::from_fn(|i| std::array::from_fn(|j| (0..3).map(|k| a[i][k] * b[k][j]).sum()))
}

/// Warps image (trilinear) and labels (nearest) through one shared map onto
/// the output grid.
///
/// Composition, output to input: elastic displacement, anisotropic scale,
/// isotropic scale, rotation about the volume center, translation, then the
/// change of grid.
pub fn apply_spatial(
    img: &ScalarVolume,
    labels: &LabelVolume,
    p: &AugmentParams,
    out_dims: [usize; 3],
    out_spacing: [f32; 3],
) -> Result<(ScalarVolume, LabelVolume)> {
    img.geometry().ensure_same(labels.geometry())?;
    let out = Geometry::new(out_dims, out_spacing)?;
    let map = SpatialMap::new(p, img.geometry(), &out);
    let n = out.nvox();
    let mut vals = Vec::with_capacity(n);
    let mut labs = Vec::with_capacity(n);
    for k in 0..out_dims[2] {
        for j in 0..out_dims[1] {
            for i in 0..out_dims[0] {
                let s = map.map([i, j, k]);
                vals.push(img.sample_trilinear(s) as f32);
                labs.push(labels.sample_nearest(s));
            }
        }
    }
    Ok((ScalarVolume::new(out, vals)?, LabelVolume::new(out, labels.schema(), labs)?))
}

/// Global affine intensity change followed by per-label modulation.
pub fn apply_intensity(img: &ScalarVolume, labels: &LabelVolume, p: &AugmentParams) -> Result<ScalarVolume> {
    img.geometry().ensure_same(labels.geometry())?;
    let mut out = img.clone();
    for (v, &l) in out.data_mut().iter_mut().zip(labels.data()) {
        let mut x = *v as f64 * p.intensity_scale + p.intensity_shift;
        if let (Some(&s), Some(&t)) = (p.per_label_scale.get(l as usize), p.per_label_shift.get(l as usize)) {
            x = x * s + t;
        }
        *v = x as f32;
    }
    Ok(out)
}

/// Full training-time transform: normalize, warp, then intensity changes.
pub fn augment_pair(
    img: &ScalarVolume,
    labels: &LabelVolume,
    p: &AugmentParams,
    out_dims: [usize; 3],
    out_spacing: [f32; 3],
) -> Result<(ScalarVolume, LabelVolume)> {
    let norm = normalize_percentile(img)?;
    let (warped, wl) = apply_spatial(&norm, labels, p, out_dims, out_spacing)?;
    Ok((apply_intensity(&warped, &wl, p)?, wl))
}
