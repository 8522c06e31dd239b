//! Synthetic LGE-like cardiac phantoms with nested labels.
//!
//! The left ventricle is a truncated ellipsoid (apex toward low z, open at the
//! base toward high z) wrapped in a myocardial shell. Infarct is a wedge of
//! the shell starting at the endocardium; MVO is a ball inside the infarct
//! that never touches anything but infarct. Intensities follow LGE contrast:
//! bright blood and infarct, dark myocardium and MVO core.

use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::config::CorpusConfig;
use crate::error::{Error, Result};
use crate::hierarchy::{LabelSchema, Subgroup, BG, LV, MIT, MVO, MYO};
use crate::volume::{write_mvol, write_sidecar, CaseMeta, Geometry, LabelVolume, ScalarVolume};

/// Field of view the default shape ranges were chosen for, mm.
const REFERENCE_FOV: f64 = 63.0;

/// Mean intensity per class before gain, on an arbitrary scanner scale.
const AIR: f64 = 30.0;
const BODY: f64 = 350.0;
const CLASS_MEAN: [f64; 5] = [BODY, 750.0, 120.0, 920.0, 180.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub seed: u64,
    pub subgroup: Subgroup,
    pub geometry: Geometry,
    /// Heart center relative to its default position, mm.
    pub center_offset: [f64; 3],
    /// Cavity semi-axes, mm.
    pub lv_radii: [f64; 3],
    pub wall: f64,
    /// Base plane height above the center as a fraction of the z semi-axis.
    pub base_cut: f64,
    /// Infarct wedge start azimuth and angular extent, radians.
    pub mit_start: f64,
    pub mit_extent: f64,
    /// Transmural reach of the infarct, fraction of the wall from the endocardium.
    pub mit_depth: f64,
    /// Lower end of the infarct as a fraction of the z semi-axis (negative is
    /// toward the apex).
    pub mit_z_from: f64,
    /// MVO ball radius, mm; 0 means no MVO.
    pub mvo_radius: f64,
    /// Noise standard deviation relative to the unit intensity scale.
    pub noise_std: f64,
    pub gain: f64,
}

impl PhantomSpec {
    /// Draws a random anatomy. Acute cases carry MVO with probability
    /// `mvo_fraction`.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, subgroup: Subgroup, geometry: Geometry, mvo_fraction: f64) -> Self {
        let ext = geometry.center_extent();
        let s = ext[0].min(ext[1]) / REFERENCE_FOV;
        let mut u = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
        let rxy = u(9.0, 12.0) * s;
        let spec = PhantomSpec {
            seed: 0,
            subgroup,
            geometry,
            center_offset: [u(-4.0, 4.0) * s, u(-4.0, 4.0) * s, u(-3.0, 3.0) * s],
            lv_radii: [rxy * u(0.9, 1.1), rxy * u(0.9, 1.1), u(18.0, 24.0) * s],
            wall: u(6.0, 8.0) * s,
            base_cut: u(0.3, 0.5),
            mit_start: u(0.0, TAU),
            mit_extent: u(1.2, 2.2),
            mit_depth: u(0.7, 1.0),
            mit_z_from: u(-0.8, -0.4),
            mvo_radius: 0.0,
            noise_std: u(0.04, 0.07),
            gain: u(0.8, 1.25),
        };
        let mvo = subgroup.allows_mvo() && rng.random::<f64>() < mvo_fraction;
        PhantomSpec {
            seed: rng.random(),
            mvo_radius: if mvo { rng.random_range(5.0..7.0) * s } else { 0.0 },
            ..spec
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.lv_radii.iter().any(|&r| !(r > 0.0)) || !(self.wall > 0.0) {
            return bad("radii and wall thickness must be positive");
        }
        if !(self.mit_extent > 0.0 && self.mit_extent <= TAU) {
            return bad("infarct extent must lie in (0, 2π]");
        }
        if !(self.mit_depth > 0.0 && self.mit_depth <= 1.0) {
            return bad("infarct depth must lie in (0, 1]");
        }
        if !(self.mvo_radius >= 0.0) || !(self.noise_std >= 0.0) || !(self.gain > 0.0) {
            return bad("MVO radius and noise must be non-negative, gain positive");
        }
        if self.mvo_radius > 0.0 && !self.subgroup.allows_mvo() {
            return bad("MVO is only allowed in acute (D8) cases");
        }
        Ok(())
    }

    /// Default heart center: grid middle in-plane, 60 % up the z extent so
    /// the apex stays inside.
    fn center(&self) -> [f64; 3] {
        let ext = self.geometry.center_extent();
        [
            ext[0] / 2.0 + self.center_offset[0],
            ext[1] / 2.0 + self.center_offset[1],
            ext[2] * 0.6 + self.center_offset[2],
        ]
    }

    /// Label of a point (mm, relative to the heart center) ignoring MVO.
    fn tissue(&self, d: [f64; 3]) -> u8 {
        let [rx, ry, rz] = self.lv_radii;
        let t = self.wall;
        if d[2] > self.base_cut * rz {
            return BG;
        }
        let qi = (d[0] / rx).powi(2) + (d[1] / ry).powi(2) + (d[2] / rz).powi(2);
        if qi <= 1.0 {
            return LV;
        }
        let qo = (d[0] / (rx + t)).powi(2) + (d[1] / (ry + t)).powi(2) + (d[2] / (rz + t)).powi(2);
        if qo > 1.0 {
            return BG;
        }
        let az = (d[1].atan2(d[0]) - self.mit_start).rem_euclid(TAU);
        let depth = (qi.sqrt() - 1.0) / ((qi / qo).sqrt() - 1.0);
        if az <= self.mit_extent && d[2] >= self.mit_z_from * rz && depth <= self.mit_depth {
            MIT
        } else {
            MYO
        }
    }
}

fn in_body(p: [f64; 3], ext: [f64; 3]) -> bool {
    let (a, b) = (0.45 * ext[0], 0.38 * ext[1]);
    ((p[0] - ext[0] / 2.0) / a).powi(2) + ((p[1] - ext[1] / 2.0) / b).powi(2) <= 1.0
}

/// Renders a phantom. Deterministic in `spec`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(ScalarVolume, LabelVolume, Subgroup)> {
    spec.validate()?;
    let g = spec.geometry;
    let c = spec.center();
    let pos = |v: usize| {
        let ijk = g.coords(v);
        std::array::from_fn::<f64, 3, _>(|a| ijk[a] as f64 * g.spacing[a] as f64)
    };
    let mut labels: Vec<u8> = (0..g.nvox())
        .map(|v| {
            let p = pos(v);
            spec.tissue(std::array::from_fn(|a| p[a] - c[a]))
        })
        .collect();

    if spec.mvo_radius > 0.0 {
        let [nx, ny, nz] = g.dims;
        let interior = |v: usize| {
            let [i, j, k] = g.coords(v);
            labels[v] == MIT
                && i > 0
                && j > 0
                && k > 0
                && i + 1 < nx
                && j + 1 < ny
                && k + 1 < nz
                && [v - 1, v + 1, v - nx, v + nx, v - nx * ny, v + nx * ny]
                    .iter()
                    .all(|&u| labels[u] == MIT)
        };
        let core: Vec<usize> = (0..g.nvox()).filter(|&v| interior(v)).collect();
        if core.is_empty() {
            return Err(Error::InvalidSpec("infarct too thin to hold MVO".into()));
        }
        // seed at the interior voxel nearest the infarct centroid
        let mits: Vec<[f64; 3]> = (0..g.nvox()).filter(|&v| labels[v] == MIT).map(pos).collect();
        let centroid: [f64; 3] = std::array::from_fn(|a| mits.iter().map(|p| p[a]).sum::<f64>() / mits.len() as f64);
        let dist2 = |p: [f64; 3], q: [f64; 3]| (0..3).map(|a| (p[a] - q[a]).powi(2)).sum::<f64>();
        let seed = *core
            .iter()
            .min_by(|&&a, &&b| dist2(pos(a), centroid).total_cmp(&dist2(pos(b), centroid)))
            .expect("non-empty");
        let r2 = spec.mvo_radius * spec.mvo_radius;
        for v in core {
            if dist2(pos(v), pos(seed)) <= r2 {
                labels[v] = MVO;
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_std * 1000.0).map_err(|e| Error::InvalidSpec(e.to_string()))?;
    let ext = g.center_extent();
    let data = labels
        .iter()
        .enumerate()
        .map(|(v, &l)| {
            let base = if l == BG && !in_body(pos(v), ext) { AIR } else { CLASS_MEAN[l as usize] };
            ((base + noise.sample(&mut rng)) * spec.gain) as f32
        })
        .collect();
    let img = ScalarVolume::new(g, data)?;
    let lab = LabelVolume::new(g, LabelSchema::Stage3, labels)?;
    Ok((img, lab, spec.subgroup))
}

/// Corpus split of case `i`: one case in every consecutive block of three
/// goes to validation, rotating through the subgroups.
pub fn is_validation(i: usize) -> bool {
    i % 3 == (i / 3) % 3
}

/// Subgroups cycle D8, M1, M12.
pub fn subgroup_of(i: usize) -> Subgroup {
    Subgroup::ALL[i % 3]
}

pub fn case_id(i: usize) -> String {
    format!("case_{i:03}")
}

/// Spec of corpus case `i`; independent of the other cases.
pub fn corpus_spec(cfg: &CorpusConfig, i: usize) -> Result<PhantomSpec> {
    let geometry = Geometry::new(cfg.native_dims, cfg.native_spacing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64);
    Ok(PhantomSpec::sample(&mut rng, subgroup_of(i), geometry, cfg.mvo_fraction))
}

/// Writes `<dir>/{train,val}/{images,labels}/case_NNN.mvol` plus sidecars.
pub fn generate_corpus(cfg: &CorpusConfig, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    for split in ["train", "val"] {
        for kind in ["images", "labels"] {
            let d = dir.join(split).join(kind);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }
    let mut written = Vec::with_capacity(cfg.count);
    for i in 0..cfg.count {
        let spec = corpus_spec(cfg, i)?;
        let (img, lab, sg) = generate_phantom(&spec)?;
        let split = if is_validation(i) { "val" } else { "train" };
        let meta = CaseMeta {
            subgroup: sg,
            case_id: case_id(i),
        };
        let name = format!("{}.mvol", meta.case_id);
        let ip = dir.join(split).join("images").join(&name);
        let lp = dir.join(split).join("labels").join(&name);
        write_mvol(&img.into(), &ip)?;
        write_sidecar(&ip, &meta)?;
        write_mvol(&lab.into(), &lp)?;
        write_sidecar(&lp, &meta)?;
        written.push(ip);
    }
    Ok(written)
}
