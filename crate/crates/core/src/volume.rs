//! Dense voxel grids with physical spacing.
//!
//! All grids are stored x-fastest (then y, then z). Voxel `(i, j, k)` has its
//! physical center at `(i·sx, j·sy, k·sz)` mm, so resampling aligns the
//! centers of the first voxels of source and target grids.
//!
//! [`ProbVolume`] keeps the channel dimension outermost: channel `c` of voxel
//! `v` lives at `data[c * nvox + v]`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{LabelSchema, Subgroup};

pub const MVOL_MAGIC: [u8; 6] = *b"MVOL1\0";
pub const MVOL_HEADER_LEN: usize = 31;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

/// Grid size and voxel spacing (mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub dims: [usize; 3],
    pub spacing: [f32; 3],
}

impl Geometry {
    pub fn new(dims: [usize; 3], spacing: [f32; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::InvalidVolume(format!("zero-sized dims {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidVolume(format!(
                "non-positive spacing {spacing:?}"
            )));
        }
        Ok(Geometry { dims, spacing })
    }

    pub fn isotropic(n: usize, spacing: f32) -> Self {
        Geometry {
            dims: [n; 3],
            spacing: [spacing; 3],
        }
    }

    #[inline]
    pub fn nvox(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.dims[1] + j) * self.dims[0] + i
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    /// Volume of one voxel in mm³.
    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().map(|&s| s as f64).product()
    }

    /// Physical extent between first and last voxel centers, in mm.
    pub fn center_extent(&self) -> [f64; 3] {
        std::array::from_fn(|a| (self.dims[a] - 1) as f64 * self.spacing[a] as f64)
    }

    fn check_same(&self, other: &Geometry, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::GeometryMismatch(format!(
                "{what}: {:?}/{:?} vs {:?}/{:?}",
                self.dims, self.spacing, other.dims, other.spacing
            )));
        }
        Ok(())
    }

    pub fn ensure_same(&self, other: &Geometry) -> Result<()> {
        self.check_same(other, "volumes differ")
    }
}

/// Real-valued image on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    geom: Geometry,
    data: Vec<f32>,
}

impl ScalarVolume {
    pub fn new(geom: Geometry, data: Vec<f32>) -> Result<Self> {
        Geometry::new(geom.dims, geom.spacing)?;
        if data.len() != geom.nvox() {
            return Err(Error::InvalidVolume(format!(
                "data length {} != {} voxels",
                data.len(),
                geom.nvox()
            )));
        }
        Ok(ScalarVolume { geom, data })
    }

    pub fn filled(geom: Geometry, value: f32) -> Self {
        ScalarVolume {
            data: vec![value; geom.nvox()],
            geom,
        }
    }

    pub fn from_fn(geom: Geometry, mut f: impl FnMut(usize, usize, usize) -> f32) -> Self {
        let mut data = Vec::with_capacity(geom.nvox());
        for k in 0..geom.dims[2] {
            for j in 0..geom.dims[1] {
                for i in 0..geom.dims[0] {
                    data.push(f(i, j, k));
                }
            }
        }
        ScalarVolume { geom, data }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.geom.spacing
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.geom.index(i, j, k)]
    }

    /// Trilinear sample at a continuous voxel index, clamped to the grid.
    pub fn sample_trilinear(&self, pos: [f64; 3]) -> f64 {
        let mut base = [0usize; 3];
        let mut next = [0usize; 3];
        let mut frac = [0f64; 3];
        for a in 0..3 {
            let hi = (self.geom.dims[a] - 1) as f64;
            let p = pos[a].clamp(0.0, hi);
            let f = p.floor();
            base[a] = f as usize;
            next[a] = (base[a] + 1).min(self.geom.dims[a] - 1);
            frac[a] = p - f;
        }
        let v = |i: usize, j: usize, k: usize| self.data[self.geom.index(i, j, k)] as f64;
        let [fx, fy, fz] = frac;
        let (x0, y0, z0) = (base[0], base[1], base[2]);
        let (x1, y1, z1) = (next[0], next[1], next[2]);
        let c00 = v(x0, y0, z0) * (1.0 - fx) + v(x1, y0, z0) * fx;
        let c10 = v(x0, y1, z0) * (1.0 - fx) + v(x1, y1, z0) * fx;
        let c01 = v(x0, y0, z1) * (1.0 - fx) + v(x1, y0, z1) * fx;
        let c11 = v(x0, y1, z1) * (1.0 - fx) + v(x1, y1, z1) * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        c0 * (1.0 - fz) + c1 * fz
    }
}

/// Small-integer labels on a grid, tagged with the schema they follow.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    geom: Geometry,
    schema: LabelSchema,
    data: Vec<u8>,
}

impl LabelVolume {
    pub fn new(geom: Geometry, schema: LabelSchema, data: Vec<u8>) -> Result<Self> {
        Geometry::new(geom.dims, geom.spacing)?;
        if data.len() != geom.nvox() {
            return Err(Error::InvalidVolume(format!(
                "data length {} != {} voxels",
                data.len(),
                geom.nvox()
            )));
        }
        if let Some(&bad) = data.iter().find(|&&c| !schema.contains(c)) {
            return Err(Error::UnknownCode(bad));
        }
        Ok(LabelVolume { geom, schema, data })
    }

    pub fn background(geom: Geometry, schema: LabelSchema) -> Self {
        LabelVolume {
            data: vec![0; geom.nvox()],
            geom,
            schema,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn dims(&self) -> [usize; 3] {
        self.geom.dims
    }

    pub fn spacing(&self) -> [f32; 3] {
        self.geom.spacing
    }

    pub fn schema(&self) -> LabelSchema {
        self.schema
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> u8 {
        self.data[self.geom.index(i, j, k)]
    }

    /// Replaces the voxel data, keeping geometry and schema.
    pub fn with_data(&self, data: Vec<u8>) -> Result<Self> {
        LabelVolume::new(self.geom, self.schema, data)
    }

    /// Re-tags the volume with another schema after validating every code.
    pub fn with_schema(self, schema: LabelSchema) -> Result<Self> {
        LabelVolume::new(self.geom, schema, self.data)
    }

    /// Sorted set of codes that occur in the volume.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &c in &self.data {
            seen[c as usize] = true;
        }
        (0..=255u8).filter(|&c| seen[c as usize]).collect()
    }

    pub fn count(&self, code: u8) -> usize {
        self.data.iter().filter(|&&c| c == code).count()
    }

    pub fn mask(&self, code: u8) -> Vec<bool> {
        self.data.iter().map(|&c| c == code).collect()
    }

    /// Label of the voxel nearest to `pos` (voxel units); exact halves go to
    /// the lower index.
    pub fn sample_nearest(&self, pos: [f64; 3]) -> u8 {
        let idx: [usize; 3] = std::array::from_fn(|a| {
            let hi = (self.geom.dims[a] - 1) as f64;
            (pos[a].clamp(0.0, hi) - 0.5).ceil().max(0.0) as usize
        });
        self.data[self.geom.index(idx[0], idx[1], idx[2])]
    }
}

/// Whether a [`ProbVolume`] holds raw scores or normalized probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProbKind {
    Logits,
    Probs,
}

/// Per-voxel class scores, channel dimension outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    geom: Geometry,
    channels: usize,
    kind: ProbKind,
    schema: Option<LabelSchema>,
    data: Vec<f64>,
}

impl ProbVolume {
    pub fn new(geom: Geometry, channels: usize, kind: ProbKind, data: Vec<f64>) -> Result<Self> {
        Geometry::new(geom.dims, geom.spacing)?;
        if channels == 0 {
            return Err(Error::InvalidVolume("zero channels".into()));
        }
        if data.len() != channels * geom.nvox() {
            return Err(Error::InvalidVolume(format!(
                "data length {} != {} channels x {} voxels",
                data.len(),
                channels,
                geom.nvox()
            )));
        }
        Ok(ProbVolume {
            geom,
            channels,
            kind,
            schema: None,
            data,
        })
    }

    /// Builds a PROBS volume, checking range and per-voxel normalization.
    pub fn probs(geom: Geometry, channels: usize, data: Vec<f64>) -> Result<Self> {
        let v = ProbVolume::new(geom, channels, ProbKind::Probs, data)?;
        v.check_simplex(1e-5)?;
        Ok(v)
    }

    pub fn zeros(geom: Geometry, channels: usize, kind: ProbKind) -> Self {
        ProbVolume {
            data: vec![0.0; channels * geom.nvox()],
            geom,
            channels,
            kind,
            schema: None,
        }
    }

    pub fn geometry(&self) -> &Geometry {
        &self.geom
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn kind(&self) -> ProbKind {
        self.kind
    }

    pub fn schema(&self) -> Option<LabelSchema> {
        self.schema
    }

    pub fn with_schema(mut self, schema: LabelSchema) -> Self {
        self.schema = Some(schema);
        self
    }

    pub fn nvox(&self) -> usize {
        self.geom.nvox()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.nvox();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.nvox();
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn at(&self, c: usize, v: usize) -> f64 {
        self.data[c * self.nvox() + v]
    }

    /// Verifies every value is in `[0, 1]` and each voxel sums to one.
    pub fn check_simplex(&self, tol: f64) -> Result<()> {
        if self.kind != ProbKind::Probs {
            return Err(Error::NotProbabilities);
        }
        let n = self.nvox();
        for v in 0..n {
            let mut sum = 0.0;
            for c in 0..self.channels {
                let q = self.data[c * n + v];
                if !(-tol..=1.0 + tol).contains(&q) {
                    return Err(Error::NotProbabilities);
                }
                sum += q;
            }
            if (sum - 1.0).abs() > tol {
                return Err(Error::NotProbabilities);
            }
        }
        Ok(())
    }
}

/// Either kind of volume an MVOL file can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Scalar(ScalarVolume),
    Label(LabelVolume),
}

impl Volume {
    pub fn into_scalar(self) -> Result<ScalarVolume> {
        match self {
            Volume::Scalar(v) => Ok(v),
            Volume::Label(_) => Err(Error::InvalidVolume("expected a scalar volume".into())),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume> {
        match self {
            Volume::Label(v) => Ok(v),
            Volume::Scalar(_) => Err(Error::InvalidVolume("expected a label volume".into())),
        }
    }
}

impl From<ScalarVolume> for Volume {
    fn from(v: ScalarVolume) -> Self {
        Volume::Scalar(v)
    }
}

impl From<LabelVolume> for Volume {
    fn from(v: LabelVolume) -> Self {
        Volume::Label(v)
    }
}

fn encode_header(dtype: u8, geom: &Geometry) -> Vec<u8> {
    let mut out = Vec::with_capacity(MVOL_HEADER_LEN);
    out.extend_from_slice(&MVOL_MAGIC);
    out.push(dtype);
    for &d in &geom.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &s in &geom.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    debug_assert_eq!(out.len(), MVOL_HEADER_LEN);
    out
}

/// Serializes a volume to MVOL bytes.
pub fn encode_mvol(volume: &Volume) -> Vec<u8> {
    match volume {
        Volume::Scalar(v) => {
            let mut out = encode_header(DTYPE_F32, &v.geom);
            out.reserve(v.data.len() * 4);
            for x in &v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
            out
        }
        Volume::Label(v) => {
            let mut out = encode_header(DTYPE_U8, &v.geom);
            out.extend_from_slice(&v.data);
            out
        }
    }
}

fn le_u32(b: &[u8]) -> u32 {
    u32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

fn le_f32(b: &[u8]) -> f32 {
    f32::from_le_bytes([b[0], b[1], b[2], b[3]])
}

/// Parses MVOL bytes. Label volumes come back tagged with the full stage-3 schema.
pub fn decode_mvol(bytes: &[u8]) -> Result<Volume> {
    if bytes.len() < MVOL_MAGIC.len() || bytes[..MVOL_MAGIC.len()] != MVOL_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < MVOL_HEADER_LEN {
        return Err(Error::TruncatedFile {
            expected: MVOL_HEADER_LEN,
            found: bytes.len(),
        });
    }
    let dtype = bytes[6];
    let dims = [
        le_u32(&bytes[7..]) as usize,
        le_u32(&bytes[11..]) as usize,
        le_u32(&bytes[15..]) as usize,
    ];
    let spacing = [le_f32(&bytes[19..]), le_f32(&bytes[23..]), le_f32(&bytes[27..])];
    let elem = match dtype {
        DTYPE_F32 => 4,
        DTYPE_U8 => 1,
        other => return Err(Error::UnknownDtype(other)),
    };
    let geom = Geometry::new(dims, spacing)?;
    let payload = &bytes[MVOL_HEADER_LEN..];
    let expected = geom.nvox() * elem;
    if payload.len() < expected {
        return Err(Error::TruncatedFile {
            expected,
            found: payload.len(),
        });
    }
    let payload = &payload[..expected];
    match dtype {
        DTYPE_F32 => {
            let data = payload.chunks_exact(4).map(le_f32).collect();
            Ok(Volume::Scalar(ScalarVolume::new(geom, data)?))
        }
        _ => Ok(Volume::Label(LabelVolume::new(
            geom,
            LabelSchema::Stage3,
            payload.to_vec(),
        )?)),
    }
}

pub fn read_mvol(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_mvol(&bytes)
}

pub fn write_mvol(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_mvol(volume))
        .map_err(|e| Error::io(path, e))
}

/// Per-case metadata stored next to an MVOL file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseMeta {
    pub subgroup: Subgroup,
    pub case_id: String,
}

/// `<dir>/<name>.mvol` -> `<dir>/<name>.meta.json`
pub fn sidecar_path(path: impl AsRef<Path>) -> PathBuf {
    path.as_ref().with_extension("meta.json")
}

pub fn read_sidecar(path: impl AsRef<Path>) -> Result<CaseMeta> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_sidecar(path: impl AsRef<Path>, meta: &CaseMeta) -> Result<()> {
    let side = sidecar_path(path);
    let text = serde_json::to_string(meta)?;
    fs::write(&side, text).map_err(|e| Error::io(&side, e))
}

fn source_index(out_i: usize, out_spacing: f32, src_spacing: f32) -> f64 {
    out_i as f64 * out_spacing as f64 / src_spacing as f64
}

/// Trilinear resampling onto a new grid, clamping samples outside the source.
pub fn resample_trilinear(src: &ScalarVolume, out_dims: [usize; 3], out_spacing: [f32; 3]) -> Result<ScalarVolume> {
    let out = Geometry::new(out_dims, out_spacing)?;
    if out == src.geom {
        return Ok(src.clone());
    }
    let sp = src.geom.spacing;
    let vol = ScalarVolume::from_fn(out, |i, j, k| {
        src.sample_trilinear([
            source_index(i, out_spacing[0], sp[0]),
            source_index(j, out_spacing[1], sp[1]),
            source_index(k, out_spacing[2], sp[2]),
        ]) as f32
    });
    Ok(vol)
}

/// Nearest-neighbor resampling for label volumes; never invents codes.
pub fn resample_nearest(src: &LabelVolume, out_dims: [usize; 3], out_spacing: [f32; 3]) -> Result<LabelVolume> {
    let out = Geometry::new(out_dims, out_spacing)?;
    if out == src.geom {
        return Ok(src.clone());
    }
    let sp = src.geom.spacing;
    let mut data = Vec::with_capacity(out.nvox());
    for k in 0..out_dims[2] {
        for j in 0..out_dims[1] {
            for i in 0..out_dims[0] {
                data.push(src.sample_nearest([
                    source_index(i, out_spacing[0], sp[0]),
                    source_index(j, out_spacing[1], sp[1]),
                    source_index(k, out_spacing[2], sp[2]),
                ]));
            }
        }
    }
    Ok(LabelVolume {
        geom: out,
        schema: src.schema,
        data,
    })
}

/// One channel per label code, 1 where the voxel carries that code.
pub fn one_hot(labels: &LabelVolume, channels: usize) -> Result<ProbVolume> {
    let n = labels.geom.nvox();
    let mut data = vec![0.0; channels * n];
    for (v, &c) in labels.data.iter().enumerate() {
        if c as usize >= channels {
            return Err(Error::CodeOutOfRange { code: c, channels });
        }
        data[c as usize * n + v] = 1.0;
    }
    ProbVolume::new(labels.geom, channels, ProbKind::Probs, data)
}

/// Per-voxel argmax; ties go to the lowest channel index.
///
/// The result carries the volume's schema if it has one, otherwise the
/// schema implied by the channel count.
pub fn argmax_labels(p: &ProbVolume) -> LabelVolume {
    let n = p.nvox();
    let mut best = p.channel(0).to_vec();
    let mut label = vec![0u8; n];
    for c in 1..p.channels {
        for (v, &x) in p.channel(c).iter().enumerate() {
            if x > best[v] {
                best[v] = x;
                label[v] = c as u8;
            }
        }
    }
    let schema = p
        .schema
        .or_else(|| LabelSchema::from_channels(p.channels))
        .unwrap_or(LabelSchema::Stage3);
    LabelVolume {
        geom: p.geom,
        schema,
        data: label,
    }
}

/// Shannon entropy (nats) of the per-voxel class distribution.
pub fn entropy_map(p: &ProbVolume) -> Result<ScalarVolume> {
    if p.kind != ProbKind::Probs {
        return Err(Error::NotProbabilities);
    }
    let n = p.nvox();
    let mut h = vec![0.0f64; n];
    for c in 0..p.channels {
        for (v, &q) in p.channel(c).iter().enumerate() {
            if q > 0.0 {
                h[v] -= q * q.ln();
            }
        }
    }
    ScalarVolume::new(p.geom, h.into_iter().map(|x| x.max(0.0) as f32).collect())
}
