//! Overlap, surface-distance and volume-agreement metrics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{label_name, Subgroup};
use crate::volume::{Geometry, LabelVolume};

/// Foreground mask on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    pub geometry: Geometry,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(geometry: Geometry, data: Vec<bool>) -> Result<Self> {
        if data.len() != geometry.nvox() {
            return Err(Error::ShapeMismatch(format!(
                "{} mask values for {} voxels",
                data.len(),
                geometry.nvox()
            )));
        }
        Ok(BinaryMask { geometry, data })
    }

    pub fn from_labels(labels: &LabelVolume, code: u8) -> Self {
        BinaryMask {
            geometry: *labels.geometry(),
            data: labels.mask(code),
        }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Foreground voxels with at least one face neighbour outside the mask or
    /// outside the grid.
    pub fn boundary(&self) -> Vec<bool> {
        let [nx, ny, nz] = self.geometry.dims;
        let (sy, sz) = (nx, nx * ny);
        let m = &self.data;
        (0..m.len())
            .map(|v| {
                if !m[v] {
                    return false;
                }
                let [i, j, k] = self.geometry.coords(v);
                i == 0
                    || j == 0
                    || k == 0
                    || i + 1 == nx
                    || j + 1 == ny
                    || k + 1 == nz
                    || !m[v - 1]
                    || !m[v + 1]
                    || !m[v - sy]
                    || !m[v + sy]
                    || !m[v - sz]
                    || !m[v + sz]
            })
            .collect()
    }
}

/// Dice overlap in percent; two empty masks score 100.
pub fn dice(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    pred.geometry.ensure_same(&gt.geometry)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (p + g) as f64)
}

/// Symmetric surface distances between two masks, in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceDistances {
    /// Full Hausdorff distance.
    pub hd: f64,
    /// Larger of the two directed 95th percentiles.
    pub hd95: f64,
    /// Mean of all directed distances pooled over both surfaces.
    pub assd: f64,
}

/// Squared distance along one axis to the nearest finite sample of `f`,
/// lower envelope of parabolas `f[q] + (s·(p − q))²`.
fn envelope_1d(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    v.clear();
    z.clear();
    let key = |q: usize| f[q] + (q as f64 * s).powi(2);
    for q in (0..f.len()).filter(|&q| f[q].is_finite()) {
        loop {
            let Some(&r) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let x = (key(q) - key(r)) / (2.0 * s * s * (q - r) as f64);
            if x <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(x);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let q = v[k];
        *o = f[q] + ((p as f64 - q as f64) * s).powi(2);
    }
}

/// Exact squared Euclidean distance (mm²) from every voxel center to the
/// nearest `seed` voxel center; infinite when there is no seed.
pub fn squared_distance_transform(seeds: &[bool], geometry: &Geometry) -> Vec<f64> {
    let [nx, ny, nz] = geometry.dims;
    let mut d: Vec<f64> = seeds.iter().map(|&s| if s { 0.0 } else { f64::INFINITY }).collect();
    let strides = [1, nx, nx * ny];
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let n = geometry.dims[axis];
        let s = geometry.spacing[axis] as f64;
        let stride = strides[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        for start in 0..nx * ny * nz {
            if (start / stride) % n != 0 {
                continue;
            }
            for (t, l) in line.iter_mut().enumerate() {
                *l = d[start + t * stride];
            }
            envelope_1d(&line, s, &mut out, &mut v, &mut z);
            for (t, &o) in out.iter().enumerate() {
                d[start + t * stride] = o;
            }
        }
    }
    d
}

fn directed(from: &[bool], to_dt: &[f64]) -> Vec<f64> {
    from.iter()
        .zip(to_dt)
        .filter(|(&b, _)| b)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

fn percentile_95(mut d: Vec<f64>) -> f64 {
    d.sort_by(f64::total_cmp);
    let pos = 0.95 * (d.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(d.len() - 1);
    d[lo] + (d[hi] - d[lo]) * (pos - lo as f64)
}

/// Boundary-voxel surface distances; `None` when either mask is empty.
pub fn surface_distances(pred: &BinaryMask, gt: &BinaryMask) -> Result<Option<SurfaceDistances>> {
    pred.geometry.ensure_same(&gt.geometry)?;
    let (bp, bg) = (pred.boundary(), gt.boundary());
    if !bp.contains(&true) || !bg.contains(&true) {
        return Ok(None);
    }
    let dp = directed(&bp, &squared_distance_transform(&bg, &gt.geometry));
    let dg = directed(&bg, &squared_distance_transform(&bp, &pred.geometry));
    let max = |d: &[f64]| d.iter().copied().fold(0.0, f64::max);
    let n = (dp.len() + dg.len()) as f64;
    let assd = (dp.iter().sum::<f64>() + dg.iter().sum::<f64>()) / n;
    Ok(Some(SurfaceDistances {
        hd: max(&dp).max(max(&dg)),
        assd,
        hd95: percentile_95(dp).max(percentile_95(dg)),
    }))
}

/// Mask volume in ml.
pub fn volume_ml(mask: &BinaryMask) -> f64 {
    mask.count() as f64 * mask.geometry.voxel_volume() / 1000.0
}

/// Cohort-level agreement of predicted and reference volumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VolumeStats {
    pub cc: f64,
    pub mae: f64,
    pub loa: f64,
    pub crps: f64,
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Sample standard deviation; 0 for a single value.
fn sample_std(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Empirical-ensemble CRPS of members `v` against truth `g`.
pub fn crps(v: &[f64], g: f64) -> f64 {
    let n = v.len() as f64;
    let spread: f64 = v.iter().flat_map(|a| v.iter().map(move |b| (a - b).abs())).sum();
    v.iter().map(|a| (a - g).abs()).sum::<f64>() / n - spread / (2.0 * n * n)
}

/// Pearson correlation, mean absolute error, 1.96 · sample sd of the
/// differences, and mean CRPS. Without ensemble volumes each case's CRPS is
/// `|pred − gt|`.
pub fn cohort_volume_stats(pairs: &[(f64, f64)], ensemble: Option<&[Vec<f64>]>) -> Result<VolumeStats> {
    if pairs.len() < 2 {
        return Err(Error::TooFewCases {
            needed: 2,
            got: pairs.len(),
        });
    }
    if let Some(e) = ensemble {
        if e.len() != pairs.len() || e.iter().any(Vec::is_empty) {
            return Err(Error::ShapeMismatch("one non-empty ensemble list per case required".into()));
        }
    }
    let p: Vec<f64> = pairs.iter().map(|x| x.0).collect();
    let g: Vec<f64> = pairs.iter().map(|x| x.1).collect();
    let (mp, mg) = (mean(&p), mean(&g));
    let cov: f64 = p.iter().zip(&g).map(|(a, b)| (a - mp) * (b - mg)).sum();
    let vp: f64 = p.iter().map(|a| (a - mp).powi(2)).sum();
    let vg: f64 = g.iter().map(|b| (b - mg).powi(2)).sum();
    if vp == 0.0 || vg == 0.0 {
        return Err(Error::ZeroVariance);
    }
    let diffs: Vec<f64> = pairs.iter().map(|(a, b)| a - b).collect();
    let crps_mean = match ensemble {
        Some(e) => mean(&e.iter().zip(&g).map(|(v, &t)| crps(v, t)).collect::<Vec<_>>()),
        None => mean(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>()),
    };
    Ok(VolumeStats {
        cc: cov / (vp * vg).sqrt(),
        mae: mean(&diffs.iter().map(|d| d.abs()).collect::<Vec<_>>()),
        loa: 1.96 * sample_std(&diffs),
        crps: crps_mean,
    })
}

/// Metrics of one label in one case. Distances are `None` (UNDEFINED) when
/// either mask is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: u8,
    pub dsc: f64,
    pub hd: Option<f64>,
    pub hd95: Option<f64>,
    pub assd: Option<f64>,
    pub pred_ml: f64,
    pub gt_ml: f64,
    /// Per-member predicted volumes, empty without an ensemble.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ensemble_ml: Vec<f64>,
}

impl LabelMetrics {
    pub fn compute(pred: &BinaryMask, gt: &BinaryMask, label: u8) -> Result<Self> {
        let sd = surface_distances(pred, gt)?;
        Ok(LabelMetrics {
            label,
            dsc: dice(pred, gt)?,
            hd: sd.map(|s| s.hd),
            hd95: sd.map(|s| s.hd95),
            assd: sd.map(|s| s.assd),
            pred_ml: volume_ml(pred),
            gt_ml: volume_ml(gt),
            ensemble_ml: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub case_id: String,
    pub subgroup: Subgroup,
    pub labels: Vec<LabelMetrics>,
}

impl CaseMetrics {
    /// Metrics for each code in `labels`, comparing label volumes directly.
    pub fn compute(case_id: &str, subgroup: Subgroup, pred: &LabelVolume, gt: &LabelVolume, labels: &[u8]) -> Result<Self> {
        let labels = labels
            .iter()
            .map(|&c| LabelMetrics::compute(&BinaryMask::from_labels(pred, c), &BinaryMask::from_labels(gt, c), c))
            .collect::<Result<_>>()?;
        Ok(CaseMetrics {
            case_id: case_id.to_string(),
            subgroup,
            labels,
        })
    }
}

/// Mean and sample std over the cases where a metric is defined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n: usize,
    pub undefined: usize,
}

impl Summary {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let mut defined = Vec::new();
        let mut undefined = 0;
        for v in values {
            match v {
                Some(x) => defined.push(x),
                None => undefined += 1,
            }
        }
        let (mean, std) = if defined.is_empty() {
            (None, None)
        } else {
            (Some(mean(&defined)), Some(sample_std(&defined)))
        };
        Summary {
            mean,
            std,
            n: defined.len(),
            undefined,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelReport {
    pub label: u8,
    pub name: String,
    pub dsc: Summary,
    pub hd: Summary,
    pub assd: Summary,
    /// `None` when the statistics are undefined (fewer than two cases or a
    /// constant volume list).
    pub volume: Option<VolumeStats>,
}

/// Mean of the per-label values that are present.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanRow {
    pub dsc: Option<f64>,
    pub hd: Option<f64>,
    pub assd: Option<f64>,
    pub cc: Option<f64>,
    pub mae: Option<f64>,
    pub loa: Option<f64>,
    pub crps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortReport {
    pub cases: usize,
    pub labels: Vec<LabelReport>,
    pub mean_over_labels: MeanRow,
}

fn mean_present(values: impl IntoIterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.into_iter().flatten().collect();
    (!v.is_empty()).then(|| mean(&v))
}

/// Aggregates per-case metrics for `labels`.
pub fn build_report(cases: &[CaseMetrics], labels: &[u8]) -> CohortReport {
    let per_label: Vec<LabelReport> = labels
        .iter()
        .map(|&code| {
            let rows: Vec<&LabelMetrics> = cases
                .iter()
                .filter_map(|c| c.labels.iter().find(|l| l.label == code))
                .collect();
            let pairs: Vec<(f64, f64)> = rows.iter().map(|r| (r.pred_ml, r.gt_ml)).collect();
            let ens: Vec<Vec<f64>> = rows.iter().map(|r| r.ensemble_ml.clone()).collect();
            let use_ens = !ens.is_empty() && ens.iter().all(|e| !e.is_empty());
            LabelReport {
                label: code,
                name: label_name(code).to_string(),
                dsc: Summary::of(rows.iter().map(|r| Some(r.dsc))),
                hd: Summary::of(rows.iter().map(|r| r.hd)),
                assd: Summary::of(rows.iter().map(|r| r.assd)),
                volume: cohort_volume_stats(&pairs, use_ens.then_some(ens.as_slice())).ok(),
            }
        })
        .collect();
    let col = |f: &dyn Fn(&LabelReport) -> Option<f64>| mean_present(per_label.iter().map(f));
    let mean_over_labels = MeanRow {
        dsc: col(&|l| l.dsc.mean),
        hd: col(&|l| l.hd.mean),
        assd: col(&|l| l.assd.mean),
        cc: col(&|l| l.volume.map(|v| v.cc)),
        mae: col(&|l| l.volume.map(|v| v.mae)),
        loa: col(&|l| l.volume.map(|v| v.loa)),
        crps: col(&|l| l.volume.map(|v| v.crps)),
    };
    CohortReport {
        cases: cases.len(),
        labels: per_label,
        mean_over_labels,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "UNDEFINED".to_string(), |x| format!("{x:.6}"))
}

/// One row per case and label.
pub fn cases_csv(cases: &[CaseMetrics]) -> String {
    let mut out = String::from("case_id,subgroup,label,dsc,hd,hd95,assd,pred_ml,gt_ml\n");
    for c in cases {
        for l in &c.labels {
            let _ = writeln!(
                out,
                "{},{},{},{:.6},{},{},{},{:.6},{:.6}",
                c.case_id,
                c.subgroup,
                label_name(l.label),
                l.dsc,
                cell(l.hd),
                cell(l.hd95),
                cell(l.assd),
                l.pred_ml,
                l.gt_ml
            );
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], spacing: [f32; 3], on: &[[usize; 3]]) -> BinaryMask {
        let g = Geometry::new(dims, spacing).unwrap();
        let mut data = vec![false; g.nvox()];
        for &[i, j, k] in on {
            data[g.index(i, j, k)] = true;
        }
        BinaryMask::new(g, data).unwrap()
    }

    #[test]
    fn dice_examples() {
        let a = mask([4, 4, 4], [1.0; 3], &[[0, 0, 0], [1, 0, 0]]);
        let b = mask([4, 4, 4], [1.0; 3], &[[0, 0, 0]]);
        let c = mask([4, 4, 4], [1.0; 3], &[[3, 3, 3]]);
        let e = mask([4, 4, 4], [1.0; 3], &[]);
        assert_eq!(dice(&a, &a).unwrap(), 100.0);
        assert_eq!(dice(&a, &c).unwrap(), 0.0);
        assert!((dice(&a, &b).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(dice(&e, &e).unwrap(), 100.0);
        let other = mask([4, 4, 5], [1.0; 3], &[]);
        assert!(matches!(dice(&a, &other), Err(Error::GeometryMismatch(_))));
    }

    #[test]
    fn surface_examples() {
        let a = mask([5, 5, 5], [1.0; 3], &[[1, 1, 1], [2, 1, 1], [1, 2, 1]]);
        let s = surface_distances(&a, &a).unwrap().unwrap();
        assert_eq!((s.hd, s.assd), (0.0, 0.0));
        let p = mask([4, 4, 4], [1.0; 3], &[[1, 1, 1]]);
        let g = mask([4, 4, 4], [1.0; 3], &[[2, 2, 1]]);
        let s = surface_distances(&p, &g).unwrap().unwrap();
        assert!((s.hd - 2f64.sqrt()).abs() < 1e-12);
        assert!((s.assd - 2f64.sqrt()).abs() < 1e-12);
        let e = mask([4, 4, 4], [1.0; 3], &[]);
        assert_eq!(surface_distances(&p, &e).unwrap(), None);
    }

    #[test]
    fn doubling_spacing_doubles_distances() {
        let on = [[0, 0, 0], [1, 0, 0], [1, 1, 0], [3, 2, 2]];
        let on2 = [[2, 2, 1], [0, 3, 3]];
        let s1 = surface_distances(&mask([4, 4, 4], [1.0, 1.5, 2.0], &on), &mask([4, 4, 4], [1.0, 1.5, 2.0], &on2))
            .unwrap()
            .unwrap();
        let s2 = surface_distances(&mask([4, 4, 4], [2.0, 3.0, 4.0], &on), &mask([4, 4, 4], [2.0, 3.0, 4.0], &on2))
            .unwrap()
            .unwrap();
        assert_eq!(s2.hd, 2.0 * s1.hd);
        assert_eq!(s2.assd, 2.0 * s1.assd);
        assert!(s1.hd >= s1.assd);
    }

    #[test]
    fn volume_examples() {
        let g = Geometry::new([10, 10, 10], [1.0; 3]).unwrap();
        assert_eq!(volume_ml(&BinaryMask::new(g, vec![true; 1000]).unwrap()), 1.0);
        assert_eq!(volume_ml(&BinaryMask::new(g, vec![false; 1000]).unwrap()), 0.0);
        let g = Geometry::new([50, 1, 1], [1.0, 1.0, 2.0]).unwrap();
        assert!((volume_ml(&BinaryMask::new(g, vec![true; 50]).unwrap()) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn volume_stat_fixtures() {
        let s = cohort_volume_stats(&[(10.0, 12.0), (20.0, 19.0)], None).unwrap();
        assert!((s.mae - 1.5).abs() < 1e-12);
        assert!((s.loa - 1.96 * 4.5f64.sqrt()).abs() < 1e-12);
        assert!((s.loa - 4.1578).abs() < 1e-4);
        let perfect = cohort_volume_stats(&[(1.0, 1.0), (3.0, 3.0), (7.0, 7.0)], None).unwrap();
        assert_eq!((perfect.mae, perfect.loa, perfect.crps), (0.0, 0.0, 0.0));
        assert!((perfect.cc - 1.0).abs() < 1e-12);
        assert_eq!(crps(&[0.0, 2.0], 1.0), 0.5);
        assert!(matches!(cohort_volume_stats(&[(1.0, 2.0)], None), Err(Error::TooFewCases { .. })));
        assert!(matches!(cohort_volume_stats(&[(1.0, 2.0), (1.0, 3.0)], None), Err(Error::ZeroVariance)));
    }

    #[test]
    fn cc_affine_invariant() {
        let pairs = [(1.0, 2.0), (4.0, 3.5), (2.5, 2.0), (8.0, 9.0)];
        let moved: Vec<(f64, f64)> = pairs.iter().map(|(p, g)| (3.0 * p + 5.0, 3.0 * g + 5.0)).collect();
        let a = cohort_volume_stats(&pairs, None).unwrap().cc;
        let b = cohort_volume_stats(&moved, None).unwrap().cc;
        assert!((a - b).abs() < 1e-12);
    }

    fn lm(label: u8, dsc: f64, hd: Option<f64>) -> LabelMetrics {
        LabelMetrics {
            label,
            dsc,
            hd,
            hd95: hd,
            assd: hd.map(|h| h / 2.0),
            pred_ml: dsc / 10.0,
            gt_ml: dsc / 9.0,
            ensemble_ml: Vec::new(),
        }
    }

    fn case(labels: Vec<LabelMetrics>) -> CaseMetrics {
        CaseMetrics {
            case_id: "c".into(),
            subgroup: Subgroup::D8,
            labels,
        }
    }

    #[test]
    fn report_aggregation() {
        let r = build_report(&[case(vec![lm(1, 80.0, Some(3.0))])], &[1]);
        assert_eq!(r.labels[0].dsc.mean, Some(80.0));
        assert_eq!(r.labels[0].dsc.std, Some(0.0));
        assert_eq!(r.labels[0].volume, None);

        let cases: Vec<CaseMetrics> = [(70.0, Some(2.0)), (80.0, None), (90.0, Some(4.0))]
            .iter()
            .map(|&(d, h)| case(vec![lm(1, d, h), lm(2, d - 10.0, h), lm(3, d - 20.0, h), lm(4, d - 30.0, h)]))
            .collect();
        let r = build_report(&cases, &[1, 2, 3, 4]);
        assert_eq!(r.labels[0].hd.mean, Some(3.0));
        assert_eq!(r.labels[0].hd.undefined, 1);
        assert_eq!(r.labels[0].dsc.std, Some(10.0));
        let hand = (80.0 + 70.0 + 60.0 + 50.0) / 4.0;
        assert!((r.mean_over_labels.dsc.unwrap() - hand).abs() < 1e-12);
        let csv = cases_csv(&cases);
        assert_eq!(csv.lines().count(), 13);
        assert!(csv.contains("UNDEFINED"));
    }
}
