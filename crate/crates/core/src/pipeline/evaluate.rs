//! Scoring prediction folders against reference labels.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::predict::{members_path, MemberVolumes};
use super::train::list_volumes;
use crate::error::{Error, Result};
use crate::hierarchy::{to_eval_labels, LabelSchema, EVAL_LABELS};
use crate::metrics::{build_report, cases_csv, CaseMetrics, CohortReport, LabelReport, MeanRow};
use crate::postprocess::{postprocess_pipeline, PostprocessConfig};
use crate::volume::{read_mvol, read_sidecar, LabelVolume};

/// Change of every reported mean (post − pre) for one label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelDifference {
    pub label: u8,
    pub name: String,
    #[serde(flatten)]
    pub row: MeanRow,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceReport {
    pub labels: Vec<LabelDifference>,
    pub mean_over_labels: MeanRow,
}

fn sub(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    Some(a? - b?)
}

fn label_row(l: &LabelReport) -> MeanRow {
    MeanRow {
        dsc: l.dsc.mean,
        hd: l.hd.mean,
        assd: l.assd.mean,
        cc: l.volume.map(|v| v.cc),
        mae: l.volume.map(|v| v.mae),
        loa: l.volume.map(|v| v.loa),
        crps: l.volume.map(|v| v.crps),
    }
}

fn diff_row(post: &MeanRow, pre: &MeanRow) -> MeanRow {
    MeanRow {
        dsc: sub(post.dsc, pre.dsc),
        hd: sub(post.hd, pre.hd),
        assd: sub(post.assd, pre.assd),
        cc: sub(post.cc, pre.cc),
        mae: sub(post.mae, pre.mae),
        loa: sub(post.loa, pre.loa),
        crps: sub(post.crps, pre.crps),
    }
}

/// `post − pre` for every label and the mean-over-labels row.
pub fn difference(pre: &CohortReport, post: &CohortReport) -> DifferenceReport {
    let labels = post
        .labels
        .iter()
        .zip(&pre.labels)
        .map(|(b, a)| LabelDifference {
            label: b.label,
            name: b.name.clone(),
            row: diff_row(&label_row(b), &label_row(a)),
        })
        .collect();
    DifferenceReport {
        labels,
        mean_over_labels: diff_row(&post.mean_over_labels, &pre.mean_over_labels),
    }
}

/// Reference and predicted labels of one case.
#[derive(Debug, Clone)]
pub struct EvalCase {
    pub gt: LabelVolume,
    pub pred: LabelVolume,
    pub meta: crate::volume::CaseMeta,
    pub members: Option<MemberVolumes>,
}

/// Pairs every reference volume in `gt_dir` with the prediction of the same
/// file name in `pred_dir`.
pub fn load_pairs(pred_dir: &Path, gt_dir: &Path) -> Result<Vec<EvalCase>> {
    list_volumes(gt_dir)?
        .into_iter()
        .map(|gp| {
            let meta = read_sidecar(&gp)?;
            let pp = pred_dir.join(gp.file_name().expect("listed file"));
            if !pp.exists() {
                return Err(Error::MissingCase(meta.case_id));
            }
            let gt = read_mvol(&gp)?.into_labels()?.with_schema(LabelSchema::Stage3)?;
            let pred = read_mvol(&pp)?.into_labels()?;
            let mp = members_path(&pp);
            let members = if mp.exists() {
                let text = fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
                Some(serde_json::from_str(&text)?)
            } else {
                None
            };
            Ok(EvalCase { gt, pred, meta, members })
        })
        .collect()
}

/// Per-case metrics of `preds` (one per case, stage-3 codes).
pub fn score(cases: &[EvalCase], preds: &[LabelVolume]) -> Result<Vec<CaseMetrics>> {
    cases
        .iter()
        .zip(preds)
        .map(|(c, p)| {
            let p = to_eval_labels(p.clone())?;
            let mut m = CaseMetrics::compute(&c.meta.case_id, c.meta.subgroup, &p, &c.gt, &EVAL_LABELS)?;
            if let Some(mv) = &c.members {
                for l in &mut m.labels {
                    l.ensemble_ml = mv.volumes_ml.iter().map(|v| v[l.label as usize]).collect();
                }
            }
            Ok(m)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub cases: Vec<CaseMetrics>,
    pub report: CohortReport,
    /// With ablation: the scores after post-processing and their difference.
    pub ablation: Option<(Vec<CaseMetrics>, CohortReport, DifferenceReport)>,
}

fn write_report(dir: &Path, cases: &[CaseMetrics], report: &CohortReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("cases.csv");
    fs::write(&csv, cases_csv(cases)).map_err(|e| Error::io(&csv, e))?;
    let json = dir.join("report.json");
    fs::write(&json, serde_json::to_string_pretty(report)?).map_err(|e| Error::io(&json, e))
}

/// Scores `pred_dir` against `gt_dir` and writes `cases.csv` and
/// `report.json` into `report_dir`. With `ablate`, the predictions are taken
/// as raw network output: they are scored as given (`pre/`), after
/// post-processing (`post/`), and the change is written to
/// `difference.json`.
pub fn evaluate(
    pred_dir: &Path,
    gt_dir: &Path,
    report_dir: &Path,
    ablate: Option<&PostprocessConfig>,
) -> Result<Evaluation> {
    let pairs = load_pairs(pred_dir, gt_dir)?;
    let preds: Vec<LabelVolume> = pairs.iter().map(|c| c.pred.clone()).collect();
    let cases = score(&pairs, &preds)?;
    let report = build_report(&cases, &EVAL_LABELS);
    let Some(pp) = ablate else {
        write_report(report_dir, &cases, &report)?;
        return Ok(Evaluation {
            cases,
            report,
            ablation: None,
        });
    };
    let post_preds: Vec<LabelVolume> = preds.iter().map(|p| postprocess_pipeline(p, pp)).collect();
    let post_cases = score(&pairs, &post_preds)?;
    let post_report = build_report(&post_cases, &EVAL_LABELS);
    let diff = difference(&report, &post_report);
    write_report(&report_dir.join("pre"), &cases, &report)?;
    write_report(&report_dir.join("post"), &post_cases, &post_report)?;
    let dp = report_dir.join("difference.json");
    fs::write(&dp, serde_json::to_string_pretty(&diff)?).map_err(|e| Error::io(&dp, e))?;
    Ok(Evaluation {
        cases,
        report,
        ablation: Some((post_cases, post_report, diff)),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::{Subgroup, MVO};
    use crate::pipeline::phantom::{corpus_spec, generate_phantom};
    use crate::pipeline::CorpusConfig;
    use crate::volume::{write_mvol, write_sidecar, CaseMeta};

    fn write_case(dir: &Path, name: &str, lab: &LabelVolume, sg: Subgroup) {
        fs::create_dir_all(dir).unwrap();
        let p = dir.join(format!("{name}.mvol"));
        write_mvol(&lab.clone().into(), &p).unwrap();
        write_sidecar(
            &p,
            &CaseMeta {
                subgroup: sg,
                case_id: name.into(),
            },
        )
        .unwrap();
    }

    #[test]
    fn perfect_predictions() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig::default();
        for i in 0..3 {
            let (_, lab, sg) = generate_phantom(&corpus_spec(&cfg, i).unwrap()).unwrap();
            write_case(&dir.path().join("gt"), &format!("c{i}"), &lab, sg);
            write_case(&dir.path().join("pred"), &format!("c{i}"), &lab, sg);
        }
        let ev = evaluate(&dir.path().join("pred"), &dir.path().join("gt"), &dir.path().join("rep"), None).unwrap();
        for l in &ev.report.labels {
            assert_eq!(l.dsc.mean, Some(100.0));
            if l.label != MVO {
                assert_eq!(l.hd.mean, Some(0.0));
                assert_eq!(l.assd.mean, Some(0.0));
                assert!((l.volume.unwrap().cc - 1.0).abs() < 1e-12);
            }
        }
        // case 0 is the only one that can carry MVO; the others are undefined
        let mvo = ev.report.labels.iter().find(|l| l.label == MVO).unwrap();
        assert!(mvo.hd.undefined >= 2);
        assert!(dir.path().join("rep/report.json").exists());
        assert!(dir.path().join("rep/cases.csv").exists());
    }

    #[test]
    fn ablation_difference_is_post_minus_pre() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig::default();
        for i in 0..3 {
            let (_, lab, sg) = generate_phantom(&corpus_spec(&cfg, i).unwrap()).unwrap();
            let mut noisy = lab.data().to_vec();
            noisy[0] = 2;
            noisy[40] = 3;
            write_case(&dir.path().join("gt"), &format!("c{i}"), &lab, sg);
            write_case(&dir.path().join("pred"), &format!("c{i}"), &lab.with_data(noisy).unwrap(), sg);
        }
        let ev = evaluate(
            &dir.path().join("pred"),
            &dir.path().join("gt"),
            &dir.path().join("rep"),
            Some(&PostprocessConfig::default()),
        )
        .unwrap();
        let (_, post, diff) = ev.ablation.unwrap();
        for ((d, b), a) in diff.labels.iter().zip(&post.labels).zip(&ev.report.labels) {
            assert_eq!(d.row.dsc, Some(b.dsc.mean.unwrap() - a.dsc.mean.unwrap()));
        }
        assert!(dir.path().join("rep/difference.json").exists());
    }

    #[test]
    fn missing_prediction() {
        let dir = tempfile::tempdir().unwrap();
        let g = crate::volume::Geometry::new([4, 4, 4], [1.0; 3]).unwrap();
        write_case(&dir.path().join("gt"), "x", &LabelVolume::background(g, LabelSchema::Stage3), Subgroup::M1);
        fs::create_dir_all(dir.path().join("pred")).unwrap();
        assert!(matches!(
            evaluate(&dir.path().join("pred"), &dir.path().join("gt"), &dir.path().join("r"), None),
            Err(Error::MissingCase(_))
        ));
    }
}
