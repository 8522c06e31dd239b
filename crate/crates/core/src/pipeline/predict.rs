//! Ensemble inference with subgroup routing.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Averaging, GridConfig, PipelineConfig};
use super::train::{list_volumes, volume_to_tensor};
use crate::augment::preprocess_eval;
use crate::error::{Error, Result};
use crate::hierarchy::{select_final, to_eval_labels, LabelSchema, Subgroup};
use crate::loss::softmax_channels;
use crate::net::checkpoint::Checkpoint;
use crate::net::train::logits_to_volume;
use crate::net::CascadeModel;
use crate::postprocess::{postprocess_pipeline, PostprocessConfig};
use crate::volume::{
    argmax_labels, read_mvol, read_sidecar, resample_trilinear, write_mvol, write_sidecar, Geometry, LabelVolume,
    ProbKind, ProbVolume, ScalarVolume,
};

/// Inference weights (EMA when present) of every `*.ckpt` in `dir`, in file
/// name order.
pub fn load_ensemble(dir: impl AsRef<Path>) -> Result<Vec<CascadeModel<f32>>> {
    let dir = dir.as_ref();
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Config(format!("no checkpoints in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| Ok(Checkpoint::load(p)?.inference_model().clone()))
        .collect()
}

/// Routed prediction of one member on the network grid: softmax
/// probabilities, or raw logits for logit averaging.
fn member_output(model: &CascadeModel<f32>, x: &ScalarVolume, sg: Subgroup, averaging: Averaging) -> Result<ProbVolume> {
    let geom = *x.geometry();
    // dropout is off, the generator is never drawn from
    let out = model.forward(&volume_to_tensor(x), false, &mut ChaCha8Rng::seed_from_u64(0))?;
    let z2 = logits_to_volume(&out.p2, geom)?;
    let z3 = logits_to_volume(out.p3.as_ref().expect("stage 3 requested"), geom)?;
    let routed = select_final(&softmax_channels(&z2), &softmax_channels(&z3), sg)?;
    Ok(match averaging {
        Averaging::Probs => routed,
        Averaging::Logits => {
            let schema = routed.schema().expect("routing tags a schema");
            let z = if schema == LabelSchema::Stage3 { z3 } else { z2 };
            z.with_schema(schema)
        }
    })
}

/// Order-independent mean: per entry, members are summed in sorted order.
fn average(members: &[ProbVolume]) -> Result<ProbVolume> {
    let first = &members[0];
    let n = first.data().len();
    let mut data = Vec::with_capacity(n);
    let mut vals = vec![0.0; members.len()];
    for i in 0..n {
        for (v, m) in vals.iter_mut().zip(members) {
            *v = m.data()[i];
        }
        vals.sort_by(f64::total_cmp);
        data.push(vals.iter().sum::<f64>() / members.len() as f64);
    }
    let mut out = ProbVolume::new(*first.geometry(), first.channels(), first.kind(), data)?;
    if let Some(s) = first.schema() {
        out = out.with_schema(s);
    }
    Ok(out)
}

/// Trilinear per-channel resampling onto `target`.
pub fn resample_probs(p: &ProbVolume, target: Geometry) -> Result<ProbVolume> {
    let mut data = Vec::with_capacity(p.channels() * target.nvox());
    for c in 0..p.channels() {
        let ch = ScalarVolume::new(*p.geometry(), p.channel(c).iter().map(|&v| v as f32).collect())?;
        let r = resample_trilinear(&ch, target.dims, target.spacing)?;
        data.extend(r.data().iter().map(|&v| v as f64));
    }
    let mut out = ProbVolume::new(target, p.channels(), p.kind(), data)?;
    if let Some(s) = p.schema() {
        out = out.with_schema(s);
    }
    Ok(out)
}

/// Hard labels on `target` in stage-3 codes.
fn to_native_labels(p: &ProbVolume, target: Geometry) -> Result<LabelVolume> {
    to_eval_labels(argmax_labels(&resample_probs(p, target)?))
}

#[derive(Debug, Clone)]
pub struct EnsemblePrediction {
    /// Final labels on the input grid.
    pub labels: LabelVolume,
    /// Labels before post-processing.
    pub raw: LabelVolume,
    /// Averaged routed probabilities on the network grid.
    pub probs: ProbVolume,
    /// Per member, predicted volume (ml) of every stage-3 code.
    pub member_volumes: Vec<[f64; 5]>,
}

/// Averages the routed predictions of every model and maps them back to the
/// grid of `image`.
pub fn ensemble_predict(
    models: &[CascadeModel<f32>],
    image: &ScalarVolume,
    sg: Subgroup,
    grid: &GridConfig,
    averaging: Averaging,
    postprocess: Option<&PostprocessConfig>,
) -> Result<EnsemblePrediction> {
    let Some(first) = models.first() else {
        return Err(Error::Config("empty ensemble".into()));
    };
    if let Some(m) = models.iter().find(|m| m.config != first.config) {
        return Err(Error::ArchitectureMismatch(format!("{:?} vs {:?}", m.config, first.config)));
    }
    let started = Instant::now();
    let x = preprocess_eval(image, grid.dims, grid.spacing)?;
    let outputs: Vec<ProbVolume> = std::thread::scope(|s| {
        let handles: Vec<_> = models
            .iter()
            .map(|m| {
                let x = &x;
                s.spawn(move || member_output(m, x, sg, averaging))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("inference thread panicked")).collect::<Result<_>>()
    })?;
    let native = *image.geometry();
    let vox_ml = native.voxel_volume() / 1000.0;
    let mut member_volumes = Vec::with_capacity(outputs.len());
    for o in &outputs {
        let p = match averaging {
            Averaging::Probs => o.clone(),
            Averaging::Logits => softmax_channels(o).with_schema(o.schema().expect("tagged")),
        };
        let l = to_native_labels(&p, native)?;
        member_volumes.push(std::array::from_fn(|c| l.count(c as u8) as f64 * vox_ml));
    }
    let mut probs = average(&outputs)?;
    if averaging == Averaging::Logits {
        let schema = probs.schema().expect("tagged");
        probs = softmax_channels(&probs).with_schema(schema);
    }
    debug_assert_eq!(probs.kind(), ProbKind::Probs);
    let raw = to_native_labels(&probs, native)?;
    let labels = match postprocess {
        Some(cfg) => postprocess_pipeline(&raw, cfg),
        None => raw.clone(),
    };
    log::info!("predicted {:?} case with {} models in {:.2}s", sg, models.len(), started.elapsed().as_secs_f64());
    Ok(EnsemblePrediction {
        labels,
        raw,
        probs,
        member_volumes,
    })
}

/// Per-member label volumes stored next to a prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemberVolumes {
    pub volumes_ml: Vec<[f64; 5]>,
}

/// `<dir>/<name>.mvol` -> `<dir>/<name>.members.json`
pub fn members_path(path: impl AsRef<Path>) -> PathBuf {
    path.as_ref().with_extension("members.json")
}

/// Predicts every image in `images` into `out` (same file names, with
/// sidecars and member volumes).
pub fn predict_dir(
    models: &[CascadeModel<f32>],
    images: &Path,
    out: &Path,
    cfg: &PipelineConfig,
    postprocess: bool,
) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::new();
    for ip in list_volumes(images)? {
        let meta = read_sidecar(&ip)?;
        let img = read_mvol(&ip)?.into_scalar()?;
        let pred = ensemble_predict(
            models,
            &img,
            meta.subgroup,
            &cfg.grid,
            cfg.averaging,
            postprocess.then_some(&cfg.postprocess),
        )?;
        let op = out.join(ip.file_name().expect("listed file"));
        write_prediction(&op, &pred, &meta)?;
        written.push(op);
    }
    Ok(written)
}

pub fn write_prediction(path: &Path, pred: &EnsemblePrediction, meta: &crate::volume::CaseMeta) -> Result<()> {
    write_mvol(&pred.labels.clone().into(), path)?;
    write_sidecar(path, meta)?;
    let mp = members_path(path);
    let text = serde_json::to_string(&MemberVolumes {
        volumes_ml: pred.member_volumes.clone(),
    })?;
    fs::write(&mp, text).map_err(|e| Error::io(&mp, e))
}
