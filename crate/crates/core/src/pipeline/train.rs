//! Pair-sampled, augmented, EMA-tracked training of one or more cascades.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::PipelineConfig;
use crate::augment::{augment_pair, sample_params};
use crate::error::{Error, Result};
use crate::hierarchy::{contains_mvo, LabelSchema, Subgroup};
use crate::net::checkpoint::Checkpoint;
use crate::net::{backward_and_step, record_sample, CascadeModel, OptimizerState, Tensor5};
use crate::volume::{read_mvol, read_sidecar, LabelVolume, ScalarVolume};

/// One image with its reference labels on the acquisition grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub id: String,
    pub subgroup: Subgroup,
    pub image: ScalarVolume,
    pub labels: LabelVolume,
}

/// `*.mvol` files of `dir`, sorted by name.
pub fn list_volumes(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "mvol"))
        .collect();
    out.sort();
    Ok(out)
}

/// Reads `<dir>/images/*.mvol` with matching `<dir>/labels/*.mvol`.
pub fn load_cases(dir: impl AsRef<Path>) -> Result<Vec<Case>> {
    let dir = dir.as_ref();
    list_volumes(&dir.join("images"))?
        .into_iter()
        .map(|ip| {
            let name = ip.file_name().expect("listed file");
            let lp = dir.join("labels").join(name);
            let meta = read_sidecar(&ip)?;
            if !lp.exists() {
                return Err(Error::MissingCase(format!("labels for {}", meta.case_id)));
            }
            let image = read_mvol(&ip)?.into_scalar()?;
            let labels = read_mvol(&lp)?.into_labels()?.with_schema(LabelSchema::Stage3)?;
            image.geometry().ensure_same(labels.geometry())?;
            Ok(Case {
                id: meta.case_id,
                subgroup: meta.subgroup,
                image,
                labels,
            })
        })
        .collect()
}

/// Cases split by whether their labels contain MVO.
#[derive(Debug, Clone)]
pub struct PairPools {
    pub with_mvo: Vec<usize>,
    pub without_mvo: Vec<usize>,
}

impl PairPools {
    pub fn new(cases: &[Case]) -> Result<Self> {
        let (with_mvo, without_mvo): (Vec<usize>, Vec<usize>) =
            (0..cases.len()).partition(|&i| contains_mvo(&cases[i].labels));
        if with_mvo.is_empty() {
            return Err(Error::EmptyPool("no training case contains MVO".into()));
        }
        if without_mvo.is_empty() {
            return Err(Error::EmptyPool("every training case contains MVO".into()));
        }
        Ok(PairPools { with_mvo, without_mvo })
    }
}

/// Indices of one case with MVO and one without, each uniform in its pool.
pub fn sample_training_pair<R: Rng + ?Sized>(pools: &PairPools, rng: &mut R) -> (usize, usize) {
    let a = pools.with_mvo[rng.random_range(0..pools.with_mvo.len())];
    let b = pools.without_mvo[rng.random_range(0..pools.without_mvo.len())];
    (a, b)
}

pub fn volume_to_tensor(v: &ScalarVolume) -> Tensor5<f32> {
    let [nx, ny, nz] = v.dims();
    Tensor5::from_vec([1, 1, nx, ny, nz], v.data().to_vec()).expect("sizes agree")
}

/// Batch-mean losses averaged over one logging window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub total: f64,
    pub stage: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LogRow>,
}

/// Seeded generator for ensemble member `member`.
pub fn member_rng(seed: u64, member: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(member as u64);
    rng
}

pub fn checkpoint_path(dir: &Path, member: usize) -> PathBuf {
    dir.join(format!("model_{member}.ckpt"))
}

/// Trains ensemble member `member` on `cases`. Writes checkpoints and a CSV
/// log into `out` when given.
pub fn train_member(cfg: &PipelineConfig, cases: &[Case], member: usize, out: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pools = PairPools::new(cases)?;
    let mut rng = member_rng(cfg.train.seed, member);
    let mut model = CascadeModel::<f32>::init(cfg.net, &mut rng)?;
    let mut opt = OptimizerState::new(&model, cfg.train.adam)?;
    let k = LabelSchema::Stage3.num_labels();
    let mut log = Vec::new();
    let mut window = (0usize, 0.0f64, [0.0f64; 3]);
    let started = Instant::now();
    let save = |model: &CascadeModel<f32>, opt: &OptimizerState<f32>| -> Result<Checkpoint> {
        let ck = Checkpoint {
            step: opt.step,
            model: model.clone(),
            ema: Some(opt.ema.clone()),
        };
        if let Some(dir) = out {
            ck.save(checkpoint_path(dir, member))?;
        }
        Ok(ck)
    };
    for it in 1..=cfg.train.iterations {
        let (a, b) = sample_training_pair(&pools, &mut rng);
        let mut tapes = Vec::with_capacity(2);
        for &i in &[a, b] {
            let case = &cases[i];
            let p = sample_params(&mut rng, k, &cfg.augment);
            let (img, lab) = augment_pair(&case.image, &case.labels, &p, cfg.grid.dims, cfg.grid.spacing)?;
            tapes.push(record_sample(&model, &volume_to_tensor(&img), &lab, &cfg.train.loss, true, &mut rng)?);
        }
        window.0 += 1;
        window.1 += tapes.iter().map(|t| t.total).sum::<f64>() / tapes.len() as f64;
        for s in 0..3 {
            window.2[s] += tapes.iter().map(|t| t.per_stage[s]).sum::<f64>() / tapes.len() as f64;
        }
        backward_and_step(&mut model, &mut opt, &tapes)?;
        if it % cfg.train.log_every == 0 || it == cfg.train.iterations {
            let n = window.0 as f64;
            let row = LogRow {
                iteration: it,
                total: window.1 / n,
                stage: window.2.map(|v| v / n),
            };
            log::info!(
                "member {member} iter {it} loss {:.4} [{:.4} {:.4} {:.4}] {:.2}s/iter",
                row.total,
                row.stage[0],
                row.stage[1],
                row.stage[2],
                started.elapsed().as_secs_f64() / it as f64
            );
            log.push(row);
            window = (0, 0.0, [0.0; 3]);
        }
        if cfg.train.checkpoint_every > 0 && it % cfg.train.checkpoint_every == 0 && it < cfg.train.iterations {
            save(&model, &opt)?;
        }
    }
    let checkpoint = save(&model, &opt)?;
    if let Some(dir) = out {
        write_log(&dir.join(format!("model_{member}.log.csv")), &log)?;
    }
    Ok(TrainOutcome { checkpoint, log })
}

fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("iteration,total,stage1,stage2,stage3\n");
    for r in rows {
        text.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            r.iteration, r.total, r.stage[0], r.stage[1], r.stage[2]
        ));
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Trains every ensemble member on `<corpus>/train`, one thread per member.
pub fn train_ensemble(cfg: &PipelineConfig, out: &Path) -> Result<Vec<TrainOutcome>> {
    cfg.validate()?;
    let cases = load_cases(cfg.paths.corpus.join("train"))?;
    PairPools::new(&cases)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..cfg.ensemble_size)
            .map(|m| {
                let cases = &cases;
                s.spawn(move || train_member(cfg, cases, m, Some(out)))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("training thread panicked"))
            .collect()
    })
}
