use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use careseg::hierarchy::Subgroup;
use careseg::pipeline::{self, PipelineConfig};
use careseg::postprocess::{postprocess_pipeline, BaseAt};
use careseg::volume::{read_mvol, read_sidecar, write_mvol, CaseMeta};
use careseg::Result;

#[derive(Parser)]
#[command(name = "careseg", version, about = "Cascaded refinement segmentation of LGE cardiac volumes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a preset configuration as JSON.
    Config {
        #[arg(long, default_value = "desk")]
        preset: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic phantom corpus split into train/ and val/.
    PhantomGen {
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train the ensemble on <corpus>/train.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory.
        #[arg(long)]
        out: PathBuf,
        /// Corpus directory, overriding the config.
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Predict one volume or every volume in a directory.
    Predict {
        #[arg(long)]
        models: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        /// Needed for a single file without a sidecar.
        #[arg(long)]
        subgroup: Option<Subgroup>,
        #[arg(long)]
        no_postprocess: bool,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write per-slice PNG overlays here.
        #[arg(long)]
        overlays: Option<PathBuf>,
    },
    /// Post-process a label volume.
    Postprocess {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        skip_3d: bool,
        #[arg(long)]
        skip_2d: bool,
        #[arg(long)]
        skip_topmost: bool,
        #[arg(long)]
        skip_outliers: bool,
        #[arg(long, default_value = "zmax")]
        base_at: BaseAt,
    },
    /// Score predictions against reference labels.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Report before and after post-processing plus their difference.
        #[arg(long)]
        ablate_postproc: bool,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: Option<&Path>) -> Result<PipelineConfig> {
    match path {
        Some(p) => PipelineConfig::load(p),
        None => Ok(PipelineConfig::desk()),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config { preset, out } => PipelineConfig::preset(&preset)?.save(out),
        Command::PhantomGen {
            count,
            out,
            seed,
            config,
        } => {
            let mut cfg = load_config(config.as_deref())?.corpus;
            cfg.count = count.unwrap_or(cfg.count);
            cfg.seed = seed.unwrap_or(cfg.seed);
            let written = pipeline::generate_corpus(&cfg, &out)?;
            log::info!("wrote {} phantoms to {}", written.len(), out.display());
            Ok(())
        }
        Command::Train { config, out, corpus } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(c) = corpus {
                cfg.paths.corpus = c;
            }
            let outcomes = pipeline::train_ensemble(&cfg, &out)?;
            for (m, o) in outcomes.iter().enumerate() {
                if let Some(last) = o.log.last() {
                    log::info!("member {m}: final loss {:.4}", last.total);
                }
            }
            Ok(())
        }
        Command::Predict {
            models,
            input,
            subgroup,
            no_postprocess,
            out,
            config,
            overlays,
        } => {
            let cfg = load_config(config.as_deref())?;
            let models = pipeline::load_ensemble(&models)?;
            let inputs = if input.is_dir() {
                pipeline::train::list_volumes(&input)?
            } else {
                vec![input.clone()]
            };
            let out_is_dir = input.is_dir();
            for ip in inputs {
                let meta = match subgroup {
                    Some(sg) => CaseMeta {
                        subgroup: sg,
                        case_id: ip.file_stem().unwrap_or_default().to_string_lossy().into_owned(),
                    },
                    None => read_sidecar(&ip)?,
                };
                let img = read_mvol(&ip)?.into_scalar()?;
                let pred = pipeline::ensemble_predict(
                    &models,
                    &img,
                    meta.subgroup,
                    &cfg.grid,
                    cfg.averaging,
                    (!no_postprocess).then_some(&cfg.postprocess),
                )?;
                let op = if out_is_dir {
                    std::fs::create_dir_all(&out).map_err(|e| careseg::Error::Io {
                        path: out.clone(),
                        source: e,
                    })?;
                    out.join(ip.file_name().expect("file path"))
                } else {
                    out.clone()
                };
                pipeline::predict::write_prediction(&op, &pred, &meta)?;
                if let Some(dir) = &overlays {
                    pipeline::write_overlays(&img, &pred.labels, dir, &meta.case_id)?;
                }
            }
            Ok(())
        }
        Command::Postprocess {
            input,
            out,
            skip_3d,
            skip_2d,
            skip_topmost,
            skip_outliers,
            base_at,
        } => {
            let mut cfg = careseg::postprocess::PostprocessConfig {
                disconnected_3d: !skip_3d,
                disconnected_2d: !skip_2d,
                topmost_slice: !skip_topmost,
                outliers: !skip_outliers,
                ..Default::default()
            };
            cfg.base_at = base_at;
            let pred = read_mvol(&input)?.into_labels()?;
            write_mvol(&postprocess_pipeline(&pred, &cfg).into(), out)
        }
        Command::Evaluate {
            pred,
            gt,
            report,
            ablate_postproc,
            config,
        } => {
            let cfg = load_config(config.as_deref())?;
            let ev = pipeline::evaluate(&pred, &gt, &report, ablate_postproc.then_some(&cfg.postprocess))?;
            for l in &ev.report.labels {
                log::info!(
                    "{:>4}: DSC {:6.2}  HD {:>8}  ASSD {:>8}",
                    l.name,
                    l.dsc.mean.unwrap_or(f64::NAN),
                    l.hd.mean.map_or("-".into(), |v| format!("{v:.2}")),
                    l.assd.mean.map_or("-".into(), |v| format!("{v:.2}")),
                );
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
