use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::AugmentRanges;
use crate::error::{Error, Result};
use crate::loss::{CascadeLossConfig, Weighting};
use crate::net::{AdamConfig, NetConfig};
use crate::postprocess::PostprocessConfig;
use crate::volume::Geometry;

/// Network input grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    pub dims: [usize; 3],
    /// mm
    pub spacing: [f32; 3],
}

impl GridConfig {
    pub fn geometry(&self) -> Result<Geometry> {
        Geometry::new(self.dims, self.spacing)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub loss: CascadeLossConfig,
    /// Iterations between checkpoint writes; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Iterations between training-log rows.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            seed: 0,
            adam: AdamConfig::default(),
            loss: CascadeLossConfig::default(),
            checkpoint_every: 500,
            log_every: 20,
        }
    }
}

/// Synthetic corpus layout.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    pub count: usize,
    pub seed: u64,
    /// Acquisition grid of the phantoms.
    pub native_dims: [usize; 3],
    pub native_spacing: [f32; 3],
    /// Share of acute cases that carry MVO.
    pub mvo_fraction: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            count: 60,
            seed: 0,
            native_dims: [64, 64, 13],
            native_spacing: [1.0, 1.0, 5.0],
            mvo_fraction: 2.0 / 3.0,
        }
    }
}

/// How ensemble members are combined.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    #[default]
    Probs,
    Logits,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus: "corpus".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
        }
    }
}

/// Everything a run needs, stored as one JSON file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub grid: GridConfig,
    pub net: NetConfig,
    pub train: TrainConfig,
    pub augment: AugmentRanges,
    pub ensemble_size: usize,
    pub averaging: Averaging,
    pub postprocess: PostprocessConfig,
    pub corpus: CorpusConfig,
    pub paths: PathsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl PipelineConfig {
    /// Laptop-sized run: 32³ grid at 2 mm, 3 levels, 8 filters, 2000
    /// iterations, 3 models.
    pub fn desk() -> Self {
        PipelineConfig {
            grid: GridConfig {
                dims: [32; 3],
                spacing: [2.0; 3],
            },
            net: NetConfig::default(),
            // 2000 iterations: the shadow horizon shrinks with the schedule.
            // Size-proportional (and 1/M_k) weights lock stage 3 into all-background;
            // 1/M_k^2 lets MVO swamp MYO at stage 3.
            train: TrainConfig {
                adam: AdamConfig {
                    ema_decay: 0.99,
                    ..AdamConfig::default()
                },
                loss: CascadeLossConfig {
                    weighting: Weighting::InversePower(1.5),
                    ..CascadeLossConfig::default()
                },
                ..TrainConfig::default()
            },
            augment: AugmentRanges::scaled_to(32),
            ensemble_size: 3,
            averaging: Averaging::Probs,
            postprocess: PostprocessConfig::default(),
            corpus: CorpusConfig::default(),
            paths: PathsConfig::default(),
        }
    }

    /// Full-size settings: 128³ at 1 mm, 5 levels, 64 filters, 200 000
    /// iterations, 10 models.
    pub fn paper() -> Self {
        PipelineConfig {
            grid: GridConfig {
                dims: [128; 3],
                spacing: [1.0; 3],
            },
            net: NetConfig {
                levels: 5,
                base_filters: 64,
                dropout: 0.1,
            },
            train: TrainConfig {
                iterations: 200_000,
                checkpoint_every: 10_000,
                log_every: 100,
                ..TrainConfig::default()
            },
            augment: AugmentRanges::default(),
            ensemble_size: 10,
            corpus: CorpusConfig {
                native_dims: [192, 192, 20],
                native_spacing: [0.7, 0.7, 7.0],
                ..CorpusConfig::default()
            },
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            _ => Err(Error::Config(format!("unknown preset {name:?} (desk|paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.grid.geometry()?;
        let div = 1 << (self.net.levels.max(1) - 1);
        if g.dims.iter().any(|d| d % div != 0) {
            return Err(Error::IndivisibleDims { dims: g.dims, divisor: div });
        }
        if self.net.levels == 0 || self.net.base_filters == 0 || !(0.0..1.0).contains(&self.net.dropout) {
            return Err(Error::Config(format!("invalid network settings {:?}", self.net)));
        }
        if self.train.iterations == 0 || self.train.log_every == 0 {
            return Err(Error::Config("iterations and log_every must be positive".into()));
        }
        if self.ensemble_size == 0 {
            return Err(Error::Config("ensemble_size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.corpus.mvo_fraction) {
            return Err(Error::Config("mvo_fraction must lie in [0, 1]".into()));
        }
        Geometry::new(self.corpus.native_dims, self.corpus.native_spacing)?;
        self.train.adam.validate()?;
        self.train.loss.validate()?;
        self.augment.validate()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_round_trip() {
        for cfg in [PipelineConfig::desk(), PipelineConfig::paper()] {
            cfg.validate().unwrap();
            let text = serde_json::to_string(&cfg).unwrap();
            assert_eq!(serde_json::from_str::<PipelineConfig>(&text).unwrap(), cfg);
        }
        let p = PipelineConfig::paper();
        assert_eq!((p.grid.dims, p.net.levels, p.net.base_filters), ([128; 3], 5, 64));
        assert_eq!((p.train.iterations, p.ensemble_size), (200_000, 10));
        assert_eq!(p.augment.translation, 20.0);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: PipelineConfig = serde_json::from_str(r#"{"ensemble_size": 2, "train": {"iterations": 5}}"#).unwrap();
        assert_eq!(cfg.ensemble_size, 2);
        assert_eq!(cfg.train.iterations, 5);
        assert_eq!(cfg.grid, PipelineConfig::desk().grid);
    }

    #[test]
    fn rejects_bad_grid() {
        let mut cfg = PipelineConfig::desk();
        cfg.grid.dims = [30, 32, 32];
        assert!(matches!(cfg.validate(), Err(Error::IndivisibleDims { .. })));
    }
}
