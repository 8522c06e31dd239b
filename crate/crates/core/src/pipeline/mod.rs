//! Corpus generation, training, ensemble inference and evaluation.

pub mod config;
pub mod evaluate;
pub mod overlay;
pub mod phantom;
pub mod predict;
pub mod train;

pub use config::{Averaging, CorpusConfig, GridConfig, PathsConfig, PipelineConfig, TrainConfig};
pub use evaluate::{evaluate, DifferenceReport, Evaluation};
pub use overlay::write_overlays;
pub use phantom::{generate_corpus, generate_phantom, PhantomSpec};
pub use predict::{ensemble_predict, load_ensemble, predict_dir, EnsemblePrediction};
pub use train::{load_cases, sample_training_pair, train_ensemble, train_member, Case, PairPools};
