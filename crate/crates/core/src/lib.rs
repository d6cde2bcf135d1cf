//! Refinement of noisy binary vessel labels.
//!
//! The crate covers the whole loop: simulating label noise with
//! morphological operators, mining clean training patches, an iterative
//! conditional GAN built on a small differentiable engine, Otsu
//! binarization with component cleanup, and segmentation metrics.

pub mod error;
pub mod evalmetrics;
pub mod ganrefine;
pub mod morphnoise;
pub mod patchmine;
pub mod postproc;
pub mod raster;
pub mod seeding;
pub mod tensornet;

pub use error::{Error, Result};
pub use evalmetrics::{
    auc, auc_from_scores, confusion, refinement_report, report_tsv, scalar_metrics, ConfusionCounts, EvalRow,
    RefinementReport, ScalarMetrics,
};
pub use ganrefine::{
    iterate_refine, refine_full_image, total_objective, train, train_with, EpochRecord, IterTrace, LabelRefiner,
    RefineConfig, Trainer,
};
pub use morphnoise::{simulate_noise, GridSpec, NoiseConfig, NoiseLog, NoiseOp, StructuringElement};
pub use patchmine::{build_training_set, mine_patches, synth_corpus, CleanSample, MineConfig, PatchPair, SynthStyle};
pub use postproc::{connected_components, otsu_threshold, postprocess, remove_small, Connectivity, PostprocConfig};
pub use raster::{crop, iou, vessel_ratio, LabelMap, PatchRect, ProbMap, RasterImage};
pub use seeding::{derive_seed, rng_from_seed};
