//! Temporal-coherence error estimation for video object detections, plus the
//! active-learning machinery built on top of it.
//!
//! The pipeline: detections tracked into neighbouring frames form a graph of
//! mutually supporting observations ([`tcgraph`]); an energy over
//! true/false positive/negative labels is minimized exactly by graph cut
//! ([`energy`]); the estimated per-frame error counts drive frame selection
//! ([`acquisition`]); a closed-loop simulator ([`simulator`]) compares that
//! acquisition function against oracle and uncertainty baselines.

pub mod acquisition;
pub mod dataset;
pub mod energy;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod simulator;
pub mod tcgraph;
pub mod tracker;

pub use acquisition::{select_batch, FrameScore, FrameSet, Method, SelectionBatch, SelectionConfig};
pub use dataset::{
    load_dataset, load_detections_dir, save_dataset, Dataset, DatasetManifest, Detection,
    GroundTruthObject, MotionField, VideoData, VideoMeta,
};
pub use energy::{brute_force_min, solve, EnergyModel, Label, LabelSolution};
pub use error::{Error, Result};
pub use evaluation::{evaluate, EvalConfig, EvalReport};
pub use geometry::{iou, BBox};
pub use simulator::{generate_world, run_loop, LoopConfig, SurrogateDetector, World, WorldConfig};
pub use tcgraph::{build_graphs, TCConfig, TCGraph};
pub use tracker::{propagate_all, BoxTracker, MotionFieldTracker, TrackedBox, TrackerConfig};
