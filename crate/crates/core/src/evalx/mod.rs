//! Zero-shot inference, AP/AR evaluation, alignment rendering, ablation
//! sweeps and the synthetic shapes-world benchmark.

mod data;
mod metrics;
mod shapes;
mod sweep;
mod visualize;

pub use data::{evaluate, infer, infer_with_embeddings, predict, EvalSet, InferConfig};
pub use metrics::{
    coco_thresholds, evaluate_ap, Detection, EvalOptions, EvalReport, GroundTruthBox, ImageAnnotations,
    ImagePredictions, SIZE_LARGE, SIZE_MEDIUM, SIZE_SMALL,
};
pub use shapes::{
    caption, render_image, seen_categories, unseen_categories, PlacedShape, Shape, ShapeCategory, ShapesWorld,
    ShapesWorldConfig, ShapesWorldPaths, COLORS, DISTRACTOR_COLORS, DISTRACTOR_SHAPES,
    distractor_names,
};
pub use sweep::{ablation_sweep, ablation_sweep_with, write_sweep_csv, SweepRow, SWEEP_FILE};
pub use visualize::{align_caption, render_alignment, visualize_alignment, AlignmentMatch, PALETTE};
