//! ATSS target assignment and the supervised detection losses.

mod atss;
mod losses;

pub use atss::{area, atss_assign, center, iou, TargetMatrix, DEFAULT_TOPK_PER_LEVEL};
pub use losses::{
    alignment_logits, centerness_loss, centerness_target, focal_alignment_loss, giou, giou_loss,
    Direction, LossConfig, Matching,
};
