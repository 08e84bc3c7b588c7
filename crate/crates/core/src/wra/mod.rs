//! Word-region alignment: batch concept gathering, similarity and matching,
//! set-level image-text similarity, the contrastive loss and proposal
//! selection.

mod contrastive;
mod gather;
mod selection;
mod similarity;

pub use contrastive::{
    contrastive_from_similarities, contrastive_loss, contrastive_loss_var, largest_box,
    pair_similarities, PairBatch, PairVars,
};
pub use gather::{gather_concepts, gather_texts, unique_columns, GatheredConcepts};
pub use selection::{nms, objectness_scores, select_proposals, ProposalSelectionConfig, Strategy};
pub use similarity::{
    match_one_to_one, set_similarity_i2t_var, set_similarity_t2i, set_similarity_var,
    similarity_matrix, MatchResult,
};
