//! Quality-aware pseudo masks for box-supervised instance segmentation.
//!
//! Given a ground-truth box and a handful of detector proposals for it, this
//! crate ranks the proposals by how well their boxes match, fuses their masks
//! with confidence weights, scores the result, and weights the mask loss by
//! that score. High-scoring isolated objects feed a copy-paste augmentation.
//! The [`theory`] module evaluates the error bounds behind fusion and scoring
//! and checks them by simulation on scenes from [`synth`].

pub mod error;
pub mod geometry;
pub mod image;
pub mod mask;
pub mod pc;
pub mod qam;
pub mod synth;
pub mod theory;

pub use error::{Error, Result};
pub use geometry::{box_to_mask, iou, mask_overlaps_box, nms, BBox, BoxRaster, GtInstance};
pub use image::Image;
pub use mask::{dice_loss, rms_distance, rms_norm, BinaryMask, ProbMask};
pub use pc::{augment, paste_overlapping, select_tutor, update_bank, MemoryBank, PasteOutcome, Scene, TutorEntry};
pub use qam::{
    adaptive_k, box_quality_ranking, bpma_select, mask_quality_score, process_instance, qmf_fuse,
    quality_weighted_loss, Candidate, CandidateSet, FusedPseudoMask, QamConfig,
};
