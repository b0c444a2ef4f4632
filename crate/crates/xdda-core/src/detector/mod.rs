//! Miniature two-stage detector: shared proposal extractor plus two
//! independent detection branches, with losses, NMS, and mAP evaluation.

pub mod boxes;
pub mod eval;
pub mod losses;
pub mod model;

pub use boxes::{iou, nms, BBox, Detection, GtBox};
pub use eval::{evaluate_map, ClassAp, MapResult};
pub use losses::{branch_loss, rpn_loss_on, LossConfig, LossValue};
pub use model::{
    BranchKind, BranchOutput, DetectorError, DualBranchModel, InferenceConfig, ModelDims,
    Proposal, ProposalSet,
};
