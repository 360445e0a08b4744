//! Multibox detection: anchors, box coding, target assignment, the joint
//! classification/regression loss, decoding, and suppression.

mod anchors;
mod boxes;
mod decode;
mod loss;
mod matching;
mod nms;

pub use anchors::{generate_anchors, generate_level_anchors, AnchorBox, LevelGrid};
pub use boxes::{decode, encode, iou, BBox, VARIANCES};
pub use decode::{decode_predictions, detect_volume, tile_origins};
pub use loss::{mine_negatives, multibox_loss, LossBreakdown};
pub use matching::{match_anchors, AnchorLabel, GtBox, MatchResult};
pub use nms::{load_detections, nms, save_detections, Detection};
