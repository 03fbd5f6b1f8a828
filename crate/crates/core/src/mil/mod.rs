//! Top-k gated-attention multiple instance learning with a classifier shared
//! between slides and tiles, trained jointly on pasted tiles.

pub mod model;
pub mod queue;
pub mod train;

pub use model::{
    attention_aggregate, bag_label, bce, combined_loss, forward_bag, instance_scores, loss, loss_and_grad,
    select_topk, sigmoid, slide_score, BagForward, MilParams, TileBatch,
};
pub use queue::{QueueEntry, QueuePair};
pub use train::{
    evaluate, score_bags, tile_auc, train, write_log, Adam, C3pMode, CanvasSource, EpochLog, EvalReport,
    OnlineC3p, SavedModel, TileDir, TrainConfig, TrainData, TrainOutput,
};
