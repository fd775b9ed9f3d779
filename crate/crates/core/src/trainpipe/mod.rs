pub mod dataset;
pub mod train;

pub use dataset::{
    build_pairs, make_pair, propose_edit, select_target, significance, sub_seed, upsample, DatasetConfig,
    ObjectSignificance, SignificanceReport, TargetRule, TrainPair, Upsample,
};
pub use train::{
    caption_example, difference_example, token_accuracy, Example, Phase, TraceRow, TrainConfig, Trainer,
};
