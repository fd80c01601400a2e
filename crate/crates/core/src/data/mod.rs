//! Dataset loading, task splits, iteration schedules and augmentation.

mod augment;
mod dataset;
mod schedule;
mod split;

pub use augment::{augment_batch, eval_view, two_views, AugOp, AugmentationPolicy};
pub use dataset::{
    load_dataset, synthetic_gaussians, synthetic_means, DatasetPair, ImageGeom, LabeledDataset,
    SyntheticConfig, DATASETS,
};
pub use schedule::{
    epoch_batches, make_minibatch_schedule, IterationSchedule, ScheduleMode, ScheduledBatch,
};
pub use split::{
    split_class_incremental, split_class_incremental_with, split_data_incremental, ClassOrder,
    SplitMode, TaskClassMap, TaskSequence, TaskSplit,
};
