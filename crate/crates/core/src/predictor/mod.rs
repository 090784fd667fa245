//! Multi-stage dense chart predictor, its losses and the training loop.

mod checkpoint;
mod eval;
mod loss;
mod model;
mod ops;
mod propagate;
mod train;

pub use checkpoint::{checkpoint_container, load_checkpoint, load_checkpoint_for, save_checkpoint};
pub use eval::Evaluator;
pub use loss::{
    cosine_terms, loss_annotations, loss_equivariance, loss_keypoints, loss_supervised, smooth_l1, LossTerms,
    LossWeights, HUBER_DELTA, MIN_NORM,
};
pub use model::{
    param_layout, Decoded, Level, LevelSelector, Model, ModelConfig, ParamBlock, Prediction, PredictionGrad,
    StageGrad, StageOutput, DOWNSAMPLE,
};
pub use ops::{avgpool2, conv1x1, conv3x3, elu_inplace, upsample2};
pub use propagate::{propagate_dataset, propagate_gt, survival_rate, PropagationReport};
pub use train::{grad_check, metrics_csv, parse_metrics_csv, train, MetricsRow, TrainOutcome, METRICS_HEADER};
