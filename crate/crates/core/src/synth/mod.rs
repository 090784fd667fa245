//! Synthetic puppet video with exact UV, flow and keypoint oracles, flow
//! corruption, annotation-budget schemes and training pairs.

mod annotate;
mod dataset;
mod noise;
mod render;
mod triplet;

pub use annotate::{manual_clicks, subsample_annotations, AnnotationSet, Click, LabelSource, Provenance, Scheme};
pub use dataset::{
    digest_dir, parse_manifest, read_annotations_csv, read_field, write_annotations_csv, Dataset, DatasetConfig, Sequence,
};
pub use noise::{corrupt_flow, gaussian_blur, CorruptedFlow, FlowNoise, NOISE_SMOOTHING, OUTLIER_BLOCK};
pub use render::{render_sequence, Frame, Hit, Keypoint, PuppetPose, RenderConfig, Renderer, UvMap, JOINTS};
pub use triplet::{build_triplets, real_triplet, synthetic_triplet, SequenceFlows, TrainingTriplet, TripletMode, TripletSource};
