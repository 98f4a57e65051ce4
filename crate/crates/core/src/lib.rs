//! Inter-frame attention mask propagation for video instance segmentation.
//!
//! The crate is organised bottom-up:
//!
//! - [`grid`]: dense grids, matrices and binary masks.
//! - [`encoder`]: the fixed per-cell descriptor used as frame features.
//! - [`affinity`]: inter-frame affinity, row normalization, box-map
//!   propagation and object/background attention.
//! - [`head`], [`train`], [`gradcheck`]: the attention-guided mask head, its
//!   SGD training loop and a finite-difference gradient checker.
//! - [`pipeline`]: online tracking with empty-instance filling.
//! - [`synth`]: synthetic moving-shape videos and a lossy detector model.
//! - [`eval`], [`oracle`], [`report`]: track-level AP/AR, ground-truth
//!   substitution ladders and report rendering.
//! - [`io`]: RLE masks, parameter files, PPM frames, JSON annotations,
//!   dataset directories and run configuration.

pub mod affinity;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod grid;
pub mod head;
pub mod io;
pub mod oracle;
pub mod pipeline;
pub mod report;
pub mod synth;
pub mod train;

pub use affinity::{
    attention_from_propagation, box_to_binary_map, inter_frame_affinity, invert_map,
    normalize_affinity, propagate, propagate_attention, AffinityMatrix, AttentionMap,
    BoundingBox, NormalizeMode, PropagationConfig,
};
pub use encoder::{encode_frame, EncoderConfig, Frame};
pub use error::{Error, Result};
pub use grid::{
    elementwise_scale, matmul, unvectorize_mask, vectorize_mask, BinaryMask, FeatureGrid,
    MaskGrid, Matrix,
};
pub use head::{
    attended_forward, attention_loss, head_forward, head_gradients, mask_loss,
    AttentionLossMode, HeadConfig, HeadParams, LossReport,
};
pub use eval::{evaluate, track_iou, EvalConfig, EvalReport};
pub use gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport};
pub use io::annotations::{AnnotationFile, CategoryInfo, DetectionsFile, VideoInfo};
pub use io::config::{run_propagation, run_train, RunConfig};
pub use io::dataset::{read_dataset, write_dataset, Dataset};
pub use io::params::{load_params, save_params};
pub use io::rle::{rle_decode, rle_encode, RleMask};
pub use oracle::{oracle_substitute, OracleFlags};
pub use pipeline::{
    fill_missing, mask_iou, match_detections, run_video, sample_delta, CategoryId, Detection,
    FillContext, InstanceTrack, PipelineConfig, Source,
};
pub use report::{MetricRow, ReportFormat};
pub use synth::{
    corrupt_detections, generate_suite, generate_video, standard_suite, DetectorModel,
    SceneConfig, SceneSpec, Suite,
};
pub use train::{sgd_step, train, SgdState, TrainConfig, TrainOutput, TrainingSet, TrainingVideo};
