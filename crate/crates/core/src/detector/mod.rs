//! Single-level dense detector with a swappable classification head.

mod assign;
mod config;
mod infer;
mod io;
mod model;
mod train;

pub use assign::{assign_targets, DenseTargets, Grid};
pub use config::{AuxLoss, DetectorConfig, HeadKind, OptimConfig};
pub use infer::{class_probabilities, decode_detections, detection_order, iou, nms, Detection, InferConfig};
pub use io::{decode_model, encode_model, load_model, save_model, write_train_log, MODEL_FORMAT_VERSION};
pub use model::{head_param_names, DenseOutputs, Detector, ForwardPass, ParamSet, PRIOR_PROB};
pub use train::{clip_grad_norm, train, train_with, EpochRecord, LossParts, Sgd, Trainer};
