//! Synthetic scenes, annotation ingestion, training, evaluation, checkpoints and ablations.

mod ablate;
mod checkpoint;
mod config;
mod dataset;
mod eval;
mod synth;
mod train;

pub use ablate::{run_ablation, AblationCell, AblationMatrix, CellResult, SplitSpec};
pub use checkpoint::{checkpoint_roundtrip, Checkpoint, MAGIC, VERSION};
pub use config::TrainConfig;
pub use dataset::{
    annotations_path, load_dataset, load_image, parse_wireframe, wireframe_ingest, write_dataset, AnnotatedImage,
    Sample, WireframeRecord, ANNOTATIONS_FILE,
};
pub use eval::{detect_all, evaluate_model, evaluate_with, DEFAULT_TAUS};
pub use synth::{synth_generate, synth_generate_with, SynthConfig, SyntheticScene};
pub use train::{clip_grad_norm, image_loss, train_loop, ImageLoss, LossLogEntry, TrainOutcome, Trainer};
