//! The artifact's shell: dataset ingestion and degradation, training,
//! arbitrary `(R, S_H, S_W)` inference, evaluation, pseudo-label dumping
//! support and memory profiling.

pub mod checkpoint;
pub mod data;
pub mod eval;
pub mod infer;
pub mod model;
pub mod profile;
pub mod synth;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Manifest};
pub use data::{bicubic_resize, degrade, ingest, DegradedClip, FrameSequence};
pub use eval::{evaluate, write_report_jsonl, EvalReport, FrameKind};
pub use infer::{run_inference, run_inference_streaming};
pub use model::{ModelConfig, SpaceTimeModel};
pub use profile::{profile_memory, MemoryRecord, MEMORY_BUDGET_BYTES};
pub use synth::{generate_dataset, synth_clip, SynthConfig};
pub use train::{clip_loss, train, LossRow, TrainConfig, TrainMode, TrainReport};

pub use crate::upsample::ScaleSpec;
