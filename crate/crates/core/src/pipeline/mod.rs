//! The end-to-end text-to-sign pipeline and its run-directory plumbing.

mod config;
mod run;
mod system;

pub use config::{apply_override, sha256_hex, DataConfig, RunConfig};
pub use run::{
    derive_seed, ensure_stage, evaluate_system, hash_path, reconstruction_error, run_pipeline, synthesize_splits,
    write_atomic, PipelineRun, RunLog, RunManifest, Stage, StageStamp, StageStatus, AMG_DIR, AMG_LOG, CORPUS_FILE,
    DETO_DIR, DETO_LOG, DICT_FILE, GENERATED_FILE, HELDOUT_FILE, INSTANCES_FILE, LOG_FILE, MANIFEST_FILE, REPORT_FILE,
    TOOL_VERSION,
};
pub use system::{build_vocabulary, training_pairs, Generation, TextToSign};
