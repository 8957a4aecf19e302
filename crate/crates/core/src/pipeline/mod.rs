//! Fine-tuning export, resumable scale inference and run evaluation.

mod evaluate;
mod export;
mod scale;

pub use evaluate::{evaluate_run, EvaluateError, PredictedLabels, RunMetadata, RunReport};
pub use export::{
    export_finetune, instruction_text, parse_output, render_output, ExampleMeta, ExportCounts, ExportError,
    ExportManifest, ExportOptions, FinetuneExample, FinetuneExport, LABEL_DELIMITER,
};
pub use scale::{
    run_scale, Checkpoint, Counters, PredictionRecord, PredictionStatus, ScaleError, ScaleJob, ScaleOptions,
    ScaleSummary, CHECKPOINT_FILE, COMPLETIONS_FILE, PREDICTIONS_FILE,
};
