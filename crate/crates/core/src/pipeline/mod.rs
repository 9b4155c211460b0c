//! Batch orchestration: configs, validation, cell execution with a
//! resumable journal, report tables and synthetic projects.

mod config;
mod project;
mod report;
mod run;

pub use config::{unit_labels, validate, Issue, ProbeConfig, ProbeKind, RunConfig, ValidationReport, DEFAULT_FOLDS};
pub use project::{signal_strength, write_project, ProjectSpec, SynthRequest, PROJECT_CONFIG, PROJECT_MANIFEST};
pub use report::{
    report, CURVE_SAMPLES, FITTED_CURVES_FILE, LAYERWISE_FILE, NORMALIZED_FILE, STRUCT_CONTROL_FILE,
    TRAJECTORY_SERIES_FILE,
};
pub use run::{
    apply_overrides, read_journal, run, CellKey, CellRecord, ControlScore, RunError, RunOptions, RunOutcome,
    BASELINES_FILE, BEST_LAYER_FILE, CONFIG_COPY, CONTROLS_FILE, ERRORS_FILE, JOURNAL_FILE, SCORES_FILE,
    TRAJECTORY_COLUMNS, TRAJECTORY_FILE,
};
