//! Configuration-driven orchestration of every stage, from data generation
//! to report plots.

mod config;
mod dump;
mod evaluate;
mod infer;
mod report;
mod run;

pub use config::{BaseSection, DatasetConfig, DiffusionSection, InferenceConfig, RunConfig};
pub use dump::{read_heatmap, write_heatmap, DumpSidecar};
pub use evaluate::{evaluate_records, metrics_csv, CategoryMetrics, EvalRecord, GammaMetrics, Metrics, ScoreRow, THIN_LINE};
pub use infer::{infer_image, ImageMaps, InferenceContext};
pub use report::{jet, panel_name, render_histogram, render_panel, PanelInput, PanelScale};
pub use run::{
    check_dependencies, emit_plots, run_pipeline, run_table1, IndexEntry, PanelEntry, RunArtifacts, RunLayout,
    RunManifest, Stage, Table1Row, TABLE1_FACTORS,
};
