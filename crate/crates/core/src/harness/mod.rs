//! Configuration, orchestration and file output.

pub mod config;
pub mod design;
pub mod files;
pub mod pipeline;
pub mod simulate;

pub use config::{EstimateConfig, RawConfig, SimConfig};
pub use design::{PmDesign, PmLayout};
pub use files::{read_reference, read_sample, run_estimate, run_synthesize};
pub use pipeline::{run_pipeline, PipelineOutput, PipelineSpec, Response, Slot};
pub use simulate::{run_simulation, SimulationReport, SummaryRow};
