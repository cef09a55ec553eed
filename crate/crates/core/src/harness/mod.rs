//! Monte Carlo fault-coverage campaigns, threshold sweeps and fixture models.

mod campaign;
mod sensitivity;
pub mod toy;

pub use campaign::{
    run_campaign, run_coverage, threshold_sweep, CampaignFile, CampaignSettings, CellReport,
    CoverageReport, GridEntry, ReportHeader, SweepTable, ThresholdRow, DEFAULT_INSTANCES,
};
pub use sensitivity::{bootstrap_mean_lower_bound, sensitivity_study, SensitivityStudy};
pub use toy::{make_toy_model, Arch, ToyModel};
