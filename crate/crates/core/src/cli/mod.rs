//! Experiment harness behind the `softproj` command: configuration,
//! Monte-Carlo campaigns and the auxiliary sweeps.

pub mod campaign;
pub mod commands;
pub mod config;

pub use campaign::{
    draw_realization, evaluate, run_points, select_best, solve_points, stream_id, test_campaign, validation_campaign,
    CampaignContext, ChosenParam, GridPoint, Outcome, Phase, PointStats, Realization, ValidationResult,
};
pub use commands::{
    bound_instance, bound_sweep, cmd_bound, cmd_eigencurves, cmd_online, cmd_test, cmd_validate, eigencurves,
    interior_minimizer, load_chosen, within_bound, m8_eigenvalue, m9_eigenvalue, online_campaign, online_pair, synthetic_data,
    EigenRow, OnlinePair, OnlinePairSummary,
};
pub use config::{log_grid, BoundConfig, EigencurveConfig, ExperimentConfig, OnlineExperimentConfig};
