//! Edit evaluation: AU accuracy, identity distance, background and pose
//! preservation, plus guidance sweeps and variant comparisons.

pub mod metrics;
pub mod suite;

pub use metrics::{
    au_mse, au_squared_error, background_rmse, dilate, embedding_l2, id_l2, pose_rmse, pose_rmse_of, BackgroundRmse,
    MASK_DILATION_PX,
};
pub use suite::{
    ablation_report, au_response, count_inversions, guidance_sweep, protocol_sources, run_suite, write_report,
    AblationReport, AblationRow, EditProtocol, EditRecord, EvalReport, GridEdit, LoadedCheckpoint, PerAuRow, SweepReport,
    EXPECTED_BEST_ALPHA, SWEEP_ALPHAS,
};
