//! Scenario orchestration, run logs, metrics and plots for the cone-track
//! stack. The `conetrack` binary wraps these as subcommands.

pub mod error;
pub mod metrics;
pub mod plots;
pub mod run;
pub mod runlog;
pub mod scenario;

pub use error::{HarnessError, Result};
pub use metrics::{evaluate, Metrics};
pub use plots::emit_plots;
pub use run::{run_scenario, RunOutput, RunStatus};
pub use runlog::{Event, RunLog};
pub use scenario::{Mode, Scenario};
