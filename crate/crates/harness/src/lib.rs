//! Boots a federation on loopback and drives scripted scenarios against it.

pub mod boot;
pub mod scenario;
pub mod scenarios;
pub mod topology;

pub use boot::{Federation, ServiceInfo};
pub use scenario::{ScenarioReport, ScenarioScript, Step, Verdict};
pub use topology::TopologySpec;

use ztf_core::error::Error;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{service} cannot listen on port {port}: {reason}")]
    PortUnavailable { service: String, port: u16, reason: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("unknown scenario {0}")]
    UnknownScenario(String),
    #[error("scenario aborted at step {step} ({label}): {reason}")]
    ScenarioAborted { step: usize, label: String, reason: String },
    #[error(transparent)]
    Service(#[from] Error),
}

/// Boots `topology` with `seed`, runs one scenario, and shuts down.
pub async fn run_fresh(
    mut topology: TopologySpec,
    seed: u64,
    auto_consent: bool,
    script: &ScenarioScript,
) -> Result<ScenarioReport, HarnessError> {
    topology.seed = seed;
    if let Some(a) = topology.authz.as_mut() {
        a.auto_consent |= auto_consent;
    }
    let mut fed = Federation::boot(topology).await?;
    let report = scenarios::run(&fed, script).await;
    fed.shutdown().await;
    report
}
