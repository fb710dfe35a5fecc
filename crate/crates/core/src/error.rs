use thiserror::Error;

/// Errors surfaced by the engine.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum MpmError {
    #[error("rejected input: {0}")]
    RejectedInput(String),

    #[error("spatial domain violation: {0}")]
    SpatialDomain(String),

    #[error("resource exhausted: could not allocate {requested} elements ({what})")]
    Resource { what: &'static str, requested: usize },

    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("mode conflict: {0}")]
    ModeConflict(String),

    #[error("degenerate particle state: {0}")]
    Degenerate(String),

    #[error("barrier watchdog expired for worker {worker} at generation {generation} after {waited_ms} ms")]
    BarrierTimeout {
        worker: usize,
        generation: u64,
        waited_ms: u128,
    },

    #[error("barrier aborted by a peer worker")]
    BarrierAborted,

    #[error("step {step}: {source}")]
    AtStep {
        step: u64,
        #[source]
        source: Box<MpmError>,
    },
}

pub type Result<T> = std::result::Result<T, MpmError>;
