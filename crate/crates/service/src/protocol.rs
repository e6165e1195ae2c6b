//! Wire messages. JSON text frames tagged by `type`.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use steer_core::objectives::Interaction;
use steer_core::steering::SteeredBatch;
use steer_core::trajectory::Trajectory;

/// Client request id, echoed on every response. Any JSON value.
pub type RequestId = Option<Value>;

pub type WirePath = Vec<[f64; 2]>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ClientMessage {
    Steer {
        #[serde(default)]
        id: RequestId,
        interaction: Interaction,
        /// Partial sampler config merged over the service defaults.
        #[serde(default)]
        config: Option<Value>,
    },
    Execute {
        #[serde(default)]
        id: RequestId,
        index: usize,
    },
    NudgeLive {
        #[serde(default)]
        id: RequestId,
        prefix: WirePath,
    },
    Reset {
        #[serde(default)]
        id: RequestId,
        state: [f64; 2],
        seed: u64,
    },
}

impl ClientMessage {
    pub fn id(&self) -> &RequestId {
        match self {
            Self::Steer { id, .. } | Self::Execute { id, .. } | Self::NudgeLive { id, .. } | Self::Reset { id, .. } => id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Snapshot {
        id: RequestId,
        step: usize,
        trajectories: Vec<WirePath>,
    },
    Batch {
        id: RequestId,
        trajectories: Vec<WirePath>,
        costs: Vec<Option<f64>>,
        collisions: Vec<bool>,
        ranking: Vec<usize>,
        /// Index of the member `execute` would pick by default.
        executed: usize,
        /// Per-member failure reason, `null` for members that finished.
        diagnostics: Vec<Option<String>>,
        seed: u64,
    },
    Tick {
        id: RequestId,
        state: [f64; 2],
        t: usize,
        collision: bool,
    },
    Error {
        id: RequestId,
        code: String,
        detail: String,
    },
}

impl ServerMessage {
    pub fn id(&self) -> &RequestId {
        match self {
            Self::Snapshot { id, .. } | Self::Batch { id, .. } | Self::Tick { id, .. } | Self::Error { id, .. } => id,
        }
    }

    pub fn error(id: RequestId, code: ErrorCode, detail: impl Into<String>) -> Self {
        Self::Error { id, code: code.as_str().into(), detail: detail.into() }
    }

    pub fn batch(id: RequestId, b: &SteeredBatch<f32>, seed: u64) -> Self {
        Self::Batch {
            id,
            trajectories: b.trajectories.iter().map(wire_path).collect(),
            // Diverged members carry an infinite cost, which JSON cannot hold.
            costs: b.costs.iter().map(|&c| c.is_finite().then_some(c as f64)).collect(),
            collisions: b.collisions.clone(),
            ranking: b.ranking.clone(),
            executed: b.executed_index(),
            diagnostics: b.diagnostics.clone(),
            seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorCode {
    BadMessage,
    InvalidInteraction,
    InvalidConfig,
    InvalidRequest,
    IndexOutOfRange,
    NoBatch,
    Cancelled,
    Sampler,
}

impl ErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::BadMessage => "bad_message",
            Self::InvalidInteraction => "invalid_interaction",
            Self::InvalidConfig => "invalid_config",
            Self::InvalidRequest => "invalid_request",
            Self::IndexOutOfRange => "index_out_of_range",
            Self::NoBatch => "no_batch",
            Self::Cancelled => "cancelled",
            Self::Sampler => "sampler",
        }
    }
}

pub fn wire_path(t: &Trajectory<f32>) -> WirePath {
    t.states.iter().map(|s| [s[0] as f64, s[1] as f64]).collect()
}
