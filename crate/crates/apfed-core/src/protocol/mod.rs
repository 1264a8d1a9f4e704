//! Federated training protocol.
//!
//! Roles:
//! * [`active::ActiveClient`] owns labels, encoder, and task head, drives
//!   the session, and is the only party that can run inference.
//! * [`passive::PassiveClient`] holds an unlabeled feature view, scores
//!   received representations with a self-supervised objective, and streams
//!   the representation gradients back.
//! * [`tvfl::TvflServer`] / [`tvfl::TvflClient`] implement the
//!   feature-concatenation baseline, where a label-holding server trains a
//!   head over every client's representations and all parties must show up
//!   for inference.
//!
//! All roles speak the frame format in [`message`] over any [`transport`].

pub mod active;
pub mod message;
pub mod passive;
pub mod transport;
pub mod tvfl;

pub use active::{ActiveClient, ActiveConfig, EpochStats, PassiveHandle};
pub use message::Message;
pub use passive::{PassiveClient, PassiveConfig, PassiveObjective};
pub use transport::{InProcTransport, TcpTransport, Transport, TransportError};
pub use tvfl::{
    AblateMode, ClientHandle, TvflBundle, TvflClient, TvflClientConfig, TvflEpochStats, TvflModel,
    TvflServer, TvflServerConfig,
};

use crate::data::DataError;
use crate::error::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum ProtocolError {
    #[error("{peer}: {source}")]
    Peer {
        peer: String,
        source: TransportError,
    },
    #[error("expected {expected}, got {got}")]
    UnexpectedMessage {
        expected: &'static str,
        got: &'static str,
    },
    #[error("session mismatch: ours {ours:#x}, theirs {theirs:#x}")]
    SessionMismatch { ours: u64, theirs: u64 },
    #[error("batch counter mismatch: expected {expected}, got {got}")]
    StaleBatch { expected: u64, got: u64 },
    #[error("{context}: expected shape {expected:?}, got {got:?}")]
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("no common sample ids across participants")]
    EmptyIntersection,
    #[error("alignment result contains a digest outside our id set")]
    UnknownDigest,
    #[error("peer reported: {0}")]
    Remote(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
}

impl ProtocolError {
    pub(crate) fn peer(peer: impl Into<String>, source: TransportError) -> Self {
        ProtocolError::Peer {
            peer: peer.into(),
            source,
        }
    }
}
