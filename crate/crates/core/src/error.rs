//! Protocol error codes as they travel between nodes.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Every failure a node can report to a peer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ErrorCode {
    MalformedRequest,
    NotFound,
    BadSignature,
    KeyError,
    DecryptError,
    // hub
    UnknownAccount,
    UnknownD2Id,
    DuplicateD2Id,
    UnknownTemp,
    TempCollision,
    UnknownRequest,
    SelectionOutsideCandidates,
    IssuerUnreachable,
    TargetUnreachable,
    // provider
    AuthFailed,
    UnknownUser,
    UnknownIdentifier,
    NotRegistered,
    TempStale,
    RateLimited,
    MismatchedDid,
    CapabilityNotSupported,
    MalformedPredicate,
    HubRejected,
    HubUnreachable,
    UntrustedIssuer,
    // agent
    ProviderRejected,
    Locked,
    BadPin,
    StaleAlert,
    DecisionTimeout,
    Internal,
}

impl ErrorCode {
    /// HTTP status used when the code crosses a real HTTP transport.
    pub fn http_status(self) -> u16 {
        use ErrorCode::*;
        match self {
            MalformedRequest | MalformedPredicate | SelectionOutsideCandidates | KeyError => 400,
            BadSignature | AuthFailed | BadPin => 401,
            Locked => 423,
            NotFound | UnknownAccount | UnknownD2Id | UnknownTemp | UnknownRequest | UnknownUser
            | UnknownIdentifier | NotRegistered => 404,
            DuplicateD2Id | TempCollision | MismatchedDid | StaleAlert => 409,
            CapabilityNotSupported | UntrustedIssuer | DecryptError => 422,
            RateLimited => 429,
            TempStale => 503,
            IssuerUnreachable | TargetUnreachable | HubUnreachable | HubRejected | ProviderRejected => 502,
            DecisionTimeout => 504,
            Internal => 500,
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Error body returned by every endpoint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, thiserror::Error)]
#[error("{code}: {message}")]
pub struct ApiError {
    pub code: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        Self { code, message: message.into() }
    }

    pub fn malformed(message: impl Into<String>) -> Self {
        Self::new(ErrorCode::MalformedRequest, message)
    }

    pub fn not_found(path: &str) -> Self {
        Self::new(ErrorCode::NotFound, format!("no route for {path}"))
    }
}

impl From<crate::crypto::CryptoError> for ApiError {
    fn from(e: crate::crypto::CryptoError) -> Self {
        use crate::crypto::CryptoError::*;
        let code = match e {
            KeyError(_) => ErrorCode::KeyError,
            DecryptError => ErrorCode::DecryptError,
            BadSignature => ErrorCode::BadSignature,
        };
        Self::new(code, e.to_string())
    }
}

impl From<crate::model::ModelError> for ApiError {
    fn from(e: crate::model::ModelError) -> Self {
        Self::malformed(e.to_string())
    }
}
