use serde::Serialize;
use thiserror::Error;

use nestery_core::cloud::{rejection, CloudError};
use nestery_core::hypersim::{CommandResult, HvError};
use nestery_core::market::MarketError;
use nestery_core::perfbench::BenchError;

/// How an error surfaces: HTTP status class and CLI exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorKind {
    Unauthorized,
    Forbidden,
    NotFound,
    Conflict,
    Validation,
    Internal,
}

impl ErrorKind {
    pub fn of_code(code: &str) -> ErrorKind {
        match code {
            "Unauthorized" => ErrorKind::Unauthorized,
            "NotYourContract" | "NotAProvider" | "Forbidden" => ErrorKind::Forbidden,
            "UnknownVm" | "UnknownHost" | "UnknownVolume" | "UnknownOffer" | "UnknownContract" | "UnknownUser" | "UnknownMessage" | "NotFound" => {
                ErrorKind::NotFound
            }
            "AdmissionDenied" | "ShrinkBelowChildUsage" | "ShrinkBelowUsed" | "DuplicateUuid" | "IllegalState" | "ParentNotRunning" | "CapacityGone"
            | "ContractNotActive" | "SpecExceedsFreeCapacity" | "VolumeAttached" | "InsufficientSpace" | "NoBackingCloud" | "ClockWentBackwards"
            | "ClockNotSimulated" => ErrorKind::Conflict,
            "StorageFailure" | "CloudFailure" | "CorruptJournal" | "NotProcessed" | "Internal" => ErrorKind::Internal,
            _ => ErrorKind::Validation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{code}: {detail}")]
pub struct ApiError {
    pub kind: ErrorKind,
    pub code: String,
    pub detail: String,
}

impl ApiError {
    pub fn new(code: impl Into<String>, detail: impl Into<String>) -> Self {
        let code = code.into();
        Self { kind: ErrorKind::of_code(&code), code, detail: detail.into() }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Validation, code: "InvalidRequest".into(), detail: detail.into() }
    }

    pub fn internal(detail: impl Into<String>) -> Self {
        Self { kind: ErrorKind::Internal, code: "Internal".into(), detail: detail.into() }
    }

    /// Turns a rejected command result into an error; applied and skipped
    /// results pass through.
    pub fn check(result: CommandResult) -> Result<CommandResult, ApiError> {
        match rejection(&result) {
            Some((code, detail)) => Err(ApiError::new(code, detail)),
            None => Ok(result),
        }
    }

    pub fn body(&self) -> serde_json::Value {
        serde_json::json!({ "error": self.code, "detail": self.detail })
    }
}

impl From<CloudError> for ApiError {
    fn from(e: CloudError) -> Self {
        ApiError::new(e.code(), e.to_string())
    }
}

impl From<HvError> for ApiError {
    fn from(e: HvError) -> Self {
        ApiError::new(e.code(), e.to_string())
    }
}

impl From<MarketError> for ApiError {
    fn from(e: MarketError) -> Self {
        match &e {
            MarketError::Rejected { code, detail } => ApiError::new(code.clone(), detail.clone()),
            _ => ApiError::new(e.code(), e.to_string()),
        }
    }
}

impl From<BenchError> for ApiError {
    fn from(e: BenchError) -> Self {
        ApiError::new(e.code(), e.to_string())
    }
}
