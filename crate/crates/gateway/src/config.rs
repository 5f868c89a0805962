use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;

use nestery_core::clock::ClockMode;

use crate::error::ApiError;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";
pub const DEFAULT_DATA_DIR: &str = ".nestery";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiConfig {
    pub listen: SocketAddr,
    pub data_dir: PathBuf,
    pub clock: ClockMode,
    /// Bearer token to user id.
    pub tokens: HashMap<String, String>,
}

impl ApiConfig {
    /// Reads `NESTERY_LISTEN`, `NESTERY_DATA_DIR`, `NESTERY_CLOCK` and
    /// `NESTERY_TOKENS`, falling back to defaults.
    pub fn from_env() -> Result<ApiConfig, ApiError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        Ok(ApiConfig {
            listen: parse_listen(&var("NESTERY_LISTEN").unwrap_or_else(|| DEFAULT_LISTEN.into()))?,
            data_dir: var("NESTERY_DATA_DIR").unwrap_or_else(|| DEFAULT_DATA_DIR.into()).into(),
            clock: parse_clock(&var("NESTERY_CLOCK").unwrap_or_else(|| "sim".into()))?,
            tokens: parse_tokens(&var("NESTERY_TOKENS").unwrap_or_default())?,
        })
    }
}

pub fn parse_listen(s: &str) -> Result<SocketAddr, ApiError> {
    s.parse().map_err(|_| ApiError::invalid(format!("bad listen address {s:?}")))
}

pub fn parse_clock(s: &str) -> Result<ClockMode, ApiError> {
    match s {
        "sim" => Ok(ClockMode::Simulated),
        "wall" => Ok(ClockMode::Wall),
        _ => Err(ApiError::invalid(format!("clock must be sim or wall, got {s:?}"))),
    }
}

/// Parses `user:token` pairs separated by commas.
pub fn parse_tokens(s: &str) -> Result<HashMap<String, String>, ApiError> {
    let mut out = HashMap::new();
    for pair in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match pair.split_once(':') {
            Some((user, token)) if !user.is_empty() && !token.is_empty() => {
                if out.insert(token.to_string(), user.to_string()).is_some() {
                    return Err(ApiError::invalid(format!("token for {user} is used twice")));
                }
            }
            _ => return Err(ApiError::invalid(format!("token entry {pair:?} is not user:token"))),
        }
    }
    Ok(out)
}
