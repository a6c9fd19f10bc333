use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// Connect to the peer and write every step.
    Send,
    /// Listen and drain whatever arrives.
    Recv,
    /// Listen, then read and write on the accepted connection.
    DuplexListen,
    /// Connect, then read and write.
    DuplexConnect,
    /// The operator's steering inbox; reports what was received each step.
    Steer,
}

impl Direction {
    pub fn sends(self) -> bool {
        matches!(
            self,
            Direction::Send | Direction::DuplexListen | Direction::DuplexConnect
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockChannel {
    pub name: String,
    /// Unix socket path. Defaults to `$COPILOT_CHANNEL_DIR/<name>.sock`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
    #[serde(default)]
    pub bytes_per_step: u64,
    pub direction: Direction,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Misbehavior {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub silence_after_step: Option<u64>,
    #[serde(default)]
    pub ignore_steering: bool,
    /// Exit early at this step, with `exit_code` if nonzero and 1 otherwise.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_at_step: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockBehavior {
    pub iterations: u64,
    pub step_ms: u64,
    #[serde(default)]
    pub heartbeat_every: u64,
    #[serde(default)]
    pub exit_code: i32,
    #[serde(default)]
    pub steering_handlers: Vec<String>,
    /// Per-step log lines go here; stdout when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_file: Option<String>,
    /// Spin instead of sleeping through each step.
    #[serde(default)]
    pub busy: bool,
    #[serde(default)]
    pub channels: Vec<MockChannel>,
    #[serde(default)]
    pub misbehavior: Misbehavior,
}

#[derive(Debug, Error)]
pub enum BehaviorError {
    #[error("cannot read behavior file {0}: {1}")]
    Io(PathBuf, std::io::Error),
    #[error("invalid behavior: {0}")]
    Invalid(String),
}

impl MockBehavior {
    pub fn parse(text: &str) -> Result<Self, BehaviorError> {
        let b: MockBehavior =
            toml::from_str(text).map_err(|e| BehaviorError::Invalid(e.to_string()))?;
        b.validate()?;
        Ok(b)
    }

    pub fn load(path: &Path) -> Result<Self, BehaviorError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| BehaviorError::Io(path.to_path_buf(), e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<(), BehaviorError> {
        if self.step_ms < 1 {
            return Err(BehaviorError::Invalid("step_ms must be >= 1".into()));
        }
        for c in &self.channels {
            if c.name.is_empty() {
                return Err(BehaviorError::Invalid(
                    "channel name must be non-empty".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("behaviors always serialize")
    }

    /// Heartbeats a clean run emits.
    pub fn expected_heartbeats(&self) -> u64 {
        if self.heartbeat_every == 0 {
            return 0;
        }
        let last = self
            .misbehavior
            .silence_after_step
            .unwrap_or(u64::MAX)
            .min(self.misbehavior.exit_at_step.unwrap_or(u64::MAX))
            .min(self.iterations);
        last / self.heartbeat_every
    }
}
