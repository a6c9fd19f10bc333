//! Declarative workflow description: applications, channels, stages and
//! their checks.
//!
//! Workflow files are TOML documents with the top-level keys `name`, `run`,
//! `applications`, `channels` and `stages`. [`WorkflowSpec::to_canonical`]
//! is the canonical serialization; parsing its output yields the same value.

mod reduce;
mod reliability;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use reduce::reduce_to_single_node;
pub use reliability::{estimate_system_failure, DomainError, ReliabilityEstimate};

/// Reserved channel endpoint for steering commands issued by the operator.
pub const OPERATOR: &str = "operator";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkflowSpec {
    pub name: String,
    #[serde(default)]
    pub run: RunPolicy,
    pub applications: Vec<ApplicationSpec>,
    #[serde(default)]
    pub channels: Vec<ChannelSpec>,
    #[serde(default)]
    pub stages: Vec<StageSpec>,
}

/// Run-wide defaults for supervision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunPolicy {
    pub grace_multiplier: u32,
    pub tick_ms: u64,
    pub sample_ms: u64,
    pub steer_timeout_ms: u64,
}

impl Default for RunPolicy {
    fn default() -> Self {
        Self {
            grace_multiplier: 2,
            tick_ms: 100,
            sample_ms: 250,
            steer_timeout_ms: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ApplicationSpec {
    pub name: String,
    pub command: Vec<String>,
    #[serde(default = "one")]
    pub nodes: u32,
    /// Problem-size factor applied in the single-node test run, in (0, 1].
    #[serde(default = "unit")]
    pub scale_factor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heartbeat_interval_ms: Option<u64>,
    #[serde(default)]
    pub failure_probability: f64,
    /// Fail-fast halting ignores anomalies of non-critical applications.
    #[serde(default = "yes")]
    pub critical: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_ms: Option<u64>,
    #[serde(default)]
    pub log_paths: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_pattern: Option<String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
}

fn one() -> u32 {
    1
}
fn unit() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    Steering,
    BulkData,
    RawOutput,
    Visualization,
    TimeCritical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSpec {
    pub name: String,
    pub from_app: String,
    pub to_app: String,
    pub kind: ChannelKind,
    pub stall_timeout_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageKind {
    StaticCheck,
    SingleNode,
    Scaled,
    Live,
}

impl StageKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StageKind::StaticCheck => "static-check",
            StageKind::SingleNode => "single-node",
            StageKind::Scaled => "scaled",
            StageKind::Live => "live",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approval {
    Automatic,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: String,
    pub kind: StageKind,
    pub approval: Approval,
    pub timeout_ms: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub skip: bool,
    #[serde(default)]
    pub checks: Vec<CheckSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckKind {
    ExecutableExists,
    PathReadable,
    PathWritable,
    EnvVarSet,
    ConfigParses,
    PortFree,
    ChannelConnectable,
    LibraryResolvable,
}

impl CheckKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CheckKind::ExecutableExists => "executable-exists",
            CheckKind::PathReadable => "path-readable",
            CheckKind::PathWritable => "path-writable",
            CheckKind::EnvVarSet => "env-var-set",
            CheckKind::ConfigParses => "config-parses",
            CheckKind::PortFree => "port-free",
            CheckKind::ChannelConnectable => "channel-connectable",
            CheckKind::LibraryResolvable => "library-resolvable",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckSpec {
    pub id: String,
    pub kind: CheckKind,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkflowError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("schema violation in `{field}`: {message}")]
    Schema { field: String, message: String },
    #[error("duplicate {what} name `{name}`")]
    Duplicate { what: &'static str, name: String },
    #[error("channel `{channel}` references undeclared application `{endpoint}`")]
    DanglingEndpoint { channel: String, endpoint: String },
    #[error("cannot read workflow file: {0}")]
    Io(String),
}

impl WorkflowError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            WorkflowError::Syntax { .. } => "syntax",
            WorkflowError::Schema { .. } => "schema",
            WorkflowError::Duplicate { .. } => "duplicate",
            WorkflowError::DanglingEndpoint { .. } => "dangling-endpoint",
            WorkflowError::Io(_) => "io",
        }
    }

    fn schema(field: impl Into<String>, message: impl Into<String>) -> Self {
        WorkflowError::Schema {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Parses and validates a workflow document.
pub fn parse_workflow(text: &str) -> Result<WorkflowSpec, WorkflowError> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| {
        let (line, column) = e.span().map(|s| line_col(text, s.start)).unwrap_or((0, 0));
        WorkflowError::Syntax {
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    let mut spec: WorkflowSpec = serde_path_to_error::deserialize(toml::Value::Table(table))
        .map_err(|e| {
            let path = e.path().to_string();
            WorkflowError::schema(path, e.into_inner().to_string())
        })?;
    if spec.stages.is_empty() {
        spec.stages = default_stages(&spec.applications);
    }
    spec.validate()?;
    Ok(spec)
}

pub fn load_workflow(path: &Path) -> Result<WorkflowSpec, WorkflowError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| WorkflowError::Io(format!("{}: {e}", path.display())))?;
    parse_workflow(&text)
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before
        .rfind('\n')
        .map_or(before.len(), |i| before.len() - i - 1)
        + 1;
    (line, column)
}

/// Stages used when a document declares none: a static checklist that
/// verifies every application executable, an automatic single-node run and
/// a manually approved scaled run.
pub fn default_stages(apps: &[ApplicationSpec]) -> Vec<StageSpec> {
    let checks = apps
        .iter()
        .filter_map(|a| {
            a.command.first().map(|exe| CheckSpec {
                id: format!("exe-{}", a.name),
                kind: CheckKind::ExecutableExists,
                target: exe.clone(),
            })
        })
        .collect();
    vec![
        StageSpec {
            name: "static".into(),
            kind: StageKind::StaticCheck,
            approval: Approval::Automatic,
            timeout_ms: 30_000,
            skip: false,
            checks,
        },
        StageSpec {
            name: "single-node".into(),
            kind: StageKind::SingleNode,
            approval: Approval::Automatic,
            timeout_ms: 120_000,
            skip: false,
            checks: Vec::new(),
        },
        StageSpec {
            name: "scaled".into(),
            kind: StageKind::Scaled,
            approval: Approval::Manual,
            timeout_ms: 600_000,
            skip: false,
            checks: Vec::new(),
        },
    ]
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

impl WorkflowSpec {
    pub fn validate(&self) -> Result<(), WorkflowError> {
        if !is_identifier(&self.name) {
            return Err(WorkflowError::schema(
                "name",
                "must be a non-empty identifier",
            ));
        }
        if self.run.grace_multiplier < 1 {
            return Err(WorkflowError::schema(
                "run.grace_multiplier",
                "must be >= 1",
            ));
        }
        for (field, v) in [
            ("run.tick_ms", self.run.tick_ms),
            ("run.sample_ms", self.run.sample_ms),
            ("run.steer_timeout_ms", self.run.steer_timeout_ms),
        ] {
            if v == 0 {
                return Err(WorkflowError::schema(field, "must be positive"));
            }
        }

        let mut names = HashSet::new();
        for (i, app) in self.applications.iter().enumerate() {
            let at = |f: &str| format!("applications[{i}].{f}");
            if !is_identifier(&app.name) || app.name == OPERATOR {
                return Err(WorkflowError::schema(
                    at("name"),
                    "must be a non-empty identifier other than `operator`",
                ));
            }
            if !names.insert(app.name.as_str()) {
                return Err(WorkflowError::Duplicate {
                    what: "application",
                    name: app.name.clone(),
                });
            }
            if app.command.first().is_none_or(|c| c.is_empty()) {
                return Err(WorkflowError::schema(at("command"), "must be non-empty"));
            }
            if app.nodes < 1 {
                return Err(WorkflowError::schema(at("nodes"), "must be >= 1"));
            }
            if !(app.scale_factor > 0.0 && app.scale_factor <= 1.0) {
                return Err(WorkflowError::schema(
                    at("scale_factor"),
                    "must be in (0, 1]",
                ));
            }
            if app.heartbeat_interval_ms.is_some_and(|h| h < 10) {
                return Err(WorkflowError::schema(
                    at("heartbeat_interval_ms"),
                    "must be >= 10",
                ));
            }
            if !(0.0..=1.0).contains(&app.failure_probability) {
                return Err(WorkflowError::schema(
                    at("failure_probability"),
                    "must be in [0, 1]",
                ));
            }
            if app.sample_ms == Some(0) {
                return Err(WorkflowError::schema(at("sample_ms"), "must be positive"));
            }
            if let Some(p) = &app.log_pattern {
                if let Err(e) = regex::Regex::new(p) {
                    return Err(WorkflowError::schema(at("log_pattern"), e.to_string()));
                }
            }
        }

        let mut channel_names = HashSet::new();
        for (i, ch) in self.channels.iter().enumerate() {
            if !is_identifier(&ch.name) {
                return Err(WorkflowError::schema(
                    format!("channels[{i}].name"),
                    "must be a non-empty identifier",
                ));
            }
            if !channel_names.insert(ch.name.as_str()) {
                return Err(WorkflowError::Duplicate {
                    what: "channel",
                    name: ch.name.clone(),
                });
            }
            let from_ok = names.contains(ch.from_app.as_str())
                || (ch.kind == ChannelKind::Steering && ch.from_app == OPERATOR);
            if !from_ok {
                return Err(WorkflowError::DanglingEndpoint {
                    channel: ch.name.clone(),
                    endpoint: ch.from_app.clone(),
                });
            }
            if !names.contains(ch.to_app.as_str()) {
                return Err(WorkflowError::DanglingEndpoint {
                    channel: ch.name.clone(),
                    endpoint: ch.to_app.clone(),
                });
            }
            if ch.kind != ChannelKind::Steering && ch.from_app == ch.to_app {
                return Err(WorkflowError::schema(
                    format!("channels[{i}].to_app"),
                    "must differ from from_app",
                ));
            }
            if ch.stall_timeout_ms == 0 {
                return Err(WorkflowError::schema(
                    format!("channels[{i}].stall_timeout_ms"),
                    "must be positive",
                ));
            }
        }

        self.validate_stages()
    }

    fn validate_stages(&self) -> Result<(), WorkflowError> {
        let mut seen = HashSet::new();
        for (i, st) in self.stages.iter().enumerate() {
            if !is_identifier(&st.name) {
                return Err(WorkflowError::schema(
                    format!("stages[{i}].name"),
                    "must be a non-empty identifier",
                ));
            }
            if !seen.insert(st.name.as_str()) {
                return Err(WorkflowError::Duplicate {
                    what: "stage",
                    name: st.name.clone(),
                });
            }
            if st.timeout_ms == 0 {
                return Err(WorkflowError::schema(
                    format!("stages[{i}].timeout_ms"),
                    "must be positive",
                ));
            }
            if st.skip && st.kind != StageKind::Scaled {
                return Err(WorkflowError::schema(
                    format!("stages[{i}].skip"),
                    "only the scaled stage may be skipped",
                ));
            }
            if st.kind == StageKind::Live && st.approval == Approval::Manual {
                return Err(WorkflowError::schema(
                    format!("stages[{i}].approval"),
                    "the live stage follows the scaled run automatically",
                ));
            }
            let mut ids = HashSet::new();
            for (j, c) in st.checks.iter().enumerate() {
                if !is_identifier(&c.id) {
                    return Err(WorkflowError::schema(
                        format!("stages[{i}].checks[{j}].id"),
                        "must be a non-empty identifier",
                    ));
                }
                if !ids.insert(c.id.as_str()) {
                    return Err(WorkflowError::Duplicate {
                        what: "check",
                        name: c.id.clone(),
                    });
                }
                if c.target.is_empty() {
                    return Err(WorkflowError::schema(
                        format!("stages[{i}].checks[{j}].target"),
                        "must be non-empty",
                    ));
                }
            }
        }
        let kinds: Vec<StageKind> = self.stages.iter().map(|s| s.kind).collect();
        let valid = matches!(
            kinds.as_slice(),
            [
                StageKind::StaticCheck,
                StageKind::SingleNode,
                StageKind::Scaled
            ] | [
                StageKind::StaticCheck,
                StageKind::SingleNode,
                StageKind::Scaled,
                StageKind::Live
            ]
        );
        if !valid {
            return Err(WorkflowError::schema(
                "stages",
                "stage kinds must be, in order, static-check, single-node, scaled and optionally live",
            ));
        }
        Ok(())
    }

    /// Canonical TOML text of this spec.
    pub fn to_canonical(&self) -> String {
        toml::to_string(self).expect("workflow spec is always representable as TOML")
    }

    pub fn application(&self, name: &str) -> Option<&ApplicationSpec> {
        self.applications.iter().find(|a| a.name == name)
    }

    pub fn stage(&self, name: &str) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.name == name)
    }

    pub fn stage_of_kind(&self, kind: StageKind) -> Option<&StageSpec> {
        self.stages.iter().find(|s| s.kind == kind)
    }

    /// Failure priors in application order.
    pub fn failure_priors(&self) -> Vec<f64> {
        self.applications
            .iter()
            .map(|a| a.failure_probability)
            .collect()
    }
}
