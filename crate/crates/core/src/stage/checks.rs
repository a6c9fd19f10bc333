use std::fs::{File, OpenOptions};
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::state::{CheckResult, Outcome};
use crate::companion::resolve_executable;
use crate::workflow::{CheckKind, CheckSpec, WorkflowSpec};

fn resolve(base: &Path, target: &str) -> PathBuf {
    let p = Path::new(target);
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

fn check_readable(path: &Path) -> Result<String, String> {
    let meta = std::fs::metadata(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if meta.is_dir() {
        std::fs::read_dir(path).map_err(|e| format!("{}: {e}", path.display()))?;
        return Ok(format!("{} is a readable directory", path.display()));
    }
    let mut f = File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let mut b = [0u8; 1];
    f.read(&mut b)
        .map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(format!("{} is readable", path.display()))
}

fn check_writable(path: &Path) -> Result<String, String> {
    let meta = std::fs::metadata(path).map_err(|e| format!("{}: {e}", path.display()))?;
    // Permission bits are checked explicitly: a privileged user could still
    // write, but the job would not run privileged.
    if meta.permissions().readonly() {
        return Err(format!("{} is read-only", path.display()));
    }
    if meta.is_dir() {
        let probe = path.join(format!(".copilot-probe-{}", std::process::id()));
        File::create(&probe).map_err(|e| format!("{}: {e}", path.display()))?;
        let _ = std::fs::remove_file(&probe);
        Ok(format!("{} is a writable directory", path.display()))
    } else {
        OpenOptions::new()
            .append(true)
            .open(path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
        Ok(format!("{} is writable", path.display()))
    }
}

fn check_config(path: &Path) -> Result<String, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let is_json = path.extension().is_some_and(|e| e == "json");
    if is_json {
        serde_json::from_str::<serde_json::Value>(&text)
            .map_err(|e| format!("{}: {e}", path.display()))?;
    } else {
        text.parse::<toml::Table>()
            .map_err(|e| format!("{}: {}", path.display(), e.message()))?;
    }
    Ok(format!("{} parses", path.display()))
}

fn check_port(target: &str) -> Result<String, String> {
    let addr = if target.contains(':') {
        target.to_string()
    } else {
        format!("127.0.0.1:{target}")
    };
    std::net::TcpListener::bind(&addr).map_err(|e| format!("{addr} is not free: {e}"))?;
    Ok(format!("{addr} is free"))
}

fn check_connectable(base: &Path, target: &str) -> Result<String, String> {
    if target.contains(':') && !target.contains('/') {
        std::net::TcpStream::connect(target).map_err(|e| format!("{target}: {e}"))?;
    } else {
        let path = resolve(base, target);
        std::os::unix::net::UnixStream::connect(&path)
            .map_err(|e| format!("{}: {e}", path.display()))?;
    }
    Ok(format!("{target} accepts connections"))
}

/// Runs one check. Paths are resolved against `base` (the workflow
/// directory); errors that prevent the check from running count as failures.
pub fn run_check(check: &CheckSpec, spec: &WorkflowSpec, base: &Path) -> (Outcome, String) {
    let t = check.target.as_str();
    let result = match check.kind {
        CheckKind::ExecutableExists => resolve_executable(t, Some(base), None)
            .map(|p| format!("found {}", p.display()))
            .map_err(|e| e.to_string()),
        CheckKind::PathReadable => check_readable(&resolve(base, t)),
        CheckKind::PathWritable => check_writable(&resolve(base, t)),
        CheckKind::EnvVarSet => {
            let in_env = std::env::var_os(t).is_some_and(|v| !v.is_empty());
            let in_spec = spec.applications.iter().any(|a| a.env.contains_key(t));
            if in_env || in_spec {
                Ok(format!("{t} is set"))
            } else {
                Err(format!("{t} is not set"))
            }
        }
        CheckKind::ConfigParses => check_config(&resolve(base, t)),
        CheckKind::PortFree => check_port(t),
        CheckKind::ChannelConnectable => check_connectable(base, t),
        CheckKind::LibraryResolvable => check_readable(&resolve(base, t)),
    };
    match result {
        Ok(d) => (Outcome::Pass, d),
        Err(d) => (Outcome::Fail, d),
    }
}

/// One result per check, in declaration order.
pub fn run_checks(
    stage: &str,
    checks: &[CheckSpec],
    spec: &WorkflowSpec,
    base: &Path,
) -> Vec<CheckResult> {
    checks
        .iter()
        .map(|c| {
            let t0 = Instant::now();
            let (outcome, detail) = run_check(c, spec, base);
            CheckResult {
                stage: stage.to_string(),
                check_id: c.id.clone(),
                outcome,
                detail,
                duration_ms: t0.elapsed().as_millis() as u64,
            }
        })
        .collect()
}
