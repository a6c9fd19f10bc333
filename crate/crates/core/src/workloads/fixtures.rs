//! Bundled workflows built from mock applications.
//!
//! The bundled workflow files name the mock as `copilot-mock` and expect it
//! on `PATH`. [`Fixture::materialize`] writes a copy into a directory with
//! an explicit mock path instead.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::workflow::{parse_workflow, WorkflowSpec};

pub const MOCK_COMMAND: &str = "copilot-mock";

#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub workflow: String,
    /// Files relative to the workflow directory, with their content.
    pub files: Vec<(String, String)>,
}

macro_rules! bundled {
    ($dir:literal, [$($file:literal),* $(,)?]) => {
        Fixture {
            workflow: include_str!(concat!("../../../../fixtures/", $dir, "/workflow.toml")).to_string(),
            files: vec![$((
                $file.to_string(),
                include_str!(concat!("../../../../fixtures/", $dir, "/", $file)).to_string(),
            )),*],
        }
    };
}

pub fn usecase1() -> Fixture {
    bundled!(
        "usecase1",
        [
            "behavior/nest.toml",
            "behavior/arbor.toml",
            "behavior/tvb.toml",
            "behavior/elephant.toml",
            "behavior/viz.toml",
        ]
    )
}

pub fn usecase2() -> Fixture {
    bundled!(
        "usecase2",
        [
            "behavior/simulator.toml",
            "behavior/robot.toml",
            "behavior/learner.toml",
            "behavior/viz.toml",
        ]
    )
}

/// Three simulators, an analysis and a visualization sink.
pub fn fixture_usecase1() -> WorkflowSpec {
    parse_workflow(&usecase1().workflow).expect("bundled fixture is valid")
}

/// Simulator, robot, learner and visualization sink in a closed loop.
pub fn fixture_usecase2() -> WorkflowSpec {
    parse_workflow(&usecase2().workflow).expect("bundled fixture is valid")
}

fn toml_str(s: &str) -> String {
    toml::Value::String(s.to_string()).to_string()
}

impl Fixture {
    /// Writes the workflow and its files under `dir`, pointing every mock
    /// command at `mock_exe`. Returns the workflow file path.
    pub fn materialize(&self, dir: &Path, mock_exe: &Path) -> std::io::Result<PathBuf> {
        std::fs::create_dir_all(dir.join("out"))?;
        for (rel, content) in &self.files {
            let path = dir.join(rel);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, content)?;
        }
        let workflow = self.workflow.replace(
            &toml_str(MOCK_COMMAND),
            &toml_str(&mock_exe.display().to_string()),
        );
        let path = dir.join("workflow.toml");
        std::fs::write(&path, workflow)?;
        Ok(path)
    }

    /// Reads a workflow file and every regular file under its directory.
    /// Paths under `out/` are skipped.
    pub fn from_dir(workflow: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(workflow)?;
        let root = workflow.parent().unwrap_or(Path::new("."));
        let mut files = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir)? {
                let path = entry?.path();
                let rel = path.strip_prefix(root).unwrap_or(&path).to_path_buf();
                if rel.starts_with("out") || path == workflow {
                    continue;
                }
                if path.is_dir() {
                    stack.push(path);
                } else if let Ok(content) = std::fs::read_to_string(&path) {
                    files.push((rel.display().to_string(), content));
                }
            }
        }
        files.sort();
        Ok(Self {
            workflow: text,
            files,
        })
    }

    pub fn replace_file(&mut self, rel: &str, content: String) {
        match self.files.iter_mut().find(|(r, _)| r == rel) {
            Some(slot) => slot.1 = content,
            None => self.files.push((rel.to_string(), content)),
        }
    }

    pub fn file(&self, rel: &str) -> Option<&str> {
        self.files
            .iter()
            .find(|(r, _)| r == rel)
            .map(|(_, c)| c.as_str())
    }
}

/// Parameters of the ring fixture used for chaos experiments.
#[derive(Debug, Clone, PartialEq)]
pub struct RingParams {
    pub apps: usize,
    pub failure_probability: f64,
    pub iterations: u64,
    pub step_ms: u64,
    pub heartbeat_every: u64,
    pub heartbeat_interval_ms: u64,
    pub tick_ms: u64,
    pub stall_timeout_ms: u64,
    pub bytes_per_step: u64,
}

impl Default for RingParams {
    fn default() -> Self {
        Self {
            apps: 4,
            failure_probability: 0.0,
            iterations: 100,
            step_ms: 10,
            heartbeat_every: 5,
            heartbeat_interval_ms: 200,
            tick_ms: 50,
            stall_timeout_ms: 500,
            bytes_per_step: 1024,
        }
    }
}

/// `apps` mocks passing data around a ring, each with a shared library and
/// a configuration file the static stage verifies.
pub fn ring(p: &RingParams) -> Fixture {
    let n = p.apps.max(2);
    let name = |i: usize| format!("c{i}");
    let mut w = String::new();
    let _ = writeln!(w, "name = \"ring{n}\"\n");
    let _ = writeln!(w, "[run]\ntick_ms = {}\ngrace_multiplier = 2\n", p.tick_ms);
    for i in 0..n {
        let _ = writeln!(
            w,
            "[[applications]]\nname = \"{}\"\ncommand = [{}, \"--behavior\", \"behavior/{}.toml\"]\n\
             heartbeat_interval_ms = {}\nfailure_probability = {:?}\n",
            name(i),
            toml_str(MOCK_COMMAND),
            name(i),
            p.heartbeat_interval_ms,
            p.failure_probability,
        );
    }
    for i in 0..n {
        let _ = writeln!(
            w,
            "[[channels]]\nname = \"r{i}\"\nfrom_app = \"{}\"\nto_app = \"{}\"\nkind = \"bulk_data\"\nstall_timeout_ms = {}\n",
            name(i),
            name((i + 1) % n),
            p.stall_timeout_ms,
        );
    }
    let _ = writeln!(w, "[[stages]]\nname = \"static\"\nkind = \"static-check\"\napproval = \"automatic\"\ntimeout_ms = 30000\nchecks = [");
    for i in 0..n {
        let _ = writeln!(
            w,
            "  {{ id = \"exe-{0}\", kind = \"executable-exists\", target = {1} }},\n  \
             {{ id = \"cfg-{0}\", kind = \"config-parses\", target = \"behavior/{0}.toml\" }},\n  \
             {{ id = \"params-{0}\", kind = \"config-parses\", target = \"config/{0}.toml\" }},",
            name(i),
            toml_str(MOCK_COMMAND),
        );
    }
    let _ = writeln!(
        w,
        "  {{ id = \"libsim\", kind = \"library-resolvable\", target = \"lib/libsim.so\" }},\n]\n"
    );
    let _ = writeln!(
        w,
        "[[stages]]\nname = \"single-node\"\nkind = \"single-node\"\napproval = \"automatic\"\ntimeout_ms = 20000\n\n\
         [[stages]]\nname = \"scaled\"\nkind = \"scaled\"\napproval = \"manual\"\ntimeout_ms = 60000"
    );

    let mut files = vec![(
        "lib/libsim.so".to_string(),
        "\x7fELF mock shared object\n".to_string(),
    )];
    for i in 0..n {
        let prev = (i + n - 1) % n;
        files.push((
            format!("behavior/{}.toml", name(i)),
            format!(
                "iterations = {}\nstep_ms = {}\nheartbeat_every = {}\n\n\
                 [[channels]]\nname = \"r{i}\"\nbytes_per_step = {}\ndirection = \"send\"\n\n\
                 [[channels]]\nname = \"r{prev}\"\ndirection = \"recv\"\n",
                p.iterations, p.step_ms, p.heartbeat_every, p.bytes_per_step,
            ),
        ));
        files.push((
            format!("config/{}.toml", name(i)),
            format!("component = \"{}\"\nresolution = 0.1\n", name(i)),
        ));
    }
    Fixture { workflow: w, files }
}
