use super::{StageKind, WorkflowSpec};

/// Builds the reduced test version of a workflow: every component present,
/// every application confined to one node, stages after the single-node
/// run dropped.
pub fn reduce_to_single_node(spec: &WorkflowSpec) -> WorkflowSpec {
    let mut reduced = spec.clone();
    for app in &mut reduced.applications {
        app.nodes = 1;
    }
    if let Some(pos) = reduced
        .stages
        .iter()
        .position(|s| s.kind == StageKind::SingleNode)
    {
        reduced.stages.truncate(pos + 1);
    }
    reduced
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::parse_workflow;

    fn spec_with_nodes(nodes: &[u32]) -> WorkflowSpec {
        let mut text = String::from("name = \"w\"\n");
        for (i, n) in nodes.iter().enumerate() {
            text.push_str(&format!(
                "[[applications]]\nname = \"a{i}\"\ncommand = [\"/bin/true\"]\nnodes = {n}\n"
            ));
        }
        parse_workflow(&text).unwrap()
    }

    #[test]
    fn confines_every_app_to_one_node() {
        let spec = spec_with_nodes(&[8, 4, 2]);
        let reduced = reduce_to_single_node(&spec);
        let nodes: Vec<u32> = reduced.applications.iter().map(|a| a.nodes).collect();
        assert_eq!(nodes, [1, 1, 1]);
        let names: Vec<_> = reduced.applications.iter().map(|a| &a.name).collect();
        assert_eq!(names, ["a0", "a1", "a2"]);
        let kinds: Vec<_> = reduced.stages.iter().map(|s| s.kind).collect();
        assert_eq!(kinds, [StageKind::StaticCheck, StageKind::SingleNode]);
        assert_eq!(reduced.stages[0].checks, spec.stages[0].checks);
    }

    #[test]
    fn idempotent() {
        let spec = spec_with_nodes(&[1, 1]);
        let once = reduce_to_single_node(&spec);
        assert_eq!(once.applications, spec.applications);
        assert_eq!(reduce_to_single_node(&once), once);
    }
}
