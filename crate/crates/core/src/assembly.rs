//! Assembly sequences as prerequisite DAGs, and validation of part requests
//! against the progress made so far.

use std::collections::{BTreeSet, HashMap, HashSet};

use petgraph::algo::toposort;
use petgraph::graph::{DiGraph, NodeIndex};
use petgraph::visit::{Dfs, Reversed};
use petgraph::Direction::Incoming;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Where a part starts out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum PartSource {
    UserStation,
    RobotWorkspace,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssemblyStep {
    pub step_id: String,
    pub part_label: String,
    #[serde(default)]
    pub prerequisites: Vec<String>,
    pub source: PartSource,
}

/// On-disk plan document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanDocument {
    pub plan_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
    pub steps: Vec<AssemblyStep>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlanError {
    #[error("plan document is not valid JSON: {0}")]
    Json(String),
    #[error("plan has no steps")]
    Empty,
    #[error("duplicate step id '{0}'")]
    DuplicateStep(String),
    #[error("step '{step}' reuses part label '{label}'")]
    DuplicateLabel { step: String, label: String },
    #[error("step '{0}' lists itself as a prerequisite")]
    SelfPrerequisite(String),
    #[error("step '{step}' depends on unknown step '{missing}'")]
    DanglingPrerequisite { step: String, missing: String },
    #[error("prerequisite cycle through step '{0}'")]
    Cycle(String),
    #[error("no built-in plan named '{0}'")]
    UnknownBuiltin(String),
}

/// A validated plan. Immutable once loaded.
#[derive(Debug, Clone)]
pub struct AssemblyPlan {
    doc: PlanDocument,
    by_step: HashMap<String, usize>,
    by_label: HashMap<String, usize>,
    /// Position of each step (by index) in a fixed topological order.
    topo_rank: Vec<usize>,
    graph: DiGraph<usize, ()>,
}

pub const BUILTIN_PLANS: &[(&str, &str)] = &[
    ("gear_assembly", include_str!("../data/plans/gear_assembly.json")),
    ("gear_nutbolt", include_str!("../data/plans/gear_nutbolt.json")),
];

pub fn builtin_plan(name: &str) -> Result<AssemblyPlan, PlanError> {
    BUILTIN_PLANS
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| PlanError::UnknownBuiltin(name.to_string()))
        .and_then(|(_, doc)| load_plan(doc))
}

pub fn load_plan(document: &str) -> Result<AssemblyPlan, PlanError> {
    let doc: PlanDocument = serde_json::from_str(document).map_err(|e| PlanError::Json(e.to_string()))?;
    AssemblyPlan::from_document(doc)
}

impl AssemblyPlan {
    pub fn from_document(doc: PlanDocument) -> Result<Self, PlanError> {
        if doc.steps.is_empty() {
            return Err(PlanError::Empty);
        }
        let mut by_step = HashMap::new();
        let mut by_label = HashMap::new();
        for (i, step) in doc.steps.iter().enumerate() {
            if by_step.insert(step.step_id.clone(), i).is_some() {
                return Err(PlanError::DuplicateStep(step.step_id.clone()));
            }
            if by_label.insert(step.part_label.clone(), i).is_some() {
                return Err(PlanError::DuplicateLabel {
                    step: step.step_id.clone(),
                    label: step.part_label.clone(),
                });
            }
        }

        let mut graph = DiGraph::<usize, ()>::with_capacity(doc.steps.len(), 0);
        let nodes: Vec<NodeIndex> = (0..doc.steps.len()).map(|i| graph.add_node(i)).collect();
        for (i, step) in doc.steps.iter().enumerate() {
            for pre in &step.prerequisites {
                if *pre == step.step_id {
                    return Err(PlanError::SelfPrerequisite(step.step_id.clone()));
                }
                let &j = by_step.get(pre).ok_or_else(|| PlanError::DanglingPrerequisite {
                    step: step.step_id.clone(),
                    missing: pre.clone(),
                })?;
                // prerequisite -> dependent
                graph.update_edge(nodes[j], nodes[i], ());
            }
        }

        toposort(&graph, None)
            .map_err(|cycle| PlanError::Cycle(doc.steps[graph[cycle.node_id()]].step_id.clone()))?;
        // Kahn's order, breaking ties by position in the document.
        let mut indegree: Vec<usize> = nodes.iter().map(|&n| graph.neighbors_directed(n, Incoming).count()).collect();
        let mut ready: BTreeSet<usize> = (0..doc.steps.len()).filter(|&i| indegree[i] == 0).collect();
        let mut topo_rank = vec![0; doc.steps.len()];
        let mut rank = 0;
        while let Some(i) = ready.pop_first() {
            topo_rank[i] = rank;
            rank += 1;
            for next in graph.neighbors(nodes[i]) {
                let j = graph[next];
                indegree[j] -= 1;
                if indegree[j] == 0 {
                    ready.insert(j);
                }
            }
        }

        Ok(Self { doc, by_step, by_label, topo_rank, graph })
    }

    pub fn plan_id(&self) -> &str {
        &self.doc.plan_id
    }

    pub fn steps(&self) -> &[AssemblyStep] {
        &self.doc.steps
    }

    pub fn document(&self) -> &PlanDocument {
        &self.doc
    }

    pub fn step(&self, step_id: &str) -> Option<&AssemblyStep> {
        self.by_step.get(step_id).map(|&i| &self.doc.steps[i])
    }

    pub fn step_for_label(&self, label: &str) -> Option<&AssemblyStep> {
        self.by_label.get(label).map(|&i| &self.doc.steps[i])
    }

    /// Steps in a fixed topological order (prerequisites first).
    pub fn topological_steps(&self) -> Vec<&AssemblyStep> {
        let mut idx: Vec<usize> = (0..self.doc.steps.len()).collect();
        idx.sort_by_key(|&i| self.topo_rank[i]);
        idx.into_iter().map(|i| &self.doc.steps[i]).collect()
    }

    pub fn robot_steps(&self) -> impl Iterator<Item = &AssemblyStep> {
        self.doc.steps.iter().filter(|s| s.source == PartSource::RobotWorkspace)
    }

    /// Every step that must be assembled before `step_id`, direct or not.
    pub fn ancestors(&self, step_id: &str) -> Vec<&AssemblyStep> {
        let Some(&start) = self.by_step.get(step_id) else {
            return Vec::new();
        };
        let reversed = Reversed(&self.graph);
        let mut dfs = Dfs::new(reversed, NodeIndex::new(start));
        let mut found = Vec::new();
        while let Some(node) = dfs.next(reversed) {
            let i = self.graph[node];
            if i != start {
                found.push(i);
            }
        }
        found.sort_by_key(|&i| self.topo_rank[i]);
        found.into_iter().map(|i| &self.doc.steps[i]).collect()
    }
}

/// Progress through a plan.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanState {
    pub delivered: BTreeSet<String>,
    pub assembled: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StateError {
    #[error("unknown step '{0}'")]
    UnknownStep(String),
    #[error("step '{0}' is fetched by the robot and has not been delivered yet")]
    NotDelivered(String),
}

impl PlanState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn mark_delivered(&mut self, plan: &AssemblyPlan, step_id: &str) -> Result<(), StateError> {
        plan.step(step_id).ok_or_else(|| StateError::UnknownStep(step_id.to_string()))?;
        self.delivered.insert(step_id.to_string());
        Ok(())
    }

    pub fn mark_assembled(&mut self, plan: &AssemblyPlan, step_id: &str) -> Result<(), StateError> {
        let step = plan.step(step_id).ok_or_else(|| StateError::UnknownStep(step_id.to_string()))?;
        if step.source == PartSource::RobotWorkspace && !self.delivered.contains(step_id) {
            return Err(StateError::NotDelivered(step_id.to_string()));
        }
        self.assembled.insert(step_id.to_string());
        Ok(())
    }

    pub fn is_handled(&self, step_id: &str) -> bool {
        self.delivered.contains(step_id) || self.assembled.contains(step_id)
    }

    /// True once every robot-fetched step is assembled.
    pub fn robot_steps_complete(&self, plan: &AssemblyPlan) -> bool {
        plan.robot_steps().all(|s| self.assembled.contains(&s.step_id))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Validation {
    Allowed { step_id: String },
    /// Unmet prerequisites (step ids), prerequisites first.
    PrerequisiteNeeded { step_id: String, pending: Vec<String> },
    UnknownPart,
    AlreadyHandled { step_id: String },
}

/// Checks whether the part with `label` may be fetched now. A request is
/// allowed when every step upstream of it is assembled.
pub fn validate_request(plan: &AssemblyPlan, state: &PlanState, label: &str) -> Validation {
    let Some(step) = plan.step_for_label(label) else {
        return Validation::UnknownPart;
    };
    if state.is_handled(&step.step_id) {
        return Validation::AlreadyHandled { step_id: step.step_id.clone() };
    }
    let pending: Vec<String> = plan
        .ancestors(&step.step_id)
        .into_iter()
        .filter(|s| !state.assembled.contains(&s.step_id))
        .map(|s| s.step_id.clone())
        .collect();
    if pending.is_empty() {
        Validation::Allowed { step_id: step.step_id.clone() }
    } else {
        Validation::PrerequisiteNeeded { step_id: step.step_id.clone(), pending }
    }
}

/// Returns true when `ids` lists steps of `plan` with every prerequisite
/// before its dependents.
pub fn is_topological(plan: &AssemblyPlan, ids: &[String]) -> bool {
    let mut seen = HashSet::new();
    for id in ids {
        let Some(step) = plan.step(id) else { return false };
        if step.prerequisites.iter().any(|p| ids.contains(p) && !seen.contains(p)) {
            return false;
        }
        seen.insert(id.clone());
    }
    true
}
