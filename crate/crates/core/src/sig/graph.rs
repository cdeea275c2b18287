use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = u32;

/// Transformation vocabulary. `read` is the only leaf op.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Read,
    Lowercase,
    Unigrams,
    /// Tokens of the first input also present in the second, first input's order.
    Intersect,
    /// Sorted distinct tokens present in both inputs.
    SetIntersect,
    Concat,
}

impl OpKind {
    pub fn parse(label: &str) -> Result<Self> {
        Ok(match label {
            "read" => Self::Read,
            "lowercase" => Self::Lowercase,
            "unigrams" => Self::Unigrams,
            "intersect" => Self::Intersect,
            "set_intersect" => Self::SetIntersect,
            "concat" => Self::Concat,
            other => return Err(Error::InvalidGraph(format!("unknown op `{other}`"))),
        })
    }

    pub fn arity(self) -> usize {
        match self {
            Self::Read => 0,
            Self::Lowercase | Self::Unigrams => 1,
            Self::Intersect | Self::SetIntersect | Self::Concat => 2,
        }
    }

    /// Whether operand order cannot change the output.
    pub fn commutative(self) -> bool {
        matches!(self, Self::SetIntersect)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: NodeId,
    pub op: String,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub params: BTreeMap<String, String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inputs: Vec<NodeId>,
}

impl Node {
    pub fn read(id: NodeId, field: &str) -> Self {
        Self {
            id,
            op: "read".into(),
            params: BTreeMap::from([("field".to_string(), field.to_string())]),
            inputs: Vec::new(),
        }
    }

    pub fn op(id: NodeId, op: &str, inputs: &[NodeId]) -> Self {
        Self {
            id,
            op: op.into(),
            params: BTreeMap::new(),
            inputs: inputs.to_vec(),
        }
    }

    pub fn field(&self) -> Option<&str> {
        self.params.get("field").map(String::as_str)
    }
}

/// Feature transformation graph in its JSON form:
///
/// ```json
/// { "nodes": [ {"id": 1, "op": "read", "params": {"field": "A"}},
///              {"id": 2, "op": "unigrams", "inputs": [1]} ],
///   "outputs": [2] }
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformGraph {
    pub nodes: Vec<Node>,
    pub outputs: Vec<NodeId>,
    /// Set when the graph reads data that may change after arrival.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub mutable_data: bool,
}

impl TransformGraph {
    pub fn new(nodes: Vec<Node>, outputs: Vec<NodeId>) -> Self {
        Self {
            nodes,
            outputs,
            mutable_data: false,
        }
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn raw_reads(&self) -> BTreeSet<String> {
        self.nodes
            .iter()
            .filter_map(|n| n.field().map(str::to_string))
            .collect()
    }

    /// Checks ids, op arity, read parameters, output references and
    /// acyclicity. Returns node ids in topological order.
    pub fn validate(&self) -> Result<Vec<NodeId>> {
        let mut index: BTreeMap<NodeId, &Node> = BTreeMap::new();
        for n in &self.nodes {
            if index.insert(n.id, n).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate node id {}", n.id)));
            }
        }
        for n in &self.nodes {
            let kind = OpKind::parse(&n.op)?;
            if n.inputs.len() != kind.arity() {
                return Err(Error::InvalidGraph(format!(
                    "node {} (`{}`) has {} inputs, expected {}",
                    n.id,
                    n.op,
                    n.inputs.len(),
                    kind.arity()
                )));
            }
            if kind == OpKind::Read && n.field().is_none() {
                return Err(Error::InvalidGraph(format!("read node {} has no `field` param", n.id)));
            }
            if let Some(missing) = n.inputs.iter().find(|i| !index.contains_key(i)) {
                return Err(Error::InvalidGraph(format!(
                    "node {} reads unknown node {missing}",
                    n.id
                )));
            }
        }
        for o in &self.outputs {
            if !index.contains_key(o) {
                return Err(Error::InvalidGraph(format!("output {o} is not a node")));
            }
        }
        // Kahn's algorithm
        let mut indegree: BTreeMap<NodeId, usize> = index.keys().map(|&id| (id, 0)).collect();
        let mut users: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for n in &self.nodes {
            *indegree.get_mut(&n.id).expect("indexed") = n.inputs.len();
            for &i in &n.inputs {
                users.entry(i).or_default().push(n.id);
            }
        }
        let mut ready: Vec<NodeId> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&id, _)| id).collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(id) = ready.pop() {
            order.push(id);
            for &u in users.get(&id).map(Vec::as_slice).unwrap_or_default() {
                let d = indegree.get_mut(&u).expect("indexed");
                *d -= 1;
                if *d == 0 {
                    ready.push(u);
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(Error::InvalidGraph("graph contains a cycle".into()));
        }
        Ok(order)
    }
}

/// One weakly-connected piece of a graph feeding exactly one model input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectedComponent {
    pub graph: TransformGraph,
    pub output: NodeId,
}

fn find(parent: &mut BTreeMap<NodeId, NodeId>, x: NodeId) -> NodeId {
    let mut root = x;
    while parent[&root] != root {
        root = parent[&root];
    }
    let mut cur = x;
    while parent[&cur] != root {
        let next = parent[&cur];
        parent.insert(cur, root);
        cur = next;
    }
    root
}

/// Splits a graph into weakly-connected components, ordered by their
/// smallest raw field name and then by canonical key. Components without a
/// designated output are dropped; a component with several outputs is an
/// error.
pub fn extract_components(graph: &TransformGraph) -> Result<Vec<ConnectedComponent>> {
    graph.validate()?;
    let mut parent: BTreeMap<NodeId, NodeId> = graph.nodes.iter().map(|n| (n.id, n.id)).collect();
    for n in &graph.nodes {
        for &i in &n.inputs {
            let (a, b) = (find(&mut parent, n.id), find(&mut parent, i));
            if a != b {
                parent.insert(a.max(b), a.min(b));
            }
        }
    }
    let mut groups: BTreeMap<NodeId, Vec<&Node>> = BTreeMap::new();
    for n in &graph.nodes {
        let root = find(&mut parent, n.id);
        groups.entry(root).or_default().push(n);
    }
    let outputs: BTreeSet<NodeId> = graph.outputs.iter().copied().collect();
    let mut components = Vec::new();
    for nodes in groups.into_values() {
        let outs: Vec<NodeId> = nodes.iter().map(|n| n.id).filter(|id| outputs.contains(id)).collect();
        match outs.len() {
            0 => continue,
            1 => {}
            _ => {
                return Err(Error::InvalidGraph(format!(
                    "component with nodes {:?} feeds several outputs {outs:?}",
                    nodes.iter().map(|n| n.id).collect::<Vec<_>>()
                )))
            }
        }
        let sub = TransformGraph {
            nodes: nodes.into_iter().cloned().collect(),
            outputs: outs.clone(),
            mutable_data: graph.mutable_data,
        };
        components.push(ConnectedComponent {
            graph: sub,
            output: outs[0],
        });
    }
    let mut keyed: Vec<(String, super::CanonicalKey, ConnectedComponent)> = components
        .into_iter()
        .map(|c| {
            let first = c.graph.raw_reads().into_iter().next().unwrap_or_default();
            (first, super::canonical_key(&c), c)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    Ok(keyed.into_iter().map(|(_, _, c)| c).collect())
}
