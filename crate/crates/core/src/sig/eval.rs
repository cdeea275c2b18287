use std::collections::{BTreeMap, BTreeSet, HashSet};

use super::graph::{ConnectedComponent, NodeId, OpKind};
use crate::error::{Error, Result};

pub type RawRecord = BTreeMap<String, String>;

fn distinct(tokens: &[String]) -> Vec<String> {
    let mut seen = HashSet::new();
    tokens.iter().filter(|t| seen.insert(t.as_str())).cloned().collect()
}

/// Evaluates the component's output for one raw record.
///
/// `read` splits on whitespace; `unigrams` keeps first occurrences;
/// `intersect` keeps the distinct tokens of its first input found in its
/// second, in first-input order; `set_intersect` returns the sorted common
/// tokens; `concat` appends.
pub fn eval_transform(component: &ConnectedComponent, record: &RawRecord) -> Result<Vec<String>> {
    let order = component.graph.validate()?;
    let mut values: BTreeMap<NodeId, Vec<String>> = BTreeMap::new();
    for id in order {
        let node = component.graph.node(id).expect("validated");
        let arg = |k: usize| &values[&node.inputs[k]];
        let out = match OpKind::parse(&node.op)? {
            OpKind::Read => {
                let field = node.field().expect("validated");
                let text = record
                    .get(field)
                    .ok_or_else(|| Error::MissingInput(field.to_string()))?;
                text.split_whitespace().map(str::to_string).collect()
            }
            OpKind::Lowercase => arg(0).iter().map(|t| t.to_lowercase()).collect(),
            OpKind::Unigrams => distinct(arg(0)),
            OpKind::Intersect => {
                let other: HashSet<&str> = arg(1).iter().map(String::as_str).collect();
                distinct(arg(0))
                    .into_iter()
                    .filter(|t| other.contains(t.as_str()))
                    .collect()
            }
            OpKind::SetIntersect => {
                let a: BTreeSet<&String> = arg(0).iter().collect();
                let b: BTreeSet<&String> = arg(1).iter().collect();
                a.intersection(&b).map(|t| (*t).clone()).collect()
            }
            OpKind::Concat => arg(0).iter().chain(arg(1)).cloned().collect(),
        };
        values.insert(id, out);
    }
    values
        .remove(&component.output)
        .ok_or_else(|| Error::InvalidGraph(format!("output {} not evaluated", component.output)))
}
