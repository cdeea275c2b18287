use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use super::graph::{ConnectedComponent, Node, NodeId, OpKind};

/// SHA-256 Merkle digest of a component, rendered as lowercase hex.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CanonicalKey(pub [u8; 32]);

impl CanonicalKey {
    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(Self(bytes.try_into().ok()?))
    }

    pub fn short(&self) -> String {
        self.to_hex()[..12].to_string()
    }
}

impl fmt::Debug for CanonicalKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CanonicalKey({})", self.short())
    }
}

impl fmt::Display for CanonicalKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl Serialize for CanonicalKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for CanonicalKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Self::from_hex(&s).ok_or_else(|| serde::de::Error::custom(format!("bad key `{s}`")))
    }
}

fn put(h: &mut Sha256, bytes: &[u8]) {
    h.update((bytes.len() as u64).to_le_bytes());
    h.update(bytes);
}

fn node_digest(node: &Node, index: &BTreeMap<NodeId, &Node>, memo: &mut BTreeMap<NodeId, [u8; 32]>) -> [u8; 32] {
    if let Some(d) = memo.get(&node.id) {
        return *d;
    }
    let mut children: Vec<[u8; 32]> = node.inputs.iter().map(|i| node_digest(index[i], index, memo)).collect();
    if OpKind::parse(&node.op).is_ok_and(OpKind::commutative) {
        children.sort_unstable();
    }
    let mut h = Sha256::new();
    put(&mut h, if children.is_empty() { b"leaf" } else { b"node" });
    put(&mut h, node.op.as_bytes());
    h.update((node.params.len() as u64).to_le_bytes());
    for (k, v) in &node.params {
        put(&mut h, k.as_bytes());
        put(&mut h, v.as_bytes());
    }
    h.update((children.len() as u64).to_le_bytes());
    for c in &children {
        h.update(c);
    }
    let d: [u8; 32] = h.finalize().into();
    memo.insert(node.id, d);
    d
}

/// Merkle digest of the component's output node. Node ids never enter the
/// hash; children of commutative ops are hashed in sorted order. A read
/// leaf's raw field is one of its params, so it is covered.
pub fn canonical_key(component: &ConnectedComponent) -> CanonicalKey {
    let index: BTreeMap<NodeId, &Node> = component.graph.nodes.iter().map(|n| (n.id, n)).collect();
    let mut memo = BTreeMap::new();
    CanonicalKey(node_digest(index[&component.output], &index, &mut memo))
}
