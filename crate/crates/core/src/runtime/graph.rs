//! Operator DAG with JSON serialization.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type NodeId = u32;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {} values, got {}",
                shape.iter().product::<usize>(),
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn is_all_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRepr {
    shape: Vec<usize>,
    /// Base64 of little-endian f64 values.
    data: String,
}

impl Serialize for Tensor {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        TensorRepr {
            shape: self.shape.clone(),
            data: B64.encode(bytes),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for Tensor {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let r = TensorRepr::deserialize(d)?;
        let bytes = B64.decode(r.data.as_bytes()).map_err(D::Error::custom)?;
        if bytes.len() % 8 != 0 {
            return Err(D::Error::custom(
                "weight blob length is not a multiple of 8",
            ));
        }
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Tensor::new(r.shape, data).map_err(D::Error::custom)
    }
}

/// Operator kinds. Input slots are listed per variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum OpKind {
    /// Named graph input.
    Input {
        name: String,
    },
    /// Weight or bias blob.
    Const {
        value: Tensor,
    },
    /// `[x: (Ci, H, W), w: (Co, Ci, kh, kw)]`, zero padding, stride 1.
    Conv2D,
    /// `[x: (Ci, D, H, W), w: (Co, Ci, kd, kh, kw)]`, submanifold: sites
    /// where every input channel is zero stay zero.
    SparseConv3D,
    /// `[x, b]`, `b` broadcast along `axis` of `x`.
    BiasAdd {
        axis: usize,
    },
    Relu,
    /// `[x: (M, K), w: (K, N)]`.
    MatMul,
    /// `[a, b]` elementwise, equal shapes.
    Add,
    /// `[x]` to integers `clamp(round(x / scale), -127, 127)`.
    Quantize {
        scale: f64,
    },
    /// `[q]` to `q * scale`.
    Dequantize {
        scale: f64,
    },
    /// `[x, w, b]`: Conv2D, BiasAdd on axis 0, optional Relu.
    FusedConv2D {
        relu: bool,
    },
    /// `[x, w, b]`: MatMul, BiasAdd on axis 1, optional Relu.
    FusedMatMul {
        relu: bool,
    },
}

impl OpKind {
    pub fn arity(&self) -> usize {
        match self {
            OpKind::Input { .. } | OpKind::Const { .. } => 0,
            OpKind::Relu | OpKind::Quantize { .. } | OpKind::Dequantize { .. } => 1,
            OpKind::Conv2D
            | OpKind::SparseConv3D
            | OpKind::BiasAdd { .. }
            | OpKind::MatMul
            | OpKind::Add => 2,
            OpKind::FusedConv2D { .. } | OpKind::FusedMatMul { .. } => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Input { .. } => "Input",
            OpKind::Const { .. } => "Const",
            OpKind::Conv2D => "Conv2D",
            OpKind::SparseConv3D => "SparseConv3D",
            OpKind::BiasAdd { .. } => "BiasAdd",
            OpKind::Relu => "Relu",
            OpKind::MatMul => "MatMul",
            OpKind::Add => "Add",
            OpKind::Quantize { .. } => "Quantize",
            OpKind::Dequantize { .. } => "Dequantize",
            OpKind::FusedConv2D { .. } => "FusedConv2D",
            OpKind::FusedMatMul { .. } => "FusedMatMul",
        }
    }

    /// Input slot holding a weight tensor, for ops that have one.
    pub fn weight_slot(&self) -> Option<usize> {
        match self {
            OpKind::Conv2D
            | OpKind::SparseConv3D
            | OpKind::MatMul
            | OpKind::FusedConv2D { .. }
            | OpKind::FusedMatMul { .. } => Some(1),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub op: OpKind,
    pub inputs: Vec<NodeId>,
    pub attrs: BTreeMap<String, String>,
}

impl Node {
    pub fn new(id: NodeId, op: OpKind, inputs: Vec<NodeId>) -> Self {
        Node {
            id,
            op,
            inputs,
            attrs: BTreeMap::new(),
        }
    }
}

/// Acyclic operator graph. Each node produces one value; edges are the
/// node input lists.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    outputs: Vec<NodeId>,
}

impl ComputeGraph {
    pub fn new(nodes: Vec<Node>, outputs: Vec<NodeId>) -> Result<Self> {
        let g = ComputeGraph { nodes, outputs };
        g.validate()?;
        Ok(g)
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn next_id(&self) -> NodeId {
        self.nodes.iter().map(|n| n.id + 1).max().unwrap_or(0)
    }

    /// Names of the declared graph inputs.
    pub fn input_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                OpKind::Input { name } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Operator nodes, excluding inputs and constants.
    pub fn op_count(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, OpKind::Input { .. } | OpKind::Const { .. }))
            .count()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if seen.insert(n.id, i).is_some() {
                return Err(Error::Graph(format!("duplicate node id {}", n.id)));
            }
        }
        for n in &self.nodes {
            if n.inputs.len() != n.op.arity() {
                return Err(Error::Graph(format!(
                    "node {} ({}) has {} inputs, expected {}",
                    n.id,
                    n.op.name(),
                    n.inputs.len(),
                    n.op.arity()
                )));
            }
            if let Some(&bad) = n.inputs.iter().find(|i| !seen.contains_key(i)) {
                return Err(Error::Graph(format!(
                    "node {} reads missing node {bad}",
                    n.id
                )));
            }
        }
        if let Some(&bad) = self.outputs.iter().find(|o| !seen.contains_key(o)) {
            return Err(Error::Graph(format!("output {bad} is not a node")));
        }
        self.topo_order().map(|_| ())
    }

    /// Kahn's algorithm, smallest ready id first.
    pub fn topo_order(&self) -> Result<Vec<NodeId>> {
        let mut indeg: HashMap<NodeId, usize> = self.nodes.iter().map(|n| (n.id, 0)).collect();
        let mut users: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
        for n in &self.nodes {
            for &i in &n.inputs {
                *indeg.get_mut(&n.id).expect("node present") += 1;
                users.entry(i).or_default().push(n.id);
            }
        }
        let mut ready: BinaryHeap<Reverse<NodeId>> = indeg
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| Reverse(id))
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id);
            for &u in users.get(&id).map(Vec::as_slice).unwrap_or(&[]) {
                let d = indeg.get_mut(&u).expect("node present");
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(u));
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(Error::Graph("graph contains a cycle".into()));
        }
        Ok(order)
    }

    /// Number of uses of each node's value, counting graph outputs.
    pub fn use_counts(&self) -> HashMap<NodeId, usize> {
        let mut uses: HashMap<NodeId, usize> = self.nodes.iter().map(|n| (n.id, 0)).collect();
        for n in &self.nodes {
            for i in &n.inputs {
                *uses.entry(*i).or_default() += 1;
            }
        }
        for o in &self.outputs {
            *uses.entry(*o).or_default() += 1;
        }
        uses
    }

    /// Drop nodes that no output depends on. Input nodes are kept so the
    /// graph signature does not change.
    pub fn remove_dead(&mut self) -> usize {
        let by_id: HashMap<NodeId, &Node> = self.nodes.iter().map(|n| (n.id, n)).collect();
        let mut live: std::collections::HashSet<NodeId> = Default::default();
        let mut stack: Vec<NodeId> = self.outputs.clone();
        while let Some(id) = stack.pop() {
            if live.insert(id) {
                stack.extend(by_id[&id].inputs.iter().copied());
            }
        }
        let before = self.nodes.len();
        self.nodes
            .retain(|n| live.contains(&n.id) || matches!(n.op, OpKind::Input { .. }));
        before - self.nodes.len()
    }

    pub(crate) fn nodes_mut(&mut self) -> &mut Vec<Node> {
        &mut self.nodes
    }

    /// Replace every use of `from` (including as a graph output) with `to`.
    pub(crate) fn replace_uses(&mut self, from: NodeId, to: NodeId) {
        for n in &mut self.nodes {
            for i in &mut n.inputs {
                if *i == from {
                    *i = to;
                }
            }
        }
        for o in &mut self.outputs {
            if *o == from {
                *o = to;
            }
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&GraphRepr::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let repr: GraphRepr = serde_json::from_str(s)?;
        repr.try_into()
    }
}

#[derive(Serialize, Deserialize)]
struct NodeRepr {
    id: NodeId,
    op: OpKind,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    attrs: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct EdgeRepr {
    from: NodeId,
    to: NodeId,
    /// Input position on `to`.
    slot: usize,
}

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    nodes: Vec<NodeRepr>,
    edges: Vec<EdgeRepr>,
    outputs: Vec<NodeId>,
}

impl From<&ComputeGraph> for GraphRepr {
    fn from(g: &ComputeGraph) -> Self {
        let mut edges = Vec::new();
        for n in &g.nodes {
            for (slot, &from) in n.inputs.iter().enumerate() {
                edges.push(EdgeRepr {
                    from,
                    to: n.id,
                    slot,
                });
            }
        }
        GraphRepr {
            nodes: g
                .nodes
                .iter()
                .map(|n| NodeRepr {
                    id: n.id,
                    op: n.op.clone(),
                    attrs: n.attrs.clone(),
                })
                .collect(),
            edges,
            outputs: g.outputs.clone(),
        }
    }
}

impl TryFrom<GraphRepr> for ComputeGraph {
    type Error = Error;

    fn try_from(r: GraphRepr) -> Result<Self> {
        let mut slots: HashMap<NodeId, Vec<Option<NodeId>>> = r
            .nodes
            .iter()
            .map(|n| (n.id, vec![None; n.op.arity()]))
            .collect();
        for e in &r.edges {
            let s = slots
                .get_mut(&e.to)
                .ok_or_else(|| Error::Graph(format!("edge into missing node {}", e.to)))?;
            let cell = s.get_mut(e.slot).ok_or_else(|| {
                Error::Graph(format!(
                    "edge into node {} slot {} out of range",
                    e.to, e.slot
                ))
            })?;
            if cell.replace(e.from).is_some() {
                return Err(Error::Graph(format!(
                    "node {} slot {} has two producers",
                    e.to, e.slot
                )));
            }
        }
        let mut nodes = Vec::with_capacity(r.nodes.len());
        for n in r.nodes {
            let inputs = slots
                .remove(&n.id)
                .unwrap_or_default()
                .into_iter()
                .enumerate()
                .map(|(slot, v)| {
                    v.ok_or_else(|| Error::Graph(format!("node {} slot {slot} unconnected", n.id)))
                })
                .collect::<Result<Vec<_>>>()?;
            nodes.push(Node {
                id: n.id,
                op: n.op,
                inputs,
                attrs: n.attrs,
            });
        }
        ComputeGraph::new(nodes, r.outputs)
    }
}
