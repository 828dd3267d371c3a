//! Graph-to-graph optimization passes: magnitude pruning, int8 weight
//! quantization, operator fusion and device placement tags.

use std::collections::{BTreeMap, HashMap, HashSet};

use super::graph::{ComputeGraph, Node, NodeId, OpKind, Tensor};
use super::interp::QMAX;

/// Result of [`prune_graph`].
#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub graph: ComputeGraph,
    /// Weight entries set to zero by the threshold.
    pub zeroed_weights: usize,
    /// Sum of |w| over the zeroed entries.
    pub removed_magnitude: f64,
    /// Nodes disconnected and dropped after rewiring.
    pub removed_nodes: usize,
}

/// Zero every constant entry with `|w| < threshold`, then bypass nodes whose
/// value is provably zero where the consumer is additive: `Add(x, 0)` and
/// `BiasAdd(x, 0)` both become `x`. Nodes left without a path to an output
/// are dropped. Nodes that were already dead before the pass are kept.
pub fn prune_graph(g: &ComputeGraph, threshold: f64) -> PruneOutcome {
    let mut graph = g.clone();
    let live_before = live_set(&graph);
    let mut zeroed_weights = 0;
    let mut removed_magnitude = 0.0;
    for n in graph.nodes_mut() {
        if let OpKind::Const { value } = &mut n.op {
            for w in value
                .data
                .iter_mut()
                .filter(|w| w.abs() < threshold && **w != 0.0)
            {
                removed_magnitude += w.abs();
                zeroed_weights += 1;
                *w = 0.0;
            }
        }
    }

    let zero = zero_values(&graph);
    let order = graph.topo_order().expect("pass input is a valid graph");
    for id in order {
        let node = graph.node(id).expect("id from topo order").clone();
        let keep = match node.op {
            OpKind::Add => match (
                zero.contains(&node.inputs[0]),
                zero.contains(&node.inputs[1]),
            ) {
                (false, true) => Some(node.inputs[0]),
                (true, false) => Some(node.inputs[1]),
                _ => None,
            },
            OpKind::BiasAdd { .. } if zero.contains(&node.inputs[1]) => Some(node.inputs[0]),
            _ => None,
        };
        if let Some(src) = keep {
            graph.replace_uses(id, src);
        }
    }

    let live_after = live_set(&graph);
    let before = graph.len();
    graph.nodes_mut().retain(|n| {
        live_after.contains(&n.id)
            || !live_before.contains(&n.id)
            || matches!(n.op, OpKind::Input { .. })
    });
    let removed_nodes = before - graph.len();
    debug_assert!(graph.validate().is_ok());
    PruneOutcome {
        graph,
        zeroed_weights,
        removed_magnitude,
        removed_nodes,
    }
}

fn live_set(g: &ComputeGraph) -> HashSet<NodeId> {
    let by_id: HashMap<NodeId, &Node> = g.nodes().iter().map(|n| (n.id, n)).collect();
    let mut live = HashSet::new();
    let mut stack = g.outputs().to_vec();
    while let Some(id) = stack.pop() {
        if live.insert(id) {
            stack.extend(by_id[&id].inputs.iter().copied());
        }
    }
    live
}

/// Nodes whose value is identically zero for every possible graph input.
fn zero_values(g: &ComputeGraph) -> HashSet<NodeId> {
    let mut zero = HashSet::new();
    for id in g.topo_order().expect("valid graph") {
        let n = g.node(id).expect("id from topo order");
        let z = |slot: usize| zero.contains(&n.inputs[slot]);
        let is_zero = match &n.op {
            OpKind::Input { .. } => false,
            OpKind::Const { value } => value.is_all_zero(),
            OpKind::Conv2D | OpKind::SparseConv3D | OpKind::MatMul => z(0) || z(1),
            OpKind::FusedConv2D { .. } | OpKind::FusedMatMul { .. } => (z(0) || z(1)) && z(2),
            OpKind::BiasAdd { .. } | OpKind::Add => z(0) && z(1),
            OpKind::Relu | OpKind::Quantize { .. } | OpKind::Dequantize { .. } => z(0),
        };
        if is_zero {
            zero.insert(id);
        }
    }
    zero
}

/// Symmetric per-tensor int8 encoding of one weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub scale: f64,
    pub codes: Vec<i8>,
}

impl QuantizedTensor {
    pub fn encode(t: &Tensor) -> Self {
        let scale = int8_scale(t);
        let codes = t
            .data
            .iter()
            .map(|w| (w / scale).round().clamp(-QMAX, QMAX) as i8)
            .collect();
        QuantizedTensor {
            shape: t.shape.clone(),
            scale,
            codes,
        }
    }

    pub fn decode(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .codes
                .iter()
                .map(|&q| f64::from(q) * self.scale)
                .collect(),
        }
    }
}

/// `max|w| / 127`, or 1 for an all-zero tensor.
pub fn int8_scale(t: &Tensor) -> f64 {
    let m = t.max_abs();
    if m == 0.0 {
        1.0
    } else {
        m / QMAX
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedGraph {
    pub graph: ComputeGraph,
    /// Scale per quantized constant, keyed by the constant's node id.
    pub scales: BTreeMap<NodeId, f64>,
}

/// Insert a Quantize/Dequantize pair between every constant and the weight
/// slots it feeds. Bias and other uses keep reading the float constant.
pub fn quantize_graph(g: &ComputeGraph) -> QuantizedGraph {
    let mut graph = g.clone();
    let mut scales = BTreeMap::new();
    let mut next = graph.next_id();

    let weight_uses: Vec<(NodeId, usize, NodeId)> = graph
        .nodes()
        .iter()
        .filter_map(|n| n.op.weight_slot().map(|s| (n.id, s, n.inputs[s])))
        .filter(|(_, _, src)| matches!(graph.node(*src).map(|p| &p.op), Some(OpKind::Const { .. })))
        .collect();

    let mut dq_of: BTreeMap<NodeId, NodeId> = BTreeMap::new();
    for &(_, _, src) in &weight_uses {
        if dq_of.contains_key(&src) {
            continue;
        }
        let OpKind::Const { value } = &graph.node(src).expect("checked above").op else {
            unreachable!("filtered to constants")
        };
        let scale = int8_scale(value);
        let (q, dq) = (next, next + 1);
        next += 2;
        graph
            .nodes_mut()
            .push(Node::new(q, OpKind::Quantize { scale }, vec![src]));
        graph
            .nodes_mut()
            .push(Node::new(dq, OpKind::Dequantize { scale }, vec![q]));
        scales.insert(src, scale);
        dq_of.insert(src, dq);
    }
    for (consumer, slot, src) in weight_uses {
        let dq = dq_of[&src];
        let n = graph
            .nodes_mut()
            .iter_mut()
            .find(|n| n.id == consumer)
            .expect("consumer exists");
        n.inputs[slot] = dq;
    }
    debug_assert!(graph.validate().is_ok());
    QuantizedGraph { graph, scales }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FusionPattern {
    /// `Relu(BiasAdd[axis 0](Conv2D(x, w), b))` to `FusedConv2D { relu: true }`.
    ConvBiasRelu,
    /// `BiasAdd[axis 1](MatMul(x, w), b)` to `FusedMatMul { relu: false }`.
    MatMulBias,
}

pub const DEFAULT_PATTERNS: [FusionPattern; 2] =
    [FusionPattern::ConvBiasRelu, FusionPattern::MatMulBias];

/// Apply each pattern in order. A chain fuses only when every intermediate
/// value has exactly one use and is not a graph output. The fused node takes
/// over the id of the chain's last node.
pub fn fuse_graph(g: &ComputeGraph, patterns: &[FusionPattern]) -> ComputeGraph {
    let mut graph = g.clone();
    for &p in patterns {
        let order = graph.topo_order().expect("pass input is a valid graph");
        for id in order {
            let uses = graph.use_counts();
            let Some(tail) = graph.node(id) else { continue };
            let Some((fused, inputs, absorbed)) = match_pattern(&graph, tail, p, &uses) else {
                continue;
            };
            let n = graph
                .nodes_mut()
                .iter_mut()
                .find(|n| n.id == id)
                .expect("tail exists");
            n.op = fused;
            n.inputs = inputs;
            let chain = match p {
                FusionPattern::ConvBiasRelu => "Conv2D+BiasAdd+Relu",
                FusionPattern::MatMulBias => "MatMul+BiasAdd",
            };
            n.attrs.insert("fused_from".into(), chain.into());
            graph.nodes_mut().retain(|n| !absorbed.contains(&n.id));
        }
    }
    debug_assert!(graph.validate().is_ok());
    graph
}

fn single_use(uses: &HashMap<NodeId, usize>, id: NodeId) -> bool {
    uses.get(&id) == Some(&1)
}

fn match_pattern(
    g: &ComputeGraph,
    tail: &Node,
    p: FusionPattern,
    uses: &HashMap<NodeId, usize>,
) -> Option<(OpKind, Vec<NodeId>, Vec<NodeId>)> {
    // graph outputs count as uses, so single_use also rules out outputs
    match p {
        FusionPattern::ConvBiasRelu => {
            if tail.op != OpKind::Relu {
                return None;
            }
            let bias = g.node(tail.inputs[0])?;
            if bias.op != (OpKind::BiasAdd { axis: 0 }) || !single_use(uses, bias.id) {
                return None;
            }
            let conv = g.node(bias.inputs[0])?;
            if conv.op != OpKind::Conv2D || !single_use(uses, conv.id) {
                return None;
            }
            Some((
                OpKind::FusedConv2D { relu: true },
                vec![conv.inputs[0], conv.inputs[1], bias.inputs[1]],
                vec![bias.id, conv.id],
            ))
        }
        FusionPattern::MatMulBias => {
            if tail.op != (OpKind::BiasAdd { axis: 1 }) {
                return None;
            }
            let mm = g.node(tail.inputs[0])?;
            if mm.op != OpKind::MatMul || !single_use(uses, mm.id) {
                return None;
            }
            Some((
                OpKind::FusedMatMul { relu: false },
                vec![mm.inputs[0], mm.inputs[1], tail.inputs[1]],
                vec![mm.id],
            ))
        }
    }
}

/// Tag compute-heavy operators for the accelerator and everything else for
/// the host. Annotation only; evaluation is unaffected.
pub fn annotate_placement(g: &ComputeGraph) -> ComputeGraph {
    let mut graph = g.clone();
    for n in graph.nodes_mut() {
        let device = match n.op {
            OpKind::Conv2D
            | OpKind::SparseConv3D
            | OpKind::MatMul
            | OpKind::FusedConv2D { .. }
            | OpKind::FusedMatMul { .. } => "accelerator",
            _ => "host",
        };
        n.attrs.insert("placement".into(), device.into());
    }
    graph
}
