//! Edge-runtime layer: operator graph IR, reference interpreter,
//! optimization passes and scheduling models.

mod graph;
mod interp;
mod passes;
mod schedule;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use graph::{ComputeGraph, Node, NodeId, OpKind, Tensor};
pub use interp::{execute_graph, QMAX};
pub use passes::{
    annotate_placement, fuse_graph, int8_scale, prune_graph, quantize_graph, FusionPattern,
    PruneOutcome, QuantizedGraph, QuantizedTensor, DEFAULT_PATTERNS,
};
pub use schedule::{
    default_boundaries, plan_thread_stages, simulate_pipeline, EngineKind, PipelineRun,
    PipelineSpec, StageTrace, ThreadStagePlan, TimelineEvent,
};

/// A random well-formed graph together with inputs for it.
#[derive(Debug, Clone)]
pub struct RandomGraph {
    pub graph: ComputeGraph,
    pub inputs: BTreeMap<String, Tensor>,
}

/// Seeded generator for small graphs of at most `max_nodes` nodes, built
/// from conv or matmul blocks with optional bias, relu and residual adds.
/// Used by the pass equivalence checks.
pub fn random_graph(seed: u64, max_nodes: usize) -> RandomGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spatial = rng.gen_bool(0.5);
    let mut b = Builder::default();
    let mut cur_c = rng.gen_range(1..=3usize);
    let (h, w) = (rng.gen_range(2..=5usize), rng.gen_range(2..=5usize));
    let rows = rng.gen_range(1..=3usize);
    let x_shape = if spatial {
        vec![cur_c, h, w]
    } else {
        vec![rows, cur_c]
    };
    let x = b.push(OpKind::Input { name: "x".into() }, vec![]);
    let mut inputs = BTreeMap::new();
    inputs.insert("x".to_string(), rand_tensor(&mut rng, x_shape));

    let mut cur = x;
    // values available for residual adds, with their channel count
    let mut history = vec![(x, cur_c)];
    while b.nodes.len() < max_nodes {
        let room = max_nodes - b.nodes.len();
        let choice = rng.gen_range(0..10);
        if choice < 6 && room >= 2 {
            let out_c = rng.gen_range(1..=3usize);
            let w_shape = if spatial {
                let k = if rng.gen_bool(0.5) { 1 } else { 3 };
                vec![out_c, cur_c, k, k]
            } else {
                vec![cur_c, out_c]
            };
            let wt = b.push(
                OpKind::Const {
                    value: rand_tensor(&mut rng, w_shape),
                },
                vec![],
            );
            let op = if spatial {
                OpKind::Conv2D
            } else {
                OpKind::MatMul
            };
            cur = b.push(op, vec![cur, wt]);
            cur_c = out_c;
            if b.nodes.len() + 2 <= max_nodes && rng.gen_bool(0.7) {
                let bias = b.push(
                    OpKind::Const {
                        value: rand_tensor(&mut rng, vec![cur_c]),
                    },
                    vec![],
                );
                let axis = if spatial { 0 } else { 1 };
                cur = b.push(OpKind::BiasAdd { axis }, vec![cur, bias]);
            }
            history.push((cur, cur_c));
        } else if choice < 8 {
            cur = b.push(OpKind::Relu, vec![cur]);
            history.push((cur, cur_c));
        } else {
            let same: Vec<NodeId> = history
                .iter()
                .filter(|(id, c)| *c == cur_c && *id != cur)
                .map(|(id, _)| *id)
                .collect();
            if same.is_empty() {
                cur = b.push(OpKind::Relu, vec![cur]);
            } else {
                let other = same[rng.gen_range(0..same.len())];
                cur = b.push(OpKind::Add, vec![cur, other]);
            }
            history.push((cur, cur_c));
        }
    }
    let graph = ComputeGraph::new(b.nodes, vec![cur]).expect("generator builds valid graphs");
    RandomGraph { graph, inputs }
}

#[derive(Default)]
struct Builder {
    nodes: Vec<Node>,
}

impl Builder {
    fn push(&mut self, op: OpKind, inputs: Vec<NodeId>) -> NodeId {
        let id = self.nodes.len() as NodeId;
        self.nodes.push(Node::new(id, op, inputs));
        id
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("length matches shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_graphs_are_small_and_runnable() {
        for seed in 0..50 {
            let r = random_graph(seed, 12);
            assert!(r.graph.len() <= 12);
            execute_graph(&r.graph, &r.inputs).unwrap();
        }
    }

    #[test]
    fn json_round_trip() {
        let r = random_graph(7, 12);
        let g = annotate_placement(&r.graph);
        let back = ComputeGraph::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn json_rejects_double_producer() {
        let text = r#"{"nodes":[{"id":0,"op":{"kind":"Input","name":"x"}},{"id":1,"op":{"kind":"Relu"}}],
            "edges":[{"from":0,"to":1,"slot":0},{"from":0,"to":1,"slot":0}],"outputs":[1]}"#;
        assert!(ComputeGraph::from_json(text).is_err());
    }
}
