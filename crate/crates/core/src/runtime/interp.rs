//! Reference interpreter for [`ComputeGraph`].

use std::collections::{BTreeMap, HashMap};

use super::graph::{ComputeGraph, NodeId, OpKind, Tensor};
use crate::error::{Error, Result};
use crate::spconv::{sparse_conv_with_workers, KernelSpec};
use crate::voxel::{SparseVoxelTensor, VoxelCoord, VoxelGridSpec};

/// Largest magnitude an int8 code may take in the symmetric scheme.
pub const QMAX: f64 = 127.0;

/// Evaluate `g` in topological order. `inputs` is keyed by input-node name
/// and must cover exactly the declared inputs. Returns one tensor per graph
/// output, in output order.
pub fn execute_graph(g: &ComputeGraph, inputs: &BTreeMap<String, Tensor>) -> Result<Vec<Tensor>> {
    let order = g.topo_order()?;
    let declared = g.input_names();
    if let Some(extra) = inputs.keys().find(|k| !declared.contains(&k.as_str())) {
        return Err(Error::Graph(format!("unknown graph input {extra:?}")));
    }
    let by_id: HashMap<NodeId, usize> = g
        .nodes()
        .iter()
        .enumerate()
        .map(|(i, n)| (n.id, i))
        .collect();
    let mut values: HashMap<NodeId, Tensor> = HashMap::with_capacity(g.len());
    for id in order {
        let node = &g.nodes()[by_id[&id]];
        let args: Vec<&Tensor> = node.inputs.iter().map(|i| &values[i]).collect();
        let out = match &node.op {
            OpKind::Input { name } => inputs
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Graph(format!("missing graph input {name:?}")))?,
            OpKind::Const { value } => value.clone(),
            OpKind::Conv2D => conv2d(args[0], args[1])?,
            OpKind::SparseConv3D => sparse_conv3d(args[0], args[1])?,
            OpKind::BiasAdd { axis } => bias_add(args[0].clone(), args[1], *axis)?,
            OpKind::Relu => relu(args[0].clone()),
            OpKind::MatMul => matmul(args[0], args[1])?,
            OpKind::Add => add(args[0], args[1])?,
            OpKind::Quantize { scale } => quantize(args[0], *scale)?,
            OpKind::Dequantize { scale } => dequantize(args[0], *scale),
            OpKind::FusedConv2D { relu: r } => {
                let y = bias_add(conv2d(args[0], args[1])?, args[2], 0)?;
                if *r {
                    relu(y)
                } else {
                    y
                }
            }
            OpKind::FusedMatMul { relu: r } => {
                let y = bias_add(matmul(args[0], args[1])?, args[2], 1)?;
                if *r {
                    relu(y)
                } else {
                    y
                }
            }
        };
        values.insert(id, out);
    }
    Ok(g.outputs().iter().map(|o| values[o].clone()).collect())
}

fn op_err(op: &str, msg: impl std::fmt::Display) -> Error {
    Error::Graph(format!("{op}: {msg}"))
}

fn conv2d(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (&[ci, h, wd], &[co, wci, kh, kw]) = (x.shape.as_slice(), w.shape.as_slice()) else {
        return Err(op_err(
            "Conv2D",
            format!("bad shapes {:?} * {:?}", x.shape, w.shape),
        ));
    };
    if ci != wci || kh % 2 == 0 || kw % 2 == 0 {
        return Err(op_err(
            "Conv2D",
            format!("bad shapes {:?} * {:?}", x.shape, w.shape),
        ));
    }
    let (hy, hx) = ((kh / 2) as isize, (kw / 2) as isize);
    let mut out = vec![0.0; co * h * wd];
    for o in 0..co {
        for y in 0..h {
            for xx in 0..wd {
                let mut acc = 0.0;
                for c in 0..ci {
                    for ky in 0..kh {
                        let sy = y as isize + ky as isize - hy;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let sx = xx as isize + kx as isize - hx;
                            if sx < 0 || sx >= wd as isize {
                                continue;
                            }
                            acc += x.data[(c * h + sy as usize) * wd + sx as usize]
                                * w.data[((o * ci + c) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(o * h + y) * wd + xx] = acc;
            }
        }
    }
    Tensor::new(vec![co, h, wd], out)
}

/// Dense-in, dense-out wrapper around the rulebook convolution. Active sites
/// are those with any nonzero input channel.
fn sparse_conv3d(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (&[ci, d, h, wd], &[co, wci, kd, kh, kw]) = (x.shape.as_slice(), w.shape.as_slice()) else {
        return Err(op_err(
            "SparseConv3D",
            format!("bad shapes {:?} * {:?}", x.shape, w.shape),
        ));
    };
    if ci != wci {
        return Err(op_err(
            "SparseConv3D",
            format!("bad shapes {:?} * {:?}", x.shape, w.shape),
        ));
    }
    let plane = d * h * wd;
    let taps = kd * kh * kw;
    let mut kweights = vec![0.0; taps * ci * co];
    for o in 0..co {
        for c in 0..ci {
            for t in 0..taps {
                kweights[(t * ci + c) * co + o] = w.data[(o * ci + c) * taps + t];
            }
        }
    }
    let kernel = KernelSpec::new([kd, kh, kw], ci, co, kweights, None)?;
    let grid = VoxelGridSpec::unit([d, h, wd])?;
    let rows = (0..plane).filter_map(|s| {
        let f: Vec<f64> = (0..ci).map(|c| x.data[c * plane + s]).collect();
        f.iter().any(|&v| v != 0.0).then(|| {
            let c = VoxelCoord::new(
                (s / (h * wd)) as i32,
                ((s / wd) % h) as i32,
                (s % wd) as i32,
            );
            (c, f)
        })
    });
    let sparse = SparseVoxelTensor::from_rows(grid, ci, rows)?;
    let y = sparse_conv_with_workers(&sparse, &kernel, 1)?;
    let mut out = vec![0.0; co * plane];
    for (c, f) in y.rows() {
        let s = (c.x as usize * h + c.y as usize) * wd + c.z as usize;
        for (o, v) in f.iter().enumerate() {
            out[o * plane + s] = *v;
        }
    }
    Tensor::new(vec![co, d, h, wd], out)
}

fn bias_add(mut x: Tensor, b: &Tensor, axis: usize) -> Result<Tensor> {
    let Some(&len) = x.shape.get(axis) else {
        return Err(op_err(
            "BiasAdd",
            format!("axis {axis} out of range for {:?}", x.shape),
        ));
    };
    if b.data.len() != len {
        return Err(op_err(
            "BiasAdd",
            format!("bias of {} for axis length {len}", b.data.len()),
        ));
    }
    let inner: usize = x.shape[axis + 1..].iter().product();
    for (i, v) in x.data.iter_mut().enumerate() {
        *v += b.data[(i / inner) % len];
    }
    Ok(x)
}

fn relu(mut x: Tensor) -> Tensor {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

fn matmul(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (&[m, k], &[wk, n]) = (x.shape.as_slice(), w.shape.as_slice()) else {
        return Err(op_err(
            "MatMul",
            format!("bad shapes {:?} * {:?}", x.shape, w.shape),
        ));
    };
    if k != wk {
        return Err(op_err(
            "MatMul",
            format!("bad shapes {:?} * {:?}", x.shape, w.shape),
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[i * n + j] = (0..k).map(|l| x.data[i * k + l] * w.data[l * n + j]).sum();
        }
    }
    Tensor::new(vec![m, n], out)
}

fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape != b.shape {
        return Err(op_err(
            "Add",
            format!("shapes {:?} and {:?} differ", a.shape, b.shape),
        ));
    }
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape.clone(), data)
}

fn quantize(x: &Tensor, scale: f64) -> Result<Tensor> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(op_err(
            "Quantize",
            format!("scale {scale} must be positive"),
        ));
    }
    let data = x
        .data
        .iter()
        .map(|v| (v / scale).round().clamp(-QMAX, QMAX))
        .collect();
    Tensor::new(x.shape.clone(), data)
}

fn dequantize(q: &Tensor, scale: f64) -> Tensor {
    Tensor {
        shape: q.shape.clone(),
        data: q.data.iter().map(|v| v * scale).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::runtime::graph::Node;

    fn inputs(name: &str, t: Tensor) -> BTreeMap<String, Tensor> {
        BTreeMap::from([(name.to_string(), t)])
    }

    #[test]
    fn identity_passthrough() {
        let g = ComputeGraph::new(
            vec![Node::new(0, OpKind::Input { name: "x".into() }, vec![])],
            vec![0],
        )
        .unwrap();
        let x = Tensor::vector(vec![1.0, -2.0, 3.5]);
        assert_eq!(execute_graph(&g, &inputs("x", x.clone())).unwrap(), vec![x]);
    }

    #[test]
    fn relu_example() {
        let g = ComputeGraph::new(
            vec![
                Node::new(0, OpKind::Input { name: "x".into() }, vec![]),
                Node::new(1, OpKind::Relu, vec![0]),
            ],
            vec![1],
        )
        .unwrap();
        let out = execute_graph(&g, &inputs("x", Tensor::vector(vec![-1.0, 2.0]))).unwrap();
        assert_eq!(out[0].data, vec![0.0, 2.0]);
    }

    #[test]
    fn missing_input_is_error() {
        let g = ComputeGraph::new(
            vec![Node::new(0, OpKind::Input { name: "x".into() }, vec![])],
            vec![0],
        )
        .unwrap();
        assert!(matches!(
            execute_graph(&g, &BTreeMap::new()),
            Err(Error::Graph(_))
        ));
    }

    #[test]
    fn cycle_is_rejected() {
        let r = ComputeGraph::new(
            vec![
                Node::new(0, OpKind::Relu, vec![1]),
                Node::new(1, OpKind::Relu, vec![0]),
            ],
            vec![1],
        );
        assert!(matches!(r, Err(Error::Graph(_))));
    }

    #[test]
    fn bias_add_axes() {
        let x = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        let rows = bias_add(x.clone(), &Tensor::vector(vec![1.0, 2.0]), 0).unwrap();
        assert_eq!(rows.data, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let cols = bias_add(x, &Tensor::vector(vec![1.0, 2.0, 3.0]), 1).unwrap();
        assert_eq!(cols.data, vec![1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn quantize_clamps_and_rounds() {
        let q = quantize(&Tensor::vector(vec![0.26, -1000.0, 0.24]), 0.5).unwrap();
        assert_eq!(q.data, vec![1.0, -127.0, 0.0]);
    }

    #[test]
    fn sparse_conv3d_keeps_inactive_sites_zero() {
        let mut x = Tensor::zeros(vec![1, 3, 3, 3]);
        x.data[13] = 2.0; // center
        let w = Tensor::new(vec![1, 1, 3, 3, 3], vec![1.0; 27]).unwrap();
        let y = sparse_conv3d(&x, &w).unwrap();
        assert_eq!(y.data[13], 2.0);
        assert_eq!(y.data.iter().filter(|&&v| v != 0.0).count(), 1);
    }
}
