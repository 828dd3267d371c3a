//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line, even when the run succeeds.

use std::collections::BTreeMap;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use voxroute::amdb::ProposalRegion;
use voxroute::dispatcher::{classify_scene, Dispatcher, ExpertKind, RouteThresholds};
use voxroute::fusion::{fuse, ProjectedPixels};
use voxroute::pipeline::{fixtures, run_pipeline, ImageSource, PipelineConfig};
use voxroute::runtime::{
    execute_graph, fuse_graph, random_graph, simulate_pipeline, OpKind, PipelineSpec,
    QuantizedTensor, Tensor, DEFAULT_PATTERNS,
};
use voxroute::scan::exclusive_prefix_sum_partitioned;
use voxroute::spconv::{dense_conv_oracle, fma_op_count, sparse_conv, DenseVolume};
use voxroute::synth::{active_for, random_kernel, random_tensor};
use voxroute::training::{
    adaptive_lr, balanced_probs, cross_entropy, smooth_l1, smooth_l1_grad, AdaptiveLrInput,
};
use voxroute::voxel::{SparseVoxelTensor, VoxelCoord, VoxelGridSpec};

/// Outcome of one criterion: pass flag plus a short measured summary.
type Verdict = (bool, String);
type Criterion = (&'static str, fn() -> Verdict);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("sparse/dense oracle equivalence", c01_oracle_equivalence),
        ("op-count reduction", c02_op_count),
        ("prefix-sum correctness", c03_prefix_sum),
        ("dispatcher decision table", c04_decision_table),
        ("balanced sampling and adaptive rate", c05_sampling_and_rate),
        ("fusion contract", c06_fusion_contract),
        ("graph passes", c07_graph_passes),
        ("pipeline model", c08_pipeline_model),
        ("loss checks", c09_losses),
        ("end-to-end fixtures", c10_fixtures),
    ];
    let start = Instant::now();
    let mut failures = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let (ok, detail) = match std::panic::catch_unwind(check) {
            Ok(v) => v,
            Err(_) => (false, "panicked".to_string()),
        };
        if !ok {
            failures += 1;
        }
        let tag = if ok { "PASS" } else { "FAIL" };
        println!("criterion {:>2} {tag}  {name}: {detail}", i + 1);
    }
    let total = start.elapsed();
    let suite_ok = total < Duration::from_secs(120);
    println!(
        "acceptance suite {} in {:.2} s ({failures} failing)",
        if suite_ok {
            "finished"
        } else {
            "exceeded two minutes"
        },
        total.as_secs_f64()
    );
    if failures == 0 && suite_ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// 1. ------------------------------------------------------------------------

fn c01_oracle_equivalence() -> Verdict {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA1);
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let extents = [
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
            rng.gen_range(1..=8),
        ];
        let occ = rng.gen_range(0.0..=0.2);
        let k = if rng.gen_bool(0.5) { 1 } else { 3 };
        let (ci, co) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let with_bias = rng.gen_bool(0.5);
        let t = random_tensor(&mut rng, extents, active_for(extents, occ), ci).unwrap();
        let kernel = random_kernel(&mut rng, k, ci, co, with_bias).unwrap();
        let sparse = sparse_conv(&t, &kernel).unwrap();
        let dense = dense_conv_oracle(&DenseVolume::from_sparse(&t), &kernel).unwrap();
        if sparse.coords() != t.coords() {
            return (false, "output active set differs from input".into());
        }
        for (c, row) in sparse.rows() {
            let at = [c.x as usize, c.y as usize, c.z as usize];
            for (a, b) in row.iter().zip(dense.at(at)) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    (
        worst <= 1e-9 && elapsed < 30.0,
        format!("200 instances, max |sparse - dense| = {worst:.3e} (tol 1e-9), {elapsed:.2} s (limit 30 s)"),
    )
}

// 2. ------------------------------------------------------------------------

fn c02_op_count() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA2);
    let extents = [16; 3];
    let t = random_tensor(&mut rng, extents, active_for(extents, 0.02), 4).unwrap();
    let kernel = random_kernel(&mut rng, 3, 4, 4, false).unwrap();
    let count = fma_op_count(&t, &kernel).unwrap();
    let ratio = count.ratio();
    (
        ratio <= 0.02,
        format!(
            "{} active, sparse {} / dense {} FMAs = {ratio:.5} (limit 0.02)",
            t.len(),
            count.sparse_fmas,
            count.dense_fmas
        ),
    )
}

// 3. ------------------------------------------------------------------------

fn c03_prefix_sum() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA3);
    for case in 0..1000 {
        let len = rng.gen_range(0..=100_000);
        let flags: Vec<u64> = (0..len).map(|_| rng.gen_range(0..4)).collect();
        let mut expected = Vec::with_capacity(len);
        let mut acc = 0u64;
        for &f in &flags {
            expected.push(acc);
            acc += f;
        }
        for workers in [1, 2, 8] {
            let (offsets, total) = exclusive_prefix_sum_partitioned(&flags, workers);
            if offsets != expected || total != acc {
                return (
                    false,
                    format!("case {case} (len {len}) differs with {workers} workers"),
                );
            }
        }
    }
    (
        true,
        "1000 inputs up to 1e5 long, identical for 1/2/8 workers".into(),
    )
}

// 4. ------------------------------------------------------------------------

fn c04_decision_table() -> Verdict {
    let th = RouteThresholds::default();
    // (far, clear) for each cell of the pattern grid
    let patterns = [(false, true), (false, false), (true, true), (true, false)];
    let t0 = Instant::now();
    let mut wrong = Vec::new();
    for mask in 1u32..16 {
        let chosen: Vec<(bool, bool)> = (0..4)
            .filter(|b| mask & (1 << b) != 0)
            .map(|b| patterns[b])
            .collect();
        let proposals: Vec<ProposalRegion> = chosen
            .iter()
            .map(|&(far, clear)| {
                let d = if far {
                    th.distance_d + 6.5
                } else {
                    th.distance_d - 13.5
                };
                let c = if clear {
                    th.confidence_c + 0.3
                } else {
                    th.confidence_c - 0.3
                };
                ProposalRegion::at_distance(d, c).unwrap()
            })
            .collect();
        let expected = if chosen.contains(&(true, false)) {
            ExpertKind::Ape
        } else if chosen.iter().any(|&(far, clear)| far == clear) {
            // near-unclear or far-clear
            ExpertKind::Vee
        } else {
            ExpertKind::Lpe
        };
        let got = classify_scene(&proposals, &th).expert;
        if got != expected {
            wrong.push(format!("mask {mask:04b}: {got:?} != {expected:?}"));
        }
    }
    let elapsed = t0.elapsed().as_secs_f64();
    (
        wrong.is_empty() && elapsed < 1.0,
        if wrong.is_empty() {
            format!(
                "15/15 subsets routed as expected in {:.3} ms (limit 1 s)",
                elapsed * 1e3
            )
        } else {
            wrong.join("; ")
        },
    )
}

// 5. ------------------------------------------------------------------------

fn c05_sampling_and_rate() -> Verdict {
    let probs = balanced_probs(&[100, 200, 700]).unwrap();
    let want = [0.608696, 0.304348, 0.086957];
    let gap = probs
        .iter()
        .zip(want)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let base = 1e-3;
    let mut exact = true;
    for (hits, p) in [(0, 0.0), (1, 0.25), (2, 0.5), (4, 1.0)] {
        let flags = (0..4).map(|i| i < hits).collect();
        let lr = adaptive_lr(&AdaptiveLrInput {
            base_rate: base,
            batch_flags: flags,
        })
        .unwrap();
        exact &= lr == base * (1.0 + p);
    }
    (
        gap <= 1e-6 && exact,
        format!("probs {probs:.6?} (max gap {gap:.1e}, tol 1e-6); adaptive rate exact: {exact}"),
    )
}

// 6. ------------------------------------------------------------------------

fn c06_fusion_contract() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(0xA6);
    let mut cases = [0usize; 3];
    for scene in 0..100 {
        let extents = [
            rng.gen_range(2..=8),
            rng.gen_range(2..=8),
            rng.gen_range(2..=8),
        ];
        let grid = VoxelGridSpec::unit(extents).unwrap();
        let cl = rng.gen_range(1..=4);
        let ci = rng.gen_range(1..=3);
        let active = rng.gen_range(0..=grid.num_cells() as usize / 3);
        let lidar = random_tensor(&mut rng, extents, active, cl).unwrap();

        let n_entries = rng.gen_range(0..40);
        let entries: Vec<(VoxelCoord, Vec<f64>)> = (0..n_entries)
            .map(|_| {
                let c = VoxelCoord::new(
                    rng.gen_range(0..extents[0] as i32),
                    rng.gen_range(0..extents[1] as i32),
                    rng.gen_range(0..extents[2] as i32),
                );
                (c, (0..ci).map(|_| rng.gen_range(-2.0..2.0)).collect())
            })
            .collect();
        let projected = ProjectedPixels {
            channels: ci,
            entries,
            dropped: 0,
        };
        let proposals: Vec<ProposalRegion> = (0..rng.gen_range(0..=3))
            .map(|_| {
                let lo: [f64; 3] = std::array::from_fn(|a| rng.gen_range(0.0..extents[a] as f64));
                let hi: [f64; 3] = std::array::from_fn(|a| lo[a] + rng.gen_range(0.0..4.0));
                ProposalRegion::new(lo, hi, rng.gen_range(0.0..=1.0)).unwrap()
            })
            .collect();

        let fused = fuse(&lidar, &projected, &proposals).unwrap();
        if let Err(e) = check_fusion(&lidar, &projected, &proposals, &fused, &mut cases) {
            return (false, format!("scene {scene}: {e}"));
        }
    }
    (
        true,
        format!(
            "100 scenes; lidar+image {}, image-only {}, lidar-only {} rows; lidar channels bit-exact",
            cases[0], cases[1], cases[2]
        ),
    )
}

fn check_fusion(
    lidar: &SparseVoxelTensor,
    projected: &ProjectedPixels,
    proposals: &[ProposalRegion],
    fused: &SparseVoxelTensor,
    cases: &mut [usize; 3],
) -> Result<(), String> {
    let (cl, ci) = (lidar.channels(), projected.channels);
    if fused.channels() != cl + ci {
        return Err(format!(
            "{} channels, expected {}",
            fused.channels(),
            cl + ci
        ));
    }
    let grid = lidar.grid();
    let mut sums: BTreeMap<VoxelCoord, (Vec<f64>, usize)> = BTreeMap::new();
    for (c, f) in &projected.entries {
        let center = grid.cell_center(*c);
        if proposals.iter().any(|p| p.contains(center)) {
            let e = sums.entry(*c).or_insert_with(|| (vec![0.0; ci], 0));
            e.0.iter_mut().zip(f).for_each(|(a, v)| *a += v);
            e.1 += 1;
        }
    }
    let mut expected: Vec<VoxelCoord> = lidar.coords().to_vec();
    expected.extend(sums.keys().filter(|c| lidar.coord_lookup(**c).is_none()));
    expected.sort();
    if fused.coords() != expected.as_slice() {
        return Err("fused active set is not lidar cells plus in-region pixel cells".into());
    }
    for (c, row) in fused.rows() {
        let (lpart, ipart) = row.split_at(cl);
        match lidar.coord_lookup(c) {
            Some(r) => {
                let same = lpart
                    .iter()
                    .zip(lidar.row(r))
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if !same {
                    return Err(format!("lidar channels at {c} changed"));
                }
            }
            None => {
                if lpart.iter().any(|&v| v != 0.0) {
                    return Err(format!("image-only voxel {c} has nonzero lidar part"));
                }
            }
        }
        match sums.get(&c) {
            Some((sum, n)) => {
                for (a, s) in ipart.iter().zip(sum) {
                    if (a - s / *n as f64).abs() > 1e-12 {
                        return Err(format!("image mean at {c} off"));
                    }
                }
                cases[if lidar.coord_lookup(c).is_some() {
                    0
                } else {
                    1
                }] += 1;
            }
            None => {
                if ipart.iter().any(|&v| v != 0.0) {
                    return Err(format!("voxel {c} without pixels has nonzero image part"));
                }
                cases[2] += 1;
            }
        }
    }
    Ok(())
}

// 7. ------------------------------------------------------------------------

fn c07_graph_passes() -> Verdict {
    let mut worst_diff: f64 = 0.0;
    let mut weights = 0usize;
    for seed in 0..100 {
        let rg = random_graph(seed, 12);
        let fused = fuse_graph(&rg.graph, &DEFAULT_PATTERNS);
        if fuse_graph(&fused, &DEFAULT_PATTERNS) != fused {
            return (
                false,
                format!("seed {seed}: fusing twice changed the graph"),
            );
        }
        let a = execute_graph(&rg.graph, &rg.inputs).unwrap();
        let b = execute_graph(&fused, &rg.inputs).unwrap();
        for (x, y) in a.iter().zip(&b) {
            if x.shape != y.shape {
                return (false, format!("seed {seed}: output shape changed"));
            }
            for (p, q) in x.data.iter().zip(&y.data) {
                worst_diff = worst_diff.max((p - q).abs());
            }
        }
        for node in rg.graph.nodes() {
            if let OpKind::Const { value } = &node.op {
                if let Err(e) = check_int8(value) {
                    return (false, format!("seed {seed} node {}: {e}", node.id));
                }
                weights += value.data.len();
            }
        }
    }
    (
        worst_diff <= 1e-6,
        format!("100 graphs, fused max diff {worst_diff:.3e} (tol 1e-6), idempotent; {weights} weights within scale/2"),
    )
}

fn check_int8(t: &Tensor) -> Result<(), String> {
    let q = QuantizedTensor::encode(t);
    let back = q.decode();
    for (w, d) in t.data.iter().zip(&back.data) {
        if (w - d).abs() > q.scale / 2.0 {
            return Err(format!("weight {w} decoded to {d} with scale {}", q.scale));
        }
    }
    Ok(())
}

// 8. ------------------------------------------------------------------------

fn c08_pipeline_model() -> Verdict {
    let run = |n, t, c, overlap| {
        simulate_pipeline(&PipelineSpec::new(n, t, c, overlap).unwrap())
            .unwrap()
            .makespan
    };
    let (ov, se) = (run(4, 2.0, 3.0, true), run(4, 2.0, 3.0, false));
    if ov != 14.0 || se != 20.0 {
        return (false, format!("n=4 t=2 c=3 gave {ov}/{se}, expected 14/20"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xA8);
    for i in 0..500 {
        let n = rng.gen_range(1..=40);
        let t = if rng.gen_bool(0.1) {
            0.0
        } else {
            rng.gen_range(0.0..10.0)
        };
        let c = if rng.gen_bool(0.1) {
            0.0
        } else {
            rng.gen_range(0.0..10.0)
        };
        let (o, s) = (run(n, t, c, true), run(n, t, c, false));
        if o > s {
            return (false, format!("sweep point {i}: overlap {o} > serial {s}"));
        }
    }
    (
        true,
        "n=4,t=2,c=3 -> 14 overlap / 20 serial; overlap <= serial on 500 points".into(),
    )
}

// 9. ------------------------------------------------------------------------

fn c09_losses() -> Verdict {
    let mut worst: f64 = 0.0;
    for beta in [0.5, 1.0, 2.0] {
        for x in [0.5 * beta, beta, 2.0 * beta] {
            for x in [x, -x] {
                let h = 1e-6;
                let f = |v: f64| smooth_l1(&[v], &[0.0], beta).unwrap();
                let fd = (f(x + h) - f(x - h)) / (2.0 * h);
                let g = smooth_l1_grad(&[x], &[0.0], beta).unwrap()[0];
                worst = worst.max((fd - g).abs());
            }
        }
    }
    let third = 1.0 / 3.0;
    let ce = cross_entropy(&[third, third, third], 1).unwrap();
    let ce_gap = (ce - 3f64.ln()).abs();
    (
        worst <= 1e-6 && ce_gap <= 1e-9,
        format!("max gradient gap {worst:.3e} (tol 1e-6); |CE - ln 3| = {ce_gap:.1e} (tol 1e-9)"),
    )
}

// 10. -----------------------------------------------------------------------

fn c10_fixtures() -> Verdict {
    let cfg = PipelineConfig::reference();
    let models = cfg.load_models().unwrap();
    let d = Dispatcher::new(cfg.dispatch).unwrap();

    let near = run_pipeline(
        &fixtures::near_cluster(7),
        ImageSource::None,
        &cfg,
        &models,
        &d,
        2,
    )
    .unwrap();
    let near_ok = near.decision.expert == ExpertKind::Lpe && near.detections.len() == 1;

    let far = run_pipeline(
        &fixtures::far_low_confidence(7),
        ImageSource::None,
        &cfg,
        &models,
        &d,
        2,
    );
    let far_ok = matches!(far, Err(voxroute::Error::MissingModality));

    let empty = run_pipeline(&[], ImageSource::None, &cfg, &models, &d, 2).unwrap();
    let empty_ok = empty.decision.expert == ExpertKind::Lpe && empty.detections.is_empty();

    (
        near_ok && far_ok && empty_ok,
        format!("LPE cluster {near_ok}, APE missing modality {far_ok}, empty scene LPE {empty_ok}"),
    )
}
