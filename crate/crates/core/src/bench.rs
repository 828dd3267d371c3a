//! Op-count and makespan sweeps with CSV output.

use std::io::Write;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::runtime::{simulate_pipeline, PipelineSpec};
use crate::spconv::{dense_conv_oracle, fma_op_count, sparse_conv_with_workers, DenseVolume};
use crate::synth::{active_for, random_kernel, random_tensor};

/// Largest grid the dense oracle is asked to convolve.
pub const BENCH_CELL_CAP: usize = 64 * 64 * 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SpconvBenchRow {
    pub occupancy: f64,
    pub active_voxels: usize,
    pub sparse_fmas: u64,
    pub dense_fmas: u64,
    pub fma_ratio: f64,
    /// Mean wall time per repeat.
    pub sparse_ms: f64,
    pub dense_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpconvBench {
    pub extents: [usize; 3],
    pub kernel: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub repeats: usize,
    pub seed: u64,
    pub workers: usize,
}

/// One row per occupancy, sorted ascending. Each occupancy gets its own
/// seeded tensor and kernel.
pub fn bench_spconv(cfg: &SpconvBench, occupancies: &[f64]) -> Result<Vec<SpconvBenchRow>> {
    let cells: usize = cfg.extents.iter().product();
    if cells == 0 || cells > BENCH_CELL_CAP {
        return Err(Error::InvalidGrid(format!(
            "benchmark grid {:?} must have 1..={BENCH_CELL_CAP} cells",
            cfg.extents
        )));
    }
    if let Some(o) = occupancies.iter().find(|o| !(0.0..=1.0).contains(*o)) {
        return Err(Error::InvalidGrid(format!("occupancy {o} outside [0, 1]")));
    }
    let mut occ = occupancies.to_vec();
    occ.sort_by(f64::total_cmp);
    let repeats = cfg.repeats.max(1);
    occ.iter()
        .enumerate()
        .map(|(i, &o)| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i as u64));
            let t = random_tensor(
                &mut rng,
                cfg.extents,
                active_for(cfg.extents, o),
                cfg.in_channels,
            )?;
            let k = random_kernel(
                &mut rng,
                cfg.kernel,
                cfg.in_channels,
                cfg.out_channels,
                false,
            )?;
            let count = fma_op_count(&t, &k)?;

            let t0 = Instant::now();
            for _ in 0..repeats {
                sparse_conv_with_workers(&t, &k, cfg.workers)?;
            }
            let sparse_ms = t0.elapsed().as_secs_f64() * 1e3 / repeats as f64;
            let dense = DenseVolume::from_sparse(&t);
            let t1 = Instant::now();
            for _ in 0..repeats {
                dense_conv_oracle(&dense, &k)?;
            }
            let dense_ms = t1.elapsed().as_secs_f64() * 1e3 / repeats as f64;

            Ok(SpconvBenchRow {
                occupancy: o,
                active_voxels: t.len(),
                sparse_fmas: count.sparse_fmas,
                dense_fmas: count.dense_fmas,
                fma_ratio: count.ratio(),
                sparse_ms,
                dense_ms,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PipelineBenchRow {
    pub chunks: usize,
    pub transfer: f64,
    pub compute: f64,
    pub overlap_makespan: f64,
    pub serial_makespan: f64,
    /// `serial / overlap`; 1 when both are zero.
    pub speedup: f64,
}

/// Simulate each `(chunks, transfer, compute)` with and without overlap.
pub fn bench_pipeline(specs: &[(usize, f64, f64)]) -> Result<Vec<PipelineBenchRow>> {
    specs
        .iter()
        .map(|&(n, t, c)| {
            let overlap = simulate_pipeline(&PipelineSpec::new(n, t, c, true)?)?.makespan;
            let serial = simulate_pipeline(&PipelineSpec::new(n, t, c, false)?)?.makespan;
            let speedup = if overlap > 0.0 { serial / overlap } else { 1.0 };
            Ok(PipelineBenchRow {
                chunks: n,
                transfer: t,
                compute: c,
                overlap_makespan: overlap,
                serial_makespan: serial,
                speedup,
            })
        })
        .collect()
}

/// Serialize rows as CSV with a single header line.
pub fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}
