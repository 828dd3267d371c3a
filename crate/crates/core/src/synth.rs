//! Seeded random instances for tests and benchmarks.

use rand::seq::index::sample;
use rand::Rng;

use crate::error::Result;
use crate::spconv::KernelSpec;
use crate::voxel::{Point, SparseVoxelTensor, VoxelGridSpec};

/// `active` distinct cells of a unit grid with features in `[-1, 1)`.
pub fn random_tensor<R: Rng + ?Sized>(
    rng: &mut R,
    extents: [usize; 3],
    active: usize,
    channels: usize,
) -> Result<SparseVoxelTensor> {
    let grid = VoxelGridSpec::unit(extents)?;
    let cells = grid.num_cells() as usize;
    let mut keys = sample(rng, cells, active.min(cells)).into_vec();
    keys.sort_unstable();
    let rows = keys
        .into_iter()
        .map(|k| {
            let c = grid.delinearize(k as u64).expect("key below cell count");
            let f = (0..channels).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (c, f)
        })
        .collect::<Vec<_>>();
    SparseVoxelTensor::from_rows(grid, channels, rows)
}

/// Active count for an occupancy fraction, rounded to nearest.
pub fn active_for(extents: [usize; 3], occupancy: f64) -> usize {
    let cells = extents.iter().product::<usize>() as f64;
    (occupancy.clamp(0.0, 1.0) * cells).round() as usize
}

/// Cubic kernel of side `k` with weights and bias in `[-1, 1)`.
pub fn random_kernel<R: Rng + ?Sized>(
    rng: &mut R,
    k: usize,
    in_channels: usize,
    out_channels: usize,
    with_bias: bool,
) -> Result<KernelSpec> {
    let n = k * k * k * in_channels * out_channels;
    let w = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b = with_bias.then(|| {
        (0..out_channels)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect()
    });
    KernelSpec::new([k; 3], in_channels, out_channels, w, b)
}

/// Points uniformly inside the grid volume, with a share landing outside.
pub fn random_points<R: Rng + ?Sized>(
    rng: &mut R,
    grid: &VoxelGridSpec,
    n: usize,
    outside: f64,
) -> Vec<Point> {
    let hi: [f64; 3] =
        std::array::from_fn(|a| grid.origin[a] + grid.extents[a] as f64 * grid.voxel_size[a]);
    (0..n)
        .map(|_| {
            let escape = rng.gen_bool(outside.clamp(0.0, 1.0));
            let p: [f64; 3] = std::array::from_fn(|a| {
                let span = hi[a] - grid.origin[a];
                if escape && a == 0 {
                    hi[a] + rng.gen_range(0.0..span)
                } else {
                    rng.gen_range(grid.origin[a]..hi[a])
                }
            });
            Point::new(p[0], p[1], p[2], rng.gen_range(0.0..=1.0)).expect("finite point")
        })
        .collect()
}
