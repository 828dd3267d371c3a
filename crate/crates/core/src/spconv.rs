//! Submanifold sparse 3D convolution.
//!
//! Execution is split into two phases. [`build_rulebook`] aligns the kernel
//! center on every active voxel, looks up each tap's neighbor through the
//! tensor's sorted key index and compacts the hits into per-offset
//! `(input_row, output_row)` lists with an exclusive prefix sum.
//! [`apply_rulebook`] then gathers, multiplies and accumulates per output
//! voxel. Output sites equal input sites.
//!
//! Accumulation for an output voxel visits kernel taps in ascending offset
//! order no matter how the outputs are partitioned, so results are
//! bit-identical for any worker count.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scan::exclusive_prefix_sum_partitioned;
use crate::voxel::SparseVoxelTensor;

const NO_NEIGHBOR: u32 = u32::MAX;

/// 3D convolution kernel. Weights are laid out `[tap][c_in][c_out]`, taps in
/// row-major order over the kernel window with x slowest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    size: [usize; 3],
    in_channels: usize,
    out_channels: usize,
    weights: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl KernelSpec {
    pub fn new(
        size: [usize; 3],
        in_channels: usize,
        out_channels: usize,
        weights: Vec<f64>,
        bias: Option<Vec<f64>>,
    ) -> Result<Self> {
        if size.contains(&0) {
            return Err(Error::UnsupportedKernel(format!(
                "zero kernel size {size:?}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::Shape(
                "kernel channel counts must be positive".into(),
            ));
        }
        let taps: usize = size.iter().product();
        if weights.len() != taps * in_channels * out_channels {
            return Err(Error::Shape(format!(
                "kernel {size:?} x {in_channels} x {out_channels} needs {} weights, got {}",
                taps * in_channels * out_channels,
                weights.len()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != out_channels {
                return Err(Error::Shape(format!(
                    "bias has {} entries, expected {out_channels}",
                    b.len()
                )));
            }
        }
        Ok(KernelSpec {
            size,
            in_channels,
            out_channels,
            weights,
            bias,
        })
    }

    pub fn zeros(size: [usize; 3], in_channels: usize, out_channels: usize) -> Result<Self> {
        let taps: usize = size.iter().product();
        Self::new(
            size,
            in_channels,
            out_channels,
            vec![0.0; taps * in_channels * out_channels],
            None,
        )
    }

    /// 1x1x1 kernel copying input channels to output channels.
    pub fn identity(channels: usize) -> Result<Self> {
        let mut w = vec![0.0; channels * channels];
        for c in 0..channels {
            w[c * channels + c] = 1.0;
        }
        Self::new([1, 1, 1], channels, channels, w, None)
    }

    pub fn size(&self) -> [usize; 3] {
        self.size
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn set_bias(&mut self, bias: Option<Vec<f64>>) -> Result<()> {
        if let Some(b) = &bias {
            if b.len() != self.out_channels {
                return Err(Error::Shape("bias length".into()));
            }
        }
        self.bias = bias;
        Ok(())
    }

    pub fn volume(&self) -> usize {
        self.size.iter().product()
    }

    pub fn is_odd(&self) -> bool {
        self.size.iter().all(|s| s % 2 == 1)
    }

    /// Tap displacements relative to the kernel center, in weight order.
    pub fn offsets(&self) -> Vec<[i32; 3]> {
        let half = self.size.map(|s| (s / 2) as i32);
        let [kx, ky, kz] = self.size.map(|s| s as i32);
        let mut out = Vec::with_capacity(self.volume());
        for x in 0..kx {
            for y in 0..ky {
                for z in 0..kz {
                    out.push([x - half[0], y - half[1], z - half[2]]);
                }
            }
        }
        out
    }

    /// Weight for `(tap, c_in, c_out)`.
    pub fn weight(&self, tap: usize, ci: usize, co: usize) -> f64 {
        self.weights[(tap * self.in_channels + ci) * self.out_channels + co]
    }

    fn tap_matrix(&self, tap: usize) -> &[f64] {
        let n = self.in_channels * self.out_channels;
        &self.weights[tap * n..(tap + 1) * n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RulePair {
    pub input: u32,
    pub output: u32,
}

/// Per-kernel-offset gather/scatter lists.
#[derive(Debug, Clone, PartialEq)]
pub struct Rulebook {
    offsets: Vec<[i32; 3]>,
    pairs: Vec<Vec<RulePair>>,
    num_inputs: usize,
    num_outputs: usize,
}

impl Rulebook {
    pub fn offsets(&self) -> &[[i32; 3]] {
        &self.offsets
    }

    /// Pairs for tap `k`, sorted by output row then input row.
    pub fn pairs(&self, k: usize) -> &[RulePair] {
        &self.pairs[k]
    }

    pub fn num_offsets(&self) -> usize {
        self.offsets.len()
    }

    pub fn num_outputs(&self) -> usize {
        self.num_outputs
    }

    pub fn num_inputs(&self) -> usize {
        self.num_inputs
    }

    pub fn total_pairs(&self) -> usize {
        self.pairs.iter().map(Vec::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, RulePair)> + '_ {
        self.pairs
            .iter()
            .enumerate()
            .flat_map(|(k, ps)| ps.iter().map(move |&p| (k, p)))
    }
}

fn default_workers() -> usize {
    rayon::current_num_threads()
}

fn check_kernel(kernel: &KernelSpec) -> Result<()> {
    if !kernel.is_odd() {
        return Err(Error::UnsupportedKernel(format!(
            "kernel size {:?} must be odd on every axis",
            kernel.size
        )));
    }
    Ok(())
}

pub fn build_rulebook(input: &SparseVoxelTensor, kernel: &KernelSpec) -> Result<Rulebook> {
    build_rulebook_with_workers(input, kernel, default_workers())
}

pub fn build_rulebook_with_workers(
    input: &SparseVoxelTensor,
    kernel: &KernelSpec,
    workers: usize,
) -> Result<Rulebook> {
    check_kernel(kernel)?;
    let offsets = kernel.offsets();
    let taps = offsets.len();
    let n = input.len();
    let table = neighbor_table(input, &offsets, workers);

    let mut pairs = Vec::with_capacity(taps);
    for k in 0..taps {
        let flags: Vec<u64> = (0..n)
            .map(|i| u64::from(table[i * taps + k] != NO_NEIGHBOR))
            .collect();
        let (slots, total) = exclusive_prefix_sum_partitioned(&flags, workers);
        let mut list = vec![
            RulePair {
                input: 0,
                output: 0
            };
            total as usize
        ];
        for i in 0..n {
            let j = table[i * taps + k];
            if j != NO_NEIGHBOR {
                list[slots[i] as usize] = RulePair {
                    input: j,
                    output: i as u32,
                };
            }
        }
        pairs.push(list);
    }
    Ok(Rulebook {
        offsets,
        pairs,
        num_inputs: n,
        num_outputs: n,
    })
}

/// `table[i * taps + k]` is the input row sitting at `coord(i) + offsets[k]`.
fn neighbor_table(input: &SparseVoxelTensor, offsets: &[[i32; 3]], workers: usize) -> Vec<u32> {
    let taps = offsets.len();
    let n = input.len();
    let mut table = vec![NO_NEIGHBOR; n * taps];
    if n == 0 {
        return table;
    }
    let rows_per_part = n.div_ceil(workers.max(1));
    table
        .par_chunks_mut(rows_per_part * taps)
        .enumerate()
        .for_each(|(part, chunk)| {
            let first = part * rows_per_part;
            for (local, row) in chunk.chunks_exact_mut(taps).enumerate() {
                let center = input.coord(first + local);
                for (slot, d) in row.iter_mut().zip(offsets) {
                    if let Some(j) = input.coord_lookup(center.offset(*d)) {
                        *slot = j as u32;
                    }
                }
            }
        });
    table
}

pub fn sparse_conv(input: &SparseVoxelTensor, kernel: &KernelSpec) -> Result<SparseVoxelTensor> {
    sparse_conv_with_workers(input, kernel, default_workers())
}

pub fn sparse_conv_with_workers(
    input: &SparseVoxelTensor,
    kernel: &KernelSpec,
    workers: usize,
) -> Result<SparseVoxelTensor> {
    check_channels(input, kernel)?;
    let rulebook = build_rulebook_with_workers(input, kernel, workers)?;
    apply_rulebook(input, kernel, &rulebook, workers)
}

fn check_channels(input: &SparseVoxelTensor, kernel: &KernelSpec) -> Result<()> {
    if input.channels() != kernel.in_channels {
        return Err(Error::Shape(format!(
            "input has {} channels, kernel expects {}",
            input.channels(),
            kernel.in_channels
        )));
    }
    Ok(())
}

/// Gather-multiply-accumulate over a prebuilt rulebook.
pub fn apply_rulebook(
    input: &SparseVoxelTensor,
    kernel: &KernelSpec,
    rulebook: &Rulebook,
    workers: usize,
) -> Result<SparseVoxelTensor> {
    check_channels(input, kernel)?;
    if rulebook.num_offsets() != kernel.volume() || rulebook.num_inputs() != input.len() {
        return Err(Error::Shape(
            "rulebook does not match input and kernel".into(),
        ));
    }
    let taps = kernel.volume();
    let n = rulebook.num_outputs();
    let (cin, cout) = (kernel.in_channels, kernel.out_channels);

    // Scatter the per-offset lists back into an output-major table so each
    // output row is owned by exactly one worker.
    let mut gather = vec![NO_NEIGHBOR; n * taps];
    for (k, p) in rulebook.iter() {
        gather[p.output as usize * taps + k] = p.input;
    }

    let mut out = vec![0.0; n * cout];
    if n > 0 {
        let rows_per_part = n.div_ceil(workers.max(1));
        out.par_chunks_mut(rows_per_part * cout)
            .enumerate()
            .for_each(|(part, chunk)| {
                let first = part * rows_per_part;
                for (local, acc) in chunk.chunks_exact_mut(cout).enumerate() {
                    let i = first + local;
                    for (k, &j) in gather[i * taps..(i + 1) * taps].iter().enumerate() {
                        if j == NO_NEIGHBOR {
                            continue;
                        }
                        let f = input.row(j as usize);
                        let w = kernel.tap_matrix(k);
                        for ci in 0..cin {
                            let x = f[ci];
                            let wrow = &w[ci * cout..(ci + 1) * cout];
                            for (a, &wv) in acc.iter_mut().zip(wrow) {
                                *a += x * wv;
                            }
                        }
                    }
                    if let Some(b) = &kernel.bias {
                        for (a, &bv) in acc.iter_mut().zip(b) {
                            *a += bv;
                        }
                    }
                }
            });
    }
    input.with_features(out, cout)
}

/// Dense `X x Y x Z x C` feature volume, channel fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVolume {
    pub extents: [usize; 3],
    pub channels: usize,
    pub data: Vec<f64>,
}

impl DenseVolume {
    pub fn zeros(extents: [usize; 3], channels: usize) -> Self {
        DenseVolume {
            extents,
            channels,
            data: vec![0.0; extents.iter().product::<usize>() * channels],
        }
    }

    pub fn from_sparse(t: &SparseVoxelTensor) -> Self {
        let mut d = Self::zeros(t.grid().extents, t.channels());
        for (c, row) in t.rows() {
            let base = d.base([c.x as usize, c.y as usize, c.z as usize]);
            d.data[base..base + row.len()].copy_from_slice(row);
        }
        d
    }

    fn base(&self, at: [usize; 3]) -> usize {
        ((at[0] * self.extents[1] + at[1]) * self.extents[2] + at[2]) * self.channels
    }

    pub fn at(&self, at: [usize; 3]) -> &[f64] {
        let b = self.base(at);
        &self.data[b..b + self.channels]
    }
}

/// Zero-padded, stride-1 dense 3D cross-correlation over every cell.
pub fn dense_conv_oracle(dense: &DenseVolume, kernel: &KernelSpec) -> Result<DenseVolume> {
    check_kernel(kernel)?;
    if dense.channels != kernel.in_channels {
        return Err(Error::Shape("dense volume channel count".into()));
    }
    let offsets = kernel.offsets();
    let e = dense.extents;
    let mut out = DenseVolume::zeros(e, kernel.out_channels);
    for x in 0..e[0] {
        for y in 0..e[1] {
            for z in 0..e[2] {
                let ob = out.base([x, y, z]);
                for (k, d) in offsets.iter().enumerate() {
                    let nx = x as i64 + d[0] as i64;
                    let ny = y as i64 + d[1] as i64;
                    let nz = z as i64 + d[2] as i64;
                    if nx < 0
                        || ny < 0
                        || nz < 0
                        || nx >= e[0] as i64
                        || ny >= e[1] as i64
                        || nz >= e[2] as i64
                    {
                        continue;
                    }
                    let src = dense.at([nx as usize, ny as usize, nz as usize]);
                    for (ci, &v) in src.iter().enumerate() {
                        for co in 0..kernel.out_channels {
                            out.data[ob + co] += v * kernel.weight(k, ci, co);
                        }
                    }
                }
                if let Some(b) = &kernel.bias {
                    for (o, &bv) in out.data[ob..ob + kernel.out_channels].iter_mut().zip(b) {
                        *o += bv;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct FmaCount {
    pub sparse_fmas: u64,
    pub dense_fmas: u64,
    pub rulebook_pairs: u64,
}

impl FmaCount {
    pub fn ratio(&self) -> f64 {
        self.sparse_fmas as f64 / self.dense_fmas as f64
    }

    /// The sparse worst case, every tap of every active voxel hitting a
    /// neighbor.
    pub fn sparse_upper_bound(active: usize, kernel: &KernelSpec) -> u64 {
        (active * kernel.volume() * kernel.in_channels * kernel.out_channels) as u64
    }
}

/// Multiply-add counts for the sparse path and for a dense convolution over
/// the whole grid.
pub fn fma_op_count(input: &SparseVoxelTensor, kernel: &KernelSpec) -> Result<FmaCount> {
    let rulebook = build_rulebook(input, kernel)?;
    Ok(fma_count_from_rulebook(input, kernel, &rulebook))
}

pub fn fma_count_from_rulebook(
    input: &SparseVoxelTensor,
    kernel: &KernelSpec,
    rulebook: &Rulebook,
) -> FmaCount {
    let per_tap = (kernel.in_channels * kernel.out_channels) as u64;
    let pairs = rulebook.total_pairs() as u64;
    FmaCount {
        sparse_fmas: pairs * per_tap,
        dense_fmas: input.grid().num_cells() * kernel.volume() as u64 * per_tap,
        rulebook_pairs: pairs,
    }
}
