//! Exclusive prefix sum used for stream compaction in the rulebook builder.

use rayon::prelude::*;

/// Exclusive scan over `flags`: `offsets[i] = flags[0] + ... + flags[i-1]`.
/// Returns the offsets and the grand total.
pub fn exclusive_prefix_sum(flags: &[u64]) -> (Vec<u64>, u64) {
    exclusive_prefix_sum_partitioned(flags, rayon::current_num_threads())
}

/// Three-phase blocked scan over `workers` contiguous partitions: per-block
/// totals, a sequential scan of those totals, then per-block local scans
/// seeded with the block offset. Integer addition makes the result identical
/// for every partitioning.
pub fn exclusive_prefix_sum_partitioned(flags: &[u64], workers: usize) -> (Vec<u64>, u64) {
    if flags.is_empty() {
        return (Vec::new(), 0);
    }
    let block = flags.len().div_ceil(workers.max(1));
    let block_sums: Vec<u64> = flags.par_chunks(block).map(|c| c.iter().sum()).collect();

    let mut block_offsets = Vec::with_capacity(block_sums.len());
    let mut total = 0u64;
    for s in &block_sums {
        block_offsets.push(total);
        total += s;
    }

    let mut offsets = vec![0u64; flags.len()];
    offsets
        .par_chunks_mut(block)
        .zip(flags.par_chunks(block))
        .zip(block_offsets.par_iter())
        .for_each(|((out, inp), &start)| {
            let mut acc = start;
            for (o, &f) in out.iter_mut().zip(inp) {
                *o = acc;
                acc += f;
            }
        });
    (offsets, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sequential(flags: &[u64]) -> (Vec<u64>, u64) {
        let mut acc = 0;
        let offs = flags
            .iter()
            .map(|&f| {
                let o = acc;
                acc += f;
                o
            })
            .collect();
        (offs, acc)
    }

    #[test]
    fn examples() {
        assert_eq!(exclusive_prefix_sum(&[]), (vec![], 0));
        assert_eq!(exclusive_prefix_sum(&[0, 0, 0]), (vec![0, 0, 0], 0));
        assert_eq!(
            exclusive_prefix_sum(&[1, 0, 1, 1, 0]),
            (vec![0, 1, 1, 2, 3], 3)
        );
    }

    #[test]
    fn partition_counts_agree() {
        let flags: Vec<u64> = (0..1000u64).map(|i| (i * 7919) % 5).collect();
        let expect = sequential(&flags);
        for w in [1, 2, 3, 8, 64, 1000, 5000] {
            assert_eq!(
                exclusive_prefix_sum_partitioned(&flags, w),
                expect,
                "workers={w}"
            );
        }
    }
}
