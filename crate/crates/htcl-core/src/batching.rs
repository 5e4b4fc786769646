//! Stratified batch planning. Pair-based losses only see pairs inside a
//! batch, so every batch should contain each (class, domain) cell roughly
//! in proportion to its share of the data.

use rand::seq::SliceRandom;

use crate::dataset::{Dataset, DividingPattern};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// One epoch of index batches. Every sample appears exactly once; each cell
/// present in the data is spread across batches proportionally by dealing
/// its shuffled members into near-equal chunks.
pub fn stratified_batches(
    dataset: &Dataset,
    pattern: &DividingPattern,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>> {
    if pattern.len() != dataset.len() {
        return Err(Error::Contract(format!(
            "pattern covers {} samples, dataset has {}",
            pattern.len(),
            dataset.len()
        )));
    }
    if batch_size < 2 * pattern.num_domains {
        return Err(Error::Contract(format!(
            "batch_size {} < 2 * {} domains",
            batch_size, pattern.num_domains
        )));
    }
    let n = dataset.len();
    let num_batches = n.div_ceil(batch_size);
    let mut rng = rng_from_seed(seed);

    // Cells keyed by (class, domain), in sorted key order for determinism.
    let num_domains = pattern.num_domains;
    let mut cells: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes * num_domains];
    for i in 0..n {
        cells[dataset.class_labels[i] * num_domains + pattern.assignment[i]].push(i);
    }

    let mut batches: Vec<Vec<usize>> = vec![Vec::new(); num_batches];
    for members in cells.iter_mut() {
        if members.is_empty() {
            continue;
        }
        members.shuffle(&mut rng);
        // Deal this cell into num_batches chunks differing by at most one;
        // rotate the starting batch so remainders don't pile up in batch 0.
        let start = rng.gen_range_usize(num_batches);
        let m = members.len();
        let base = m / num_batches;
        let extra = m % num_batches;
        let mut offset = 0;
        for k in 0..num_batches {
            let b = (start + k) % num_batches;
            let take = base + usize::from(k < extra);
            for &i in &members[offset..offset + take] {
                batches[b].push(i);
            }
            offset += take;
        }
    }
    for batch in batches.iter_mut() {
        batch.shuffle(&mut rng);
    }
    batches.retain(|b| !b.is_empty());
    Ok(batches)
}

trait GenRangeUsize {
    fn gen_range_usize(&mut self, n: usize) -> usize;
}

impl GenRangeUsize for crate::rng::Rng {
    fn gen_range_usize(&mut self, n: usize) -> usize {
        use rand::Rng;
        if n <= 1 {
            0
        } else {
            self.gen_range(0..n)
        }
    }
}
