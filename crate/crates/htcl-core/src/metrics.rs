//! Partition agreement and aggregate statistics used in reports and tests.

/// Adjusted Rand index between two partitions of the same samples.
/// Chance-corrected: 1.0 for identical partitions (up to renaming), ~0 for
/// independent ones.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "partitions must cover the same samples");
    assert!(!a.is_empty());
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![0u64; ka * kb];
    let mut rows = vec![0u64; ka];
    let mut cols = vec![0u64; kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
        rows[x] += 1;
        cols[y] += 1;
    }
    let choose2 = |n: u64| (n * n.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.iter().map(|&n| choose2(n)).sum();
    let sum_a: f64 = rows.iter().map(|&n| choose2(n)).sum();
    let sum_b: f64 = cols.iter().map(|&n| choose2(n)).sum();
    let total = choose2(a.len() as u64);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-12 {
        // Both partitions trivial (e.g. single cluster each): identical by
        // convention.
        return if sum_ij == max_index { 1.0 } else { 0.0 };
    }
    (sum_ij - expected) / (max_index - expected)
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Population standard deviation (divide by n), matching the +- convention
/// used when reporting a fixed set of runs.
pub fn population_std(values: &[f64]) -> f64 {
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt()
}

/// Chi-square statistic of an observed contingency table against
/// independence of rows and columns.
pub fn chi_square_independence(table: &[Vec<u64>]) -> f64 {
    let rows = table.len();
    let cols = table[0].len();
    let row_tot: Vec<f64> = table.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let col_tot: Vec<f64> =
        (0..cols).map(|j| table.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    let total: f64 = row_tot.iter().sum();
    let mut stat = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let expected = row_tot[i] * col_tot[j] / total;
            if expected > 0.0 {
                let d = table[i][j] as f64 - expected;
                stat += d * d / expected;
            }
        }
    }
    stat
}
