//! Wall-clock timing of the naive and chunked scans on one shared instance.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rng;
use crate::sscan::{scan_chunked, scan_naive, Discretization, DiscretizedStep};
use crate::tensor::{pairwise_sum, Tensor};

/// Chunked outputs must match the naive recurrence to this absolute tolerance.
pub const TOLERANCE: f64 = 1e-10;

#[derive(Clone, Debug, Serialize)]
pub struct BenchRecord {
    pub variant: &'static str,
    pub b: usize,
    pub l: usize,
    pub c: usize,
    pub n: usize,
    pub chunk: usize,
    pub median_ns: u128,
    pub checksum: f64,
}

impl BenchRecord {
    pub const CSV_HEADER: &'static str = "variant,B,L,C,N,chunk,median_ns,checksum";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.10e}",
            self.variant, self.b, self.l, self.c, self.n, self.chunk, self.median_ns, self.checksum
        )
    }
}

#[derive(Clone, Debug)]
pub struct BenchReport {
    /// The naive scan first, then one record per chunk size.
    pub records: Vec<BenchRecord>,
    /// Largest elementwise gap between any chunked output and the naive one.
    pub max_abs_diff: f64,
}

impl BenchReport {
    /// Every variant reproduces the naive output within [`TOLERANCE`].
    pub fn agree(&self) -> bool {
        self.max_abs_diff < TOLERANCE
    }
}

/// Deterministic scan instance.
pub fn problem(b: usize, l: usize, c: usize, n: usize, seed: u64) -> Result<(DiscretizedStep, Tensor)> {
    let mut r = rng::stream(seed, "bench");
    let delta = Tensor::uniform(vec![b, l, c], 0.01, 0.5, &mut r);
    let a = Tensor::uniform(vec![c, n], -2.0, -0.5, &mut r);
    let bm = Tensor::randn(vec![b, l, n], 1.0, &mut r);
    let cm = Tensor::randn(vec![b, l, n], 1.0, &mut r);
    let x = Tensor::randn(vec![b, l, c], 1.0, &mut r);
    let step = DiscretizedStep::from_parts(&delta, &a, &bm, &cm, Discretization::FirstOrder)?;
    Ok((step, x))
}

pub fn median(mut xs: Vec<u128>) -> u128 {
    xs.sort_unstable();
    let m = xs.len() / 2;
    if xs.len() % 2 == 1 {
        xs[m]
    } else {
        (xs[m - 1] + xs[m]) / 2
    }
}

/// Median wall time of `runs` calls after one untimed warm-up, and the warm-up's output.
pub fn time_median(runs: usize, mut f: impl FnMut() -> Result<Tensor>) -> Result<(u128, Tensor)> {
    if runs == 0 {
        return Err(Error::invalid("scan-bench", "runs must be at least 1"));
    }
    let y = f()?;
    let mut times = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        let out = f()?;
        times.push(t0.elapsed().as_nanos());
        std::hint::black_box(out);
    }
    Ok((median(times), y))
}

pub fn run(b: usize, l: usize, c: usize, n: usize, chunks: &[usize], runs: usize, seed: u64) -> Result<BenchReport> {
    if b == 0 || l == 0 || c == 0 || n == 0 {
        return Err(Error::invalid("scan-bench", format!("B, L, C, N must be positive, got {b}, {l}, {c}, {n}")));
    }
    if let Some(&bad) = chunks.iter().find(|&&k| k == 0) {
        return Err(Error::invalid("scan-bench", format!("chunk size {bad} must be positive")));
    }
    let (step, x) = problem(b, l, c, n, seed)?;
    let record = |variant, chunk, median_ns, y: &Tensor| BenchRecord {
        variant,
        b,
        l,
        c,
        n,
        chunk,
        median_ns,
        checksum: pairwise_sum(y.data()),
    };
    let (t, reference) = time_median(runs, || scan_naive(&step, &x))?;
    let mut records = vec![record("naive", l, t, &reference)];
    let mut max_abs_diff = 0.0f64;
    for &chunk in chunks {
        let (t, y) = time_median(runs, || scan_chunked(&step, &x, chunk))?;
        max_abs_diff = max_abs_diff.max(y.max_abs_diff(&reference)?);
        records.push(record("chunked", chunk, t, &y));
    }
    Ok(BenchReport { records, max_abs_diff })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(vec![5, 1, 3]), 3);
        assert_eq!(median(vec![4, 1, 3, 2]), 2);
    }

    #[test]
    fn variants_agree_and_rows_have_eight_fields() {
        let rep = run(2, 64, 4, 3, &[1, 7, 64], 3, 9).unwrap();
        assert!(rep.agree());
        assert_eq!(rep.records.len(), 4);
        assert_eq!(rep.records[0].checksum, rep.records[3].checksum);
        for r in &rep.records {
            assert_eq!(r.csv_row().split(',').count(), 8);
        }
        assert_eq!(BenchRecord::CSV_HEADER.split(',').count(), 8);
        assert!(run(1, 8, 1, 1, &[0], 1, 1).is_err());
        assert!(run(1, 8, 1, 1, &[1], 0, 1).is_err());
    }
}
