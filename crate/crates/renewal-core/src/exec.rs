//! Deterministic chunked reductions.
//!
//! Chunk partials are computed independently (in parallel when the
//! `parallel` feature is on) and folded in chunk order, so floating-point
//! results are bit-identical regardless of thread scheduling or feature
//! selection.

use std::ops::Range;

const CHUNK: usize = 4096;

fn chunk_ranges(n: usize) -> Vec<Range<usize>> {
    (0..n.div_ceil(CHUNK))
        .map(|k| k * CHUNK..((k + 1) * CHUNK).min(n))
        .collect()
}

#[cfg(feature = "parallel")]
pub(crate) fn map_chunks<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    use rayon::prelude::*;
    chunk_ranges(n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub(crate) fn map_chunks<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(Range<usize>) -> T + Sync + Send,
{
    chunk_ranges(n).into_iter().map(f).collect()
}

/// Sum `term(i)` over `0..n` with a fixed reduction order.
pub(crate) fn sum_indexed<F>(n: usize, term: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    map_chunks(n, |r| r.map(&term).sum::<f64>()).iter().sum()
}

/// Fallible variant; the error from the lowest index wins.
pub(crate) fn try_sum_indexed<F>(n: usize, term: F) -> crate::Result<f64>
where
    F: Fn(usize) -> crate::Result<f64> + Sync + Send,
{
    let partials = map_chunks(n, |r| -> crate::Result<f64> {
        let mut acc = 0.0;
        for i in r {
            acc += term(i)?;
        }
        Ok(acc)
    });
    let mut acc = 0.0;
    for p in partials {
        acc += p?;
    }
    Ok(acc)
}

/// Two sums in one pass.
pub(crate) fn sum2_indexed<F>(n: usize, term: F) -> (f64, f64)
where
    F: Fn(usize) -> (f64, f64) + Sync + Send,
{
    let partials = map_chunks(n, |r| {
        let mut a = 0.0;
        let mut b = 0.0;
        for i in r {
            let (x, y) = term(i);
            a += x;
            b += y;
        }
        (a, b)
    });
    partials.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y))
}

/// Collect `f(i)` for `0..n` in index order.
pub(crate) fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    let mut out = Vec::with_capacity(n);
    for chunk in map_chunks(n, |r| r.map(&f).collect::<Vec<_>>()) {
        out.extend(chunk);
    }
    out
}

/// Always-sequential reference used by determinism tests.
#[allow(dead_code)]
pub(crate) fn sum_indexed_seq<F>(n: usize, term: F) -> f64
where
    F: Fn(usize) -> f64,
{
    chunk_ranges(n)
        .into_iter()
        .map(|r| r.map(&term).sum::<f64>())
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunked_sum_matches_sequential_exactly() {
        let n = 10_001;
        let term = |i: usize| ((i as f64) * 0.37).sin() * 1e3 + 1.0 / (i as f64 + 1.0);
        let a = sum_indexed(n, term);
        let b = sum_indexed_seq(n, term);
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn map_indexed_preserves_order() {
        let v = map_indexed(9000, |i| i);
        assert!(v.iter().enumerate().all(|(i, &x)| i == x));
    }
}
