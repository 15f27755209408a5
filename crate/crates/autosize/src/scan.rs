//! Sorting and inclusive-scan primitives underneath the row proximal
//! operators.
//!
//! Scans run either as one serial fold or, above a size threshold, as a
//! work-efficient two-sweep tree (up-sweep, then down-sweep). Each tree level
//! touches disjoint slots, so levels can execute on any number of worker
//! threads without changing the combination order: results are bit-identical
//! regardless of parallelism. Accumulation is always in `f64`; the `f32`
//! entry points store results back narrowed.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Inputs shorter than this are scanned with a single serial fold.
pub const SERIAL_SCAN_THRESHOLD: usize = 4096;

/// A vector sorted into decreasing order plus the permutation that maps each
/// sorted slot back to the position it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexedVector {
    pub values: Vec<f64>,
    pub permutation: Vec<usize>,
}

/// Sorts `v` into decreasing order, breaking ties by original position so the
/// permutation is deterministic.
pub fn sort_desc_with_permutation(v: &[f64]) -> Result<IndexedVector> {
    if v.is_empty() {
        return Err(Error::InvalidInput("cannot sort an empty vector".into()));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "non-finite entry {} in sort input",
            x
        )));
    }
    let mut order: Vec<usize> = (0..v.len()).collect();
    let by_value_desc_then_index = |&a: &usize, &b: &usize| {
        v[b].partial_cmp(&v[a])
            .expect("entries are finite")
            .then(a.cmp(&b))
    };
    if v.len() >= SERIAL_SCAN_THRESHOLD {
        order.par_sort_unstable_by(by_value_desc_then_index);
    } else {
        order.sort_unstable_by(by_value_desc_then_index);
    }
    let values = order.iter().map(|&i| v[i]).collect();
    Ok(IndexedVector {
        values,
        permutation: order,
    })
}

/// Returns sorted-order `values` to their pre-sort positions:
/// `out[permutation[i]] = values[i]`.
pub fn apply_inverse_permutation(values: &[f64], permutation: &[usize]) -> Result<Vec<f64>> {
    let n = values.len();
    if permutation.len() != n {
        return Err(Error::InvalidInput(format!(
            "permutation length {} does not match value count {}",
            permutation.len(),
            n
        )));
    }
    let mut out = vec![0.0; n];
    let mut seen = vec![false; n];
    for (i, &p) in permutation.iter().enumerate() {
        if p >= n || seen[p] {
            return Err(Error::InvalidInput(format!(
                "permutation is not a bijection on 0..{} (slot {} -> {})",
                n, i, p
            )));
        }
        seen[p] = true;
        out[p] = values[i];
    }
    Ok(out)
}

/// Inclusive prefix sum with `f64` accumulation, narrowed back to `f32`.
pub fn prefix_sum(v: &[f32]) -> Vec<f32> {
    let wide: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    prefix_sum_f64(&wide).iter().map(|&x| x as f32).collect()
}

/// Inclusive suffix sum with `f64` accumulation, narrowed back to `f32`.
pub fn suffix_sum(v: &[f32]) -> Vec<f32> {
    let wide: Vec<f64> = v.iter().map(|&x| x as f64).collect();
    suffix_sum_f64(&wide).iter().map(|&x| x as f32).collect()
}

pub fn prefix_sum_f64(v: &[f64]) -> Vec<f64> {
    prefix_sum_counted(v, SERIAL_SCAN_THRESHOLD).0
}

pub fn suffix_sum_f64(v: &[f64]) -> Vec<f64> {
    suffix_sum_counted(v, SERIAL_SCAN_THRESHOLD).0
}

/// Prefix sum that also reports how many sweeps over the data it made.
/// A serial fold counts as one pass; the tree counts one pass per level.
pub fn prefix_sum_counted(v: &[f64], serial_threshold: usize) -> (Vec<f64>, u32) {
    let mut out = v.to_vec();
    let passes = scan_inclusive_in_place(&mut out, serial_threshold);
    (out, passes)
}

/// Suffix sum as the mirror image of the prefix sum, so
/// `suffix_sum(v) == reverse(prefix_sum(reverse(v)))` holds exactly.
pub fn suffix_sum_counted(v: &[f64], serial_threshold: usize) -> (Vec<f64>, u32) {
    let mut out: Vec<f64> = v.iter().rev().copied().collect();
    let passes = scan_inclusive_in_place(&mut out, serial_threshold);
    out.reverse();
    (out, passes)
}

fn scan_inclusive_in_place(a: &mut [f64], serial_threshold: usize) -> u32 {
    let n = a.len();
    if n <= 1 {
        return n as u32;
    }
    if n < serial_threshold.max(2) {
        for i in 1..n {
            a[i] += a[i - 1];
        }
        return 1;
    }
    let mut passes = 0;
    let mut stride = 1usize;
    while stride < n {
        sweep_level(a, 0, stride);
        passes += 1;
        stride *= 2;
    }
    stride /= 2;
    while stride > 1 {
        stride /= 2;
        sweep_level(a, stride, stride);
        passes += 1;
    }
    passes
}

/// One tree level: within every full window of `2 * stride` elements of
/// `a[offset..]`, fold the value at local slot `stride - 1` into the value at
/// local slot `2 * stride - 1`. Windows are disjoint, so the level is safe to
/// run in parallel and its arithmetic order is fixed.
fn sweep_level(a: &mut [f64], offset: usize, stride: usize) {
    let window = 2 * stride;
    if a.len() <= offset {
        return;
    }
    a[offset..].par_chunks_mut(window).for_each(|chunk| {
        if chunk.len() == window {
            chunk[window - 1] += chunk[stride - 1];
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn sort_tracks_where_values_came_from() {
        let s = sort_desc_with_permutation(&[1.0, 3.0, 2.0]).unwrap();
        assert_eq!(s.values, vec![3.0, 2.0, 1.0]);
        assert_eq!(s.permutation, vec![1, 2, 0]);
    }

    #[test]
    fn sort_breaks_ties_by_original_position() {
        let s = sort_desc_with_permutation(&[2.0, 2.0]).unwrap();
        assert_eq!(s.values, vec![2.0, 2.0]);
        assert_eq!(s.permutation, vec![0, 1]);
    }

    #[test]
    fn sort_rejects_empty_and_non_finite() {
        assert!(sort_desc_with_permutation(&[]).is_err());
        assert!(sort_desc_with_permutation(&[1.0, f64::NAN]).is_err());
        assert!(sort_desc_with_permutation(&[f64::INFINITY]).is_err());
    }

    #[test]
    fn inverse_permutation_restores_positions() {
        let out = apply_inverse_permutation(&[9.0, 8.0, 7.0], &[1, 2, 0]).unwrap();
        assert_eq!(out, vec![7.0, 9.0, 8.0]);
    }

    #[test]
    fn inverse_permutation_rejects_non_bijections() {
        assert!(apply_inverse_permutation(&[1.0, 2.0], &[0, 0]).is_err());
        assert!(apply_inverse_permutation(&[1.0, 2.0], &[0, 5]).is_err());
        assert!(apply_inverse_permutation(&[1.0, 2.0], &[0]).is_err());
    }

    #[test]
    fn prefix_sum_small_examples() {
        assert_eq!(prefix_sum(&[1.0, 2.0, 3.0]), vec![1.0, 3.0, 6.0]);
        assert_eq!(prefix_sum(&[1.0, 3.0, 3.0]), vec![1.0, 4.0, 7.0]);
        assert_eq!(prefix_sum(&[]), Vec::<f32>::new());
    }

    #[test]
    fn suffix_sum_small_examples() {
        assert_eq!(suffix_sum(&[1.0, 2.0, 3.0]), vec![6.0, 5.0, 3.0]);
        assert_eq!(suffix_sum(&[1.0, 0.5, 0.0]), vec![1.5, 0.5, 0.0]);
        assert_eq!(suffix_sum(&[]), Vec::<f32>::new());
    }

    #[test]
    fn sort_then_inverse_permutation_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.gen_range(1..50);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let s = sort_desc_with_permutation(&v).unwrap();
            for w in s.values.windows(2) {
                assert!(w[0] >= w[1]);
            }
            let back = apply_inverse_permutation(&s.values, &s.permutation).unwrap();
            assert_eq!(back, v);
        }
    }

    fn serial_prefix(v: &[f64]) -> Vec<f64> {
        let mut acc = 0.0;
        v.iter()
            .map(|&x| {
                acc += x;
                acc
            })
            .collect()
    }

    #[test]
    fn tree_scan_matches_serial_fold() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &n in &[2usize, 3, 5, 16, 17, 100, 4096, 5000, 1 << 14] {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (tree, _) = prefix_sum_counted(&v, 2);
            let serial = serial_prefix(&v);
            for (a, b) in tree.iter().zip(&serial) {
                // Two different summation orders; keep an absolute floor for
                // heavily cancelled sums.
                let tol = 1e-9 * (1.0 + b.abs());
                assert!((a - b).abs() <= tol, "n={} {} vs {}", n, a, b);
            }
        }
    }

    #[test]
    fn f32_scan_tracks_serial_reference_within_relative_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let n = 1 << 20;
        let v: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let got = prefix_sum(&v);
        let reference: Vec<f64> = serial_prefix(&v.iter().map(|&x| x as f64).collect::<Vec<_>>());
        for i in (0..n).step_by(1013) {
            let r = reference[i];
            assert!((got[i] as f64 - r).abs() <= 1e-6 * (1.0 + r.abs()));
        }
    }

    #[test]
    fn suffix_is_reversed_prefix_of_reversed_input_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for &n in &[1usize, 7, 100, 6000] {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let s = suffix_sum_f64(&v);
            let rev: Vec<f64> = v.iter().rev().copied().collect();
            let mut p = prefix_sum_f64(&rev);
            p.reverse();
            assert_eq!(s, p);
        }
    }

    #[test]
    fn scan_results_do_not_depend_on_worker_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let v: Vec<f64> = (0..10_000).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut outputs = Vec::new();
        for workers in [1usize, 2, 4] {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build()
                .unwrap();
            outputs.push(pool.install(|| prefix_sum_counted(&v, 2).0));
        }
        assert_eq!(outputs[0], outputs[1]);
        assert_eq!(outputs[0], outputs[2]);
    }

    #[test]
    fn pass_count_grows_logarithmically() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for &n in &[16usize, 100, 4096, 1 << 16, 1 << 20] {
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, passes) = prefix_sum_counted(&v, 2);
            let log2n = (n as f64).log2().ceil() as u32;
            assert_eq!(passes, 2 * log2n - 1);
        }
        let small: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let (_, passes) = prefix_sum_counted(&small, SERIAL_SCAN_THRESHOLD);
        assert_eq!(passes, 1);
    }

    proptest! {
        #[test]
        fn prefix_sum_is_cumulative(v in proptest::collection::vec(-100.0f64..100.0, 0..300)) {
            let p = prefix_sum_f64(&v);
            prop_assert_eq!(p.len(), v.len());
            let mut acc = 0.0;
            for (i, x) in v.iter().enumerate() {
                acc += x;
                prop_assert!((p[i] - acc).abs() <= 1e-9 * (1.0 + acc.abs()));
            }
        }

        #[test]
        fn sorted_values_are_a_permutation_of_input(v in proptest::collection::vec(-100.0f64..100.0, 1..200)) {
            let s = sort_desc_with_permutation(&v).unwrap();
            let mut a = v.clone();
            let mut b = s.values.clone();
            a.sort_by(|x, y| x.partial_cmp(y).unwrap());
            b.sort_by(|x, y| x.partial_cmp(y).unwrap());
            prop_assert_eq!(a, b);
        }
    }
}
