/// Correctly rounded sum of a sequence of finite `f64`s.
///
/// Maintains the running sum as a list of non-overlapping partials (Shewchuk's
/// expansion arithmetic) and rounds once at the end, so the result is the
/// true real-number sum rounded to nearest — and therefore independent of the
/// order of the summands. Particle-axis reductions in the tape use this,
/// which is what makes permutation equivariance of pooled architectures exact
/// at the bit level instead of approximate.
///
/// Inputs must be finite; intermediate overflow is not handled (the solver
/// validates finiteness upstream and works at molecular energy scales).
pub fn fsum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in xs {
        debug_assert!(x.is_finite(), "fsum requires finite inputs, got {x}");
        let mut keep = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            // Two-sum: hi + lo == x + y exactly, |lo| <= ulp(hi)/2.
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[keep] = lo;
                keep += 1;
            }
            x = hi;
        }
        partials.truncate(keep);
        partials.push(x);
    }

    // Round the expansion to one f64, from the largest partial down, applying
    // a half-ulp correction if the discarded tail would flip the rounding.
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// `fsum` over a strided slice view: elements `data[offset + i*stride]` for
/// `i in 0..count`. Used by axis reductions.
pub(crate) fn fsum_strided(data: &[f64], offset: usize, stride: usize, count: usize) -> f64 {
    fsum((0..count).map(|i| data[offset + i * stride]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;

    #[test]
    fn matches_naive_on_small_integers() {
        assert_eq!(fsum([1.0, 2.0, 3.0, 4.0]), 10.0);
        assert_eq!(fsum(std::iter::empty()), 0.0);
        assert_eq!(fsum([-5.5]), -5.5);
    }

    #[test]
    fn exact_on_catastrophic_cancellation() {
        // Naive summation returns 0.0 here; the correctly rounded sum is 1.0.
        assert_eq!(fsum([1e100, 1.0, -1e100]), 1.0);
        assert_eq!(fsum([1e16, 1.0, -1e16]), 1.0);
    }

    #[test]
    fn classic_rounding_case() {
        // Ten copies of the double nearest 0.1 sum (in exact arithmetic) to
        // 1.0 + 5.55e-17, which is under half an ulp above 1.0 and so rounds
        // to exactly 1.0. Naive left-to-right summation lands one ulp low.
        let xs = [0.1f64; 10];
        assert_eq!(fsum(xs), 1.0);
        let naive: f64 = xs.iter().sum();
        assert_eq!(naive, 0.9999999999999999);
    }

    #[test]
    fn order_invariance_under_shuffles() {
        let mut rng = StdRng::seed_from_u64(42);
        let mut xs: Vec<f64> = (0..257)
            .map(|_| rng.gen_range(-1.0..1.0) * 10f64.powi(rng.gen_range(-12..12)))
            .collect();
        let reference = fsum(xs.iter().copied());
        for _ in 0..20 {
            xs.shuffle(&mut rng);
            let shuffled = fsum(xs.iter().copied());
            assert_eq!(reference.to_bits(), shuffled.to_bits());
        }
    }

    #[test]
    fn strided_view_sums_the_right_elements() {
        let data = [1.0, 10.0, 2.0, 20.0, 3.0, 30.0];
        assert_eq!(fsum_strided(&data, 0, 2, 3), 6.0);
        assert_eq!(fsum_strided(&data, 1, 2, 3), 60.0);
    }
}
