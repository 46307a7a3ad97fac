//! Central-difference gradient verification.
//!
//! The checker treats a computation as a scalar function of a flat parameter
//! vector. For each probed coordinate it evaluates the function at
//! `x ± epsilon` and compares `(f(x+e) - f(x-e)) / 2e` against the analytic
//! gradient, reporting the worst relative error
//! `|a - n| / max(|a|, |n|, 1e-12)`.

/// A deterministic scalar function of a parameter vector, together with its
/// analytic gradient. Implementations must not consume randomness (dropout
/// disabled), or the finite differences probe a different function than the
/// gradient describes.
pub trait ScalarFn {
    fn value(&mut self, point: &[f64]) -> f64;
    fn gradient(&mut self, point: &[f64]) -> Vec<f64>;
}

/// Blanket implementation so a pair of closures can act as a [`ScalarFn`].
pub struct FnPair<V, G>
where
    V: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    pub value: V,
    pub gradient: G,
}

impl<V, G> ScalarFn for FnPair<V, G>
where
    V: FnMut(&[f64]) -> f64,
    G: FnMut(&[f64]) -> Vec<f64>,
{
    fn value(&mut self, point: &[f64]) -> f64 {
        (self.value)(point)
    }

    fn gradient(&mut self, point: &[f64]) -> Vec<f64> {
        (self.gradient)(point)
    }
}

/// Worst relative error over every coordinate of `point`.
pub fn grad_check(f: &mut dyn ScalarFn, point: &[f64], epsilon: f64) -> f64 {
    let probes: Vec<usize> = (0..point.len()).collect();
    grad_check_probed(f, point, &probes, epsilon)
}

/// Worst relative error over the selected coordinates only; the composed
/// networks have millions of parameters, so their checks probe a sample.
pub fn grad_check_probed(
    f: &mut dyn ScalarFn,
    point: &[f64],
    probes: &[usize],
    epsilon: f64,
) -> f64 {
    assert!(epsilon > 0.0, "epsilon must be positive");
    let analytic = f.gradient(point);
    assert_eq!(analytic.len(), point.len(), "gradient length");
    let mut work = point.to_vec();
    let mut worst: f64 = 0.0;
    for &i in probes {
        let saved = work[i];
        work[i] = saved + epsilon;
        let plus = f.value(&work);
        work[i] = saved - epsilon;
        let minus = f.value(&work);
        work[i] = saved;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        if err > worst {
            worst = err;
        }
    }
    worst
}

/// Evenly strided sample of `count` probe indices across `len` coordinates.
pub fn strided_probes(len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    (0..count).map(|i| i * len / count).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_checks_to_near_machine_precision() {
        // f(x) = 3x0 - 2x1 + 0.5x2; finite differences are exact for affine
        // functions up to rounding.
        let mut f = FnPair {
            value: |p: &[f64]| 3.0 * p[0] - 2.0 * p[1] + 0.5 * p[2],
            gradient: |_: &[f64]| vec![3.0, -2.0, 0.5],
        };
        let err = grad_check(&mut f, &[0.7, -1.3, 2.2], 1e-6);
        assert!(err <= 1e-9, "error = {err}");
    }

    #[test]
    fn quadratic_function_checks_tightly() {
        let mut f = FnPair {
            value: |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>(),
            gradient: |p: &[f64]| p.iter().map(|x| 2.0 * x).collect(),
        };
        let point: Vec<f64> = (0..10).map(|i| 0.3 * i as f64 - 1.0).collect();
        let err = grad_check(&mut f, &point, 1e-6);
        assert!(err <= 1e-8, "error = {err}");
    }

    #[test]
    fn corrupted_gradient_is_detected() {
        // The gradient is off by 1%, which must exceed any sane threshold.
        let mut f = FnPair {
            value: |p: &[f64]| p.iter().map(|x| x * x).sum::<f64>(),
            gradient: |p: &[f64]| p.iter().map(|x| 2.02 * x).collect(),
        };
        let err = grad_check(&mut f, &[1.0, -0.5, 0.25], 1e-6);
        assert!(err > 1e-3, "corruption went unnoticed: {err}");
    }

    #[test]
    fn probed_subset_checks_only_selected_coordinates() {
        // Coordinate 1's gradient is wrong, but it is not probed.
        let mut f = FnPair {
            value: |p: &[f64]| p[0] + p[1],
            gradient: |_: &[f64]| vec![1.0, 5.0],
        };
        let ok = grad_check_probed(&mut f, &[0.1, 0.2], &[0], 1e-6);
        assert!(ok <= 1e-9);
        let bad = grad_check_probed(&mut f, &[0.1, 0.2], &[0, 1], 1e-6);
        assert!(bad > 0.5);
    }

    #[test]
    fn strided_probes_cover_start_and_spread() {
        let p = strided_probes(100, 10);
        assert_eq!(p.len(), 10);
        assert_eq!(p[0], 0);
        assert!(p.windows(2).all(|w| w[0] < w[1]));
        assert!(*p.last().unwrap() >= 90);
        assert_eq!(strided_probes(5, 10), vec![0, 1, 2, 3, 4]);
    }
}
