//! Central finite differences, used as the independent oracle for every
//! analytic derivative in the crate.

/// Central first difference of a scalar function along one coordinate.
pub fn central<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Richardson-extrapolated central difference (fourth order).
pub fn richardson<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    let d1 = (f(x + h) - f(x - h)) / (2.0 * h);
    let d2 = (f(x + 0.5 * h) - f(x - 0.5 * h)) / h;
    (4.0 * d2 - d1) / 3.0
}

/// Central second difference of a scalar function.
pub fn second<F: FnMut(f64) -> f64>(mut f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - 2.0 * f(x) + f(x - h)) / (h * h)
}

/// Gradient of `f: Rⁿ → R` by central differences.
pub fn gradient<F: FnMut(&[f64]) -> f64>(mut f: F, x: &[f64], h: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            work[i] = x[i] + h;
            let plus = f(&work);
            work[i] = x[i] - h;
            let minus = f(&work);
            work[i] = x[i];
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

/// Jacobian of `f: Rⁿ → Rᵐ` by central differences, returned row-major `m × n`.
pub fn jacobian<F: FnMut(&[f64]) -> Vec<f64>>(mut f: F, x: &[f64], h: f64) -> Vec<Vec<f64>> {
    let mut work = x.to_vec();
    let mut cols = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        work[i] = x[i] + h;
        let plus = f(&work);
        work[i] = x[i] - h;
        let minus = f(&work);
        work[i] = x[i];
        cols.push(plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * h)).collect::<Vec<_>>());
    }
    let m = cols.first().map_or(0, |c| c.len());
    (0..m).map(|r| cols.iter().map(|c| c[r]).collect()).collect()
}

/// Norm-wise relative error `‖a − b‖∞ / max(‖b‖∞, floor)`.
pub fn rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = numeric.iter().map(|v| v.abs()).fold(0.0, f64::max).max(floor);
    diff / scale
}
