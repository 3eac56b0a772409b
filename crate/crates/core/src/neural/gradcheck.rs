//! Central finite differences and the relative-error measure used by the
//! gradient checks.

/// Default probe step.
pub const STEP: f64 = 1e-5;

/// Below this magnitude both values are compared absolutely. Central
/// differences of an O(1) objective at `STEP` carry roughly `1e-11` of
/// rounding noise, so exact zeros read as a few `1e-11`.
pub const FLOOR: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, FLOOR)`.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(FLOOR)
}

/// `(f(x + h) - f(x - h)) / 2h` along coordinate `i` of `x`.
pub fn central_difference(x: &mut [f64], i: usize, h: f64, mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let orig = x[i];
    x[i] = orig + h;
    let up = f(x);
    x[i] = orig - h;
    let down = f(x);
    x[i] = orig;
    (up - down) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic() {
        let mut x = vec![0.7, -1.3];
        let d = central_difference(&mut x, 1, STEP, |x| x[0] * x[1].powi(3));
        assert!(rel_error(d, 0.7 * 3.0 * 1.69) < 1e-9);
        assert_eq!(x, vec![0.7, -1.3]);
    }

    #[test]
    fn floor_handles_zero() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!(rel_error(1e-12, -1e-12) < 1e-5);
    }
}
