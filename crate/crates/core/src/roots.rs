//! Bracketed scalar root finding for monotone functions.

use roots::{find_root_brent, Convergency};

/// Stops on an exact zero or a bracket a few ulps wide.
struct Relative {
    max_iter: usize,
}

impl Convergency<f64> for Relative {
    fn is_root_found(&mut self, y: f64) -> bool {
        y == 0.0
    }

    fn is_converged(&mut self, x1: f64, x2: f64) -> bool {
        let width = (x1 - x2).abs();
        width <= 4.0 * f64::EPSILON * x1.abs().max(x2.abs()) || width <= f64::MIN_POSITIVE
    }

    fn is_iteration_limit_reached(&mut self, iter: usize) -> bool {
        iter >= self.max_iter
    }
}

/// Root of `f` in `[lo, hi]`, given `f(lo)` and `f(hi)` of opposite sign
/// (or one of them zero). Brent's method.
pub(crate) fn find_root<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64) -> f64 {
    let f_lo = f(lo);
    if f_lo == 0.0 {
        return lo;
    }
    let f_hi = f(hi);
    if f_hi == 0.0 {
        return hi;
    }
    debug_assert!(
        f_lo.signum() != f_hi.signum(),
        "root not bracketed: f({lo})={f_lo}, f({hi})={f_hi}"
    );
    // the solver re-evaluates bracket ends it has already seen
    let mut seen = [(lo, f_lo), (hi, f_hi), (f64::NAN, 0.0), (f64::NAN, 0.0)];
    let mut next = 2;
    let cached = |x: f64| {
        if let Some(&(_, y)) = seen.iter().find(|(sx, _)| *sx == x) {
            return y;
        }
        let y = f(x);
        seen[next] = (x, y);
        next = (next + 1) % seen.len();
        y
    };
    let mut conv = Relative { max_iter: 200 };
    match find_root_brent(lo, hi, cached, &mut conv) {
        Ok(x) => x,
        Err(_) => {
            if f_lo.abs() < f_hi.abs() {
                lo
            } else {
                hi
            }
        }
    }
}
