//! Relative-tolerance integration on finite intervals, built on the
//! double-exponential rule of the `quadrature` crate.

use std::cell::Cell;

use quadrature::double_exponential;

use crate::error::{Error, Result};

const MAX_SEGMENTS: usize = 2_000;

/// Integrates `f` over `[a, b]` to relative tolerance `rel_tol`, bisecting
/// the segment with the largest error estimate until the summed estimate
/// meets the target.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> Result<f64> {
    if !(a.is_finite() && b.is_finite()) {
        return Err(Error::Quadrature(format!("non-finite interval [{a}, {b}]")));
    }
    if a == b {
        return Ok(0.0);
    }
    let bad = Cell::new(false);
    let g = |x: f64| {
        let y = f(x);
        if !y.is_finite() {
            bad.set(true);
        }
        y
    };
    let rough = double_exponential::integrate(&g, a, b, 1e-6).integral.abs();
    if bad.get() {
        return Err(Error::Quadrature("integrand produced a non-finite value".into()));
    }
    let local = |lo: f64, hi: f64| {
        let out = double_exponential::integrate(&g, lo, hi, rel_tol * rough);
        (lo, hi, out.integral, out.error_estimate)
    };
    let mut segments = vec![local(a, b)];
    loop {
        if bad.get() {
            return Err(Error::Quadrature("integrand produced a non-finite value".into()));
        }
        let total: f64 = segments.iter().map(|s| s.2).sum();
        let err: f64 = segments.iter().map(|s| s.3).sum();
        if err <= rel_tol * total.abs() || err < f64::MIN_POSITIVE {
            return Ok(total);
        }
        if segments.len() >= MAX_SEGMENTS {
            return Err(Error::Quadrature(format!(
                "error estimate {err:e} above tolerance after {MAX_SEGMENTS} segments"
            )));
        }
        let (worst, _) = segments.iter().enumerate().max_by(|x, y| x.1 .3.total_cmp(&y.1 .3)).expect("non-empty");
        let (lo, hi, _, _) = segments.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            return Err(Error::Quadrature("interval cannot be bisected further".into()));
        }
        segments.push(local(lo, mid));
        segments.push(local(mid, hi));
    }
}
