//! Scalar special functions: Bessel `J0`/`J1` and the zeros of `J0`,
//! regularized incomplete gamma functions, and the Poisson pmf/cdf.
//!
//! `J0` and `J1` are evaluated by three regimes:
//!
//! * `x <= 2`: ascending power series;
//! * `2 < x <= 25`: Miller's backward recurrence normalized by
//!   `J0 + 2 (J2 + J4 + ...) = 1`;
//! * `x > 25`: Hankel asymptotic expansion, truncated at its smallest term.
//!
//! Each regime keeps the absolute error below `1e-13` on `[0, 200]`.

use std::f64::consts::{FRAC_PI_4, PI};

use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpecFunError {
    #[error("argument {name} = {value} is outside the domain ({constraint})")]
    Domain {
        name: &'static str,
        value: f64,
        constraint: &'static str,
    },
    #[error("unsupported Bessel order {0}; only orders 0 and 1 are available")]
    Order(i32),
}

fn domain(name: &'static str, value: f64, constraint: &'static str) -> SpecFunError {
    SpecFunError::Domain {
        name,
        value,
        constraint,
    }
}

const SERIES_LIMIT: f64 = 2.0;
const ASYMPTOTIC_LIMIT: f64 = 25.0;

/// Bessel function of the first kind, order 0 or 1, for `x >= 0`.
pub fn bessel_j(order: i32, x: f64) -> Result<f64, SpecFunError> {
    if !x.is_finite() || x < 0.0 {
        return Err(domain("x", x, "finite and non-negative"));
    }
    match order {
        0 => Ok(j0(x)),
        1 => Ok(j1(x)),
        other => Err(SpecFunError::Order(other)),
    }
}

/// `J0(x)` without argument checks; even in `x`.
pub fn j0(x: f64) -> f64 {
    let x = x.abs();
    if x <= SERIES_LIMIT {
        series(0, x)
    } else if x <= ASYMPTOTIC_LIMIT {
        miller(x).0
    } else {
        hankel(0, x)
    }
}

/// `J1(x)` without argument checks; odd in `x`.
pub fn j1(x: f64) -> f64 {
    let sign = x.signum();
    let x = x.abs();
    let value = if x <= SERIES_LIMIT {
        series(1, x)
    } else if x <= ASYMPTOTIC_LIMIT {
        miller(x).1
    } else {
        hankel(1, x)
    };
    if x == 0.0 {
        0.0
    } else {
        sign * value
    }
}

fn series(order: u32, x: f64) -> f64 {
    let q = -0.25 * x * x;
    let mut term = if order == 0 { 1.0 } else { 0.5 * x };
    let mut sum = term;
    for k in 1..60u32 {
        term *= q / (f64::from(k) * f64::from(k + order));
        sum += term;
        if term.abs() < 1e-18 * sum.abs().max(1e-300) {
            break;
        }
    }
    sum
}

/// Backward recurrence `J_{n-1} = (2n/x) J_n - J_{n+1}`; returns `(J0, J1)`.
fn miller(x: f64) -> (f64, f64) {
    let start = {
        let n = (x + 30.0 + (40.0 * x).sqrt()) as usize;
        n + (n % 2)
    };
    let mut next = 0.0; // J_{n+1}
    let mut current = 1e-30; // J_n
    let mut even_sum = 0.0;
    let mut j1 = 0.0;
    for n in (1..=start).rev() {
        let prev = 2.0 * n as f64 / x * current - next;
        next = current;
        current = prev;
        // `current` is now J_{n-1}
        if current.abs() > 1e250 {
            current *= 1e-250;
            next *= 1e-250;
            even_sum *= 1e-250;
            j1 *= 1e-250;
        }
        if n == 2 {
            j1 = current;
        }
        if (n - 1) % 2 == 0 && n - 1 > 0 {
            even_sum += current;
        }
    }
    let norm = current + 2.0 * even_sum;
    (current / norm, j1 / norm)
}

/// Hankel expansion `J_v(x) = sqrt(2/(pi x)) (P cos chi - Q sin chi)`.
fn hankel(order: u32, x: f64) -> f64 {
    let mu = 4.0 * f64::from(order * order);
    let mut p = 1.0;
    let mut q = 0.0;
    let mut term = 1.0_f64;
    let mut last = f64::INFINITY;
    for k in 1..200u32 {
        let odd = f64::from(2 * k - 1);
        term *= (mu - odd * odd) / (f64::from(k) * 8.0 * x);
        if term.abs() >= last {
            break;
        }
        last = term.abs();
        // a_k contributes to Q for odd k, to P for even k, alternating sign in pairs
        match k % 4 {
            1 => q += term,
            2 => p -= term,
            3 => q -= term,
            _ => p += term,
        }
        if term.abs() < 1e-17 {
            break;
        }
    }
    let chi = x - f64::from(order) * 0.5 * PI - FRAC_PI_4;
    (2.0 / (PI * x)).sqrt() * (p * chi.cos() - q * chi.sin())
}

/// Positive zeros of `J0` together with the accuracy they were polished to.
#[derive(Debug, Clone, PartialEq)]
pub struct BesselRootTable {
    pub order: u32,
    pub roots: Vec<f64>,
    pub tolerance: f64,
}

impl BesselRootTable {
    /// First `count` zeros of `J0`.
    pub fn j0(count: usize) -> Result<Self, SpecFunError> {
        let roots = (1..=count as u64)
            .map(bessel_j0_root)
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            order: 0,
            roots,
            tolerance: ROOT_TOLERANCE,
        })
    }

    pub fn len(&self) -> usize {
        self.roots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roots.is_empty()
    }
}

const ROOT_TOLERANCE: f64 = 1e-13;

/// The `m`-th positive zero of `J0`, located inside `((m - 3/4) pi, (m + 1/4) pi)`.
pub fn bessel_j0_root(m: u64) -> Result<f64, SpecFunError> {
    if m == 0 {
        return Err(domain("m", 0.0, "m >= 1"));
    }
    let mf = m as f64;
    let mut lo = (mf - 0.75) * PI;
    let mut hi = (mf + 0.25) * PI;
    let sign_lo = j0(lo).signum();
    while hi - lo > 1e-6 {
        let mid = 0.5 * (lo + hi);
        if j0(mid).signum() == sign_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    // Newton polish with J0' = -J1, kept inside the bracket.
    let mut x = 0.5 * (lo + hi);
    for _ in 0..50 {
        let step = j0(x) / -j1(x);
        let candidate = x - step;
        if !(lo..=hi).contains(&candidate) {
            break;
        }
        x = candidate;
        if step.abs() < ROOT_TOLERANCE * 1e-2 {
            break;
        }
    }
    Ok(x)
}

/// Regularized lower incomplete gamma `P(shape, x)`.
pub fn reg_lower_gamma(shape: f64, x: f64) -> Result<f64, SpecFunError> {
    check_gamma_args(shape, x)?;
    if x == 0.0 {
        return Ok(0.0);
    }
    if x.is_infinite() {
        return Ok(1.0);
    }
    Ok(gamma_lr(shape, x).clamp(0.0, 1.0))
}

/// Regularized upper incomplete gamma `Q(shape, x) = 1 - P(shape, x)`,
/// computed directly so small tail probabilities keep their precision.
pub fn reg_upper_gamma(shape: f64, x: f64) -> Result<f64, SpecFunError> {
    check_gamma_args(shape, x)?;
    if x == 0.0 {
        return Ok(1.0);
    }
    if x.is_infinite() {
        return Ok(0.0);
    }
    Ok(gamma_ur(shape, x).clamp(0.0, 1.0))
}

fn check_gamma_args(shape: f64, x: f64) -> Result<(), SpecFunError> {
    if !(shape > 0.0) || !shape.is_finite() {
        return Err(domain("shape", shape, "finite and > 0"));
    }
    if x.is_nan() || x < 0.0 {
        return Err(domain("x", x, "x >= 0"));
    }
    Ok(())
}

/// Upper tail `P(chi2_dof >= stat)`.
pub fn chi_square_sf(stat: f64, dof: usize) -> Result<f64, SpecFunError> {
    if dof == 0 {
        return Err(domain("dof", 0.0, "dof >= 1"));
    }
    reg_upper_gamma(dof as f64 / 2.0, stat.max(0.0) / 2.0)
}

/// `exp(-mean) mean^k / k!`, evaluated in log space.
pub fn poisson_pmf(mean: f64, k: u64) -> Result<f64, SpecFunError> {
    if !(mean >= 0.0) || !mean.is_finite() {
        return Err(domain("mean", mean, "finite and >= 0"));
    }
    if mean == 0.0 {
        return Ok(if k == 0 { 1.0 } else { 0.0 });
    }
    let kf = k as f64;
    Ok((kf * mean.ln() - mean - ln_gamma(kf + 1.0)).exp())
}

/// `P(X <= k)` for `X ~ Poisson(mean)`.
pub fn poisson_cdf(mean: f64, k: u64) -> Result<f64, SpecFunError> {
    if !(mean >= 0.0) || !mean.is_finite() {
        return Err(domain("mean", mean, "finite and >= 0"));
    }
    if mean == 0.0 {
        return Ok(1.0);
    }
    reg_upper_gamma(k as f64 + 1.0, mean)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bessel_at_zero() {
        assert_eq!(bessel_j(0, 0.0).unwrap(), 1.0);
        assert_eq!(bessel_j(1, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn bessel_rejects_bad_input() {
        assert!(bessel_j(0, f64::NAN).is_err());
        assert!(bessel_j(1, f64::INFINITY).is_err());
        assert!(bessel_j(0, -1.0).is_err());
        assert_eq!(bessel_j(2, 1.0), Err(SpecFunError::Order(2)));
    }

    #[test]
    fn j1_at_first_root() {
        let v = bessel_j(1, 2.404825557695773).unwrap();
        assert!((v - 0.5191474972894669).abs() < 1e-13, "{v}");
    }

    #[test]
    fn regimes_agree_at_switch_points() {
        for &x in &[SERIES_LIMIT, ASYMPTOTIC_LIMIT] {
            let (m0, m1) = miller(x);
            if x == SERIES_LIMIT {
                assert!((series(0, x) - m0).abs() < 1e-15);
                assert!((series(1, x) - m1).abs() < 1e-15);
            } else {
                assert!((hankel(0, x) - m0).abs() < 5e-14, "{} {}", hankel(0, x), m0);
                assert!((hankel(1, x) - m1).abs() < 5e-14);
            }
        }
    }

    #[test]
    fn first_roots() {
        let expected = [2.404825557695773, 5.520078110286311, 8.653727912911013];
        for (m, want) in expected.iter().enumerate() {
            let got = bessel_j0_root(m as u64 + 1).unwrap();
            assert!((got - want).abs() < 1e-12, "root {m}: {got}");
        }
        assert!(bessel_j0_root(0).is_err());
    }

    #[test]
    fn root_table_invariants() {
        let table = BesselRootTable::j0(40).unwrap();
        assert_eq!(table.len(), 40);
        for (i, &r) in table.roots.iter().enumerate() {
            let m = (i + 1) as f64;
            assert!(r > (m - 0.75) * PI && r < (m + 0.25) * PI);
            assert!(j0(r).abs() <= 10.0 * table.tolerance);
        }
        assert!(table.roots.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn roots_interlace_with_j1_sign_changes() {
        let table = BesselRootTable::j0(30).unwrap();
        for w in table.roots.windows(2) {
            // J1 has exactly one zero between consecutive J0 zeros
            assert!(j1(w[0]).signum() != j1(w[1]).signum());
        }
    }

    #[test]
    fn gamma_examples() {
        assert_eq!(reg_lower_gamma(1.0, 0.0).unwrap(), 0.0);
        let p = reg_lower_gamma(0.5, 1.9207).unwrap();
        assert!((p - 0.949998245966).abs() < 1e-10, "{p}");
        let e = reg_lower_gamma(1.0, 1.0).unwrap();
        assert!((e - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert!(reg_lower_gamma(0.0, 1.0).is_err());
        assert!(reg_lower_gamma(-2.0, 1.0).is_err());
    }

    #[test]
    fn gamma_limits_and_monotonicity() {
        for &shape in &[0.5, 1.0, 2.5, 10.0, 40.0] {
            let mut last = 0.0;
            for i in 0..=200 {
                let x = i as f64 * shape * 0.25;
                let p = reg_lower_gamma(shape, x).unwrap();
                assert!(p >= last - 1e-15);
                last = p;
            }
            assert!((reg_lower_gamma(shape, 50.0 * shape).unwrap() - 1.0).abs() < 1e-8);
            let lower = reg_lower_gamma(shape, shape).unwrap();
            let upper = reg_upper_gamma(shape, shape).unwrap();
            assert!((lower + upper - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn poisson_examples() {
        assert_eq!(poisson_pmf(0.0, 0).unwrap(), 1.0);
        assert_eq!(poisson_pmf(0.0, 3).unwrap(), 0.0);
        let p = poisson_pmf(2.0, 2).unwrap();
        assert!((p - 2.0 * (-2.0f64).exp()).abs() < 1e-14);
        assert!(poisson_pmf(-1.0, 0).is_err());
        assert!(poisson_pmf(1e6, 1_000_000).unwrap().is_finite());
    }

    #[test]
    fn poisson_mass_sums_to_one() {
        for &mean in &[0.3_f64, 2.0, 17.5, 56.0, 400.0] {
            let upper = (mean + 20.0 * mean.sqrt() + 20.0) as u64;
            let total: f64 = (0..=upper).map(|k| poisson_pmf(mean, k).unwrap()).sum();
            assert!((1.0 - 1e-9..=1.0 + 1e-12).contains(&total), "{mean}: {total}");
            let cdf = poisson_cdf(mean, upper).unwrap();
            assert!((cdf - total).abs() < 1e-9);
        }
    }

    #[test]
    fn chi_square_tail() {
        let p = chi_square_sf(3.841458820694124, 1).unwrap();
        assert!((p - 0.05).abs() < 1e-10);
        assert!(chi_square_sf(1.0, 0).is_err());
    }
}
