//! Dirichlet eigenbases for the supported domains and the survival
//! probability as an eigenfunction series.
//!
//! With generator `(1/2) sum sigma_ij d_i d_j` and eigenpairs
//! `A f = -lambda f`, `f = 0` on the boundary, the probability of not being
//! absorbed before `t` from `x` is
//!
//! ```text
//! u(t, x) = sum_j exp(-t lambda_j / 2) sum_m c_jm f_jm(x),   c_jm = int_Q f_jm dx.
//! ```
//!
//! Closed forms:
//!
//! * interval `(0, L)`, `sigma = s2`: `lambda_j = s2 (j pi / L)^2`,
//!   `f_j = sqrt(2/L) sin(j pi x / L)`;
//! * box: tensor products of interval modes, `lambda = sum_i sigma_ii (k_i pi / L_i)^2`;
//! * disk of radius `R`, `sigma = s2 I`: radial modes
//!   `f_m(r) = J0(mu_m r / R) / (sqrt(pi) R |J1(mu_m)|)`, `lambda_m = s2 (mu_m / R)^2`.
//!   Modes with angular dependence integrate to zero over the disk and never
//!   enter `u`, so the radial series is exact pointwise.

use std::f64::consts::PI;

use thiserror::Error;

use crate::domain::{DomainError, DomainKind, DomainSpec};
use crate::pointprocess::{BaseMeasure, MeasureSpec, Region, SamplingError};
use crate::specfun::{bessel_j0_root, j0, j1};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpectralError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("no closed-form eigenbasis: {0}")]
    Unsupported(String),
    #[error("series evaluation at t = {t} is below t_min = {t_min}; truncation is not certified")]
    TruncationUnsafe { t: f64, t_min: f64 },
    #[error("series value {value} is outside [-{tol}, 1 + {tol}]")]
    Accuracy { value: f64, tol: f64 },
    #[error("tolerance {tol} needs more than {limit} modes")]
    Capacity { tol: f64, limit: usize },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("limit shape is negative ({value}) at {position:?}")]
    NegativeShape { position: Vec<f64>, value: f64 },
    #[error(transparent)]
    Measure(#[from] SamplingError),
}

/// Largest number of modes any truncation may request.
pub const MAX_MODES: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq)]
pub enum ModeShape {
    /// `prod_i sqrt(2/L_i) sin(k_i pi x_i / L_i)`.
    Sine { wavenumbers: Vec<u32>, lengths: Vec<f64> },
    /// `norm * J0(root |x| / radius)`.
    Radial { root: f64, radius: f64, norm: f64 },
}

/// One orthonormal Dirichlet eigenfunction.
#[derive(Debug, Clone, PartialEq)]
pub struct Mode {
    /// Index of the distinct eigenvalue, starting at 1.
    pub j: usize,
    /// Slot within the eigenspace, starting at 1.
    pub m: usize,
    pub lambda: f64,
    /// `int_Q f dx`.
    pub c: f64,
    pub shape: ModeShape,
}

impl Mode {
    pub fn eval(&self, x: &[f64]) -> f64 {
        match &self.shape {
            ModeShape::Sine { wavenumbers, lengths } => wavenumbers
                .iter()
                .zip(lengths)
                .zip(x)
                .map(|((&k, &l), &xi)| (2.0 / l).sqrt() * (f64::from(k) * PI * xi / l).sin())
                .product(),
            ModeShape::Radial { root, radius, norm } => norm * j0(root * x[0].hypot(x[1]) / radius),
        }
    }

    /// `sup_Q |f|`.
    pub fn sup_norm(&self) -> f64 {
        match &self.shape {
            ModeShape::Sine { lengths, .. } => lengths.iter().map(|l| (2.0 / l).sqrt()).product(),
            ModeShape::Radial { norm, .. } => *norm,
        }
    }
}

/// The first modes of a domain, in non-decreasing eigenvalue order.
#[derive(Debug, Clone)]
pub struct Basis {
    domain: DomainSpec,
    modes: Vec<Mode>,
}

impl Basis {
    pub fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    pub fn modes(&self) -> &[Mode] {
        &self.modes
    }

    pub fn len(&self) -> usize {
        self.modes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.modes.is_empty()
    }

    pub fn lambda1(&self) -> f64 {
        self.modes[0].lambda
    }

    /// Second distinct eigenvalue, if the basis reaches it.
    pub fn lambda2(&self) -> Option<f64> {
        self.modes.iter().find(|m| m.j == 2).map(|m| m.lambda)
    }

    /// Modes of the ground eigenspace.
    pub fn ground(&self) -> impl Iterator<Item = &Mode> {
        self.modes.iter().filter(|m| m.j == 1)
    }
}

fn check_supported(domain: &DomainSpec) -> Result<(), SpectralError> {
    match domain.kind() {
        DomainKind::Interval { .. } => Ok(()),
        DomainKind::Box { .. } if domain.is_diagonal() => Ok(()),
        DomainKind::Box { .. } => Err(SpectralError::Unsupported(
            "box domains need a diagonal diffusion matrix".into(),
        )),
        DomainKind::Disk { .. } if domain.isotropic_variance().is_some() => Ok(()),
        DomainKind::Disk { .. } => Err(SpectralError::Unsupported(
            "disk domains need an isotropic diffusion matrix sigma2 * I".into(),
        )),
    }
}

fn sine_coefficient(k: u32, length: f64) -> f64 {
    if k.is_multiple_of(2) {
        0.0
    } else {
        2.0 * (2.0 * length).sqrt() / (f64::from(k) * PI)
    }
}

/// `pi^2 sigma_ii / L_i^2` per axis, so that `lambda = sum_i a_i k_i^2`.
fn axis_rates(domain: &DomainSpec) -> Vec<f64> {
    let lengths = side_lengths(domain);
    lengths
        .iter()
        .enumerate()
        .map(|(i, l)| domain.sigma()[(i, i)] * PI * PI / (l * l))
        .collect()
}

fn side_lengths(domain: &DomainSpec) -> Vec<f64> {
    match domain.kind() {
        DomainKind::Interval { length } => vec![*length],
        DomainKind::Box { lengths } => lengths.clone(),
        DomainKind::Disk { .. } => unreachable!("disk has no sides"),
    }
}

/// All multi-indices with `sum_i a_i k_i^2 <= cap`, unsorted.
fn lattice_below(rates: &[f64], cap: f64) -> Vec<(f64, Vec<u32>)> {
    let mut out = Vec::new();
    let mut current = vec![1u32; rates.len()];
    fn recurse(rates: &[f64], axis: usize, partial: f64, cap: f64, current: &mut Vec<u32>, out: &mut Vec<(f64, Vec<u32>)>) {
        if axis == rates.len() {
            out.push((partial, current.clone()));
            return;
        }
        // remaining axes contribute at least their k = 1 rate
        let rest: f64 = rates[axis + 1..].iter().sum();
        let mut k = 1u32;
        loop {
            let value = partial + rates[axis] * f64::from(k) * f64::from(k);
            if value + rest > cap {
                break;
            }
            current[axis] = k;
            recurse(rates, axis + 1, value, cap, current, out);
            k += 1;
        }
    }
    recurse(rates, 0, 0.0, cap, &mut current, &mut out);
    out
}

/// First `n` tensor modes in `(lambda, lexicographic index)` order.
fn sorted_lattice(rates: &[f64], n: usize) -> Vec<(f64, Vec<u32>)> {
    let mut cap = rates.iter().sum::<f64>() * 2.0;
    loop {
        let mut all = lattice_below(rates, cap);
        if all.len() >= n {
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
            all.truncate(n);
            return all;
        }
        cap *= 2.0;
    }
}

/// Assign eigenvalue index `j` and multiplicity slot `m` to sorted modes.
fn label_eigenspaces(modes: &mut [Mode]) {
    let mut j = 0;
    let mut m = 0;
    let mut last = f64::NEG_INFINITY;
    for mode in modes {
        if mode.lambda > last * (1.0 + 1e-12) {
            j += 1;
            m = 1;
            last = mode.lambda;
        } else {
            m += 1;
        }
        mode.j = j;
        mode.m = m;
    }
}

/// First `n_modes` Dirichlet modes of `domain`. On the disk, only radial
/// modes are returned.
pub fn build_basis(domain: &DomainSpec, n_modes: usize) -> Result<Basis, SpectralError> {
    check_supported(domain)?;
    if n_modes == 0 {
        return Err(SpectralError::Invalid("n_modes must be >= 1".into()));
    }
    if n_modes > MAX_MODES {
        return Err(SpectralError::Capacity {
            tol: f64::NAN,
            limit: MAX_MODES,
        });
    }
    let mut modes: Vec<Mode> = match domain.kind() {
        DomainKind::Interval { .. } | DomainKind::Box { .. } => {
            let lengths = side_lengths(domain);
            sorted_lattice(&axis_rates(domain), n_modes)
                .into_iter()
                .map(|(lambda, ks)| Mode {
                    j: 0,
                    m: 0,
                    lambda,
                    c: ks.iter().zip(&lengths).map(|(&k, &l)| sine_coefficient(k, l)).product(),
                    shape: ModeShape::Sine {
                        wavenumbers: ks,
                        lengths: lengths.clone(),
                    },
                })
                .collect()
        }
        DomainKind::Disk { radius } => {
            let s2 = domain.isotropic_variance().expect("checked isotropic");
            (1..=n_modes as u64)
                .map(|m| {
                    let root = bessel_j0_root(m).expect("m >= 1");
                    let j1_root = j1(root);
                    Mode {
                        j: 0,
                        m: 0,
                        lambda: s2 * (root / radius).powi(2),
                        c: 2.0 * PI.sqrt() * radius / root * j1_root.signum(),
                        shape: ModeShape::Radial {
                            root,
                            radius: *radius,
                            norm: 1.0 / (PI.sqrt() * radius * j1_root.abs()),
                        },
                    }
                })
                .collect()
        }
    };
    label_eigenspaces(&mut modes);
    Ok(Basis {
        domain: domain.clone(),
        modes,
    })
}

/// `sum_{k > from, k odd} 4/(k pi) exp(-t a k^2 / 2)` with a bound on the
/// part beyond the last summed term.
fn sine_axis_tail(rate: f64, t: f64, from: u64) -> Result<f64, SpectralError> {
    let mut sum = 0.0;
    let mut k = from + 1;
    if k.is_multiple_of(2) {
        k += 1;
    }
    let mut prev = f64::INFINITY;
    loop {
        let kf = k as f64;
        let term = 4.0 / (kf * PI) * (-0.5 * t * rate * kf * kf).exp();
        sum += term;
        if term <= 1e-20 * sum || term == 0.0 {
            let ratio = term / prev;
            return Ok(sum + if ratio < 1.0 { term * ratio / (1.0 - ratio) } else { term });
        }
        prev = term;
        k += 2;
        if k > 4 * MAX_MODES as u64 {
            return Err(SpectralError::Capacity {
                tol: term,
                limit: MAX_MODES,
            });
        }
    }
}

/// Per-mode weights `w = |c| sup|f|` of the radial disk series.
fn radial_weight(root: f64) -> f64 {
    2.0 / (root * j1(root).abs())
}

/// `sum_{m > from} w_m exp(-t lambda_m / 2)` on the disk, plus remainder bound.
fn radial_tail(s2: f64, radius: f64, t: f64, from: u64, cached: &[f64]) -> Result<f64, SpectralError> {
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut m = from + 1;
    loop {
        let root = match cached.get(m as usize - 1) {
            Some(&r) => r,
            None => bessel_j0_root(m).expect("m >= 1"),
        };
        let term = radial_weight(root) * (-0.5 * t * s2 * (root / radius).powi(2)).exp();
        sum += term;
        if term <= 1e-20 * sum || term == 0.0 {
            let ratio = term / prev;
            return Ok(sum + if ratio < 1.0 { term * ratio / (1.0 - ratio) } else { term });
        }
        prev = term;
        m += 1;
        if m > MAX_MODES as u64 {
            return Err(SpectralError::Capacity {
                tol: term,
                limit: MAX_MODES,
            });
        }
    }
}

/// Certified bound on `sup_x |u(t,x) - u_J(t,x)|` when `modes` is the
/// truncated basis.
fn tail_bound_for(domain: &DomainSpec, modes: &[Mode], t: f64) -> Result<f64, SpectralError> {
    match domain.kind() {
        DomainKind::Interval { .. } => sine_axis_tail(axis_rates(domain)[0], t, modes.len() as u64),
        DomainKind::Box { .. } => {
            let rates = axis_rates(domain);
            let full: f64 = rates
                .iter()
                .map(|&a| sine_axis_tail(a, t, 0))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .product();
            let kept: f64 = modes
                .iter()
                .map(|m| m.c.abs() * m.sup_norm() * (-0.5 * t * m.lambda).exp())
                .sum();
            Ok((full - kept).max(0.0) + 1e-15 * full)
        }
        DomainKind::Disk { radius } => {
            let s2 = domain.isotropic_variance().expect("checked isotropic");
            let roots: Vec<f64> = modes
                .iter()
                .filter_map(|m| match m.shape {
                    ModeShape::Radial { root, .. } => Some(root),
                    _ => None,
                })
                .collect();
            radial_tail(s2, *radius, t, modes.len() as u64, &roots)
        }
    }
}

/// Smallest number of modes `J` whose dropped series tail is at most `tol`
/// in sup norm for every `t >= t_min`.
///
/// The tail is majorized term by term with the exact eigenvalues and
/// `|c_jm| sup|f_jm|`; since every term decreases in `t`, checking at
/// `t_min` covers all later times.
pub fn truncation_order(domain: &DomainSpec, t_min: f64, tol: f64) -> Result<usize, SpectralError> {
    check_supported(domain)?;
    if !(t_min > 0.0) || !t_min.is_finite() {
        return Err(SpectralError::Invalid(format!("t_min must be > 0, got {t_min}")));
    }
    if !(tol > 0.0) || !tol.is_finite() {
        return Err(SpectralError::Invalid(format!("tol must be > 0, got {tol}")));
    }
    match domain.kind() {
        DomainKind::Interval { .. } => {
            let rate = axis_rates(domain)[0];
            first_below(tol, |j| sine_axis_tail(rate, t_min, j as u64))
        }
        DomainKind::Disk { radius } => {
            let s2 = domain.isotropic_variance().expect("checked isotropic");
            first_below(tol, |j| radial_tail(s2, *radius, t_min, j as u64, &[]))
        }
        DomainKind::Box { .. } => {
            let rates = axis_rates(domain);
            let full: f64 = rates
                .iter()
                .map(|&a| sine_axis_tail(a, t_min, 0))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .product();
            let floor = 1e-15 * full;
            if tol <= floor {
                return Err(SpectralError::Capacity { tol, limit: MAX_MODES });
            }
            let mut n = 64usize;
            loop {
                let lattice = sorted_lattice(&rates, n);
                let mut kept = 0.0;
                for (i, (lambda, ks)) in lattice.iter().enumerate() {
                    let weight: f64 = ks
                        .iter()
                        .map(|&k| if k % 2 == 1 { 4.0 / (f64::from(k) * PI) } else { 0.0 })
                        .product();
                    kept += weight * (-0.5 * t_min * lambda).exp();
                    if (full - kept).max(0.0) + floor <= tol {
                        return Ok(i + 1);
                    }
                }
                if n >= MAX_MODES {
                    return Err(SpectralError::Capacity { tol, limit: MAX_MODES });
                }
                n = (n * 4).min(MAX_MODES);
            }
        }
    }
}

/// Smallest `j >= 1` with `tail(j) <= tol`, by doubling then bisection;
/// `tail` is non-increasing in `j`.
fn first_below(tol: f64, tail: impl Fn(usize) -> Result<f64, SpectralError>) -> Result<usize, SpectralError> {
    let mut hi = 1usize;
    while tail(hi)? > tol {
        if hi >= MAX_MODES {
            return Err(SpectralError::Capacity { tol, limit: MAX_MODES });
        }
        hi = (hi * 2).min(MAX_MODES);
    }
    let mut lo = hi / 2;
    if lo == 0 {
        return Ok(1);
    }
    // tail(lo) > tol >= tail(hi)
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if tail(mid)? > tol {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Default lower time limit `0.01 diam^2 / max_i sigma_ii`.
pub fn default_t_min(domain: &DomainSpec) -> f64 {
    0.01 * domain.diameter().powi(2) / domain.max_diagonal()
}

/// Truncated survival series with a certified sup-norm error.
#[derive(Debug, Clone)]
pub struct SurvivalEvaluator {
    basis: Basis,
    t_min: f64,
    tol: f64,
}

impl SurvivalEvaluator {
    /// Builds a basis large enough that the truncation error stays below
    /// `tol` for all `t >= t_min` (default [`default_t_min`]).
    pub fn new(domain: &DomainSpec, t_min: Option<f64>, tol: f64) -> Result<Self, SpectralError> {
        let t_min = t_min.unwrap_or_else(|| default_t_min(domain));
        let order = truncation_order(domain, t_min, tol)?;
        let basis = build_basis(domain, order)?;
        Ok(Self { basis, t_min, tol })
    }

    /// Evaluator over a caller-provided basis; `tol` is only the clamping band.
    pub fn from_basis(basis: Basis, t_min: f64, tol: f64) -> Self {
        Self { basis, t_min, tol }
    }

    pub fn basis(&self) -> &Basis {
        &self.basis
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.basis.domain
    }

    pub fn t_min(&self) -> f64 {
        self.t_min
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    /// Bound on `sup_x |u(t,x) - series(t,x)|`.
    pub fn tail_bound(&self, t: f64) -> Result<f64, SpectralError> {
        tail_bound_for(&self.basis.domain, &self.basis.modes, t)
    }

    /// Raw truncated series, without checks or clamping.
    pub fn series(&self, t: f64, x: &[f64]) -> f64 {
        self.basis
            .modes
            .iter()
            .filter(|m| m.c != 0.0)
            .map(|m| (-0.5 * t * m.lambda).exp() * m.c * m.eval(x))
            .sum()
    }

    /// Probability that a path from `x` is not absorbed by time `t`.
    pub fn survival(&self, t: f64, x: &[f64]) -> Result<f64, SpectralError> {
        let domain = &self.basis.domain;
        domain.check_dimension(x)?;
        if !domain.in_closure(x) {
            return Err(DomainError::Outside { position: x.to_vec() }.into());
        }
        if t == 0.0 {
            return Ok(if domain.contains(x) { 1.0 } else { 0.0 });
        }
        if !(t >= self.t_min) {
            return Err(SpectralError::TruncationUnsafe { t, t_min: self.t_min });
        }
        let value = self.series(t, x);
        if value < -self.tol || value > 1.0 + self.tol || !value.is_finite() {
            return Err(SpectralError::Accuracy { value, tol: self.tol });
        }
        Ok(value.clamp(0.0, 1.0))
    }
}

/// `F(x) = sum_m c_1m f_1m(x)`, the shape of `u(t, .)` as `t` grows.
#[derive(Debug, Clone)]
pub struct LimitShape {
    domain: DomainSpec,
    ground: Vec<Mode>,
    sup: f64,
}

impl LimitShape {
    pub fn eval(&self, x: &[f64]) -> f64 {
        self.ground.iter().map(|m| m.c * m.eval(x)).sum()
    }

    /// `M = sup_Q F`, attained at the center on every supported domain.
    pub fn sup(&self) -> f64 {
        self.sup
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    pub fn ground_modes(&self) -> &[Mode] {
        &self.ground
    }

    /// On the disk, the radius where `F = fraction * M`; `F` decreases
    /// strictly in the radius.
    pub fn level_radius(&self, fraction: f64) -> Option<f64> {
        let (root, radius) = match (self.domain.kind(), &self.ground[0].shape) {
            (DomainKind::Disk { radius }, ModeShape::Radial { root, .. }) => (*root, *radius),
            _ => return None,
        };
        if fraction >= 1.0 {
            return Some(0.0);
        }
        if fraction <= 0.0 {
            return Some(radius);
        }
        // J0 decreases from 1 to 0 on [0, root]
        let (mut lo, mut hi) = (0.0, root);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if j0(mid) > fraction {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 * root {
                break;
            }
        }
        Some(0.5 * (lo + hi) / root * radius)
    }

    /// On the interval, the left-half point where `F = fraction * M`; the
    /// level set is this point and its mirror image.
    pub fn level_abscissa(&self, fraction: f64) -> Option<f64> {
        match self.domain.kind() {
            DomainKind::Interval { length } => Some(length / PI * fraction.clamp(0.0, 1.0).asin()),
            _ => None,
        }
    }
}

pub fn limit_shape(basis: &Basis) -> Result<LimitShape, SpectralError> {
    if basis.is_empty() {
        return Err(SpectralError::Invalid("empty basis".into()));
    }
    let ground: Vec<Mode> = basis.ground().cloned().collect();
    let domain = basis.domain.clone();
    let mut shape = LimitShape {
        sup: 0.0,
        ground,
        domain,
    };
    shape.sup = shape.eval(&shape.domain.center());
    for x in sample_grid(&shape.domain, 40) {
        let v = shape.eval(&x);
        if v < -1e-12 * shape.sup.max(1.0) {
            return Err(SpectralError::NegativeShape { position: x, value: v });
        }
    }
    Ok(shape)
}

/// Interior grid with `n` points per axis (polar grid on the disk).
pub fn sample_grid(domain: &DomainSpec, n: usize) -> Vec<Vec<f64>> {
    match domain.kind() {
        DomainKind::Interval { length } => (1..=n).map(|i| vec![length * i as f64 / (n + 1) as f64]).collect(),
        DomainKind::Disk { radius } => {
            let mut pts = vec![vec![0.0, 0.0]];
            for i in 1..=n {
                let r = radius * i as f64 / (n + 1) as f64;
                for k in 0..n {
                    let th = 2.0 * PI * k as f64 / n as f64;
                    pts.push(vec![r * th.cos(), r * th.sin()]);
                }
            }
            pts
        }
        DomainKind::Box { lengths } => {
            let d = lengths.len();
            let per_axis = if d <= 2 { n } else { (n as f64).powf(2.0 / d as f64).ceil() as usize };
            let mut pts = vec![vec![]];
            for l in lengths {
                let mut next = Vec::new();
                for p in &pts {
                    for i in 1..=per_axis {
                        let mut q: Vec<f64> = p.clone();
                        q.push(l * i as f64 / (per_axis + 1) as f64);
                        next.push(q);
                    }
                }
                pts = next;
            }
            pts
        }
    }
}

/// `int_Q f_jm dnu` for every mode in the basis.
pub fn nu_moments(basis: &Basis, nu: &MeasureSpec) -> Result<Vec<f64>, SpectralError> {
    match nu.base() {
        BaseMeasure::Zero => Ok(vec![0.0; basis.len()]),
        BaseMeasure::Lebesgue => Ok(basis.modes.iter().map(|m| m.c).collect()),
        BaseMeasure::Density(_) => basis
            .modes
            .iter()
            .map(|m| {
                if m.c == 0.0 {
                    Ok(0.0)
                } else {
                    nu.integrate_checked(Region::Whole, |x| m.eval(x)).map_err(SpectralError::from)
                }
            })
            .collect(),
    }
}

/// Limit Poisson parameter `a = int_Q F dnu`.
pub fn poisson_parameter(basis: &Basis, nu: &MeasureSpec) -> Result<f64, SpectralError> {
    let moments = nu_moments(basis, nu)?;
    Ok(basis
        .modes
        .iter()
        .zip(&moments)
        .filter(|(m, _)| m.j == 1)
        .map(|(m, mom)| m.c * mom)
        .sum())
}

/// Pre-limit parameter `a_tau = int_Q u(tau, x) nu(dx) / g(tau)` with
/// `g(tau) = exp(-tau lambda1 / 2)`. At `tau = 0` this is `nu(Q)`.
pub fn poisson_parameter_at(basis: &Basis, nu: &MeasureSpec, tau: f64) -> Result<f64, SpectralError> {
    if !(tau >= 0.0) || !tau.is_finite() {
        return Err(SpectralError::Invalid(format!("tau must be >= 0, got {tau}")));
    }
    if tau == 0.0 {
        return Ok(nu.total());
    }
    let a = poisson_parameter(basis, nu)?;
    Ok(a + poisson_parameter_gap(basis, nu, tau)?)
}

/// `a_tau - a`, summed directly over the non-ground modes.
pub fn poisson_parameter_gap(basis: &Basis, nu: &MeasureSpec, tau: f64) -> Result<f64, SpectralError> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(SpectralError::Invalid(format!("tau must be > 0, got {tau}")));
    }
    let moments = nu_moments(basis, nu)?;
    let lambda1 = basis.lambda1();
    Ok(basis
        .modes
        .iter()
        .zip(&moments)
        .filter(|(m, _)| m.j > 1)
        .map(|(m, mom)| (-0.5 * tau * (m.lambda - lambda1)).exp() * m.c * mom)
        .sum())
}
