//! Poisson random measures on the domain and the time scaling of their
//! intensity.
//!
//! The intensity at horizon `tau` is `m(., tau) = nu(.) / g(tau)` with
//! `g(tau) = exp(-tau * lambda1 / 2)`, where `lambda1` is the ground
//! eigenvalue of the absorbing problem. [`Schedule::Perturbed`] multiplies
//! this by `1 + 1/tau`, which satisfies the same limit without equality.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{DomainKind, DomainSpec};
use crate::quadrature::GaussLegendre;
use crate::rng::RngSeed;
use crate::spectral::LimitShape;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplingError {
    #[error("density is negative ({value}) at {position:?}")]
    NegativeDensity { position: Vec<f64>, value: f64 },
    #[error("density exceeds its declared sup bound {bound} (value {value})")]
    SupBoundViolated { bound: f64, value: f64 },
    #[error("rejection sampling acceptance rate {rate:.2e} is below 1e-3; sup bound is too loose")]
    Efficiency { rate: f64 },
    #[error("invalid horizon tau = {0}")]
    Horizon(f64),
    #[error("invalid intensity: {0}")]
    Intensity(String),
    #[error("quadrature did not converge: estimate {estimate}, refined {refined}")]
    Quadrature { estimate: f64, refined: f64 },
}

/// Named densities with respect to Lebesgue measure.
pub type DensityFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

#[derive(Clone)]
pub enum Density {
    /// Vanishes on the boundary, equals 1 at the center: `1 - |x|^2/r0^2` on
    /// the disk, `prod 4 x_i (L_i - x_i) / L_i^2` on intervals and boxes.
    Bump,
    Custom {
        name: String,
        density: DensityFn,
        sup_bound: f64,
    },
}

impl fmt::Debug for Density {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Density::Bump => f.write_str("Bump"),
            Density::Custom { name, sup_bound, .. } => f
                .debug_struct("Custom")
                .field("name", name)
                .field("sup_bound", sup_bound)
                .finish(),
        }
    }
}

#[derive(Debug, Clone)]
pub enum BaseMeasure {
    Lebesgue,
    Density(Density),
    Zero,
}

/// The base measure `nu` on `Q`.
#[derive(Debug, Clone)]
pub struct MeasureSpec {
    base: BaseMeasure,
    domain: DomainSpec,
    total: f64,
}

/// Integration region inside `Q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Region<'a> {
    Whole,
    /// `[lo, hi]` on an interval.
    Segment(f64, f64),
    /// `{inner <= |x| <= outer}` on a disk.
    Annulus(f64, f64),
    /// Axis-aligned sub-box `[lo_i, hi_i]`.
    SubBox(&'a [f64], &'a [f64]),
}

const AXIS_NODES: usize = 64;
const RADIAL_NODES: usize = 128;
const ANGULAR_NODES: usize = 128;

impl MeasureSpec {
    pub fn lebesgue(domain: &DomainSpec) -> Self {
        Self {
            base: BaseMeasure::Lebesgue,
            total: domain.volume(),
            domain: domain.clone(),
        }
    }

    pub fn zero(domain: &DomainSpec) -> Self {
        Self {
            base: BaseMeasure::Zero,
            total: 0.0,
            domain: domain.clone(),
        }
    }

    pub fn with_density(domain: &DomainSpec, density: Density) -> Result<Self, SamplingError> {
        let mut spec = Self {
            base: BaseMeasure::Density(density),
            total: 0.0,
            domain: domain.clone(),
        };
        let sup = spec.sup_bound();
        let mut violation = None;
        spec.for_each_node(Region::Whole, AXIS_NODES, RADIAL_NODES, |x, _| {
            if violation.is_some() {
                return;
            }
            let v = spec.density_at(x);
            if !(v >= 0.0) {
                violation = Some(SamplingError::NegativeDensity {
                    position: x.to_vec(),
                    value: v,
                });
            } else if v > sup * (1.0 + 1e-12) {
                violation = Some(SamplingError::SupBoundViolated { bound: sup, value: v });
            }
        });
        if let Some(err) = violation {
            return Err(err);
        }
        spec.total = spec.integrate_checked(Region::Whole, |_| 1.0)?;
        if !spec.total.is_finite() {
            return Err(SamplingError::Intensity("nu(Q) is not finite".into()));
        }
        Ok(spec)
    }

    pub fn base(&self) -> &BaseMeasure {
        &self.base
    }

    pub fn domain(&self) -> &DomainSpec {
        &self.domain
    }

    pub fn is_lebesgue(&self) -> bool {
        matches!(self.base, BaseMeasure::Lebesgue)
    }

    /// `nu(Q)`.
    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn density_at(&self, x: &[f64]) -> f64 {
        match &self.base {
            BaseMeasure::Lebesgue => 1.0,
            BaseMeasure::Zero => 0.0,
            BaseMeasure::Density(Density::Bump) => match self.domain.kind() {
                DomainKind::Disk { radius } => (1.0 - (x[0] * x[0] + x[1] * x[1]) / (radius * radius)).max(0.0),
                DomainKind::Interval { length } => bump(x[0], *length),
                DomainKind::Box { lengths } => lengths.iter().zip(x).map(|(l, xi)| bump(*xi, *l)).product(),
            },
            BaseMeasure::Density(Density::Custom { density, .. }) => density(x),
        }
    }

    pub fn sup_bound(&self) -> f64 {
        match &self.base {
            BaseMeasure::Lebesgue | BaseMeasure::Density(Density::Bump) => 1.0,
            BaseMeasure::Zero => 0.0,
            BaseMeasure::Density(Density::Custom { sup_bound, .. }) => *sup_bound,
        }
    }

    /// `nu(region)`, closed form for Lebesgue measure.
    pub fn mass(&self, region: Region<'_>) -> Result<f64, SamplingError> {
        match (&self.base, region) {
            (BaseMeasure::Zero, _) => Ok(0.0),
            (BaseMeasure::Lebesgue, Region::Whole) => Ok(self.total),
            (BaseMeasure::Lebesgue, Region::Segment(a, b)) => Ok((b - a).max(0.0)),
            (BaseMeasure::Lebesgue, Region::Annulus(r0, r1)) => Ok(PI * (r1 * r1 - r0 * r0).max(0.0)),
            (BaseMeasure::Lebesgue, Region::SubBox(lo, hi)) => {
                Ok(lo.iter().zip(hi).map(|(a, b)| (b - a).max(0.0)).product())
            }
            _ => self.integrate_checked(region, |_| 1.0),
        }
    }

    /// `int_region f dnu` with the default rule (64 Gauss–Legendre nodes per
    /// axis; 128 radial nodes times 128 angles on the disk).
    pub fn integrate(&self, region: Region<'_>, f: impl Fn(&[f64]) -> f64) -> f64 {
        self.integrate_with(region, AXIS_NODES, RADIAL_NODES, &f)
    }

    /// Like [`integrate`](Self::integrate), but compared against a rule with
    /// half the nodes; disagreement beyond `1e-6` relative is an error.
    pub fn integrate_checked(&self, region: Region<'_>, f: impl Fn(&[f64]) -> f64) -> Result<f64, SamplingError> {
        let fine = self.integrate_with(region, AXIS_NODES, RADIAL_NODES, &f);
        let coarse = self.integrate_with(region, AXIS_NODES / 2, RADIAL_NODES / 2, &f);
        let scale = fine.abs().max(coarse.abs()).max(1e-300);
        if (fine - coarse).abs() > 1e-6 * scale && (fine - coarse).abs() > 1e-14 {
            return Err(SamplingError::Quadrature {
                estimate: coarse,
                refined: fine,
            });
        }
        Ok(fine)
    }

    fn integrate_with(&self, region: Region<'_>, axis_nodes: usize, radial_nodes: usize, f: &dyn Fn(&[f64]) -> f64) -> f64 {
        if matches!(self.base, BaseMeasure::Zero) {
            return 0.0;
        }
        let mut sum = 0.0;
        self.for_each_node(region, axis_nodes, radial_nodes, |x, w| {
            sum += w * self.density_at(x) * f(x);
        });
        sum
    }

    fn for_each_node(&self, region: Region<'_>, axis_nodes: usize, radial_nodes: usize, mut visit: impl FnMut(&[f64], f64)) {
        match self.domain.kind() {
            DomainKind::Disk { radius } => {
                let (r_in, r_out) = match region {
                    Region::Annulus(a, b) => (a, b),
                    _ => (0.0, *radius),
                };
                let radial = GaussLegendre::new(radial_nodes);
                let n_angles = if axis_nodes == AXIS_NODES { ANGULAR_NODES } else { ANGULAR_NODES / 2 };
                let dtheta = 2.0 * PI / n_angles as f64;
                for (r, wr) in radial.mapped(r_in, r_out) {
                    for k in 0..n_angles {
                        let theta = k as f64 * dtheta;
                        visit(&[r * theta.cos(), r * theta.sin()], wr * r * dtheta);
                    }
                }
            }
            DomainKind::Interval { length } => {
                let (a, b) = match region {
                    Region::Segment(a, b) => (a, b),
                    Region::SubBox(lo, hi) => (lo[0], hi[0]),
                    _ => (0.0, *length),
                };
                for (x, w) in GaussLegendre::new(axis_nodes).mapped(a, b) {
                    visit(&[x], w);
                }
            }
            DomainKind::Box { lengths } => {
                let d = lengths.len();
                let (lo, hi): (Vec<f64>, Vec<f64>) = match region {
                    Region::SubBox(lo, hi) => (lo.to_vec(), hi.to_vec()),
                    _ => (vec![0.0; d], lengths.clone()),
                };
                let rule = GaussLegendre::new(axis_nodes);
                let axes: Vec<Vec<(f64, f64)>> = (0..d).map(|i| rule.mapped(lo[i], hi[i]).collect()).collect();
                let mut index = vec![0usize; d];
                let mut point = vec![0.0; d];
                loop {
                    let mut w = 1.0;
                    for i in 0..d {
                        let (x, wi) = axes[i][index[i]];
                        point[i] = x;
                        w *= wi;
                    }
                    visit(&point, w);
                    let mut axis = 0;
                    loop {
                        index[axis] += 1;
                        if index[axis] < axis_nodes {
                            break;
                        }
                        index[axis] = 0;
                        axis += 1;
                        if axis == d {
                            return;
                        }
                    }
                }
            }
        }
    }

    /// Draw a uniform point of `Q` from the proposal `Lebesgue / |Q|`.
    fn uniform_point(&self, rng: &mut impl Rng) -> Vec<f64> {
        match self.domain.kind() {
            DomainKind::Interval { length } => vec![open_unit(rng) * length],
            DomainKind::Box { lengths } => lengths.iter().map(|l| open_unit(rng) * l).collect(),
            DomainKind::Disk { radius } => {
                let r = radius * open_unit(rng).sqrt();
                let theta = 2.0 * PI * rng.random::<f64>();
                vec![r * theta.cos(), r * theta.sin()]
            }
        }
    }
}

fn bump(x: f64, length: f64) -> f64 {
    (4.0 * x * (length - x) / (length * length)).max(0.0)
}

/// Uniform on the open interval `(0, 1)`.
fn open_unit(rng: &mut impl Rng) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

/// Time dependence of the intensity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// `m(B, tau) g(tau) = nu(B)` exactly.
    #[default]
    Exact,
    /// `m(B, tau) = nu(B) (1 + 1/tau) / g(tau)`.
    Perturbed,
}

/// `m(., tau) = factor(tau) * nu(.)`.
#[derive(Debug, Clone)]
pub struct ScalingRule {
    lambda1: f64,
    measure: MeasureSpec,
    schedule: Schedule,
}

impl ScalingRule {
    pub fn new(lambda1: f64, measure: MeasureSpec, schedule: Schedule) -> Result<Self, SamplingError> {
        if !(lambda1 > 0.0) || !lambda1.is_finite() {
            return Err(SamplingError::Intensity(format!("lambda1 must be > 0, got {lambda1}")));
        }
        Ok(Self {
            lambda1,
            measure,
            schedule,
        })
    }

    pub fn lambda1(&self) -> f64 {
        self.lambda1
    }

    pub fn measure(&self) -> &MeasureSpec {
        &self.measure
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    /// `g(tau) = exp(-tau lambda1 / 2)`.
    pub fn g(&self, tau: f64) -> f64 {
        (-0.5 * tau * self.lambda1).exp()
    }

    /// `m(B, tau) g(tau) / nu(B)`: 1 for the exact schedule.
    pub fn schedule_multiplier(&self, tau: f64) -> Result<f64, SamplingError> {
        if !(tau >= 0.0) || !tau.is_finite() {
            return Err(SamplingError::Horizon(tau));
        }
        match self.schedule {
            Schedule::Exact => Ok(1.0),
            Schedule::Perturbed if tau > 0.0 => Ok(1.0 + 1.0 / tau),
            Schedule::Perturbed => Err(SamplingError::Horizon(tau)),
        }
    }

    /// `m(B, tau) / nu(B)`.
    pub fn intensity_factor(&self, tau: f64) -> Result<f64, SamplingError> {
        Ok(self.schedule_multiplier(tau)? / self.g(tau))
    }

    /// `m(region, tau)`.
    pub fn intensity(&self, region: Region<'_>, tau: f64) -> Result<f64, SamplingError> {
        Ok(self.measure.mass(region)? * self.intensity_factor(tau)?)
    }
}

/// Initial positions of the particles.
pub type Configuration = Vec<Vec<f64>>;

/// Sample `Poisson(mean)`: inversion for `mean < 50`, an exact rejection
/// sampler otherwise.
pub fn sample_poisson(mean: f64, rng: &mut impl Rng) -> Result<u64, SamplingError> {
    if !(mean >= 0.0) || !mean.is_finite() {
        return Err(SamplingError::Intensity(format!("Poisson mean must be finite and >= 0, got {mean}")));
    }
    if mean == 0.0 {
        return Ok(0);
    }
    if mean < 50.0 {
        let u: f64 = rng.random();
        let mut p = (-mean).exp();
        let mut cdf = p;
        let mut k = 0u64;
        while u > cdf && p > 0.0 {
            k += 1;
            p *= mean / k as f64;
            cdf += p;
        }
        return Ok(k);
    }
    let dist = rand_distr::Poisson::new(mean).map_err(|e| SamplingError::Intensity(e.to_string()))?;
    Ok(dist.sample(rng) as u64)
}

/// One realization of the Poisson random measure `m(., tau)`.
pub fn sample_configuration(rule: &ScalingRule, tau: f64, seed: RngSeed) -> Result<Configuration, SamplingError> {
    let mean = rule.intensity(Region::Whole, tau)?;
    let mut rng = seed.rng();
    let count = sample_poisson(mean, &mut rng)?;
    let measure = rule.measure();
    let mut points = Vec::with_capacity(count as usize);
    match measure.base() {
        BaseMeasure::Zero => {}
        BaseMeasure::Lebesgue => {
            for _ in 0..count {
                points.push(measure.uniform_point(&mut rng));
            }
        }
        BaseMeasure::Density(_) => {
            let sup = measure.sup_bound();
            let mut attempts = 0u64;
            let mut accepted = 0u64;
            while accepted < count {
                let x = measure.uniform_point(&mut rng);
                attempts += 1;
                if rng.random::<f64>() * sup < measure.density_at(&x) {
                    accepted += 1;
                    points.push(x);
                }
                if attempts >= 1000 && (accepted as f64) < 1e-3 * attempts as f64 {
                    return Err(SamplingError::Efficiency {
                        rate: accepted as f64 / attempts as f64,
                    });
                }
            }
        }
    }
    Ok(points)
}

/// Which points a band count refers to.
#[derive(Debug, Clone, Copy)]
pub enum BandRegion<'a> {
    /// `{x : M k/n < F(x) <= M (k+1)/n}` with `M = sup F`; points with
    /// `F(x) <= 0` belong to band 0.
    Level { shape: &'a LimitShape, k: usize, n: usize },
    /// `{x : inner < |x| <= outer}` on the disk (the center joins the
    /// innermost annulus).
    Annulus { inner: f64, outer: f64 },
}

/// Index `k` of the level band `M k/n < value <= M (k+1)/n`.
pub fn band_index(value: f64, sup: f64, n: usize) -> usize {
    if !(value > 0.0) || sup <= 0.0 {
        return 0;
    }
    let k = (value * n as f64 / sup).ceil() as usize;
    k.clamp(1, n) - 1
}

pub fn count_in(config: &[Vec<f64>], region: BandRegion<'_>) -> usize {
    match region {
        BandRegion::Level { shape, k, n } => {
            let sup = shape.sup();
            config.iter().filter(|x| band_index(shape.eval(x), sup, n) == k).count()
        }
        BandRegion::Annulus { inner, outer } => config
            .iter()
            .filter(|x| {
                let r = x[0].hypot(x[1]);
                (r > inner || (inner == 0.0 && r == 0.0)) && r <= outer
            })
            .count(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk_rule() -> ScalingRule {
        let disk = DomainSpec::disk(1.0, 1.0).unwrap();
        ScalingRule::new(5.783185962946784, MeasureSpec::lebesgue(&disk), Schedule::Exact).unwrap()
    }

    #[test]
    fn zero_measure_gives_empty_configurations() {
        let disk = DomainSpec::disk(1.0, 1.0).unwrap();
        let rule = ScalingRule::new(1.0, MeasureSpec::zero(&disk), Schedule::Exact).unwrap();
        for i in 0..50 {
            assert!(sample_configuration(&rule, 3.0, RngSeed::new(1, i)).unwrap().is_empty());
        }
    }

    #[test]
    fn scaling_is_exact() {
        let rule = disk_rule();
        let mut rng = RngSeed::new(11, 0).rng();
        for _ in 0..100 {
            let a: f64 = rng.random();
            let b = a + (1.0 - a) * rng.random::<f64>();
            let tau = 3.0 * rng.random::<f64>();
            let nu = rule.measure().mass(Region::Annulus(a, b)).unwrap();
            let m = rule.intensity(Region::Annulus(a, b), tau).unwrap();
            assert!((m * rule.g(tau) - nu).abs() <= 4.0 * f64::EPSILON * nu.max(1e-300));
        }
    }

    #[test]
    fn perturbed_schedule_needs_positive_tau() {
        let disk = DomainSpec::disk(1.0, 1.0).unwrap();
        let rule = ScalingRule::new(1.0, MeasureSpec::lebesgue(&disk), Schedule::Perturbed).unwrap();
        assert!(rule.intensity_factor(0.0).is_err());
        let f = rule.intensity_factor(2.0).unwrap();
        assert!((f * rule.g(2.0) - 1.5).abs() < 1e-14);
    }

    #[test]
    fn poisson_sampler_moments() {
        for &mean in &[0.7_f64, 12.0, 49.9, 56.5, 800.0] {
            let mut rng = RngSeed::new(5, mean.to_bits()).rng();
            let n = 20_000;
            let draws: Vec<f64> = (0..n).map(|_| sample_poisson(mean, &mut rng).unwrap() as f64).collect();
            let avg = draws.iter().sum::<f64>() / n as f64;
            let var = draws.iter().map(|d| (d - avg).powi(2)).sum::<f64>() / (n - 1) as f64;
            assert!((avg - mean).abs() < 4.0 * (mean / n as f64).sqrt(), "{mean}: {avg}");
            assert!((var / mean - 1.0).abs() < 0.06, "{mean}: var {var}");
        }
    }

    #[test]
    fn disk_counts_have_poisson_mean() {
        let rule = disk_rule();
        let reps = 10_000;
        let total: usize = (0..reps)
            .map(|i| sample_configuration(&rule, 0.0, RngSeed::new(3, i)).unwrap().len())
            .sum();
        let avg = total as f64 / reps as f64;
        assert!((avg - PI).abs() < 4.0 * (PI / reps as f64).sqrt(), "{avg}");
    }

    #[test]
    fn disk_positions_are_uniform() {
        let rule = disk_rule();
        let mut r2 = Vec::new();
        let mut i = 0;
        while r2.len() < 100_000 {
            for x in sample_configuration(&rule, 1.0, RngSeed::new(4, i)).unwrap() {
                assert!(rule.measure().domain().contains(&x));
                r2.push(x[0] * x[0] + x[1] * x[1]);
            }
            i += 1;
        }
        let n = r2.len() as f64;
        let mean = r2.iter().sum::<f64>() / n;
        // r^2 is uniform on (0, 1): variance 1/12
        assert!((mean - 0.5).abs() < 4.0 * (1.0 / 12.0 / n).sqrt(), "{mean}");
    }

    #[test]
    fn density_sampling_follows_density() {
        let interval = DomainSpec::interval(2.0, 1.0).unwrap();
        let measure = MeasureSpec::with_density(&interval, Density::Bump).unwrap();
        // int_0^2 x(2-x) dx = 4/3
        assert!((measure.total() - 4.0 / 3.0).abs() < 1e-12);
        let rule = ScalingRule::new(1.0, measure, Schedule::Exact).unwrap();
        let mut xs = Vec::new();
        for i in 0..2000 {
            xs.extend(sample_configuration(&rule, 2.0, RngSeed::new(9, i)).unwrap().into_iter().map(|p| p[0]));
        }
        let n = xs.len() as f64;
        // symmetric density: mean 1, E|x-1|^2 = 1/5
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - 1.0).powi(2)).sum::<f64>() / n;
        assert!((mean - 1.0).abs() < 4.0 * (0.2 / n).sqrt());
        assert!((var - 0.2).abs() < 0.01, "{var}");
    }

    #[test]
    fn loose_sup_bound_is_refused() {
        let interval = DomainSpec::interval(1.0, 1.0).unwrap();
        let measure = MeasureSpec::with_density(
            &interval,
            Density::Custom {
                name: "flat".into(),
                density: Arc::new(|_| 1e-5),
                sup_bound: 1.0,
            },
        )
        .unwrap();
        let rule = ScalingRule::new(1.0, measure, Schedule::Exact).unwrap();
        // intensity ~ 1e-5 * e^{tau/2}; make it a handful of points
        let err = sample_configuration(&rule, 30.0, RngSeed::new(1, 1)).unwrap_err();
        assert!(matches!(err, SamplingError::Efficiency { .. }));
    }

    #[test]
    fn negative_density_is_rejected() {
        let interval = DomainSpec::interval(1.0, 1.0).unwrap();
        let err = MeasureSpec::with_density(
            &interval,
            Density::Custom {
                name: "neg".into(),
                density: Arc::new(|x| x[0] - 0.5),
                sup_bound: 1.0,
            },
        )
        .unwrap_err();
        assert!(matches!(err, SamplingError::NegativeDensity { .. }));
    }

    #[test]
    fn band_index_is_left_open_right_closed() {
        assert_eq!(band_index(0.0, 1.0, 4), 0);
        assert_eq!(band_index(0.25, 1.0, 4), 0);
        assert_eq!(band_index(0.2500001, 1.0, 4), 1);
        assert_eq!(band_index(1.0, 1.0, 4), 3);
        assert_eq!(band_index(1.0 + 1e-12, 1.0, 4), 3);
    }

    #[test]
    fn annulus_counts_partition() {
        let config = vec![vec![0.0, 0.0], vec![0.5, 0.0], vec![0.0, -0.99], vec![0.3, 0.3]];
        let n = 5;
        let total: usize = (0..n)
            .map(|k| {
                count_in(
                    &config,
                    BandRegion::Annulus {
                        inner: k as f64 / n as f64,
                        outer: (k + 1) as f64 / n as f64,
                    },
                )
            })
            .sum();
        assert_eq!(total, config.len());
        assert_eq!(count_in(&[], BandRegion::Annulus { inner: 0.0, outer: 1.0 }), 0);
    }
}
