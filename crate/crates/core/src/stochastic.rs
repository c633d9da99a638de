//! Path simulation of `d xi = B^T dW` with absorption on the boundary.
//!
//! Increments are exact Gaussians for constant `B`, so the only
//! discretization error is missed boundary crossings between grid times.
//! With `bridge_correction`, each step also kills the path with the
//! Brownian-bridge crossing probability `exp(-2 d0 d1 / (v dt))`, where
//! `d0`, `d1` are the endpoint distances to a boundary face and `v` the
//! variance per unit time normal to it. Box faces are tested independently;
//! the disk uses the tangent half-plane at the nearest boundary point.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use thiserror::Error;

use crate::domain::{DomainError, DomainKind, DomainSpec};
use crate::rng::RngSeed;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimulationError {
    #[error(transparent)]
    Domain(#[from] DomainError),
    #[error("starting point {0:?} is not inside the domain")]
    StartOutside(Vec<f64>),
    #[error("invalid path configuration: {0}")]
    Config(String),
}

/// Time grid and noise loading of the simulated paths.
#[derive(Debug, Clone, PartialEq)]
pub struct PathConfig {
    pub dt: f64,
    pub t_end: f64,
    pub bridge_correction: bool,
    /// `B` with `B^T B = sigma`; `None` uses the domain's Cholesky loading.
    pub b_matrix: Option<DMatrix<f64>>,
}

impl PathConfig {
    pub fn new(dt: f64, t_end: f64, bridge_correction: bool) -> Self {
        Self {
            dt,
            t_end,
            bridge_correction,
            b_matrix: None,
        }
    }

    fn validate(&self, domain: &DomainSpec) -> Result<DMatrix<f64>, SimulationError> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(SimulationError::Config(format!("dt must be > 0, got {}", self.dt)));
        }
        if !(self.t_end > 0.0) || !self.t_end.is_finite() {
            return Err(SimulationError::Config(format!("t_end must be > 0, got {}", self.t_end)));
        }
        if self.dt > self.t_end {
            return Err(SimulationError::Config(format!(
                "dt = {} exceeds t_end = {}",
                self.dt, self.t_end
            )));
        }
        match &self.b_matrix {
            None => Ok(domain.noise_loading()),
            Some(b) => {
                let d = domain.dim();
                if b.nrows() != d || b.ncols() != d {
                    return Err(SimulationError::Config(format!("B must be {d}x{d}")));
                }
                let mismatch = (b.transpose() * b - domain.sigma()).amax();
                if mismatch > 1e-12 * domain.sigma().amax().max(1.0) {
                    return Err(SimulationError::Config(format!(
                        "B^T B differs from sigma by {mismatch:.3e}"
                    )));
                }
                Ok(b.clone())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Outcome {
    Survived,
    /// First grid time at which absorption was detected.
    Absorbed { time: f64 },
}

impl Outcome {
    pub fn survived(self) -> bool {
        matches!(self, Outcome::Survived)
    }
}

/// Probability that a Brownian bridge with variance `var` per unit time,
/// pinned at distances `d0` and `d1` from a flat boundary over a step of
/// length `dt`, touches the boundary.
pub fn crossing_probability(d0: f64, d1: f64, var: f64, dt: f64) -> f64 {
    if d0 <= 0.0 || d1 <= 0.0 {
        return 1.0;
    }
    let exponent = 2.0 * d0 * d1 / (var * dt);
    if exponent > 745.0 {
        0.0
    } else {
        (-exponent).exp()
    }
}

/// Boundary data in the form the step loop needs.
#[derive(Debug, Clone)]
enum Geometry {
    /// Sides `L_i` and normal variances `sigma_ii` per axis.
    Faces { lengths: Vec<f64>, variances: Vec<f64> },
    Disk { radius: f64, sigma: [f64; 3] },
}

impl Geometry {
    fn new(domain: &DomainSpec) -> Self {
        let sigma = domain.sigma();
        match domain.kind() {
            DomainKind::Interval { length } => Geometry::Faces {
                lengths: vec![*length],
                variances: vec![sigma[(0, 0)]],
            },
            DomainKind::Box { lengths } => Geometry::Faces {
                lengths: lengths.clone(),
                variances: (0..lengths.len()).map(|i| sigma[(i, i)]).collect(),
            },
            DomainKind::Disk { radius } => Geometry::Disk {
                radius: *radius,
                sigma: [sigma[(0, 0)], sigma[(0, 1)], sigma[(1, 1)]],
            },
        }
    }

    fn outside(&self, x: &[f64]) -> bool {
        match self {
            Geometry::Faces { lengths, .. } => lengths.iter().zip(x).any(|(l, xi)| *xi <= 0.0 || *xi >= *l),
            Geometry::Disk { radius, .. } => x[0] * x[0] + x[1] * x[1] >= radius * radius,
        }
    }

    /// Distance from the boundary beyond which a step of length `h` has
    /// crossing probability exactly 0 in `f64`.
    fn safe_margin(&self, h: f64) -> f64 {
        let v = match self {
            Geometry::Faces { variances, .. } => variances.iter().copied().fold(0.0, f64::max),
            Geometry::Disk { sigma, .. } => {
                // largest eigenvalue of the 2x2 block bounds every normal variance
                let mean = 0.5 * (sigma[0] + sigma[2]);
                mean + (0.25 * (sigma[0] - sigma[2]).powi(2) + sigma[1] * sigma[1]).sqrt()
            }
        };
        (0.5 * 745.0 * v * h).sqrt()
    }

    /// Whether both endpoints stay at least `margin` away from the boundary.
    fn deep_inside(&self, x0: &[f64], x1: &[f64], margin: f64) -> bool {
        match self {
            Geometry::Faces { lengths, .. } => lengths.iter().enumerate().all(|(i, l)| {
                x0[i] > margin && x1[i] > margin && l - x0[i] > margin && l - x1[i] > margin
            }),
            Geometry::Disk { radius, .. } => {
                let inner = radius - margin;
                inner > 0.0 && {
                    let inner2 = inner * inner;
                    x0[0] * x0[0] + x0[1] * x0[1] < inner2 && x1[0] * x1[0] + x1[1] * x1[1] < inner2
                }
            }
        }
    }

    /// Probability that the bridge between two interior points left the domain.
    fn bridge_probability(&self, x0: &[f64], x1: &[f64], h: f64) -> f64 {
        match self {
            Geometry::Faces { lengths, variances } => {
                let mut keep = 1.0;
                for i in 0..lengths.len() {
                    let (l, v) = (lengths[i], variances[i]);
                    keep *= (1.0 - crossing_probability(x0[i], x1[i], v, h))
                        * (1.0 - crossing_probability(l - x0[i], l - x1[i], v, h));
                }
                1.0 - keep
            }
            Geometry::Disk { radius, sigma } => {
                let r0 = (x0[0] * x0[0] + x0[1] * x0[1]).sqrt();
                let r1 = (x1[0] * x1[0] + x1[1] * x1[1]).sqrt();
                let v = if r0 > 0.0 {
                    let (n0, n1) = (x0[0] / r0, x0[1] / r0);
                    sigma[0] * n0 * n0 + 2.0 * sigma[1] * n0 * n1 + sigma[2] * n1 * n1
                } else {
                    sigma[0]
                };
                crossing_probability(radius - r0, radius - r1, v, h)
            }
        }
    }
}

/// Simulator prepared for one domain and path configuration.
#[derive(Debug, Clone)]
pub struct PathSimulator {
    domain: DomainSpec,
    geometry: Geometry,
    /// Row-major `B^T`: increment `dx_i = sqrt(h) sum_k loading[i][k] z_k`.
    loading: Vec<f64>,
    dim: usize,
    dt: f64,
    t_end: f64,
    n_steps: usize,
    bridge: bool,
}

impl PathSimulator {
    pub fn new(domain: &DomainSpec, cfg: &PathConfig) -> Result<Self, SimulationError> {
        let b = cfg.validate(domain)?;
        let bt = b.transpose();
        let dim = domain.dim();
        let loading = (0..dim).flat_map(|i| (0..dim).map(move |k| (i, k))).map(|(i, k)| bt[(i, k)]).collect();
        // tolerate t_end / dt landing a hair above an integer
        let n_steps = ((cfg.t_end / cfg.dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        Ok(Self {
            domain: domain.clone(),
            geometry: Geometry::new(domain),
            loading,
            dim,
            dt: cfg.dt,
            t_end: cfg.t_end,
            n_steps,
            bridge: cfg.bridge_correction,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// One path from `x0` driven by `rng`.
    pub fn run(&self, x0: &[f64], rng: &mut impl Rng) -> Result<Outcome, SimulationError> {
        self.domain.check_dimension(x0)?;
        if !self.domain.contains(x0) {
            return Err(SimulationError::StartOutside(x0.to_vec()));
        }
        match self.dim {
            1 => Ok(self.run_fixed::<1>(x0, rng)),
            2 => Ok(self.run_fixed::<2>(x0, rng)),
            3 => Ok(self.run_fixed::<3>(x0, rng)),
            _ => Ok(self.run_dyn(x0, rng)),
        }
    }

    /// Step size and the time reached after step `step`.
    #[inline]
    fn step_times(&self, step: usize, full_scale: f64) -> (f64, f64, f64) {
        if step + 1 == self.n_steps {
            let h = self.t_end - self.dt * step as f64;
            (h, h.sqrt(), self.t_end)
        } else {
            (self.dt, full_scale, self.dt * (step + 1) as f64)
        }
    }

    #[inline]
    fn killed_between(&self, x: &[f64], next: &[f64], h: f64, margin: f64, rng: &mut impl Rng) -> bool {
        // margin is computed for dt and every step has h <= dt
        if !self.bridge || self.geometry.deep_inside(x, next, margin) {
            return false;
        }
        let p = self.geometry.bridge_probability(x, next, h);
        p > 0.0 && rng.random::<f64>() < p
    }

    fn run_fixed<const D: usize>(&self, x0: &[f64], rng: &mut impl Rng) -> Outcome {
        let mut b = [[0.0; D]; D];
        for (i, row) in b.iter_mut().enumerate() {
            row.copy_from_slice(&self.loading[i * D..(i + 1) * D]);
        }
        let mut x = [0.0; D];
        x.copy_from_slice(x0);
        let full_scale = self.dt.sqrt();
        let margin = self.geometry.safe_margin(self.dt);
        for step in 0..self.n_steps {
            let (h, scale, t) = self.step_times(step, full_scale);
            let mut z = [0.0; D];
            for zk in z.iter_mut() {
                *zk = rng.sample::<f64, _>(StandardNormal) * scale;
            }
            let mut next = x;
            for i in 0..D {
                for k in 0..D {
                    next[i] += b[i][k] * z[k];
                }
            }
            if self.geometry.outside(&next) || self.killed_between(&x, &next, h, margin, rng) {
                return Outcome::Absorbed { time: t };
            }
            x = next;
        }
        Outcome::Survived
    }

    fn run_dyn(&self, x0: &[f64], rng: &mut impl Rng) -> Outcome {
        let d = self.dim;
        let mut x = x0.to_vec();
        let mut next = vec![0.0; d];
        let mut z = vec![0.0; d];
        let full_scale = self.dt.sqrt();
        let margin = self.geometry.safe_margin(self.dt);
        for step in 0..self.n_steps {
            let (h, scale, t) = self.step_times(step, full_scale);
            for zk in z.iter_mut() {
                *zk = rng.sample::<f64, _>(StandardNormal) * scale;
            }
            for i in 0..d {
                let row = &self.loading[i * d..(i + 1) * d];
                next[i] = x[i] + row.iter().zip(&z).map(|(b, zk)| b * zk).sum::<f64>();
            }
            if self.geometry.outside(&next) || self.killed_between(&x, &next, h, margin, rng) {
                return Outcome::Absorbed { time: t };
            }
            std::mem::swap(&mut x, &mut next);
        }
        Outcome::Survived
    }
}

/// Simulate a single path until absorption or `cfg.t_end`.
pub fn simulate_until_absorbed(
    domain: &DomainSpec,
    cfg: &PathConfig,
    x0: &[f64],
    seed: RngSeed,
) -> Result<Outcome, SimulationError> {
    PathSimulator::new(domain, cfg)?.run(x0, &mut seed.rng())
}

/// Monte Carlo survival estimate with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurvivalEstimate {
    pub p_hat: f64,
    pub std_err: f64,
    pub n_paths: usize,
}

/// Fraction of `n_paths` independent paths (stream `seed.derive(i)` for
/// path `i`) that survive to `cfg.t_end`.
pub fn estimate_survival(
    domain: &DomainSpec,
    cfg: &PathConfig,
    x0: &[f64],
    n_paths: usize,
    seed: RngSeed,
) -> Result<SurvivalEstimate, SimulationError> {
    if n_paths == 0 {
        return Err(SimulationError::Config("n_paths must be >= 1".into()));
    }
    let sim = PathSimulator::new(domain, cfg)?;
    let survivors = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| sim.run(x0, &mut seed.derive(i).rng()).map(|o| usize::from(o.survived())))
        .try_reduce(|| 0, |a, b| Ok(a + b))?;
    let p_hat = survivors as f64 / n_paths as f64;
    Ok(SurvivalEstimate {
        p_hat,
        std_err: (p_hat * (1.0 - p_hat) / n_paths as f64).sqrt(),
        n_paths,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasRow {
    pub dt: f64,
    pub p_hat: f64,
    pub std_err: f64,
}

/// Survival estimates over a decreasing grid of time steps.
pub fn bias_probe(
    domain: &DomainSpec,
    x0: &[f64],
    t_end: f64,
    dt_grid: &[f64],
    n_paths: usize,
    bridge_correction: bool,
    seed: RngSeed,
) -> Result<Vec<BiasRow>, SimulationError> {
    if dt_grid.windows(2).any(|w| w[1] >= w[0]) {
        return Err(SimulationError::Config("dt grid must be strictly decreasing".into()));
    }
    dt_grid
        .iter()
        .enumerate()
        .map(|(i, &dt)| {
            let cfg = PathConfig::new(dt, t_end, bridge_correction);
            let est = estimate_survival(domain, &cfg, x0, n_paths, seed.derive(i as u64))?;
            Ok(BiasRow {
                dt,
                p_hat: est.p_hat,
                std_err: est.std_err,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crossing_probability_bounds() {
        assert_eq!(crossing_probability(0.0, 0.3, 1.0, 0.01), 1.0);
        assert_eq!(crossing_probability(0.3, -0.1, 1.0, 0.01), 1.0);
        assert_eq!(crossing_probability(1.0, 1.0, 1.0, 1e-4), 0.0);
        let mut rng = RngSeed::new(2, 2).rng();
        for _ in 0..1000 {
            let p = crossing_probability(rng.random(), rng.random(), rng.random::<f64>() + 0.01, rng.random::<f64>() + 1e-6);
            assert!((0.0..=1.0).contains(&p));
        }
    }

    #[test]
    fn first_increment_outside_is_absorbed_at_first_step() {
        // huge step from near the wall: the first endpoint leaves the interval
        let d = DomainSpec::interval(1.0, 1.0).unwrap();
        let cfg = PathConfig::new(1e8, 1e8, false);
        for s in 0..20 {
            let out = simulate_until_absorbed(&d, &cfg, &[0.5], RngSeed::new(1, s)).unwrap();
            assert_eq!(out, Outcome::Absorbed { time: 1e8 });
        }
    }

    #[test]
    fn start_outside_is_rejected() {
        let d = DomainSpec::disk(1.0, 1.0).unwrap();
        let cfg = PathConfig::new(0.01, 1.0, true);
        assert!(matches!(
            simulate_until_absorbed(&d, &cfg, &[1.0, 0.0], RngSeed::new(1, 1)),
            Err(SimulationError::StartOutside(_))
        ));
        assert!(simulate_until_absorbed(&d, &cfg, &[0.0], RngSeed::new(1, 1)).is_err());
    }

    #[test]
    fn config_validation() {
        let d = DomainSpec::disk(1.0, 2.0).unwrap();
        assert!(PathSimulator::new(&d, &PathConfig::new(0.5, 0.1, true)).is_err());
        assert!(PathSimulator::new(&d, &PathConfig::new(0.0, 0.1, true)).is_err());
        let mut cfg = PathConfig::new(0.01, 1.0, true);
        cfg.b_matrix = Some(DMatrix::identity(2, 2));
        assert!(PathSimulator::new(&d, &cfg).is_err());
        cfg.b_matrix = Some(DMatrix::identity(2, 2) * 2f64.sqrt());
        assert!(PathSimulator::new(&d, &cfg).is_ok());
        let sim = PathSimulator::new(&d, &PathConfig::new(1e-4, 1.0, true)).unwrap();
        assert_eq!(sim.n_steps(), 10_000);
    }

    #[test]
    fn deterministic_given_seed() {
        let d = DomainSpec::disk(1.0, 1.0).unwrap();
        let cfg = PathConfig::new(1e-3, 1.0, true);
        for s in 0..20 {
            let a = simulate_until_absorbed(&d, &cfg, &[0.2, 0.1], RngSeed::new(9, s)).unwrap();
            let b = simulate_until_absorbed(&d, &cfg, &[0.2, 0.1], RngSeed::new(9, s)).unwrap();
            assert_eq!(a, b);
        }
        let e1 = estimate_survival(&d, &cfg, &[0.0, 0.0], 500, RngSeed::new(4, 0)).unwrap();
        let e2 = estimate_survival(&d, &cfg, &[0.0, 0.0], 500, RngSeed::new(4, 0)).unwrap();
        assert_eq!(e1, e2);
    }

    #[test]
    fn tiny_horizon_survives() {
        let d = DomainSpec::interval(1.0, 1.0).unwrap();
        let cfg = PathConfig::new(1e-8, 1e-8, true);
        let est = estimate_survival(&d, &cfg, &[0.5], 1000, RngSeed::new(3, 3)).unwrap();
        assert_eq!(est.p_hat, 1.0);
        let one = estimate_survival(&d, &PathConfig::new(0.01, 0.5, true), &[0.5], 1, RngSeed::new(3, 3)).unwrap();
        assert!(one.p_hat == 0.0 || one.p_hat == 1.0);
        assert_eq!(one.std_err, 0.0);
    }

    #[test]
    fn bias_probe_needs_decreasing_grid() {
        let d = DomainSpec::interval(1.0, 1.0).unwrap();
        assert!(bias_probe(&d, &[0.5], 0.1, &[1e-3, 1e-2], 10, true, RngSeed::new(1, 0)).is_err());
    }
}
