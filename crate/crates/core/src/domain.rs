//! Absorbing domains and their diffusion matrices.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DomainError {
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("diffusion matrix must be {expected}x{expected}, got {rows}x{cols}")]
    SigmaShape {
        expected: usize,
        rows: usize,
        cols: usize,
    },
    #[error("diffusion matrix is not symmetric (entry ({0},{1}))")]
    NotSymmetric(usize, usize),
    #[error("diffusion matrix is not positive definite (smallest eigenvalue {0})")]
    NotPositiveDefinite(f64),
    #[error("position {position:?} lies outside the closed domain")]
    Outside { position: Vec<f64> },
    #[error("position has dimension {got}, domain has dimension {expected}")]
    PositionDimension { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainKind {
    Interval { length: f64 },
    Box { lengths: Vec<f64> },
    Disk { radius: f64 },
}

impl DomainKind {
    pub fn dim(&self) -> usize {
        match self {
            DomainKind::Interval { .. } => 1,
            DomainKind::Box { lengths } => lengths.len(),
            DomainKind::Disk { .. } => 2,
        }
    }
}

/// A bounded domain `Q` together with the diffusion matrix `sigma = B^T B`
/// of the generator `(1/2) sum sigma_ij d_i d_j`.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainSpec {
    kind: DomainKind,
    sigma: DMatrix<f64>,
    ellipticity: f64,
}

impl DomainSpec {
    pub fn new(kind: DomainKind, sigma: DMatrix<f64>) -> Result<Self, DomainError> {
        match &kind {
            DomainKind::Interval { length } => check_length("interval length", *length)?,
            DomainKind::Box { lengths } => {
                if lengths.is_empty() {
                    return Err(DomainError::Geometry("box needs at least one side".into()));
                }
                for &l in lengths {
                    check_length("box side", l)?;
                }
            }
            DomainKind::Disk { radius } => check_length("disk radius", *radius)?,
        }
        let d = kind.dim();
        if sigma.nrows() != d || sigma.ncols() != d {
            return Err(DomainError::SigmaShape {
                expected: d,
                rows: sigma.nrows(),
                cols: sigma.ncols(),
            });
        }
        if sigma.iter().any(|v| !v.is_finite()) {
            return Err(DomainError::Geometry("diffusion matrix has non-finite entries".into()));
        }
        let scale = sigma.amax().max(f64::MIN_POSITIVE);
        for i in 0..d {
            for j in 0..i {
                if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 * scale {
                    return Err(DomainError::NotSymmetric(i, j));
                }
            }
        }
        let ellipticity = sigma.clone().symmetric_eigenvalues().min();
        if !(ellipticity > 0.0) {
            return Err(DomainError::NotPositiveDefinite(ellipticity));
        }
        Ok(Self {
            kind,
            sigma,
            ellipticity,
        })
    }

    pub fn interval(length: f64, sigma2: f64) -> Result<Self, DomainError> {
        Self::new(DomainKind::Interval { length }, DMatrix::from_element(1, 1, sigma2))
    }

    /// Box with a diagonal diffusion matrix.
    pub fn cuboid(lengths: Vec<f64>, diagonal: &[f64]) -> Result<Self, DomainError> {
        let sigma = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diagonal));
        Self::new(DomainKind::Box { lengths }, sigma)
    }

    /// Disk with isotropic diffusion `sigma2 * I`.
    pub fn disk(radius: f64, sigma2: f64) -> Result<Self, DomainError> {
        Self::new(DomainKind::Disk { radius }, DMatrix::identity(2, 2) * sigma2)
    }

    pub fn kind(&self) -> &DomainKind {
        &self.kind
    }

    pub fn dim(&self) -> usize {
        self.kind.dim()
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    /// Smallest eigenvalue of `sigma`, the ellipticity constant.
    pub fn ellipticity(&self) -> f64 {
        self.ellipticity
    }

    pub fn is_diagonal(&self) -> bool {
        let d = self.dim();
        (0..d).all(|i| (0..d).all(|j| i == j || self.sigma[(i, j)] == 0.0))
    }

    /// `Some(s2)` when `sigma = s2 * I`.
    pub fn isotropic_variance(&self) -> Option<f64> {
        let s2 = self.sigma[(0, 0)];
        let d = self.dim();
        let iso = self.is_diagonal() && (0..d).all(|i| (self.sigma[(i, i)] - s2).abs() <= 1e-12 * s2);
        iso.then_some(s2)
    }

    /// Largest diagonal entry of `sigma`.
    pub fn max_diagonal(&self) -> f64 {
        (0..self.dim()).map(|i| self.sigma[(i, i)]).fold(0.0, f64::max)
    }

    pub fn diameter(&self) -> f64 {
        match &self.kind {
            DomainKind::Interval { length } => *length,
            DomainKind::Box { lengths } => lengths.iter().map(|l| l * l).sum::<f64>().sqrt(),
            DomainKind::Disk { radius } => 2.0 * radius,
        }
    }

    /// Lebesgue measure `|Q|`.
    pub fn volume(&self) -> f64 {
        match &self.kind {
            DomainKind::Interval { length } => *length,
            DomainKind::Box { lengths } => lengths.iter().product(),
            DomainKind::Disk { radius } => std::f64::consts::PI * radius * radius,
        }
    }

    pub fn center(&self) -> Vec<f64> {
        match &self.kind {
            DomainKind::Interval { length } => vec![0.5 * length],
            DomainKind::Box { lengths } => lengths.iter().map(|l| 0.5 * l).collect(),
            DomainKind::Disk { .. } => vec![0.0, 0.0],
        }
    }

    /// Signed distance to `dQ`: positive inside, zero on the boundary.
    pub fn boundary_distance(&self, x: &[f64]) -> f64 {
        match &self.kind {
            DomainKind::Interval { length } => x[0].min(length - x[0]),
            DomainKind::Box { lengths } => lengths
                .iter()
                .zip(x)
                .map(|(l, xi)| xi.min(l - xi))
                .fold(f64::INFINITY, f64::min),
            DomainKind::Disk { radius } => radius - x[0].hypot(x[1]),
        }
    }

    pub fn check_dimension(&self, x: &[f64]) -> Result<(), DomainError> {
        if x.len() != self.dim() {
            return Err(DomainError::PositionDimension {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    /// Open interior.
    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().all(|v| v.is_finite()) && self.boundary_distance(x) > 0.0
    }

    pub fn in_closure(&self, x: &[f64]) -> bool {
        x.len() == self.dim() && x.iter().all(|v| v.is_finite()) && self.boundary_distance(x) >= 0.0
    }

    /// Noise loading `B` with `B^T B = sigma`: the transposed lower Cholesky factor.
    pub fn noise_loading(&self) -> DMatrix<f64> {
        let chol = self
            .sigma
            .clone()
            .cholesky()
            .expect("sigma was checked positive definite at construction");
        chol.l().transpose()
    }
}

fn check_length(what: &str, v: f64) -> Result<(), DomainError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(DomainError::Geometry(format!("{what} must be finite and > 0, got {v}")))
    }
}
