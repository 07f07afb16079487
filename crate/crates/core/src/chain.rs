//! Equilibrium geometry of a linear ion chain and the local-phonon couplings.
//!
//! The axial equilibrium is solved in the dimensionless units of the
//! harmonic-plus-Coulomb potential, `V(u) = Σ uᵢ²/2 + Σ_{i<j} 1/|uᵢ − uⱼ|`,
//! with length scale `ℓ = (e²/(4πε₀ m ω_z²))^{1/3}`. Hopping rates follow from
//! the radial (y) frequency and the pairwise distances.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::constants::{self, coulomb_energy_scale, hz_to_angular};
use crate::{Error, Result};

const NEWTON_MAX_ITER: usize = 200;
const GRADIENT_TOL: f64 = 1e-12;

/// Trap parameters. Frequencies are ordinary frequencies in Hz.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrapConfig {
    pub ion_count: usize,
    /// Ion mass, kg.
    pub mass: f64,
    /// Ion charge, C.
    pub charge: f64,
    pub nu_x: f64,
    pub nu_y: f64,
    pub nu_z: f64,
}

impl Default for TrapConfig {
    /// Two ⁴⁰Ca⁺ ions at (3.07, 2.87, 0.11) MHz.
    fn default() -> Self {
        let (nu_x, nu_y, nu_z) = constants::REFERENCE_SECULAR_HZ;
        Self { ion_count: 2, mass: constants::ca40_ion_mass(), charge: constants::ELEMENTARY_CHARGE, nu_x, nu_y, nu_z }
    }
}

impl TrapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ion_count == 0 {
            return Err(Error::Invalid("ion_count must be at least 1".into()));
        }
        if !(self.mass > 0.0) || !self.mass.is_finite() {
            return Err(Error::Invalid(format!("mass must be positive, got {}", self.mass)));
        }
        if !(self.charge != 0.0) || !self.charge.is_finite() {
            return Err(Error::Invalid("charge must be nonzero".into()));
        }
        for (name, nu) in [("nu_x", self.nu_x), ("nu_y", self.nu_y), ("nu_z", self.nu_z)] {
            if !(nu > 0.0) || !nu.is_finite() {
                return Err(Error::Invalid(format!("{name} must be positive, got {nu}")));
            }
        }
        if !(self.nu_z < self.nu_x && self.nu_z < self.nu_y) {
            return Err(Error::Invalid(
                "axial frequency must be below both radial frequencies for a linear chain".into(),
            ));
        }
        Ok(())
    }

    /// Radial angular frequency ω_y, rad/s.
    pub fn omega_y(&self) -> f64 {
        hz_to_angular(self.nu_y)
    }

    /// Axial angular frequency ω_z, rad/s.
    pub fn omega_z(&self) -> f64 {
        hz_to_angular(self.nu_z)
    }

    /// Length scale ℓ of the axial equilibrium problem, m.
    pub fn length_scale(&self) -> f64 {
        let wz = self.omega_z();
        (coulomb_energy_scale(self.charge) / (self.mass * wz * wz)).cbrt()
    }
}

/// Positions and local-phonon couplings of a chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainGeometry {
    /// Axial coordinates, m, ascending.
    pub positions: Vec<f64>,
    /// Hopping rates κᵢⱼ, rad/s. Symmetric with zero diagonal.
    pub kappa: Vec<Vec<f64>>,
    /// Site shifts ωᵢ, rad/s.
    pub site_shift: Vec<f64>,
}

impl ChainGeometry {
    /// Full geometry for a validated trap.
    pub fn from_trap(trap: &TrapConfig) -> Result<Self> {
        let positions = equilibrium_positions(trap)?;
        let kappa = coupling_matrix(&positions, trap)?;
        let site_shift = site_shifts(&kappa)?;
        Ok(Self { positions, kappa, site_shift })
    }

    /// Geometry with hand-picked couplings; positions are synthetic (unit
    /// spacing) since only κ and ω enter the dynamics.
    pub fn from_kappa(kappa: Vec<Vec<f64>>) -> Result<Self> {
        let site_shift = site_shifts(&kappa)?;
        let positions = (0..kappa.len()).map(|i| i as f64).collect();
        Ok(Self { positions, kappa, site_shift })
    }

    /// Uniform two-ion geometry with hopping rate `kappa`.
    pub fn two_ion(kappa: f64) -> Self {
        Self::from_kappa(vec![vec![0.0, kappa], vec![kappa, 0.0]]).expect("two-ion coupling matrix is valid")
    }

    /// Geometry of `n` uncoupled ions (hopping disabled).
    pub fn uncoupled(n: usize) -> Self {
        Self { positions: (0..n).map(|i| i as f64).collect(), kappa: vec![vec![0.0; n]; n], site_shift: vec![0.0; n] }
    }

    pub fn ion_count(&self) -> usize {
        self.site_shift.len()
    }

    /// Nearest-neighbour hopping rate between ions 0 and 1, or 0 for one ion.
    pub fn kappa_01(&self) -> f64 {
        if self.ion_count() < 2 {
            0.0
        } else {
            self.kappa[0][1]
        }
    }

    /// Copy with all couplings removed.
    pub fn without_hopping(&self) -> Self {
        let n = self.ion_count();
        Self { positions: self.positions.clone(), kappa: vec![vec![0.0; n]; n], site_shift: vec![0.0; n] }
    }
}

/// Gradient of the dimensionless axial potential.
fn potential_gradient(u: &DVector<f64>) -> DVector<f64> {
    let n = u.len();
    DVector::from_fn(n, |i, _| {
        let mut g = u[i];
        for j in 0..n {
            if j != i {
                let d = u[i] - u[j];
                g -= d.signum() / (d * d);
            }
        }
        g
    })
}

fn potential(u: &DVector<f64>) -> f64 {
    let n = u.len();
    let mut v = 0.5 * u.norm_squared();
    for i in 0..n {
        for j in i + 1..n {
            v += 1.0 / (u[j] - u[i]).abs();
        }
    }
    v
}

fn potential_hessian(u: &DVector<f64>) -> DMatrix<f64> {
    let n = u.len();
    let mut h = DMatrix::identity(n, n);
    for i in 0..n {
        for j in 0..n {
            if j != i {
                let c = 2.0 / (u[i] - u[j]).abs().powi(3);
                h[(i, i)] += c;
                h[(i, j)] -= c;
            }
        }
    }
    h
}

fn is_strictly_increasing(u: &DVector<f64>) -> bool {
    u.as_slice().windows(2).all(|w| w[1] > w[0])
}

/// Dimensionless equilibrium coordinates (units of the trap length scale).
pub fn equilibrium_scaled(ion_count: usize) -> Result<Vec<f64>> {
    if ion_count == 0 {
        return Err(Error::Invalid("ion_count must be at least 1".into()));
    }
    if ion_count == 1 {
        return Ok(vec![0.0]);
    }
    // Near-uniform seed; the spacing law fits the minimum spacing of long chains.
    let n = ion_count as f64;
    let spacing = 2.018 / n.powf(0.559);
    let mut u = DVector::from_fn(ion_count, |i, _| spacing * (i as f64 - (n - 1.0) / 2.0));

    for _ in 0..NEWTON_MAX_ITER {
        let grad = potential_gradient(&u);
        if grad.norm() < GRADIENT_TOL {
            let mean = u.mean();
            return Ok(u.iter().map(|x| x - mean).collect());
        }
        let hess = potential_hessian(&u);
        let step = hess.cholesky().map(|c| c.solve(&grad)).unwrap_or_else(|| grad.clone());
        let v0 = potential(&u);
        let mut lambda = 1.0;
        loop {
            let trial = &u - &step * lambda;
            if is_strictly_increasing(&trial) && potential(&trial) <= v0 + 1e-15 * v0.abs() {
                u = trial;
                break;
            }
            lambda *= 0.5;
            if lambda < 1e-12 {
                return Err(Error::NoConvergence { what: "equilibrium line search", iterations: NEWTON_MAX_ITER });
            }
        }
    }
    Err(Error::NoConvergence { what: "equilibrium positions", iterations: NEWTON_MAX_ITER })
}

/// Equilibrium axial positions in metres, centred and ascending.
pub fn equilibrium_positions(trap: &TrapConfig) -> Result<Vec<f64>> {
    trap.validate()?;
    let scale = trap.length_scale();
    Ok(equilibrium_scaled(trap.ion_count)?.into_iter().map(|u| u * scale).collect())
}

/// Hopping rates κᵢⱼ = e²/(4πε₀ m dᵢⱼ³ ω_y), rad/s.
pub fn coupling_matrix(positions: &[f64], trap: &TrapConfig) -> Result<Vec<Vec<f64>>> {
    if !(trap.nu_y > 0.0) {
        return Err(Error::Invalid("nu_y must be positive".into()));
    }
    if !(trap.mass > 0.0) {
        return Err(Error::Invalid("mass must be positive".into()));
    }
    let n = positions.len();
    for w in positions.windows(2) {
        if !(w[1] > w[0]) {
            return Err(Error::Invalid(format!("positions must be strictly increasing (got {} then {})", w[0], w[1])));
        }
    }
    let prefactor = coulomb_energy_scale(trap.charge) / (trap.mass * trap.omega_y());
    let mut kappa = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = positions[j] - positions[i];
            let k = prefactor / (d * d * d);
            kappa[i][j] = k;
            kappa[j][i] = k;
        }
    }
    Ok(kappa)
}

/// Site shifts ωᵢ = −½ Σ_{j≠i} κᵢⱼ.
pub fn site_shifts(kappa: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = kappa.len();
    for (i, row) in kappa.iter().enumerate() {
        if row.len() != n {
            return Err(Error::Dimension { expected: n, got: row.len() });
        }
        if row[i] != 0.0 {
            return Err(Error::Invalid(format!("kappa[{i}][{i}] must be zero")));
        }
        for j in 0..n {
            let (a, b) = (row[j], kappa[j][i]);
            if (a - b).abs() > 1e-12 * a.abs().max(b.abs()) {
                return Err(Error::Invalid(format!("kappa not symmetric at ({i}, {j})")));
            }
        }
    }
    Ok(kappa
        .iter()
        .enumerate()
        .map(|(i, row)| -0.5 * row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, k)| k).sum::<f64>())
        .collect())
}
