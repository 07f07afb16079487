//! Rotating-frame Hamiltonians: local-phonon hopping, red/blue sideband
//! blockade drives, and the resonant Jaynes–Cummings ladder.
//!
//! The frame removes the radial trap frequency and the internal splitting,
//! so the hopping part is `Σ ωᵢ aᵢ†aᵢ + Σ_{i<j} (κᵢⱼ/2)(aᵢaⱼ† + aᵢ†aⱼ)`.
//! Drive phases multiply the spin-raising half of each coupling term; φ = 0
//! gives the plain `g(a σ⁺ + a† σ⁻)` (red) and `g(a† σ⁺ + a σ⁻)` (blue) forms.

use serde::{Deserialize, Serialize};

use crate::chain::ChainGeometry;
use crate::hilbert::{site_operator, HilbertSpec, Level, Operator, SiteOp};
use crate::{Error, Result, C64};

/// Which motional sideband a drive addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sideband {
    /// Jaynes–Cummings: |↓,n⟩ ↔ |↑,n−1⟩.
    Rsb,
    /// Anti-Jaynes–Cummings: |↓,n⟩ ↔ |↑,n+1⟩.
    Bsb,
}

/// Continuous sideband drive on one ion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DriveSpec {
    pub site: usize,
    /// Half the sideband Rabi frequency, rad/s.
    pub g: f64,
    /// Detuning from the sideband resonance, rad/s.
    #[serde(default)]
    pub detuning: f64,
    #[serde(default = "default_sideband")]
    pub sideband: Sideband,
    #[serde(default)]
    pub phase: f64,
}

fn default_sideband() -> Sideband {
    Sideband::Bsb
}

impl DriveSpec {
    /// Resonant drive with zero phase.
    pub fn resonant(site: usize, g: f64, sideband: Sideband) -> Self {
        Self { site, g, detuning: 0.0, sideband, phase: 0.0 }
    }
}

/// Coupling shapes available to pulses and drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    /// |↓,n⟩ ↔ |↑,n⟩
    Carrier,
    /// |↓,n⟩ ↔ |e₀,n⟩
    Shelve,
    Red,
    Blue,
}

/// `g (e^{iφ} R + e^{−iφ} R†)` where `R` is the raising half of the coupling.
pub fn coupling_term(spec: &HilbertSpec, site: usize, coupling: Coupling, g: f64, phase: f64) -> Result<Operator> {
    let raise = match coupling {
        Coupling::Carrier => site_operator(spec, site, SiteOp::SpinRaise)?,
        Coupling::Shelve => site_operator(spec, site, SiteOp::Transition { to: Level::E0, from: Level::Down })?,
        Coupling::Red => {
            let a = site_operator(spec, site, SiteOp::Annihilate)?;
            &a * &site_operator(spec, site, SiteOp::SpinRaise)?
        }
        Coupling::Blue => {
            let ad = site_operator(spec, site, SiteOp::Create)?;
            &ad * &site_operator(spec, site, SiteOp::SpinRaise)?
        }
    };
    let r = raise.scale(C64::from_polar(g, phase));
    Ok(&r + &r.adjoint())
}

fn check_geometry(spec: &HilbertSpec, geometry: &ChainGeometry) -> Result<()> {
    if geometry.ion_count() != spec.ion_count {
        return Err(Error::Dimension { expected: spec.ion_count, got: geometry.ion_count() });
    }
    Ok(())
}

/// Hopping Hamiltonian in the rotating frame.
pub fn hopping_hamiltonian(spec: &HilbertSpec, geometry: &ChainGeometry) -> Result<Operator> {
    spec.validate()?;
    check_geometry(spec, geometry)?;
    let n = spec.ion_count;
    let lowering: Vec<Operator> = (0..n).map(|i| site_operator(spec, i, SiteOp::Annihilate)).collect::<Result<_>>()?;
    let raising: Vec<Operator> = lowering.iter().map(Operator::adjoint).collect();

    let mut h = Operator::zeros(spec.dim());
    for i in 0..n {
        let omega = geometry.site_shift[i];
        if omega != 0.0 {
            h = &h + &(&raising[i] * &lowering[i]).scale_re(omega);
        }
        for j in i + 1..n {
            let k = geometry.kappa[i][j];
            if k != 0.0 {
                let hop = &(&lowering[i] * &raising[j]) + &(&raising[i] * &lowering[j]);
                h = &h + &hop.scale_re(0.5 * k);
            }
        }
    }
    Ok(h)
}

/// Drive part of a blockade Hamiltonian: detuning projector plus coupling.
pub fn drive_hamiltonian(spec: &HilbertSpec, drive: &DriveSpec) -> Result<Operator> {
    if !(drive.g >= 0.0) || !drive.g.is_finite() {
        return Err(Error::Invalid(format!("drive g must be non-negative, got {}", drive.g)));
    }
    let (coupling, detuned_level) = match drive.sideband {
        Sideband::Rsb => (Coupling::Red, Level::Up),
        Sideband::Bsb => (Coupling::Blue, Level::Down),
    };
    let mut h = coupling_term(spec, drive.site, coupling, drive.g, drive.phase)?;
    if drive.detuning != 0.0 {
        let p = site_operator(spec, drive.site, SiteOp::ProjectInternal(detuned_level))?;
        h = &h + &p.scale_re(drive.detuning);
    }
    Ok(h)
}

/// Hopping Hamiltonian plus resonant (or detuned) sideband drives.
pub fn blockade_hamiltonian(spec: &HilbertSpec, geometry: &ChainGeometry, drives: &[DriveSpec]) -> Result<Operator> {
    let mut seen = vec![false; spec.ion_count];
    for d in drives {
        if d.site >= spec.ion_count {
            return Err(Error::OutOfRange { what: "drive site", index: d.site, limit: spec.ion_count });
        }
        if std::mem::replace(&mut seen[d.site], true) {
            return Err(Error::Invalid(format!("duplicate drive on site {}", d.site)));
        }
    }
    let mut h = hopping_hamiltonian(spec, geometry)?;
    for d in drives {
        h = &h + &drive_hamiltonian(spec, d)?;
    }
    Ok(h)
}

/// Conserved excitation counter: total phonons plus the spins in `level`.
///
/// `level` is ↑ for red-sideband drives and ↓ for blue-sideband drives.
pub fn excitation_operator(spec: &HilbertSpec, level: Level) -> Result<Operator> {
    let mut x = Operator::zeros(spec.dim());
    for i in 0..spec.ion_count {
        x = &x + &crate::hilbert::number_operator(spec, i)?;
        x = &x + &site_operator(spec, i, SiteOp::ProjectInternal(level))?;
    }
    Ok(x)
}

/// Branch of a dressed Jaynes–Cummings doublet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    Plus,
    Minus,
}

/// One rung of the resonant JC ladder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JcLevel {
    pub n: u64,
    pub branch: Branch,
    pub energy: f64,
}

/// Resonant JC eigenenergies `E± = nω ± g√n`.
pub fn jc_energies(omega: f64, g: f64, n: i64) -> Result<(f64, f64)> {
    if n < 0 {
        return Err(Error::Invalid(format!("excitation number must be non-negative, got {n}")));
    }
    let nf = n as f64;
    let split = g * nf.sqrt();
    Ok((nf * omega + split, nf * omega - split))
}

/// Gaps between consecutive rungs, `ω ± g(√(n+1) − √n)`.
pub fn jc_gap(omega: f64, g: f64, n: i64) -> Result<(f64, f64)> {
    if n < 0 {
        return Err(Error::Invalid(format!("excitation number must be non-negative, got {n}")));
    }
    let nf = n as f64;
    // (√(n+1) − √n) written as 1/(√(n+1) + √n) to avoid cancellation at large n
    let d = g / ((nf + 1.0).sqrt() + nf.sqrt());
    Ok((omega + d, omega - d))
}

/// Both rungs at excitation `n`.
pub fn jc_ladder(omega: f64, g: f64, n: u64) -> [JcLevel; 2] {
    let (p, m) = jc_energies(omega, g, n as i64).expect("n is non-negative");
    [JcLevel { n, branch: Branch::Plus, energy: p }, JcLevel { n, branch: Branch::Minus, energy: m }]
}
