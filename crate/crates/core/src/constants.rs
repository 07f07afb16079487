//! Physical constants (CODATA 2018) and the reference ⁴⁰Ca⁺ trap.

use std::f64::consts::PI;

/// Elementary charge, C (exact).
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// Vacuum permittivity, F/m.
pub const VACUUM_PERMITTIVITY: f64 = 8.854_187_812_8e-12;
/// Unified atomic mass unit, kg.
pub const ATOMIC_MASS_UNIT: f64 = 1.660_539_066_60e-27;
/// Electron mass, kg.
pub const ELECTRON_MASS: f64 = 9.109_383_701_5e-31;

/// Atomic mass of neutral ⁴⁰Ca in u.
pub const CA40_ATOMIC_MASS_U: f64 = 39.962_590_863;

/// Mass of a singly charged ⁴⁰Ca⁺ ion, kg.
pub fn ca40_ion_mass() -> f64 {
    CA40_ATOMIC_MASS_U * ATOMIC_MASS_UNIT - ELECTRON_MASS
}

/// Coulomb constant times e², i.e. e²/(4πε₀), in J·m.
pub fn coulomb_energy_scale(charge: f64) -> f64 {
    charge * charge / (4.0 * PI * VACUUM_PERMITTIVITY)
}

/// Secular frequencies of the reference two-ion trap, Hz: (x, y, z).
pub const REFERENCE_SECULAR_HZ: (f64, f64, f64) = (3.07e6, 2.87e6, 0.11e6);

/// Ordinary frequency (Hz) to angular frequency (rad/s).
#[inline]
pub fn hz_to_angular(nu: f64) -> f64 {
    2.0 * PI * nu
}
