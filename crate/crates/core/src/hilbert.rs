//! Truncated spin ⊗ Fock state space of an ion chain.
//!
//! Basis ordering: ion index major (ion 0 is the most significant digit),
//! then internal level, then Fock number. Within one ion the local index is
//! `level · (n_max + 1) + n`, so for a single ion `|↓,0⟩` is index 0.

use std::fmt;
use std::ops::{Add, Mul, Sub};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::{Error, Result, C64};

const ONE: C64 = C64::new(1.0, 0.0);

/// Internal level of one ion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    /// S₁/₂, m_j = −1/2.
    Down,
    /// D₅/₂, m_j = −1/2.
    Up,
    /// D₅/₂, m_j = −5/2; shelving level used only during readout.
    E0,
}

impl Level {
    pub fn index(self) -> usize {
        match self {
            Level::Down => 0,
            Level::Up => 1,
            Level::E0 => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Level> {
        match i {
            0 => Some(Level::Down),
            1 => Some(Level::Up),
            2 => Some(Level::E0),
            _ => None,
        }
    }
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Down => "down",
            Level::Up => "up",
            Level::E0 => "e0",
        })
    }
}

/// Shape of the truncated tensor-product space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HilbertSpec {
    pub ion_count: usize,
    /// Inclusive Fock cutoff per ion.
    pub n_max: usize,
    /// 2 (↓, ↑) or 3 (↓, ↑, e₀).
    pub internal_levels: usize,
}

impl Default for HilbertSpec {
    fn default() -> Self {
        Self { ion_count: 2, n_max: 4, internal_levels: 2 }
    }
}

impl HilbertSpec {
    pub fn new(ion_count: usize, n_max: usize, internal_levels: usize) -> Result<Self> {
        let spec = Self { ion_count, n_max, internal_levels };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ion_count == 0 {
            return Err(Error::Invalid("ion_count must be at least 1".into()));
        }
        if self.n_max == 0 {
            return Err(Error::Invalid("n_max must be at least 1".into()));
        }
        if self.internal_levels != 2 && self.internal_levels != 3 {
            return Err(Error::Invalid(format!("internal_levels must be 2 or 3, got {}", self.internal_levels)));
        }
        Ok(())
    }

    /// Same space with a different number of internal levels.
    pub fn with_levels(&self, internal_levels: usize) -> Self {
        Self { internal_levels, ..*self }
    }

    pub fn fock_dim(&self) -> usize {
        self.n_max + 1
    }

    pub fn local_dim(&self) -> usize {
        self.internal_levels * self.fock_dim()
    }

    pub fn dim(&self) -> usize {
        self.local_dim().pow(self.ion_count as u32)
    }

    fn check_site(&self, site: usize) -> Result<()> {
        if site >= self.ion_count {
            return Err(Error::OutOfRange { what: "site", index: site, limit: self.ion_count });
        }
        Ok(())
    }

    fn check_label(&self, level: Level, n: usize) -> Result<()> {
        if level.index() >= self.internal_levels {
            return Err(Error::OutOfRange {
                what: "internal level",
                index: level.index(),
                limit: self.internal_levels,
            });
        }
        if n > self.n_max {
            return Err(Error::OutOfRange { what: "Fock number", index: n, limit: self.n_max + 1 });
        }
        Ok(())
    }

    pub fn local_index(&self, level: Level, n: usize) -> usize {
        level.index() * self.fock_dim() + n
    }

    /// Basis index of a product label, one `(level, n)` per ion.
    pub fn index(&self, labels: &[(Level, usize)]) -> Result<usize> {
        if labels.len() != self.ion_count {
            return Err(Error::Dimension { expected: self.ion_count, got: labels.len() });
        }
        let mut idx = 0;
        for &(level, n) in labels {
            self.check_label(level, n)?;
            idx = idx * self.local_dim() + self.local_index(level, n);
        }
        Ok(idx)
    }

    /// Inverse of [`HilbertSpec::index`].
    pub fn labels(&self, index: usize) -> Result<Vec<(Level, usize)>> {
        if index >= self.dim() {
            return Err(Error::OutOfRange { what: "basis index", index, limit: self.dim() });
        }
        let mut out = vec![(Level::Down, 0); self.ion_count];
        let mut rest = index;
        for slot in out.iter_mut().rev() {
            let local = rest % self.local_dim();
            rest /= self.local_dim();
            *slot = (Level::from_index(local / self.fock_dim()).expect("level in range"), local % self.fock_dim());
        }
        Ok(out)
    }

    /// Local (level, n) of `site` for every basis index, in basis order.
    pub(crate) fn site_labels(&self, site: usize) -> Vec<(usize, usize)> {
        let stride = self.local_dim().pow((self.ion_count - 1 - site) as u32);
        (0..self.dim())
            .map(|i| {
                let local = (i / stride) % self.local_dim();
                (local / self.fock_dim(), local % self.fock_dim())
            })
            .collect()
    }

    /// Embed a single-ion matrix at `site`.
    fn embed(&self, site: usize, local: &DMatrix<C64>) -> Operator {
        let before = self.local_dim().pow(site as u32);
        let after = self.local_dim().pow((self.ion_count - 1 - site) as u32);
        let m = DMatrix::<C64>::identity(before, before)
            .kronecker(local)
            .kronecker(&DMatrix::<C64>::identity(after, after));
        Operator::from_matrix(m)
    }
}

/// Single-ion operator kinds for [`site_operator`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SiteOp {
    Annihilate,
    Create,
    /// σ⁻ = |↓⟩⟨↑|
    SpinLower,
    /// σ⁺ = |↑⟩⟨↓|
    SpinRaise,
    ProjectInternal(Level),
    ProjectFock(usize),
    /// |to⟩⟨from| on the internal levels, identity on the Fock space.
    Transition {
        to: Level,
        from: Level,
    },
}

/// Dense operator on a [`HilbertSpec`].
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    matrix: DMatrix<C64>,
}

impl Operator {
    pub fn from_matrix(matrix: DMatrix<C64>) -> Self {
        assert!(matrix.is_square(), "operator matrix must be square");
        Self { matrix }
    }

    pub fn zeros(dim: usize) -> Self {
        Self { matrix: DMatrix::zeros(dim, dim) }
    }

    pub fn identity(dim: usize) -> Self {
        Self { matrix: DMatrix::identity(dim, dim) }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.matrix
    }

    pub fn adjoint(&self) -> Self {
        Self { matrix: self.matrix.adjoint() }
    }

    pub fn scale(&self, s: C64) -> Self {
        Self { matrix: &self.matrix * s }
    }

    pub fn scale_re(&self, s: f64) -> Self {
        self.scale(C64::new(s, 0.0))
    }

    /// Largest element magnitude.
    pub fn max_abs(&self) -> f64 {
        self.matrix.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// `‖A − A†‖_max`.
    pub fn hermiticity_error(&self) -> f64 {
        let n = self.dim();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i..n {
                worst = worst.max((self.matrix[(i, j)] - self.matrix[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_error() <= tol
    }

    pub fn commutator(&self, other: &Operator) -> Operator {
        Operator::from_matrix(&self.matrix * &other.matrix - &other.matrix * &self.matrix)
    }

    pub fn apply(&self, psi: &StateVector) -> StateVector {
        StateVector::from_vector_unchecked(&self.matrix * &psi.data)
    }

    /// ⟨ψ|A|ψ⟩
    pub fn expectation(&self, psi: &StateVector) -> C64 {
        psi.data.dotc(&(&self.matrix * &psi.data))
    }

    /// Tr(Aρ)
    pub fn expectation_mixed(&self, rho: &DensityOperator) -> C64 {
        (&self.matrix * &rho.data).trace()
    }
}

impl Add<&Operator> for &Operator {
    type Output = Operator;
    fn add(self, rhs: &Operator) -> Operator {
        Operator::from_matrix(&self.matrix + &rhs.matrix)
    }
}

impl Sub<&Operator> for &Operator {
    type Output = Operator;
    fn sub(self, rhs: &Operator) -> Operator {
        Operator::from_matrix(&self.matrix - &rhs.matrix)
    }
}

impl Mul<&Operator> for &Operator {
    type Output = Operator;
    fn mul(self, rhs: &Operator) -> Operator {
        Operator::from_matrix(&self.matrix * &rhs.matrix)
    }
}

/// Single-ion operator at `site`, identity elsewhere.
///
/// The creation operator maps `|n_max⟩` to zero, so `a†` stays the adjoint of
/// `a` in the truncated space.
pub fn site_operator(spec: &HilbertSpec, site: usize, kind: SiteOp) -> Result<Operator> {
    spec.check_site(site)?;
    let f = spec.fock_dim();
    let d = spec.local_dim();
    let mut local = DMatrix::<C64>::zeros(d, d);
    let levels: Vec<Level> = (0..spec.internal_levels).filter_map(Level::from_index).collect();
    match kind {
        SiteOp::Annihilate | SiteOp::Create => {
            for &lv in &levels {
                for n in 1..f {
                    let v = C64::new((n as f64).sqrt(), 0.0);
                    let (lower, upper) = (spec.local_index(lv, n - 1), spec.local_index(lv, n));
                    if kind == SiteOp::Annihilate {
                        local[(lower, upper)] = v;
                    } else {
                        local[(upper, lower)] = v;
                    }
                }
            }
        }
        SiteOp::SpinLower => return site_operator(spec, site, SiteOp::Transition { to: Level::Down, from: Level::Up }),
        SiteOp::SpinRaise => return site_operator(spec, site, SiteOp::Transition { to: Level::Up, from: Level::Down }),
        SiteOp::Transition { to, from } => {
            spec.check_label(to, 0)?;
            spec.check_label(from, 0)?;
            for n in 0..f {
                local[(spec.local_index(to, n), spec.local_index(from, n))] = ONE;
            }
        }
        SiteOp::ProjectInternal(level) => {
            spec.check_label(level, 0)?;
            for n in 0..f {
                let i = spec.local_index(level, n);
                local[(i, i)] = ONE;
            }
        }
        SiteOp::ProjectFock(n) => {
            spec.check_label(Level::Down, n)?;
            for &lv in &levels {
                let i = spec.local_index(lv, n);
                local[(i, i)] = ONE;
            }
        }
    }
    Ok(spec.embed(site, &local))
}

/// Number operator a†a at `site`, built directly as a diagonal.
pub fn number_operator(spec: &HilbertSpec, site: usize) -> Result<Operator> {
    spec.check_site(site)?;
    let labels = spec.site_labels(site);
    let diag = DVector::from_iterator(spec.dim(), labels.iter().map(|&(_, n)| C64::new(n as f64, 0.0)));
    Ok(Operator::from_matrix(DMatrix::from_diagonal(&diag)))
}

/// Pure state.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector {
    data: DVector<C64>,
}

impl StateVector {
    /// Normalized state; rejects vectors whose norm deviates from 1 by more than 1e-9.
    pub fn new(data: DVector<C64>) -> Result<Self> {
        let norm = data.norm();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("state norm is {norm}, expected 1")));
        }
        Ok(Self { data })
    }

    /// Normalizes `data`.
    pub fn normalized(data: DVector<C64>) -> Result<Self> {
        let norm = data.norm();
        if !(norm > 0.0) {
            return Err(Error::Invalid("cannot normalize the zero vector".into()));
        }
        Ok(Self { data: data / C64::new(norm, 0.0) })
    }

    pub(crate) fn from_vector_unchecked(data: DVector<C64>) -> Self {
        Self { data }
    }

    pub fn basis(dim: usize, index: usize) -> Self {
        let mut data = DVector::zeros(dim);
        data[index] = ONE;
        Self { data }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn vector(&self) -> &DVector<C64> {
        &self.data
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }

    /// ⟨self|other⟩
    pub fn inner(&self, other: &StateVector) -> C64 {
        self.data.dotc(&other.data)
    }

    pub fn fidelity(&self, other: &StateVector) -> f64 {
        self.inner(other).norm_sqr()
    }

    pub fn to_density(&self) -> DensityOperator {
        DensityOperator { data: &self.data * self.data.adjoint() }
    }
}

/// Mixed state.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityOperator {
    data: DMatrix<C64>,
}

impl DensityOperator {
    /// Validated density operator: Hermitian, unit trace, positive semidefinite.
    pub fn new(data: DMatrix<C64>) -> Result<Self> {
        let rho = Self { data };
        let herm = rho.hermiticity_error();
        if herm > 1e-9 {
            return Err(Error::NotHermitian(herm));
        }
        let tr = rho.trace();
        if (tr - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("trace is {tr}, expected 1")));
        }
        let min_eig = rho.data.clone().symmetric_eigenvalues().min();
        if min_eig < -1e-10 {
            return Err(Error::Invalid(format!("negative eigenvalue {min_eig:.3e}")));
        }
        Ok(rho)
    }

    pub(crate) fn from_matrix_unchecked(data: DMatrix<C64>) -> Self {
        Self { data }
    }

    /// Incoherent mixture Σ wₖ |ψₖ⟩⟨ψₖ|.
    pub fn mixture(weights: &[f64], states: &[StateVector]) -> Result<Self> {
        let dim = states.first().map(|s| s.dim()).ok_or_else(|| Error::Invalid("empty mixture".into()))?;
        let mut data = DMatrix::zeros(dim, dim);
        for (w, s) in weights.iter().zip(states) {
            data += (&s.data * s.data.adjoint()) * C64::new(*w, 0.0);
        }
        Self::new(data)
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.data
    }

    pub fn trace(&self) -> f64 {
        self.data.trace().re
    }

    pub fn hermiticity_error(&self) -> f64 {
        Operator::from_matrix(self.data.clone()).hermiticity_error()
    }

    pub fn max_abs_diff(&self, other: &DensityOperator) -> f64 {
        (&self.data - &other.data).iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

/// States whose populations in the computational basis can be read off.
pub trait BasisPopulations {
    fn dim(&self) -> usize;
    /// Probability of each basis element.
    fn basis_populations(&self) -> Vec<f64>;
}

impl BasisPopulations for StateVector {
    fn dim(&self) -> usize {
        self.data.len()
    }
    fn basis_populations(&self) -> Vec<f64> {
        self.data.iter().map(|z| z.norm_sqr()).collect()
    }
}

impl BasisPopulations for DensityOperator {
    fn dim(&self) -> usize {
        self.data.nrows()
    }
    fn basis_populations(&self) -> Vec<f64> {
        (0..self.data.nrows()).map(|i| self.data[(i, i)].re.max(0.0)).collect()
    }
}

/// Unit-norm product basis state.
pub fn product_state(spec: &HilbertSpec, per_ion: &[(Level, usize)]) -> Result<StateVector> {
    let idx = spec.index(per_ion)?;
    Ok(StateVector::basis(spec.dim(), idx))
}

/// Populations of one ion, indexed `[level][n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationTable {
    pub table: Vec<Vec<f64>>,
}

impl PopulationTable {
    pub fn get(&self, level: Level, n: usize) -> f64 {
        self.table.get(level.index()).and_then(|r| r.get(n)).copied().unwrap_or(0.0)
    }

    pub fn level(&self, level: Level) -> f64 {
        self.table.get(level.index()).map(|r| r.iter().sum()).unwrap_or(0.0)
    }

    /// Marginal Fock distribution, summed over internal levels.
    pub fn fock(&self) -> Vec<f64> {
        let f = self.table[0].len();
        (0..f).map(|n| self.table.iter().map(|r| r[n]).sum()).collect()
    }

    pub fn total(&self) -> f64 {
        self.table.iter().flatten().sum()
    }
}

/// Diagonal of the reduced density operator of `site`.
pub fn partial_populations<S: BasisPopulations>(spec: &HilbertSpec, state: &S, site: usize) -> Result<PopulationTable> {
    spec.check_site(site)?;
    if state.dim() != spec.dim() {
        return Err(Error::Dimension { expected: spec.dim(), got: state.dim() });
    }
    let mut table = vec![vec![0.0; spec.fock_dim()]; spec.internal_levels];
    for (p, (lv, n)) in state.basis_populations().into_iter().zip(spec.site_labels(site)) {
        table[lv][n] += p;
    }
    Ok(PopulationTable { table })
}

/// Largest single-ion population at the Fock cutoff.
pub fn cutoff_population<S: BasisPopulations>(spec: &HilbertSpec, state: &S) -> f64 {
    let pops = state.basis_populations();
    (0..spec.ion_count)
        .map(|site| {
            spec.site_labels(site).iter().zip(&pops).filter(|((_, n), _)| *n == spec.n_max).map(|(_, p)| p).sum::<f64>()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    const ZERO: C64 = C64::new(0.0, 0.0);
    use rand_chacha::ChaCha8Rng;

    fn single(levels: usize) -> HilbertSpec {
        HilbertSpec::new(1, 4, levels).unwrap()
    }

    #[test]
    fn annihilate_on_two() {
        let s = single(2);
        let a = site_operator(&s, 0, SiteOp::Annihilate).unwrap();
        let psi = product_state(&s, &[(Level::Down, 2)]).unwrap();
        let out = a.apply(&psi);
        let expected = product_state(&s, &[(Level::Down, 1)]).unwrap();
        assert!((out.inner(&expected) - C64::new(2f64.sqrt(), 0.0)).norm() < 1e-15);
        assert!((out.norm() - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn spin_lower_kills_ground() {
        let s = single(2);
        let sm = site_operator(&s, 0, SiteOp::SpinLower).unwrap();
        let psi = product_state(&s, &[(Level::Down, 3)]).unwrap();
        assert_eq!(sm.apply(&psi).norm(), 0.0);
    }

    #[test]
    fn canonical_commutator_below_cutoff() {
        let s = single(3);
        let a = site_operator(&s, 0, SiteOp::Annihilate).unwrap();
        let c = a.commutator(&a.adjoint());
        for (i, &(_, n)) in s.site_labels(0).iter().enumerate() {
            for j in 0..s.dim() {
                let expect = if i == j && n < s.n_max { ONE } else { ZERO };
                if n < s.n_max {
                    assert!((c.matrix()[(i, j)] - expect).norm() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn create_is_adjoint_of_annihilate() {
        let s = HilbertSpec::new(2, 3, 2).unwrap();
        let a = site_operator(&s, 1, SiteOp::Annihilate).unwrap();
        let ad = site_operator(&s, 1, SiteOp::Create).unwrap();
        assert_eq!(a.adjoint(), ad);
        let top = product_state(&s, &[(Level::Up, 0), (Level::Up, 3)]).unwrap();
        assert_eq!(ad.apply(&top).norm(), 0.0);
    }

    #[test]
    fn number_operator_is_exact_diagonal() {
        let s = HilbertSpec::new(2, 4, 2).unwrap();
        let a = site_operator(&s, 0, SiteOp::Annihilate).unwrap();
        let n = &a.adjoint() * &a;
        let direct = number_operator(&s, 0).unwrap();
        for i in 0..s.dim() {
            for j in 0..s.dim() {
                let v = n.matrix()[(i, j)];
                if i != j {
                    assert_eq!(v, ZERO);
                } else {
                    assert!((v.re - direct.matrix()[(i, i)].re).abs() < 1e-14);
                    assert!((v.re - v.re.round()).abs() < 1e-14);
                    assert_eq!(v.im, 0.0);
                }
            }
        }
    }

    #[test]
    fn spin_anticommutator_is_identity() {
        let s = single(2);
        let sp = site_operator(&s, 0, SiteOp::SpinRaise).unwrap();
        let sm = site_operator(&s, 0, SiteOp::SpinLower).unwrap();
        let sum = &(&sp * &sm) + &(&sm * &sp);
        assert_eq!(sum, Operator::identity(s.dim()));
    }

    #[test]
    fn different_sites_commute() {
        let s = HilbertSpec::new(2, 2, 3).unwrap();
        let kinds = [SiteOp::Annihilate, SiteOp::Create, SiteOp::SpinRaise, SiteOp::ProjectFock(1)];
        for &k1 in &kinds {
            for &k2 in &kinds {
                let a = site_operator(&s, 0, k1).unwrap();
                let b = site_operator(&s, 1, k2).unwrap();
                assert!(a.commutator(&b).max_abs() < 1e-12);
            }
        }
    }

    #[test]
    fn index_round_trip() {
        for levels in [2, 3] {
            let s = HilbertSpec::new(3, 2, levels).unwrap();
            for i in 0..s.dim() {
                let labels = s.labels(i).unwrap();
                assert_eq!(s.index(&labels).unwrap(), i);
            }
        }
    }

    #[test]
    fn product_state_examples() {
        let s = HilbertSpec::new(2, 4, 2).unwrap();
        let psi = product_state(&s, &[(Level::Up, 2), (Level::Up, 0)]).unwrap();
        assert!((psi.norm() - 1.0).abs() < 1e-15);
        let pop = partial_populations(&s, &psi, 0).unwrap();
        assert_eq!(pop.get(Level::Up, 2), 1.0);
        let other = product_state(&s, &[(Level::Up, 1), (Level::Up, 1)]).unwrap();
        assert_eq!(psi.inner(&other), ZERO);
        assert_eq!(s.index(&[(Level::Down, 0), (Level::Down, 0)]).unwrap(), 0);
        assert_eq!(single(2).index(&[(Level::Down, 0)]).unwrap(), 0);
    }

    #[test]
    fn out_of_range_labels_rejected() {
        let s = HilbertSpec::new(2, 2, 2).unwrap();
        assert!(product_state(&s, &[(Level::Up, 3), (Level::Up, 0)]).is_err());
        assert!(product_state(&s, &[(Level::E0, 0), (Level::Up, 0)]).is_err());
        assert!(site_operator(&s, 2, SiteOp::Annihilate).is_err());
        assert!(site_operator(&s, 0, SiteOp::ProjectFock(3)).is_err());
        assert!(HilbertSpec::new(2, 2, 4).is_err());
    }

    #[test]
    fn born_rule_on_superposition() {
        let s = HilbertSpec::new(2, 4, 2).unwrap();
        let a = product_state(&s, &[(Level::Up, 1), (Level::Up, 1)]).unwrap();
        let b = product_state(&s, &[(Level::Up, 2), (Level::Up, 0)]).unwrap();
        let psi = StateVector::normalized(a.vector() + b.vector()).unwrap();
        let pop = partial_populations(&s, &psi, 1).unwrap();
        let fock = pop.fock();
        assert!((fock[1] - 0.5).abs() < 1e-15);
        assert!((fock[0] - 0.5).abs() < 1e-15);
    }

    fn random_state(spec: &HilbertSpec, seed: u64) -> StateVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = DVector::from_fn(spec.dim(), |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        StateVector::normalized(v).unwrap()
    }

    proptest! {
        #[test]
        fn partial_populations_sum_to_one(seed in any::<u64>(), site in 0usize..2, levels in 2usize..=3) {
            let s = HilbertSpec::new(2, 3, levels).unwrap();
            let psi = random_state(&s, seed);
            let pop = partial_populations(&s, &psi, site).unwrap();
            prop_assert!((pop.total() - 1.0).abs() < 1e-9);
            prop_assert!(pop.table.iter().flatten().all(|&p| p >= 0.0));
            let rho = psi.to_density();
            let pop_rho = partial_populations(&s, &rho, site).unwrap();
            for (a, b) in pop.table.iter().flatten().zip(pop_rho.table.iter().flatten()) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
