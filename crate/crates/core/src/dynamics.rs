//! Time evolution under piecewise-constant Hamiltonians.
//!
//! Closed-system segments are propagated exactly through the eigen-
//! decomposition of H. Open-system segments integrate the Lindblad equation
//!
//! ```text
//! dρ/dt = −i[H, ρ] + Σₖ γₖ (Lₖ ρ Lₖ† − ½{Lₖ†Lₖ, ρ})
//! ```
//!
//! with an adaptive Dormand–Prince 5(4) pair. The right-hand side is written
//! as `X + X† + Σ γ LρL†` with `X = −i H_eff ρ` and
//! `H_eff = H − (i/2) Σ γ L†L`, so every derivative is exactly Hermitian and
//! H, L are applied as sparse operators instead of through a superoperator.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::hilbert::{cutoff_population, BasisPopulations, DensityOperator, HilbertSpec, Operator, StateVector};
use crate::{Error, Result, C64};

/// Hermiticity tolerance for Hamiltonians handed to the propagators.
pub const HERMITIAN_TOL: f64 = 1e-10;
/// Cutoff population above which propagation logs a warning.
pub const CUTOFF_WARN: f64 = 1e-6;

/// Constant Hamiltonian applied for `duration` seconds.
#[derive(Debug, Clone)]
pub struct Segment {
    pub hamiltonian: Operator,
    pub duration: f64,
    /// Whether a laser is on during the segment. Noise channels passed to
    /// [`run_schedule`] act only on driven segments.
    pub driven: bool,
}

impl Segment {
    pub fn new(hamiltonian: Operator, duration: f64) -> Self {
        Self { hamiltonian, duration, driven: true }
    }

    pub fn free(hamiltonian: Operator, duration: f64) -> Self {
        Self { hamiltonian, duration, driven: false }
    }

    fn validate(&self) -> Result<()> {
        if !(self.duration >= 0.0) || !self.duration.is_finite() {
            return Err(Error::Invalid(format!("segment duration must be >= 0, got {}", self.duration)));
        }
        Ok(())
    }
}

/// Lindblad collapse operator with its rate.
#[derive(Debug, Clone)]
pub struct NoiseChannel {
    pub collapse_operator: Operator,
    /// 1/s
    pub rate: f64,
}

/// Eigendecomposition of a Hermitian H, reusable for any evolution time.
#[derive(Debug, Clone)]
pub struct HermitianEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<C64>,
}

impl HermitianEigen {
    pub fn new(h: &Operator) -> Result<Self> {
        let err = h.hermiticity_error();
        if err > HERMITIAN_TOL {
            return Err(Error::NotHermitian(err));
        }
        // symmetrize so the solver sees an exactly Hermitian input
        let m = (h.matrix() + h.matrix().adjoint()) * C64::new(0.5, 0.0);
        let eig = m.symmetric_eigen();
        Ok(Self { values: eig.eigenvalues, vectors: eig.eigenvectors })
    }

    fn phases(&self, t: f64) -> DVector<C64> {
        self.values.map(|e| C64::from_polar(1.0, -e * t))
    }

    /// exp(−iHt)
    pub fn propagator(&self, t: f64) -> Operator {
        let mut scaled = self.vectors.clone();
        for (mut col, ph) in scaled.column_iter_mut().zip(self.phases(t).iter()) {
            col *= *ph;
        }
        Operator::from_matrix(scaled * self.vectors.adjoint())
    }

    pub fn evolve(&self, t: f64, psi: &StateVector) -> StateVector {
        let mut coeffs = self.vectors.adjoint() * psi.vector();
        coeffs.component_mul_assign(&self.phases(t));
        StateVector::from_vector_unchecked(&self.vectors * coeffs)
    }

    pub fn evolve_density(&self, t: f64, rho: &DensityOperator) -> DensityOperator {
        conjugate(&self.propagator(t), rho)
    }
}

/// U ρ U†
pub fn conjugate(u: &Operator, rho: &DensityOperator) -> DensityOperator {
    DensityOperator::from_matrix_unchecked(u.matrix() * rho.matrix() * u.matrix().adjoint())
}

/// ψ(t) = exp(−iHt) ψ(0).
pub fn propagate_unitary(segment: &Segment, state: &StateVector) -> Result<StateVector> {
    segment.validate()?;
    check_dim(segment.hamiltonian.dim(), state.dim())?;
    if segment.duration == 0.0 {
        return Ok(state.clone());
    }
    Ok(HermitianEigen::new(&segment.hamiltonian)?.evolve(segment.duration, state))
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::Dimension { expected, got });
    }
    Ok(())
}

/// Step control for the Lindblad integrator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LindbladOptions {
    pub rtol: f64,
    pub atol: f64,
    /// Smallest step relative to the segment duration before giving up.
    pub min_step_fraction: f64,
    pub max_steps: usize,
}

impl Default for LindbladOptions {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-10, min_step_fraction: 1e-14, max_steps: 5_000_000 }
    }
}

/// Row-compressed complex matrix used on the integrator's hot path.
#[derive(Debug, Clone)]
struct Sparse {
    dim: usize,
    /// Start of each row in `cols`/`vals`, plus a final end marker.
    row_start: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl Sparse {
    fn from_dense(m: &DMatrix<C64>) -> Self {
        let n = m.nrows();
        let mut row_start = Vec::with_capacity(n + 1);
        let (mut cols, mut vals) = (Vec::new(), Vec::new());
        for i in 0..n {
            row_start.push(cols.len());
            for j in 0..m.ncols() {
                let v = m[(i, j)];
                if v.norm_sqr() > 0.0 {
                    cols.push(j);
                    vals.push(v);
                }
            }
        }
        row_start.push(cols.len());
        Self { dim: n, row_start, cols, vals }
    }

    fn entries(&self) -> impl Iterator<Item = (usize, usize, C64)> + '_ {
        (0..self.dim)
            .flat_map(move |i| (self.row_start[i]..self.row_start[i + 1]).map(move |e| (i, self.cols[e], self.vals[e])))
    }

    /// out = self · rho
    fn mul_into(&self, rho: &DMatrix<C64>, out: &mut DMatrix<C64>) {
        let n = self.dim;
        for (src, dst) in rho.as_slice().chunks_exact(n).zip(out.as_mut_slice().chunks_exact_mut(n)) {
            for (i, d) in dst.iter_mut().enumerate() {
                let (a, b) = (self.row_start[i], self.row_start[i + 1]);
                let mut acc = C64::new(0.0, 0.0);
                for (&k, &v) in self.cols[a..b].iter().zip(&self.vals[a..b]) {
                    acc += v * src[k];
                }
                *d = acc;
            }
        }
    }

    fn is_diagonal(&self) -> bool {
        self.entries().all(|(i, j, _)| i == j)
    }

    fn diagonal(&self) -> Vec<C64> {
        let mut d = vec![C64::new(0.0, 0.0); self.dim];
        for (i, j, v) in self.entries() {
            if i == j {
                d[i] = v;
            }
        }
        d
    }
}

/// Lindblad generator with precomputed pieces.
struct Generator {
    /// −i H_eff
    drift: Sparse,
    /// Σ γ l_i l_j* for diagonal collapse operators.
    diagonal_jumps: Option<DMatrix<C64>>,
    /// (√γ L) for the remaining collapse operators.
    general_jumps: Vec<Sparse>,
    scale: f64,
}

impl Generator {
    fn new(h: &Operator, channels: &[NoiseChannel]) -> Result<Self> {
        let dim = h.dim();
        let err = h.hermiticity_error();
        if err > HERMITIAN_TOL {
            return Err(Error::NotHermitian(err));
        }
        let mut heff = h.matrix().clone();
        let mut diag_acc: Option<DMatrix<C64>> = None;
        let mut general = Vec::new();
        let mut scale = h.matrix().row_iter().map(|r| r.iter().map(|z| z.norm()).sum::<f64>()).fold(0.0, f64::max);
        for ch in channels {
            if !(ch.rate >= 0.0) || !ch.rate.is_finite() {
                return Err(Error::Invalid(format!("noise rate must be >= 0, got {}", ch.rate)));
            }
            check_dim(dim, ch.collapse_operator.dim())?;
            if ch.rate == 0.0 {
                continue;
            }
            let l = ch.collapse_operator.matrix();
            scale += ch.rate * ch.collapse_operator.max_abs().powi(2);
            let sp = Sparse::from_dense(l);
            if sp.is_diagonal() {
                let d = sp.diagonal();
                for i in 0..dim {
                    heff[(i, i)] -= C64::new(0.0, 0.5 * ch.rate * d[i].norm_sqr());
                }
                let acc = diag_acc.get_or_insert_with(|| DMatrix::zeros(dim, dim));
                for j in 0..dim {
                    for i in 0..dim {
                        acc[(i, j)] += d[i] * d[j].conj() * ch.rate;
                    }
                }
            } else {
                heff -= l.adjoint() * l * C64::new(0.0, 0.5 * ch.rate);
                general.push(Sparse::from_dense(&(l * C64::new(ch.rate.sqrt(), 0.0))));
            }
        }
        let drift = Sparse::from_dense(&(heff * C64::new(0.0, -1.0)));
        Ok(Self { drift, diagonal_jumps: diag_acc, general_jumps: general, scale })
    }

    fn rhs(&self, rho: &DMatrix<C64>, out: &mut DMatrix<C64>, work: &mut DMatrix<C64>) {
        self.drift.mul_into(rho, work);
        let n = rho.nrows();
        let (o, w) = (out.as_mut_slice(), work.as_slice());
        for j in 0..n {
            for i in 0..n {
                o[j * n + i] = w[j * n + i] + w[i * n + j].conj();
            }
        }
        if let Some(d) = &self.diagonal_jumps {
            // diagonal L: L ρ L† is an elementwise product
            let (o, r, c) = (out.as_mut_slice(), rho.as_slice(), d.as_slice());
            for k in 0..o.len() {
                o[k] += c[k] * r[k];
            }
        }
        for l in &self.general_jumps {
            // L ρ L† = L (L ρ†)† = L (L ρ)†  since ρ is Hermitian
            l.mul_into(rho, work);
            let lr_dag = work.adjoint();
            let mut tmp = DMatrix::zeros(rho.nrows(), rho.ncols());
            l.mul_into(&lr_dag, &mut tmp);
            *out += tmp;
        }
    }
}

// Dormand–Prince 5(4) tableau.
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const B1: f64 = 35.0 / 384.0;
const B3: f64 = 500.0 / 1113.0;
const B4: f64 = 125.0 / 192.0;
const B5: f64 = -2187.0 / 6784.0;
const B6: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

fn combo(base: &DMatrix<C64>, h: f64, terms: &[(f64, &DMatrix<C64>)], out: &mut DMatrix<C64>) {
    out.copy_from(base);
    let o = out.as_mut_slice();
    for &(c, k) in terms {
        if c == 0.0 {
            continue;
        }
        let w = h * c;
        for (x, y) in o.iter_mut().zip(k.as_slice()) {
            *x += y * w;
        }
    }
}

struct Integrator<'a> {
    generator: &'a Generator,
    opts: LindbladOptions,
    h: Option<f64>,
    steps: usize,
}

impl<'a> Integrator<'a> {
    /// Advance `rho` by `span` seconds.
    fn advance(&mut self, rho: &mut DMatrix<C64>, t0: f64, span: f64) -> Result<()> {
        if span <= 0.0 {
            return Ok(());
        }
        let n = rho.nrows();
        let z = || DMatrix::<C64>::zeros(n, n);
        let (mut k1, mut k2, mut k3, mut k4, mut k5, mut k6, mut k7) = (z(), z(), z(), z(), z(), z(), z());
        let (mut stage, mut work, mut y5) = (z(), z(), z());

        let mut h = self.h.unwrap_or_else(|| 0.05 / self.generator.scale.max(1e-300)).min(span);
        let h_min = span * self.opts.min_step_fraction;
        let mut t = 0.0;
        self.generator.rhs(rho, &mut k1, &mut work);
        while t < span {
            let last = h >= span - t;
            if last {
                h = span - t;
            }
            combo(rho, h, &[(A21, &k1)], &mut stage);
            self.generator.rhs(&stage, &mut k2, &mut work);
            combo(rho, h, &[(A31, &k1), (A32, &k2)], &mut stage);
            self.generator.rhs(&stage, &mut k3, &mut work);
            combo(rho, h, &[(A41, &k1), (A42, &k2), (A43, &k3)], &mut stage);
            self.generator.rhs(&stage, &mut k4, &mut work);
            combo(rho, h, &[(A51, &k1), (A52, &k2), (A53, &k3), (A54, &k4)], &mut stage);
            self.generator.rhs(&stage, &mut k5, &mut work);
            combo(rho, h, &[(A61, &k1), (A62, &k2), (A63, &k3), (A64, &k4), (A65, &k5)], &mut stage);
            self.generator.rhs(&stage, &mut k6, &mut work);
            combo(rho, h, &[(B1, &k1), (B3, &k3), (B4, &k4), (B5, &k5), (B6, &k6)], &mut y5);
            self.generator.rhs(&y5, &mut k7, &mut work);

            let mut acc = 0.0;
            for idx in 0..n * n {
                let e = (k1.as_slice()[idx] * E1
                    + k3.as_slice()[idx] * E3
                    + k4.as_slice()[idx] * E4
                    + k5.as_slice()[idx] * E5
                    + k6.as_slice()[idx] * E6
                    + k7.as_slice()[idx] * E7)
                    * h;
                let sc = self.opts.atol + self.opts.rtol * rho.as_slice()[idx].norm().max(y5.as_slice()[idx].norm());
                acc += (e.norm() / sc).powi(2);
            }
            let err = (acc / (n * n) as f64).sqrt();
            self.steps += 1;
            if self.steps > self.opts.max_steps {
                return Err(Error::NoConvergence { what: "Lindblad integration", iterations: self.opts.max_steps });
            }
            let factor = if err == 0.0 { 5.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 5.0) };
            if err <= 1.0 {
                t = if last { span } else { t + h };
                std::mem::swap(rho, &mut y5);
                std::mem::swap(&mut k1, &mut k7);
                if !last {
                    self.h = Some(h * factor);
                }
                h *= factor;
            } else {
                h *= factor.min(1.0);
                if h < h_min {
                    return Err(Error::StepUnderflow { t: t0 + t, h });
                }
            }
        }
        Ok(())
    }
}

/// Integrate the Lindblad equation over one segment.
pub fn propagate_lindblad(
    segment: &Segment,
    channels: &[NoiseChannel],
    rho: &DensityOperator,
) -> Result<DensityOperator> {
    propagate_lindblad_with(segment, channels, rho, &LindbladOptions::default())
}

pub fn propagate_lindblad_with(
    segment: &Segment,
    channels: &[NoiseChannel],
    rho: &DensityOperator,
    opts: &LindbladOptions,
) -> Result<DensityOperator> {
    let mut out = lindblad_samples(segment, channels, rho, &[segment.duration], opts)?;
    Ok(out.pop().expect("one sample requested"))
}

/// States at the requested times (ascending, within `[0, duration]`).
pub fn lindblad_samples(
    segment: &Segment,
    channels: &[NoiseChannel],
    rho: &DensityOperator,
    times: &[f64],
    opts: &LindbladOptions,
) -> Result<Vec<DensityOperator>> {
    segment.validate()?;
    check_dim(segment.hamiltonian.dim(), rho.dim())?;
    let generator = Generator::new(&segment.hamiltonian, channels)?;
    integrate(&generator, segment.duration, rho.matrix().clone(), times, opts)
        .map(|v| v.into_iter().map(DensityOperator::from_matrix_unchecked).collect())
}

fn integrate(
    generator: &Generator,
    duration: f64,
    mut state: DMatrix<C64>,
    times: &[f64],
    opts: &LindbladOptions,
) -> Result<Vec<DMatrix<C64>>> {
    let mut integ = Integrator { generator, opts: *opts, h: None, steps: 0 };
    let mut t = 0.0;
    let mut out = Vec::with_capacity(times.len());
    for &ts in times {
        if ts < t - 1e-15 || ts > duration * (1.0 + 1e-12) + 1e-18 {
            return Err(Error::Invalid(format!("sample time {ts} outside segment or not ascending")));
        }
        integ.advance(&mut state, t, ts - t)?;
        t = ts.max(t);
        out.push(state.clone());
    }
    log::trace!("lindblad: dim {} duration {:.3e} s, {} steps", state.nrows(), duration, integ.steps);
    Ok(out)
}

/// Pure or mixed simulation state.
#[derive(Debug, Clone, PartialEq)]
pub enum SimState {
    Pure(StateVector),
    Mixed(DensityOperator),
}

impl SimState {
    pub fn dim(&self) -> usize {
        match self {
            SimState::Pure(s) => s.dim(),
            SimState::Mixed(r) => r.dim(),
        }
    }

    pub fn to_density(&self) -> DensityOperator {
        match self {
            SimState::Pure(s) => s.to_density(),
            SimState::Mixed(r) => r.clone(),
        }
    }

    /// Apply a unitary.
    pub fn transform(&self, u: &Operator) -> SimState {
        match self {
            SimState::Pure(s) => SimState::Pure(u.apply(s)),
            SimState::Mixed(r) => SimState::Mixed(conjugate(u, r)),
        }
    }

    /// Closed-system evolution for time `t` under a precomputed H.
    pub fn evolve_eigen(&self, eig: &HermitianEigen, t: f64) -> SimState {
        match self {
            SimState::Pure(s) => SimState::Pure(eig.evolve(t, s)),
            SimState::Mixed(r) => SimState::Mixed(eig.evolve_density(t, r)),
        }
    }

    pub fn trace(&self) -> f64 {
        match self {
            SimState::Pure(s) => s.norm().powi(2),
            SimState::Mixed(r) => r.trace(),
        }
    }
}

impl BasisPopulations for SimState {
    fn dim(&self) -> usize {
        SimState::dim(self)
    }
    fn basis_populations(&self) -> Vec<f64> {
        match self {
            SimState::Pure(s) => s.basis_populations(),
            SimState::Mixed(r) => r.basis_populations(),
        }
    }
}

impl From<StateVector> for SimState {
    fn from(s: StateVector) -> Self {
        SimState::Pure(s)
    }
}

impl From<DensityOperator> for SimState {
    fn from(r: DensityOperator) -> Self {
        SimState::Mixed(r)
    }
}

/// Output of [`run_schedule`].
#[derive(Debug, Clone)]
pub struct ScheduleOutput {
    /// State at t = 0 and after every segment, with the absolute time.
    pub boundaries: Vec<(f64, SimState)>,
    /// States at the requested interior sample times.
    pub samples: Vec<(f64, SimState)>,
    /// Largest single-ion population at the Fock cutoff seen at any output.
    pub cutoff_population: f64,
}

impl ScheduleOutput {
    pub fn final_state(&self) -> &SimState {
        &self.boundaries.last().expect("at least the initial state").1
    }
}

/// Propagate through segments in order.
///
/// Noise channels act only on segments flagged `driven`, and only when they
/// have a nonzero rate; a pure initial state is promoted to a density
/// operator the first time that happens. `sample_times` are absolute times
/// measured from the start of the schedule, ascending.
pub fn run_schedule(
    spec: &HilbertSpec,
    segments: &[Segment],
    channels: &[NoiseChannel],
    initial: &SimState,
    sample_times: &[f64],
    opts: &LindbladOptions,
) -> Result<ScheduleOutput> {
    if segments.is_empty() {
        return Err(Error::Invalid("schedule has no segments".into()));
    }
    check_dim(spec.dim(), initial.dim())?;
    if sample_times.windows(2).any(|w| w[1] < w[0]) {
        return Err(Error::Invalid("sample times must be ascending".into()));
    }
    let noisy = channels.iter().any(|c| c.rate > 0.0);
    let mut state = initial.clone();
    let mut t0 = 0.0;
    let mut boundaries = vec![(0.0, state.clone())];
    let mut samples = Vec::new();
    let mut next_sample = 0;
    while next_sample < sample_times.len() && sample_times[next_sample] <= 0.0 {
        samples.push((sample_times[next_sample], state.clone()));
        next_sample += 1;
    }

    for seg in segments {
        seg.validate()?;
        check_dim(spec.dim(), seg.hamiltonian.dim())?;
        let t1 = t0 + seg.duration;
        let mut local_times = Vec::new();
        while next_sample < sample_times.len() && sample_times[next_sample] <= t1 {
            local_times.push(sample_times[next_sample] - t0);
            next_sample += 1;
        }
        if noisy && seg.driven {
            let rho = state.to_density();
            let mut times = local_times.clone();
            times.push(seg.duration);
            let mut out = lindblad_samples(seg, channels, &rho, &times, opts)?;
            state = SimState::Mixed(out.pop().expect("final sample"));
            for (tl, r) in local_times.iter().zip(out) {
                samples.push((t0 + tl, SimState::Mixed(r)));
            }
        } else if seg.duration > 0.0 {
            let eig = HermitianEigen::new(&seg.hamiltonian)?;
            for &tl in &local_times {
                samples.push((t0 + tl, state.evolve_eigen(&eig, tl)));
            }
            state = state.evolve_eigen(&eig, seg.duration);
        } else {
            for &tl in &local_times {
                samples.push((t0 + tl, state.clone()));
            }
        }
        t0 = t1;
        boundaries.push((t0, state.clone()));
    }

    let cutoff_population =
        boundaries.iter().chain(samples.iter()).map(|(_, s)| cutoff_population(spec, s)).fold(0.0, f64::max);
    report_cutoff(spec, cutoff_population);
    Ok(ScheduleOutput { boundaries, samples, cutoff_population })
}

static WARNED_CUTOFF: std::sync::Mutex<f64> = std::sync::Mutex::new(0.0);

/// Warns above [`CUTOFF_WARN`]; repeats only once the level has doubled.
fn report_cutoff(spec: &HilbertSpec, population: f64) {
    if population <= CUTOFF_WARN {
        return;
    }
    let mut last = WARNED_CUTOFF.lock().unwrap_or_else(|e| e.into_inner());
    if population >= 2.0 * *last {
        *last = population;
        log::warn!("population at Fock cutoff n_max = {} reached {:.3e}", spec.n_max, population);
    } else {
        log::debug!("population at Fock cutoff n_max = {} reached {:.3e}", spec.n_max, population);
    }
}

/// Heisenberg-picture images of `observables` under the schedule that
/// [`run_schedule`] would apply: `tr(A' ρ₀) = tr(A ρ(T))` for every `ρ₀`.
/// Reading many initial states through one channel this way costs one
/// backward pass per observable instead of one forward pass per state.
pub fn adjoint_schedule(
    spec: &HilbertSpec,
    segments: &[Segment],
    channels: &[NoiseChannel],
    observables: &[Operator],
    opts: &LindbladOptions,
) -> Result<Vec<Operator>> {
    for o in observables {
        check_dim(spec.dim(), o.dim())?;
        let err = o.hermiticity_error();
        if err > HERMITIAN_TOL {
            return Err(Error::NotHermitian(err));
        }
    }
    let noisy = channels.iter().any(|c| c.rate > 0.0);
    // dA/dt = i[H, A] + Σ γ (L†AL − ½{L†L, A}) is the forward equation
    // with H → −H and L → L†.
    let adjoint_channels: Vec<NoiseChannel> = channels
        .iter()
        .map(|c| NoiseChannel { collapse_operator: c.collapse_operator.adjoint(), rate: c.rate })
        .collect();
    let mut out: Vec<DMatrix<C64>> = observables.iter().map(|o| o.matrix().clone()).collect();
    for seg in segments.iter().rev() {
        seg.validate()?;
        check_dim(spec.dim(), seg.hamiltonian.dim())?;
        if seg.duration == 0.0 {
            continue;
        }
        if noisy && seg.driven {
            let generator = Generator::new(&seg.hamiltonian.scale_re(-1.0), &adjoint_channels)?;
            for a in out.iter_mut() {
                let start = std::mem::replace(a, DMatrix::zeros(0, 0));
                *a = integrate(&generator, seg.duration, start, &[seg.duration], opts)?.pop().expect("one sample");
            }
        } else {
            let u = HermitianEigen::new(&seg.hamiltonian)?.propagator(seg.duration);
            let (m, m_dag) = (u.matrix(), u.matrix().adjoint());
            for a in out.iter_mut() {
                *a = &m_dag * &*a * m;
            }
        }
    }
    Ok(out.into_iter().map(Operator::from_matrix).collect())
}
