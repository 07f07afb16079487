//! Measurement emulation: phonon-number-resolving readout, spin-down
//! probabilities and Fock populations from blue-sideband Rabi traces.

use std::f64::consts::PI;
use std::fmt;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::hilbert::{partial_populations, BasisPopulations, HilbertSpec, Level};
use crate::pulses::{bsb, carrier, composite_cp, shelve, PulseEvent, PulseSequence};
use crate::{Error, Result};

/// Outcome of the phonon-number-resolving protocol on one ion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhononClass {
    N0,
    N1,
    N2,
}

impl PhononClass {
    pub const ALL: [PhononClass; 3] = [PhononClass::N0, PhononClass::N1, PhononClass::N2];

    pub fn index(self) -> usize {
        match self {
            PhononClass::N0 => 0,
            PhononClass::N1 => 1,
            PhononClass::N2 => 2,
        }
    }

    /// Internal level this class is routed to by the mapping sequence.
    pub fn routed_level(self) -> Level {
        match self {
            PhononClass::N0 => Level::E0,
            PhononClass::N1 => Level::Up,
            PhononClass::N2 => Level::Down,
        }
    }

    pub(crate) fn from_level(level: usize) -> PhononClass {
        match level {
            0 => PhononClass::N2,
            1 => PhononClass::N1,
            _ => PhononClass::N0,
        }
    }
}

impl fmt::Display for PhononClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "n{}", self.index())
    }
}

/// Mapping pulses for one ion: R_CP, carrier π, shelve π, BSB π.
///
/// Takes |↑,0⟩ → |e₀,0⟩, |↑,1⟩ → |↑,0⟩ and |↑,2⟩ → |↓,0⟩.
pub fn pnr_map_sequence(ion: usize, g: f64) -> PulseSequence {
    composite_cp(ion, g).pulse(carrier(ion, PI, 0.0, g)).pulse(shelve(ion, PI, 0.0, g)).pulse(bsb(ion, PI, 0.0, g))
}

/// Mapping on every ion, each step driven on all ions at once.
pub fn pnr_map_all(spec: &HilbertSpec, g: f64) -> Result<PulseSequence> {
    require_three_levels(spec)?;
    let per_ion: Vec<Vec<PulseEvent>> =
        (0..spec.ion_count).map(|ion| pnr_map_sequence(ion, g).events().copied().collect()).collect();
    let steps = per_ion[0].len();
    Ok((0..steps).fold(PulseSequence::new(), |seq, k| seq.parallel(per_ion.iter().map(|p| p[k]).collect())))
}

fn require_three_levels(spec: &HilbertSpec) -> Result<()> {
    if spec.internal_levels != 3 {
        return Err(Error::Invalid("phonon-number-resolving readout needs 3 internal levels".into()));
    }
    Ok(())
}

/// Joint class probabilities over all ions for a state that has already been
/// through the mapping. Index `Σ class_i · 3^(N−1−i)`, ion 0 most significant.
pub fn class_probabilities<S: BasisPopulations>(spec: &HilbertSpec, state: &S) -> Result<Vec<f64>> {
    require_three_levels(spec)?;
    if state.dim() != spec.dim() {
        return Err(Error::Dimension { expected: spec.dim(), got: state.dim() });
    }
    let mut out = vec![0.0; 3usize.pow(spec.ion_count as u32)];
    for (idx, p) in state.basis_populations().into_iter().enumerate() {
        let labels = spec.labels(idx)?;
        let key = labels.iter().fold(0, |acc, &(lv, _)| acc * 3 + PhononClass::from_level(lv.index()).index());
        out[key] += p;
    }
    Ok(out)
}

/// Per-ion class probabilities, `[n0, n1, n2]`.
pub fn ion_class_probabilities<S: BasisPopulations>(spec: &HilbertSpec, state: &S, ion: usize) -> Result<[f64; 3]> {
    require_three_levels(spec)?;
    let t = partial_populations(spec, state, ion)?;
    Ok([t.level(Level::E0), t.level(Level::Up), t.level(Level::Down)])
}

/// Population of `ion` outside {|↑,n⟩ : n ≤ 2} before mapping. The protocol
/// routes it somewhere anyway; this is the size of that misassignment.
pub fn unmodeled_population<S: BasisPopulations>(spec: &HilbertSpec, state: &S, ion: usize) -> Result<f64> {
    let t = partial_populations(spec, state, ion)?;
    let inside: f64 = (0..=2.min(spec.n_max)).map(|n| t.get(Level::Up, n)).sum();
    Ok((t.total() - inside).max(0.0))
}

/// Symmetric bit-flip probability of each fluorescence stage.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReadoutError {
    #[serde(default)]
    pub stage_one: f64,
    #[serde(default)]
    pub stage_two: f64,
}

impl ReadoutError {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("stage_one", self.stage_one), ("stage_two", self.stage_two)] {
            if !(0.0..=0.5).contains(&v) {
                return Err(Error::Invalid(format!("readout error {name} must be in [0, 0.5], got {v}")));
            }
        }
        Ok(())
    }

    /// One ion through both stages, starting from its true class.
    fn classify<R: Rng>(&self, truth: PhononClass, rng: &mut R) -> PhononClass {
        let flip = |p: f64, rng: &mut R| p > 0.0 && rng.random::<f64>() < p;
        // stage 1: only |↓⟩ fluoresces
        let bright = (truth == PhononClass::N2) ^ flip(self.stage_one, rng);
        if bright {
            return PhononClass::N2;
        }
        // de-shelve swaps |e₀⟩ and |↓⟩, so only an original e₀ is bright now
        let bright = (truth == PhononClass::N0) ^ flip(self.stage_two, rng);
        if bright {
            PhononClass::N0
        } else {
            PhononClass::N1
        }
    }
}

/// Counts from repeated two-stage readout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PnrOutcome {
    pub ion_count: usize,
    pub shots: u64,
    /// `[ion][class]`
    pub per_ion: Vec<[u64; 3]>,
    /// Joint counts, indexed like [`class_probabilities`].
    pub joint: Vec<u64>,
}

impl PnrOutcome {
    pub fn joint_count(&self, classes: &[PhononClass]) -> u64 {
        if classes.len() != self.ion_count {
            return 0;
        }
        self.joint[classes.iter().fold(0, |acc, c| acc * 3 + c.index())]
    }

    pub fn joint_frequency(&self, classes: &[PhononClass]) -> f64 {
        self.joint_count(classes) as f64 / self.shots as f64
    }

    /// Frequencies of |2,0⟩, |1,1⟩, |0,2⟩ for a two-ion chain.
    pub fn two_ion_frequencies(&self) -> Result<[f64; 3]> {
        use PhononClass::*;
        if self.ion_count != 2 {
            return Err(Error::Invalid("joint two-phonon table needs two ions".into()));
        }
        Ok([self.joint_frequency(&[N2, N0]), self.joint_frequency(&[N1, N1]), self.joint_frequency(&[N0, N2])])
    }

    /// `outcome,count` rows; outcome labels like `n2|n0`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["outcome", "count"]).map_err(csv_err)?;
        for (key, count) in self.joint.iter().enumerate() {
            let label = decode_key(key, self.ion_count).iter().map(|c| c.to_string()).collect::<Vec<_>>().join("|");
            w.write_record([label, count.to_string()]).map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

fn decode_key(mut key: usize, ion_count: usize) -> Vec<PhononClass> {
    let mut out = vec![PhononClass::N0; ion_count];
    for slot in out.iter_mut().rev() {
        *slot = PhononClass::ALL[key % 3];
        key /= 3;
    }
    out
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    Error::Parse(e.to_string())
}

pub(crate) fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
}

/// Draw `shots` joint outcomes from exact class probabilities.
pub fn sample_readout<R: Rng>(
    probabilities: &[f64],
    ion_count: usize,
    shots: u64,
    readout: &ReadoutError,
    rng: &mut R,
) -> Result<PnrOutcome> {
    if shots == 0 {
        return Err(Error::Invalid("shots must be at least 1".into()));
    }
    readout.validate()?;
    let n_keys = 3usize.pow(ion_count as u32);
    if probabilities.len() != n_keys {
        return Err(Error::Dimension { expected: n_keys, got: probabilities.len() });
    }
    let total: f64 = probabilities.iter().sum();
    if probabilities.iter().any(|&p| p < -1e-9) || (total - 1.0).abs() > 1e-6 {
        return Err(Error::Invalid(format!("class probabilities must form a distribution, sum {total}")));
    }
    let mut cumulative = Vec::with_capacity(n_keys);
    let mut acc = 0.0;
    for &p in probabilities {
        acc += p.max(0.0) / total;
        cumulative.push(acc);
    }
    let mut per_ion = vec![[0u64; 3]; ion_count];
    let mut joint = vec![0u64; n_keys];
    for _ in 0..shots {
        let u: f64 = rng.random();
        let key = cumulative.iter().position(|&c| u < c).unwrap_or(n_keys - 1);
        let observed: Vec<PhononClass> =
            decode_key(key, ion_count).into_iter().map(|c| readout.classify(c, rng)).collect();
        for (ion, c) in observed.iter().enumerate() {
            per_ion[ion][c.index()] += 1;
        }
        joint[observed.iter().fold(0, |a, c| a * 3 + c.index())] += 1;
    }
    Ok(PnrOutcome { ion_count, shots, per_ion, joint })
}

/// Two-stage fluorescence readout of a mapped state, seeded.
pub fn two_stage_readout<S: BasisPopulations>(
    spec: &HilbertSpec,
    state: &S,
    shots: u64,
    seed: u64,
    readout: &ReadoutError,
) -> Result<PnrOutcome> {
    let probs = class_probabilities(spec, state)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sample_readout(&probs, spec.ion_count, shots, readout, &mut rng)
}

/// Reduced |↓⟩ population of one ion.
pub fn spin_down_probability<S: BasisPopulations>(spec: &HilbertSpec, state: &S, ion: usize) -> Result<f64> {
    Ok(partial_populations(spec, state, ion)?.level(Level::Down))
}

/// Phonon-number distribution p_0 … p_{n−1}.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FockDistribution {
    pub p: Vec<f64>,
}

impl FockDistribution {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() {
            return Err(Error::Invalid("empty Fock distribution".into()));
        }
        if p.iter().any(|&x| !(x >= -1e-12) || !x.is_finite()) {
            return Err(Error::Invalid(format!("negative or non-finite population in {p:?}")));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Invalid(format!("Fock populations sum to {s}, not 1")));
        }
        Ok(Self { p: p.into_iter().map(|x| x.max(0.0)).collect() })
    }

    pub fn levels(&self) -> usize {
        self.p.len()
    }

    pub fn get(&self, n: usize) -> f64 {
        self.p.get(n).copied().unwrap_or(0.0)
    }
}

/// How the Rabi decay rate grows with the Fock number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayScaling {
    /// γ_n = γ √(n+1)
    #[default]
    SqrtNPlusOne,
    /// γ_n = γ
    Constant,
}

impl DecayScaling {
    fn factor(self, n: usize) -> f64 {
        match self {
            DecayScaling::SqrtNPlusOne => ((n + 1) as f64).sqrt(),
            DecayScaling::Constant => 1.0,
        }
    }
}

/// Spin-down probability versus BSB probe time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RabiTrace {
    pub times: Vec<f64>,
    pub p_down: Vec<f64>,
    /// Shots per point; 0 for an exact trace.
    pub shots: Vec<u64>,
    /// Binomial standard error of each point.
    pub sigma: Vec<f64>,
}

impl RabiTrace {
    pub fn exact(times: Vec<f64>, p_down: Vec<f64>) -> Result<Self> {
        let n = times.len();
        let t = Self { times, p_down, shots: vec![0; n], sigma: vec![0.0; n] };
        t.validate()?;
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.times.len();
        for (what, len) in [("p_down", self.p_down.len()), ("shots", self.shots.len()), ("sigma", self.sigma.len())] {
            if len != n {
                return Err(Error::Invalid(format!("trace column {what} has {len} rows, expected {n}")));
            }
        }
        if self.times.iter().any(|t| !(*t >= 0.0) || !t.is_finite()) {
            return Err(Error::Invalid("trace times must be finite and >= 0".into()));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Invalid("trace times must be strictly increasing".into()));
        }
        if self.p_down.iter().any(|p| !(-1e-9..=1.0 + 1e-9).contains(p)) {
            return Err(Error::Invalid("trace probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Binomial resampling of every point with `shots` shots.
    pub fn sample<R: Rng>(&self, shots: u64, rng: &mut R) -> Result<RabiTrace> {
        if shots == 0 {
            return Err(Error::Invalid("shots must be at least 1".into()));
        }
        let mut p_down = Vec::with_capacity(self.len());
        let mut sigma = Vec::with_capacity(self.len());
        for &p in &self.p_down {
            let k = Binomial::new(shots, p.clamp(0.0, 1.0)).map_err(|e| Error::Invalid(e.to_string()))?.sample(rng);
            let f = k as f64 / shots as f64;
            p_down.push(f);
            sigma.push(binomial_sigma(f, shots));
        }
        Ok(RabiTrace { times: self.times.clone(), p_down, shots: vec![shots; self.len()], sigma })
    }

    /// Columns `time_s,p_down,sigma,shots`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["time_s", "p_down", "sigma", "shots"]).map_err(csv_err)?;
        for i in 0..self.len() {
            w.write_record([
                self.times[i].to_string(),
                self.p_down[i].to_string(),
                self.sigma[i].to_string(),
                self.shots[i].to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish_csv(w)
    }

    /// Reads `time_s,p_down` plus optional `sigma` and `shots` columns.
    pub fn from_csv<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers().map_err(csv_err)?.clone();
        let col = |name: &str| headers.iter().position(|h| h.trim() == name);
        let (ti, pi) = match (col("time_s"), col("p_down")) {
            (Some(t), Some(p)) => (t, p),
            _ => return Err(Error::Parse("trace CSV needs time_s and p_down columns".into())),
        };
        let (si, ni) = (col("sigma"), col("shots"));
        let mut trace = RabiTrace { times: vec![], p_down: vec![], shots: vec![], sigma: vec![] };
        for (line, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_err)?;
            let field = |i: usize| -> Result<f64> {
                rec.get(i)
                    .ok_or_else(|| Error::Parse(format!("row {}: missing column {i}", line + 2)))?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse(format!("row {}: {e}", line + 2)))
            };
            trace.times.push(field(ti)?);
            let p = field(pi)?;
            trace.p_down.push(p);
            let shots = match ni {
                Some(i) => field(i)? as u64,
                None => 0,
            };
            trace.shots.push(shots);
            trace.sigma.push(match si {
                Some(i) => field(i)?,
                None if shots > 0 => binomial_sigma(p, shots),
                None => 0.0,
            });
        }
        trace.validate()?;
        Ok(trace)
    }
}

pub fn binomial_sigma(p: f64, shots: u64) -> f64 {
    if shots == 0 {
        0.0
    } else {
        (p * (1.0 - p) / shots as f64).max(0.0).sqrt()
    }
}

/// Model column for Fock level n: ½[1 + cos(2g√(n+1)t) e^{−γ_n t}].
fn rabi_basis(n: usize, g: f64, gamma: f64, scaling: DecayScaling, t: f64) -> f64 {
    let s = ((n + 1) as f64).sqrt();
    0.5 * (1.0 + (2.0 * g * s * t).cos() * (-gamma * scaling.factor(n) * t).exp())
}

/// Noiseless BSB Rabi trace for a Fock distribution starting in |↓⟩.
pub fn rabi_forward(
    dist: &FockDistribution,
    g: f64,
    gamma: f64,
    times: &[f64],
    scaling: DecayScaling,
) -> Result<RabiTrace> {
    if !(g > 0.0) {
        return Err(Error::Invalid(format!("g must be positive, got {g}")));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Invalid(format!("decay rate must be >= 0, got {gamma}")));
    }
    let p = times
        .iter()
        .map(|&t| dist.p.iter().enumerate().map(|(n, &pn)| pn * rabi_basis(n, g, gamma, scaling, t)).sum())
        .collect();
    RabiTrace::exact(times.to_vec(), p)
}

/// Least squares ‖A x − b‖² over the probability simplex.
///
/// Every support is tried with the equality-constrained KKT system; the best
/// non-negative candidate is the global optimum of this convex problem.
/// Returns `(x, squared residual)`.
pub fn simplex_least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    let k = a.ncols();
    if k == 0 || k > 10 {
        return Err(Error::Invalid(format!("simplex fit supports 1..=10 unknowns, got {k}")));
    }
    if a.nrows() != b.len() {
        return Err(Error::Dimension { expected: a.nrows(), got: b.len() });
    }
    let ata = a.transpose() * a;
    let atb = a.transpose() * b;
    let btb = b.dot(b);
    let mut best: Option<(DVector<f64>, f64)> = None;
    for mask in 1u32..(1 << k) {
        let support: Vec<usize> = (0..k).filter(|j| mask & (1 << j) != 0).collect();
        let m = support.len();
        let mut kkt = DMatrix::<f64>::zeros(m + 1, m + 1);
        let mut rhs = DVector::<f64>::zeros(m + 1);
        for (r, &i) in support.iter().enumerate() {
            for (c, &j) in support.iter().enumerate() {
                kkt[(r, c)] = 2.0 * ata[(i, j)];
            }
            kkt[(r, m)] = 1.0;
            kkt[(m, r)] = 1.0;
            rhs[r] = 2.0 * atb[i];
        }
        rhs[m] = 1.0;
        let Some(sol) = kkt.lu().solve(&rhs) else { continue };
        if sol.iter().take(m).any(|&v| v < -1e-12 || !v.is_finite()) {
            continue;
        }
        let mut x = DVector::<f64>::zeros(k);
        for (r, &i) in support.iter().enumerate() {
            x[i] = sol[r].max(0.0);
        }
        let s = x.sum();
        x /= s;
        let res = (x.dot(&(&ata * &x)) - 2.0 * x.dot(&atb) + btb).max(0.0);
        if best.as_ref().is_none_or(|(_, r)| res < *r) {
            best = Some((x, res));
        }
    }
    best.ok_or_else(|| Error::DegenerateFit("no feasible simplex solution".into()))
}

/// Settings for [`rabi_fit`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RabiFitOptions {
    /// Calibrated ground-state g, rad/s. Restricts the search to ±15 % around
    /// it, which excludes the √(n+1)-rescaled relabelings of the populations.
    #[serde(default)]
    pub g_hint: Option<f64>,
    /// Explicit search range for g, rad/s; overrides `g_hint`.
    #[serde(default)]
    pub g_range: Option<(f64, f64)>,
    #[serde(default)]
    pub scaling: DecayScaling,
    /// RMS residual above which the fit is flagged; derived from the trace
    /// uncertainties when absent.
    #[serde(default)]
    pub residual_threshold: Option<f64>,
}

impl Default for RabiFitOptions {
    fn default() -> Self {
        Self { g_hint: None, g_range: None, scaling: DecayScaling::SqrtNPlusOne, residual_threshold: None }
    }
}

/// Result of [`rabi_fit`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RabiFit {
    pub distribution: FockDistribution,
    pub g: f64,
    pub gamma: f64,
    pub residual_rms: f64,
    /// Smallest singular value of the design restricted to sum-preserving
    /// directions, per √(points).
    pub conditioning: f64,
    pub low_confidence: bool,
    pub warnings: Vec<String>,
}

/// g grid spacing, as the phase error it causes over the trace in radians.
const G_GRID_PHASE: f64 = 0.05;
const G_HINT_WINDOW: f64 = 1.15;
const GAMMA_GRID: usize = 24;
const CONDITION_FLAG: f64 = 1e-3;
const CONDITION_FAIL: f64 = 1e-8;

fn design(times: &[f64], n_levels: usize, g: f64, gamma: f64, scaling: DecayScaling) -> DMatrix<f64> {
    DMatrix::from_fn(times.len(), n_levels, |i, n| rabi_basis(n, g, gamma, scaling, times[i]))
}

fn conditioning(a: &DMatrix<f64>) -> f64 {
    let k = a.ncols();
    if k < 2 {
        return 1.0;
    }
    // orthonormal basis of {x : Σx = 0}, from the differences e_j − e_{j+1}
    let diffs = DMatrix::from_fn(k, k - 1, |i, j| {
        if i == j {
            1.0
        } else if i == j + 1 {
            -1.0
        } else {
            0.0
        }
    });
    let sv = (a * diffs.qr().q()).singular_values();
    sv.min() / (a.nrows() as f64).sqrt()
}

/// Fock populations from a BSB Rabi trace.
///
/// Stage one searches (g, γ) on a grid and refines with Nelder–Mead, scoring
/// each pair by the best simplex-constrained fit; stage two reports the
/// populations at the optimum.
pub fn rabi_fit(trace: &RabiTrace, n_levels: usize, options: &RabiFitOptions) -> Result<RabiFit> {
    trace.validate()?;
    if n_levels == 0 || n_levels > 8 {
        return Err(Error::Invalid(format!("n_levels must be in 1..=8, got {n_levels}")));
    }
    let m = trace.len();
    if m < 3 * n_levels {
        return Err(Error::Invalid(format!("need at least {} probe points, got {m}", 3 * n_levels)));
    }
    let t0 = trace.times[0];
    let span = trace.times[m - 1] - t0;
    if !(span > 0.0) {
        return Err(Error::Invalid("probe times must span a nonzero interval".into()));
    }
    let dt = trace.times.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    let (g_lo, g_hi) = match (options.g_range, options.g_hint) {
        (Some((lo, hi)), _) => {
            if !(lo > 0.0 && hi > lo) {
                return Err(Error::Invalid(format!("invalid g range ({lo}, {hi})")));
            }
            (lo, hi)
        }
        (None, Some(g)) => {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Invalid(format!("g hint must be positive, got {g}")));
            }
            (g / G_HINT_WINDOW, g * G_HINT_WINDOW)
        }
        (None, None) => (0.5 * PI / span, PI / (2.0 * (n_levels as f64).sqrt() * dt)),
    };
    if g_hi <= g_lo {
        return Err(Error::Invalid("probe grid too coarse for its span: no resolvable Rabi frequency".into()));
    }
    let gamma_max = 20.0 / span;
    let b = DVector::from_column_slice(&trace.p_down);
    let cost = |g: f64, gamma: f64| -> f64 {
        let a = design(&trace.times, n_levels, g, gamma, options.scaling);
        simplex_least_squares(&a, &b).map(|(_, r)| r).unwrap_or(f64::INFINITY)
    };

    let mut gammas = vec![0.0];
    let lo = 0.01 / span;
    for i in 0..GAMMA_GRID {
        gammas.push(lo * (gamma_max / lo).powf(i as f64 / (GAMMA_GRID - 1) as f64));
    }
    // descending g so that exact ties resolve to the lowest-n reading
    let g_grid =
        (((g_hi - g_lo) * 2.0 * (n_levels as f64).sqrt() * span / G_GRID_PHASE).ceil() as usize).clamp(64, 5000);
    let mut best = (f64::INFINITY, g_hi, 0.0);
    for i in (0..g_grid).rev() {
        let g = g_lo + (g_hi - g_lo) * i as f64 / (g_grid - 1) as f64;
        for &gm in &gammas {
            let c = cost(g, gm);
            if c < best.0 {
                best = (c, g, gm);
            }
        }
    }

    let clamp = |g: f64, gm: f64| (g.clamp(g_lo, g_hi), gm.clamp(0.0, gamma_max));
    let (g_step, gm_step) = ((g_hi - g_lo) / g_grid as f64, (best.2 * 0.5).max(0.05 / span));
    let (g, gamma) = nelder_mead(
        |p| {
            let (g, gm) = clamp(p[0], p[1]);
            cost(g, gm)
        },
        [best.1, best.2],
        [g_step, gm_step],
        400,
    );
    let (g, gamma) = clamp(g, gamma);
    let (g, gamma) = if cost(g, gamma) <= best.0 { (g, gamma) } else { (best.1, best.2) };

    let (mut g, mut gamma) = (g, gamma);
    let mut a = design(&trace.times, n_levels, g, gamma, options.scaling);
    let (mut x, mut res) = simplex_least_squares(&a, &b)?;
    // A trace whose lowest populated level is j fits equally well with every
    // label lowered by j and g raised by √(j+1); prefer that reading when it
    // is inside the search range.
    if let Some(j) = x.iter().position(|&v| v > 1e-9).filter(|&j| j > 0) {
        let s = ((j + 1) as f64).sqrt();
        let (g2, gm2) = (g * s, gamma * options.scaling.factor(j) / options.scaling.factor(0));
        if g2 <= g_hi && gm2 <= gamma_max {
            let a2 = design(&trace.times, n_levels, g2, gm2, options.scaling);
            let (x2, res2) = simplex_least_squares(&a2, &b)?;
            if res2 <= res * (1.0 + 1e-9) + 1e-12 {
                (g, gamma, a, x, res) = (g2, gm2, a2, x2, res2);
            }
        }
    }
    let residual_rms = (res / m as f64).sqrt();
    let cond = conditioning(&a);
    let at_bound = gamma >= gamma_max * (1.0 - 1e-6);
    if cond < CONDITION_FAIL && !at_bound {
        return Err(Error::DegenerateFit(format!(
            "probe grid cannot separate the Fock components (conditioning {cond:.2e})"
        )));
    }
    let noise = (trace.sigma.iter().map(|s| s * s).sum::<f64>() / m as f64).sqrt();
    let threshold = options.residual_threshold.unwrap_or(0.02 + 3.0 * noise);
    let mut warnings = Vec::new();
    if at_bound {
        warnings.push("decay rate at the search bound: trace shows no resolvable oscillation".into());
    }
    if cond < CONDITION_FLAG {
        warnings.push(format!("populations poorly identifiable (conditioning {cond:.2e})"));
    }
    if options.g_hint.is_none() && options.g_range.is_none() && x[0] < 0.01 {
        warnings
            .push("no ground-state population fitted: without a calibrated g the Fock labels may be shifted".into());
    }
    if residual_rms > threshold {
        warnings.push(format!("rms residual {residual_rms:.3e} above threshold {threshold:.3e}"));
    }
    Ok(RabiFit {
        distribution: FockDistribution { p: x.iter().copied().collect() },
        g,
        gamma,
        residual_rms,
        conditioning: cond,
        low_confidence: !warnings.is_empty(),
        warnings,
    })
}

/// Two-parameter Nelder–Mead minimizer.
fn nelder_mead<F: Fn([f64; 2]) -> f64>(f: F, start: [f64; 2], step: [f64; 2], iterations: usize) -> (f64, f64) {
    let mut s = [start, [start[0] + step[0], start[1]], [start[0], start[1] + step[1]]];
    let mut v = s.map(&f);
    let comb = |a: [f64; 2], b: [f64; 2], w: f64| [a[0] + w * (b[0] - a[0]), a[1] + w * (b[1] - a[1])];
    for _ in 0..iterations {
        let mut idx = [0, 1, 2];
        idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
        s = idx.map(|i| s[i]);
        v = idx.map(|i| v[i]);
        if (v[2] - v[0]).abs() <= 1e-15 * (v[0].abs() + 1e-300) {
            break;
        }
        let c = [(s[0][0] + s[1][0]) / 2.0, (s[0][1] + s[1][1]) / 2.0];
        let r = comb(c, s[2], -1.0);
        let fr = f(r);
        if fr < v[0] {
            let e = comb(c, s[2], -2.0);
            let fe = f(e);
            if fe < fr {
                (s[2], v[2]) = (e, fe);
            } else {
                (s[2], v[2]) = (r, fr);
            }
        } else if fr < v[1] {
            (s[2], v[2]) = (r, fr);
        } else {
            let k = comb(c, s[2], 0.5);
            let fk = f(k);
            if fk < v[2] {
                (s[2], v[2]) = (k, fk);
            } else {
                for i in 1..3 {
                    s[i] = comb(s[0], s[i], 0.5);
                    v[i] = f(s[i]);
                }
            }
        }
    }
    let i = (0..3).min_by(|&i, &j| v[i].total_cmp(&v[j])).expect("three vertices");
    (s[i][0], s[i][1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chain::ChainGeometry;
    use crate::hilbert::{product_state, StateVector};
    use crate::pulses::PulseContext;
    use crate::C64;
    use proptest::prelude::*;

    const G: f64 = 2.0 * PI * 20e3;

    fn ion3() -> PulseContext {
        let spec = HilbertSpec::new(1, 4, 3).unwrap();
        PulseContext::new(&spec, &ChainGeometry::uncoupled(1), false).unwrap()
    }

    fn mapped(ctx: &PulseContext, psi: &StateVector) -> StateVector {
        ctx.unitary(&pnr_map_sequence(0, G)).unwrap().apply(psi)
    }

    #[test]
    fn map_routes_fock_states() {
        let ctx = ion3();
        for (n, class) in [(0, PhononClass::N0), (1, PhononClass::N1), (2, PhononClass::N2)] {
            let out = mapped(&ctx, &product_state(&ctx.spec, &[(Level::Up, n)]).unwrap());
            let probs = class_probabilities(&ctx.spec, &out).unwrap();
            assert!(probs[class.index()] >= 1.0 - 1e-9, "n={n}: {probs:?}");
            let target = product_state(&ctx.spec, &[(class.routed_level(), 0)]).unwrap();
            assert!(out.fidelity(&target) >= 1.0 - 1e-9);
        }
    }

    #[test]
    fn map_matches_product_of_pulse_unitaries() {
        let ctx = ion3();
        let mut u = crate::hilbert::Operator::identity(ctx.spec.dim());
        for e in pnr_map_sequence(0, G).events() {
            let single = ctx.unitary(&PulseSequence::new().pulse(*e)).unwrap();
            u = &single * &u;
        }
        let whole = ctx.unitary(&pnr_map_sequence(0, G)).unwrap();
        assert!((&u - &whole).max_abs() < 1e-12);
        let psi = product_state(&ctx.spec, &[(Level::Up, 2)]).unwrap();
        let down0 = ctx.spec.index(&[(Level::Down, 0)]).unwrap();
        assert!(u.apply(&psi).basis_populations()[down0] >= 1.0 - 1e-9);
    }

    #[test]
    fn map_superposition_splits_evenly() {
        let ctx = ion3();
        let a = product_state(&ctx.spec, &[(Level::Up, 1)]).unwrap();
        let b = product_state(&ctx.spec, &[(Level::Up, 2)]).unwrap();
        let psi = StateVector::normalized(a.vector() + b.vector()).unwrap();
        let probs = class_probabilities(&ctx.spec, &mapped(&ctx, &psi)).unwrap();
        for (got, want) in probs.iter().zip([0.0, 0.5, 0.5]) {
            assert!((got - want).abs() < 1e-9);
        }
    }

    #[test]
    fn map_requires_three_levels() {
        let spec = HilbertSpec::new(2, 4, 2).unwrap();
        assert!(pnr_map_all(&spec, G).is_err());
        let psi = product_state(&spec, &[(Level::Up, 0), (Level::Up, 0)]).unwrap();
        assert!(class_probabilities(&spec, &psi).is_err());
    }

    #[test]
    fn unmodeled_population_counts_outside_states() {
        let spec = HilbertSpec::new(1, 4, 3).unwrap();
        let a = product_state(&spec, &[(Level::Up, 1)]).unwrap();
        let b = product_state(&spec, &[(Level::Up, 3)]).unwrap();
        let psi = StateVector::normalized(a.vector() + b.vector()).unwrap();
        assert!((unmodeled_population(&spec, &psi, 0).unwrap() - 0.5).abs() < 1e-12);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn class_probabilities_complete(re in prop::collection::vec(-1.0f64..1.0, 15), im in prop::collection::vec(-1.0f64..1.0, 15)) {
            let ctx = ion3();
            let v = nalgebra::DVector::from_iterator(15, re.iter().zip(&im).map(|(r, i)| C64::new(*r, *i)));
            prop_assume!(v.norm() > 1e-3);
            let psi = StateVector::normalized(v).unwrap();
            let probs = class_probabilities(&ctx.spec, &mapped(&ctx, &psi)).unwrap();
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn spin_down_invariant_under_upper_manifold_unitary(theta in 0.0f64..6.3, phi in 0.0f64..6.3) {
            // rotation mixing |↑,n⟩ and |e₀,n⟩ leaves the |↓⟩ population alone
            let spec = HilbertSpec::new(1, 2, 3).unwrap();
            let f = spec.fock_dim();
            let mut u = nalgebra::DMatrix::<C64>::identity(spec.dim(), spec.dim());
            let (c, s) = (theta.cos(), theta.sin());
            for n in 0..f {
                let (i, j) = (f + n, 2 * f + n);
                u[(i, i)] = C64::new(c, 0.0);
                u[(j, j)] = C64::new(c, 0.0);
                u[(i, j)] = -C64::from_polar(s, phi);
                u[(j, i)] = C64::from_polar(s, -phi);
            }
            let u = crate::hilbert::Operator::from_matrix(u);
            let v = nalgebra::DVector::from_fn(spec.dim(), |k, _| C64::new((k as f64 + 1.0).sin(), (k as f64 * 0.7).cos()));
            let psi = StateVector::normalized(v).unwrap();
            let before = spin_down_probability(&spec, &psi, 0).unwrap();
            let after = spin_down_probability(&spec, &u.apply(&psi), 0).unwrap();
            prop_assert!((before - after).abs() < 1e-12);
        }
    }

    #[test]
    fn readout_of_deterministic_state() {
        let spec = HilbertSpec::new(1, 4, 3).unwrap();
        let psi = product_state(&spec, &[(Level::Down, 0)]).unwrap();
        let out = two_stage_readout(&spec, &psi, 500, 7, &ReadoutError::default()).unwrap();
        assert_eq!(out.per_ion[0], [0, 0, 500]);
        assert_eq!(out.joint_count(&[PhononClass::N2]), 500);
    }

    #[test]
    fn readout_same_seed_same_counts() {
        let p = [1.0 / 3.0; 3];
        let r = ReadoutError::default();
        let a = sample_readout(&p, 1, 500, &r, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = sample_readout(&p, 1, 500, &r, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.per_ion[0].iter().sum::<u64>(), 500);
    }

    #[test]
    fn readout_within_binomial_bounds() {
        let p = [1.0f64 / 3.0; 3];
        let sigma = (p[0] * (1.0 - p[0]) / 500.0).sqrt();
        for seed in 0..20 {
            let out =
                sample_readout(&p, 1, 500, &ReadoutError::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for c in out.per_ion[0] {
                assert!((c as f64 / 500.0 - 1.0 / 3.0).abs() < 4.0 * sigma);
            }
        }
    }

    #[test]
    fn readout_converges_to_class_probabilities() {
        // two ions, a generic joint distribution
        let probs = [0.05, 0.1, 0.2, 0.0, 0.15, 0.05, 0.25, 0.1, 0.1];
        let out =
            sample_readout(&probs, 2, 100_000, &ReadoutError::default(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut cdf_exact = 0.0;
        let mut cdf_emp = 0.0;
        let mut ks: f64 = 0.0;
        for (k, p) in probs.iter().enumerate() {
            cdf_exact += p;
            cdf_emp += out.joint[k] as f64 / 1e5;
            ks = ks.max((cdf_exact - cdf_emp).abs());
        }
        assert!(ks < 0.01, "KS distance {ks}");
        assert_eq!(out.joint.iter().sum::<u64>(), 100_000);
    }

    #[test]
    fn readout_error_confuses_classes() {
        let r = ReadoutError { stage_one: 0.1, stage_two: 0.0 };
        let out = sample_readout(&[0.0, 0.0, 1.0], 1, 100_000, &r, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        // a dark-read |↓⟩ is swapped into e₀ and stays dark: reported n1
        assert!((out.per_ion[0][2] as f64 / 1e5 - 0.9).abs() < 0.005);
        assert!((out.per_ion[0][1] as f64 / 1e5 - 0.1).abs() < 0.005);
        assert!(ReadoutError { stage_one: 0.7, stage_two: 0.0 }.validate().is_err());
    }

    #[test]
    fn readout_rejects_zero_shots() {
        let spec = HilbertSpec::new(1, 2, 3).unwrap();
        let psi = product_state(&spec, &[(Level::Down, 0)]).unwrap();
        assert!(two_stage_readout(&spec, &psi, 0, 1, &ReadoutError::default()).is_err());
    }

    #[test]
    fn outcome_csv_lists_joint_counts() {
        let out = sample_readout(
            &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            2,
            10,
            &ReadoutError::default(),
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let csv = out.to_csv().unwrap();
        assert!(csv.starts_with("outcome,count\n"));
        assert!(csv.contains("n0|n2,10\n"));
        assert_eq!(out.two_ion_frequencies().unwrap(), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn spin_down_examples() {
        let spec = HilbertSpec::new(1, 2, 2).unwrap();
        let d = product_state(&spec, &[(Level::Down, 0)]).unwrap();
        let u = product_state(&spec, &[(Level::Up, 1)]).unwrap();
        assert_eq!(spin_down_probability(&spec, &d, 0).unwrap(), 1.0);
        assert_eq!(spin_down_probability(&spec, &u, 0).unwrap(), 0.0);
        let s = StateVector::normalized(d.vector() + u.vector()).unwrap();
        assert!((spin_down_probability(&spec, &s, 0).unwrap() - 0.5).abs() < 1e-12);
    }

    fn grid(g: f64, periods: f64, points: usize) -> Vec<f64> {
        let span = periods * PI / g;
        (0..points).map(|i| span * i as f64 / (points - 1) as f64).collect()
    }

    #[test]
    fn forward_examples() {
        let ground = FockDistribution::new(vec![1.0, 0.0, 0.0]).unwrap();
        let times = grid(G, 2.0, 41);
        let tr = rabi_forward(&ground, G, 0.0, &times, DecayScaling::default()).unwrap();
        for (t, p) in times.iter().zip(&tr.p_down) {
            assert!((p - (G * t).cos().powi(2)).abs() < 1e-12);
        }
        let one = FockDistribution::new(vec![0.0, 1.0, 0.0]).unwrap();
        let t = PI / (2.0 * G * 2f64.sqrt());
        let tr = rabi_forward(&one, G, 0.0, &[0.0, t], DecayScaling::default()).unwrap();
        assert!(tr.p_down[1].abs() < 1e-12);
        let mixed = FockDistribution::new(vec![0.3, 0.3, 0.4]).unwrap();
        assert!((rabi_forward(&mixed, G, 1e3, &[0.0], DecayScaling::Constant).unwrap().p_down[0] - 1.0).abs() < 1e-15);
        assert!(rabi_forward(&mixed, G, -1.0, &[0.0], DecayScaling::default()).is_err());
        assert!(FockDistribution::new(vec![0.5, 0.6]).is_err());
    }

    #[test]
    fn simplex_ls_matches_brute_force() {
        let a = DMatrix::from_row_slice(4, 3, &[1.0, 0.2, 0.5, 0.3, 1.0, 0.1, 0.7, 0.4, 0.9, 0.2, 0.8, 0.3]);
        let b = DVector::from_row_slice(&[0.1, 0.9, 0.2, 1.0]);
        let (x, r) = simplex_least_squares(&a, &b).unwrap();
        let mut best = f64::INFINITY;
        let steps = 400;
        for i in 0..=steps {
            for j in 0..=(steps - i) {
                let y = DVector::from_row_slice(&[
                    i as f64 / steps as f64,
                    j as f64 / steps as f64,
                    (steps - i - j) as f64 / steps as f64,
                ]);
                best = best.min((&a * &y - &b).norm_squared());
            }
        }
        assert!(r <= best + 1e-12);
        assert!(best - r < 1e-4);
        assert!((x.sum() - 1.0).abs() < 1e-12 && x.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn fit_round_trip_interior() {
        let truth = FockDistribution::new(vec![0.2, 0.5, 0.3]).unwrap();
        let times = grid(G, 4.0, 60);
        let gamma = 0.05 * G;
        let tr = rabi_forward(&truth, G, gamma, &times, DecayScaling::default()).unwrap();
        let fit = rabi_fit(&tr, 3, &RabiFitOptions::default()).unwrap();
        for n in 0..3 {
            assert!((fit.distribution.get(n) - truth.get(n)).abs() < 0.02, "{fit:?}");
        }
        assert!((fit.g / G - 1.0).abs() < 1e-3);
        assert!(!fit.low_confidence, "{:?}", fit.warnings);
    }

    #[test]
    fn fit_round_trip_vertex() {
        let truth = FockDistribution::new(vec![1.0, 0.0, 0.0]).unwrap();
        let tr = rabi_forward(&truth, G, 0.0, &grid(G, 4.0, 60), DecayScaling::default()).unwrap();
        let fit = rabi_fit(&tr, 3, &RabiFitOptions::default()).unwrap();
        assert!(fit.distribution.get(0) >= 0.999, "{fit:?}");
        let hinted = rabi_fit(&tr, 3, &RabiFitOptions { g_hint: Some(G), ..Default::default() }).unwrap();
        assert!(hinted.distribution.get(0) >= 0.999, "{hinted:?}");
    }

    #[test]
    fn fit_flags_shifted_labels_without_hint() {
        // a lone n = 2 component is indistinguishable from n = 0 at g/√3
        let truth = FockDistribution::new(vec![0.0, 0.0, 1.0]).unwrap();
        let tr = rabi_forward(&truth, G, 0.0, &grid(G, 4.0, 60), DecayScaling::default()).unwrap();
        let blind = rabi_fit(&tr, 3, &RabiFitOptions::default()).unwrap();
        assert!(blind.distribution.get(0) >= 0.999);
        assert!((blind.g / (G * 3f64.sqrt()) - 1.0).abs() < 1e-3);
        let decaying = rabi_forward(&truth, G, 0.03 * G, &grid(G, 4.0, 60), DecayScaling::default()).unwrap();
        let blind = rabi_fit(&decaying, 3, &RabiFitOptions::default()).unwrap();
        assert!(blind.distribution.get(0) >= 0.999, "{blind:?}");
        assert!(blind.residual_rms < 1e-6);
        let hinted = rabi_fit(&tr, 3, &RabiFitOptions { g_hint: Some(G), ..Default::default() }).unwrap();
        assert!(hinted.distribution.get(2) >= 0.999, "{hinted:?}");
    }

    #[test]
    fn fit_flags_flat_trace() {
        let times = grid(G, 4.0, 60);
        let tr = RabiTrace::exact(times.clone(), vec![0.5; times.len()]).unwrap();
        let fit = rabi_fit(&tr, 3, &RabiFitOptions::default()).unwrap();
        assert!(fit.low_confidence);
        assert!(fit.warnings.iter().any(|w| w.contains("search bound")), "{:?}", fit.warnings);
    }

    #[test]
    fn fit_rejects_unresolvable_design() {
        let times = grid(G, 4.0, 60);
        let tr = RabiTrace::exact(times.clone(), vec![1.0; times.len()]).unwrap();
        let span = times[59];
        let opts = RabiFitOptions { g_range: Some((1e-6 / span, 2e-6 / span)), ..Default::default() };
        assert!(matches!(rabi_fit(&tr, 3, &opts), Err(Error::DegenerateFit(_))));
    }

    #[test]
    fn fit_needs_enough_points() {
        let times = grid(G, 4.0, 8);
        let tr = RabiTrace::exact(times.clone(), vec![1.0; 8]).unwrap();
        assert!(rabi_fit(&tr, 3, &RabiFitOptions::default()).is_err());
    }

    #[test]
    fn trace_csv_round_trip_and_sampling() {
        let truth = FockDistribution::new(vec![0.6, 0.4]).unwrap();
        let tr = rabi_forward(&truth, G, 0.0, &grid(G, 1.0, 12), DecayScaling::default()).unwrap();
        let sampled = tr.sample(50, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for (p, s) in sampled.p_down.iter().zip(&sampled.sigma) {
            assert!((s - binomial_sigma(*p, 50)).abs() < 1e-15);
            assert!((p * 50.0).fract() == 0.0);
        }
        let back = RabiTrace::from_csv(sampled.to_csv().unwrap().as_bytes()).unwrap();
        assert_eq!(back, sampled);
        let minimal = RabiTrace::from_csv("time_s,p_down\n0,1\n1e-6,0.5\n".as_bytes()).unwrap();
        assert_eq!(minimal.shots, vec![0, 0]);
        assert!(RabiTrace::from_csv("t,p\n0,1\n".as_bytes()).is_err());
    }
}
