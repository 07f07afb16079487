//! End-to-end experiment pipelines, blockade sweeps and noise calibration.
//!
//! Every pipeline runs state preparation, a hopping stage of length τ (with
//! or without a blockade drive), then a measurement protocol, once per point
//! of the τ grid. τ runs from the end of preparation to the start of the
//! readout pulses.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::chain::{ChainGeometry, TrapConfig};
use crate::detection::{
    binomial_sigma, csv_err, finish_csv, pnr_map_all, rabi_fit, sample_readout, spin_down_probability, DecayScaling,
    PhononClass, RabiFitOptions, RabiTrace, ReadoutError,
};
use crate::dynamics::{
    adjoint_schedule, lindblad_samples, run_schedule, HermitianEigen, LindbladOptions, NoiseChannel, Segment, SimState,
};
use crate::hamiltonian::{blockade_hamiltonian, DriveSpec, Sideband};
use crate::hilbert::{
    cutoff_population, partial_populations, product_state, site_operator, BasisPopulations, DensityOperator,
    HilbertSpec, Level, Operator, SiteOp, StateVector,
};
use crate::pulses::{bsb, carrier, prep_sequence, Experiment, PulseContext, PulseSequence};
use crate::{Error, Result, C64};

/// Default half-Rabi frequency of every pulse and of the blockade beam, rad/s.
pub const DEFAULT_G: f64 = 2.0 * PI * 20e3;
/// Cutoff population that aborts a run.
pub const CUTOFF_ERROR: f64 = 1e-3;
/// Cutoff population that adds a warning to the output.
pub const CUTOFF_WARNING: f64 = 1e-6;

/// Which pipeline to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioKind {
    /// |↑2,↑0⟩ hopping, phonon-number-resolving readout.
    #[default]
    Fig2Free,
    Fig2Blockade,
    /// |↑1,↑1⟩ hopping, BSB π and spin-down readout per ion.
    Fig3Free,
    Fig3Blockade,
    /// |↑1,↑1⟩ hopping, Fock populations of ion 0 from a BSB Rabi probe.
    Fig4Free,
    Fig4Blockade,
    /// User-chosen product state, spin-down and phonon number per ion.
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Family {
    Fig2,
    Fig3,
    Fig4,
    Custom,
}

impl ScenarioKind {
    pub const ALL: [ScenarioKind; 7] = [
        ScenarioKind::Fig2Free,
        ScenarioKind::Fig2Blockade,
        ScenarioKind::Fig3Free,
        ScenarioKind::Fig3Blockade,
        ScenarioKind::Fig4Free,
        ScenarioKind::Fig4Blockade,
        ScenarioKind::Custom,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ScenarioKind::Fig2Free => "fig2_free",
            ScenarioKind::Fig2Blockade => "fig2_blockade",
            ScenarioKind::Fig3Free => "fig3_free",
            ScenarioKind::Fig3Blockade => "fig3_blockade",
            ScenarioKind::Fig4Free => "fig4_free",
            ScenarioKind::Fig4Blockade => "fig4_blockade",
            ScenarioKind::Custom => "custom",
        }
    }

    /// Accepts full names and the short forms `fig2`, `fig3`, `fig4`.
    pub fn parse(name: &str) -> Result<Self> {
        let name = name.trim().to_ascii_lowercase();
        let short = match name.as_str() {
            "fig2" => Some(ScenarioKind::Fig2Free),
            "fig3" => Some(ScenarioKind::Fig3Free),
            "fig4" => Some(ScenarioKind::Fig4Free),
            _ => None,
        };
        short.or_else(|| Self::ALL.into_iter().find(|k| k.name() == name)).ok_or_else(|| {
            Error::Invalid(format!(
                "unknown scenario '{name}'; expected one of fig2, fig3, fig4, custom or a full name such as fig2_blockade"
            ))
        })
    }

    fn family(self) -> Family {
        match self {
            ScenarioKind::Fig2Free | ScenarioKind::Fig2Blockade => Family::Fig2,
            ScenarioKind::Fig3Free | ScenarioKind::Fig3Blockade => Family::Fig3,
            ScenarioKind::Fig4Free | ScenarioKind::Fig4Blockade => Family::Fig4,
            ScenarioKind::Custom => Family::Custom,
        }
    }

    /// Whether the blockade beam is on. Custom runs use it when configured.
    pub fn blockade(self) -> bool {
        matches!(self, ScenarioKind::Fig2Blockade | ScenarioKind::Fig3Blockade | ScenarioKind::Fig4Blockade)
    }

    pub fn with_blockade(self, on: bool) -> Self {
        match (self.family(), on) {
            (Family::Fig2, false) => ScenarioKind::Fig2Free,
            (Family::Fig2, true) => ScenarioKind::Fig2Blockade,
            (Family::Fig3, false) => ScenarioKind::Fig3Free,
            (Family::Fig3, true) => ScenarioKind::Fig3Blockade,
            (Family::Fig4, false) => ScenarioKind::Fig4Free,
            (Family::Fig4, true) => ScenarioKind::Fig4Blockade,
            (Family::Custom, _) => ScenarioKind::Custom,
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Inclusive τ grid, seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TimeGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for TimeGrid {
    fn default() -> Self {
        Self { start: 0.0, stop: 600e-6, step: 20e-6 }
    }
}

impl TimeGrid {
    const MAX_POINTS: f64 = 1e6;

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !self.step.is_finite() {
            return Err(Error::Invalid(format!("time step must be > 0, got {}", self.step)));
        }
        if !(self.start >= 0.0) || !(self.stop >= self.start) || !self.stop.is_finite() {
            return Err(Error::Invalid(format!(
                "time grid needs 0 <= start <= stop, got {}..{}",
                self.start, self.stop
            )));
        }
        if (self.stop - self.start) / self.step > Self::MAX_POINTS {
            return Err(Error::Invalid("time grid has more than 10^6 points".into()));
        }
        Ok(())
    }

    /// `start, start + step, …`, ending exactly at `stop`.
    pub fn points(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let span = self.stop - self.start;
        let n = (span / self.step * (1.0 + 1e-12)).floor() as usize;
        let mut out: Vec<f64> = (0..=n).map(|k| self.start + k as f64 * self.step).collect();
        let last = *out.last().expect("at least one point");
        if self.stop - last > 1e-9 * self.step {
            out.push(self.stop);
        } else {
            *out.last_mut().expect("at least one point") = self.stop.max(self.start);
        }
        Ok(out)
    }
}

/// Noise model settings; ignored in ideal mode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    /// Infidelity of a lone BSB π pulse that sets the dephasing rate.
    pub pulse_infidelity_target: f64,
    /// Mean thermal phonon number after cooling.
    pub nbar: f64,
    /// Spin dephasing during pulses and the blockade drive.
    pub dephasing: bool,
    /// Thermal occupation of n = 1 in the initial state.
    pub thermal: bool,
    /// Overrides the calibrated pulse dephasing rate, 1/s.
    pub pulse_dephasing_rate: Option<f64>,
    /// Dephasing rate during a BSB blockade drive, 1/s; defaults to the pulse rate.
    pub bsb_blockade_rate: Option<f64>,
    /// Dephasing rate during an RSB blockade drive, 1/s; defaults to the pulse rate.
    pub rsb_blockade_rate: Option<f64>,
    pub readout: ReadoutError,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            pulse_infidelity_target: 0.12,
            nbar: 0.04,
            dephasing: true,
            thermal: true,
            pulse_dephasing_rate: None,
            bsb_blockade_rate: None,
            rsb_blockade_rate: None,
            readout: ReadoutError::default(),
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..0.5).contains(&self.pulse_infidelity_target) {
            return Err(Error::Invalid(format!(
                "pulse_infidelity_target must be in [0, 0.5), got {}",
                self.pulse_infidelity_target
            )));
        }
        if !(self.nbar >= 0.0) || !self.nbar.is_finite() {
            return Err(Error::Invalid(format!("nbar must be >= 0, got {}", self.nbar)));
        }
        for (name, r) in [
            ("pulse_dephasing_rate", self.pulse_dephasing_rate),
            ("bsb_blockade_rate", self.bsb_blockade_rate),
            ("rsb_blockade_rate", self.rsb_blockade_rate),
        ] {
            if let Some(r) = r {
                if !(r >= 0.0) || !r.is_finite() {
                    return Err(Error::Invalid(format!("{name} must be >= 0, got {r}")));
                }
            }
        }
        self.readout.validate()
    }
}

/// BSB Rabi probe used by the fig4 pipelines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub points: usize,
    /// Probe length in ground-state Rabi periods π/g.
    pub periods: f64,
    /// Fock levels fitted.
    pub n_levels: usize,
    pub decay_scaling: DecayScaling,
    /// Keep hopping on while the probe runs. Off by default so the trace
    /// follows the single-ion model the fit assumes.
    pub hopping: bool,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { points: 60, periods: 4.0, n_levels: 3, decay_scaling: DecayScaling::SqrtNPlusOne, hopping: false }
    }
}

impl ProbeConfig {
    pub fn times(&self, g: f64) -> Vec<f64> {
        let span = self.periods * PI / g;
        (0..self.points).map(|i| span * i as f64 / (self.points - 1) as f64).collect()
    }
}

/// Full description of one run. Field names are the config file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioKind,
    pub trap: TrapConfig,
    /// Defaults to two levels per ion with n_max = 4, or 5 when thermal
    /// preparation is on (the n = 1 tail reaches n = 4 after prep and mapping).
    pub hilbert: Option<HilbertSpec>,
    /// Blockade beam. Blockade scenarios fall back to a resonant BSB drive on
    /// site 1 at `pulse_g`.
    pub blockade: Option<DriveSpec>,
    /// Half-Rabi frequency of preparation and readout pulses, rad/s.
    pub pulse_g: f64,
    pub hop_during_pulses: bool,
    pub time: TimeGrid,
    /// Shots per τ point; 500 for fig2 and 50 otherwise when absent.
    pub shots: Option<u64>,
    pub seed: u64,
    pub noise: NoiseConfig,
    /// Closed-system run without shot sampling.
    pub ideal_mode: bool,
    pub probe: ProbeConfig,
    /// Initial `(level, n)` per ion for custom runs.
    pub custom_initial: Option<Vec<(Level, usize)>>,
    pub integrator: LindbladOptions,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            scenario: ScenarioKind::Fig2Free,
            trap: TrapConfig::default(),
            hilbert: None,
            blockade: None,
            pulse_g: DEFAULT_G,
            hop_during_pulses: true,
            time: TimeGrid::default(),
            shots: None,
            seed: 1,
            noise: NoiseConfig::default(),
            ideal_mode: false,
            probe: ProbeConfig::default(),
            custom_initial: None,
            integrator: LindbladOptions { rtol: 1e-6, atol: 1e-9, ..LindbladOptions::default() },
        }
    }
}

impl ScenarioConfig {
    pub fn for_scenario(kind: ScenarioKind) -> Self {
        Self { scenario: kind, ..Self::default() }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Fills in scenario-dependent defaults.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if c.shots.is_none() {
            c.shots = Some(if c.scenario.family() == Family::Fig2 { 500 } else { 50 });
        }
        if c.scenario.blockade() && c.blockade.is_none() {
            c.blockade = Some(DriveSpec::resonant(1, c.pulse_g, Sideband::Bsb));
        }
        if c.hilbert.is_none() {
            let thermal = !c.ideal_mode && c.noise.thermal && c.noise.nbar > 0.0;
            c.hilbert = Some(HilbertSpec {
                ion_count: c.trap.ion_count,
                n_max: if thermal { 5 } else { 4 },
                internal_levels: 2,
            });
        }
        c
    }

    /// State space in effect for this run.
    pub fn spec(&self) -> HilbertSpec {
        self.resolved().hilbert.expect("resolved")
    }

    pub fn shots(&self) -> u64 {
        self.resolved().shots.expect("resolved")
    }

    /// Blockade drive in effect for this run, if any.
    pub fn active_blockade(&self) -> Option<DriveSpec> {
        let c = self.resolved();
        match c.scenario {
            ScenarioKind::Custom => c.blockade,
            k if k.blockade() => c.blockade,
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.resolved();
        c.trap.validate()?;
        let h = c.spec();
        h.validate()?;
        if c.trap.ion_count != h.ion_count {
            return Err(Error::Invalid(format!(
                "trap has {} ions but the state space has {}",
                c.trap.ion_count, h.ion_count
            )));
        }
        let family = c.scenario.family();
        if family != Family::Custom && h.ion_count != 2 {
            return Err(Error::Invalid(format!("{} needs two ions", c.scenario)));
        }
        if family != Family::Custom && h.internal_levels != 2 {
            return Err(Error::Invalid(
                "hilbert.internal_levels must be 2; the shelving level is added for readout automatically".into(),
            ));
        }
        if family == Family::Fig2 && h.n_max < 2 {
            return Err(Error::Invalid("fig2 scenarios need n_max >= 2".into()));
        }
        if !(c.pulse_g > 0.0) || !c.pulse_g.is_finite() {
            return Err(Error::Invalid(format!("pulse_g must be positive, got {}", c.pulse_g)));
        }
        c.time.validate()?;
        if !c.ideal_mode && c.shots == Some(0) {
            return Err(Error::Invalid("shots must be at least 1 unless ideal_mode is set".into()));
        }
        c.noise.validate()?;
        if let Some(d) = c.active_blockade() {
            if d.site >= h.ion_count {
                return Err(Error::OutOfRange { what: "blockade site", index: d.site, limit: h.ion_count });
            }
            if !(d.g >= 0.0) || !d.g.is_finite() || !d.detuning.is_finite() || !d.phase.is_finite() {
                return Err(Error::Invalid(format!("invalid blockade drive {d:?}")));
            }
        }
        if family == Family::Fig4 {
            let p = &c.probe;
            if p.n_levels == 0 || p.n_levels > h.n_max + 1 || p.n_levels > 8 {
                return Err(Error::Invalid(format!(
                    "probe.n_levels must be in 1..=min(n_max + 1, 8), got {}",
                    p.n_levels
                )));
            }
            if p.points < 3 * p.n_levels || !(p.periods >= 1.0) || !p.periods.is_finite() {
                return Err(Error::Invalid(format!(
                    "probe needs at least {} points over at least one period",
                    3 * p.n_levels
                )));
            }
        }
        if family == Family::Custom {
            let init = c
                .custom_initial
                .as_ref()
                .ok_or_else(|| Error::Invalid("custom scenario needs custom_initial".into()))?;
            h.index(init)?;
        }
        Ok(())
    }
}

/// Tabular output of a run: one row per τ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    pub scenario: ScenarioKind,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Largest single-ion population at n_max seen during the run.
    pub cutoff_population: f64,
    pub warnings: Vec<String>,
}

impl TimeSeries {
    fn new(scenario: ScenarioKind, columns: Vec<String>) -> Self {
        Self { scenario, columns, rows: Vec::new(), cutoff_population: 0.0, warnings: Vec::new() }
    }

    fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i]).collect())
    }

    pub fn times(&self) -> Vec<f64> {
        self.column("time_s").expect("every series has a time column")
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).map_err(csv_err)?;
        for row in &self.rows {
            w.write_record(row.iter().map(|v| v.to_string())).map_err(csv_err)?;
        }
        finish_csv(w)
    }

    /// Writes the CSV and a `<path>.json` sidecar with the resolved config.
    pub fn write(&self, path: &Path, config: &ScenarioConfig) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        let sidecar = Sidecar {
            generator: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")),
            config: config.resolved(),
            columns: &self.columns,
            cutoff_population: self.cutoff_population,
            warnings: &self.warnings,
        };
        let json = serde_json::to_string_pretty(&sidecar).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(sidecar_path(path), json + "\n")?;
        Ok(())
    }
}

/// `<path>.json`
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[derive(Serialize)]
struct Sidecar<'a> {
    generator: &'static str,
    config: ScenarioConfig,
    columns: &'a [String],
    cutoff_population: f64,
    warnings: &'a [String],
}

/// Dephasing rates of the noise model, 1/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseRates {
    pub pulse: f64,
    pub bsb_blockade: f64,
    pub rsb_blockade: f64,
}

impl NoiseRates {
    pub const ZERO: NoiseRates = NoiseRates { pulse: 0.0, bsb_blockade: 0.0, rsb_blockade: 0.0 };

    fn blockade(&self, sideband: Sideband) -> f64 {
        match sideband {
            Sideband::Bsb => self.bsb_blockade,
            Sideband::Rsb => self.rsb_blockade,
        }
    }
}

/// L = |↑⟩⟨↑| on every ion at `rate`.
pub fn dephasing_channels(spec: &HilbertSpec, rate: f64) -> Result<Vec<NoiseChannel>> {
    if rate == 0.0 {
        return Ok(Vec::new());
    }
    (0..spec.ion_count)
        .map(|i| {
            Ok(NoiseChannel { collapse_operator: site_operator(spec, i, SiteOp::ProjectInternal(Level::Up))?, rate })
        })
        .collect()
}

/// Infidelity of a lone BSB π pulse on |↓,0⟩ of a single ion under spin
/// dephasing at `rate`.
pub fn pi_pulse_infidelity(rate: f64, g: f64) -> Result<f64> {
    let spec = HilbertSpec::new(1, 2, 2)?;
    let ctx = PulseContext::new(&spec, &ChainGeometry::uncoupled(1), false)?;
    let seg = ctx.segment(&bsb(0, PI, 0.0, g))?;
    let psi = product_state(&spec, &[(Level::Down, 0)])?;
    let target = spec.index(&[(Level::Up, 1)])?;
    let channels = dephasing_channels(&spec, rate)?;
    let opts = LindbladOptions { rtol: 1e-11, atol: 1e-13, ..LindbladOptions::default() };
    let rho = lindblad_samples(&seg, &channels, &psi.to_density(), &[seg.duration], &opts)?;
    Ok(1.0 - rho[0].basis_populations()[target])
}

/// Dephasing rate whose lone BSB π pulse has the target infidelity.
pub fn calibrate_dephasing_rate(target: f64, g: f64) -> Result<f64> {
    if !(0.0..0.5).contains(&target) {
        return Err(Error::Invalid(format!("target infidelity must be in [0, 0.5), got {target}")));
    }
    if !(g > 0.0) || !g.is_finite() {
        return Err(Error::Invalid(format!("g must be positive, got {g}")));
    }
    if target == 0.0 {
        return Ok(0.0);
    }
    const TOL: f64 = 1e-4;
    let mut lo = 0.0;
    let mut hi = g;
    let mut f_hi = pi_pulse_infidelity(hi, g)?;
    let mut doublings = 0;
    while f_hi < target {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 40 {
            return Err(Error::Unreachable(format!("no dephasing rate reaches π-pulse infidelity {target}")));
        }
        f_hi = pi_pulse_infidelity(hi, g)?;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f = pi_pulse_infidelity(mid, g)?;
        if (f - target).abs() <= TOL {
            return Ok(mid);
        }
        if f < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            return Ok(mid);
        }
    }
    Err(Error::NoConvergence { what: "noise calibration", iterations: 200 })
}

/// Rates for pulses and both blockade sidebands; blockade rates default to
/// the pulse rate since only the pulse infidelity is calibrated.
pub fn calibrate_noise(target_infidelity: f64, g: f64) -> Result<NoiseRates> {
    let pulse = calibrate_dephasing_rate(target_infidelity, g)?;
    Ok(NoiseRates { pulse, bsb_blockade: pulse, rsb_blockade: pulse })
}

/// Leakage of one blockade strength in a sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub g: f64,
    pub g_over_kappa: f64,
    pub mean_leakage: f64,
    pub max_leakage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub scenario: ScenarioKind,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["g_rad_s", "g_over_kappa", "mean_leakage", "max_leakage"]).map_err(csv_err)?;
        for r in &self.rows {
            w.write_record([r.g, r.g_over_kappa, r.mean_leakage, r.max_leakage].map(|v| v.to_string()))
                .map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

/// Leakage 1 − P(initial Fock configuration) over the τ grid for each
/// blockade strength, in input order. g = 0 is free hopping. Run k uses seed
/// `seed + k`.
pub fn sweep_blockade(config: &ScenarioConfig, g_values: &[f64]) -> Result<SweepTable> {
    if g_values.len() < 2 {
        return Err(Error::Invalid("a sweep needs at least two g values".into()));
    }
    let base = config.resolved();
    let (kind, column) = match base.scenario.family() {
        Family::Fig2 => (ScenarioKind::Fig2Blockade, "fock_P20"),
        Family::Fig3 | Family::Fig4 => (ScenarioKind::Fig3Blockade, "fock_P11"),
        Family::Custom => return Err(Error::Invalid("sweeps run on fig2 or fig3 scenarios".into())),
    };
    let template = base.active_blockade().unwrap_or(DriveSpec::resonant(1, base.pulse_g, Sideband::Bsb));
    let kappa = ChainGeometry::from_trap(&base.trap)?.kappa_01();
    let mut rows = Vec::with_capacity(g_values.len());
    for (k, &g) in g_values.iter().enumerate() {
        if !(g >= 0.0) || !g.is_finite() {
            return Err(Error::Invalid(format!("sweep g values must be >= 0, got {g}")));
        }
        let mut c = base.clone();
        c.seed = base.seed.wrapping_add(k as u64);
        if g == 0.0 {
            c.scenario = kind.with_blockade(false);
            c.blockade = None;
        } else {
            c.scenario = kind;
            c.blockade = Some(DriveSpec { g, ..template });
        }
        let series = run_scenario(&c)?;
        let p = series.column(column).expect("pipeline emits its Fock columns");
        let leak: Vec<f64> = p.iter().map(|v| (1.0 - v).max(0.0)).collect();
        rows.push(SweepRow {
            g,
            g_over_kappa: g / kappa,
            mean_leakage: leak.iter().sum::<f64>() / leak.len() as f64,
            max_leakage: leak.iter().copied().fold(0.0, f64::max),
        });
    }
    Ok(SweepTable { scenario: kind, rows })
}

/// Runs the configured pipeline over the τ grid.
pub fn run_scenario(config: &ScenarioConfig) -> Result<TimeSeries> {
    config.validate()?;
    let cfg = config.resolved();
    let sim = Simulation::new(&cfg)?;
    let mut series = match cfg.scenario.family() {
        Family::Fig2 => sim.fig2()?,
        Family::Fig3 => sim.fig3()?,
        Family::Fig4 => sim.fig4()?,
        Family::Custom => sim.custom()?,
    };
    series.cutoff_population = sim.cutoff.get();
    if series.cutoff_population > CUTOFF_WARNING {
        let msg =
            format!("population at the Fock cutoff reached {:.3e}; results may be truncated", series.cutoff_population);
        log::warn!("{msg}");
        series.warnings.push(msg);
    }
    Ok(series)
}

/// State of the dynamics after the τ stage, with its cutoff bookkeeping.
struct Simulation {
    cfg: ScenarioConfig,
    spec: HilbertSpec,
    ctx: PulseContext,
    rates: NoiseRates,
    noisy: bool,
    times: Vec<f64>,
    cutoff: std::cell::Cell<f64>,
}

impl Simulation {
    fn new(cfg: &ScenarioConfig) -> Result<Self> {
        let geometry = ChainGeometry::from_trap(&cfg.trap)?;
        let spec = cfg.spec();
        let ctx = PulseContext::new(&spec, &geometry, cfg.hop_during_pulses)?;
        let noisy = !cfg.ideal_mode;
        let rates = if noisy && cfg.noise.dephasing {
            let pulse = match cfg.noise.pulse_dephasing_rate {
                Some(r) => r,
                None => calibrate_dephasing_rate(cfg.noise.pulse_infidelity_target, cfg.pulse_g)?,
            };
            NoiseRates {
                pulse,
                bsb_blockade: cfg.noise.bsb_blockade_rate.unwrap_or(pulse),
                rsb_blockade: cfg.noise.rsb_blockade_rate.unwrap_or(pulse),
            }
        } else {
            NoiseRates::ZERO
        };
        Ok(Self {
            cfg: cfg.clone(),
            spec,
            ctx,
            rates,
            noisy,
            times: cfg.time.points()?,
            cutoff: std::cell::Cell::new(0.0),
        })
    }

    fn g(&self) -> f64 {
        self.cfg.pulse_g
    }

    fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.cfg.seed)
    }

    fn shots(&self) -> u64 {
        self.cfg.shots.expect("resolved config")
    }

    fn track_cutoff<S: BasisPopulations>(&self, spec: &HilbertSpec, state: &S) -> Result<()> {
        self.check_cutoff(cutoff_population(spec, state))
    }

    fn check_cutoff(&self, c: f64) -> Result<()> {
        if c > CUTOFF_ERROR {
            return Err(Error::Truncation { population: c, limit: CUTOFF_ERROR });
        }
        self.cutoff.set(self.cutoff.get().max(c));
        Ok(())
    }

    /// |↓0,↓0,…⟩, or its truncated thermal mixture over n ∈ {0, 1} per ion.
    fn ground_state(&self) -> Result<SimState> {
        let n_ions = self.spec.ion_count;
        let nbar = self.cfg.noise.nbar;
        if !(self.noisy && self.cfg.noise.thermal && nbar > 0.0) {
            return Ok(SimState::Pure(product_state(&self.spec, &vec![(Level::Down, 0); n_ions])?));
        }
        let r = nbar / (1.0 + nbar);
        let p1 = r / (1.0 + r);
        let mut weights = Vec::new();
        let mut states = Vec::new();
        for mask in 0..(1usize << n_ions) {
            let labels: Vec<(Level, usize)> = (0..n_ions).map(|i| (Level::Down, (mask >> i) & 1)).collect();
            let ones = mask.count_ones() as i32;
            weights.push(p1.powi(ones) * (1.0 - p1).powi(n_ions as i32 - ones));
            states.push(product_state(&self.spec, &labels)?);
        }
        Ok(SimState::Mixed(DensityOperator::mixture(&weights, &states)?))
    }

    /// Applies a pulse sequence, with pulse dephasing when noisy.
    fn apply(
        &self,
        ctx: &PulseContext,
        seq: &PulseSequence,
        state: &SimState,
        unitary: Option<&Operator>,
    ) -> Result<SimState> {
        if self.rates.pulse == 0.0 {
            let u = match unitary {
                Some(u) => u.clone(),
                None => ctx.unitary(seq)?,
            };
            return Ok(state.transform(&u));
        }
        let channels = dephasing_channels(&ctx.spec, self.rates.pulse)?;
        let out = run_schedule(&ctx.spec, &ctx.segments(seq)?, &channels, state, &[], &self.cfg.integrator)?;
        Ok(out.final_state().clone())
    }

    fn prepared(&self, experiment: Experiment) -> Result<SimState> {
        let seq = prep_sequence(experiment, &self.spec, &self.ctx.geometry, self.g())?;
        self.apply(&self.ctx, &seq, &self.ground_state()?, None)
    }

    /// States after each τ of the grid.
    fn hop_stage(&self, start: &SimState) -> Result<Vec<SimState>> {
        let drive = self.cfg.active_blockade().filter(|d| d.g > 0.0 || d.detuning != 0.0);
        let drives: Vec<DriveSpec> = drive.into_iter().collect();
        let h = blockade_hamiltonian(&self.spec, &self.ctx.geometry, &drives)?;
        let rate = drive.map_or(0.0, |d| self.rates.blockade(d.sideband));
        let out = if rate > 0.0 {
            let stop = *self.times.last().expect("nonempty grid");
            let seg = Segment::new(h, stop);
            let channels = dephasing_channels(&self.spec, rate)?;
            lindblad_samples(&seg, &channels, &start.to_density(), &self.times, &self.cfg.integrator)?
                .into_iter()
                .map(SimState::Mixed)
                .collect()
        } else {
            let eig = HermitianEigen::new(&h)?;
            self.times.iter().map(|&t| start.evolve_eigen(&eig, t)).collect()
        };
        for s in &out {
            self.track_cutoff(&self.spec, s)?;
        }
        Ok(out)
    }

    fn fock_pair(&self, state: &SimState) -> Result<[f64; 3]> {
        let table = joint_fock(&self.spec, state)?;
        Ok([table[2][0], table[1][1], table[0][2]])
    }

    fn fig2(&self) -> Result<TimeSeries> {
        let spec3 = self.spec.with_levels(3);
        let ctx3 = PulseContext::new(&spec3, &self.ctx.geometry, self.cfg.hop_during_pulses)?;
        let map = pnr_map_all(&spec3, self.g())?;
        let embed = level_embedding(&self.spec, &spec3)?;
        // All but the last joint-class projector (the channel preserves the
        // trace), then the any-ion-at-cutoff projector, pulled back through
        // the mapping once and read against every τ.
        let n_keys = 3usize.pow(spec3.ion_count as u32);
        let basis: Vec<(usize, bool)> = (0..spec3.dim())
            .map(|idx| {
                let labels = spec3.labels(idx)?;
                let k = labels.iter().fold(0, |acc, &(lv, _)| acc * 3 + PhononClass::from_level(lv.index()).index());
                Ok((k, labels.iter().any(|&(_, n)| n == spec3.n_max)))
            })
            .collect::<Result<_>>()?;
        let observables: Vec<Operator> = (0..n_keys)
            .map(|o| {
                let d = basis.iter().map(|&(k, at_cut)| {
                    let hit = if o + 1 < n_keys { k == o } else { at_cut };
                    C64::from(if hit { 1.0 } else { 0.0 })
                });
                Operator::from_matrix(DMatrix::from_diagonal(&DVector::from_iterator(basis.len(), d)))
            })
            .collect();
        let channels = dephasing_channels(&spec3, self.rates.pulse)?;
        let pulled = adjoint_schedule(&spec3, &ctx3.segments(&map)?, &channels, &observables, &self.cfg.integrator)?;

        let mut cols: Vec<&str> = vec!["time_s", "P20", "P11", "P02"];
        if self.noisy {
            cols.extend(["P20_shots", "P20_sigma", "P11_shots", "P11_sigma", "P02_shots", "P02_sigma"]);
        }
        cols.extend(["fock_P20", "fock_P11", "fock_P02", "outside_model"]);
        let mut series = TimeSeries::new(self.cfg.scenario, cols.iter().map(|s| s.to_string()).collect());

        let start = self.prepared(Experiment::Fig2)?;
        let mut rng = self.rng();
        let keys = [
            key(&[PhononClass::N2, PhononClass::N0]),
            key(&[PhononClass::N1, PhononClass::N1]),
            key(&[PhononClass::N0, PhononClass::N2]),
        ];
        for (tau, state) in self.times.iter().zip(self.hop_stage(&start)?) {
            let embedded = embed_state(&embed, spec3.dim(), &state);
            let read: Vec<f64> = pulled.iter().map(|a| expectation(a, &embedded)).collect();
            let mut probs: Vec<f64> = read[..n_keys - 1].iter().map(|p| p.clamp(0.0, 1.0)).collect();
            probs.push((1.0 - probs.iter().sum::<f64>()).max(0.0));
            self.check_cutoff(read[n_keys - 1])?;
            let mut row = vec![*tau];
            row.extend(keys.iter().map(|&k| probs[k]));
            if self.noisy {
                let out = sample_readout(&probs, 2, self.shots(), &self.cfg.noise.readout, &mut rng)?;
                for &k in &keys {
                    let f = out.joint[k] as f64 / out.shots as f64;
                    row.extend([f, binomial_sigma(f, out.shots)]);
                }
            }
            let fock = joint_fock(&self.spec, &state)?;
            let inside = modeled_population(&self.spec, &state);
            row.extend([fock[2][0], fock[1][1], fock[0][2], (1.0 - inside).max(0.0)]);
            series.push(row);
        }
        Ok(series)
    }

    fn fig3(&self) -> Result<TimeSeries> {
        let readout = PulseSequence::new().parallel(vec![bsb(0, PI, 0.0, self.g()), bsb(1, PI, 0.0, self.g())]);
        let u = if self.rates.pulse == 0.0 { Some(self.ctx.unitary(&readout)?) } else { None };
        let mut cols: Vec<&str> = vec!["time_s", "p_down_ion1", "p_down_ion2"];
        if self.noisy {
            cols.extend(["p_down_ion1_shots", "p_down_ion1_sigma", "p_down_ion2_shots", "p_down_ion2_sigma"]);
        }
        cols.extend(["fock_P20", "fock_P11", "fock_P02"]);
        let mut series = TimeSeries::new(self.cfg.scenario, cols.iter().map(|s| s.to_string()).collect());

        let start = self.prepared(Experiment::Fig3)?;
        let mut rng = self.rng();
        for (tau, state) in self.times.iter().zip(self.hop_stage(&start)?) {
            let after = self.apply(&self.ctx, &readout, &state, u.as_ref())?;
            self.track_cutoff(&self.spec, &after)?;
            let p = [spin_down_probability(&self.spec, &after, 0)?, spin_down_probability(&self.spec, &after, 1)?];
            let mut row = vec![*tau, p[0], p[1]];
            if self.noisy {
                for v in p {
                    let (f, sigma) = sample_fraction(v, self.shots(), &mut rng)?;
                    row.extend([f, sigma]);
                }
            }
            row.extend(self.fock_pair(&state)?);
            series.push(row);
        }
        Ok(series)
    }

    fn fig4(&self) -> Result<TimeSeries> {
        let g = self.g();
        let flip = PulseSequence::new().parallel(vec![carrier(0, PI, 0.0, g), carrier(1, PI, 0.0, g)]);
        let u = if self.rates.pulse == 0.0 { Some(self.ctx.unitary(&flip)?) } else { None };
        let probe = &self.cfg.probe;
        let probe_times = probe.times(g);
        let probe_ctx = PulseContext::new(&self.spec, &self.ctx.geometry, probe.hopping)?;
        let probe_seg = probe_ctx.segment(&bsb(0, PI, 0.0, g))?;
        let probe_eig = HermitianEigen::new(&probe_seg.hamiltonian)?;
        let probe_channels = dephasing_channels(&self.spec, self.rates.pulse)?;
        let fit_opts = RabiFitOptions { g_hint: Some(g), scaling: probe.decay_scaling, ..Default::default() };
        let n = probe.n_levels;

        let mut cols: Vec<String> = vec!["time_s".into()];
        cols.extend((0..n).map(|k| format!("p{k}")));
        cols.extend(["fit_g".into(), "fit_gamma".into(), "fit_rms".into(), "low_confidence".into()]);
        if self.noisy {
            cols.extend((0..n).map(|k| format!("p{k}_shots")));
            cols.extend(["shots_fit_rms".into(), "shots_low_confidence".into()]);
        }
        cols.extend((0..n).map(|k| format!("fock_p{k}")));
        let mut series = TimeSeries::new(self.cfg.scenario, cols);

        let start = self.prepared(Experiment::Fig3)?;
        let mut rng = self.rng();
        for (tau, state) in self.times.iter().zip(self.hop_stage(&start)?) {
            let flipped = self.apply(&self.ctx, &flip, &state, u.as_ref())?;
            let p_down: Vec<f64> = if probe_channels.is_empty() {
                probe_times
                    .iter()
                    .map(|&t| spin_down_probability(&self.spec, &flipped.evolve_eigen(&probe_eig, t), 0))
                    .collect::<Result<_>>()?
            } else {
                let seg = Segment::new(probe_seg.hamiltonian.clone(), *probe_times.last().expect("probe points"));
                lindblad_samples(&seg, &probe_channels, &flipped.to_density(), &probe_times, &self.cfg.integrator)?
                    .iter()
                    .map(|r| spin_down_probability(&self.spec, r, 0))
                    .collect::<Result<_>>()?
            };
            let trace = RabiTrace::exact(probe_times.clone(), p_down.iter().map(|p| p.clamp(0.0, 1.0)).collect())?;
            let fit = rabi_fit(&trace, n, &fit_opts)?;
            let mut row = vec![*tau];
            row.extend(fit.distribution.p.iter().copied());
            row.extend([fit.g, fit.gamma, fit.residual_rms, f64::from(u8::from(fit.low_confidence))]);
            if self.noisy {
                let sampled = trace.sample(self.shots(), &mut rng)?;
                let sfit = rabi_fit(&sampled, n, &fit_opts)?;
                row.extend(sfit.distribution.p.iter().copied());
                row.extend([sfit.residual_rms, f64::from(u8::from(sfit.low_confidence))]);
            }
            let fock = partial_populations(&self.spec, &flipped, 0)?.fock();
            row.extend((0..n).map(|k| fock.get(k).copied().unwrap_or(0.0)));
            series.push(row);
        }
        Ok(series)
    }

    fn custom(&self) -> Result<TimeSeries> {
        let init = self.cfg.custom_initial.as_ref().expect("validated");
        let start = SimState::Pure(product_state(&self.spec, init)?);
        let n_ions = self.spec.ion_count;
        let mut cols = vec!["time_s".to_string()];
        cols.extend((1..=n_ions).map(|i| format!("p_down_ion{i}")));
        cols.extend((1..=n_ions).map(|i| format!("mean_n_ion{i}")));
        let mut series = TimeSeries::new(self.cfg.scenario, cols);
        for (tau, state) in self.times.iter().zip(self.hop_stage(&start)?) {
            let mut row = vec![*tau];
            let tables: Vec<_> =
                (0..n_ions).map(|i| partial_populations(&self.spec, &state, i)).collect::<Result<_>>()?;
            row.extend(tables.iter().map(|t| t.level(Level::Down)));
            row.extend(tables.iter().map(|t| t.fock().iter().enumerate().map(|(n, p)| n as f64 * p).sum::<f64>()));
            series.push(row);
        }
        Ok(series)
    }
}

/// Re tr(A ρ) for a Hermitian observable.
fn expectation(a: &Operator, state: &SimState) -> f64 {
    match state {
        SimState::Pure(psi) => a.expectation(psi).re,
        SimState::Mixed(rho) => a.expectation_mixed(rho).re,
    }
}

/// Binomial estimate of `p` from `shots` shots and its standard error.
fn sample_fraction<R: rand::Rng>(p: f64, shots: u64, rng: &mut R) -> Result<(f64, f64)> {
    let k = Binomial::new(shots, p.clamp(0.0, 1.0)).map_err(|e| Error::Invalid(e.to_string()))?.sample(rng);
    let f = k as f64 / shots as f64;
    Ok((f, binomial_sigma(f, shots)))
}

fn key(classes: &[PhononClass]) -> usize {
    classes.iter().fold(0, |acc, c| acc * 3 + c.index())
}

/// Joint Fock populations of a two-ion state, `[n0][n1]`.
pub fn joint_fock<S: BasisPopulations>(spec: &HilbertSpec, state: &S) -> Result<Vec<Vec<f64>>> {
    if spec.ion_count != 2 {
        return Err(Error::Invalid("joint Fock table needs two ions".into()));
    }
    if state.dim() != spec.dim() {
        return Err(Error::Dimension { expected: spec.dim(), got: state.dim() });
    }
    let f = spec.fock_dim();
    let mut t = vec![vec![0.0; f]; f];
    for (idx, p) in state.basis_populations().into_iter().enumerate() {
        let l = spec.labels(idx)?;
        t[l[0].1][l[1].1] += p;
    }
    Ok(t)
}

/// Population of the readout model's subspace {|↑,a⟩|↑,b⟩ : a, b ≤ 2}.
fn modeled_population<S: BasisPopulations>(spec: &HilbertSpec, state: &S) -> f64 {
    let pops = state.basis_populations();
    let top = spec.n_max.min(2);
    let mut sum = 0.0;
    for a in 0..=top {
        for b in 0..=top {
            if let Ok(i) = spec.index(&[(Level::Up, a), (Level::Up, b)]) {
                sum += pops[i];
            }
        }
    }
    sum
}

/// Index of every basis state of `from` inside the larger space `to`.
fn level_embedding(from: &HilbertSpec, to: &HilbertSpec) -> Result<Vec<usize>> {
    (0..from.dim()).map(|i| to.index(&from.labels(i)?)).collect()
}

fn embed_state(map: &[usize], dim: usize, state: &SimState) -> SimState {
    match state {
        SimState::Pure(s) => {
            let mut v = DVector::<C64>::zeros(dim);
            for (i, &j) in map.iter().enumerate() {
                v[j] = s.vector()[i];
            }
            SimState::Pure(StateVector::from_vector_unchecked(v))
        }
        SimState::Mixed(r) => {
            let mut m = DMatrix::<C64>::zeros(dim, dim);
            for (a, &ja) in map.iter().enumerate() {
                for (b, &jb) in map.iter().enumerate() {
                    m[(ja, jb)] = r.matrix()[(a, b)];
                }
            }
            SimState::Mixed(DensityOperator::from_matrix_unchecked(m))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kappa() -> f64 {
        ChainGeometry::from_trap(&TrapConfig::default()).unwrap().kappa_01()
    }

    fn ideal(kind: ScenarioKind) -> ScenarioConfig {
        ScenarioConfig { ideal_mode: true, ..ScenarioConfig::for_scenario(kind) }
    }

    fn grid(stop: f64, step: f64) -> TimeGrid {
        TimeGrid { start: 0.0, stop, step }
    }

    fn max_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn time_grid_is_inclusive() {
        let t = TimeGrid::default().points().unwrap();
        assert_eq!(t.len(), 31);
        assert_eq!(t[0], 0.0);
        assert!((t[30] - 600e-6).abs() < 1e-18);
        assert!(grid(1e-4, 0.0).validate().is_err());
        assert!(TimeGrid { start: 2e-4, stop: 1e-4, step: 1e-5 }.validate().is_err());
        assert_eq!(grid(0.0, 1e-5).points().unwrap(), vec![0.0]);
    }

    #[test]
    fn shot_defaults_follow_family() {
        assert_eq!(ScenarioConfig::for_scenario(ScenarioKind::Fig2Free).shots(), 500);
        assert_eq!(ScenarioConfig::for_scenario(ScenarioKind::Fig2Blockade).shots(), 500);
        assert_eq!(ScenarioConfig::for_scenario(ScenarioKind::Fig3Free).shots(), 50);
        assert_eq!(ScenarioConfig::for_scenario(ScenarioKind::Fig4Blockade).shots(), 50);
        let c = ScenarioConfig { shots: Some(7), ..ScenarioConfig::default() };
        assert_eq!(c.shots(), 7);
    }

    #[test]
    fn blockade_defaults_to_bsb_on_second_ion() {
        let c = ScenarioConfig::for_scenario(ScenarioKind::Fig3Blockade);
        let d = c.active_blockade().unwrap();
        assert_eq!((d.site, d.sideband, d.g), (1, Sideband::Bsb, DEFAULT_G));
        assert!(ScenarioConfig::for_scenario(ScenarioKind::Fig3Free).active_blockade().is_none());
        let free_with_drive =
            ScenarioConfig { blockade: Some(d), ..ScenarioConfig::for_scenario(ScenarioKind::Fig2Free) };
        assert!(free_with_drive.active_blockade().is_none());
    }

    #[test]
    fn cutoff_default_tracks_thermal_prep() {
        assert_eq!(ScenarioConfig::default().spec().n_max, 5);
        assert_eq!(ideal(ScenarioKind::Fig2Free).spec().n_max, 4);
        let mut c = ScenarioConfig::default();
        c.noise.thermal = false;
        assert_eq!(c.spec().n_max, 4);
        c.hilbert = Some(HilbertSpec { ion_count: 2, n_max: 3, internal_levels: 2 });
        assert_eq!(c.spec().n_max, 3);
    }

    #[test]
    fn scenario_names_parse() {
        for k in ScenarioKind::ALL {
            assert_eq!(ScenarioKind::parse(k.name()).unwrap(), k);
        }
        assert_eq!(ScenarioKind::parse("fig3").unwrap(), ScenarioKind::Fig3Free);
        assert_eq!(ScenarioKind::Fig3Free.with_blockade(true), ScenarioKind::Fig3Blockade);
        assert!(ScenarioKind::parse("fig5").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ScenarioConfig::for_scenario(ScenarioKind::Fig2Blockade);
        c.blockade = Some(DriveSpec { site: 1, g: 1.5e5, detuning: 200.0, sideband: Sideband::Rsb, phase: 0.25 });
        c.time = grid(3e-4, 1e-5);
        c.shots = Some(123);
        c.seed = 99;
        c.noise.readout = ReadoutError { stage_one: 0.01, stage_two: 0.02 };
        c.hilbert = Some(HilbertSpec { ion_count: 2, n_max: 6, internal_levels: 2 });
        let text = c.to_toml().unwrap();
        assert_eq!(ScenarioConfig::from_toml(&text).unwrap(), c);
        let resolved = c.resolved();
        assert_eq!(ScenarioConfig::from_toml(&resolved.to_toml().unwrap()).unwrap(), resolved);
    }

    #[test]
    fn partial_toml_uses_defaults() {
        let c = ScenarioConfig::from_toml("scenario = \"fig3_blockade\"\nseed = 5\n[time]\nstop = 1e-4\n").unwrap();
        assert_eq!(c.scenario, ScenarioKind::Fig3Blockade);
        assert_eq!(c.seed, 5);
        assert_eq!(c.time.step, 20e-6);
        assert_eq!(c.time.stop, 1e-4);
        assert!(ScenarioConfig::from_toml("sede = 5\n").is_err());
        assert!(ScenarioConfig::from_toml("[noise]\nnbar = \"x\"\n").is_err());
    }

    #[test]
    fn validation_rejects_bad_configs() {
        let ok = ScenarioConfig::default();
        ok.validate().unwrap();
        let bad = [
            ScenarioConfig { time: grid(1e-4, -1e-6), ..ok.clone() },
            ScenarioConfig { shots: Some(0), ..ok.clone() },
            ScenarioConfig { pulse_g: 0.0, ..ok.clone() },
            ScenarioConfig { hilbert: Some(HilbertSpec { ion_count: 2, n_max: 4, internal_levels: 3 }), ..ok.clone() },
            ScenarioConfig { hilbert: Some(HilbertSpec { ion_count: 2, n_max: 1, internal_levels: 2 }), ..ok.clone() },
            ScenarioConfig {
                trap: TrapConfig { ion_count: 3, ..TrapConfig::default() },
                hilbert: Some(HilbertSpec { ion_count: 3, n_max: 2, internal_levels: 2 }),
                ..ok.clone()
            },
            ScenarioConfig { hilbert: Some(HilbertSpec { ion_count: 3, n_max: 4, internal_levels: 2 }), ..ok.clone() },
            ScenarioConfig {
                blockade: Some(DriveSpec::resonant(2, 1e5, Sideband::Bsb)),
                ..ScenarioConfig::for_scenario(ScenarioKind::Fig2Blockade)
            },
            ScenarioConfig::for_scenario(ScenarioKind::Custom),
            ScenarioConfig {
                probe: ProbeConfig { points: 5, ..ProbeConfig::default() },
                ..ScenarioConfig::for_scenario(ScenarioKind::Fig4Free)
            },
        ];
        for (i, c) in bad.iter().enumerate() {
            assert!(c.validate().is_err(), "case {i} accepted");
            assert!(matches!(run_scenario(c), Err(e) if !e.is_numerical()), "case {i}");
        }
        let zero_shots_ideal = ScenarioConfig { shots: Some(0), ..ideal(ScenarioKind::Fig2Free) };
        zero_shots_ideal.validate().unwrap();
    }

    #[test]
    fn hom_dip_in_fig3_free() {
        let k = kappa();
        let quarter = PI / (2.0 * k);
        let cfg = ScenarioConfig {
            hop_during_pulses: false,
            time: grid(4.0 * quarter, quarter / 8.0),
            ..ideal(ScenarioKind::Fig3Free)
        };
        let s = run_scenario(&cfg).unwrap();
        let t = s.times();
        assert_eq!(t.len(), 33);
        let s2 = (PI / 2f64.sqrt()).sin().powi(2);
        let p11: Vec<f64> = t.iter().map(|&x| (k * x).cos().powi(2)).collect();
        let pd: Vec<f64> = p11.iter().map(|&c| c + 0.5 * (1.0 - c) * s2).collect();
        assert!(max_diff(&s.column("fock_P11").unwrap(), &p11) < 1e-9);
        assert!(max_diff(&s.column("p_down_ion1").unwrap(), &pd) < 1e-9);
        assert!(max_diff(&s.column("p_down_ion2").unwrap(), &pd) < 1e-9);
        // κτ = π/2: the dip
        assert!(s.column("fock_P11").unwrap()[8] < 1e-12);
        assert_eq!(s.columns, ["time_s", "p_down_ion1", "p_down_ion2", "fock_P20", "fock_P11", "fock_P02"]);
    }

    #[test]
    fn fig3_free_is_ion_symmetric_with_pulse_hopping() {
        let s = run_scenario(&ideal(ScenarioKind::Fig3Free)).unwrap();
        let (a, b) = (s.column("p_down_ion1").unwrap(), s.column("p_down_ion2").unwrap());
        assert!(max_diff(&a, &b) < 1e-9);
        assert!(max_diff(&s.column("fock_P20").unwrap(), &s.column("fock_P02").unwrap()) < 1e-9);
    }

    fn variance(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
    }

    #[test]
    fn fig3_blockade_holds_ion1_while_ion2_flops() {
        for factor in [10.0, 20.0] {
            let cfg = ScenarioConfig {
                blockade: Some(DriveSpec::resonant(1, factor * kappa(), Sideband::Bsb)),
                time: grid(600e-6, 5e-6),
                ..ideal(ScenarioKind::Fig3Blockade)
            };
            let s = run_scenario(&cfg).unwrap();
            let (v1, v2) = (variance(&s.column("p_down_ion1").unwrap()), variance(&s.column("p_down_ion2").unwrap()));
            assert!(v1 < 0.1 * v2, "g = {factor}κ: var1 {v1}, var2 {v2}");
        }
    }

    #[test]
    fn fig2_starts_in_20_without_pulse_hopping() {
        let cfg = ScenarioConfig { hop_during_pulses: false, ..ideal(ScenarioKind::Fig2Free) };
        let s = run_scenario(&cfg).unwrap();
        assert!((s.column("P20").unwrap()[0] - 1.0).abs() < 1e-9);
        assert!((s.column("fock_P20").unwrap()[0] - 1.0).abs() < 1e-9);
        let (a, b, c) = (s.column("P20").unwrap(), s.column("P11").unwrap(), s.column("P02").unwrap());
        for i in 0..a.len() {
            assert!((a[i] + b[i] + c[i] - 1.0).abs() < 1e-6, "row {i}");
            for v in [a[i], b[i], c[i]] {
                assert!((-1e-12..=1.0 + 1e-9).contains(&v));
            }
        }
        // two-phonon exchange: P(2,0) = cos⁴(κτ/2)
        let k = kappa();
        let want: Vec<f64> = s.times().iter().map(|&t| (k * t / 2.0).cos().powi(4)).collect();
        assert!(max_diff(&a, &want) < 1e-9);
    }

    #[test]
    fn fig2_with_pulse_hopping_starts_below_one() {
        let cfg = ScenarioConfig { time: grid(0.0, 1e-5), ..ideal(ScenarioKind::Fig2Free) };
        let s = run_scenario(&cfg).unwrap();
        let p = s.column("P20").unwrap()[0];
        assert!(p < 1.0 && p > 0.5, "{p}");
        assert!(s.column("fock_P20").unwrap()[0] < 1.0);
    }

    #[test]
    fn fig2_blockade_keeps_20_at_ten_kappa() {
        let k = kappa();
        let cfg = ScenarioConfig {
            hop_during_pulses: false,
            blockade: Some(DriveSpec::resonant(1, 10.0 * k, Sideband::Bsb)),
            time: grid(2.0 * PI / k, 2.0 * PI / k / 60.0),
            ..ideal(ScenarioKind::Fig2Blockade)
        };
        let s = run_scenario(&cfg).unwrap();
        let min = s.column("P20").unwrap().into_iter().fold(1.0, f64::min);
        assert!(min >= 0.9, "{min}");
    }

    fn sweep_config() -> ScenarioConfig {
        ScenarioConfig { hop_during_pulses: false, ..ideal(ScenarioKind::Fig2Free) }
    }

    #[test]
    fn sweep_leakage_falls_with_g() {
        let k = kappa();
        let g: Vec<f64> = [0.0, 2.0, 5.0, 10.0, 20.0].iter().map(|f| f * k).collect();
        let t = sweep_blockade(&sweep_config(), &g).unwrap();
        let max: Vec<f64> = t.rows.iter().map(|r| r.max_leakage).collect();
        assert!(max[0] > 0.99, "free leakage {}", max[0]);
        for w in max.windows(2) {
            assert!(w[1] < w[0], "{max:?}");
        }
        assert!((t.rows[3].g_over_kappa - 10.0).abs() < 1e-12);
        let mean: Vec<f64> = t.rows.iter().map(|r| r.mean_leakage).collect();
        assert!(mean[0] > mean[4]);
        let csv = t.to_csv().unwrap();
        assert!(csv.starts_with("g_rad_s,g_over_kappa,mean_leakage,max_leakage\n"));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn doubling_g_cuts_leakage_about_fourfold() {
        let k = kappa();
        let t = sweep_blockade(&sweep_config(), &[10.0 * k, 20.0 * k, 40.0 * k]).unwrap();
        for w in t.rows.windows(2) {
            let ratio = w[0].max_leakage / w[1].max_leakage;
            assert!((2.0..=6.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn sweep_needs_two_values() {
        assert!(sweep_blockade(&sweep_config(), &[1e5]).is_err());
        assert!(sweep_blockade(&sweep_config(), &[1e5, -1.0]).is_err());
    }

    #[test]
    fn calibration_hits_target() {
        assert_eq!(calibrate_noise(0.0, DEFAULT_G).unwrap(), NoiseRates::ZERO);
        let r = calibrate_noise(0.12, DEFAULT_G).unwrap();
        let f = pi_pulse_infidelity(r.pulse, DEFAULT_G).unwrap();
        assert!((0.115..=0.125).contains(&f), "{f}");
        assert_eq!(r.bsb_blockade, r.pulse);
        let rates: Vec<f64> =
            [0.02, 0.06, 0.12, 0.2].iter().map(|&x| calibrate_dephasing_rate(x, DEFAULT_G).unwrap()).collect();
        for w in rates.windows(2) {
            assert!(w[1] > w[0]);
        }
        assert!(calibrate_noise(0.6, DEFAULT_G).is_err());
        assert!(calibrate_noise(0.1, 0.0).is_err());
    }

    #[test]
    fn infidelity_is_zero_without_dephasing() {
        assert!(pi_pulse_infidelity(0.0, DEFAULT_G).unwrap().abs() < 1e-9);
    }

    #[test]
    fn noisy_runs_are_deterministic() {
        let cfg = ScenarioConfig { time: grid(1e-4, 2e-5), ..ScenarioConfig::for_scenario(ScenarioKind::Fig3Blockade) };
        let a = run_scenario(&cfg).unwrap().to_csv().unwrap();
        let b = run_scenario(&cfg).unwrap().to_csv().unwrap();
        assert_eq!(a, b);
        let c = run_scenario(&ScenarioConfig { seed: 2, ..cfg }).unwrap().to_csv().unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noisy_fig2_emits_shot_columns() {
        let mut cfg = ScenarioConfig { time: grid(2e-5, 2e-5), ..ScenarioConfig::default() };
        cfg.noise.thermal = false;
        let s = run_scenario(&cfg).unwrap();
        assert_eq!(s.rows.len(), 2);
        for name in ["P20_shots", "P20_sigma", "P11_shots", "P02_sigma", "outside_model"] {
            assert!(s.column(name).is_some(), "{name}");
        }
        let (exact, shots) = (s.column("P20").unwrap(), s.column("P20_shots").unwrap());
        let sigma = s.column("P20_sigma").unwrap();
        for i in 0..2 {
            assert!((0.0..=1.0).contains(&exact[i]));
            // 500 shots: sampled within 5σ of the exact value
            assert!((shots[i] - exact[i]).abs() <= 5.0 * (exact[i] * (1.0 - exact[i]) / 500.0).sqrt() + 1e-9);
            assert!(sigma[i] >= 0.0);
        }
        // dephased pulses lower the prepared |2,0⟩ population
        assert!(exact[0] < 0.7);
        let sum: f64 = ["P20", "P11", "P02"].iter().map(|c| s.column(c).unwrap()[0]).sum();
        assert!(sum <= 1.0 + 1e-9);
    }

    #[test]
    fn fig4_fit_tracks_probed_distribution() {
        let cfg = ScenarioConfig { time: grid(1.2e-4, 4e-5), ..ideal(ScenarioKind::Fig4Free) };
        let s = run_scenario(&cfg).unwrap();
        for k in 0..3 {
            let (fit, truth) = (s.column(&format!("p{k}")).unwrap(), s.column(&format!("fock_p{k}")).unwrap());
            assert!(max_diff(&fit, &truth) < 0.01, "p{k}: {fit:?} vs {truth:?}");
        }
        assert!(s.column("low_confidence").unwrap().iter().all(|&f| f == 0.0));
        let g = s.column("fit_g").unwrap();
        assert!(g.iter().all(|v| (v / DEFAULT_G - 1.0).abs() < 1e-3));
    }

    #[test]
    fn fig4_without_any_hopping_recovers_single_phonon() {
        let cfg =
            ScenarioConfig { hop_during_pulses: false, time: grid(0.0, 1e-5), ..ideal(ScenarioKind::Fig4Blockade) };
        let s = run_scenario(&cfg).unwrap();
        assert!((s.column("p1").unwrap()[0] - 1.0).abs() < 1e-3);
        assert!((s.column("fock_p1").unwrap()[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn custom_reports_per_ion_observables() {
        let k = kappa();
        let cfg = ScenarioConfig {
            custom_initial: Some(vec![(Level::Up, 1), (Level::Up, 0)]),
            time: grid(PI / k, PI / k / 4.0),
            ..ideal(ScenarioKind::Custom)
        };
        let s = run_scenario(&cfg).unwrap();
        let n1 = s.column("mean_n_ion1").unwrap();
        let n2 = s.column("mean_n_ion2").unwrap();
        for (i, &t) in s.times().iter().enumerate() {
            assert!((n1[i] - (k * t / 2.0).cos().powi(2)).abs() < 1e-9);
            assert!((n1[i] + n2[i] - 1.0).abs() < 1e-9);
        }
        assert!(s.column("p_down_ion1").unwrap().iter().all(|&p| p.abs() < 1e-12));
    }

    #[test]
    fn population_at_cutoff_is_an_error() {
        let cfg = ScenarioConfig {
            custom_initial: Some(vec![(Level::Down, 4), (Level::Down, 0)]),
            time: grid(0.0, 1e-5),
            ..ideal(ScenarioKind::Custom)
        };
        let err = run_scenario(&cfg).unwrap_err();
        assert!(matches!(err, Error::Truncation { .. }));
        assert!(err.is_numerical());
    }

    #[test]
    fn small_cutoff_population_is_a_warning() {
        let cfg = ScenarioConfig { time: grid(0.0, 1e-5), ..ideal(ScenarioKind::Fig2Free) };
        let s = run_scenario(&cfg).unwrap();
        assert!(s.cutoff_population < CUTOFF_ERROR);
        assert_eq!(s.warnings.is_empty(), s.cutoff_population <= CUTOFF_WARNING);
    }

    #[test]
    fn csv_and_sidecar() {
        let cfg = ScenarioConfig { time: grid(4e-5, 2e-5), ..ideal(ScenarioKind::Fig3Free) };
        let s = run_scenario(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.csv");
        s.write(&path, &cfg).unwrap();
        let csv = std::fs::read_to_string(&path).unwrap();
        assert_eq!(csv, s.to_csv().unwrap());
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), s.columns.join(","));
        assert_eq!(lines.count(), 3);
        let side: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
        let back: ScenarioConfig = serde_json::from_value(side["config"].clone()).unwrap();
        assert_eq!(back, cfg.resolved());
        assert_eq!(side["columns"].as_array().unwrap().len(), s.columns.len());
    }

    #[test]
    fn joint_fock_needs_two_ions() {
        let spec = HilbertSpec::new(3, 2, 2).unwrap();
        let psi = product_state(&spec, &[(Level::Down, 0); 3]).unwrap();
        assert!(joint_fock(&spec, &psi).is_err());
    }
}
