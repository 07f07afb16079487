//! Laser pulses as schedule segments.
//!
//! A pulse with ground-state rotation angle θ and half-Rabi frequency g lasts
//! `θ / (2g)`. The √(n+1) speed-up of sideband transitions on higher Fock
//! states comes out of the Hamiltonian, not out of the duration.

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};

use serde::{Deserialize, Serialize};

use crate::chain::ChainGeometry;
use crate::dynamics::{HermitianEigen, Segment};
use crate::hamiltonian::{coupling_term, hopping_hamiltonian, Coupling};
use crate::hilbert::{site_operator, HilbertSpec, Level, Operator, SiteOp};
use crate::{Error, Result};

/// Transition addressed by a pulse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transition {
    /// |↓,n⟩ ↔ |↑,n⟩
    CarrierDnUp,
    /// |↓,n⟩ ↔ |e₀,n⟩
    ShelveDnE0,
    /// |↓,n⟩ ↔ |↑,n+1⟩
    Bsb,
    /// |↓,n⟩ ↔ |↑,n−1⟩
    Rsb,
}

impl Transition {
    fn coupling(self) -> Coupling {
        match self {
            Transition::CarrierDnUp => Coupling::Carrier,
            Transition::ShelveDnE0 => Coupling::Shelve,
            Transition::Bsb => Coupling::Blue,
            Transition::Rsb => Coupling::Red,
        }
    }

    /// Level that carries the detuning term.
    fn detuned_level(self) -> Level {
        match self {
            Transition::CarrierDnUp | Transition::Rsb => Level::Up,
            Transition::ShelveDnE0 => Level::E0,
            Transition::Bsb => Level::Down,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PulseEvent {
    pub ion: usize,
    pub transition: Transition,
    /// Rotation angle on the motional ground state, rad.
    pub theta: f64,
    /// Rotation axis, rad.
    #[serde(default)]
    pub phi: f64,
    /// Half-Rabi frequency, rad/s.
    pub g: f64,
    #[serde(default)]
    pub detuning: f64,
}

impl PulseEvent {
    pub fn new(ion: usize, transition: Transition, theta: f64, phi: f64, g: f64) -> Self {
        Self { ion, transition, theta, phi, g, detuning: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.theta >= 0.0) || !self.theta.is_finite() {
            return Err(Error::Invalid(format!("pulse angle must be >= 0, got {}", self.theta)));
        }
        if self.theta > 0.0 && !(self.g > 0.0 && self.g.is_finite()) {
            return Err(Error::Invalid(format!("pulse with angle {} needs g > 0, got {}", self.theta, self.g)));
        }
        Ok(())
    }

    pub fn with_theta(self, theta: f64) -> Self {
        Self { theta, ..self }
    }

    /// θ / (2g), zero for θ = 0.
    pub fn duration(&self) -> f64 {
        if self.theta == 0.0 {
            0.0
        } else {
            self.theta / (2.0 * self.g)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PulseItem {
    Pulse(PulseEvent),
    /// Pulses on distinct ions driven at the same time; equal durations.
    Parallel {
        pulses: Vec<PulseEvent>,
    },
    Wait {
        duration: f64,
    },
}

impl PulseItem {
    pub fn duration(&self) -> f64 {
        match self {
            PulseItem::Pulse(e) => e.duration(),
            PulseItem::Parallel { pulses } => pulses.first().map_or(0.0, |e| e.duration()),
            PulseItem::Wait { duration } => *duration,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            PulseItem::Pulse(e) => e.validate(),
            PulseItem::Parallel { pulses } => {
                let Some(first) = pulses.first() else {
                    return Err(Error::Invalid("parallel pulse group is empty".into()));
                };
                for (k, e) in pulses.iter().enumerate() {
                    e.validate()?;
                    if pulses[..k].iter().any(|o| o.ion == e.ion) {
                        return Err(Error::Invalid(format!("ion {} driven twice in one parallel group", e.ion)));
                    }
                    let (a, b) = (first.duration(), e.duration());
                    if (a - b).abs() > 1e-12 * a.max(b) {
                        return Err(Error::Invalid(format!("parallel pulses need equal durations, got {a} and {b}")));
                    }
                }
                Ok(())
            }
            PulseItem::Wait { duration } => {
                if !(*duration >= 0.0) || !duration.is_finite() {
                    return Err(Error::Invalid(format!("wait duration must be >= 0, got {duration}")));
                }
                Ok(())
            }
        }
    }
}

/// Ordered pulses and waits, in application order.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub items: Vec<PulseItem>,
}

impl PulseSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pulse(mut self, event: PulseEvent) -> Self {
        self.items.push(PulseItem::Pulse(event));
        self
    }

    pub fn parallel(mut self, pulses: Vec<PulseEvent>) -> Self {
        self.items.push(PulseItem::Parallel { pulses });
        self
    }

    pub fn wait(mut self, duration: f64) -> Self {
        self.items.push(PulseItem::Wait { duration });
        self
    }

    pub fn extend(mut self, other: PulseSequence) -> Self {
        self.items.extend(other.items);
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.items.iter().try_for_each(PulseItem::validate)
    }

    pub fn duration(&self) -> f64 {
        self.items.iter().map(PulseItem::duration).sum()
    }

    pub fn events(&self) -> impl Iterator<Item = &PulseEvent> {
        self.items.iter().flat_map(|i| match i {
            PulseItem::Pulse(e) => std::slice::from_ref(e),
            PulseItem::Parallel { pulses } => pulses.as_slice(),
            PulseItem::Wait { .. } => &[],
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sequence serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let seq: Self = serde_json::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        seq.validate()?;
        Ok(seq)
    }
}

/// Drive part of a pulse Hamiltonian, without hopping.
pub fn pulse_drive(spec: &HilbertSpec, event: &PulseEvent) -> Result<Operator> {
    event.validate()?;
    if event.transition == Transition::ShelveDnE0 && spec.internal_levels < 3 {
        return Err(Error::Invalid("shelving pulse needs three internal levels".into()));
    }
    let mut h = coupling_term(spec, event.ion, event.transition.coupling(), event.g, event.phi)?;
    if event.detuning != 0.0 {
        let p = site_operator(spec, event.ion, SiteOp::ProjectInternal(event.transition.detuned_level()))?;
        h = &h + &p.scale_re(event.detuning);
    }
    Ok(h)
}

/// Segment for one pulse with hopping on.
pub fn pulse_segment(spec: &HilbertSpec, geometry: &ChainGeometry, event: &PulseEvent) -> Result<Segment> {
    PulseContext::new(spec, geometry, true)?.segment(event)
}

/// Pulse compiler bound to one state space and chain, caching the hopping term.
#[derive(Debug, Clone)]
pub struct PulseContext {
    pub spec: HilbertSpec,
    pub geometry: ChainGeometry,
    /// Keep the hopping term in the Hamiltonian during pulses.
    pub hop_during_pulses: bool,
    hopping: Operator,
}

impl PulseContext {
    pub fn new(spec: &HilbertSpec, geometry: &ChainGeometry, hop_during_pulses: bool) -> Result<Self> {
        let hopping = hopping_hamiltonian(spec, geometry)?;
        Ok(Self { spec: *spec, geometry: geometry.clone(), hop_during_pulses, hopping })
    }

    pub fn hopping(&self) -> &Operator {
        &self.hopping
    }

    fn background(&self) -> Operator {
        if self.hop_during_pulses {
            self.hopping.clone()
        } else {
            Operator::zeros(self.spec.dim())
        }
    }

    pub fn segment(&self, event: &PulseEvent) -> Result<Segment> {
        let drive = pulse_drive(&self.spec, event)?;
        Ok(Segment::new(&self.background() + &drive, event.duration()))
    }

    /// All drives of a parallel group in one segment.
    pub fn parallel_segment(&self, pulses: &[PulseEvent]) -> Result<Segment> {
        let item = PulseItem::Parallel { pulses: pulses.to_vec() };
        item.validate()?;
        let mut h = self.background();
        for e in pulses {
            h = &h + &pulse_drive(&self.spec, e)?;
        }
        Ok(Segment::new(h, item.duration()))
    }

    /// Waits always evolve under hopping.
    pub fn wait_segment(&self, duration: f64) -> Segment {
        Segment::free(self.hopping.clone(), duration)
    }

    pub fn segments(&self, seq: &PulseSequence) -> Result<Vec<Segment>> {
        seq.validate()?;
        seq.items
            .iter()
            .map(|item| match item {
                PulseItem::Pulse(e) => self.segment(e),
                PulseItem::Parallel { pulses } => self.parallel_segment(pulses),
                PulseItem::Wait { duration } => Ok(self.wait_segment(*duration)),
            })
            .collect()
    }

    /// Product of the segment propagators, later items on the left.
    pub fn unitary(&self, seq: &PulseSequence) -> Result<Operator> {
        seq.validate()?;
        let mut u = Operator::identity(self.spec.dim());
        // the Hamiltonian of a pulse does not depend on θ, so cache by the rest
        let mut cache: Vec<(Vec<PulseEvent>, HermitianEigen)> = Vec::new();
        let mut hop_eig: Option<HermitianEigen> = None;
        for item in &seq.items {
            let duration = item.duration();
            if duration == 0.0 {
                continue;
            }
            let step = match item {
                PulseItem::Pulse(_) | PulseItem::Parallel { .. } => {
                    let events = match item {
                        PulseItem::Pulse(e) => vec![*e],
                        PulseItem::Parallel { pulses } => pulses.clone(),
                        PulseItem::Wait { .. } => unreachable!(),
                    };
                    let key: Vec<PulseEvent> = events.iter().map(|e| PulseEvent { theta: 1.0, ..*e }).collect();
                    let idx = match cache.iter().position(|(k, _)| *k == key) {
                        Some(i) => i,
                        None => {
                            let seg = self.parallel_segment(&events)?;
                            cache.push((key, HermitianEigen::new(&seg.hamiltonian)?));
                            cache.len() - 1
                        }
                    };
                    cache[idx].1.propagator(duration)
                }
                PulseItem::Wait { .. } => {
                    if hop_eig.is_none() {
                        hop_eig = Some(HermitianEigen::new(&self.hopping)?);
                    }
                    hop_eig.as_ref().expect("just set").propagator(duration)
                }
            };
            u = &step * &u;
        }
        Ok(u)
    }
}

/// Blue-sideband rotation R_BSB(θ, φ).
pub fn bsb(ion: usize, theta: f64, phi: f64, g: f64) -> PulseEvent {
    PulseEvent::new(ion, Transition::Bsb, theta, phi, g)
}

pub fn carrier(ion: usize, theta: f64, phi: f64, g: f64) -> PulseEvent {
    PulseEvent::new(ion, Transition::CarrierDnUp, theta, phi, g)
}

pub fn shelve(ion: usize, theta: f64, phi: f64, g: f64) -> PulseEvent {
    PulseEvent::new(ion, Transition::ShelveDnE0, theta, phi, g)
}

/// R_BSB(π/2, 0) · R_BSB(π/√2, π/2) · R_BSB(π/2, 0), listed in application order.
///
/// Transfers |↓,0⟩ → |↑,1⟩ and |↓,1⟩ → |↑,2⟩ simultaneously.
pub fn composite_cp(ion: usize, g: f64) -> PulseSequence {
    PulseSequence::new()
        .pulse(bsb(ion, FRAC_PI_2, 0.0, g))
        .pulse(bsb(ion, PI / SQRT_2, FRAC_PI_2, g))
        .pulse(bsb(ion, FRAC_PI_2, 0.0, g))
}

/// Which experiment's state preparation to build.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    /// |↓0,↓0⟩ → |↑2,↑0⟩
    Fig2,
    /// |↓0,↓0⟩ → |↑1,↑1⟩
    Fig3,
}

/// State preparation from |↓0,↓0⟩.
///
/// Fig2: BSB π on ion 0, carrier π on ion 0, carrier π on ion 1, then a BSB
/// pulse on ion 0 whose angle π/√2 makes a full π rotation on the
/// |↓,1⟩ ↔ |↑,2⟩ transition. Fig3: BSB π on both ions at once.
pub fn prep_sequence(
    experiment: Experiment,
    spec: &HilbertSpec,
    geometry: &ChainGeometry,
    g: f64,
) -> Result<PulseSequence> {
    if spec.ion_count != 2 || geometry.ion_count() != 2 {
        return Err(Error::Invalid(format!("state preparation needs a two-ion chain, got {}", spec.ion_count)));
    }
    if !(g > 0.0) {
        return Err(Error::Invalid(format!("pulse g must be positive, got {g}")));
    }
    Ok(match experiment {
        Experiment::Fig2 => PulseSequence::new()
            .pulse(bsb(0, PI, 0.0, g))
            .pulse(carrier(0, PI, 0.0, g))
            .pulse(carrier(1, PI, 0.0, g))
            .pulse(bsb(0, PI / SQRT_2, 0.0, g)),
        Experiment::Fig3 => PulseSequence::new().parallel(vec![bsb(0, PI, 0.0, g), bsb(1, PI, 0.0, g)]),
    })
}
