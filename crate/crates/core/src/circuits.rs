//! Gate library and circuit executor for the FID and Hahn-echo sequences.
//!
//! Gates are ideal instantaneous unitaries on the six-level register. Free
//! evolution is delegated to one of three engines:
//!
//! * `Analytic`: block unitaries plus incoherent population mixing. Each
//!   m_S block keeps its normalized nuclear state and is reweighted by the
//!   rate-equation populations; blocks that were empty receive a fully mixed
//!   nucleus.
//! * `Lindblad`: exact propagation of the six-level master equation.
//! * `Ensemble`: the Lindblad engine for one quasi-static detuning sample.
//!
//! SWAP and readout act on the electron pair {|0⟩, |−1⟩}, encoded as logical
//! qubit |0⟩ → 0, |−1⟩ → 1 with nuclear ↑ → 0, ↓ → 1.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::qcore::{
    apply_unitary, block_offset, block_propagator, c, matrix_exponential, ms_block, DensityMatrix, Mat2, Mat6,
    UnitaryOperator, C64, LEVELS,
};
use crate::relaxation::{build_lindblad_with, numeric_populations, PopulationTriple, RateModel};
use crate::spin_model::{nuclear_hamiltonian, SpinSystemParams};

/// Free-evolution engine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Analytic,
    Lindblad,
    Ensemble,
}

impl std::str::FromStr for Engine {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "analytic" => Ok(Engine::Analytic),
            "lindblad" => Ok(Engine::Lindblad),
            "ensemble" => Ok(Engine::Ensemble),
            other => Err(Error::Parse(format!("unknown engine `{other}`"))),
        }
    }
}

/// A resolved gate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Gate {
    HadamardNuclear { blocks: Vec<i32> },
    PiXNuclear { blocks: Vec<i32> },
    SwapE0M1,
    MwPulse { angle_deg: f64, phase_rad: f64 },
    FreeEvolution { duration_ms: f64, engine: Engine },
}

/// Default block set for the nuclear Hadamard.
pub fn default_hadamard_blocks() -> Vec<i32> {
    vec![0]
}

/// Default block set for the nuclear refocusing pulse.
pub fn default_pi_blocks() -> Vec<i32> {
    vec![0, -1]
}

fn check_blocks(blocks: &[i32]) -> Result<()> {
    if blocks.is_empty() {
        return Err(Error::InvalidGate("empty block set".into()));
    }
    for &m in blocks {
        block_offset(m)?;
    }
    Ok(())
}

fn conditional(blocks: &[i32], op: Mat2) -> Result<UnitaryOperator> {
    check_blocks(blocks)?;
    let mut parts = [Mat2::identity(); 3];
    for (k, m) in LEVELS.iter().enumerate() {
        if blocks.contains(m) {
            parts[k] = op;
        }
    }
    UnitaryOperator::block_diagonal(parts)
}

/// Electron rotation on {|0⟩, |−1⟩} ⊗ 𝟙_nuc.
///
/// R(θ, φ) = cos(θ/2)·𝟙 + i·sin(θ/2)·(cos φ·σx + sin φ·σy) in the (|0⟩, |−1⟩)
/// basis. With this sense a 90° pulse maps a state with populations a, b and
/// coherence ρ₀,₋₁ to the |0⟩ population ½(a + b) + Im(ρ₀,₋₁·e^{iφ}).
pub fn electron_rotation(angle_deg: f64, phase_rad: f64) -> Result<UnitaryOperator> {
    if !angle_deg.is_finite() || !phase_rad.is_finite() {
        return Err(Error::NonFinite("MW pulse"));
    }
    let half = angle_deg.to_radians() / 2.0;
    let (cs, sn) = (half.cos(), half.sin());
    let r00 = c(cs);
    let r01 = C64::new(0.0, sn) * C64::from_polar(1.0, -phase_rad);
    let r10 = C64::new(0.0, sn) * C64::from_polar(1.0, phase_rad);
    let mut u = Mat6::identity();
    let (z, m) = (block_offset(0)?, block_offset(-1)?);
    for n in 0..2 {
        u[(z + n, z + n)] = r00;
        u[(z + n, m + n)] = r01;
        u[(m + n, z + n)] = r10;
        u[(m + n, m + n)] = r00;
    }
    UnitaryOperator::new(u)
}

/// |0↓⟩ ↔ |−1↑⟩, everything else fixed.
pub fn swap_unitary() -> UnitaryOperator {
    let mut u = Mat6::identity();
    let a = block_offset(0).unwrap() + 1;
    let b = block_offset(-1).unwrap();
    u[(a, a)] = c(0.0);
    u[(b, b)] = c(0.0);
    u[(a, b)] = c(1.0);
    u[(b, a)] = c(1.0);
    UnitaryOperator::new(u).expect("permutation is unitary")
}

fn nuclear_propagator(params: &SpinSystemParams, detuning_mhz: f64, t_ms: f64) -> Result<UnitaryOperator> {
    block_propagator(&nuclear_hamiltonian(params, detuning_mhz)?, t_ms * 1000.0)
}

pub fn gate_unitary(g: &Gate, params: &SpinSystemParams) -> Result<UnitaryOperator> {
    match g {
        Gate::HadamardNuclear { blocks } => {
            let h = Mat2::new(c(1.0), c(1.0), c(1.0), c(-1.0)) * c(FRAC_1_SQRT_2);
            conditional(blocks, h)
        }
        Gate::PiXNuclear { blocks } => {
            // exp(−iπσx/2) = −iσx
            let x = Mat2::new(c(0.0), C64::new(0.0, -1.0), C64::new(0.0, -1.0), c(0.0));
            conditional(blocks, x)
        }
        Gate::SwapE0M1 => Ok(swap_unitary()),
        Gate::MwPulse { angle_deg, phase_rad } => electron_rotation(*angle_deg, *phase_rad),
        Gate::FreeEvolution { duration_ms, .. } => {
            if !(*duration_ms >= 0.0) {
                return Err(Error::InvalidGate(format!("negative duration {duration_ms}")));
            }
            nuclear_propagator(params, 0.0, *duration_ms)
        }
    }
}

/// 90° readout pulse whose phase follows the evolution time:
/// φ = 2π·ν_d·τ + φ₀ (ν_d in MHz, τ converted to μs).
pub fn mw90_phase(nu_d_mhz: f64, tau_ms: f64, phi0_rad: f64) -> Gate {
    Gate::MwPulse {
        angle_deg: 90.0,
        phase_rad: 2.0 * PI * nu_d_mhz * tau_ms * 1000.0 + phi0_rad,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CircuitLabel {
    Fid,
    Hahn,
    Custom,
}

/// One step of a circuit template. Evolution steps and ramped pulses are
/// expressed relative to the swept evolution time τ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    HadamardNuclear {
        #[serde(default = "default_hadamard_blocks")]
        blocks: Vec<i32>,
    },
    PiXNuclear {
        #[serde(default = "default_pi_blocks")]
        blocks: Vec<i32>,
    },
    SwapE0M1,
    MwPulse {
        angle_deg: f64,
        phase_rad: f64,
    },
    /// Readout pulse with phase 2π·ν_d·τ + φ₀.
    RampedMwPulse {
        angle_deg: f64,
        nu_d_mhz: f64,
        phi0_rad: f64,
    },
    /// Free evolution for `fraction`·τ. `engine` pins the engine; when absent
    /// the engine of the run is used.
    Evolve {
        fraction: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        engine: Option<Engine>,
    },
}

/// Ordered circuit template.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Circuit {
    pub label: CircuitLabel,
    pub steps: Vec<Step>,
}

impl Circuit {
    /// H(m_S=0), τ, SWAP, 90°_φ(τ)
    pub fn fid(nu_d_mhz: f64, phi0_rad: f64) -> Self {
        Self {
            label: CircuitLabel::Fid,
            steps: vec![
                Step::HadamardNuclear {
                    blocks: default_hadamard_blocks(),
                },
                Step::Evolve {
                    fraction: 1.0,
                    engine: None,
                },
                Step::SwapE0M1,
                Step::RampedMwPulse {
                    angle_deg: 90.0,
                    nu_d_mhz,
                    phi0_rad,
                },
            ],
        }
    }

    /// H(m_S=0), τ/2, 180ₓ, τ/2, SWAP, 90°_φ(τ)
    pub fn hahn(nu_d_mhz: f64, phi0_rad: f64, pi_blocks: Vec<i32>) -> Self {
        Self {
            label: CircuitLabel::Hahn,
            steps: vec![
                Step::HadamardNuclear {
                    blocks: default_hadamard_blocks(),
                },
                Step::Evolve {
                    fraction: 0.5,
                    engine: None,
                },
                Step::PiXNuclear { blocks: pi_blocks },
                Step::Evolve {
                    fraction: 0.5,
                    engine: None,
                },
                Step::SwapE0M1,
                Step::RampedMwPulse {
                    angle_deg: 90.0,
                    nu_d_mhz,
                    phi0_rad,
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut total = 0.0;
        for s in &self.steps {
            match s {
                Step::Evolve { fraction, .. } => {
                    if !(*fraction >= 0.0 && fraction.is_finite()) {
                        return Err(Error::InvalidGate(format!("evolution fraction {fraction}")));
                    }
                    total += fraction;
                }
                Step::HadamardNuclear { blocks } | Step::PiXNuclear { blocks } => check_blocks(blocks)?,
                _ => {}
            }
        }
        if total > 1.0 + 1e-12 {
            return Err(Error::InvalidGate(format!(
                "evolution fractions sum to {total}, more than the swept time"
            )));
        }
        Ok(())
    }

    /// Concrete gate list for evolution time `tau_ms`.
    pub fn resolve(&self, tau_ms: f64, engine: Engine) -> Result<Vec<Gate>> {
        self.validate()?;
        if !(tau_ms >= 0.0) || !tau_ms.is_finite() {
            return Err(invalid("tau", "must be finite and non-negative"));
        }
        self.steps
            .iter()
            .map(|s| {
                Ok(match s {
                    Step::HadamardNuclear { blocks } => Gate::HadamardNuclear { blocks: blocks.clone() },
                    Step::PiXNuclear { blocks } => Gate::PiXNuclear { blocks: blocks.clone() },
                    Step::SwapE0M1 => Gate::SwapE0M1,
                    Step::MwPulse { angle_deg, phase_rad } => Gate::MwPulse {
                        angle_deg: *angle_deg,
                        phase_rad: *phase_rad,
                    },
                    Step::RampedMwPulse {
                        angle_deg,
                        nu_d_mhz,
                        phi0_rad,
                    } => match mw90_phase(*nu_d_mhz, tau_ms, *phi0_rad) {
                        Gate::MwPulse { phase_rad, .. } => Gate::MwPulse {
                            angle_deg: *angle_deg,
                            phase_rad,
                        },
                        _ => unreachable!(),
                    },
                    Step::Evolve { fraction, engine: pinned } => {
                        let e = pinned.unwrap_or(engine);
                        if e != engine {
                            return Err(Error::EngineMismatch(format!(
                                "circuit pins {e:?} but the run uses {engine:?}"
                            )));
                        }
                        Gate::FreeEvolution {
                            duration_ms: fraction * tau_ms,
                            engine: e,
                        }
                    }
                })
            })
            .collect()
    }
}

/// Relaxation and noise settings for one circuit execution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Noise {
    pub engine: Engine,
    /// Electron hopping rate, 1/ms.
    pub kappa_per_ms: f64,
    /// Nuclear pure-dephasing rate (Lindblad and ensemble engines), 1/ms.
    pub gamma_phi_per_ms: f64,
    /// Static ¹³C detuning of this ensemble member, MHz.
    pub detuning_mhz: f64,
    /// Phenomenological coherence decay rate (analytic engine), 1/ms.
    pub coherence_rate_per_ms: f64,
}

impl Noise {
    pub fn analytic(kappa_per_ms: f64, coherence_rate_per_ms: f64) -> Self {
        Self {
            engine: Engine::Analytic,
            kappa_per_ms,
            gamma_phi_per_ms: 0.0,
            detuning_mhz: 0.0,
            coherence_rate_per_ms,
        }
    }

    pub fn lindblad(kappa_per_ms: f64, gamma_phi_per_ms: f64) -> Self {
        Self {
            engine: Engine::Lindblad,
            kappa_per_ms,
            gamma_phi_per_ms,
            detuning_mhz: 0.0,
            coherence_rate_per_ms: 0.0,
        }
    }

    pub fn ensemble_member(kappa_per_ms: f64, gamma_phi_per_ms: f64, detuning_mhz: f64) -> Self {
        Self {
            engine: Engine::Ensemble,
            kappa_per_ms,
            gamma_phi_per_ms,
            detuning_mhz,
            coherence_rate_per_ms: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("kappa", self.kappa_per_ms),
            ("gamma_phi", self.gamma_phi_per_ms),
            ("coherence_rate", self.coherence_rate_per_ms),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(invalid(name, "must be finite and non-negative"));
            }
        }
        if !self.detuning_mhz.is_finite() {
            return Err(Error::NonFinite("detuning"));
        }
        let mismatch = |what: &str| Err(Error::EngineMismatch(format!("{what} with {:?} engine", self.engine)));
        match self.engine {
            Engine::Analytic if self.gamma_phi_per_ms != 0.0 => mismatch("Lindblad dephasing rate"),
            Engine::Analytic if self.detuning_mhz != 0.0 => mismatch("quasi-static detuning"),
            Engine::Lindblad if self.detuning_mhz != 0.0 => mismatch("quasi-static detuning"),
            Engine::Lindblad | Engine::Ensemble if self.coherence_rate_per_ms != 0.0 => {
                mismatch("phenomenological coherence decay")
            }
            _ => Ok(()),
        }
    }
}

/// Reusable executor: builds the generator once for a fixed set of
/// parameters and noise settings.
#[derive(Debug, Clone)]
pub struct CircuitRunner {
    params: SpinSystemParams,
    noise: Noise,
    superop: Option<DMatrix<C64>>,
    nuclear_h: Mat6,
}

impl CircuitRunner {
    pub fn new(params: &SpinSystemParams, noise: Noise) -> Result<Self> {
        params.validate()?;
        noise.validate()?;
        let superop = match noise.engine {
            Engine::Analytic => None,
            Engine::Lindblad | Engine::Ensemble => {
                let g = build_lindblad_with(
                    params,
                    &RateModel::default_connectivity(noise.kappa_per_ms),
                    noise.gamma_phi_per_ms,
                    0.0,
                    noise.detuning_mhz,
                )?;
                if g.is_unitary() {
                    None
                } else {
                    Some(g.superoperator())
                }
            }
        };
        Ok(Self {
            params: params.clone(),
            noise,
            superop,
            nuclear_h: nuclear_hamiltonian(params, noise.detuning_mhz)?,
        })
    }

    pub fn noise(&self) -> &Noise {
        &self.noise
    }

    pub fn run(&self, rho0: &DensityMatrix, circuit: &Circuit, tau_ms: f64) -> Result<DensityMatrix> {
        let gates = circuit.resolve(tau_ms, self.noise.engine)?;
        let mut rho = rho0.clone();
        for g in &gates {
            rho = match g {
                Gate::FreeEvolution { duration_ms, engine } => self.evolve(&rho, *duration_ms, *engine)?,
                other => apply_unitary(&rho, &gate_unitary(other, &self.params)?),
            };
        }
        Ok(rho)
    }

    fn block_unitary(&self, t_ms: f64) -> Result<UnitaryOperator> {
        block_propagator(&self.nuclear_h, t_ms * 1000.0)
    }

    fn evolve(&self, rho: &DensityMatrix, t_ms: f64, engine: Engine) -> Result<DensityMatrix> {
        if engine != self.noise.engine {
            return Err(Error::EngineMismatch(format!(
                "gate requests {engine:?}, runner configured for {:?}",
                self.noise.engine
            )));
        }
        if t_ms == 0.0 {
            return Ok(rho.clone());
        }
        match engine {
            Engine::Analytic => self.evolve_analytic(rho, t_ms),
            Engine::Lindblad | Engine::Ensemble => match &self.superop {
                None => {
                    Ok(apply_unitary(rho, &self.block_unitary(t_ms)?))
                }
                Some(s) => {
                    let e = matrix_exponential(s, t_ms * 1000.0)?;
                    let v = nalgebra::DVector::from_iterator(36, rho.matrix().iter().copied());
                    let out = Mat6::from_iterator((&e * v).iter().copied());
                    if out.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                        return Err(Error::NonFinite("evolved state"));
                    }
                    DensityMatrix::new((out + out.adjoint()) * c(0.5)).map_err(|e| Error::Unphysical(e.to_string()))
                }
            },
        }
    }

    fn evolve_analytic(&self, rho: &DensityMatrix, t_ms: f64) -> Result<DensityMatrix> {
        let m = rho.matrix();
        for i in 0..6 {
            for j in 0..6 {
                if i / 2 != j / 2 && m[(i, j)].norm() > 1e-14 {
                    return Err(Error::EngineMismatch(
                        "analytic engine needs a state without inter-block coherence".into(),
                    ));
                }
            }
        }
        let before = PopulationTriple::of_state(rho);
        let after = numeric_populations(before, &RateModel::default_connectivity(self.noise.kappa_per_ms), t_ms)?;
        let u = *self.block_unitary(t_ms)?.matrix();
        let decay = (-self.noise.coherence_rate_per_ms * t_ms).exp();
        let mut out = Mat6::zeros();
        for &lvl in &LEVELS {
            let off = block_offset(lvl)?;
            let weight = before.get(lvl)?;
            let state = if weight > 1e-15 {
                let b = ms_block(rho, lvl)? / c(weight);
                let ub = u.fixed_view::<2, 2>(off, off).into_owned();
                let mut evolved = ub * b * ub.adjoint();
                evolved[(0, 1)] *= decay;
                evolved[(1, 0)] *= decay;
                evolved
            } else {
                Mat2::identity() * c(0.5)
            };
            out.fixed_view_mut::<2, 2>(off, off)
                .copy_from(&(state * c(after.get(lvl)?)));
        }
        Ok(DensityMatrix::from_matrix_unchecked((out + out.adjoint()) * c(0.5)))
    }
}

/// Runs `circuit` at evolution time `tau_ms` from `rho0`.
pub fn run_circuit(
    rho0: &DensityMatrix,
    circuit: &Circuit,
    tau_ms: f64,
    params: &SpinSystemParams,
    noise: &Noise,
) -> Result<DensityMatrix> {
    CircuitRunner::new(params, *noise)?.run(rho0, circuit, tau_ms)
}

/// Population of the electron |0⟩ level.
pub fn readout_p0(rho: &DensityMatrix) -> f64 {
    ms_block(rho, 0).map(|b| b.trace().re).unwrap_or(0.0)
}
