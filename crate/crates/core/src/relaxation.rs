//! Electron T1 population dynamics and the six-level Lindblad generator.
//!
//! The T1 process hops the electron between m_S = 0 and m_S = ±1 at a single
//! rate κ = 1/(3·T1e). With no direct +1 ↔ −1 hop the 3×3 generator has
//! eigenvalues {0, −κ, −3κ}, which is what the closed-form populations in
//! [`analytic_populations`] encode.
//!
//! Rates are specified per millisecond. Internally the Lindblad generator runs
//! in microseconds so that 2π·ν[MHz]·t[μs] is a phase in radians.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::error::{invalid, Error, Result};
use crate::qcore::{block_offset, c, matrix_exponential, DensityMatrix, Mat6, C64, LEVELS};
use crate::spin_model::{nuclear_hamiltonian, SpinOperatorSet, SpinSystemParams};

const US_PER_MS: f64 = 1000.0;

/// Refusal threshold for dt·‖generator‖ in the RK4 integrator.
pub const MAX_STEP_NORM: f64 = 0.1;

/// Electron-level populations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PopulationTriple {
    pub p0: f64,
    pub pm1: f64,
    pub pp1: f64,
}

impl PopulationTriple {
    pub fn new(p0: f64, pm1: f64, pp1: f64) -> Result<Self> {
        let p = Self { p0, pm1, pp1 };
        for (name, v) in [("p0", p0), ("pm1", pm1), ("pp1", pp1)] {
            if !(-1e-12..=1.0 + 1e-12).contains(&v) {
                return Err(invalid(name, format!("{v} is not a probability")));
            }
        }
        if (p.sum() - 1.0).abs() > 1e-12 {
            return Err(invalid("populations", format!("sum {} != 1", p.sum())));
        }
        Ok(p)
    }

    pub fn sum(&self) -> f64 {
        self.p0 + self.pm1 + self.pp1
    }

    pub fn get(&self, m_s: i32) -> Result<f64> {
        match m_s {
            0 => Ok(self.p0),
            -1 => Ok(self.pm1),
            1 => Ok(self.pp1),
            other => Err(Error::InvalidSpinProjection(other)),
        }
    }

    fn as_vector(&self) -> Vector3<f64> {
        Vector3::new(self.p0, self.pm1, self.pp1)
    }

    /// Populations of a six-level state.
    pub fn of_state(rho: &DensityMatrix) -> Self {
        Self {
            p0: rho.population(0).unwrap_or(0.0),
            pm1: rho.population(-1).unwrap_or(0.0),
            pp1: rho.population(1).unwrap_or(0.0),
        }
    }
}

/// Closed-form electron populations after T1 hopping for time `tau_ms`,
/// starting from P0 = s1, P+1 = 1 − s1, P−1 = 0.
pub fn analytic_populations(s1: f64, kappa_per_ms: f64, tau_ms: f64) -> Result<PopulationTriple> {
    if !(tau_ms >= 0.0) || !tau_ms.is_finite() {
        return Err(invalid("tau", format!("{tau_ms} must be a finite non-negative time")));
    }
    if !(kappa_per_ms >= 0.0) {
        return Err(invalid("kappa", format!("{kappa_per_ms} must be non-negative")));
    }
    let fast = (-3.0 * kappa_per_ms * tau_ms).exp();
    let slow = (-kappa_per_ms * tau_ms).exp();
    let a = 1.0 / 6.0 - s1 / 2.0;
    let b = 0.5 * (1.0 - s1);
    Ok(PopulationTriple {
        p0: 1.0 / 3.0 - 2.0 * a * fast,
        pm1: 1.0 / 3.0 + a * fast - b * slow,
        pp1: 1.0 / 3.0 + a * fast + b * slow,
    })
}

/// One undirected hop channel between two electron levels. The rate is
/// `multiplier * kappa` in each direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateLink {
    pub a: i32,
    pub b: i32,
    pub multiplier: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateModel {
    pub kappa_per_ms: f64,
    pub links: Vec<RateLink>,
}

impl RateModel {
    /// 0 ↔ +1 and 0 ↔ −1 at κ, no +1 ↔ −1 hop.
    pub fn default_connectivity(kappa_per_ms: f64) -> Self {
        Self {
            kappa_per_ms,
            links: vec![
                RateLink { a: 0, b: 1, multiplier: 1.0 },
                RateLink { a: 0, b: -1, multiplier: 1.0 },
                RateLink { a: 1, b: -1, multiplier: 0.0 },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_per_ms >= 0.0 && self.kappa_per_ms.is_finite()) {
            return Err(invalid("kappa", "must be finite and non-negative"));
        }
        for l in &self.links {
            block_offset(l.a)?;
            block_offset(l.b)?;
            if l.a == l.b {
                return Err(invalid("links", "self-loop"));
            }
            if !(l.multiplier >= 0.0 && l.multiplier.is_finite()) {
                return Err(invalid("links", "negative or non-finite rate"));
            }
        }
        Ok(())
    }

    /// Directed hop rates (from, to, rate per ms) with rate > 0.
    pub fn hops(&self) -> Vec<(i32, i32, f64)> {
        let mut out = Vec::new();
        for l in &self.links {
            let r = l.multiplier * self.kappa_per_ms;
            if r > 0.0 {
                out.push((l.a, l.b, r));
                out.push((l.b, l.a, r));
            }
        }
        out
    }

    /// Generator on (P0, P−1, P+1): column j holds the rates out of level j.
    pub fn generator(&self) -> Result<Matrix3<f64>> {
        self.validate()?;
        let idx = |m: i32| match m {
            0 => 0,
            -1 => 1,
            _ => 2,
        };
        let mut g = Matrix3::zeros();
        for (from, to, r) in self.hops() {
            g[(idx(to), idx(from))] += r;
            g[(idx(from), idx(from))] -= r;
        }
        Ok(g)
    }
}

/// exp(G·τ)·p via the general matrix exponential.
pub fn numeric_populations(
    initial: PopulationTriple,
    model: &RateModel,
    tau_ms: f64,
) -> Result<PopulationTriple> {
    if !(tau_ms >= 0.0) {
        return Err(invalid("tau", "must be non-negative"));
    }
    let g = model.generator()?;
    let gc = DMatrix::from_iterator(3, 3, g.iter().map(|&x| c(x)));
    let e = matrix_exponential(&gc, tau_ms)?;
    let p = initial.as_vector();
    let out: Vec<f64> = (0..3)
        .map(|i| (0..3).map(|j| e[(i, j)].re * p[j]).sum())
        .collect();
    Ok(PopulationTriple {
        p0: out[0],
        pm1: out[1],
        pp1: out[2],
    })
}

/// A collapse operator with its rate in 1/ms.
#[derive(Debug, Clone, PartialEq)]
pub struct JumpOperator {
    pub label: String,
    pub op: Mat6,
    pub rate_per_ms: f64,
}

/// Hamiltonian (MHz) plus collapse channels. `sigma_qs_mhz` is carried along
/// for the quasi-static ensemble engine and is not a jump operator.
#[derive(Debug, Clone, PartialEq)]
pub struct LindbladGenerator {
    pub hamiltonian: Mat6,
    pub jumps: Vec<JumpOperator>,
    pub sigma_qs_mhz: f64,
}

/// |to⟩⟨from| ⊗ 𝟙_nuc
pub fn hop_operator(from: i32, to: i32) -> Result<Mat6> {
    let (f, t) = (block_offset(from)?, block_offset(to)?);
    let mut m = Mat6::zeros();
    m[(t, f)] = c(1.0);
    m[(t + 1, f + 1)] = c(1.0);
    Ok(m)
}

pub fn build_lindblad(
    params: &SpinSystemParams,
    gamma_phi_per_ms: f64,
    sigma_qs_mhz: f64,
) -> Result<LindbladGenerator> {
    build_lindblad_with(
        params,
        &RateModel::default_connectivity(params.kappa_per_ms()),
        gamma_phi_per_ms,
        sigma_qs_mhz,
        0.0,
    )
}

/// Generator for an arbitrary hop model and a static ¹³C detuning.
pub fn build_lindblad_with(
    params: &SpinSystemParams,
    model: &RateModel,
    gamma_phi_per_ms: f64,
    sigma_qs_mhz: f64,
    detuning_mhz: f64,
) -> Result<LindbladGenerator> {
    if !(gamma_phi_per_ms >= 0.0 && gamma_phi_per_ms.is_finite()) {
        return Err(invalid("gamma_phi", "must be finite and non-negative"));
    }
    if !(sigma_qs_mhz >= 0.0 && sigma_qs_mhz.is_finite()) {
        return Err(invalid("sigma_qs", "must be finite and non-negative"));
    }
    model.validate()?;
    let mut jumps = Vec::new();
    for (from, to, rate) in model.hops() {
        jumps.push(JumpOperator {
            label: format!("hop {from:+} -> {to:+}"),
            op: hop_operator(from, to)?,
            rate_per_ms: rate,
        });
    }
    if gamma_phi_per_ms > 0.0 {
        // 2·Iz = σz on the nucleus: off-diagonals decay as exp(−2γt)
        jumps.push(JumpOperator {
            label: "nuclear dephasing".into(),
            op: SpinOperatorSet::new().iz * c(2.0),
            rate_per_ms: gamma_phi_per_ms,
        });
    }
    Ok(LindbladGenerator {
        hamiltonian: nuclear_hamiltonian(params, detuning_mhz)?,
        jumps,
        sigma_qs_mhz,
    })
}

fn kron(a: &Mat6, b: &Mat6) -> DMatrix<C64> {
    let mut out = DMatrix::zeros(36, 36);
    for i in 0..6 {
        for j in 0..6 {
            let aij = a[(i, j)];
            if aij == c(0.0) {
                continue;
            }
            for k in 0..6 {
                for l in 0..6 {
                    out[(6 * i + k, 6 * j + l)] = aij * b[(k, l)];
                }
            }
        }
    }
    out
}

fn vec_of(m: &Mat6) -> DVector<C64> {
    nalgebra::DVector::from_iterator(36, m.iter().copied())
}

fn unvec(v: &DVector<C64>) -> Mat6 {
    Mat6::from_iterator(v.iter().copied())
}

impl LindbladGenerator {
    pub fn is_unitary(&self) -> bool {
        self.jumps.iter().all(|j| j.rate_per_ms == 0.0)
    }

    /// dρ/dt in 1/μs.
    pub fn rhs(&self, rho: &Mat6) -> Mat6 {
        let h = &self.hamiltonian;
        let mut out = (h * rho - rho * h) * C64::new(0.0, -2.0 * std::f64::consts::PI);
        for j in &self.jumps {
            if j.rate_per_ms == 0.0 {
                continue;
            }
            let l = &j.op;
            let ld = l.adjoint();
            let ldl = ld * l;
            let d = l * rho * ld - (ldl * rho + rho * ldl) * c(0.5);
            out += d * c(j.rate_per_ms / US_PER_MS);
        }
        out
    }

    /// 36×36 superoperator acting on column-stacked ρ, in 1/μs.
    pub fn superoperator(&self) -> DMatrix<C64> {
        let eye = Mat6::identity();
        let h = &self.hamiltonian;
        // vec(AρB) = (Bᵀ ⊗ A) vec(ρ)
        let mut s = (kron(&eye, h) - kron(&h.transpose(), &eye)) * C64::new(0.0, -2.0 * std::f64::consts::PI);
        for j in &self.jumps {
            if j.rate_per_ms == 0.0 {
                continue;
            }
            let l = &j.op;
            let ldl = l.adjoint() * l;
            let d = kron(&l.conjugate(), l) - (kron(&eye, &ldl) + kron(&ldl.transpose(), &eye)) * c(0.5);
            s += d * c(j.rate_per_ms / US_PER_MS);
        }
        s
    }

    /// Induced 1-norm of the superoperator, 1/μs.
    pub fn norm_per_us(&self) -> f64 {
        superoperator_norm(&self.superoperator())
    }

    /// Largest nuclear precession frequency in the Hamiltonian blocks, MHz.
    fn max_frequency(&self) -> f64 {
        LEVELS
            .iter()
            .map(|&m| {
                let off = block_offset(m).unwrap();
                let b = self.hamiltonian.fixed_view::<2, 2>(off, off).into_owned();
                let ev = b.symmetric_eigenvalues();
                (ev[0] - ev[1]).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Default RK4 step in ms: min(0.01/ν_max, 0.01/κ_max), shrunk if needed
    /// to stay at half the refusal threshold.
    pub fn default_dt_ms(&self) -> f64 {
        let nu = self.max_frequency();
        let k = self
            .jumps
            .iter()
            .map(|j| j.rate_per_ms / US_PER_MS)
            .fold(0.0, f64::max);
        let mut dt_us = f64::INFINITY;
        if nu > 0.0 {
            dt_us = dt_us.min(0.01 / nu);
        }
        if k > 0.0 {
            dt_us = dt_us.min(0.01 / k);
        }
        let n = self.norm_per_us();
        if n > 0.0 {
            dt_us = dt_us.min(0.5 * MAX_STEP_NORM / n);
        }
        if !dt_us.is_finite() {
            dt_us = 1.0;
        }
        dt_us / US_PER_MS
    }

    /// exp(L·t) as a reusable propagator.
    pub fn propagator(&self, t_ms: f64) -> Result<Propagator> {
        if !(t_ms >= 0.0) || !t_ms.is_finite() {
            return Err(invalid("t", "must be finite and non-negative"));
        }
        Ok(Propagator {
            matrix: matrix_exponential(&self.superoperator(), t_ms * US_PER_MS)?,
        })
    }
}

fn superoperator_norm(s: &DMatrix<C64>) -> f64 {
    (0..s.ncols())
        .map(|j| s.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// Exponentiated superoperator for a fixed duration.
#[derive(Debug, Clone)]
pub struct Propagator {
    matrix: DMatrix<C64>,
}

impl Propagator {
    pub fn apply(&self, rho: &DensityMatrix) -> Result<DensityMatrix> {
        let out = unvec(&(&self.matrix * vec_of(rho.matrix())));
        finish(out)
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }
}

fn finish(m: Mat6) -> Result<DensityMatrix> {
    if m.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("evolved state"));
    }
    let m = (m + m.adjoint()) * c(0.5);
    Ok(DensityMatrix::from_matrix_unchecked(m))
}

/// Fixed-step RK4 integration of the master equation for `t_ms`, with steps
/// no longer than `dt_ms`.
///
/// The generator is time independent, so one RK4 step is the fixed map
/// 1 + hL + (hL)²/2 + (hL)³/6 + (hL)⁴/24 on vec(ρ). It is built once and
/// applied per step.
pub fn evolve_lindblad(
    rho: &DensityMatrix,
    gen: &LindbladGenerator,
    t_ms: f64,
    dt_ms: f64,
) -> Result<DensityMatrix> {
    if !(t_ms >= 0.0) || !t_ms.is_finite() {
        return Err(invalid("t", "must be finite and non-negative"));
    }
    if !(dt_ms > 0.0) || !dt_ms.is_finite() {
        return Err(invalid("dt", "must be positive"));
    }
    let l = gen.superoperator();
    let dt_us = dt_ms * US_PER_MS;
    let product = dt_us * superoperator_norm(&l);
    if product > MAX_STEP_NORM {
        return Err(Error::StepTooLarge {
            product,
            limit: MAX_STEP_NORM,
        });
    }
    let t_us = t_ms * US_PER_MS;
    let steps = (t_us / dt_us).ceil().max(if t_us > 0.0 { 1.0 } else { 0.0 }) as usize;
    let mut y = vec_of(rho.matrix());
    if steps > 0 {
        let hl = l * c(t_us / steps as f64);
        let eye = DMatrix::<C64>::identity(36, 36);
        // Horner form of the degree-4 Taylor polynomial
        let mut step = &eye + &hl * c(0.25);
        step = &eye + &hl * step * c(1.0 / 3.0);
        step = &eye + &hl * step * c(0.5);
        step = &eye + &hl * step;
        let mut next = DVector::<C64>::zeros(36);
        for _ in 0..steps {
            step.mul_to(&y, &mut next);
            std::mem::swap(&mut y, &mut next);
        }
    }
    finish(unvec(&y))
}

/// Exact evolution through the 36×36 superoperator exponential.
pub fn evolve_lindblad_exact(
    rho: &DensityMatrix,
    gen: &LindbladGenerator,
    t_ms: f64,
) -> Result<DensityMatrix> {
    gen.propagator(t_ms)?.apply(rho)
}

/// Exponential dephasing rate of the m_S block coherence under the nuclear
/// pure-dephasing channel, 1/ms.
pub fn coherence_decay_rate(gamma_phi_per_ms: f64) -> f64 {
    2.0 * gamma_phi_per_ms
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qcore::{basis_index, Nuclear};
    use proptest::prelude::*;

    const T1E: f64 = 5.5;

    fn kappa() -> f64 {
        1.0 / (3.0 * T1E)
    }

    fn initial_state(s1: f64) -> DensityMatrix {
        DensityMatrix::diagonal_mixture(&[
            (basis_index(0, Nuclear::Up).unwrap(), s1),
            (basis_index(1, Nuclear::Down).unwrap(), 1.0 - s1),
        ])
        .unwrap()
    }

    /// s1|0⟩⟨0|⊗|+⟩⟨+| + (1−s1)|1↓⟩⟨1↓|
    fn superposed(s1: f64) -> DensityMatrix {
        let mut m = *initial_state(s1).matrix();
        let (u, d) = (basis_index(0, Nuclear::Up).unwrap(), basis_index(0, Nuclear::Down).unwrap());
        m[(u, u)] = c(s1 / 2.0);
        m[(d, d)] = c(s1 / 2.0);
        m[(u, d)] = c(s1 / 2.0);
        m[(d, u)] = c(s1 / 2.0);
        DensityMatrix::new(m).unwrap()
    }

    #[test]
    fn closed_form_limits() {
        let p = analytic_populations(0.8, kappa(), 0.0).unwrap();
        assert!((p.p0 - 0.8).abs() < 1e-15 && p.pm1.abs() < 1e-15 && (p.pp1 - 0.2).abs() < 1e-15);
        let p = analytic_populations(0.37, kappa(), 1e4).unwrap();
        for v in [p.p0, p.pm1, p.pp1] {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(analytic_populations(0.8, kappa(), -1.0).is_err());
    }

    #[test]
    fn closed_form_at_one_t1() {
        // frozen by hand from the three formulas at τ = T1e (3κτ = 1, κτ = 1/3)
        let p = analytic_populations(0.8, kappa(), T1E).unwrap();
        assert!((p.p0 - 0.50501).abs() < 1e-5);
        assert!((p.pm1 - 0.17584).abs() < 1e-5);
        assert!((p.pp1 - 0.31914).abs() < 1e-5);
    }

    #[test]
    fn default_generator_spectrum() {
        let g = RateModel::default_connectivity(kappa()).generator().unwrap();
        for j in 0..3 {
            assert!(g.column(j).sum().abs() < 1e-15);
        }
        let mut ev: Vec<f64> = g.eigenvalues().unwrap().iter().map(|x| x / kappa()).collect();
        ev.sort_by(f64::total_cmp);
        for (a, b) in ev.iter().zip([-3.0, -1.0, 0.0]) {
            assert!((a - b).abs() < 1e-12, "{ev:?}");
        }
    }

    #[test]
    fn numeric_route_cases() {
        let p0 = PopulationTriple::new(0.3, 0.5, 0.2).unwrap();
        let frozen = numeric_populations(p0, &RateModel::default_connectivity(0.0), 7.0).unwrap();
        assert_eq!(frozen, p0);

        let start = PopulationTriple::new(0.8, 0.0, 0.2).unwrap();
        let n = numeric_populations(start, &RateModel::default_connectivity(kappa()), T1E).unwrap();
        let a = analytic_populations(0.8, kappa(), T1E).unwrap();
        assert!((n.p0 - a.p0).abs() < 1e-10);
        assert!((n.pm1 - a.pm1).abs() < 1e-10);
        assert!((n.pp1 - a.pp1).abs() < 1e-10);

        // first order: P0 = 1 − 2κτ + 3(κτ)² − …
        let tau = 1e-4;
        let pure = PopulationTriple::new(1.0, 0.0, 0.0).unwrap();
        let n = numeric_populations(pure, &RateModel::default_connectivity(kappa()), tau).unwrap();
        let first = 1.0 - 2.0 * kappa() * tau;
        assert!((n.p0 - first).abs() < 4.0 * (kappa() * tau).powi(2));
    }

    #[test]
    fn rate_model_validation() {
        let mut m = RateModel::default_connectivity(kappa());
        m.links.push(RateLink { a: 0, b: 0, multiplier: 1.0 });
        assert!(m.generator().is_err());
        let m = RateModel {
            kappa_per_ms: -1.0,
            links: vec![],
        };
        assert!(m.generator().is_err());
        assert!(build_lindblad(&SpinSystemParams::default(), -0.1, 0.0).is_err());
        assert!(build_lindblad(&SpinSystemParams::default(), 0.0, -0.1).is_err());
    }

    #[test]
    fn superoperator_preserves_trace() {
        let gen = build_lindblad(&SpinSystemParams::default(), 0.05, 0.0).unwrap();
        let s = gen.superoperator();
        for j in 0..36 {
            let tr: C64 = (0..6).map(|d| s[(d * 6 + d, j)]).sum();
            assert!(tr.norm() < 1e-12, "column {j}: {tr}");
        }
    }

    #[test]
    fn superoperator_matches_direct_rhs() {
        let gen = build_lindblad(&SpinSystemParams::default(), 0.05, 0.0).unwrap();
        let rho = superposed(0.8);
        let direct = gen.rhs(rho.matrix());
        let via = unvec(&(gen.superoperator() * vec_of(rho.matrix())));
        assert!((direct - via).iter().all(|z| z.norm() < 1e-14));
    }

    #[test]
    fn hopping_populations_match_closed_form() {
        let params = SpinSystemParams::default();
        let gen = build_lindblad(&params, 0.0, 0.0).unwrap();
        let rho0 = superposed(0.8);
        for tau in [0.5, 2.0, T1E, 12.0, 30.0] {
            let rho = evolve_lindblad_exact(&rho0, &gen, tau).unwrap();
            let a = analytic_populations(0.8, kappa(), tau).unwrap();
            let p = PopulationTriple::of_state(&rho);
            assert!((p.p0 - a.p0).abs() < 1e-8, "tau={tau}");
            assert!((p.pm1 - a.pm1).abs() < 1e-8);
            assert!((p.pp1 - a.pp1).abs() < 1e-8);
        }
    }

    #[test]
    fn pure_dephasing_decays_coherence() {
        let params = SpinSystemParams {
            t1e_ms: 1e12,
            ..Default::default()
        };
        let model = RateModel::default_connectivity(0.0);
        let gamma = 0.2;
        let gen = build_lindblad_with(&params, &model, gamma, 0.0, 0.0).unwrap();
        let rho0 = superposed(0.8);
        let (u, d) = (2, 3);
        for tau in [0.1, 1.0, 3.0] {
            let rho = evolve_lindblad_exact(&rho0, &gen, tau).unwrap();
            let coh = rho.matrix()[(u, d)];
            let want = 0.4 * (-2.0 * gamma * tau).exp();
            assert!((coh.norm() - want).abs() < 1e-10, "tau={tau}");
            assert!((rho.population(0).unwrap() - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn unitary_generator_keeps_spectrum() {
        let params = SpinSystemParams::default();
        let gen = build_lindblad_with(&params, &RateModel::default_connectivity(0.0), 0.0, 0.0, 0.0).unwrap();
        assert!(gen.is_unitary());
        let rho0 = superposed(0.8);
        let rho = evolve_lindblad_exact(&rho0, &gen, 2.3).unwrap();
        for (a, b) in rho.eigenvalues().iter().zip(rho0.eigenvalues()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_generator_is_identity() {
        let params = SpinSystemParams {
            nu_c: Some(0.0),
            a_zz: 0.0,
            a_zx: 0.0,
            ..Default::default()
        };
        let gen = build_lindblad_with(&params, &RateModel::default_connectivity(0.0), 0.0, 0.0, 0.0).unwrap();
        let rho0 = superposed(0.8);
        let rho = evolve_lindblad(&rho0, &gen, 0.5, 0.01).unwrap();
        assert!((rho.matrix() - rho0.matrix()).iter().all(|z| z.norm() < 1e-15));
    }

    #[test]
    fn rk4_hopping_only_matches_closed_form_and_converges() {
        // hopping-only generator: no Hamiltonian
        let params = SpinSystemParams {
            nu_c: Some(0.0),
            a_zz: 0.0,
            a_zx: 0.0,
            ..Default::default()
        };
        let gen = build_lindblad(&params, 0.0, 0.0).unwrap();
        let rho0 = superposed(0.8);
        let tau = 2.0 * T1E;
        let dt = 0.05;
        let coarse = evolve_lindblad(&rho0, &gen, tau, dt).unwrap();
        let fine = evolve_lindblad(&rho0, &gen, tau, dt / 2.0).unwrap();
        let a = analytic_populations(0.8, kappa(), tau).unwrap();
        assert!((coarse.population(0).unwrap() - a.p0).abs() < 1e-7);
        let diff = (coarse.matrix() - fine.matrix()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(diff < 1e-8, "step halving changed result by {diff:e}");
        assert!((coarse.trace() - c(1.0)).norm() < 1e-9);
    }

    #[test]
    fn rk4_agrees_with_exact_propagator() {
        let gen = build_lindblad(&SpinSystemParams::default(), 0.05, 0.0).unwrap();
        let rho0 = superposed(0.8);
        let t = 0.02; // 20 μs ≈ 6 periods of the fastest block
        let exact = evolve_lindblad_exact(&rho0, &gen, t).unwrap();
        let rk4 = evolve_lindblad(&rho0, &gen, t, gen.default_dt_ms() / 4.0).unwrap();
        let diff = (exact.matrix() - rk4.matrix()).iter().map(|z| z.norm()).fold(0.0, f64::max);
        assert!(diff < 1e-7, "{diff:e}");
    }

    #[test]
    fn oversized_step_is_refused() {
        let gen = build_lindblad(&SpinSystemParams::default(), 0.0, 0.0).unwrap();
        let rho0 = superposed(0.8);
        let err = evolve_lindblad(&rho0, &gen, 1.0, 1e-3).unwrap_err();
        assert!(matches!(err, Error::StepTooLarge { .. }));
        let dt = gen.default_dt_ms();
        assert!(dt * US_PER_MS * gen.norm_per_us() <= MAX_STEP_NORM);
    }

    #[test]
    fn long_time_populations_equilibrate() {
        // Hopping alone leaves a slow nuclear-polarization mode along the
        // tilted m_S = ±1 axes, so coherences shrink but need not vanish.
        let gen = build_lindblad(&SpinSystemParams::default(), 0.0, 0.0).unwrap();
        let rho = evolve_lindblad_exact(&superposed(0.8), &gen, 40.0 * T1E).unwrap();
        for m in LEVELS {
            let off = block_offset(m).unwrap();
            let coh = rho.matrix()[(off, off + 1)].norm();
            assert!(coh < 1e-3, "m={m}: {coh:e}");
            assert!((rho.population(m).unwrap() - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn exact_evolution_is_physical() {
        let gen = build_lindblad(&SpinSystemParams::default(), 0.03, 0.0).unwrap();
        let rho0 = superposed(0.8);
        for tau in [0.0, 0.013, 1.0, 5.5, 27.0] {
            let rho = evolve_lindblad_exact(&rho0, &gen, tau).unwrap();
            assert!((rho.trace() - c(1.0)).norm() < 1e-9);
            assert!(rho.min_eigenvalue() > -1e-10);
        }
    }

    proptest! {
        #[test]
        fn populations_sum_to_one(s1 in 0.0f64..=1.0, tau in 0.0f64..100.0, k in 0.0f64..2.0) {
            let p = analytic_populations(s1, k, tau).unwrap();
            prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn closed_form_equals_rate_matrix(tau in 0.0f64..(10.0 * T1E)) {
            let start = PopulationTriple::new(0.8, 0.0, 0.2).unwrap();
            let n = numeric_populations(start, &RateModel::default_connectivity(kappa()), tau).unwrap();
            let a = analytic_populations(0.8, kappa(), tau).unwrap();
            prop_assert!((n.p0 - a.p0).abs() < 1e-10);
            prop_assert!((n.pm1 - a.pm1).abs() < 1e-10);
            prop_assert!((n.pp1 - a.pp1).abs() < 1e-10);
        }
    }
}
