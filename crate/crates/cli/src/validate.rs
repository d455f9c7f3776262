//! Oracle-equivalence checks run by `nvdephase validate`.

use nvdephase::circuits::{
    default_pi_blocks, gate_unitary, readout_p0, swap_unitary, Circuit, CircuitRunner, Engine, Gate, Noise,
};
use nvdephase::protocols::{fid_analytic, initial_state, signal_frequency_mhz, Protocol, ProtocolConfig};
use nvdephase::qcore::{apply_unitary, c, DensityMatrix, Mat6};
use nvdephase::relaxation::{
    analytic_populations, build_lindblad, evolve_lindblad, evolve_lindblad_exact, numeric_populations,
    PopulationTriple, RateModel,
};
use nvdephase::spin_model::{nuclear_precession_frequency, SpinSystemParams};

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    /// Measured quantity, already formatted.
    pub value: String,
    pub tolerance: String,
    pub pass: bool,
}

fn check(name: &str, value: String, tolerance: String, pass: bool) -> Check {
    Check {
        name: name.into(),
        value,
        tolerance,
        pass,
    }
}

fn max_abs(a: &Mat6, b: &Mat6) -> f64 {
    (a - b).iter().map(|z| z.norm()).fold(0.0, f64::max)
}

fn pop_diff(a: &PopulationTriple, b: &PopulationTriple) -> f64 {
    (a.p0 - b.p0).abs().max((a.pm1 - b.pm1).abs()).max((a.pp1 - b.pp1).abs())
}

/// Nuclear Hadamard applied to the prepared state.
fn superposition(p: &SpinSystemParams) -> Result<DensityMatrix, CliError> {
    let h = gate_unitary(&Gate::HadamardNuclear { blocks: vec![0] }, p)?;
    Ok(apply_unitary(&initial_state(p)?, &h))
}

fn frequencies(p: &SpinSystemParams, out: &mut Vec<Check>) -> Result<(), CliError> {
    for (m, want) in [(0, 0.158), (-1, 0.110), (1, 0.329)] {
        let f = nuclear_precession_frequency(p, m)?;
        out.push(check(
            &format!("precession frequency m_S={m:+}"),
            format!("{f:.3} MHz"),
            format!("|{want:.3} - nu| < 5e-4"),
            (f - want).abs() < 5e-4,
        ));
    }
    let nu_d = Protocol::Fid.default_nu_d_mhz();
    let f = signal_frequency_mhz(Protocol::Fid, p, nu_d)?;
    out.push(check(
        "FID signal frequency |nu_C + nu_d|",
        format!("{:.3} MHz", f.abs()),
        "|0.342 - nu| < 1e-9".into(),
        (f.abs() - 0.342).abs() < 1e-9,
    ));
    Ok(())
}

fn populations(p: &SpinSystemParams, out: &mut Vec<Check>) -> Result<(), CliError> {
    let kappa = p.kappa_per_ms();
    let model = RateModel::default_connectivity(kappa);
    let start = PopulationTriple::new(p.s1, 0.0, 1.0 - p.s1)?;
    let (mut sum_err, mut diff): (f64, f64) = (0.0, 0.0);
    for k in 0..200 {
        let tau = 10.0 * p.t1e_ms * k as f64 / 199.0;
        let a = analytic_populations(p.s1, kappa, tau)?;
        let n = numeric_populations(start, &model, tau)?;
        sum_err = sum_err.max((a.sum() - 1.0).abs()).max((n.sum() - 1.0).abs());
        diff = diff.max(pop_diff(&a, &n));
    }
    out.push(check(
        "population sum",
        format!("{sum_err:.1e}"),
        "< 1e-12".into(),
        sum_err < 1e-12,
    ));
    out.push(check(
        "analytic vs numeric populations",
        format!("{diff:.1e}"),
        "< 1e-10".into(),
        diff < 1e-10,
    ));
    Ok(())
}

fn lindblad(p: &SpinSystemParams, out: &mut Vec<Check>) -> Result<(), CliError> {
    let kappa = p.kappa_per_ms();
    let gen = build_lindblad(p, 0.0, 0.0)?;
    let rho = superposition(p)?;
    let mut diff: f64 = 0.0;
    for tau in [0.0, 1.0, 5.5, 20.0] {
        let r = evolve_lindblad_exact(&rho, &gen, tau)?;
        diff = diff.max(pop_diff(&analytic_populations(p.s1, kappa, tau)?, &PopulationTriple::of_state(&r)));
    }
    out.push(check(
        "Lindblad vs closed-form populations",
        format!("{diff:.1e}"),
        "< 1e-9".into(),
        diff < 1e-9,
    ));
    // coherences oscillate at MHz rates, so the phase error of the default
    // step dominates; a quarter step brings it under the tolerance
    let tau = 0.1;
    let exact = evolve_lindblad_exact(&rho, &gen, tau)?;
    let rk4 = evolve_lindblad(&rho, &gen, tau, gen.default_dt_ms() / 4.0)?;
    let d = max_abs(exact.matrix(), rk4.matrix());
    out.push(check(
        "RK4 vs exact propagator (0.1 ms)",
        format!("{d:.1e}"),
        "< 1e-9".into(),
        d < 1e-9,
    ));
    Ok(())
}

fn gates(p: &SpinSystemParams, out: &mut Vec<Check>) -> Result<(), CliError> {
    let s = swap_unitary();
    let sq = s.matrix() * s.matrix();
    let inv = max_abs(&sq, &Mat6::identity());
    out.push(check("SWAP involution", format!("{inv:.1e}"), "< 1e-15".into(), inv < 1e-15));
    let mut expected = Mat6::identity();
    expected[(3, 3)] = c(0.0);
    expected[(4, 4)] = c(0.0);
    expected[(3, 4)] = c(1.0);
    expected[(4, 3)] = c(1.0);
    let d = max_abs(s.matrix(), &expected);
    out.push(check(
        "SWAP structure |0dn> <-> |-1up>",
        format!("{d:.1e}"),
        "exact".into(),
        d == 0.0,
    ));
    let all = [
        Gate::HadamardNuclear { blocks: vec![0] },
        Gate::PiXNuclear { blocks: default_pi_blocks() },
        Gate::SwapE0M1,
        Gate::MwPulse { angle_deg: 90.0, phase_rad: 0.7 },
        Gate::MwPulse { angle_deg: 180.0, phase_rad: -2.0 },
        Gate::FreeEvolution { duration_ms: 30.0, engine: Engine::Analytic },
    ];
    let mut worst: f64 = 0.0;
    for g in &all {
        worst = worst.max(gate_unitary(g, p)?.unitarity_error());
    }
    out.push(check("gate unitarity", format!("{worst:.1e}"), "< 1e-12".into(), worst < 1e-12));
    Ok(())
}

fn echo(p: &SpinSystemParams, out: &mut Vec<Check>) -> Result<(), CliError> {
    let rho0 = initial_state(p)?;
    let tau = 1.0;
    let spread = |circuit: &Circuit| -> Result<f64, CliError> {
        let mut v = Vec::new();
        // detunings chosen so no phase offset is a multiple of π at 1 ms
        for delta in [-3e-4, -1.3e-4, 0.0, 1.1e-4, 2.5e-4] {
            let runner = CircuitRunner::new(p, Noise::ensemble_member(0.0, 0.0, delta))?;
            v.push(readout_p0(&runner.run(&rho0, circuit, tau)?));
        }
        let hi = v.iter().cloned().fold(f64::MIN, f64::max);
        let lo = v.iter().cloned().fold(f64::MAX, f64::min);
        Ok(hi - lo)
    };
    let hahn = spread(&Circuit::hahn(Protocol::Hahn.default_nu_d_mhz(), 0.0, default_pi_blocks()))?;
    out.push(check(
        "echo refocuses static detuning (1 ms)",
        format!("{hahn:.1e}"),
        "spread < 1e-9".into(),
        hahn < 1e-9,
    ));
    let fid = spread(&Circuit::fid(Protocol::Fid.default_nu_d_mhz(), 0.0))?;
    out.push(check(
        "FID does not refocus (1 ms)",
        format!("{fid:.1e}"),
        "spread > 1e-2".into(),
        fid > 1e-2,
    ));
    Ok(())
}

fn closed_form(p: &SpinSystemParams, out: &mut Vec<Check>) -> Result<(), CliError> {
    let cfg = ProtocolConfig {
        tau_grid: vec![0.0],
        ..ProtocolConfig::new(Protocol::Fid)
    };
    let s = fid_analytic(&cfg, p)?.signal[0];
    out.push(check(
        "FID signal at tau=0, phi0=0",
        format!("{s:.4}"),
        "|0.40 - s| < 1e-12".into(),
        (s - 0.40).abs() < 1e-12,
    ));
    Ok(())
}

/// Runs every check on `p`. An error inside a group becomes a failed row.
pub fn run_checks(p: &SpinSystemParams) -> Vec<Check> {
    type Group = fn(&SpinSystemParams, &mut Vec<Check>) -> Result<(), CliError>;
    let groups: [(&str, Group); 6] = [
        ("frequencies", frequencies),
        ("populations", populations),
        ("lindblad", lindblad),
        ("gates", gates),
        ("echo", echo),
        ("closed form", closed_form),
    ];
    let mut out = Vec::new();
    for (name, g) in groups {
        if let Err(e) = g(p, &mut out) {
            out.push(check(name, format!("error: {e}"), "-".into(), false));
        }
    }
    out
}

pub fn render_table(checks: &[Check]) -> String {
    let w0 = checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5) + 2;
    let w1 = checks.iter().map(|c| c.value.len()).max().unwrap_or(5).max(5) + 2;
    let w2 = checks.iter().map(|c| c.tolerance.len()).max().unwrap_or(9).max(9) + 2;
    let mut s = format!("{:w0$}{:w1$}{:w2$}result\n", "check", "value", "tolerance");
    for c in checks {
        s += &format!(
            "{:w0$}{:w1$}{:w2$}{}\n",
            c.name,
            c.value,
            c.tolerance,
            if c.pass { "PASS" } else { "FAIL" }
        );
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    s += &format!("{} checks, {} failed\n", checks.len(), failed);
    s
}
