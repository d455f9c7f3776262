//! Acceptance gate. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Tolerances are fixed here, not tuned.

use std::time::Instant;

use nvdephase::circuits::{swap_unitary, Engine};
use nvdephase::fitting::{extract_segment_amplitudes, fit_trace, least_squares, segments_from_gaps, DephasingOptions, FitModel, ModelKind};
use nvdephase::protocols::{
    quadrature_envelope, run_protocol, signal_frequency_mhz, simulate_protocol, default_tau_grid, initial_state,
    Protocol, ProtocolConfig, Readout,
};
use nvdephase::qcore::{apply_unitary, c, embed_block, DensityMatrix, Mat2, Mat6, C64};
use nvdephase::relaxation::{
    analytic_populations, build_lindblad, evolve_lindblad, numeric_populations, PopulationTriple, RateModel,
};
use nvdephase::spin_model::{nuclear_precession_frequency, SpinSystemParams};

struct Line {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(lines: &[Line]) -> bool {
    println!();
    for l in lines {
        println!(
            "{} criterion {} ({}): {}",
            if l.pass { "PASS" } else { "FAIL" },
            l.id,
            l.name,
            l.detail
        );
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("acceptance: {} passed, {} failed", lines.len() - failed, failed);
    failed == 0
}

fn criterion_1() -> Line {
    let p = SpinSystemParams::default();
    let start = Instant::now();
    let f: Vec<f64> = [0, -1, 1]
        .iter()
        .map(|&m| nuclear_precession_frequency(&p, m).unwrap())
        .collect();
    let elapsed = start.elapsed();
    let want = [0.158, 0.110, 0.329];
    let err = f.iter().zip(want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    Line {
        id: 1,
        name: "precession frequencies",
        pass: err <= 5e-4 && elapsed.as_secs_f64() < 1e-3,
        detail: format!(
            "nu0={:.4} nu-1={:.4} nu+1={:.4} MHz, max err {err:.1e} (tol 5e-4), {:.1} us (limit 1 ms)",
            f[0],
            f[1],
            f[2],
            elapsed.as_secs_f64() * 1e6
        ),
    }
}

fn criterion_2() -> Line {
    let p = SpinSystemParams::default();
    let kappa = p.kappa_per_ms();
    let model = RateModel::default_connectivity(kappa);
    let start_pops = PopulationTriple::new(p.s1, 0.0, 1.0 - p.s1).unwrap();
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for k in 0..1000 {
        let tau = 10.0 * p.t1e_ms * k as f64 / 999.0;
        let a = analytic_populations(p.s1, kappa, tau).unwrap();
        let n = numeric_populations(start_pops, &model, tau).unwrap();
        worst = worst.max((a.p0 - n.p0).abs()).max((a.pm1 - n.pm1).abs()).max((a.pp1 - n.pp1).abs());
    }
    let elapsed = start.elapsed().as_secs_f64();
    Line {
        id: 2,
        name: "population oracle",
        pass: worst < 1e-10 && elapsed < 1.0,
        detail: format!("max |delta| {worst:.2e} over 1000 points (tol 1e-10), {elapsed:.3} s (limit 1 s)"),
    }
}

fn criterion_3() -> Line {
    let p = SpinSystemParams::default();
    let kappa = p.kappa_per_ms();
    let gen = build_lindblad(&p, 0.0, 0.0).unwrap();
    let dt = gen.default_dt_ms();
    let grid = default_tau_grid();
    let start = Instant::now();
    let mut rho = initial_superposition(&p);
    let (mut t, mut pop_err, mut drift, mut min_eig): (f64, f64, f64, f64) = (0.0, 0.0, 0.0, 0.0);
    for &tau in &grid {
        if tau > t {
            rho = evolve_lindblad(&rho, &gen, tau - t, dt).unwrap();
            t = tau;
        }
        let a = analytic_populations(p.s1, kappa, tau).unwrap();
        let q = PopulationTriple::of_state(&rho);
        pop_err = pop_err.max((a.p0 - q.p0).abs()).max((a.pm1 - q.pm1).abs()).max((a.pp1 - q.pp1).abs());
        drift = drift.max((rho.trace() - c(1.0)).norm());
        min_eig = min_eig.min(rho.min_eigenvalue());
    }
    let elapsed = start.elapsed().as_secs_f64();
    Line {
        id: 3,
        name: "Lindblad consistency",
        pass: pop_err < 1e-7 && drift < 1e-9 && min_eig > -1e-10 && elapsed < 30.0,
        detail: format!(
            "{} grid points to {:.1} ms, dt {:.2e} ms: population err {pop_err:.2e} (tol 1e-7), trace drift {drift:.2e} (tol 1e-9), min eigenvalue {min_eig:.2e} (floor -1e-10), {elapsed:.1} s (limit 30 s)",
            grid.len(),
            grid[grid.len() - 1],
            dt
        ),
    }
}

/// State after the nuclear Hadamard.
fn initial_superposition(p: &SpinSystemParams) -> DensityMatrix {
    let rho0 = initial_state(p).unwrap();
    let h = nvdephase::circuits::gate_unitary(&nvdephase::circuits::Gate::HadamardNuclear { blocks: vec![0] }, p).unwrap();
    apply_unitary(&rho0, &h)
}

fn criterion_4() -> Line {
    let p = SpinSystemParams::default();
    let kappa = p.kappa_per_ms();
    // pure dephasing at γ gives e^{−2γτ} in the m_S = 0 block
    let gamma = 1.0 / (2.0 * p.t2star_ms);
    let cfg = ProtocolConfig {
        engine: Engine::Lindblad,
        gamma_phi: gamma,
        ..ProtocolConfig::new(Protocol::Fid)
    };
    let trace = simulate_protocol(&cfg, &p).unwrap();
    let windows = segments_from_gaps(&trace.tau);
    let nu = signal_frequency_mhz(Protocol::Fid, &p, cfg.nu_d_mhz()).unwrap();

    // frequency: free-ν sinusoid fit in each of the first windows
    let mut freq_err: f64 = 0.0;
    for &(lo, hi) in windows.iter().take(4) {
        let idx: Vec<usize> = (0..trace.len()).filter(|&i| trace.tau[i] >= lo && trace.tau[i] <= hi).collect();
        let t: Vec<f64> = idx.iter().map(|&i| trace.tau[i]).collect();
        let y: Vec<f64> = idx.iter().map(|&i| trace.signal[i]).collect();
        let seg = extract_segment_amplitudes(&t, &y, &[(lo, hi)], nu).unwrap()[0].clone();
        let mut m = FitModel::new(ModelKind::SegmentSinusoid)
            .with("b", seg.background)
            .unwrap()
            .with("a", seg.amplitude)
            .unwrap()
            .with("nu", nu * 1.01)
            .unwrap()
            .with("phi", seg.phase)
            .unwrap();
        m.origin_ms = seg.tau_center;
        let fit = least_squares(&m, &t, &y, None).unwrap();
        freq_err = freq_err.max((fit.value("nu").abs() - 0.342).abs());
    }
    let resolution = 1.0 / ((windows[0].1 - windows[0].0) * 1000.0);

    // envelope against P0(τ)·c_FID(τ)/2 with c_FID = e^{−τ/T2*}
    let seg = extract_segment_amplitudes(&trace.tau, &trace.signal, &windows, nu).unwrap();
    let mut worst: (f64, f64) = (0.0, 0.0);
    for s in &seg {
        let q = analytic_populations(p.s1, kappa, s.tau_center).unwrap();
        let model = q.p0 * (-s.tau_center / p.t2star_ms).exp() / 2.0;
        let rel = (s.amplitude / model - 1.0).abs();
        if rel > worst.0 {
            worst = (rel, s.tau_center);
        }
    }
    let freq_ok = freq_err <= 1e-3;
    let env_ok = worst.0 <= 0.02;
    Line {
        id: 4,
        name: "FID signal form",
        pass: freq_ok && env_ok,
        detail: format!(
            "segment frequency err {freq_err:.1e} MHz (tol 1e-3, window resolution {resolution:.3} MHz) [{}]; envelope vs P0*c/2 worst rel. dev {:.1}% at tau={:.1} ms (tol 2%) [{}]",
            if freq_ok { "ok" } else { "fail" },
            100.0 * worst.0,
            worst.1,
            if env_ok { "ok" } else { "fail" }
        ),
    }
}

struct RoundTrip {
    c0: Vec<f64>,
    t2: Vec<f64>,
    t1e: Vec<f64>,
}

fn round_trip(protocol: Protocol, runs: u64) -> RoundTrip {
    let p = SpinSystemParams::default();
    let mut out = RoundTrip {
        c0: vec![],
        t2: vec![],
        t1e: vec![],
    };
    let opts = DephasingOptions {
        s1: p.s1,
        kappa_init: p.kappa_per_ms(),
        ..Default::default()
    };
    for seed in 0..runs {
        let cfg = ProtocolConfig {
            shots: 10_000,
            seed,
            readout: Readout {
                d0: 0.086,
                ..Readout::default()
            },
            ..ProtocolConfig::new(protocol)
        };
        let trace = run_protocol(&cfg, &p).unwrap();
        let nu = signal_frequency_mhz(protocol, &p, cfg.nu_d_mhz()).unwrap();
        let (_, fit) = fit_trace(protocol, &trace.tau, &trace.signal, nu, &opts).unwrap();
        out.c0.push(fit.c0());
        out.t2.push(fit.t2_ms());
        out.t1e.push(fit.t1e_ms());
    }
    out
}

fn within(v: &[f64], target: f64, rel: f64) -> usize {
    v.iter().filter(|x| ((*x / target) - 1.0).abs() <= rel).count()
}

fn in_band(v: &[f64], lo: f64, hi: f64) -> usize {
    v.iter().filter(|x| (lo..=hi).contains(*x)).count()
}

fn criteria_5_and_6() -> (Line, Line) {
    let start = Instant::now();
    let fid = round_trip(Protocol::Fid, 100);
    let hahn = round_trip(Protocol::Hahn, 100);
    let elapsed = start.elapsed().as_secs_f64();
    let counts = [
        within(&fid.c0, 0.80, 0.05),
        within(&fid.t2, 8.66, 0.05),
        within(&hahn.c0, 0.76, 0.05),
        within(&hahn.t2, 14.10, 0.05),
    ];
    let l5 = Line {
        id: 5,
        name: "parameter round trip",
        pass: counts.iter().all(|&n| n >= 95) && elapsed < 300.0,
        detail: format!(
            "runs within 5%: c0_FID {}/100, T2* {}/100, c0_Hahn {}/100, T2 {}/100 (need 95), {elapsed:.1} s (limit 300 s)",
            counts[0], counts[1], counts[2], counts[3]
        ),
    };
    let r_fid: Vec<f64> = fid.t2.iter().zip(&fid.t1e).map(|(a, b)| a / b).collect();
    let r_hahn: Vec<f64> = hahn.t2.iter().zip(&hahn.t1e).map(|(a, b)| a / b).collect();
    let (n1, n2) = (in_band(&r_fid, 1.5, 1.7), in_band(&r_hahn, 2.4, 2.8));
    let median = |v: &[f64]| {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        s[s.len() / 2]
    };
    let l6 = Line {
        id: 6,
        name: "T2/T1e ratios",
        pass: n1 >= 95 && n2 >= 95,
        detail: format!(
            "T2*/T1e median {:.3}, {n1}/100 in [1.5, 1.7]; T2/T1e median {:.3}, {n2}/100 in [2.4, 2.8] (need 95)",
            median(&r_fid),
            median(&r_hahn)
        ),
    };
    (l5, l6)
}

fn criterion_7() -> Line {
    let p = SpinSystemParams::default();
    let mut pass = true;
    let mut parts = vec![];
    for sigma in [1e-4, 2e-4, 5e-4] {
        let tau_check_ms = 0.375 / sigma / 1000.0;
        let grid: Vec<f64> = (0..=12).map(|k| tau_check_ms * k as f64 / 8.0).collect();
        let base = ProtocolConfig {
            tau_grid: grid.clone(),
            engine: Engine::Ensemble,
            kappa: Some(0.0),
            sigma_qs: sigma,
            ensemble_size: 256,
            seed: 5,
            ..ProtocolConfig::new(Protocol::Fid)
        };
        let hahn = quadrature_envelope(
            &ProtocolConfig {
                protocol: Protocol::Hahn,
                nu_d: None,
                ..base.clone()
            },
            &p,
        )
        .unwrap();
        let fid = quadrature_envelope(&base, &p).unwrap();
        let h: Vec<f64> = hahn.iter().map(|e| e.2).collect();
        let spread = h.iter().cloned().fold(f64::MIN, f64::max) - h.iter().cloned().fold(f64::MAX, f64::min);
        let i_check = grid.iter().position(|t| (*t - tau_check_ms).abs() < 1e-12).unwrap();
        let ratio = fid[i_check].2 / fid[0].2;
        let ok = spread < 1e-3 && ratio < 0.5;
        pass &= ok;
        parts.push(format!(
            "sigma={sigma:.0e} MHz: Hahn spread {spread:.1e} (tol 1e-3), FID at {tau_check_ms:.2} ms = {ratio:.3} of initial (limit 0.5)"
        ));
    }
    Line {
        id: 7,
        name: "echo refocusing",
        pass,
        detail: parts.join("; "),
    }
}

fn criterion_8() -> Line {
    // state after free evolution: P0·|0⟩⟨0|⊗ϱ0 + P−1·|−1⟩⟨−1|⊗E/2 + P+1·|+1⟩⟨+1|⊗ϱ+1
    let (p0, pm1, pp1) = (0.5, 0.2, 0.3);
    let coh = C64::from_polar(0.7, 1.1) * c(0.5);
    let rho_n0 = Mat2::new(c(0.5), coh, coh.conj(), c(0.5));
    let rho_np = Mat2::new(c(0.1), C64::new(0.05, 0.02), C64::new(0.05, -0.02), c(0.9));
    let m = embed_block(0, &(rho_n0 * c(p0))).unwrap()
        + embed_block(-1, &(Mat2::identity() * c(pm1 / 2.0))).unwrap()
        + embed_block(1, &(rho_np * c(pp1))).unwrap();
    let rho = DensityMatrix::new(m).unwrap();
    let out = apply_unitary(&rho, &swap_unitary());

    // expected: P0·ϱ_e⊗|↑⟩⟨↑| + P−1·(E/2)_e⊗|↓⟩⟨↓| + unchanged +1 block
    let (z_up, z_dn, m_up, m_dn) = (2, 3, 4, 5);
    let mut want = Mat6::zeros();
    want[(z_up, z_up)] = c(p0 / 2.0);
    want[(m_up, m_up)] = c(p0 / 2.0);
    want[(z_up, m_up)] = coh * c(p0);
    want[(m_up, z_up)] = coh.conj() * c(p0);
    want[(z_dn, z_dn)] = c(pm1 / 2.0);
    want[(m_dn, m_dn)] = c(pm1 / 2.0);
    want.fixed_view_mut::<2, 2>(0, 0).copy_from(&(rho_np * c(pp1)));
    let err = (out.matrix() - want).iter().map(|z| z.norm()).fold(0.0, f64::max);
    // nuclear register diagonal inside the electron {|0⟩, |−1⟩} subspace
    let mut nuc_offdiag: f64 = 0.0;
    for i in 2..6 {
        for j in 2..6 {
            if i % 2 != j % 2 {
                nuc_offdiag = nuc_offdiag.max(out.matrix()[(i, j)].norm());
            }
        }
    }
    Line {
        id: 8,
        name: "SWAP structure",
        pass: err < 1e-12 && nuc_offdiag < 1e-12,
        detail: format!("max element err {err:.1e}, nuclear off-diagonal {nuc_offdiag:.1e} (tol 1e-12)"),
    }
}

fn criterion_9() -> Line {
    let p = SpinSystemParams::default();
    let cfgs = [
        ProtocolConfig {
            shots: 5000,
            seed: 42,
            ..ProtocolConfig::new(Protocol::Fid)
        },
        ProtocolConfig {
            shots: 5000,
            seed: 42,
            engine: Engine::Ensemble,
            sigma_qs: 3e-4,
            ensemble_size: 8,
            tau_grid: (0..40).map(|k| 0.05 * k as f64).collect(),
            ..ProtocolConfig::new(Protocol::Hahn)
        },
    ];
    let mut identical = true;
    for cfg in &cfgs {
        let outputs: Vec<(String, String)> = [1usize, 1, 4, 7]
            .iter()
            .map(|&threads| {
                let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
                let t = pool.install(|| run_protocol(cfg, &p)).unwrap();
                (t.to_csv(), t.to_json())
            })
            .collect();
        identical &= outputs.windows(2).all(|w| w[0] == w[1]);
    }
    Line {
        id: 9,
        name: "determinism",
        pass: identical,
        detail: format!(
            "CSV and JSON byte-identical across repeated runs and 1/4/7 worker threads: {identical}"
        ),
    }
}

fn main() {
    let mut lines = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4()];
    let (l5, l6) = criteria_5_and_6();
    lines.push(l5);
    lines.push(l6);
    lines.push(criterion_7());
    lines.push(criterion_8());
    lines.push(criterion_9());
    if !report(&lines) {
        std::process::exit(1);
    }
}
