//! The four verbs: simulate, fit, validate, plot.

use std::path::{Path, PathBuf};

use clap::Args;
use nvdephase::circuits::Engine;
use nvdephase::fitting::{
    extract_segment_amplitudes, fit_global, fit_trace, segments_from_gaps, DephasingOptions, FitResult,
    SegmentAmplitude,
};
use nvdephase::protocols::{run_protocol, signal_frequency_mhz, Protocol, SignalTrace, SCHEMA_VERSION};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::config::{Format, RunConfig};
use crate::svg::{self, Panel, Series, Style};
use crate::CliError;

/// What `simulate` writes as JSON: the effective configuration and the trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationRecord {
    pub schema_version: u32,
    pub config: RunConfig,
    pub trace: SignalTrace,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    /// JSON run configuration (or a previous simulation record).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set spin.t1e_ms=6.0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// fid or hahn.
    #[arg(long)]
    pub protocol: Option<String>,
    /// analytic, lindblad or ensemble.
    #[arg(long)]
    pub engine: Option<String>,
    /// Shots per τ point; 0 writes the noiseless signal.
    #[arg(long)]
    pub shots: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for the τ sweep. Results do not depend on it.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct FitArgs {
    /// Trace as CSV, trace JSON, or a simulation record.
    pub trace: PathBuf,
    #[arg(long)]
    pub protocol: Option<String>,
    /// Readout detuning ν_d, MHz. Sets the expected signal frequency.
    #[arg(long = "nu-d", allow_hyphen_values = true)]
    pub nu_d: Option<f64>,
    /// Signal frequency in MHz, overriding the one derived from ν_d.
    #[arg(long, allow_hyphen_values = true)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Parameter mask `name=fixed:value` or `name=free`, for kappa, d0, c0.
    #[arg(long, value_name = "NAME=SPEC")]
    pub mask: Vec<String>,
    /// Also fit the whole trace in one pass.
    #[arg(long)]
    pub global: bool,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct PlotArgs {
    /// Traces and/or fit reports.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Logarithmic amplitude axis for fit reports.
    #[arg(long)]
    pub log: bool,
    #[arg(long)]
    pub protocol: Option<String>,
    #[arg(long = "nu-d", allow_hyphen_values = true)]
    pub nu_d: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    pub nu: Option<f64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

fn parse_protocol(s: &str) -> Result<Protocol, CliError> {
    s.parse().map_err(|e: nvdephase::Error| CliError::Config(e.to_string()))
}

fn parse_engine(s: &str) -> Result<Engine, CliError> {
    s.parse().map_err(|e: nvdephase::Error| CliError::Config(e.to_string()))
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    std::fs::write(path, text)?;
    Ok(())
}

/// Runs a simulation and returns the paths written.
pub fn simulate(args: &SimulateArgs) -> Result<Vec<PathBuf>, CliError> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&args.set)?;
    if let Some(p) = &args.protocol {
        cfg.protocol.protocol = parse_protocol(p)?;
    }
    if let Some(e) = &args.engine {
        cfg.protocol.engine = parse_engine(e)?;
    }
    if let Some(n) = args.shots {
        cfg.protocol.shots = n;
    }
    if let Some(s) = args.seed {
        cfg.protocol.seed = s;
    }
    cfg.spin.validate()?;
    cfg.protocol.validate()?;
    cfg.protocol = cfg.protocol.resolved(&cfg.spin);

    let run = || run_protocol(&cfg.protocol, &cfg.spin);
    let trace = match args.threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| CliError::Failed(e.to_string()))?
            .install(run)?,
        None => run()?,
    };

    let dir = args.out.clone().unwrap_or_else(|| cfg.output.resolved_dir());
    let stem = cfg.output.stem.clone();
    let mut written = Vec::new();
    for f in &cfg.output.formats {
        let path = match f {
            Format::Csv => dir.join(format!("{stem}.csv")),
            Format::Json => dir.join(format!("{stem}.json")),
            Format::Svg => dir.join(format!("{stem}.svg")),
        };
        let text = match f {
            Format::Csv => trace.to_csv(),
            Format::Json => {
                let rec = SimulationRecord {
                    schema_version: SCHEMA_VERSION,
                    config: cfg.clone(),
                    trace: trace.clone(),
                };
                serde_json::to_string_pretty(&rec).expect("record serializes") + "\n"
            }
            Format::Svg => trace_svg(&trace, &cfg, None)?,
        };
        write_file(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

/// A trace file plus the configuration it carries, if any.
pub fn load_trace(path: &Path) -> Result<(SignalTrace, Option<RunConfig>), CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Failed(format!("cannot read {}: {e}", path.display())))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if !is_json {
        return Ok((SignalTrace::from_csv(&text)?, None));
    }
    let v: Value = serde_json::from_str(&text).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
    if v.get("trace").is_some() && v.get("config").is_some() {
        let rec: SimulationRecord =
            serde_json::from_value(v).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
        rec.trace.validate()?;
        let mut cfg = rec.config;
        cfg.protocol = rec.trace.meta.clone();
        return Ok((rec.trace, Some(cfg)));
    }
    let t = SignalTrace::from_json(&text)?;
    let cfg = RunConfig {
        protocol: t.meta.clone(),
        ..RunConfig::default()
    };
    Ok((t, Some(cfg)))
}

/// Effective configuration for reading a trace: `--config`, else what the
/// trace carries, else defaults. Returns it with the protocol and the signal
/// frequency to demodulate at.
fn analysis_context(
    carried: Option<RunConfig>,
    config: &Option<PathBuf>,
    set: &[String],
    protocol: &Option<String>,
    nu_d: Option<f64>,
    nu: Option<f64>,
) -> Result<(RunConfig, Protocol, f64), CliError> {
    let mut cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => carried.unwrap_or_default(),
    };
    cfg.apply_overrides(set)?;
    cfg.spin.validate()?;
    if let Some(p) = protocol {
        let p = parse_protocol(p)?;
        if p != cfg.protocol.protocol {
            cfg.protocol.protocol = p;
            cfg.protocol.nu_d = None;
        }
    }
    if let Some(d) = nu_d {
        cfg.protocol.nu_d = Some(d);
    }
    let protocol = cfg.protocol.protocol;
    let freq = match nu {
        Some(f) => f,
        None => signal_frequency_mhz(protocol, &cfg.spin, cfg.protocol.nu_d_mhz())?,
    };
    if !(freq.is_finite() && freq != 0.0) {
        return Err(CliError::Config("signal frequency must be finite and non-zero".into()));
    }
    Ok((cfg, protocol, freq))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Mask {
    Free,
    Fixed(f64),
}

fn parse_mask(s: &str) -> Result<(String, Mask), CliError> {
    let bad = || CliError::Config(format!("mask `{s}` is not name=fixed:value or name=free"));
    let (name, spec) = s.split_once('=').ok_or_else(bad)?;
    if !matches!(name, "kappa" | "d0" | "c0") {
        return Err(CliError::Config(format!("mask `{s}`: only kappa, d0 and c0 can be masked")));
    }
    let mask = if spec == "free" {
        Mask::Free
    } else {
        let v: f64 = spec.strip_prefix("fixed:").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        if !v.is_finite() {
            return Err(bad());
        }
        Mask::Fixed(v)
    };
    Ok((name.to_string(), mask))
}

/// Written by `fit` and read back by `plot`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitReport {
    pub schema_version: u32,
    pub source: String,
    pub protocol: Protocol,
    /// Demodulation frequency, MHz.
    pub nu_mhz: f64,
    pub options: DephasingOptions,
    pub converged: bool,
    pub segments: Vec<SegmentAmplitude>,
    pub background: FitResult,
    pub envelope: FitResult,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub global: Option<FitResult>,
}

fn cell(r: &FitResult, name: &str, scale: impl Fn(f64, Option<f64>) -> (f64, Option<f64>)) -> String {
    let Some(p) = r.get(name) else {
        return "n/a".into();
    };
    let (v, e) = scale(p.value, p.stderr);
    if p.fixed {
        format!("{v:.4} (fixed)")
    } else {
        match e {
            Some(e) if r.converged => format!("{v:.4} ± {e:.4}"),
            _ => format!("{v:.4}"),
        }
    }
}

impl FitReport {
    /// Table in the layout of a "parameters obtained by fitting" summary.
    pub fn summary_table(&self) -> String {
        let (label, tname) = match self.protocol {
            Protocol::Fid => ("13C, FID", "T2* (ms)"),
            Protocol::Hahn => ("13C, Hahn echo", "T2 (ms)"),
        };
        let id = |v: f64, e: Option<f64>| (v, e);
        let t1e = |k: f64, e: Option<f64>| (1.0 / (3.0 * k), e.map(|e| e / (3.0 * k * k)));
        let cols = [
            ("c0", cell(&self.envelope, "c0", id)),
            (tname, cell(&self.envelope, "t2", id)),
            ("T1e (ms)", cell(&self.background, "kappa", t1e)),
            ("d0", cell(&self.background, "d0", id)),
        ];
        let w0 = label.len().max(6) + 2;
        let widths: Vec<usize> = cols.iter().map(|(h, v)| h.chars().count().max(v.chars().count()) + 2).collect();
        let mut out = String::from("Parameters obtained by fitting\n");
        out += &format!("{:w0$}", "signal");
        for ((h, _), w) in cols.iter().zip(&widths) {
            out += &format!("{h:w$}", w = *w);
        }
        out += "\n";
        out += &format!("{label:w0$}");
        for ((_, v), w) in cols.iter().zip(&widths) {
            out += &format!("{v:w$}", w = *w);
        }
        out.trim_end().to_string() + "\n"
    }
}

/// Fits a trace. Returns the report and the path it was written to.
pub fn fit(args: &FitArgs) -> Result<(FitReport, PathBuf), CliError> {
    let (trace, carried) = load_trace(&args.trace)?;
    if trace.is_empty() {
        return Err(CliError::Failed(format!("{} holds no samples", args.trace.display())));
    }
    let (cfg, protocol, nu) = analysis_context(carried, &args.config, &args.set, &args.protocol, args.nu_d, args.nu)?;
    let mut fix = cfg.fit.clone();
    for m in &args.mask {
        let (name, mask) = parse_mask(m)?;
        let v = match mask {
            Mask::Free => None,
            Mask::Fixed(v) => Some(v),
        };
        match name.as_str() {
            "kappa" => fix.fix_kappa = v,
            "d0" => fix.fix_d0 = v,
            _ => fix.fix_c0 = v,
        }
    }
    let opts = DephasingOptions {
        s1: cfg.spin.s1,
        kappa_init: fix.fix_kappa.unwrap_or_else(|| cfg.protocol.kappa_per_ms(&cfg.spin)),
        fix_kappa: fix.fix_kappa.is_some(),
        fixed_d0: fix.fix_d0,
        fixed_c0: fix.fix_c0,
    };
    let (segments, dfit) = fit_trace(protocol, &trace.tau, &trace.signal, nu, &opts)?;
    let global = if args.global || fix.global {
        Some(fit_global(protocol, &trace.tau, &trace.signal, nu, &dfit, &segments, &opts)?)
    } else {
        None
    };
    let report = FitReport {
        schema_version: SCHEMA_VERSION,
        source: args.trace.display().to_string(),
        protocol,
        nu_mhz: nu,
        options: opts,
        converged: segments.iter().all(|s| s.converged)
            && dfit.converged()
            && global.as_ref().is_none_or(|g| g.converged),
        segments,
        background: dfit.background,
        envelope: dfit.envelope,
        global,
    };
    let dir = args.out.clone().unwrap_or_else(|| cfg.output.resolved_dir());
    let stem = args.trace.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or("trace".into());
    let path = dir.join(format!("{stem}.fit.json"));
    write_file(&path, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
    Ok((report, path))
}

/// Non-convergence messages worth printing as warnings.
pub fn fit_warnings(r: &FitReport) -> Vec<String> {
    let mut w = Vec::new();
    let n_bad = r.segments.iter().filter(|s| !s.converged).count();
    if n_bad > 0 {
        w.push(format!("{n_bad} of {} window fits did not converge", r.segments.len()));
    }
    for (name, f) in [("background", &r.background), ("envelope", &r.envelope)] {
        if !f.converged {
            w.push(format!("{name} fit did not converge: {}", f.message));
        }
    }
    if let Some(g) = &r.global {
        if !g.converged {
            w.push(format!("global fit did not converge: {}", g.message));
        }
    }
    w
}

fn dense(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

/// Signal against τ for the first and last window, with the window
/// sinusoid fits overlaid when they succeed.
fn trace_svg(trace: &SignalTrace, cfg: &RunConfig, nu: Option<f64>) -> Result<String, CliError> {
    if trace.is_empty() {
        return Err(CliError::Failed("trace holds no samples".into()));
    }
    let nu = match nu {
        Some(f) => f,
        None => signal_frequency_mhz(cfg.protocol.protocol, &cfg.spin, cfg.protocol.nu_d_mhz())?,
    };
    let windows = segments_from_gaps(&trace.tau);
    let mut picks = vec![windows[0]];
    if windows.len() > 1 {
        picks.push(windows[windows.len() - 1]);
    }
    let panels = picks
        .iter()
        .map(|&(lo, hi)| {
            let pts: Vec<(f64, f64)> = trace
                .tau
                .iter()
                .zip(&trace.signal)
                .filter(|(t, _)| **t >= lo && **t <= hi)
                .map(|(t, s)| (*t, *s))
                .collect();
            let mut series = vec![Series {
                label: "signal".into(),
                points: pts,
                style: Style::Markers,
                color: "black",
            }];
            if let Ok(seg) = extract_segment_amplitudes(&trace.tau, &trace.signal, &[(lo, hi)], nu) {
                let s = &seg[0];
                let curve = dense(lo, hi, 200)
                    .into_iter()
                    .map(|t| {
                        let ph = 2.0 * std::f64::consts::PI * nu * (t - s.tau_center) * 1000.0 + s.phase;
                        (t, s.background + s.amplitude * ph.sin())
                    })
                    .collect();
                series.push(Series {
                    label: format!("fit, amplitude {:.4}", s.amplitude),
                    points: curve,
                    style: Style::Line,
                    color: "#c0392b",
                });
            }
            Panel {
                title: format!("{:?}, tau {lo:.2} to {hi:.2} ms", cfg.protocol.protocol),
                x_label: "tau (ms)".into(),
                y_label: "signal".into(),
                log_y: false,
                series,
            }
        })
        .collect::<Vec<_>>();
    Ok(svg::render(&panels))
}

fn report_svg(r: &FitReport, log: bool) -> Result<String, CliError> {
    if r.segments.is_empty() {
        return Err(CliError::Failed("fit report holds no windows".into()));
    }
    let tau: Vec<f64> = r.segments.iter().map(|s| s.tau_center).collect();
    let grid = dense(0.0, tau.iter().cloned().fold(0.0, f64::max), 200);
    let curve = |f: &FitResult| -> Vec<(f64, f64)> {
        let m = f.fitted_model();
        let p: Vec<f64> = m.params.iter().map(|p| p.value).collect();
        grid.iter().filter_map(|&t| Some((t, m.evaluate(&p, t)?))).collect()
    };
    let bg = Panel {
        title: "Background".into(),
        x_label: "tau (ms)".into(),
        y_label: "background".into(),
        log_y: false,
        series: vec![
            Series {
                label: "window fits".into(),
                points: r.segments.iter().map(|s| (s.tau_center, s.background)).collect(),
                style: Style::Markers,
                color: "black",
            },
            Series {
                label: "fit".into(),
                points: curve(&r.background),
                style: Style::Line,
                color: "#2c7fb8",
            },
        ],
    };
    let amp = Panel {
        title: "Oscillation amplitude".into(),
        x_label: "tau (ms)".into(),
        y_label: "amplitude".into(),
        log_y: log,
        series: vec![
            Series {
                label: "window fits".into(),
                points: r.segments.iter().map(|s| (s.tau_center, s.amplitude)).collect(),
                style: Style::Markers,
                color: "black",
            },
            Series {
                label: "fit".into(),
                points: curve(&r.envelope),
                style: Style::Line,
                color: "#c0392b",
            },
        ],
    };
    Ok(svg::render(&[bg, amp]))
}

/// Plots each input. Every input is rendered before any file is written, so
/// a bad input leaves nothing behind.
pub fn plot(args: &PlotArgs) -> Result<Vec<PathBuf>, CliError> {
    let mut docs = Vec::new();
    for path in &args.inputs {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Failed(format!("cannot read {}: {e}", path.display())))?;
        let report = serde_json::from_str::<Value>(&text)
            .ok()
            .filter(|v| v.get("segments").is_some() && v.get("envelope").is_some());
        let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or("plot".into());
        let svg = match report {
            Some(v) => {
                let r: FitReport =
                    serde_json::from_value(v).map_err(|e| CliError::Failed(format!("{}: {e}", path.display())))?;
                report_svg(&r, args.log)?
            }
            None => {
                let (trace, carried) = load_trace(path)?;
                if trace.is_empty() {
                    return Err(CliError::Failed(format!("{} holds no samples", path.display())));
                }
                let (cfg, _, nu) =
                    analysis_context(carried, &args.config, &[], &args.protocol, args.nu_d, args.nu)?;
                trace_svg(&trace, &cfg, Some(nu))?
            }
        };
        docs.push((stem, svg, path.parent().map(Path::to_path_buf)));
    }
    let mut written = Vec::new();
    for (stem, svg, parent) in docs {
        let dir = args.out.clone().or(parent).unwrap_or_else(|| PathBuf::from("."));
        let path = dir.join(format!("{stem}.svg"));
        write_file(&path, &svg)?;
        written.push(path);
    }
    Ok(written)
}
