//! Least-squares recovery of dephasing parameters from signal traces.
//!
//! The two-stage pipeline first fits a fixed-frequency sinusoid inside each
//! short time window, giving an oscillation amplitude and a background per
//! window, then fits the background and amplitude envelopes over τ.
//! [`fit_global`] fits the raw trace in one pass as a cross-check.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::protocols::Protocol;
use crate::relaxation::analytic_populations;

/// Relative step below which the iteration stops.
pub const STEP_TOL: f64 = 1e-8;
/// Gradient norm below which the iteration stops.
pub const GRAD_TOL: f64 = 1e-10;
pub const MAX_ITERATIONS: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// b + a·sin(2πν(τ − origin) + φ), ν in MHz, τ in ms.
    SegmentSinusoid,
    /// P₀(τ)·c₀·e^{−τ/T}/2
    FidEnvelope,
    /// [P₀(τ) + P₋₁(τ)]·c₀·e^{−τ/T}/2
    HahnEnvelope,
    /// [P₀(τ) + P₋₁(τ)]/2 − d₀
    Background,
    /// Background plus FID envelope times a single sinusoid.
    GlobalFid,
    /// Background plus echo envelope times a single sinusoid.
    GlobalHahn,
}

impl ModelKind {
    pub fn parameter_names(self) -> &'static [&'static str] {
        match self {
            ModelKind::SegmentSinusoid => &["b", "a", "nu", "phi"],
            ModelKind::FidEnvelope | ModelKind::HahnEnvelope => &["c0", "t2", "kappa", "s1"],
            ModelKind::Background => &["kappa", "d0", "s1"],
            ModelKind::GlobalFid | ModelKind::GlobalHahn => &["c0", "t2", "kappa", "s1", "d0", "nu", "phi"],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParam {
    pub name: String,
    /// Starting value, or the held value when `fixed`.
    pub value: f64,
    pub fixed: bool,
}

/// A model together with its parameter mask and starting point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitModel {
    pub kind: ModelKind,
    pub params: Vec<ModelParam>,
    /// Time origin of the sinusoid phase, ms.
    #[serde(default)]
    pub origin_ms: f64,
}

impl FitModel {
    /// Every parameter free and starting at a neutral value.
    pub fn new(kind: ModelKind) -> Self {
        let default = |n: &str| match n {
            "c0" | "s1" => 0.8,
            "t2" => 10.0,
            "kappa" => 0.06,
            "a" => 0.1,
            "nu" => 0.342,
            _ => 0.0,
        };
        Self {
            kind,
            params: kind
                .parameter_names()
                .iter()
                .map(|n| ModelParam {
                    name: n.to_string(),
                    value: default(n),
                    fixed: false,
                })
                .collect(),
            origin_ms: 0.0,
        }
    }

    fn index(&self, name: &str) -> Result<usize> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::InvalidConfig(format!("{:?} has no parameter `{name}`", self.kind)))
    }

    pub fn set(&mut self, name: &str, value: f64) -> Result<()> {
        let i = self.index(name)?;
        self.params[i].value = value;
        Ok(())
    }

    pub fn fix(&mut self, name: &str, value: f64) -> Result<()> {
        let i = self.index(name)?;
        self.params[i] = ModelParam {
            name: name.to_string(),
            value,
            fixed: true,
        };
        Ok(())
    }

    pub fn with(mut self, name: &str, value: f64) -> Result<Self> {
        self.set(name, value)?;
        Ok(self)
    }

    pub fn with_fixed(mut self, name: &str, value: f64) -> Result<Self> {
        self.fix(name, value)?;
        Ok(self)
    }

    pub fn value(&self, name: &str) -> Result<f64> {
        Ok(self.params[self.index(name)?].value)
    }

    fn values(&self) -> Vec<f64> {
        self.params.iter().map(|p| p.value).collect()
    }

    fn free(&self) -> Vec<usize> {
        (0..self.params.len()).filter(|&i| !self.params[i].fixed).collect()
    }

    /// Model value at `tau_ms`; `None` where the parameters are unphysical.
    pub fn evaluate(&self, p: &[f64], tau_ms: f64) -> Option<f64> {
        let sinus = |nu: f64, phi: f64| (2.0 * PI * nu * (tau_ms - self.origin_ms) * 1000.0 + phi).sin();
        let pops = |kappa: f64, s1: f64| {
            if !(0.0..=1.0).contains(&s1) {
                return None;
            }
            analytic_populations(s1, kappa, tau_ms).ok()
        };
        let decay = |c0: f64, t2: f64| (t2 > 0.0).then(|| c0 * (-tau_ms / t2).exp());
        let v = match self.kind {
            ModelKind::SegmentSinusoid => p[0] + p[1] * sinus(p[2], p[3]),
            ModelKind::FidEnvelope => pops(p[2], p[3])?.p0 * decay(p[0], p[1])? / 2.0,
            ModelKind::HahnEnvelope => {
                let q = pops(p[2], p[3])?;
                (q.p0 + q.pm1) * decay(p[0], p[1])? / 2.0
            }
            ModelKind::Background => {
                let q = pops(p[0], p[2])?;
                (q.p0 + q.pm1) / 2.0 - p[1]
            }
            ModelKind::GlobalFid | ModelKind::GlobalHahn => {
                let q = pops(p[2], p[3])?;
                let weight = if self.kind == ModelKind::GlobalFid { q.p0 } else { q.p0 + q.pm1 };
                (q.p0 + q.pm1) / 2.0 - p[4] + weight * decay(p[0], p[1])? / 2.0 * sinus(p[5], p[6])
            }
        };
        v.is_finite().then_some(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParam {
    pub name: String,
    pub value: f64,
    /// 1σ from the local quadratic model; absent unless the fit converged.
    pub stderr: Option<f64>,
    pub fixed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub model: FitModel,
    pub params: Vec<FitParam>,
    pub rss: f64,
    pub converged: bool,
    pub singular: bool,
    pub iterations: usize,
    pub n_points: usize,
    pub message: String,
}

impl FitResult {
    pub fn get(&self, name: &str) -> Option<&FitParam> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn value(&self, name: &str) -> f64 {
        self.get(name).map(|p| p.value).unwrap_or(f64::NAN)
    }

    /// The model with its parameters moved to the fitted values.
    pub fn fitted_model(&self) -> FitModel {
        let mut m = self.model.clone();
        for (mp, fp) in m.params.iter_mut().zip(&self.params) {
            mp.value = fp.value;
        }
        m
    }
}

struct Outcome {
    theta: Vec<f64>,
    cost: f64,
    jac: Option<DMatrix<f64>>,
    converged: bool,
    iterations: usize,
    message: String,
}

fn numeric_jacobian<F>(f: &F, theta: &[f64], r0: &DVector<f64>) -> Option<DMatrix<f64>>
where
    F: Fn(&[f64]) -> Option<DVector<f64>>,
{
    let mut j = DMatrix::zeros(r0.len(), theta.len());
    let mut t = theta.to_vec();
    for k in 0..theta.len() {
        let h = 1e-6 * theta[k].abs().max(1e-3);
        t[k] = theta[k] + h;
        let up = f(&t);
        t[k] = theta[k] - h;
        let down = f(&t);
        t[k] = theta[k];
        let col = match (up, down) {
            (Some(u), Some(d)) => (u - d) / (2.0 * h),
            (Some(u), None) => (u - r0) / h,
            (None, Some(d)) => (r0 - d) / h,
            (None, None) => return None,
        };
        j.set_column(k, &col);
    }
    Some(j)
}

/// Levenberg-Marquardt on residual vector `f(θ)` (model − data).
fn damped_gauss_newton<F>(f: F, theta0: Vec<f64>) -> Outcome
where
    F: Fn(&[f64]) -> Option<DVector<f64>>,
{
    let fail = |theta: Vec<f64>, msg: &str| Outcome {
        theta,
        cost: f64::NAN,
        jac: None,
        converged: false,
        iterations: 0,
        message: msg.to_string(),
    };
    let Some(mut r) = f(&theta0) else {
        return fail(theta0, "model undefined at the starting point");
    };
    let mut theta = theta0;
    let mut cost = r.norm_squared();
    let mut lambda = 1e-3;
    let mut jac = None;
    for it in 1..=MAX_ITERATIONS {
        let Some(j) = numeric_jacobian(&f, &theta, &r) else {
            return fail(theta, "Jacobian undefined");
        };
        let a = j.transpose() * &j;
        let g = j.transpose() * &r;
        jac = Some(j);
        if g.amax() < GRAD_TOL {
            return Outcome {
                theta,
                cost,
                jac,
                converged: true,
                iterations: it,
                message: "gradient below tolerance".into(),
            };
        }
        let scale = a.diagonal().amax().max(f64::MIN_POSITIVE);
        loop {
            let mut damped = a.clone();
            for k in 0..theta.len() {
                damped[(k, k)] += lambda * a[(k, k)].max(1e-12 * scale);
            }
            let Some(step) = damped.lu().solve(&(-&g)) else {
                lambda *= 10.0;
                if lambda > 1e20 {
                    return Outcome {
                        theta,
                        cost,
                        jac,
                        converged: false,
                        iterations: it,
                        message: "damped normal equations singular".into(),
                    };
                }
                continue;
            };
            let trial: Vec<f64> = theta.iter().zip(step.iter()).map(|(t, s)| t + s).collect();
            let tnorm = theta.iter().map(|t| t * t).sum::<f64>().sqrt();
            let small = step.norm() <= STEP_TOL * (tnorm + STEP_TOL);
            let improved = f(&trial).map(|rt| (rt.norm_squared(), rt)).filter(|(c, _)| *c <= cost);
            if let Some((c, rt)) = improved {
                theta = trial;
                cost = c;
                r = rt;
                lambda = (lambda / 10.0).max(1e-12);
                if small {
                    let jac = numeric_jacobian(&f, &theta, &r);
                    return Outcome {
                        theta,
                        cost,
                        jac,
                        converged: true,
                        iterations: it,
                        message: "relative step below tolerance".into(),
                    };
                }
                break;
            }
            if small {
                return Outcome {
                    theta,
                    cost,
                    jac,
                    converged: true,
                    iterations: it,
                    message: "relative step below tolerance".into(),
                };
            }
            lambda *= 10.0;
            if lambda > 1e20 {
                return Outcome {
                    theta,
                    cost,
                    jac,
                    converged: false,
                    iterations: it,
                    message: "no downhill step found".into(),
                };
            }
        }
    }
    Outcome {
        theta,
        cost,
        jac,
        converged: false,
        iterations: MAX_ITERATIONS,
        message: "iteration limit reached".into(),
    }
}

/// Fits `model` to (τ, y), optionally weighted by 1/σ. The model's parameter
/// values are the starting point; fixed parameters are held.
///
/// Non-convergence and a singular Jacobian are reported in the result, not
/// as errors.
pub fn least_squares(model: &FitModel, tau: &[f64], y: &[f64], sigma: Option<&[f64]>) -> Result<FitResult> {
    if tau.len() != y.len() || sigma.is_some_and(|s| s.len() != y.len()) {
        return Err(Error::InsufficientData("columns differ in length".into()));
    }
    let free = model.free();
    if tau.len() < free.len() {
        return Err(Error::InsufficientData(format!(
            "{} points for {} free parameters",
            tau.len(),
            free.len()
        )));
    }
    let base = model.values();
    if base.iter().any(|v| !v.is_finite()) || tau.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("fit input"));
    }
    if let Some(s) = sigma {
        if s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
            return Err(invalid("sigma", "weights must be positive and finite"));
        }
    }
    let full = |theta: &[f64]| {
        let mut p = base.clone();
        for (k, &i) in free.iter().enumerate() {
            p[i] = theta[k];
        }
        p
    };
    let residuals = |theta: &[f64]| -> Option<DVector<f64>> {
        let p = full(theta);
        let mut r = DVector::zeros(tau.len());
        for i in 0..tau.len() {
            let w = sigma.map_or(1.0, |s| s[i]);
            r[i] = (model.evaluate(&p, tau[i])? - y[i]) / w;
        }
        Some(r)
    };
    let theta0: Vec<f64> = free.iter().map(|&i| base[i]).collect();
    let out = if free.is_empty() {
        let cost = residuals(&[]).map_or(f64::NAN, |r| r.norm_squared());
        Outcome {
            theta: vec![],
            cost,
            jac: None,
            converged: cost.is_finite(),
            iterations: 0,
            message: "no free parameters".into(),
        }
    } else {
        damped_gauss_newton(residuals, theta0)
    };

    let (mut singular, mut cov) = (false, None);
    if let Some(j) = &out.jac {
        let a = j.transpose() * j;
        let d: Vec<f64> = a.diagonal().iter().map(|v| v.sqrt()).collect();
        // a parameter whose full-scale change barely moves the model is not
        // identifiable, even if its column is not collinear with the others
        let sens: Vec<f64> = d.iter().zip(&out.theta).map(|(n, t)| n * t.abs().max(1.0)).collect();
        let top = sens.iter().cloned().fold(0.0, f64::max);
        if d.iter().any(|v| *v == 0.0 || !v.is_finite()) || sens.iter().any(|s| *s < 1e-10 * top) {
            singular = true;
        } else {
            let norm = DMatrix::from_fn(a.nrows(), a.ncols(), |i, k| a[(i, k)] / (d[i] * d[k]));
            let eig = norm.clone().symmetric_eigenvalues();
            if eig.min() < 1e-12 * eig.max() {
                singular = true;
            } else if let Some(inv) = norm.try_inverse() {
                let dof = (tau.len() - free.len()).max(1) as f64;
                let s2 = if sigma.is_some() { 1.0 } else { out.cost / dof };
                cov = Some(DMatrix::from_fn(a.nrows(), a.ncols(), |i, k| inv[(i, k)] / (d[i] * d[k]) * s2));
            } else {
                singular = true;
            }
        }
    }
    let converged = out.converged && !singular;
    let p = full(&out.theta);
    let params = model
        .params
        .iter()
        .enumerate()
        .map(|(i, mp)| FitParam {
            name: mp.name.clone(),
            value: p[i],
            stderr: match (&cov, free.iter().position(|&f| f == i)) {
                (Some(c), Some(k)) if converged => Some(c[(k, k)].max(0.0).sqrt()).filter(|v| v.is_finite()),
                _ => None,
            },
            fixed: mp.fixed,
        })
        .collect();
    let mut message = out.message;
    if singular {
        message.push_str("; Jacobian is singular");
    }
    let rss = if sigma.is_some() {
        // report the unweighted sum of squares
        (0..tau.len())
            .map(|i| model.evaluate(&p, tau[i]).map_or(f64::NAN, |v| (v - y[i]).powi(2)))
            .sum()
    } else {
        out.cost
    };
    Ok(FitResult {
        model: model.clone(),
        params,
        rss,
        converged,
        singular,
        iterations: out.iterations,
        n_points: tau.len(),
        message,
    })
}

/// Per-window result of the fixed-frequency sinusoid fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentAmplitude {
    pub tau_center: f64,
    pub amplitude: f64,
    pub amplitude_err: Option<f64>,
    pub background: f64,
    pub background_err: Option<f64>,
    pub phase: f64,
    pub converged: bool,
}

/// Splits a sorted τ grid wherever the spacing exceeds five times the median
/// spacing. Returns inclusive (start, end) windows.
pub fn segments_from_gaps(tau: &[f64]) -> Vec<(f64, f64)> {
    if tau.is_empty() {
        return vec![];
    }
    let mut gaps: Vec<f64> = tau.windows(2).map(|w| w[1] - w[0]).collect();
    if gaps.is_empty() {
        return vec![(tau[0], tau[0])];
    }
    let all = gaps.clone();
    gaps.sort_by(f64::total_cmp);
    let median = gaps[gaps.len() / 2];
    let mut out = vec![];
    let mut start = tau[0];
    for (i, g) in all.iter().enumerate() {
        if *g > 5.0 * median {
            out.push((start, tau[i]));
            start = tau[i + 1];
        }
    }
    out.push((start, *tau.last().unwrap()));
    out
}

fn wrap_phase(phi: f64) -> f64 {
    let w = (phi + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Fits b + a·sin(2πν(τ − τ_c) + φ) with ν fixed inside each window.
///
/// The amplitude is reported non-negative, with the sign folded into φ.
pub fn extract_segment_amplitudes(
    tau: &[f64],
    y: &[f64],
    windows: &[(f64, f64)],
    nu_mhz: f64,
) -> Result<Vec<SegmentAmplitude>> {
    if tau.len() != y.len() {
        return Err(Error::InsufficientData("columns differ in length".into()));
    }
    if !(nu_mhz.abs() > 0.0) || !nu_mhz.is_finite() {
        return Err(invalid("nu", "oscillation frequency must be finite and non-zero"));
    }
    windows
        .iter()
        .map(|&(lo, hi)| {
            let idx: Vec<usize> = (0..tau.len()).filter(|&i| tau[i] >= lo && tau[i] <= hi).collect();
            if idx.len() < 4 {
                return Err(Error::InsufficientData(format!("window [{lo}, {hi}] holds {} points", idx.len())));
            }
            let t: Vec<f64> = idx.iter().map(|&i| tau[i]).collect();
            let v: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
            let span_periods = (t[t.len() - 1] - t[0]) * 1000.0 * nu_mhz.abs();
            if span_periods < 2.0 - 1e-9 {
                return Err(Error::WindowTooShort(format!(
                    "window [{lo}, {hi}] spans {span_periods:.3} periods, need 2"
                )));
            }
            let center = t.iter().sum::<f64>() / t.len() as f64;
            // linear solve for b, a·cos φ, a·sin φ gives the starting point
            let w = 2.0 * PI * nu_mhz * 1000.0;
            let design = DMatrix::from_fn(t.len(), 3, |i, k| match k {
                0 => 1.0,
                1 => (w * (t[i] - center)).sin(),
                _ => (w * (t[i] - center)).cos(),
            });
            let rhs = DVector::from_column_slice(&v);
            let coef = design
                .clone()
                .svd(true, true)
                .solve(&rhs, 1e-14)
                .map_err(|e| Error::InsufficientData(e.to_string()))?;
            let (b0, ac, as_) = (coef[0], coef[1], coef[2]);
            let a0 = ac.hypot(as_);
            let phi0 = as_.atan2(ac);
            let mut model = FitModel::new(ModelKind::SegmentSinusoid)
                .with("b", b0)?
                .with("a", a0)?
                .with("phi", phi0)?
                .with_fixed("nu", nu_mhz)?;
            model.origin_ms = center;
            let fit = least_squares(&model, &t, &v, None)?;
            let (mut a, mut phi) = if fit.converged {
                (fit.value("a"), fit.value("phi"))
            } else {
                (a0, phi0)
            };
            if a < 0.0 {
                a = -a;
                phi += PI;
            }
            Ok(SegmentAmplitude {
                tau_center: center,
                amplitude: a,
                amplitude_err: fit.get("a").and_then(|p| p.stderr),
                background: if fit.converged { fit.value("b") } else { b0 },
                background_err: fit.get("b").and_then(|p| p.stderr),
                phase: wrap_phase(phi),
                converged: fit.converged,
            })
        })
        .collect()
}

/// Options for [`fit_dephasing`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DephasingOptions {
    /// Initial polarization, held fixed.
    pub s1: f64,
    /// Starting value for κ, 1/ms.
    pub kappa_init: f64,
    /// Hold κ at `kappa_init` instead of fitting the background for it.
    pub fix_kappa: bool,
    /// Hold d₀ at this value.
    pub fixed_d0: Option<f64>,
    /// Hold c₀ at this value.
    pub fixed_c0: Option<f64>,
}

impl Default for DephasingOptions {
    fn default() -> Self {
        Self {
            s1: 0.80,
            kappa_init: 1.0 / (3.0 * 5.5),
            fix_kappa: false,
            fixed_d0: None,
            fixed_c0: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DephasingFit {
    pub protocol: Protocol,
    pub background: FitResult,
    pub envelope: FitResult,
}

impl DephasingFit {
    pub fn kappa(&self) -> f64 {
        self.background.value("kappa")
    }

    pub fn t1e_ms(&self) -> f64 {
        1.0 / (3.0 * self.kappa())
    }

    pub fn d0(&self) -> f64 {
        self.background.value("d0")
    }

    pub fn c0(&self) -> f64 {
        self.envelope.value("c0")
    }

    /// T₂* for the FID, T₂ for the echo, ms.
    pub fn t2_ms(&self) -> f64 {
        self.envelope.value("t2")
    }

    pub fn converged(&self) -> bool {
        self.background.converged && self.envelope.converged
    }
}

/// Starting (c₀, T) from a log-linear regression of amplitude over the
/// population weight.
fn envelope_init(protocol: Protocol, seg: &[SegmentAmplitude], kappa: f64, s1: f64) -> Result<(f64, f64)> {
    let pts: Vec<(f64, f64)> = seg
        .iter()
        .filter_map(|s| {
            let q = analytic_populations(s1, kappa, s.tau_center).ok()?;
            let w = match protocol {
                Protocol::Fid => q.p0,
                Protocol::Hahn => q.p0 + q.pm1,
            } / 2.0;
            (s.amplitude > 0.0 && w > 0.0).then(|| (s.tau_center, (s.amplitude / w).ln()))
        })
        .collect();
    if pts.len() < 2 {
        return Ok((0.8, 10.0));
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx = pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
    let sxy = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let c0 = (my - slope * mx).exp().clamp(1e-3, 1.0);
    let t2 = if slope < 0.0 { (-1.0 / slope).min(1e4) } else { 1e3 };
    Ok((c0, t2))
}

/// Background fit for (κ, d₀), then envelope fit for (c₀, T) with κ held at
/// the background result.
pub fn fit_dephasing(protocol: Protocol, seg: &[SegmentAmplitude], opts: &DephasingOptions) -> Result<DephasingFit> {
    if seg.len() < 4 {
        return Err(Error::InsufficientData(format!(
            "{} envelope points, need at least 4",
            seg.len()
        )));
    }
    let tau: Vec<f64> = seg.iter().map(|s| s.tau_center).collect();
    let bg: Vec<f64> = seg.iter().map(|s| s.background).collect();
    let amp: Vec<f64> = seg.iter().map(|s| s.amplitude).collect();

    let mut bmodel = FitModel::new(ModelKind::Background).with_fixed("s1", opts.s1)?;
    if opts.fix_kappa {
        bmodel.fix("kappa", opts.kappa_init)?;
    } else {
        bmodel.set("kappa", opts.kappa_init)?;
    }
    match opts.fixed_d0 {
        Some(d) => bmodel.fix("d0", d)?,
        None => {
            // d₀ from the last point at the starting κ
            let q = analytic_populations(opts.s1, opts.kappa_init, tau[tau.len() - 1])?;
            bmodel.set("d0", (q.p0 + q.pm1) / 2.0 - bg[bg.len() - 1])?;
        }
    }
    let background = least_squares(&bmodel, &tau, &bg, None)?;
    let kappa = background.value("kappa");
    if !(kappa >= 0.0) {
        return Err(Error::InsufficientData("background fit gave no usable kappa".into()));
    }

    let kind = match protocol {
        Protocol::Fid => ModelKind::FidEnvelope,
        Protocol::Hahn => ModelKind::HahnEnvelope,
    };
    let (c0, t2) = envelope_init(protocol, seg, kappa, opts.s1)?;
    let mut emodel = FitModel::new(kind)
        .with_fixed("kappa", kappa)?
        .with_fixed("s1", opts.s1)?
        .with("c0", c0)?
        .with("t2", t2)?;
    if let Some(c) = opts.fixed_c0 {
        emodel.fix("c0", c)?;
    }
    let envelope = least_squares(&emodel, &tau, &amp, None)?;
    Ok(DephasingFit {
        protocol,
        background,
        envelope,
    })
}

/// Segments, amplitudes and the two-stage fit in one call.
pub fn fit_trace(
    protocol: Protocol,
    tau: &[f64],
    y: &[f64],
    nu_mhz: f64,
    opts: &DephasingOptions,
) -> Result<(Vec<SegmentAmplitude>, DephasingFit)> {
    let windows = segments_from_gaps(tau);
    let seg = extract_segment_amplitudes(tau, y, &windows, nu_mhz)?;
    let fit = fit_dephasing(protocol, &seg, opts)?;
    Ok((seg, fit))
}

/// One-pass fit of the whole trace, started from a two-stage result.
pub fn fit_global(
    protocol: Protocol,
    tau: &[f64],
    y: &[f64],
    nu_mhz: f64,
    start: &DephasingFit,
    seg: &[SegmentAmplitude],
    opts: &DephasingOptions,
) -> Result<FitResult> {
    let kind = match protocol {
        Protocol::Fid => ModelKind::GlobalFid,
        Protocol::Hahn => ModelKind::GlobalHahn,
    };
    // phase at τ = 0 from the first window, which is referenced to its center
    let phi = seg
        .first()
        .map(|s| wrap_phase(s.phase - 2.0 * PI * nu_mhz * s.tau_center * 1000.0))
        .unwrap_or(0.0);
    let mut m = FitModel::new(kind)
        .with("c0", start.c0())?
        .with("t2", start.t2_ms())?
        .with("kappa", start.kappa())?
        .with_fixed("s1", opts.s1)?
        .with("d0", start.d0())?
        .with_fixed("nu", nu_mhz)?
        .with("phi", phi)?;
    if opts.fix_kappa {
        m.fix("kappa", opts.kappa_init)?;
    }
    if let Some(d) = opts.fixed_d0 {
        m.fix("d0", d)?;
    }
    if let Some(c) = opts.fixed_c0 {
        m.fix("c0", c)?;
    }
    least_squares(&m, tau, y, None)
}
