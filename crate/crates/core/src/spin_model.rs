//! Physical parameters and the electron–¹³C Hamiltonian.
//!
//! Energies are in MHz (H/2π), magnetic field in gauss and all times at this
//! interface in milliseconds.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::qcore::{block_offset, c, Mat2, Mat6};

/// Tolerance for agreement between a directly supplied ¹³C Larmor frequency
/// and the one implied by `field_gauss * gamma_c`.
pub const LARMOR_CONSISTENCY_MHZ: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpinSystemParams {
    /// Zero-field splitting D, MHz.
    pub zero_field_mhz: f64,
    /// Magnetic field along the NV axis, gauss.
    pub field_gauss: f64,
    /// Electron gyromagnetic ratio, MHz/G.
    pub gamma_e: f64,
    /// ¹³C gyromagnetic ratio, MHz/G. Only used when `nu_c` is absent, or to
    /// cross-check it.
    pub gamma_c: Option<f64>,
    /// ¹³C Larmor frequency, MHz.
    pub nu_c: Option<f64>,
    /// Secular ¹⁴N hyperfine shift for m_N = 1, MHz.
    pub a_n: f64,
    pub a_zz: f64,
    pub a_zx: f64,
    /// Weight of |0↑⟩ in the prepared state.
    pub s1: f64,
    pub t1e_ms: f64,
    pub t2star_ms: f64,
    pub t2_ms: f64,
}

impl Default for SpinSystemParams {
    fn default() -> Self {
        Self {
            zero_field_mhz: 2870.0,
            field_gauss: 148.0,
            gamma_e: 2.8025,
            gamma_c: None,
            nu_c: Some(0.158),
            a_n: -2.16,
            a_zz: -0.152,
            a_zx: 0.110,
            s1: 0.80,
            t1e_ms: 5.5,
            t2star_ms: 8.66,
            t2_ms: 14.10,
        }
    }
}

impl SpinSystemParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("zero_field_mhz", self.zero_field_mhz),
            ("field_gauss", self.field_gauss),
            ("gamma_e", self.gamma_e),
            ("a_n", self.a_n),
            ("a_zz", self.a_zz),
            ("a_zx", self.a_zx),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(invalid(name, "must be finite"));
            }
        }
        if !(0.0..=1.0).contains(&self.s1) {
            return Err(invalid("s1", format!("{} not in [0, 1]", self.s1)));
        }
        for (name, v) in [
            ("t1e_ms", self.t1e_ms),
            ("t2star_ms", self.t2star_ms),
            ("t2_ms", self.t2_ms),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(name, format!("{v} must be positive")));
            }
        }
        self.nu_c_mhz().map(|_| ())
    }

    /// ¹³C Larmor frequency; a direct value must agree with B·γ_C when both
    /// are present.
    pub fn nu_c_mhz(&self) -> Result<f64> {
        let derived = self.gamma_c.map(|g| g * self.field_gauss);
        match (self.nu_c, derived) {
            (Some(direct), Some(from_field)) => {
                if (direct - from_field).abs() > LARMOR_CONSISTENCY_MHZ {
                    Err(invalid(
                        "nu_c",
                        format!("{direct} MHz disagrees with B*gamma_c = {from_field} MHz"),
                    ))
                } else {
                    Ok(direct)
                }
            }
            (Some(v), None) | (None, Some(v)) if v.is_finite() => Ok(v),
            (Some(_), None) | (None, Some(_)) => Err(invalid("nu_c", "must be finite")),
            (None, None) => Err(invalid("nu_c", "neither nu_c nor gamma_c given")),
        }
    }

    pub fn nu_e_mhz(&self) -> f64 {
        self.gamma_e * self.field_gauss
    }

    /// Single hopping rate κ = 1/(3·T1e), in 1/ms.
    pub fn kappa_per_ms(&self) -> f64 {
        1.0 / (3.0 * self.t1e_ms)
    }
}

/// Spin operators on the six-level register.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinOperatorSet {
    pub sz: Mat6,
    pub sz2: Mat6,
    pub ix: Mat6,
    pub iz: Mat6,
}

impl SpinOperatorSet {
    pub fn new() -> Self {
        let mut sz = Mat6::zeros();
        let mut iz = Mat6::zeros();
        let mut ix = Mat6::zeros();
        for (k, m) in [1.0, 0.0, -1.0].into_iter().enumerate() {
            let (up, down) = (2 * k, 2 * k + 1);
            sz[(up, up)] = c(m);
            sz[(down, down)] = c(m);
            iz[(up, up)] = c(0.5);
            iz[(down, down)] = c(-0.5);
            ix[(up, down)] = c(0.5);
            ix[(down, up)] = c(0.5);
        }
        Self {
            sz,
            sz2: sz * sz,
            ix,
            iz,
        }
    }
}

impl Default for SpinOperatorSet {
    fn default() -> Self {
        Self::new()
    }
}

/// Full Hamiltonian in MHz:
/// D·Sz² − (ν_e − A_N)·Sz − ν_C·Iz + A_zz·Sz·Iz + A_zx·Sz·Ix.
pub fn build_hamiltonian(params: &SpinSystemParams) -> Result<Mat6> {
    params.validate()?;
    let ops = SpinOperatorSet::new();
    let nu_c = params.nu_c_mhz()?;
    Ok(ops.sz2 * c(params.zero_field_mhz) - ops.sz * c(params.nu_e_mhz() - params.a_n)
        + nuclear_terms(&ops, params, nu_c))
}

fn nuclear_terms(ops: &SpinOperatorSet, params: &SpinSystemParams, nu_c: f64) -> Mat6 {
    -ops.iz * c(nu_c) + ops.sz * ops.iz * c(params.a_zz) + ops.sz * ops.ix * c(params.a_zx)
}

/// Secular part of the Hamiltonian that drives intra-block nuclear dynamics,
/// with the electron zero-field and Zeeman terms removed. `detuning_mhz` is
/// added to the ¹³C Larmor frequency (quasi-static noise).
pub fn nuclear_hamiltonian(params: &SpinSystemParams, detuning_mhz: f64) -> Result<Mat6> {
    params.validate()?;
    if !detuning_mhz.is_finite() {
        return Err(Error::NonFinite("detuning"));
    }
    let ops = SpinOperatorSet::new();
    let nu_c = params.nu_c_mhz()? + detuning_mhz;
    Ok(nuclear_terms(&ops, params, nu_c))
}

/// The 2×2 block of `h` belonging to electron level `m_s`.
pub fn hamiltonian_block(h: &Mat6, m_s: i32) -> Result<Mat2> {
    let off = block_offset(m_s)?;
    Ok(h.fixed_view::<2, 2>(off, off).into_owned())
}

/// Nuclear precession frequency conditioned on the electron level, MHz:
/// √((m_S·A_zx)² + (ν_C − m_S·A_zz)²).
pub fn nuclear_precession_frequency(params: &SpinSystemParams, m_s: i32) -> Result<f64> {
    block_offset(m_s)?;
    let nu_c = params.nu_c_mhz()?;
    let m = m_s as f64;
    Ok((m * params.a_zx).hypot(nu_c - m * params.a_zz))
}
