//! Dense complex-matrix state engine for the electron (spin-1) ⊗ ¹³C (spin-1/2)
//! register.
//!
//! Basis order is fixed throughout the crate:
//!
//! | index | ket        |
//! |-------|------------|
//! | 0     | \|+1 ↑⟩    |
//! | 1     | \|+1 ↓⟩    |
//! | 2     | \|0 ↑⟩     |
//! | 3     | \|0 ↓⟩     |
//! | 4     | \|−1 ↑⟩    |
//! | 5     | \|−1 ↓⟩    |
//!
//! so every electron level `m_S` owns a contiguous 2×2 nuclear block.

use std::f64::consts::PI;

use nalgebra::{DMatrix, SMatrix};
use num_complex::Complex64;

use crate::error::{invalid, Error, Result};

pub type C64 = Complex64;
pub type Mat6 = SMatrix<C64, 6, 6>;
pub type Mat2 = SMatrix<C64, 2, 2>;

pub const DIM: usize = 6;

pub const HERMITIAN_TOL: f64 = 1e-12;
pub const TRACE_TOL: f64 = 1e-10;
pub const POSITIVITY_FLOOR: f64 = -1e-10;
pub const UNITARY_TOL: f64 = 1e-12;

#[inline]
pub fn c(re: f64) -> C64 {
    C64::new(re, 0.0)
}

/// Nuclear spin state within an electron block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nuclear {
    Up,
    Down,
}

/// Offset of the 2×2 nuclear block that belongs to electron level `m_s`.
pub fn block_offset(m_s: i32) -> Result<usize> {
    match m_s {
        1 => Ok(0),
        0 => Ok(2),
        -1 => Ok(4),
        other => Err(Error::InvalidSpinProjection(other)),
    }
}

pub fn basis_index(m_s: i32, nuclear: Nuclear) -> Result<usize> {
    let off = block_offset(m_s)?;
    Ok(match nuclear {
        Nuclear::Up => off,
        Nuclear::Down => off + 1,
    })
}

/// Electron levels in basis order.
pub const LEVELS: [i32; 3] = [1, 0, -1];

/// Places a 2×2 nuclear operator into the `m_s` block of an otherwise zero
/// 6×6 matrix.
pub fn embed_block(m_s: i32, block: &Mat2) -> Result<Mat6> {
    let off = block_offset(m_s)?;
    let mut out = Mat6::zeros();
    out.fixed_view_mut::<2, 2>(off, off).copy_from(block);
    Ok(out)
}

fn max_abs(m: &Mat6) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Mixed state of the six-level register.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    data: Mat6,
}

impl DensityMatrix {
    /// Wraps a matrix after checking Hermiticity, unit trace and positivity.
    pub fn new(data: Mat6) -> Result<Self> {
        let rho = Self { data };
        rho.validate()?;
        Ok(rho)
    }

    /// Wraps a matrix without validation. Used on hot paths where the input
    /// is known to be a physical state up to round-off.
    pub fn from_matrix_unchecked(data: Mat6) -> Self {
        let rho = Self { data };
        debug_assert!(rho.validate().is_ok(), "unphysical state: {:?}", rho.validate());
        rho
    }

    /// Σ wᵢ |kᵢ⟩⟨kᵢ| over basis kets.
    pub fn diagonal_mixture(weights: &[(usize, f64)]) -> Result<Self> {
        let mut m = Mat6::zeros();
        for &(idx, w) in weights {
            if idx >= DIM {
                return Err(Error::BasisIndex(idx));
            }
            m[(idx, idx)] += c(w);
        }
        Self::new(m)
    }

    pub fn maximally_mixed() -> Self {
        Self {
            data: Mat6::identity() * c(1.0 / DIM as f64),
        }
    }

    pub fn matrix(&self) -> &Mat6 {
        &self.data
    }

    pub fn into_matrix(self) -> Mat6 {
        self.data
    }

    pub fn trace(&self) -> C64 {
        self.data.trace()
    }

    pub fn hermiticity_error(&self) -> f64 {
        max_abs(&(self.data - self.data.adjoint()))
    }

    /// Eigenvalues of the Hermitian part, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let herm = (self.data + self.data.adjoint()) * c(0.5);
        let mut ev: Vec<f64> = herm.symmetric_eigenvalues().iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.eigenvalues()[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("density matrix"));
        }
        let herm = self.hermiticity_error();
        if herm >= HERMITIAN_TOL {
            return Err(Error::InvalidParameter {
                name: "rho",
                reason: format!("not Hermitian (max |ρ-ρ†| = {herm:.3e})"),
            });
        }
        let tr = self.trace();
        if (tr - c(1.0)).norm() >= TRACE_TOL {
            return Err(Error::InvalidParameter {
                name: "rho",
                reason: format!("trace {tr} differs from 1"),
            });
        }
        let min_ev = self.min_eigenvalue();
        if min_ev <= POSITIVITY_FLOOR {
            return Err(Error::InvalidParameter {
                name: "rho",
                reason: format!("negative eigenvalue {min_ev:.3e}"),
            });
        }
        Ok(())
    }

    /// Population of electron level `m_s` (trace of its nuclear block).
    pub fn population(&self, m_s: i32) -> Result<f64> {
        Ok(ms_block(self, m_s)?.trace().re)
    }
}

/// Rank-1 projector onto a basis ket.
pub fn pure_state(basis_index: usize) -> Result<DensityMatrix> {
    if basis_index >= DIM {
        return Err(Error::BasisIndex(basis_index));
    }
    let mut m = Mat6::zeros();
    m[(basis_index, basis_index)] = c(1.0);
    Ok(DensityMatrix { data: m })
}

/// 6×6 unitary acting on the register.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitaryOperator {
    data: Mat6,
}

impl UnitaryOperator {
    pub fn new(data: Mat6) -> Result<Self> {
        if data.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
            return Err(Error::NonFinite("unitary"));
        }
        let err = max_abs(&(data.adjoint() * data - Mat6::identity()));
        if err >= UNITARY_TOL {
            return Err(Error::InvalidParameter {
                name: "unitary",
                reason: format!("U†U deviates from identity by {err:.3e}"),
            });
        }
        Ok(Self { data })
    }

    pub fn identity() -> Self {
        Self {
            data: Mat6::identity(),
        }
    }

    pub fn matrix(&self) -> &Mat6 {
        &self.data
    }

    pub fn adjoint(&self) -> Self {
        Self {
            data: self.data.adjoint(),
        }
    }

    /// `self` applied after `first`.
    pub fn after(&self, first: &UnitaryOperator) -> Self {
        Self {
            data: self.data * first.data,
        }
    }

    /// Block-diagonal unitary built from one 2×2 block per electron level,
    /// listed in basis order (+1, 0, −1).
    pub fn block_diagonal(blocks: [Mat2; 3]) -> Result<Self> {
        let mut m = Mat6::zeros();
        for (k, b) in blocks.iter().enumerate() {
            m.fixed_view_mut::<2, 2>(2 * k, 2 * k).copy_from(b);
        }
        Self::new(m)
    }

    pub fn unitarity_error(&self) -> f64 {
        max_abs(&(self.data.adjoint() * self.data - Mat6::identity()))
    }
}

/// U ρ U†.
pub fn apply_unitary(rho: &DensityMatrix, u: &UnitaryOperator) -> DensityMatrix {
    let out = u.data * rho.data * u.data.adjoint();
    // re-symmetrize to keep round-off Hermitian
    let out = (out + out.adjoint()) * c(0.5);
    DensityMatrix::from_matrix_unchecked(out)
}

/// Unnormalized nuclear block conditioned on electron level `m_s`.
pub fn ms_block(rho: &DensityMatrix, m_s: i32) -> Result<Mat2> {
    let off = block_offset(m_s)?;
    Ok(rho.data.fixed_view::<2, 2>(off, off).into_owned())
}

const PADE13: [f64; 14] = [
    64_764_752_532_480_000.0,
    32_382_376_266_240_000.0,
    7_771_770_303_897_600.0,
    1_187_353_796_428_800.0,
    129_060_195_264_000.0,
    10_559_470_521_600.0,
    670_442_572_800.0,
    33_522_128_640.0,
    1_323_241_920.0,
    40_840_800.0,
    960_960.0,
    16_380.0,
    182.0,
    1.0,
];

const THETA13: f64 = 5.371_920_351_148_152;

fn one_norm(a: &DMatrix<C64>) -> f64 {
    (0..a.ncols())
        .map(|j| a.column(j).iter().map(|z| z.norm()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// exp(A·t) by scaling and squaring with a degree-13 Padé approximant.
pub fn matrix_exponential(a: &DMatrix<C64>, t: f64) -> Result<DMatrix<C64>> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::InvalidParameter {
            name: "matrix",
            reason: format!("not square ({}x{})", n, a.ncols()),
        });
    }
    if !t.is_finite() || a.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("matrix exponential input"));
    }
    let at = a * c(t);
    let norm = one_norm(&at);
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil() as i32
    } else {
        0
    };
    let scaled = at * c(2f64.powi(-squarings));

    let eye = DMatrix::<C64>::identity(n, n);
    let b = |k: usize| c(PADE13[k]);
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;

    let u_inner = &a6 * (&a6 * b(13) + &a4 * b(11) + &a2 * b(9))
        + &a6 * b(7)
        + &a4 * b(5)
        + &a2 * b(3)
        + &eye * b(1);
    let u = &scaled * u_inner;
    let v = &a6 * (&a6 * b(12) + &a4 * b(10) + &a2 * b(8))
        + &a6 * b(6)
        + &a4 * b(4)
        + &a2 * b(2)
        + &eye * b(0);

    let mut result = (&v - &u)
        .lu()
        .solve(&(&v + &u))
        .ok_or(Error::NonFinite("singular Padé denominator"))?;
    for _ in 0..squarings {
        result = &result * &result;
    }
    if result.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::NonFinite("matrix exponential result"));
    }
    Ok(result)
}

/// exp(A·t) for the fixed 6×6 case.
pub fn expm6(a: &Mat6, t: f64) -> Result<Mat6> {
    let d = DMatrix::from_iterator(6, 6, a.iter().copied());
    let e = matrix_exponential(&d, t)?;
    Ok(Mat6::from_iterator(e.iter().copied()))
}

/// exp(−i2π·H·t) for a Hamiltonian that is block-diagonal in m_S (MHz, t in
/// μs). Each 2×2 block h₀𝟙 + r·σ is propagated in closed form, so the result
/// stays unitary to rounding for arbitrarily long times.
pub fn block_propagator(h: &Mat6, t_us: f64) -> Result<UnitaryOperator> {
    if !t_us.is_finite() {
        return Err(Error::NonFinite("propagation time"));
    }
    for i in 0..DIM {
        for j in 0..DIM {
            if i / 2 != j / 2 && h[(i, j)] != C64::new(0.0, 0.0) {
                return Err(invalid("hamiltonian", "not block-diagonal in m_S"));
            }
        }
    }
    let mut u = Mat6::zeros();
    for b in 0..3 {
        let o = 2 * b;
        let (a, d, off) = (h[(o, o)].re, h[(o + 1, o + 1)].re, h[(o, o + 1)]);
        let (h0, z, x, y) = ((a + d) / 2.0, (a - d) / 2.0, off.re, -off.im);
        let r = (x * x + y * y + z * z).sqrt();
        let phi = 2.0 * PI * r * t_us;
        let global = C64::from_polar(1.0, -2.0 * PI * h0 * t_us);
        // sin(φ)/r → 2πt as r → 0
        let s = if r > 0.0 { phi.sin() / r } else { 2.0 * PI * t_us };
        let i = C64::new(0.0, 1.0);
        u[(o, o)] = global * (c(phi.cos()) - i * c(s * z));
        u[(o + 1, o + 1)] = global * (c(phi.cos()) + i * c(s * z));
        u[(o, o + 1)] = global * (-i * s * C64::new(x, -y));
        u[(o + 1, o)] = global * (-i * s * C64::new(x, y));
    }
    UnitaryOperator::new(u)
}
