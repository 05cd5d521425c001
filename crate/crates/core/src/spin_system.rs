// SPDX-License-Identifier: Apache-2.0

//! Rotating-frame Hamiltonian of one electron coupled to a few nuclei.
//!
//! ```text
//! H = δ·S_z + Σ_k ω_k I^k_z + S_z ⊗ Σ_k (A_k I^k_z + B_k I^k_x)
//! ```
//!
//! The pseudosecular coupling `B·S_z·I_x` tilts each nuclear quantization
//! axis by an amount that depends on the electron projection. Within an
//! electron manifold the Hamiltonian is a sum of commuting single-nucleus
//! terms, so its eigenstates are products of per-nucleus "logical" states.
//!
//! Eigenstate (level) indices follow the product basis: the electron bit is
//! most significant (`0` = spin-up, `1` = spin-down) followed by one label
//! bit per nucleus in order. Label `0` is the logical state that reduces to
//! nuclear `|↑⟩` when the pseudosecular term vanishes.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, kron, spin_ops, CMatrix, C64};

pub const MAX_NUCLEI: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nucleus {
    pub label: String,
    /// Nuclear Zeeman frequency, MHz.
    pub larmor: f64,
    /// Secular hyperfine coefficient A, MHz.
    pub a_coeff: f64,
    /// Pseudosecular hyperfine coefficient B, MHz (signed).
    pub b_coeff: f64,
}

impl Nucleus {
    pub fn new(label: impl Into<String>, larmor: f64, a_coeff: f64, b_coeff: f64) -> Self {
        Self {
            label: label.into(),
            larmor,
            a_coeff,
            b_coeff,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpinSystem {
    /// Rotating-frame electron detuning δ, MHz.
    pub electron_offset: f64,
    pub nuclei: Vec<Nucleus>,
    /// Electron coherence time, µs.
    pub t2e: f64,
    /// Inhomogeneous electron linewidth (FWHM), MHz.
    pub t2e_star_linewidth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Manifold {
    Up,
    Down,
}

impl Manifold {
    /// Electron bit used in level indices.
    pub fn bit(self) -> usize {
        match self {
            Manifold::Up => 0,
            Manifold::Down => 1,
        }
    }

    /// Electron `S_z` eigenvalue.
    pub fn ms(self) -> f64 {
        match self {
            Manifold::Up => 0.5,
            Manifold::Down => -0.5,
        }
    }

    pub fn other(self) -> Self {
        match self {
            Manifold::Up => Manifold::Down,
            Manifold::Down => Manifold::Up,
        }
    }
}

impl std::str::FromStr for Manifold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "up" => Ok(Manifold::Up),
            "down" => Ok(Manifold::Down),
            other => Err(Error::InvalidArgument(format!("unknown manifold '{other}'"))),
        }
    }
}

impl SpinSystem {
    pub fn new(electron_offset: f64, nuclei: Vec<Nucleus>, t2e: f64, linewidth: f64) -> Result<Self> {
        let sys = Self {
            electron_offset,
            nuclei,
            t2e,
            t2e_star_linewidth: linewidth,
        };
        sys.validate()?;
        Ok(sys)
    }

    /// The 1H + 13C malonic acid radical at the crystal orientation used for
    /// the double nuclear coherence experiment (MHz, µs).
    pub fn malonic_ref() -> Self {
        Self {
            electron_offset: 0.0,
            nuclei: vec![
                Nucleus::new("H", 14.09, -41.8, 19.7),
                Nucleus::new("C", 3.54, 97.6, 73.7),
            ],
            t2e: 2.3,
            t2e_star_linewidth: 14.0,
        }
    }

    /// A lone electron, useful for control sanity checks.
    pub fn bare_electron() -> Self {
        Self {
            electron_offset: 0.0,
            nuclei: Vec::new(),
            t2e: f64::INFINITY,
            t2e_star_linewidth: 0.0,
        }
    }

    /// Checks the physical invariants. A bare electron (no nuclei) is
    /// accepted for control tests even though experiments need ≥ 1 nucleus.
    pub fn validate(&self) -> Result<()> {
        if self.nuclei.len() > MAX_NUCLEI {
            return Err(Error::InvalidSystem(format!(
                "at most {MAX_NUCLEI} nuclei supported, got {}",
                self.nuclei.len()
            )));
        }
        if !(self.t2e > 0.0) {
            return Err(Error::InvalidSystem(format!("t2e must be positive, got {}", self.t2e)));
        }
        if !(self.t2e_star_linewidth >= 0.0) {
            return Err(Error::InvalidSystem(format!(
                "linewidth must be non-negative, got {}",
                self.t2e_star_linewidth
            )));
        }
        if !self.electron_offset.is_finite() {
            return Err(Error::InvalidSystem("electron offset must be finite".into()));
        }
        for n in &self.nuclei {
            if !(n.larmor.is_finite() && n.a_coeff.is_finite() && n.b_coeff.is_finite()) {
                return Err(Error::InvalidSystem(format!(
                    "nucleus {} has non-finite parameters",
                    n.label
                )));
            }
        }
        Ok(())
    }

    pub fn n_sites(&self) -> usize {
        1 + self.nuclei.len()
    }

    pub fn dim(&self) -> usize {
        1 << self.n_sites()
    }

    /// Number of states in one electron manifold.
    pub fn manifold_dim(&self) -> usize {
        1 << self.nuclei.len()
    }

    pub fn nucleus_index(&self, label: &str) -> Option<usize> {
        self.nuclei.iter().position(|n| n.label == label)
    }

    pub fn level_index(&self, manifold: Manifold, labels: usize) -> usize {
        manifold.bit() * self.manifold_dim() + labels
    }

    /// Label bit of nucleus `k` inside a packed label word.
    pub fn label_bit(&self, labels: usize, k: usize) -> usize {
        (labels >> (self.nuclei.len() - 1 - k)) & 1
    }

    pub fn electron_ops(&self) -> crate::linalg::SpinOperatorSet {
        spin_ops(self.n_sites(), 0).expect("validated system")
    }
}

/// Secular and pseudosecular coefficients of an axially symmetric tensor.
pub fn hyperfine_coeffs(a_iso: f64, d_dipolar: f64, theta: f64) -> (f64, f64) {
    let (s, co) = theta.sin_cos();
    (a_iso + d_dipolar * (3.0 * co * co - 1.0), 3.0 * d_dipolar * co * s)
}

pub fn build_hamiltonian(sys: &SpinSystem) -> CMatrix {
    let n = sys.n_sites();
    let e = sys.electron_ops();
    let mut h = &e.sz * c(sys.electron_offset, 0.0);
    for (k, nuc) in sys.nuclei.iter().enumerate() {
        let ops = spin_ops(n, k + 1).expect("validated system");
        h += &ops.sz * c(nuc.larmor, 0.0);
        h += &e.sz * (&ops.sz * c(nuc.a_coeff, 0.0) + &ops.sx * c(nuc.b_coeff, 0.0));
    }
    h
}

/// Principal-branch `atan(num/den)` in (−π/2, π/2], with `den = 0` mapped
/// to ±π/2 by the sign of `num`.
fn principal_atan(num: f64, den: f64) -> Option<f64> {
    if den == 0.0 {
        if num == 0.0 {
            None
        } else {
            Some(std::f64::consts::FRAC_PI_2.copysign(num))
        }
    } else {
        Some((num / den).atan())
    }
}

/// Quantization angles `(θ↑, θ↓)` of a nucleus in the two electron manifolds:
/// `θ↑ = atan(−B / (2ω + A))`, `θ↓ = atan(−B / (−2ω + A))`.
pub fn quantization_angles(nuc: &Nucleus) -> Result<(f64, f64)> {
    let up = principal_atan(-nuc.b_coeff, 2.0 * nuc.larmor + nuc.a_coeff);
    let down = principal_atan(-nuc.b_coeff, -2.0 * nuc.larmor + nuc.a_coeff);
    match (up, down) {
        (Some(u), Some(d)) => Ok((u, d)),
        _ => Err(Error::DegenerateFrame(nuc.label.clone())),
    }
}

fn angle_or_zero(nuc: &Nucleus, manifold: Manifold) -> f64 {
    let den = match manifold {
        Manifold::Up => 2.0 * nuc.larmor + nuc.a_coeff,
        Manifold::Down => -2.0 * nuc.larmor + nuc.a_coeff,
    };
    principal_atan(-nuc.b_coeff, den).unwrap_or(0.0)
}

/// Effective nuclear precession frequencies `(ω↑, ω↓)`.
pub fn effective_frequencies(nuc: &Nucleus) -> (f64, f64) {
    let half_b = 0.5 * nuc.b_coeff;
    let up = (nuc.larmor + 0.5 * nuc.a_coeff).hypot(half_b);
    let down = (nuc.larmor - 0.5 * nuc.a_coeff).hypot(half_b);
    (up, down)
}

/// Logical basis `(|0⟩, |1⟩)` of a nucleus in the given manifold, written in
/// the nuclear Zeeman basis `(|↑⟩, |↓⟩)`.
pub fn logical_states(nuc: &Nucleus, manifold: Manifold) -> [DVector<C64>; 2] {
    logical_states_for_angle(angle_or_zero(nuc, manifold))
}

pub fn logical_states_for_angle(theta: f64) -> [DVector<C64>; 2] {
    let (s, co) = (0.5 * theta).sin_cos();
    [
        DVector::from_vec(vec![c(co, 0.0), c(-s, 0.0)]),
        DVector::from_vec(vec![c(s, 0.0), c(co, 0.0)]),
    ]
}

/// Effective single-nucleus Hamiltonian in a manifold,
/// `ω I_z + m_s (A I_z + B I_x)`.
pub fn manifold_nuclear_hamiltonian(nuc: &Nucleus, manifold: Manifold) -> CMatrix {
    let [sx, _, sz] = crate::linalg::pauli_half();
    let ms = manifold.ms();
    &sz * c(nuc.larmor + ms * nuc.a_coeff, 0.0) + &sx * c(ms * nuc.b_coeff, 0.0)
}

/// Product eigenbasis of the full Hamiltonian. Column `k` is level `k`.
pub fn eigenbasis(sys: &SpinSystem) -> (Vec<f64>, CMatrix) {
    let dim = sys.dim();
    let h = build_hamiltonian(sys);
    let mut basis = CMatrix::zeros(dim, dim);
    let mut energies = Vec::with_capacity(dim);
    for manifold in [Manifold::Up, Manifold::Down] {
        let electron = if manifold == Manifold::Up {
            DVector::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)])
        } else {
            DVector::from_vec(vec![c(0.0, 0.0), c(1.0, 0.0)])
        };
        let per_nucleus: Vec<[DVector<C64>; 2]> = sys.nuclei.iter().map(|n| logical_states(n, manifold)).collect();
        for labels in 0..sys.manifold_dim() {
            let mut v = electron.clone();
            for (k, states) in per_nucleus.iter().enumerate() {
                v = v.kronecker(&states[sys.label_bit(labels, k)]);
            }
            let idx = sys.level_index(manifold, labels);
            energies.push((v.adjoint() * &h * &v)[(0, 0)].re);
            basis.set_column(idx, &v);
        }
    }
    (energies, basis)
}

/// Projector onto level `k` of the product eigenbasis.
pub fn level_projector(basis: &CMatrix, k: usize) -> CMatrix {
    let v = basis.column(k);
    &v * v.adjoint()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransitionKind {
    Allowed,
    Forbidden,
    /// Intra-manifold nuclear transition (not driven by the microwave field).
    Nuclear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionRecord {
    pub from_level: usize,
    pub to_level: usize,
    /// Electron lines: signed offset from the carrier, MHz.
    /// Nuclear lines: absolute transition frequency, MHz.
    pub frequency: f64,
    /// Relative microwave drive rate in [0, 1]; zero for nuclear lines.
    pub intensity: f64,
    pub kind: TransitionKind,
}

/// All electron-flipping transitions `down → up` followed by every
/// intra-manifold nuclear transition.
pub fn transition_table(sys: &SpinSystem) -> Vec<TransitionRecord> {
    let (energies, basis) = eigenbasis(sys);
    let md = sys.manifold_dim();
    let electron_x = sys.electron_ops().sx;
    let mut out = Vec::new();
    for down in 0..md {
        let from = sys.level_index(Manifold::Down, down);
        for up in 0..md {
            let to = sys.level_index(Manifold::Up, up);
            // ⟨up|S_x|down⟩ = ½ × nuclear overlap
            let elem = (basis.column(to).adjoint() * &electron_x * basis.column(from))[(0, 0)];
            out.push(TransitionRecord {
                from_level: from,
                to_level: to,
                frequency: energies[to] - energies[from],
                intensity: (2.0 * elem.norm()).min(1.0),
                kind: if up == down {
                    TransitionKind::Allowed
                } else {
                    TransitionKind::Forbidden
                },
            });
        }
    }
    for manifold in [Manifold::Up, Manifold::Down] {
        for a in 0..md {
            for b in (a + 1)..md {
                let (i, j) = (sys.level_index(manifold, a), sys.level_index(manifold, b));
                out.push(TransitionRecord {
                    from_level: i,
                    to_level: j,
                    frequency: (energies[i] - energies[j]).abs(),
                    intensity: 0.0,
                    kind: TransitionKind::Nuclear,
                });
            }
        }
    }
    out
}

/// Relative strength of the double-flip forbidden transition,
/// `|tan(Δθ_1/2)·tan(Δθ_2/2)|` for a two-nucleus system.
pub fn suppression_factor(sys: &SpinSystem) -> Result<f64> {
    if sys.nuclei.len() != 2 {
        return Err(Error::InvalidSystem(format!(
            "suppression factor needs exactly 2 nuclei, got {}",
            sys.nuclei.len()
        )));
    }
    let mut prod = 1.0;
    for nuc in &sys.nuclei {
        let (up, down) = quantization_angles(nuc)?;
        prod *= (0.5 * (up - down)).tan();
    }
    Ok(prod.abs())
}

/// `kron` of an electron operator with nuclear identities.
pub fn electron_projector(sys: &SpinSystem, manifold: Manifold) -> CMatrix {
    let mut p = CMatrix::zeros(2, 2);
    p[(manifold.bit(), manifold.bit())] = c(1.0, 0.0);
    kron(&p, &crate::linalg::identity(sys.manifold_dim()))
}
