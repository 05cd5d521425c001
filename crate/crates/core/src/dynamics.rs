// SPDX-License-Identifier: Apache-2.0

//! Piecewise-constant propagation, electron dephasing and static-detuning
//! ensembles.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{
    c, eig_hermitian_unchecked, ensure_hermitian, expm_unitary, identity, propagator_from_eig, trace_inner, CMatrix,
    C64,
};
use crate::spin_system::{build_hamiltonian, SpinSystem};

/// Default time step: 1 ns.
pub const DEFAULT_DT: f64 = 0.001;

/// Piecewise-constant two-quadrature control envelope (MHz Rabi units).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapedPulse {
    /// Segment length, µs.
    pub dt: f64,
    pub amp_x: Vec<f64>,
    pub amp_y: Vec<f64>,
}

impl ShapedPulse {
    pub fn new(dt: f64, amp_x: Vec<f64>, amp_y: Vec<f64>) -> Result<Self> {
        if amp_x.len() != amp_y.len() {
            return Err(Error::DimensionMismatch(amp_x.len(), amp_y.len()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        if amp_x.iter().chain(&amp_y).any(|a| !a.is_finite()) {
            return Err(Error::InvalidArgument("non-finite pulse amplitude".into()));
        }
        Ok(Self { dt, amp_x, amp_y })
    }

    pub fn zeros(n_segments: usize, dt: f64) -> Self {
        Self {
            dt,
            amp_x: vec![0.0; n_segments],
            amp_y: vec![0.0; n_segments],
        }
    }

    /// Constant-amplitude pulse.
    pub fn constant(n_segments: usize, dt: f64, ax: f64, ay: f64) -> Self {
        Self {
            dt,
            amp_x: vec![ax; n_segments],
            amp_y: vec![ay; n_segments],
        }
    }

    pub fn len(&self) -> usize {
        self.amp_x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.amp_x.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.dt * self.len() as f64
    }

    pub fn amplitude(&self, k: usize) -> f64 {
        self.amp_x[k].hypot(self.amp_y[k])
    }

    pub fn max_amplitude(&self) -> f64 {
        (0..self.len()).map(|k| self.amplitude(k)).fold(0.0, f64::max)
    }

    /// Rescales any segment whose magnitude exceeds `amp_max` onto the cap.
    pub fn clip(&mut self, amp_max: f64) {
        for k in 0..self.len() {
            let r = self.amplitude(k);
            if r > amp_max {
                let s = amp_max / r;
                self.amp_x[k] *= s;
                self.amp_y[k] *= s;
            }
        }
    }

    /// Complex baseband envelope `amp_x + i·amp_y`.
    pub fn envelope(&self) -> Vec<C64> {
        self.amp_x.iter().zip(&self.amp_y).map(|(&x, &y)| c(x, y)).collect()
    }

    pub fn from_envelope(dt: f64, env: &[C64]) -> Self {
        Self {
            dt,
            amp_x: env.iter().map(|z| z.re).collect(),
            amp_y: env.iter().map(|z| z.im).collect(),
        }
    }

    /// Segments in reverse order with both quadratures negated. Without
    /// drift this undoes the original pulse.
    pub fn time_phase_reversed(&self) -> Self {
        Self {
            dt: self.dt,
            amp_x: self.amp_x.iter().rev().map(|a| -a).collect(),
            amp_y: self.amp_y.iter().rev().map(|a| -a).collect(),
        }
    }
}

/// Hermitian density operator. Deviation-form states (e.g. `ρ = S_z`) are
/// traceless and carry `trace_normalized = false`.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityState {
    pub matrix: CMatrix,
    pub trace_normalized: bool,
}

impl DensityState {
    pub fn new(matrix: CMatrix, trace_normalized: bool) -> Result<Self> {
        ensure_hermitian(&matrix)?;
        if trace_normalized {
            let tr = matrix.trace();
            if (tr - c(1.0, 0.0)).norm() > 1e-10 {
                return Err(Error::InvalidArgument(format!("trace {tr} is not 1")));
            }
            let (vals, _) = eig_hermitian_unchecked(&matrix);
            if vals[0] < -1e-9 {
                return Err(Error::InvalidArgument(format!("negative eigenvalue {}", vals[0])));
            }
        }
        Ok(Self {
            matrix,
            trace_normalized,
        })
    }

    pub fn deviation(matrix: CMatrix) -> Result<Self> {
        Self::new(matrix, false)
    }

    /// Thermal deviation state `ρ₀ = S_z`.
    pub fn thermal_deviation(sys: &SpinSystem) -> Self {
        Self {
            matrix: sys.electron_ops().sz,
            trace_normalized: false,
        }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }
}

/// Electron dephasing time plus a weighted static-detuning ensemble.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// µs; `f64::INFINITY` disables dephasing.
    pub t2e: f64,
    /// Detunings, MHz.
    pub detuning_grid: Vec<f64>,
    pub weights: Vec<f64>,
}

impl NoiseModel {
    pub fn new(t2e: f64, detuning_grid: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        let model = Self {
            t2e,
            detuning_grid,
            weights,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn noiseless() -> Self {
        Self {
            t2e: f64::INFINITY,
            detuning_grid: vec![0.0],
            weights: vec![1.0],
        }
    }

    /// Gaussian ensemble of the given FWHM together with a dephasing time.
    pub fn gaussian(t2e: f64, fwhm: f64, n_points: usize) -> Result<Self> {
        let (grid, weights) = gaussian_detuning_grid(fwhm, n_points)?;
        Self::new(t2e, grid, weights)
    }

    /// Same ensemble, no dephasing.
    pub fn without_dephasing(&self) -> Self {
        Self {
            t2e: f64::INFINITY,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.detuning_grid.len() != self.weights.len() || self.weights.is_empty() {
            return Err(Error::DimensionMismatch(self.detuning_grid.len(), self.weights.len()));
        }
        if self.weights.iter().any(|w| *w < 0.0 || !w.is_finite()) {
            return Err(Error::InvalidArgument("weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidArgument(format!("weights sum to {total}, not 1")));
        }
        if !(self.t2e > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "t2e must be positive, got {}",
                self.t2e
            )));
        }
        Ok(())
    }
}

/// FWHM → standard deviation for a Gaussian.
pub const FWHM_TO_SIGMA: f64 = 1.0 / 2.355;

/// Symmetric grid over ±1.5σ with normalized Gaussian weights.
pub fn gaussian_detuning_grid(fwhm: f64, n_points: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if n_points == 0 || n_points.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!(
            "ensemble size must be odd and positive, got {n_points}"
        )));
    }
    if !(fwhm >= 0.0) {
        return Err(Error::InvalidArgument(format!("fwhm must be non-negative, got {fwhm}")));
    }
    if n_points == 1 || fwhm == 0.0 {
        let mut w = vec![0.0; n_points];
        w[n_points / 2] = 1.0;
        return Ok((vec![0.0; n_points], w));
    }
    let sigma = fwhm * FWHM_TO_SIGMA;
    let half = (n_points / 2) as f64;
    let grid: Vec<f64> = (0..n_points).map(|k| 1.5 * sigma * (k as f64 - half) / half).collect();
    let raw: Vec<f64> = grid.iter().map(|d| (-0.5 * (d / sigma).powi(2)).exp()).collect();
    let total: f64 = raw.iter().sum();
    Ok((grid, raw.into_iter().map(|w| w / total).collect()))
}

/// `ax·S_x + ay·S_y` on the electron.
pub fn control_hamiltonian(sys: &SpinSystem, ax: f64, ay: f64) -> CMatrix {
    let e = sys.electron_ops();
    &e.sx * c(ax, 0.0) + &e.sy * c(ay, 0.0)
}

/// Drift and control operators of a system, cached for repeated use.
#[derive(Debug, Clone)]
pub struct ControlSystem {
    pub drift: CMatrix,
    pub sx: CMatrix,
    pub sy: CMatrix,
    pub sz: CMatrix,
}

impl ControlSystem {
    pub fn new(sys: &SpinSystem) -> Self {
        let e = sys.electron_ops();
        Self {
            drift: build_hamiltonian(sys),
            sx: e.sx,
            sy: e.sy,
            sz: e.sz,
        }
    }

    pub fn dim(&self) -> usize {
        self.drift.nrows()
    }

    pub fn hamiltonian(&self, detuning: f64, ax: f64, ay: f64) -> CMatrix {
        &self.drift + &self.sz * c(detuning, 0.0) + &self.sx * c(ax, 0.0) + &self.sy * c(ay, 0.0)
    }

    pub fn segment_propagator(&self, detuning: f64, ax: f64, ay: f64, dt: f64) -> CMatrix {
        let (vals, vecs) = eig_hermitian_unchecked(&self.hamiltonian(detuning, ax, ay));
        propagator_from_eig(&vals, &vecs, dt)
    }

    /// Total propagator `U_N ⋯ U_1` (first segment acts first).
    pub fn propagate(&self, pulse: &ShapedPulse, detuning: f64) -> CMatrix {
        let mut u = identity(self.dim());
        for k in 0..pulse.len() {
            u = self.segment_propagator(detuning, pulse.amp_x[k], pulse.amp_y[k], pulse.dt) * u;
        }
        u
    }
}

pub fn propagate(sys: &SpinSystem, pulse: &ShapedPulse, detuning: f64) -> CMatrix {
    ControlSystem::new(sys).propagate(pulse, detuning)
}

pub(crate) fn apply_dephasing(matrix: &mut CMatrix, factor: f64) {
    let half = matrix.nrows() / 2;
    for i in 0..half {
        for j in half..2 * half {
            matrix[(i, j)] *= factor;
            matrix[(j, i)] *= factor;
        }
    }
}

/// Damps electron coherences (the off-diagonal electron blocks) by
/// `exp(−t/t2e)`.
pub fn dephase_electron(rho: &DensityState, t: f64, t2e: f64) -> Result<DensityState> {
    if t < 0.0 {
        return Err(Error::InvalidArgument(format!("negative dephasing time {t}")));
    }
    let mut out = rho.clone();
    apply_dephasing(&mut out.matrix, (-t / t2e).exp());
    Ok(out)
}

/// One element of a pulse sequence.
#[derive(Debug, Clone)]
pub enum Segment {
    Pulse(ShapedPulse),
    /// Free evolution for the given time, µs.
    Delay(f64),
    /// Instantaneous ideal unitary.
    Gate(CMatrix),
}

impl Segment {
    pub fn duration(&self) -> f64 {
        match self {
            Segment::Pulse(p) => p.duration(),
            Segment::Delay(t) => *t,
            Segment::Gate(_) => 0.0,
        }
    }
}

pub(crate) fn run_branch(
    ctrl: &ControlSystem,
    segments: &[Segment],
    rho0: &CMatrix,
    detuning: f64,
    t2e: f64,
) -> CMatrix {
    let mut rho = rho0.clone();
    for seg in segments {
        match seg {
            Segment::Pulse(p) => {
                let factor = (-p.dt / t2e).exp();
                for k in 0..p.len() {
                    let u = ctrl.segment_propagator(detuning, p.amp_x[k], p.amp_y[k], p.dt);
                    rho = &u * rho * u.adjoint();
                    apply_dephasing(&mut rho, factor);
                }
            }
            Segment::Delay(tau) => {
                // free evolution is block diagonal in the electron, so it
                // commutes with electron dephasing
                let u = ctrl.segment_propagator(detuning, 0.0, 0.0, *tau);
                rho = &u * rho * u.adjoint();
                apply_dephasing(&mut rho, (-tau / t2e).exp());
            }
            Segment::Gate(g) => {
                rho = g * rho * g.adjoint();
            }
        }
    }
    rho
}

/// Heisenberg-picture pull-back of an observable through `segments`, so
/// that `Tr(O·Λ(ρ)) = Tr(pull_back(O)·ρ)` for the channel `Λ` applied by
/// [`run_branch`]. Dephasing is self-adjoint.
pub(crate) fn pull_back(
    ctrl: &ControlSystem,
    segments: &[Segment],
    observable: &CMatrix,
    detuning: f64,
    t2e: f64,
) -> CMatrix {
    let mut o = observable.clone();
    for seg in segments.iter().rev() {
        match seg {
            Segment::Pulse(p) => {
                let factor = (-p.dt / t2e).exp();
                for k in (0..p.len()).rev() {
                    let u = ctrl.segment_propagator(detuning, p.amp_x[k], p.amp_y[k], p.dt);
                    apply_dephasing(&mut o, factor);
                    o = u.adjoint() * o * &u;
                }
            }
            Segment::Delay(tau) => {
                let u = ctrl.segment_propagator(detuning, 0.0, 0.0, *tau);
                apply_dephasing(&mut o, (-tau / t2e).exp());
                o = u.adjoint() * o * &u;
            }
            Segment::Gate(g) => {
                o = g.adjoint() * o * g;
            }
        }
    }
    o
}

pub(crate) fn validate_segments(dim: usize, segments: &[Segment]) -> Result<()> {
    for seg in segments {
        match seg {
            Segment::Pulse(p) => {
                if p.amp_x.len() != p.amp_y.len() || !(p.dt > 0.0) {
                    return Err(Error::InvalidArgument("malformed pulse segment".into()));
                }
            }
            Segment::Delay(t) => {
                if !(*t >= 0.0 && t.is_finite()) {
                    return Err(Error::InvalidArgument(format!("invalid delay {t}")));
                }
            }
            Segment::Gate(g) => {
                if g.nrows() != dim || g.ncols() != dim {
                    return Err(Error::DimensionMismatch(g.nrows(), dim));
                }
            }
        }
    }
    Ok(())
}

/// Weight-averaged final state over the detuning ensemble, with electron
/// dephasing interleaved after every propagation step.
pub fn run_sequence(
    sys: &SpinSystem,
    segments: &[Segment],
    rho0: &DensityState,
    noise: &NoiseModel,
) -> Result<DensityState> {
    noise.validate()?;
    let ctrl = ControlSystem::new(sys);
    if rho0.dim() != ctrl.dim() {
        return Err(Error::DimensionMismatch(rho0.dim(), ctrl.dim()));
    }
    validate_segments(ctrl.dim(), segments)?;
    let branch = |d: &f64| run_branch(&ctrl, segments, &rho0.matrix, *d, noise.t2e);
    #[cfg(feature = "parallel")]
    let finals: Vec<CMatrix> = {
        use rayon::prelude::*;
        noise.detuning_grid.par_iter().map(branch).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let finals: Vec<CMatrix> = noise.detuning_grid.iter().map(branch).collect();

    let mut avg = CMatrix::zeros(ctrl.dim(), ctrl.dim());
    for (m, w) in finals.iter().zip(&noise.weights) {
        avg += m * c(*w, 0.0);
    }
    Ok(DensityState {
        matrix: avg,
        trace_normalized: rho0.trace_normalized,
    })
}

/// Normalized expectation `Tr(Mρ) / Tr(M²)`.
pub fn measure(rho: &DensityState, observable: &CMatrix) -> Result<f64> {
    ensure_hermitian(observable)?;
    if observable.shape() != rho.matrix.shape() {
        return Err(Error::DimensionMismatch(observable.nrows(), rho.dim()));
    }
    let norm = trace_inner(observable, observable).re;
    if norm == 0.0 {
        return Err(Error::InvalidArgument("observable has Tr(M²) = 0".into()));
    }
    Ok(trace_inner(observable, &rho.matrix).re / norm)
}

/// Exact rotation by `angle` about the in-plane axis at `phase` on the
/// two-level subspace spanned by eigenstates `i` and `j` (columns of
/// `basis`), identity elsewhere.
pub fn ideal_transition_rotation(basis: &CMatrix, i: usize, j: usize, angle: f64, phase: f64) -> Result<CMatrix> {
    let dim = basis.nrows();
    if i == j || i >= dim || j >= dim {
        return Err(Error::InvalidArgument(format!("invalid level pair ({i}, {j})")));
    }
    let (s, co) = (0.5 * angle).sin_cos();
    let (vi, vj) = (basis.column(i), basis.column(j));
    // 2×2 block exp(−i·angle/2·(cosφ σx + sinφ σy)) in the (i, j) basis
    let off_ij = c(0.0, -s) * C64::from_polar(1.0, -phase);
    let off_ji = c(0.0, -s) * C64::from_polar(1.0, phase);
    let mut u = identity(dim) - &vi * vi.adjoint() - &vj * vj.adjoint();
    u += (&vi * vi.adjoint() + &vj * vj.adjoint()) * c(co, 0.0);
    u += &vi * vj.adjoint() * off_ij;
    u += &vj * vi.adjoint() * off_ji;
    Ok(u)
}

/// Gaussian-envelope soft pulse resonant with a transition at `offset` MHz
/// from the carrier, scaled for the requested nutation angle at the given
/// relative drive strength.
pub fn gaussian_selective_pulse(
    offset: f64,
    intensity: f64,
    angle: f64,
    n_segments: usize,
    dt: f64,
) -> Result<ShapedPulse> {
    if n_segments == 0 || !(intensity > 0.0) {
        return Err(Error::InvalidArgument(
            "selective pulse needs segments and a drivable line".into(),
        ));
    }
    let centre = 0.5 * n_segments as f64;
    let width = n_segments as f64 / 6.0;
    let shape: Vec<f64> = (0..n_segments)
        .map(|k| (-0.5 * ((k as f64 + 0.5 - centre) / width).powi(2)).exp())
        .collect();
    let area: f64 = shape.iter().sum::<f64>() * dt;
    let scale = angle / (2.0 * PI * area * intensity);
    let mut ax = Vec::with_capacity(n_segments);
    let mut ay = Vec::with_capacity(n_segments);
    for (k, a) in shape.iter().enumerate() {
        let t = (k as f64 + 0.5) * dt;
        let (s, co) = (2.0 * PI * offset * t).sin_cos();
        ax.push(scale * a * co);
        ay.push(scale * a * s);
    }
    ShapedPulse::new(dt, ax, ay)
}

/// Convenience: `expm_unitary` of the drift (plus detuning) for time `t`.
pub fn free_evolution(sys: &SpinSystem, detuning: f64, t: f64) -> CMatrix {
    let h = ControlSystem::new(sys).hamiltonian(detuning, 0.0, 0.0);
    expm_unitary(&h, t).expect("drift is Hermitian")
}
