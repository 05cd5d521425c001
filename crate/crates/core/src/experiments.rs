// SPDX-License-Identifier: Apache-2.0

//! Simulated measurements and their analysis: the fieldswept spectrum,
//! three-pulse ESEEM, the double nuclear coherence scan, peak picking and
//! Hamiltonian parameter fits.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    apply_dephasing, pull_back, run_branch, ControlSystem, DensityState, NoiseModel, Segment, ShapedPulse,
};
use crate::error::{Error, Result};
use crate::grape::target_subspace_pi2;
use crate::linalg::{
    c, eig_hermitian_unchecked, frobenius, identity, kron, pauli_half, propagator_from_eig, trace_inner, CMatrix, C64,
};
use crate::spin_system::{
    build_hamiltonian, effective_frequencies, eigenbasis, level_projector, transition_table, Manifold, SpinSystem,
    TransitionKind, TransitionRecord,
};

/// Uniformly sampled real signal. `start` is the abscissa of the first
/// sample (µs for time series, MHz for spectra); `dt` is the spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignalSeries {
    pub start: f64,
    pub dt: f64,
    pub values: Vec<f64>,
    pub label: String,
}

impl SignalSeries {
    pub fn new(start: f64, dt: f64, values: Vec<f64>, label: impl Into<String>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) || !start.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "invalid sampling start={start} dt={dt}"
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite sample {v}")));
        }
        Ok(Self {
            start,
            dt,
            values,
            label: label.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Abscissa of sample `k`.
    pub fn axis(&self, k: usize) -> f64 {
        self.start + k as f64 * self.dt
    }

    /// Trapezoid-free rectangle sum `Σ v·dt`.
    pub fn integral(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.dt
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumPeak {
    /// MHz
    pub frequency: f64,
    /// Amplitude of the underlying cosine, in signal units.
    pub amplitude: f64,
    /// Full width at half maximum of the magnitude peak, MHz.
    pub width: f64,
}

/// Spacing of a strictly ascending, uniformly spaced grid.
fn uniform_step(grid: &[f64], what: &str) -> Result<f64> {
    if grid.len() < 2 {
        return Err(Error::InvalidArgument(format!("{what} needs at least 2 points")));
    }
    if grid.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(format!("{what} has non-finite entries")));
    }
    let step = grid[1] - grid[0];
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(format!("{what} must be strictly ascending")));
    }
    let scale = grid[0].abs().max(grid[grid.len() - 1].abs()).max(step);
    for (k, x) in grid.iter().enumerate() {
        if (x - (grid[0] + k as f64 * step)).abs() > 1e-9 * scale {
            return Err(Error::InvalidArgument(format!("{what} must be uniformly spaced")));
        }
    }
    Ok(step)
}

/// Ensemble members evaluated independently, results in grid order.
fn per_detuning<T: Send>(noise: &NoiseModel, f: impl Fn(f64) -> T + Sync) -> Vec<T> {
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        noise.detuning_grid.par_iter().map(|d| f(*d)).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        noise.detuning_grid.iter().map(|d| f(*d)).collect()
    }
}

/// Deviation from the thermal state once the populations joined by an
/// allowed electron transition have been exchanged.
pub fn initial_state_after_inversion(sys: &SpinSystem, transition: &TransitionRecord) -> Result<DensityState> {
    let inversion = inversion_gate(sys, transition)?;
    let rho0 = DensityState::thermal_deviation(sys);
    DensityState::deviation(&inversion * rho0.matrix * inversion.adjoint())
}

fn inversion_gate(sys: &SpinSystem, transition: &TransitionRecord) -> Result<CMatrix> {
    if transition.kind != TransitionKind::Allowed {
        return Err(Error::InvalidArgument(format!(
            "expected an allowed electron transition, got {:?} {}→{}",
            transition.kind, transition.from_level, transition.to_level
        )));
    }
    if transition.from_level >= sys.dim() || transition.to_level >= sys.dim() {
        return Err(Error::InvalidArgument("transition levels out of range".into()));
    }
    let (_, basis) = eigenbasis(sys);
    crate::dynamics::ideal_transition_rotation(&basis, transition.from_level, transition.to_level, PI, 0.0)
}

/// How the two Hadamard-type steps of the coherence sequence are applied.
#[derive(Debug, Clone, PartialEq)]
pub enum GateModel {
    /// Exact subspace reflection.
    Ideal,
    /// A shaped pulse, simulated segment by segment.
    Pulse(ShapedPulse),
}

/// Nuclear labels `(a, ā)` of the double coherence read out through the
/// allowed line of `a`: `ā` has every nuclear bit flipped.
pub fn coherence_pair(sys: &SpinSystem, readout: &TransitionRecord) -> Result<(usize, usize)> {
    if sys.nuclei.len() < 2 {
        return Err(Error::InvalidSystem("double coherence needs at least 2 nuclei".into()));
    }
    if readout.kind != TransitionKind::Allowed {
        return Err(Error::InvalidArgument("readout must be an allowed transition".into()));
    }
    let md = sys.manifold_dim();
    let a = readout.from_level % md;
    Ok((a, a ^ (md - 1)))
}

/// Allowed line used to prepare and read out the double coherence of the
/// given manifold: among the pairs `(a, ā)` the one with the smallest
/// precession frequency, entered through its lower label.
pub fn double_coherence_readout(sys: &SpinSystem, manifold: Manifold) -> Result<TransitionRecord> {
    if sys.nuclei.len() < 2 {
        return Err(Error::InvalidSystem("double coherence needs at least 2 nuclei".into()));
    }
    let (energies, _) = eigenbasis(sys);
    let md = sys.manifold_dim();
    let gap =
        |a: usize| (energies[sys.level_index(manifold, a)] - energies[sys.level_index(manifold, a ^ (md - 1))]).abs();
    let mut best = 0;
    for a in 1..md / 2 {
        if gap(a) < gap(best) - 1e-9 {
            best = a;
        }
    }
    let from = sys.level_index(Manifold::Down, best);
    let to = sys.level_index(Manifold::Up, best);
    transition_table(sys)
        .into_iter()
        .find(|t| t.from_level == from && t.to_level == to)
        .ok_or_else(|| Error::InvalidSystem("allowed transition missing".into()))
}

/// Electron z-magnetization on the readout line: `P(down, a) − P(up, a)`.
pub fn readout_observable(sys: &SpinSystem, readout: &TransitionRecord) -> Result<CMatrix> {
    if readout.kind != TransitionKind::Allowed {
        return Err(Error::InvalidArgument("readout must be an allowed transition".into()));
    }
    let (_, basis) = eigenbasis(sys);
    Ok(level_projector(&basis, readout.from_level) - level_projector(&basis, readout.to_level))
}

/// Population deviation of a single level in `ρ₀ = S_z`. Signals are
/// reported per unit level polarization.
pub const LEVEL_POLARIZATION: f64 = 0.5;

/// Inversion of the readout line, gate, free evolution for each `τ`, gate,
/// then the normalized readout-line magnetization
/// `Tr(Mρ) / (Tr(M²)·p)` with `p` the level polarization.
pub fn double_coherence_scan(
    sys: &SpinSystem,
    gate: &GateModel,
    readout: &TransitionRecord,
    manifold: Manifold,
    tau_grid: &[f64],
    noise: &NoiseModel,
) -> Result<SignalSeries> {
    sys.validate()?;
    noise.validate()?;
    let step = uniform_step(tau_grid, "tau grid")?;
    if tau_grid[0] < 0.0 {
        return Err(Error::InvalidArgument("delays must be non-negative".into()));
    }
    let pair = coherence_pair(sys, readout)?;
    let inversion = inversion_gate(sys, readout)?;
    let gate_segment = match gate {
        GateModel::Ideal => Segment::Gate(target_subspace_pi2(sys, manifold, pair, 1.0)?),
        GateModel::Pulse(p) => Segment::Pulse(p.clone()),
    };
    let observable = readout_observable(sys, readout)?;
    let norm = trace_inner(&observable, &observable).re * LEVEL_POLARIZATION;
    let ctrl = ControlSystem::new(sys);
    let rho0 = DensityState::thermal_deviation(sys).matrix;
    let prep = [Segment::Gate(inversion), gate_segment.clone()];
    let finish = [gate_segment];
    let t2e = noise.t2e;

    let branches = per_detuning(noise, |d| {
        let rho1 = run_branch(&ctrl, &prep, &rho0, d, t2e);
        let pulled = pull_back(&ctrl, &finish, &observable, d, t2e);
        let (vals, vecs) = eig_hermitian_unchecked(&ctrl.hamiltonian(d, 0.0, 0.0));
        tau_grid
            .iter()
            .map(|&tau| {
                let u = propagator_from_eig(&vals, &vecs, tau);
                let mut rho = &u * &rho1 * u.adjoint();
                apply_dephasing(&mut rho, (-tau / t2e).exp());
                trace_inner(&pulled, &rho).re
            })
            .collect::<Vec<f64>>()
    });
    let mut values = vec![0.0; tau_grid.len()];
    for (branch, w) in branches.iter().zip(&noise.weights) {
        for (acc, v) in values.iter_mut().zip(branch) {
            *acc += w * v / norm;
        }
    }
    SignalSeries::new(
        tau_grid[0],
        step,
        values,
        format!("double-coherence-{manifold:?}").to_lowercase(),
    )
}

fn hard_pulse(sys: &SpinSystem, angle: f64) -> CMatrix {
    let [sx, _, _] = pauli_half();
    let local = crate::linalg::expm_unitary(&sx, angle / (2.0 * PI)).expect("S_x is Hermitian");
    kron(&local, &identity(sys.manifold_dim()))
}

/// Keeps one electron block `(rows, cols)` of a matrix, each index being
/// 0 for the up half and 1 for the down half.
fn keep_electron_block(m: &CMatrix, rows: usize, cols: usize) -> CMatrix {
    let half = m.nrows() / 2;
    let mut out = CMatrix::zeros(m.nrows(), m.ncols());
    let (r0, c0) = (rows * half, cols * half);
    out.view_mut((r0, c0), (half, half))
        .copy_from(&m.view((r0, c0), (half, half)));
    out
}

fn keep_electron_diagonal(m: &CMatrix) -> CMatrix {
    keep_electron_block(m, 0, 0) + keep_electron_block(m, 1, 1)
}

/// Stimulated echo `π/2 – τ₁ – π/2 – T – π/2 – τ₁` with ideal hard pulses,
/// reported for each mixing time `T` as the echo amplitude relative to the
/// unmodulated echo of the same sequence. The echo coherence pathway
/// (`+1 → 0 → −1`) is selected explicitly, which is what phase cycling over
/// an inhomogeneous line achieves.
pub fn eseem_3pulse(sys: &SpinSystem, tau1: f64, t_grid: &[f64], noise: &NoiseModel) -> Result<SignalSeries> {
    sys.validate()?;
    noise.validate()?;
    if !(tau1 >= 0.0 && tau1.is_finite()) {
        return Err(Error::InvalidArgument(format!("invalid τ₁ {tau1}")));
    }
    let step = uniform_step(t_grid, "mixing-time grid")?;
    if t_grid[0] < 0.0 {
        return Err(Error::InvalidArgument("mixing times must be non-negative".into()));
    }
    let ctrl = ControlSystem::new(sys);
    let p = hard_pulse(sys, 0.5 * PI);
    let p_adj = p.adjoint();
    let rho0 = DensityState::thermal_deviation(sys).matrix;
    let s_plus = &ctrl.sx + &ctrl.sy * c(0.0, 1.0);
    let t2e = noise.t2e;
    // a lone electron gives |Tr(S₊ρ)| = 1/4 for this pathway
    let reference = 0.25 * sys.manifold_dim() as f64 * (-2.0 * tau1 / t2e).exp();

    let branches = per_detuning(noise, |d| {
        let (vals, vecs) = eig_hermitian_unchecked(&ctrl.hamiltonian(d, 0.0, 0.0));
        let u1 = propagator_from_eig(&vals, &vecs, tau1);
        let mut rho = keep_electron_block(&(&p * &rho0 * &p_adj), 0, 1);
        rho = &u1 * rho * u1.adjoint();
        apply_dephasing(&mut rho, (-tau1 / t2e).exp());
        let stored = keep_electron_diagonal(&(&p * rho * &p_adj));
        // detection pulled back through pulse 3 and the final τ₁
        let mut detect = keep_electron_block(&s_plus, 0, 1);
        detect = u1.adjoint() * detect * &u1;
        apply_dephasing(&mut detect, (-tau1 / t2e).exp());
        detect = &p_adj * detect * &p;
        t_grid
            .iter()
            .map(|&t| {
                let ut = propagator_from_eig(&vals, &vecs, t);
                trace_inner(&detect.adjoint(), &(&ut * &stored * ut.adjoint()))
            })
            .collect::<Vec<C64>>()
    });
    let mut echo = vec![c(0.0, 0.0); t_grid.len()];
    for (branch, w) in branches.iter().zip(&noise.weights) {
        for (acc, v) in echo.iter_mut().zip(branch) {
            *acc += v * *w;
        }
    }
    let values = echo.iter().map(|e| e.norm() / reference).collect();
    SignalSeries::new(t_grid[0], step, values, "eseem-3pulse")
}

/// Echo-detected field sweep: every electron line weighted by its squared
/// drive rate, broadened by an area-normalized Gaussian of the given FWHM.
pub fn fieldswept(sys: &SpinSystem, offset_grid: &[f64], linewidth: f64) -> Result<SignalSeries> {
    if !(linewidth > 0.0 && linewidth.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "linewidth must be positive, got {linewidth}"
        )));
    }
    sys.validate()?;
    let step = uniform_step(offset_grid, "offset grid")?;
    let sigma = linewidth * crate::dynamics::FWHM_TO_SIGMA;
    let lines: Vec<(f64, f64)> = transition_table(sys)
        .into_iter()
        .filter(|t| t.kind != TransitionKind::Nuclear)
        .map(|t| (t.frequency, t.intensity * t.intensity))
        .collect();
    let norm = 1.0 / (sigma * (2.0 * PI).sqrt());
    let values = offset_grid
        .iter()
        .map(|&x| {
            lines
                .iter()
                .map(|(f, w)| w * norm * (-0.5 * ((x - f) / sigma).powi(2)).exp())
                .sum()
        })
        .collect();
    SignalSeries::new(offset_grid[0], step, values, "fieldswept")
}

/// Peaks of the one-sided magnitude spectrum of the mean-subtracted signal,
/// Hann-tapered and zero-padded to four times its length. Peak positions are
/// refined by a parabola through the three top bins. Sorted by amplitude
/// (descending), then frequency.
pub fn fft_peaks(signal: &SignalSeries, min_rel_amplitude: f64) -> Result<Vec<SpectrumPeak>> {
    let n = signal.len();
    if n < 8 {
        return Err(Error::TooFewSamples { need: 8, got: n });
    }
    let mean = signal.values.iter().sum::<f64>() / n as f64;
    let padded = 4 * n;
    // without a taper the rectangular-window sidelobes (−13 dB) read as peaks
    let taper: Vec<f64> = (0..n)
        .map(|k| 0.5 - 0.5 * (2.0 * PI * (k as f64 + 0.5) / n as f64).cos())
        .collect();
    let gain: f64 = taper.iter().sum();
    let mut buf: Vec<Complex<f64>> = signal
        .values
        .iter()
        .zip(&taper)
        .map(|(v, w)| Complex::new((v - mean) * w, 0.0))
        .chain(std::iter::repeat_n(Complex::new(0.0, 0.0), padded - n))
        .collect();
    FftPlanner::new().plan_fft_forward(padded).process(&mut buf);
    let half = padded / 2;
    let mag: Vec<f64> = buf[..=half].iter().map(|z| z.norm()).collect();
    let top = mag.iter().cloned().fold(0.0, f64::max);
    // a constant signal leaves only rounding noise
    let scale = signal.values.iter().map(|v| (v - mean).abs()).fold(0.0, f64::max);
    if top <= 1e-12 * n as f64 * scale.max(f64::MIN_POSITIVE) || scale == 0.0 {
        return Ok(Vec::new());
    }
    let df = 1.0 / (padded as f64 * signal.dt);
    let threshold = min_rel_amplitude * top;
    let mut peaks = Vec::new();
    for k in 1..half {
        let (l, m, r) = (mag[k - 1], mag[k], mag[k + 1]);
        if !(m > l && m >= r && m >= threshold && m > 0.0) {
            continue;
        }
        let denom = l - 2.0 * m + r;
        let shift = if denom < 0.0 { 0.5 * (l - r) / denom } else { 0.0 };
        let peak_mag = m - 0.25 * (l - r) * shift;
        let half_max = 0.5 * peak_mag;
        let crossing = |dir: isize| -> f64 {
            let mut j = k as isize;
            loop {
                let next = j + dir;
                if next < 0 || next as usize > half {
                    return (j - k as isize).unsigned_abs() as f64;
                }
                let (a, b) = (mag[j as usize], mag[next as usize]);
                if b <= half_max {
                    let frac = if a > b { (a - half_max) / (a - b) } else { 0.0 };
                    return (j - k as isize).unsigned_abs() as f64 + frac;
                }
                j = next;
            }
        };
        let width = (crossing(-1) + crossing(1)) * df;
        peaks.push(SpectrumPeak {
            frequency: (k as f64 + shift) * df,
            amplitude: 2.0 * peak_mag / gain,
            width,
        });
    }
    peaks.sort_by(|a, b| {
        b.amplitude
            .total_cmp(&a.amplitude)
            .then(a.frequency.total_cmp(&b.frequency))
    });
    Ok(peaks)
}

/// Hyperfine coefficients `(A, B)` reproducing the effective frequencies
/// `(ω↑, ω↓)` at the given Larmor frequency; the `B ≥ 0` branch is returned.
pub fn fit_nucleus_params(omega_up: f64, omega_down: f64, larmor: f64) -> Result<(f64, f64)> {
    let infeasible = || Error::InfeasibleFrequencies {
        omega_up,
        omega_down,
        larmor,
    };
    if !(omega_up >= 0.0 && omega_down >= 0.0 && larmor.is_finite()) {
        return Err(infeasible());
    }
    let diff = omega_up * omega_up - omega_down * omega_down;
    let a = if larmor == 0.0 {
        if diff.abs() > 1e-9 * omega_up.max(omega_down).max(1.0).powi(2) {
            return Err(infeasible());
        }
        0.0
    } else {
        diff / (2.0 * larmor)
    };
    let rest = omega_down * omega_down - (larmor - 0.5 * a).powi(2);
    let tol = 1e-9 * omega_down.max(omega_up).max(1.0).powi(2);
    if rest < -tol {
        return Err(infeasible());
    }
    Ok((a, 2.0 * rest.max(0.0).sqrt()))
}

/// What a measured frequency is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FrequencyLabel {
    /// Effective precession frequency of one nucleus in one manifold.
    Nuclear { nucleus: usize, manifold: Manifold },
    /// `|ω_1 − ω_0|` in one manifold (two-nucleus systems).
    DoubleCoherence { manifold: Manifold },
    /// `ω↑ + ω↓` of one nucleus, the hyperfine splitting of the electron lines.
    Splitting { nucleus: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasuredFrequency {
    pub label: FrequencyLabel,
    /// MHz
    pub value: f64,
}

impl MeasuredFrequency {
    pub fn new(label: FrequencyLabel, value: f64) -> Self {
        Self { label, value }
    }
}

/// Model prediction for a labelled frequency.
pub fn predict_frequency(sys: &SpinSystem, label: FrequencyLabel) -> Result<f64> {
    let nucleus = |k: usize| {
        sys.nuclei.get(k).ok_or(Error::SiteOutOfRange {
            site: k,
            n_sites: sys.nuclei.len(),
        })
    };
    let pick = |(up, down): (f64, f64), m: Manifold| match m {
        Manifold::Up => up,
        Manifold::Down => down,
    };
    Ok(match label {
        FrequencyLabel::Nuclear { nucleus: k, manifold } => pick(effective_frequencies(nucleus(k)?), manifold),
        FrequencyLabel::DoubleCoherence { manifold } => {
            if sys.nuclei.len() != 2 {
                return Err(Error::InvalidSystem("double coherence label needs 2 nuclei".into()));
            }
            let w0 = pick(effective_frequencies(nucleus(0)?), manifold);
            let w1 = pick(effective_frequencies(nucleus(1)?), manifold);
            (w1 - w0).abs()
        }
        FrequencyLabel::Splitting { nucleus: k } => {
            let (up, down) = effective_frequencies(nucleus(k)?);
            up + down
        }
    })
}

/// Every frequency the labels can describe, predicted for `sys`.
pub fn predicted_frequencies(sys: &SpinSystem) -> Vec<MeasuredFrequency> {
    let mut labels = Vec::new();
    for k in 0..sys.nuclei.len() {
        for manifold in [Manifold::Up, Manifold::Down] {
            labels.push(FrequencyLabel::Nuclear { nucleus: k, manifold });
        }
    }
    if sys.nuclei.len() == 2 {
        for manifold in [Manifold::Up, Manifold::Down] {
            labels.push(FrequencyLabel::DoubleCoherence { manifold });
        }
    }
    for k in 0..sys.nuclei.len() {
        labels.push(FrequencyLabel::Splitting { nucleus: k });
    }
    labels
        .into_iter()
        .map(|l| MeasuredFrequency::new(l, predict_frequency(sys, l).expect("labels fit the system")))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefineOptions {
    /// Also adjust the Larmor frequencies. They are normally fixed by the
    /// field and the gyromagnetic ratios.
    pub fit_larmor: bool,
    pub max_iters: usize,
}

impl Default for RefineOptions {
    fn default() -> Self {
        Self {
            fit_larmor: false,
            max_iters: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Refinement {
    pub refined: SpinSystem,
    /// `‖H − H′‖_F / ‖H‖_F` between the initial and refined Hamiltonians.
    pub rel_distance: f64,
    /// RMS of the frequency residuals after refinement, MHz.
    pub rms_residual: f64,
    pub iterations: usize,
}

fn refine_params(sys: &SpinSystem, fit_larmor: bool) -> Vec<f64> {
    let mut p = Vec::new();
    for n in &sys.nuclei {
        if fit_larmor {
            p.push(n.larmor);
        }
        p.push(n.a_coeff);
        p.push(n.b_coeff);
    }
    p
}

fn with_params(base: &SpinSystem, p: &[f64], fit_larmor: bool) -> SpinSystem {
    let mut sys = base.clone();
    let per = if fit_larmor { 3 } else { 2 };
    for (k, n) in sys.nuclei.iter_mut().enumerate() {
        let q = &p[k * per..(k + 1) * per];
        if fit_larmor {
            n.larmor = q[0];
        }
        n.a_coeff = q[per - 2];
        n.b_coeff = q[per - 1];
    }
    sys
}

fn residuals(sys: &SpinSystem, measured: &[MeasuredFrequency]) -> Result<DVector<f64>> {
    let r: Result<Vec<f64>> = measured
        .iter()
        .map(|m| Ok(predict_frequency(sys, m.label)? - m.value))
        .collect();
    Ok(DVector::from_vec(r?))
}

fn label_touches(label: FrequencyLabel, k: usize) -> bool {
    match label {
        FrequencyLabel::Nuclear { nucleus, .. } | FrequencyLabel::Splitting { nucleus } => nucleus == k,
        FrequencyLabel::DoubleCoherence { .. } => true,
    }
}

/// Least-squares adjustment of the hyperfine parameters to measured
/// frequencies. Gauss–Newton steps use the pseudo-inverse of the Jacobian, so
/// directions the data do not constrain stay at their initial values.
pub fn refine_hamiltonian(
    initial: &SpinSystem,
    measured: &[MeasuredFrequency],
    opts: RefineOptions,
) -> Result<Refinement> {
    initial.validate()?;
    let mut p = refine_params(initial, opts.fit_larmor);
    let needed = p.len().min(3);
    if measured.len() < needed {
        return Err(Error::Underdetermined(format!(
            "{} measured frequencies for {} parameters (need at least {needed})",
            measured.len(),
            p.len()
        )));
    }
    for k in 0..initial.nuclei.len() {
        if !measured.iter().any(|m| label_touches(m.label, k)) {
            return Err(Error::Underdetermined(format!(
                "no measured frequency involves nucleus {k}"
            )));
        }
    }
    if let Some(m) = measured.iter().find(|m| !m.value.is_finite()) {
        return Err(Error::InvalidArgument(format!("non-finite measured value {}", m.value)));
    }

    let cost = |p: &[f64]| -> Result<(DVector<f64>, f64)> {
        let r = residuals(&with_params(initial, p, opts.fit_larmor), measured)?;
        let c = r.norm_squared();
        Ok((r, c))
    };
    let (mut r, mut f) = cost(&p)?;
    let mut iterations = 0;
    while iterations < opts.max_iters && f > 1e-26 {
        iterations += 1;
        let h = 1e-6;
        let mut jac = DMatrix::<f64>::zeros(measured.len(), p.len());
        for j in 0..p.len() {
            let mut hi = p.clone();
            let mut lo = p.clone();
            hi[j] += h;
            lo[j] -= h;
            let (rh, _) = cost(&hi)?;
            let (rl, _) = cost(&lo)?;
            jac.set_column(j, &((rh - rl) / (2.0 * h)));
        }
        let pinv = jac
            .svd(true, true)
            .pseudo_inverse(1e-10)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let step = -(pinv * &r);
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = p.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            let (rt, ft) = cost(&trial)?;
            if ft < f {
                p = trial;
                r = rt;
                f = ft;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved || step.norm() * t < 1e-13 {
            break;
        }
    }
    let refined = with_params(initial, &p, opts.fit_larmor);
    let h0 = build_hamiltonian(initial);
    let h1 = build_hamiltonian(&refined);
    let rel_distance = frobenius(&(&h0 - &h1)) / frobenius(&h0);
    Ok(Refinement {
        refined,
        rel_distance,
        rms_residual: (f / measured.len() as f64).sqrt(),
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spin_system::Nucleus;

    fn tau_grid(max: f64, step: f64) -> Vec<f64> {
        let n = (max / step).round() as usize;
        (0..=n).map(|k| k as f64 * step).collect()
    }

    #[test]
    fn inversion_of_37_mhz_line_swaps_one_pair() {
        let sys = SpinSystem::malonic_ref();
        let line = double_coherence_readout(&sys, Manifold::Down).unwrap();
        assert!((line.frequency - 37.0).abs() < 0.5, "{}", line.frequency);
        let rho = initial_state_after_inversion(&sys, &line).unwrap();
        let (_, basis) = eigenbasis(&sys);
        // explicit bookkeeping: +½ on up levels, −½ on down levels, two swapped
        for k in 0..sys.dim() {
            let pop = (basis.column(k).adjoint() * &rho.matrix * basis.column(k))[(0, 0)].re;
            let mut expect = if k < sys.manifold_dim() { 0.5 } else { -0.5 };
            if k == line.from_level || k == line.to_level {
                expect = -expect;
            }
            assert!((pop - expect).abs() < 1e-12, "level {k}: {pop}");
        }
        assert!(rho.matrix.trace().norm() < 1e-12);
        let twice = initial_state_after_inversion(&sys, &line).unwrap();
        let g = inversion_gate(&sys, &line).unwrap();
        let back = &g * &twice.matrix * g.adjoint();
        let rho0 = DensityState::thermal_deviation(&sys).matrix;
        assert!(crate::linalg::max_abs(&(back - rho0)) < 1e-12);
    }

    #[test]
    fn forbidden_transition_rejected() {
        let sys = SpinSystem::malonic_ref();
        let forbidden = transition_table(&sys)
            .into_iter()
            .find(|t| t.kind == TransitionKind::Forbidden)
            .unwrap();
        assert!(initial_state_after_inversion(&sys, &forbidden).is_err());
        let grid = tau_grid(0.01, 0.002);
        let noise = NoiseModel::noiseless();
        assert!(double_coherence_scan(&sys, &GateModel::Ideal, &forbidden, Manifold::Down, &grid, &noise).is_err());
    }

    #[test]
    fn ideal_scan_matches_closed_form() {
        let sys = SpinSystem::malonic_ref();
        let (up_h, down_h) = effective_frequencies(&sys.nuclei[0]);
        let (up_c, down_c) = effective_frequencies(&sys.nuclei[1]);
        let grid = tau_grid(0.5, 0.002);
        for (manifold, freq) in [(Manifold::Down, down_c - down_h), (Manifold::Up, up_c - up_h)] {
            let line = double_coherence_readout(&sys, manifold).unwrap();
            let s = double_coherence_scan(
                &sys,
                &GateModel::Ideal,
                &line,
                manifold,
                &grid,
                &NoiseModel::noiseless(),
            )
            .unwrap();
            // the closed form uses the effective frequencies, the simulation
            // the exact level energies; they coincide for product eigenstates
            for (tau, v) in grid.iter().zip(&s.values) {
                let expect = 0.5 * (1.0 + (2.0 * PI * freq * tau).cos());
                assert!((v - expect).abs() < 1e-6, "{manifold:?} τ={tau}: {v} vs {expect}");
            }
        }
    }

    #[test]
    fn scan_endpoints() {
        let sys = SpinSystem::malonic_ref();
        let line = double_coherence_readout(&sys, Manifold::Down).unwrap();
        let (_, down_h) = effective_frequencies(&sys.nuclei[0]);
        let (_, down_c) = effective_frequencies(&sys.nuclei[1]);
        let zero = 1.0 / (2.0 * (down_c - down_h));
        let s = double_coherence_scan(
            &sys,
            &GateModel::Ideal,
            &line,
            Manifold::Down,
            &[0.0, zero],
            &NoiseModel::noiseless(),
        )
        .unwrap();
        assert!((s.values[0] - 1.0).abs() < 1e-9);
        assert!(s.values[1].abs() < 1e-9);
    }

    #[test]
    fn pulled_back_scan_matches_direct_sequence() {
        let sys = SpinSystem::malonic_ref();
        let line = double_coherence_readout(&sys, Manifold::Down).unwrap();
        let pulse = ShapedPulse::new(
            0.001,
            (0..40).map(|k| 10.0 * (k as f64 * 0.3).sin()).collect(),
            (0..40).map(|k| 5.0 * (k as f64 * 0.17).cos()).collect(),
        )
        .unwrap();
        let noise = NoiseModel::gaussian(2.3, 14.0, 3).unwrap();
        let grid = [0.0, 0.013, 0.03];
        let fast = double_coherence_scan(
            &sys,
            &GateModel::Pulse(pulse.clone()),
            &line,
            Manifold::Down,
            &grid,
            &noise,
        );
        assert!(fast.is_err(), "grid must be uniform");
        let grid = [0.0, 0.013, 0.026, 0.039];
        let fast = double_coherence_scan(
            &sys,
            &GateModel::Pulse(pulse.clone()),
            &line,
            Manifold::Down,
            &grid,
            &noise,
        )
        .unwrap();
        let inv = inversion_gate(&sys, &line).unwrap();
        let m = readout_observable(&sys, &line).unwrap();
        let norm = trace_inner(&m, &m).re * LEVEL_POLARIZATION;
        for (k, tau) in grid.iter().enumerate() {
            let seq = [
                Segment::Gate(inv.clone()),
                Segment::Pulse(pulse.clone()),
                Segment::Delay(*tau),
                Segment::Pulse(pulse.clone()),
            ];
            let rho =
                crate::dynamics::run_sequence(&sys, &seq, &DensityState::thermal_deviation(&sys), &noise).unwrap();
            let direct = trace_inner(&m, &rho.matrix).re / norm;
            assert!(
                (direct - fast.values[k]).abs() < 1e-10,
                "{direct} vs {}",
                fast.values[k]
            );
        }
    }

    #[test]
    fn eseem_flat_without_anisotropy() {
        let mut sys = SpinSystem::malonic_ref();
        for n in &mut sys.nuclei {
            n.b_coeff = 0.0;
        }
        let grid = tau_grid(1.0, 0.004);
        let s = eseem_3pulse(&sys, 0.1, &grid, &NoiseModel::noiseless()).unwrap();
        let (lo, hi) = s
            .values
            .iter()
            .fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(*v), b.max(*v)));
        assert!(hi - lo < 1e-10, "{lo}..{hi}");
        assert!((hi - 1.0).abs() < 1e-10);
    }

    #[test]
    fn eseem_shows_proton_lines_only() {
        let sys = SpinSystem::malonic_ref();
        let (up_h, down_h) = effective_frequencies(&sys.nuclei[0]);
        let (up_c, down_c) = effective_frequencies(&sys.nuclei[1]);
        let grid = tau_grid(4.0, 0.004);
        let mut freqs_by_tau = Vec::new();
        for tau1 in [0.1, 0.2] {
            let s = eseem_3pulse(&sys, tau1, &grid, &NoiseModel::noiseless()).unwrap();
            let peaks = fft_peaks(&s, 0.02).unwrap();
            let top = peaks[0].amplitude;
            let near = |f: f64| peaks.iter().find(|p| (p.frequency - f).abs() < 0.5).copied();
            let ph_up = near(up_h).expect("ω↑H present");
            let ph_down = near(down_h).expect("ω↓H present");
            assert!((ph_up.frequency - up_h).abs() < 0.05, "{}", ph_up.frequency);
            assert!((ph_down.frequency - down_h).abs() < 0.05, "{}", ph_down.frequency);
            for f in [up_c, down_c] {
                if let Some(p) = near(f) {
                    assert!(
                        p.amplitude < 0.05 * top,
                        "13C line at {} with {}",
                        p.frequency,
                        p.amplitude
                    );
                }
            }
            freqs_by_tau.push((ph_up.frequency, ph_down.frequency));
        }
        assert!((freqs_by_tau[0].0 - freqs_by_tau[1].0).abs() < 0.02);
        assert!((freqs_by_tau[0].1 - freqs_by_tau[1].1).abs() < 0.02);
    }

    #[test]
    fn fieldswept_examples() {
        let grid: Vec<f64> = (0..=2000).map(|k| -150.0 + k as f64 * 0.15).collect();
        let bare = fieldswept(&SpinSystem::bare_electron(), &grid, 14.0).unwrap();
        let imax = (0..bare.len())
            .max_by(|a, b| bare.values[*a].total_cmp(&bare.values[*b]))
            .unwrap();
        assert!(bare.axis(imax).abs() < 0.1);

        let sys = SpinSystem::malonic_ref();
        let s = fieldswept(&sys, &grid, 14.0).unwrap();
        let maxima: Vec<f64> = (1..s.len() - 1)
            .filter(|&k| s.values[k] > s.values[k - 1] && s.values[k] >= s.values[k + 1])
            .filter(|&k| s.values[k] > 0.1 * s.values.iter().cloned().fold(0.0, f64::max))
            .map(|k| s.axis(k))
            .collect();
        assert_eq!(maxima.len(), 4, "{maxima:?}");
        for (got, want) in maxima.iter().zip([-85.3, -37.0, 37.0, 85.3]) {
            assert!((got - want).abs() < 1.0, "{got} vs {want}");
        }
        assert!((maxima[3] - maxima[0] - 170.0).abs() < 2.0);

        let wide = fieldswept(&sys, &grid, 20.0).unwrap();
        assert!((s.integral() - wide.integral()).abs() < 0.01 * s.integral());
        assert!((s.integral() - 4.0).abs() < 0.01 * 4.0);
    }

    #[test]
    fn fieldswept_mirror_under_sign_flip() {
        let sys = SpinSystem::malonic_ref();
        let mut flipped = sys.clone();
        for n in &mut flipped.nuclei {
            n.larmor = -n.larmor;
            n.a_coeff = -n.a_coeff;
            n.b_coeff = -n.b_coeff;
        }
        let grid: Vec<f64> = (0..=400).map(|k| -120.0 + k as f64 * 0.6).collect();
        let a = fieldswept(&sys, &grid, 14.0).unwrap();
        let b = fieldswept(&flipped, &grid, 14.0).unwrap();
        for k in 0..grid.len() {
            assert!((a.values[k] - b.values[grid.len() - 1 - k]).abs() < 1e-9);
        }
    }

    #[test]
    fn fft_peak_examples() {
        let dt = 0.002;
        let times: Vec<f64> = (0..1000).map(|k| k as f64 * dt).collect();
        let tone = SignalSeries::new(0.0, dt, times.iter().map(|t| (2.0 * PI * 22.0 * t).cos()).collect(), "").unwrap();
        let peaks = fft_peaks(&tone, 0.5).unwrap();
        assert_eq!(peaks.len(), 1);
        assert!((peaks[0].frequency - 22.0).abs() < 0.1);
        assert!((peaks[0].amplitude - 1.0).abs() < 0.05);

        let flat = SignalSeries::new(0.0, dt, vec![3.0; 100], "").unwrap();
        assert!(fft_peaks(&flat, 0.1).unwrap().is_empty());

        let two = SignalSeries::new(
            0.0,
            dt,
            times
                .iter()
                .map(|t| (2.0 * PI * 22.0 * t).cos() + 0.2 * (2.0 * PI * 12.0 * t).cos())
                .collect(),
            "",
        )
        .unwrap();
        let peaks = fft_peaks(&two, 0.1).unwrap();
        assert_eq!(peaks.len(), 2, "{peaks:?}");
        let ratio = peaks[0].amplitude / peaks[1].amplitude;
        assert!((ratio - 5.0).abs() < 0.5, "{ratio}");
        assert!((peaks[1].frequency - 12.0).abs() < 0.1);

        let short = SignalSeries::new(0.0, dt, vec![1.0; 7], "").unwrap();
        assert!(matches!(fft_peaks(&short, 0.1), Err(Error::TooFewSamples { .. })));
    }

    #[test]
    fn fit_nucleus_examples() {
        assert_eq!(fit_nucleus_params(14.09, 14.09, 14.09).unwrap(), (0.0, 0.0));
        let (a, b) = fit_nucleus_params(11.99, 36.35, 14.09).unwrap();
        assert!((a + 41.8).abs() < 0.1 && (b - 19.7).abs() < 0.1, "{a} {b}");
        assert!(fit_nucleus_params(1.0, 50.0, 14.09).is_err());
        assert!(fit_nucleus_params(-1.0, 5.0, 14.09).is_err());
    }

    #[test]
    fn refine_recovers_perturbed_carbon() {
        let truth = SpinSystem::malonic_ref();
        let mut start = truth.clone();
        start.nuclei[1].a_coeff *= 1.02;
        let measured: Vec<MeasuredFrequency> = [
            FrequencyLabel::Nuclear {
                nucleus: 0,
                manifold: Manifold::Up,
            },
            FrequencyLabel::Nuclear {
                nucleus: 0,
                manifold: Manifold::Down,
            },
            FrequencyLabel::DoubleCoherence {
                manifold: Manifold::Down,
            },
            FrequencyLabel::DoubleCoherence { manifold: Manifold::Up },
        ]
        .into_iter()
        .map(|l| MeasuredFrequency::new(l, predict_frequency(&truth, l).unwrap()))
        .collect();
        let fit = refine_hamiltonian(&start, &measured, RefineOptions::default()).unwrap();
        assert!(
            (fit.refined.nuclei[1].a_coeff - 97.6).abs() < 0.1,
            "{:?}",
            fit.refined.nuclei[1]
        );
        assert!(fit.rms_residual < 1e-6);
        assert!(fit.rel_distance > 0.0 && fit.rel_distance < 0.016);

        let same = refine_hamiltonian(&truth, &measured, RefineOptions::default()).unwrap();
        assert!(same.rel_distance < 1e-12);
        assert!(matches!(
            refine_hamiltonian(&truth, &measured[..2], RefineOptions::default()),
            Err(Error::Underdetermined(_))
        ));
    }

    #[test]
    fn refine_single_nucleus() {
        let truth = SpinSystem::new(0.0, vec![Nucleus::new("H", 14.09, -41.8, 19.7)], 2.3, 14.0).unwrap();
        let mut start = truth.clone();
        start.nuclei[0].b_coeff = 18.0;
        let measured = predicted_frequencies(&truth);
        let fit = refine_hamiltonian(&start, &measured, RefineOptions::default()).unwrap();
        assert!((fit.refined.nuclei[0].b_coeff - 19.7).abs() < 1e-6);
    }
}
