// SPDX-License-Identifier: Apache-2.0

//! Gradient ascent pulse engineering for ensemble-robust gates.
//!
//! The figure of merit is the weighted ensemble average of
//! `Φ = |Tr(W† U(δ))|² / d²` over static electron detunings `δ`. Segment
//! derivatives are exact: each segment propagator is built from a Hermitian
//! eigendecomposition, and the Fréchet derivative of the exponential is taken
//! in that eigenbasis.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{apply_dephasing, ControlSystem, NoiseModel, ShapedPulse};
use crate::error::{Error, Result};
use crate::linalg::{c, eig_hermitian_unchecked, fidelity_unitary, identity, kron, trace_inner, CMatrix, C64};
use crate::spin_system::{eigenbasis, Manifold, SpinSystem};

/// How the optimizer seeds the pulse.
#[derive(Debug, Clone, PartialEq)]
pub enum Init {
    /// Uniform in ±amp_max/10 on both quadratures from the configured seed.
    Random,
    Zero,
    Given(ShapedPulse),
}

#[derive(Debug, Clone)]
pub struct GrapeConfig {
    pub n_segments: usize,
    /// µs
    pub dt: f64,
    /// Rabi cap, MHz.
    pub amp_max: f64,
    pub target: CMatrix,
    /// Detuning ensemble; `t2e` is ignored during optimization.
    pub ensemble: NoiseModel,
    pub seed: u64,
    pub max_iters: usize,
    pub fidelity_goal: f64,
    /// Initial line-search step.
    pub step_init: f64,
    pub init: Init,
}

impl GrapeConfig {
    /// 1 ns segments, 28 MHz cap, single ideal ensemble point.
    pub fn new(target: CMatrix, duration: f64) -> Self {
        let dt = crate::dynamics::DEFAULT_DT;
        Self {
            n_segments: (duration / dt).round() as usize,
            dt,
            amp_max: 28.0,
            target,
            ensemble: NoiseModel::noiseless(),
            seed: 1,
            max_iters: 2000,
            fidelity_goal: 0.99,
            step_init: 1.0,
            init: Init::Random,
        }
    }

    pub fn duration(&self) -> f64 {
        self.n_segments as f64 * self.dt
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.amp_max > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "amp_max must be positive, got {}",
                self.amp_max
            )));
        }
        if !(self.fidelity_goal > 0.0 && self.fidelity_goal <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "fidelity goal must lie in (0, 1], got {}",
                self.fidelity_goal
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.step_init > 0.0) {
            return Err(Error::InvalidArgument("step_init must be positive".into()));
        }
        if self.target.nrows() != dim || self.target.ncols() != dim {
            return Err(Error::DimensionMismatch(self.target.nrows(), dim));
        }
        if let Init::Given(p) = &self.init {
            if p.len() != self.n_segments {
                return Err(Error::DimensionMismatch(p.len(), self.n_segments));
            }
        }
        self.ensemble.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrapeResult {
    pub pulse: ShapedPulse,
    /// Fidelity at zero detuning.
    pub fidelity_ideal: f64,
    /// Ensemble-averaged fidelity.
    pub fidelity_robust: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Robust fidelity after each accepted step, starting with the initial pulse.
    pub fidelity_trace: Vec<f64>,
}

/// Real Hadamard-type reflection on levels `(i, j)` of one manifold,
/// identity elsewhere. It maps `E_i − E_j` to `±(|i⟩⟨j| + |j⟩⟨i|)` and is
/// its own inverse, so applying the same pulse twice undoes it.
pub fn target_subspace_pi2(
    sys: &SpinSystem,
    manifold: Manifold,
    level_pair: (usize, usize),
    sign: f64,
) -> Result<CMatrix> {
    let md = sys.manifold_dim();
    let (a, b) = level_pair;
    if a == b || a >= md || b >= md {
        return Err(Error::InvalidArgument(format!("invalid level pair ({a}, {b})")));
    }
    let (_, basis) = eigenbasis(sys);
    let (i, j) = (sys.level_index(manifold, a), sys.level_index(manifold, b));
    let (vi, vj) = (basis.column(i), basis.column(j));
    let s = if sign < 0.0 { -1.0 } else { 1.0 };
    let r = FRAC_1_SQRT_2;
    let mut u = identity(sys.dim()) - &vi * vi.adjoint() - &vj * vj.adjoint();
    u += (&vi * vi.adjoint() - &vj * vj.adjoint()) * c(s * r, 0.0);
    u += (&vi * vj.adjoint() + &vj * vi.adjoint()) * c(r, 0.0);
    Ok(u)
}

pub fn cnot_gate() -> CMatrix {
    let mut g = CMatrix::zeros(4, 4);
    for (i, j) in [(0, 0), (1, 1), (2, 3), (3, 2)] {
        g[(i, j)] = c(1.0, 0.0);
    }
    g
}

pub fn swap_gate() -> CMatrix {
    let mut g = CMatrix::zeros(4, 4);
    for (i, j) in [(0, 0), (1, 2), (2, 1), (3, 3)] {
        g[(i, j)] = c(1.0, 0.0);
    }
    g
}

/// A gate on the nuclear logical qubits applied identically in both electron
/// manifolds, each in its own eigenbasis.
pub fn nuclear_gate_target(sys: &SpinSystem, gate: &CMatrix) -> Result<CMatrix> {
    let md = sys.manifold_dim();
    if gate.nrows() != md || gate.ncols() != md {
        return Err(Error::DimensionMismatch(gate.nrows(), md));
    }
    let (_, basis) = eigenbasis(sys);
    Ok(&basis * kron(&identity(2), gate) * basis.adjoint())
}

/// Ensemble fidelity and its exact gradient for a fixed target.
pub struct Objective {
    ctrl: ControlSystem,
    target_adj: CMatrix,
    ensemble: NoiseModel,
    dim: usize,
}

/// Per-segment eigendecomposition and propagator.
struct SegmentData {
    values: Vec<f64>,
    vectors: CMatrix,
    phases: Vec<C64>,
    u: CMatrix,
}

impl Objective {
    pub fn new(sys: &SpinSystem, target: &CMatrix, ensemble: &NoiseModel) -> Result<Self> {
        let ctrl = ControlSystem::new(sys);
        if target.nrows() != ctrl.dim() || target.ncols() != ctrl.dim() {
            return Err(Error::DimensionMismatch(target.nrows(), ctrl.dim()));
        }
        ensemble.validate()?;
        Ok(Self {
            dim: ctrl.dim(),
            ctrl,
            target_adj: target.adjoint(),
            ensemble: ensemble.clone(),
        })
    }

    fn segment(&self, detuning: f64, ax: f64, ay: f64, dt: f64) -> SegmentData {
        let (values, vectors) = eig_hermitian_unchecked(&self.ctrl.hamiltonian(detuning, ax, ay));
        let phases: Vec<C64> = values
            .iter()
            .map(|&l| C64::from_polar(1.0, -2.0 * PI * l * dt))
            .collect();
        let mut scaled = vectors.clone();
        for (k, ph) in phases.iter().enumerate() {
            for z in scaled.column_mut(k).iter_mut() {
                *z *= ph;
            }
        }
        let u = scaled * vectors.adjoint();
        SegmentData {
            values,
            vectors,
            phases,
            u,
        }
    }

    fn member_value(&self, pulse: &ShapedPulse, detuning: f64) -> f64 {
        let u = self.ctrl.propagate(pulse, detuning);
        let d = self.dim as f64;
        trace_inner(&self.target_adj.adjoint(), &u).norm_sqr() / (d * d)
    }

    /// Fidelity of one ensemble member and its gradient, packed as
    /// `[∂/∂amp_x..., ∂/∂amp_y...]`.
    fn member_value_grad(&self, pulse: &ShapedPulse, detuning: f64) -> (f64, Vec<f64>) {
        let n = pulse.len();
        let dt = pulse.dt;
        let segs: Vec<SegmentData> = (0..n)
            .map(|k| self.segment(detuning, pulse.amp_x[k], pulse.amp_y[k], dt))
            .collect();
        // forward[k] = U_k ⋯ U_1 (forward[0] = I)
        let mut forward = Vec::with_capacity(n + 1);
        forward.push(identity(self.dim));
        for s in &segs {
            let next = &s.u * forward.last().expect("non-empty");
            forward.push(next);
        }
        let total = &forward[n];
        let g = trace_inner(&self.target_adj.adjoint(), total);
        let d2 = (self.dim * self.dim) as f64;
        let value = g.norm_sqr() / d2;

        let mut grad = vec![0.0; 2 * n];
        // back = W† U_N ⋯ U_{k+1}
        let mut back = self.target_adj.clone();
        for k in (0..n).rev() {
            let s = &segs[k];
            let p = &forward[k] * &back;
            let q = s.vectors.adjoint() * p * &s.vectors;
            let mx = s.vectors.adjoint() * &self.ctrl.sx * &s.vectors;
            let my = s.vectors.adjoint() * &self.ctrl.sy * &s.vectors;
            let (mut dgx, mut dgy) = (C64::new(0.0, 0.0), C64::new(0.0, 0.0));
            for a in 0..self.dim {
                for b in 0..self.dim {
                    let gap = s.values[a] - s.values[b];
                    let kernel = if gap.abs() < 1e-9 {
                        s.phases[a] * c(0.0, -2.0 * PI * dt)
                    } else {
                        (s.phases[a] - s.phases[b]) / gap
                    };
                    let w = q[(b, a)] * kernel;
                    dgx += w * mx[(a, b)];
                    dgy += w * my[(a, b)];
                }
            }
            grad[k] = 2.0 * (g.conj() * dgx).re / d2;
            grad[n + k] = 2.0 * (g.conj() * dgy).re / d2;
            back *= &s.u;
        }
        (value, grad)
    }

    pub fn value(&self, pulse: &ShapedPulse) -> f64 {
        let eval = |d: &f64| self.member_value(pulse, *d);
        #[cfg(feature = "parallel")]
        let vals: Vec<f64> = {
            use rayon::prelude::*;
            self.ensemble.detuning_grid.par_iter().map(eval).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let vals: Vec<f64> = self.ensemble.detuning_grid.iter().map(eval).collect();
        vals.iter().zip(&self.ensemble.weights).map(|(v, w)| v * w).sum()
    }

    pub fn value_and_gradient(&self, pulse: &ShapedPulse) -> (f64, Vec<f64>) {
        let eval = |d: &f64| self.member_value_grad(pulse, *d);
        #[cfg(feature = "parallel")]
        let parts: Vec<(f64, Vec<f64>)> = {
            use rayon::prelude::*;
            self.ensemble.detuning_grid.par_iter().map(eval).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let parts: Vec<(f64, Vec<f64>)> = self.ensemble.detuning_grid.iter().map(eval).collect();
        let mut value = 0.0;
        let mut grad = vec![0.0; 2 * pulse.len()];
        for ((v, g), w) in parts.iter().zip(&self.ensemble.weights) {
            value += w * v;
            for (acc, x) in grad.iter_mut().zip(g) {
                *acc += w * x;
            }
        }
        (value, grad)
    }
}

/// `Σ_k w_k Φ(target, U(δ_k))`.
pub fn robust_fidelity(sys: &SpinSystem, pulse: &ShapedPulse, target: &CMatrix, ensemble: &NoiseModel) -> Result<f64> {
    Ok(Objective::new(sys, target, ensemble)?.value(pulse))
}

/// Exact gradient of [`robust_fidelity`] as `(∂/∂amp_x, ∂/∂amp_y)` per segment.
pub fn gradient(
    sys: &SpinSystem,
    pulse: &ShapedPulse,
    target: &CMatrix,
    ensemble: &NoiseModel,
) -> Result<Vec<(f64, f64)>> {
    let (_, g) = Objective::new(sys, target, ensemble)?.value_and_gradient(pulse);
    let n = pulse.len();
    Ok((0..n).map(|k| (g[k], g[n + k])).collect())
}

/// Zero-detuning fidelity of a pulse.
pub fn ideal_fidelity(sys: &SpinSystem, pulse: &ShapedPulse, target: &CMatrix) -> Result<f64> {
    let u = ControlSystem::new(sys).propagate(pulse, 0.0);
    fidelity_unitary(target, &u)
}

/// Process fidelity `Tr(Ŵ†Λ̂) / d²` between the unitary target `W` and the
/// channel `Λ` the pulse realizes under `noise` (detuning average with
/// electron dephasing after every segment). For a unitary channel this is
/// the same `|Tr(W†U)|²/d²` the optimizer maximizes.
pub fn process_fidelity(sys: &SpinSystem, pulse: &ShapedPulse, target: &CMatrix, noise: &NoiseModel) -> Result<f64> {
    noise.validate()?;
    let ctrl = ControlSystem::new(sys);
    let dim = ctrl.dim();
    if target.nrows() != dim || target.ncols() != dim {
        return Err(Error::DimensionMismatch(target.nrows(), dim));
    }
    let factor = (-pulse.dt / noise.t2e).exp();
    let member = |d: f64| -> f64 {
        let props: Vec<CMatrix> = (0..pulse.len())
            .map(|k| ctrl.segment_propagator(d, pulse.amp_x[k], pulse.amp_y[k], pulse.dt))
            .collect();
        let mut acc = C64::new(0.0, 0.0);
        for i in 0..dim {
            for j in 0..dim {
                let mut rho = CMatrix::zeros(dim, dim);
                rho[(i, j)] = c(1.0, 0.0);
                let ideal = target * &rho * target.adjoint();
                for u in &props {
                    rho = u * rho * u.adjoint();
                    apply_dephasing(&mut rho, factor);
                }
                acc += trace_inner(&ideal, &rho);
            }
        }
        acc.re / (dim * dim) as f64
    };
    #[cfg(feature = "parallel")]
    let vals: Vec<f64> = {
        use rayon::prelude::*;
        noise.detuning_grid.par_iter().map(|d| member(*d)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let vals: Vec<f64> = noise.detuning_grid.iter().map(|d| member(*d)).collect();
    Ok(vals.iter().zip(&noise.weights).map(|(v, w)| v * w).sum())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn initial_pulse(cfg: &GrapeConfig) -> ShapedPulse {
    match &cfg.init {
        Init::Zero => ShapedPulse::zeros(cfg.n_segments, cfg.dt),
        Init::Given(p) => p.clone(),
        Init::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let lim = cfg.amp_max / 10.0;
            let mut draw = || rng.random_range(-lim..=lim);
            let amp_x: Vec<f64> = (0..cfg.n_segments).map(|_| draw()).collect();
            let amp_y: Vec<f64> = (0..cfg.n_segments).map(|_| draw()).collect();
            ShapedPulse {
                dt: cfg.dt,
                amp_x,
                amp_y,
            }
        }
    }
}

fn pack(p: &ShapedPulse) -> Vec<f64> {
    p.amp_x.iter().chain(&p.amp_y).copied().collect()
}

fn unpack(x: &[f64], dt: f64, amp_max: f64) -> ShapedPulse {
    let n = x.len() / 2;
    let mut p = ShapedPulse {
        dt,
        amp_x: x[..n].to_vec(),
        amp_y: x[n..].to_vec(),
    };
    p.clip(amp_max);
    p
}

/// Limited-memory curvature pairs for the ascent direction.
struct History {
    pairs: Vec<(Vec<f64>, Vec<f64>, f64)>,
    capacity: usize,
}

impl History {
    fn new(capacity: usize) -> Self {
        Self {
            pairs: Vec::with_capacity(capacity),
            capacity,
        }
    }

    fn push(&mut self, s: Vec<f64>, y: Vec<f64>) {
        // curvature condition for a concave ascent problem: s·y < 0
        let sy = dot(&s, &y);
        if sy < -1e-18 {
            if self.pairs.len() == self.capacity {
                self.pairs.remove(0);
            }
            self.pairs.push((s, y, sy));
        }
    }

    fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Two-loop recursion on the negated objective; returns an ascent
    /// direction for the gradient `g`.
    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q: Vec<f64> = g.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for (s, y, sy) in self.pairs.iter().rev() {
            // pairs for f = −Φ: y_f = −y, so ρ = 1/(s·y_f) = −1/sy
            let rho = -1.0 / sy;
            let alpha = rho * dot(s, &q);
            for (qi, yi) in q.iter_mut().zip(y) {
                *qi += alpha * yi;
            }
            alphas.push(alpha);
        }
        if let Some((_, y, sy)) = self.pairs.last() {
            let gamma = -sy / dot(y, y);
            for qi in q.iter_mut() {
                *qi *= gamma;
            }
        }
        for ((s, y, sy), alpha) in self.pairs.iter().zip(alphas.iter().rev()) {
            let rho = -1.0 / sy;
            let beta = -rho * dot(y, &q);
            for (qi, si) in q.iter_mut().zip(s) {
                *qi += (alpha - beta) * si;
            }
        }
        q
    }
}

/// Monotone ascent from a seeded start. The direction comes from a
/// limited-memory curvature model of past gradients (falling back to the raw
/// gradient when that is not an ascent direction); every step is accepted
/// only if the clipped pulse strictly improves the robust fidelity.
pub fn optimize(sys: &SpinSystem, cfg: &GrapeConfig) -> Result<GrapeResult> {
    optimize_with_progress(sys, cfg, |_, _| {})
}

pub fn optimize_with_progress(
    sys: &SpinSystem,
    cfg: &GrapeConfig,
    mut progress: impl FnMut(usize, f64),
) -> Result<GrapeResult> {
    cfg.validate(sys.dim())?;
    let objective = Objective::new(sys, &cfg.target, &cfg.ensemble.without_dephasing())?;
    let mut pulse = initial_pulse(cfg);
    pulse.clip(cfg.amp_max);
    let mut x = pack(&pulse);
    let (mut f, mut g) = objective.value_and_gradient(&pulse);
    let mut trace = vec![f];
    let mut history = History::new(12);
    let mut step = cfg.step_init;
    let mut iterations = 0;
    let mut stalled = 0;

    while f < cfg.fidelity_goal && iterations < cfg.max_iters && !pulse.is_empty() {
        iterations += 1;
        let mut dir = history.direction(&g);
        let mut slope = dot(&dir, &g);
        let quasi = !history.pairs.is_empty();
        if !(slope > 0.0) {
            history.clear();
            dir = g.clone();
            slope = dot(&g, &g);
        }
        if slope <= 0.0 {
            break;
        }
        // unit step is natural for the curvature-scaled direction
        let mut t = if quasi { 1.0 } else { step };
        let mut accepted = None;
        for _ in 0..40 {
            let trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + t * di).collect();
            let candidate = unpack(&trial, cfg.dt, cfg.amp_max);
            let fc = objective.value(&candidate);
            if fc > f {
                accepted = Some((candidate, fc));
                break;
            }
            t *= 0.5;
        }
        let Some((candidate, _)) = accepted else {
            if history.pairs.is_empty() {
                stalled += 1;
                if stalled > 2 {
                    break;
                }
            }
            history.clear();
            step *= 0.1;
            continue;
        };
        stalled = 0;
        if !quasi {
            step = t * 2.0;
        }
        let x_new = pack(&candidate);
        let (f_new, g_new) = objective.value_and_gradient(&candidate);
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        history.push(s, y);
        x = x_new;
        pulse = candidate;
        f = f_new;
        g = g_new;
        trace.push(f);
        progress(iterations, f);
    }

    let fidelity_ideal = ideal_fidelity(sys, &pulse, &cfg.target)?;
    Ok(GrapeResult {
        converged: f >= cfg.fidelity_goal,
        pulse,
        fidelity_ideal,
        fidelity_robust: f,
        iterations,
        fidelity_trace: trace,
    })
}
