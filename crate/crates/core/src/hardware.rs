// SPDX-License-Identifier: Apache-2.0

//! Finite-bandwidth resonator model and iterative pulse pre-distortion.

use std::f64::consts::PI;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dynamics::ShapedPulse;
use crate::error::{Error, Result};
use crate::experiments::SignalSeries;
use crate::linalg::C64;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResonatorModel {
    /// Carrier, GHz.
    pub center_freq: f64,
    pub q_factor: f64,
    /// Rabi-frequency ceiling of the drive chain, MHz.
    pub max_drive: f64,
}

impl Default for ResonatorModel {
    fn default() -> Self {
        Self {
            center_freq: 9.1875,
            q_factor: 65.0,
            max_drive: 28.0,
        }
    }
}

impl ResonatorModel {
    pub fn new(center_freq: f64, q_factor: f64, max_drive: f64) -> Result<Self> {
        let res = Self {
            center_freq,
            q_factor,
            max_drive,
        };
        res.validate()?;
        Ok(res)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.center_freq > 0.0 && self.center_freq.is_finite()) {
            return Err(Error::InvalidArgument(format!("invalid carrier {}", self.center_freq)));
        }
        if !(self.q_factor > 0.0 && self.q_factor.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "Q must be positive, got {}",
                self.q_factor
            )));
        }
        if !(self.max_drive > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "max drive must be positive, got {}",
                self.max_drive
            )));
        }
        Ok(())
    }

    /// Full 3-dB bandwidth `f₀/Q`, MHz.
    pub fn bandwidth(&self) -> f64 {
        self.center_freq * 1e3 / self.q_factor
    }

    /// Baseband cutoff: half the bandwidth, MHz.
    pub fn cutoff(&self) -> f64 {
        0.5 * self.bandwidth()
    }

    /// Decay time of the baseband pole, µs.
    pub fn time_constant(&self) -> f64 {
        1.0 / (2.0 * PI * self.cutoff())
    }
}

/// Single-pole low-pass of the complex envelope without the drive clamp.
/// The input is held constant over each segment and the output is the
/// exact pole response sampled at segment ends, starting from rest.
pub fn filter_envelope(envelope: &[C64], dt: f64, res: &ResonatorModel) -> Vec<C64> {
    let a = (-dt / res.time_constant()).exp();
    let mut y = C64::new(0.0, 0.0);
    envelope
        .iter()
        .map(|x| {
            y = y * a + x * (1.0 - a);
            y
        })
        .collect()
}

fn clamp(env: &mut [C64], limit: f64) {
    for z in env.iter_mut() {
        let r = z.norm();
        if r > limit {
            *z *= limit / r;
        }
    }
}

/// What the spins see: the filtered envelope, clamped to `max_drive`.
pub fn apply_filter(pulse: &ShapedPulse, res: &ResonatorModel) -> Result<ShapedPulse> {
    if pulse.is_empty() {
        return Err(Error::InvalidArgument("cannot filter an empty pulse".into()));
    }
    res.validate()?;
    let mut out = filter_envelope(&pulse.envelope(), pulse.dt, res);
    clamp(&mut out, res.max_drive);
    Ok(ShapedPulse::from_envelope(pulse.dt, &out))
}

/// RMS of the per-segment envelope difference, MHz.
pub fn rms_error(a: &ShapedPulse, b: &ShapedPulse) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = a
        .envelope()
        .iter()
        .zip(b.envelope())
        .map(|(x, y)| (x - y).norm_sqr())
        .sum();
    Ok((sum / a.len() as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predistortion {
    pub corrected: ShapedPulse,
    /// RMS error between the filtered corrected pulse and the target, MHz.
    pub residual: f64,
    pub iterations: usize,
    /// Residual of every filter evaluation, in order.
    pub residual_trace: Vec<f64>,
}

/// Proportional feedback `x ← x + gain·(target − F(x))` with `F` the
/// resonator model. The corrected drive is held within `max_drive`, since
/// the amplifier cannot exceed it either; targets that need more than that
/// to survive the filter keep a finite residual.
///
/// Ten consecutive increases end the loop. If the residual has then grown
/// past that of the uncorrected pulse the result is [`Error::Diverged`];
/// otherwise the run has plateaued and the best iterate is returned.
pub fn predistort(
    target: &ShapedPulse,
    res: &ResonatorModel,
    gain: f64,
    max_iters: usize,
    tol: f64,
) -> Result<Predistortion> {
    if !(gain > 0.0 && gain <= 1.0) {
        return Err(Error::InvalidArgument(format!("gain must lie in (0, 1], got {gain}")));
    }
    if max_iters == 0 {
        return Err(Error::InvalidArgument("max_iters must be at least 1".into()));
    }
    let goal = target.envelope();
    let mut x = goal.clone();
    clamp(&mut x, res.max_drive);
    let mut trace = Vec::new();
    let mut rising = 0;
    let mut best = (f64::INFINITY, x.clone());
    for iteration in 1..=max_iters {
        let pulse = ShapedPulse::from_envelope(target.dt, &x);
        let filtered = apply_filter(&pulse, res)?;
        let residual = rms_error(&filtered, target)?;
        if let Some(prev) = trace.last() {
            // rounding jitter on a plateau is not growth
            rising = if residual > *prev * (1.0 + 1e-9) { rising + 1 } else { 0 };
        }
        trace.push(residual);
        if residual < best.0 {
            best = (residual, x.clone());
        }
        if rising >= 10 {
            // creeping up from a clamped fixed point is a plateau; only growth
            // past the uncorrected error is divergence
            if residual > trace[0] {
                return Err(Error::Diverged(iteration));
            }
            break;
        }
        if residual <= tol || iteration == max_iters {
            break;
        }
        for ((xi, yi), gi) in x.iter_mut().zip(filtered.envelope()).zip(&goal) {
            *xi += (gi - yi) * gain;
        }
        clamp(&mut x, res.max_drive);
    }
    Ok(Predistortion {
        corrected: ShapedPulse::from_envelope(target.dt, &best.1),
        residual: best.0,
        iterations: trace.len(),
        residual_trace: trace,
    })
}

/// Two-sided energy spectral density `|dt·FFT(env)|²` on an ascending
/// frequency axis (MHz), so that `Σ S·df = Σ |env|²·dt`.
pub fn power_spectrum(pulse: &ShapedPulse) -> Result<SignalSeries> {
    let n = pulse.len();
    if n < 8 {
        return Err(Error::TooFewSamples { need: 8, got: n });
    }
    let mut buf: Vec<Complex<f64>> = pulse.envelope();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let df = 1.0 / (n as f64 * pulse.dt);
    let neg = n / 2;
    // bins −⌊n/2⌋ … ⌈n/2⌉−1
    let values = (0..n).map(|k| (buf[(k + n - neg) % n] * pulse.dt).norm_sqr()).collect();
    SignalSeries::new(-(neg as f64) * df, df, values, "power-spectrum")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::DEFAULT_DT;

    fn pulse_from(f: impl Fn(f64) -> (f64, f64), n: usize) -> ShapedPulse {
        let (ax, ay): (Vec<f64>, Vec<f64>) = (0..n).map(|k| f(k as f64 * DEFAULT_DT)).unzip();
        ShapedPulse::new(DEFAULT_DT, ax, ay).unwrap()
    }

    #[test]
    fn default_bandwidth() {
        let res = ResonatorModel::default();
        assert!((res.bandwidth() - 141.346).abs() < 1e-3);
        assert!(ResonatorModel::new(9.0, 0.0, 28.0).is_err());
    }

    #[test]
    fn dc_gain_is_unity() {
        let res = ResonatorModel::default();
        let out = apply_filter(&ShapedPulse::constant(400, DEFAULT_DT, 10.0, -5.0), &res).unwrap();
        assert!((out.amp_x[399] - 10.0).abs() < 1e-9 && (out.amp_y[399] + 5.0).abs() < 1e-9);
    }

    #[test]
    fn impulse_tail_decays_with_pole_time_constant() {
        let res = ResonatorModel::default();
        let mut env = vec![C64::new(0.0, 0.0); 30];
        env[0] = C64::new(1.0, 0.0);
        let out = filter_envelope(&env, DEFAULT_DT, &res);
        let tau = res.time_constant();
        for k in 1..30 {
            let ratio = out[k].re / out[k - 1].re;
            assert!((ratio - (-DEFAULT_DT / tau).exp()).abs() < 1e-12);
        }
        assert!((out[0].re - (1.0 - (-DEFAULT_DT / tau).exp())).abs() < 1e-12);
    }

    #[test]
    fn tone_at_cutoff_is_half_power() {
        let res = ResonatorModel::new(9.1875, 65.0, f64::INFINITY).unwrap();
        let fc = res.cutoff();
        let p = pulse_from(|t| ((2.0 * PI * fc * t).cos(), (2.0 * PI * fc * t).sin()), 600);
        let out = apply_filter(&p, &res).unwrap();
        let amp = out.amplitude(599);
        assert!(
            (amp - std::f64::consts::FRAC_1_SQRT_2).abs() < 0.02 * std::f64::consts::FRAC_1_SQRT_2,
            "{amp}"
        );
    }

    #[test]
    fn clamp_only_acts_above_ceiling() {
        let res = ResonatorModel::default();
        let hot = apply_filter(&ShapedPulse::constant(300, DEFAULT_DT, 40.0, 0.0), &res).unwrap();
        assert!((hot.max_amplitude() - 28.0).abs() < 1e-12);
        let cool = ShapedPulse::constant(300, DEFAULT_DT, 10.0, 0.0);
        let a = apply_filter(&cool, &res).unwrap();
        let b = filter_envelope(&cool.envelope(), DEFAULT_DT, &res);
        for (x, y) in a.envelope().iter().zip(&b) {
            assert!((x - y).norm() < 1e-15);
        }
    }

    #[test]
    fn identity_resonator_needs_one_iteration() {
        let res = ResonatorModel::new(9.1875, 1e-9, f64::INFINITY).unwrap();
        let target = pulse_from(|t| (20.0 * (40.0 * t).sin(), 5.0), 200);
        let out = predistort(&target, &res, 0.5, 50, 1e-9).unwrap();
        assert_eq!(out.iterations, 1);
        assert_eq!(out.corrected, target);
    }

    #[test]
    fn band_limited_target_is_recovered() {
        let res = ResonatorModel::default();
        let target = pulse_from(|t| (10.0 * (PI * t / 0.3).sin().powi(2), 4.0 * t / 0.3), 300);
        let out = predistort(&target, &res, 0.5, 50, 1e-6).unwrap();
        assert!(out.residual < 1e-6, "{}", out.residual);
        assert!(out.residual_trace.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn out_of_band_target_plateaus_without_error() {
        let res = ResonatorModel::default();
        let target = pulse_from(|t| (28.0 * (PI * t / 0.002).sin().signum(), 0.0), 400);
        let out = predistort(&target, &res, 1.0, 500, 1e-9).unwrap();
        assert!(out.residual > 1.0, "{}", out.residual);
        assert!(out.residual <= out.residual_trace[0]);
    }

    #[test]
    fn invalid_gain_rejected() {
        let target = ShapedPulse::constant(10, DEFAULT_DT, 1.0, 0.0);
        assert!(predistort(&target, &ResonatorModel::default(), 0.0, 10, 1e-6).is_err());
        assert!(predistort(&target, &ResonatorModel::default(), 1.5, 10, 1e-6).is_err());
    }

    #[test]
    fn spectrum_examples() {
        let flat = power_spectrum(&ShapedPulse::constant(64, DEFAULT_DT, 3.0, 0.0)).unwrap();
        let dc = ((0.0 - flat.start) / flat.dt).round() as usize;
        let total: f64 = flat.values.iter().sum();
        assert!((flat.values[dc] - total).abs() < 1e-9 * total);

        let tone = pulse_from(|t| ((2.0 * PI * 50.0 * t).cos(), 0.0), 400);
        let s = power_spectrum(&tone).unwrap();
        let mut idx: Vec<usize> = (0..s.len()).collect();
        idx.sort_by(|a, b| s.values[*b].total_cmp(&s.values[*a]));
        let mut top: Vec<f64> = idx[..2].iter().map(|k| s.axis(*k)).collect();
        top.sort_by(f64::total_cmp);
        assert!((top[0] + 50.0).abs() < 1e-9 && (top[1] - 50.0).abs() < 1e-9, "{top:?}");

        assert!(matches!(
            power_spectrum(&ShapedPulse::constant(7, DEFAULT_DT, 1.0, 0.0)),
            Err(Error::TooFewSamples { .. })
        ));
    }
}
