// SPDX-License-Identifier: Apache-2.0

use std::f64::consts::PI;

use approx::assert_relative_eq;
use nalgebra::DMatrix;
use proptest::prelude::*;

use hyperspin::dynamics::{propagate, ShapedPulse};
use hyperspin::grape::ideal_fidelity;
use hyperspin::hardware::{apply_filter, filter_envelope, power_spectrum, predistort, ResonatorModel};
use hyperspin::io::{read_pulse, write_pulse};
use hyperspin::linalg::{c, eig_hermitian, expm_unitary, fidelity_unitary, unitarity_deviation, CMatrix, C64};
use hyperspin::spin_system::SpinSystem;

fn hermitian(dim: usize, entries: &[f64]) -> CMatrix {
    let m = DMatrix::from_fn(dim, dim, |i, j| {
        c(entries[2 * (i * dim + j)], entries[2 * (i * dim + j) + 1])
    });
    (&m + m.adjoint()) * c(0.5, 0.0)
}

/// Gaussian envelope with a gentle chirp, well inside the resonator band.
fn smooth_pulse(peak: f64, width: f64, chirp: f64) -> ShapedPulse {
    let env: Vec<C64> = (0..400)
        .map(|k| {
            let t = k as f64 * 0.001 - 0.2;
            C64::from_polar(peak * (-(t / width).powi(2)).exp(), 2.0 * PI * chirp * t * t)
        })
        .collect();
    ShapedPulse::from_envelope(0.001, &env)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn propagators_are_unitary(entries in prop::collection::vec(-30.0f64..30.0, 128), t in 0.0f64..1.0) {
        let h = hermitian(8, &entries);
        let u = expm_unitary(&h, t).unwrap();
        prop_assert!(unitarity_deviation(&u) < 1e-10);
    }

    #[test]
    fn eigenvalues_sum_to_trace(entries in prop::collection::vec(-50.0f64..50.0, 32)) {
        let h = hermitian(4, &entries);
        let (values, _) = eig_hermitian(&h).unwrap();
        prop_assert!((values.iter().sum::<f64>() - h.trace().re).abs() < 1e-9);
    }

    #[test]
    fn fidelity_ignores_global_phase(entries in prop::collection::vec(-5.0f64..5.0, 32), phase in 0.0f64..(2.0 * PI)) {
        let u = expm_unitary(&hermitian(4, &entries), 0.1).unwrap();
        let v = &u * C64::from_polar(1.0, phase);
        prop_assert!((fidelity_unitary(&u, &v).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pulse_files_round_trip_exactly(
        dt in 1e-4f64..0.01,
        amps in prop::collection::vec((-28.0f64..28.0, -28.0f64..28.0), 1..50),
    ) {
        let (x, y): (Vec<f64>, Vec<f64>) = amps.into_iter().unzip();
        let pulse = ShapedPulse::new(dt, x, y).unwrap();
        let mut buf = Vec::new();
        write_pulse(&mut buf, &pulse).unwrap();
        let back = read_pulse(buf.as_slice()).unwrap();
        prop_assert_eq!(back.dt.to_bits(), pulse.dt.to_bits());
        prop_assert_eq!(back.amp_x, pulse.amp_x);
        prop_assert_eq!(back.amp_y, pulse.amp_y);
    }

    #[test]
    fn resonator_filter_is_linear(
        a in prop::collection::vec(-20.0f64..20.0, 30),
        b in prop::collection::vec(-20.0f64..20.0, 30),
        alpha in -2.0f64..2.0,
    ) {
        let res = ResonatorModel::default();
        let xa: Vec<C64> = a.iter().map(|&v| c(v, 0.5 * v)).collect();
        let xb: Vec<C64> = b.iter().map(|&v| c(-0.3 * v, v)).collect();
        let mixed: Vec<C64> = xa.iter().zip(&xb).map(|(p, q)| p * alpha + q).collect();
        let ya = filter_envelope(&xa, 0.001, &res);
        let yb = filter_envelope(&xb, 0.001, &res);
        for (k, y) in filter_envelope(&mixed, 0.001, &res).iter().enumerate() {
            let expect = ya[k] * alpha + yb[k];
            assert_relative_eq!(y.re, expect.re, epsilon = 1e-9);
            assert_relative_eq!(y.im, expect.im, epsilon = 1e-9);
        }
    }

    #[test]
    fn power_spectrum_conserves_energy(amps in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 8..200)) {
        let (x, y): (Vec<f64>, Vec<f64>) = amps.into_iter().unzip();
        let pulse = ShapedPulse::new(0.001, x, y).unwrap();
        let spec = power_spectrum(&pulse).unwrap();
        let time: f64 = (0..pulse.len()).map(|k| pulse.amplitude(k).powi(2) * pulse.dt).sum();
        assert_relative_eq!(spec.integral(), time, max_relative = 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn predistortion_residual_never_grows(peak in 3.0f64..20.0, width in 0.03f64..0.12, chirp in -40.0f64..40.0, gain in 0.2f64..1.0) {
        let target = smooth_pulse(peak, width, chirp);
        let fixed = predistort(&target, &ResonatorModel::default(), gain, 60, 0.0).unwrap();
        for w in fixed.residual_trace.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-9) + 1e-12, "{:?}", fixed.residual_trace);
        }
    }

    /// Filtering costs gate fidelity; pre-distortion wins back at least 90%
    /// of the loss for band-limited pulses.
    #[test]
    fn predistortion_recovers_gate_fidelity(peak in 8.0f64..25.0, width in 0.03f64..0.1, chirp in -30.0f64..30.0) {
        let sys = SpinSystem::malonic_ref();
        let res = ResonatorModel::default();
        let pulse = smooth_pulse(peak, width, chirp);
        let target = propagate(&sys, &pulse, 0.0);
        let ideal = ideal_fidelity(&sys, &pulse, &target).unwrap();
        let filtered = ideal_fidelity(&sys, &apply_filter(&pulse, &res).unwrap(), &target).unwrap();
        prop_assert!(filtered < ideal);
        let fixed = predistort(&pulse, &res, 0.5, 200, 1e-9).unwrap();
        let recovered = ideal_fidelity(&sys, &apply_filter(&fixed.corrected, &res).unwrap(), &target).unwrap();
        prop_assert!((recovered - filtered) >= 0.9 * (ideal - filtered), "{ideal} {filtered} {recovered}");
    }
}
