// SPDX-License-Identifier: Apache-2.0

//! Browser bindings for the malonic acid reference system. The plain
//! functions in [`ops`] carry the logic and are tested on the host; the
//! `#[wasm_bindgen]` wrappers only translate errors.

use wasm_bindgen::prelude::*;

pub mod ops {
    use hyperspin::dynamics::{NoiseModel, ShapedPulse};
    use hyperspin::experiments::{double_coherence_readout, double_coherence_scan, fft_peaks, fieldswept, GateModel};
    use hyperspin::hardware::{apply_filter, ResonatorModel};
    use hyperspin::spin_system::{Manifold, SpinSystem};

    fn grid(start: f64, stop: f64, step: f64) -> Result<Vec<f64>, String> {
        if !(step > 0.0 && stop > start && (stop - start) / step < 2.0e5) {
            return Err(format!("bad grid {start}..{stop} step {step}"));
        }
        let n = ((stop - start) / step + 1e-9).floor() as usize;
        Ok((0..=n).map(|k| start + k as f64 * step).collect())
    }

    /// Field-swept echo intensities on `offset_min..=offset_max`.
    pub fn field_swept(linewidth: f64, offset_min: f64, offset_max: f64, step: f64) -> Result<Vec<f64>, String> {
        let offsets = grid(offset_min, offset_max, step)?;
        let series = fieldswept(&SpinSystem::malonic_ref(), &offsets, linewidth).map_err(|e| e.to_string())?;
        Ok(series.values)
    }

    #[derive(Debug, Clone)]
    pub struct CoherenceScan {
        pub signal: Vec<f64>,
        pub peak_frequency: f64,
        pub peak_amplitude: f64,
    }

    /// Ideal-gate double-coherence scan with the reference dephasing and
    /// inhomogeneous broadening.
    pub fn double_coherence(
        up: bool,
        tau_max: f64,
        tau_step: f64,
        ensemble_points: usize,
    ) -> Result<CoherenceScan, String> {
        let sys = SpinSystem::malonic_ref();
        let manifold = if up { Manifold::Up } else { Manifold::Down };
        let taus = grid(0.0, tau_max, tau_step)?;
        let run = || -> hyperspin::Result<CoherenceScan> {
            let noise = NoiseModel::gaussian(sys.t2e, sys.t2e_star_linewidth, ensemble_points)?;
            let readout = double_coherence_readout(&sys, manifold)?;
            let series = double_coherence_scan(&sys, &GateModel::Ideal, &readout, manifold, &taus, &noise)?;
            let peak = fft_peaks(&series, 0.05)?.into_iter().next();
            Ok(CoherenceScan {
                peak_frequency: peak.as_ref().map_or(0.0, |p| p.frequency),
                peak_amplitude: peak.as_ref().map_or(0.0, |p| p.amplitude),
                signal: series.values,
            })
        };
        run().map_err(|e| e.to_string())
    }

    /// Resonator output for a rectangular x pulse followed by an equally
    /// long silence, one value per nanosecond.
    pub fn resonator_response(q_factor: f64, duration: f64, amplitude: f64) -> Result<Vec<f64>, String> {
        let res = ResonatorModel::new(9.1875, q_factor, 28.0).map_err(|e| e.to_string())?;
        let dt = 0.001;
        let n = (duration / dt).round() as usize;
        if n == 0 || n > 100_000 {
            return Err(format!("duration {duration} us out of range"));
        }
        let mut amp = vec![amplitude; n];
        amp.extend(std::iter::repeat_n(0.0, n));
        let pulse = ShapedPulse::new(dt, amp, vec![0.0; 2 * n]).map_err(|e| e.to_string())?;
        let out = apply_filter(&pulse, &res).map_err(|e| e.to_string())?;
        Ok(out.amp_x)
    }

    pub fn resonator_bandwidth(q_factor: f64) -> Result<f64, String> {
        Ok(ResonatorModel::new(9.1875, q_factor, 28.0)
            .map_err(|e| e.to_string())?
            .bandwidth())
    }
}

#[wasm_bindgen]
pub struct CoherenceScan(ops::CoherenceScan);

#[wasm_bindgen]
impl CoherenceScan {
    pub fn signal(&self) -> Vec<f64> {
        self.0.signal.clone()
    }

    #[wasm_bindgen(getter)]
    pub fn peak_frequency(&self) -> f64 {
        self.0.peak_frequency
    }

    #[wasm_bindgen(getter)]
    pub fn peak_amplitude(&self) -> f64 {
        self.0.peak_amplitude
    }
}

#[wasm_bindgen]
pub fn field_swept(linewidth: f64, offset_min: f64, offset_max: f64, step: f64) -> Result<Vec<f64>, JsError> {
    ops::field_swept(linewidth, offset_min, offset_max, step).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn double_coherence(
    up: bool,
    tau_max: f64,
    tau_step: f64,
    ensemble_points: usize,
) -> Result<CoherenceScan, JsError> {
    ops::double_coherence(up, tau_max, tau_step, ensemble_points)
        .map(CoherenceScan)
        .map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn resonator_response(q_factor: f64, duration: f64, amplitude: f64) -> Result<Vec<f64>, JsError> {
    ops::resonator_response(q_factor, duration, amplitude).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn resonator_bandwidth(q_factor: f64) -> Result<f64, JsError> {
    ops::resonator_bandwidth(q_factor).map_err(|e| JsError::new(&e))
}
