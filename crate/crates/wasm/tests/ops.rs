// SPDX-License-Identifier: Apache-2.0

use hyperspin_wasm::ops;

#[test]
fn field_sweep_is_symmetric_with_four_maxima() {
    let v = ops::field_swept(14.0, -150.0, 150.0, 0.5).unwrap();
    assert_eq!(v.len(), 601);
    for k in 0..v.len() {
        assert!((v[k] - v[v.len() - 1 - k]).abs() < 1e-9 * v[k].max(1.0));
    }
    let maxima = (1..v.len() - 1)
        .filter(|&k| v[k] > v[k - 1] && v[k] >= v[k + 1])
        .count();
    assert_eq!(maxima, 4);
}

#[test]
fn coherence_scan_oscillates_at_pair_gap() {
    let down = ops::double_coherence(false, 0.5, 0.002, 3).unwrap();
    assert_eq!(down.signal.len(), 251);
    assert!((down.peak_frequency - 22.0).abs() < 1.0);
    let up = ops::double_coherence(true, 0.5, 0.002, 3).unwrap();
    assert!((up.peak_frequency - 52.0).abs() < 1.0);
}

#[test]
fn resonator_rings_up_and_down() {
    let r = ops::resonator_response(65.0, 0.05, 10.0).unwrap();
    assert_eq!(r.len(), 100);
    assert!(r[0] < 10.0 && r[49] > 9.9 && r[99] < 0.1);
    assert!((ops::resonator_bandwidth(65.0).unwrap() - 141.35).abs() < 0.01);
}

#[test]
fn bad_inputs_are_reported() {
    assert!(ops::field_swept(14.0, 10.0, -10.0, 0.5).is_err());
    assert!(ops::resonator_response(-1.0, 0.05, 1.0).is_err());
    assert!(ops::double_coherence(false, 0.5, 0.0, 3).is_err());
}
