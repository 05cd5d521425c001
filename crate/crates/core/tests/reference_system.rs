// SPDX-License-Identifier: Apache-2.0

//! Re-derives the malonic acid reference parameters from the microwave
//! frequency, the g-factor and the quoted precession frequencies, and
//! compares them with the built-in values.

use hyperspin::spin_system::SpinSystem;

const PLANCK: f64 = 6.626_070_15e-34;
const BOHR_MAGNETON: f64 = 9.274_010_078_3e-24;
/// MHz/T
const GAMMA_H: f64 = 42.577_478_5;
const GAMMA_C: f64 = 10.708_4;

/// Secular and pseudosecular coefficients reproducing the two manifold
/// frequencies `√((ω ± A/2)² + (B/2)²)`.
fn solve_hyperfine(larmor: f64, up: f64, down: f64) -> (f64, f64) {
    let a = (up * up - down * down) / (2.0 * larmor);
    let half_b = (up * up - (larmor + 0.5 * a).powi(2)).sqrt();
    (a, 2.0 * half_b)
}

#[test]
fn larmor_frequencies_follow_from_the_field() {
    let field = PLANCK * 9.1875e9 / (1.9843 * BOHR_MAGNETON);
    let sys = SpinSystem::malonic_ref();
    assert!(
        (GAMMA_H * field - sys.nuclei[0].larmor).abs() < 0.01,
        "{}",
        GAMMA_H * field
    );
    assert!(
        (GAMMA_C * field - sys.nuclei[1].larmor).abs() < 0.01,
        "{}",
        GAMMA_C * field
    );
}

#[test]
fn hyperfine_coefficients_follow_from_quoted_frequencies() {
    let sys = SpinSystem::malonic_ref();
    let (h_up, h_down) = (11.99, 36.35);
    let (a_h, b_h) = solve_hyperfine(sys.nuclei[0].larmor, h_up, h_down);
    assert!((a_h - sys.nuclei[0].a_coeff).abs() < 0.2, "A_H {a_h}");
    assert!((b_h.abs() - sys.nuclei[0].b_coeff.abs()).abs() < 0.2, "B_H {b_h}");

    // carbon frequencies from the two double-coherence gaps
    let (a_c, b_c) = solve_hyperfine(sys.nuclei[1].larmor, h_up + 52.0, h_down + 22.0);
    assert!((a_c - sys.nuclei[1].a_coeff).abs() < 0.5, "A_C {a_c}");
    assert!((b_c.abs() - sys.nuclei[1].b_coeff.abs()).abs() < 0.5, "B_C {b_c}");
}

#[test]
fn fieldswept_cross_checks_hold() {
    let sys = SpinSystem::malonic_ref();
    let f = |k: usize, m: f64| {
        let n = &sys.nuclei[k];
        ((n.larmor + m * n.a_coeff).powi(2) + (m * n.b_coeff).powi(2)).sqrt()
    };
    assert!((f(0, 0.5) + f(0, -0.5) - 48.0).abs() < 1.0);
    assert!((f(1, 0.5) + f(1, -0.5) - 122.0).abs() < 1.0);
}
