// SPDX-License-Identifier: Apache-2.0

//! Dense complex linear algebra on small spin-1/2 Hilbert spaces.
//!
//! Hamiltonians are expressed in MHz (linear frequency) and times in µs, so
//! a propagator is `exp(-i·2π·H·t)`. Sites are ordered left to right in the
//! tensor product with site 0 the electron.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMatrix = DMatrix<C64>;

pub const MAX_SITES: usize = 4;
pub const HERMITIAN_TOL: f64 = 1e-10;

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn identity(dim: usize) -> CMatrix {
    CMatrix::identity(dim, dim)
}

pub fn zeros(dim: usize) -> CMatrix {
    CMatrix::zeros(dim, dim)
}

/// Largest absolute entry.
pub fn max_abs(m: &CMatrix) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

/// `‖M − M†‖_max`
pub fn hermitian_deviation(m: &CMatrix) -> f64 {
    if m.nrows() != m.ncols() {
        return f64::INFINITY;
    }
    max_abs(&(m - m.adjoint()))
}

pub fn ensure_hermitian(m: &CMatrix) -> Result<()> {
    let dev = hermitian_deviation(m);
    if dev < HERMITIAN_TOL {
        Ok(())
    } else {
        Err(Error::NotHermitian(dev))
    }
}

pub fn commutator(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a * b - b * a
}

/// Kronecker product with `a` as the leftmost (most significant) factor.
pub fn kron(a: &CMatrix, b: &CMatrix) -> CMatrix {
    a.kronecker(b)
}

/// Single spin-1/2 Pauli-type operators with eigenvalues ±1/2.
pub fn pauli_half() -> [CMatrix; 3] {
    let h = 0.5;
    let sx = CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(h, 0.), c(h, 0.), c(0., 0.)]);
    let sy = CMatrix::from_row_slice(2, 2, &[c(0., 0.), c(0., -h), c(0., h), c(0., 0.)]);
    let sz = CMatrix::from_row_slice(2, 2, &[c(h, 0.), c(0., 0.), c(0., 0.), c(-h, 0.)]);
    [sx, sy, sz]
}

/// Spin operators of one site, identity-padded into the full product space.
#[derive(Debug, Clone, PartialEq)]
pub struct SpinOperatorSet {
    pub site_index: usize,
    pub sx: CMatrix,
    pub sy: CMatrix,
    pub sz: CMatrix,
}

fn embed(op: &CMatrix, n_sites: usize, site: usize) -> CMatrix {
    let i2 = identity(2);
    let mut out = identity(1);
    for s in 0..n_sites {
        out = kron(&out, if s == site { op } else { &i2 });
    }
    out
}

pub fn spin_ops(n_sites: usize, site: usize) -> Result<SpinOperatorSet> {
    if n_sites == 0 || n_sites > MAX_SITES {
        return Err(Error::InvalidArgument(format!(
            "n_sites must be in 1..={MAX_SITES}, got {n_sites}"
        )));
    }
    if site >= n_sites {
        return Err(Error::SiteOutOfRange { site, n_sites });
    }
    let [sx, sy, sz] = pauli_half();
    Ok(SpinOperatorSet {
        site_index: site,
        sx: embed(&sx, n_sites, site),
        sy: embed(&sy, n_sites, site),
        sz: embed(&sz, n_sites, site),
    })
}

/// Hermitian eigendecomposition with eigenvalues in ascending order.
///
/// Column `k` of the returned matrix is the normalized eigenvector for
/// `values[k]`.
pub fn eig_hermitian(m: &CMatrix) -> Result<(Vec<f64>, CMatrix)> {
    ensure_hermitian(m)?;
    Ok(eig_hermitian_unchecked(m))
}

pub(crate) fn eig_hermitian_unchecked(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    // symmetrize so round-off in the input cannot leak into the solver
    let sym = (m + m.adjoint()) * c(0.5, 0.0);
    let eig = sym.symmetric_eigen();
    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = zeros(n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// `U = exp(−i·2π·h·t)` with `h` in MHz and `t` in µs.
pub fn expm_unitary(h: &CMatrix, duration: f64) -> Result<CMatrix> {
    ensure_hermitian(h)?;
    let (values, vectors) = eig_hermitian_unchecked(h);
    Ok(propagator_from_eig(&values, &vectors, duration))
}

pub(crate) fn propagator_from_eig(values: &[f64], vectors: &CMatrix, duration: f64) -> CMatrix {
    let mut scaled = vectors.clone();
    for (k, &lam) in values.iter().enumerate() {
        let phase = C64::from_polar(1.0, -2.0 * PI * lam * duration);
        for z in scaled.column_mut(k).iter_mut() {
            *z *= phase;
        }
    }
    scaled * vectors.adjoint()
}

/// `Tr(a† b)` without forming the product.
pub fn trace_inner(a: &CMatrix, b: &CMatrix) -> C64 {
    a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum()
}

/// Global-phase-invariant gate fidelity `|Tr(u† v)|² / d²`.
pub fn fidelity_unitary(u: &CMatrix, v: &CMatrix) -> Result<f64> {
    if u.shape() != v.shape() {
        return Err(Error::DimensionMismatch(u.nrows(), v.nrows()));
    }
    let d = u.nrows() as f64;
    Ok((trace_inner(u, v).norm_sqr() / (d * d)).clamp(0.0, 1.0))
}

/// `‖U†U − I‖_max`
pub fn unitarity_deviation(u: &CMatrix) -> f64 {
    max_abs(&(u.adjoint() * u - identity(u.nrows())))
}

pub fn frobenius(m: &CMatrix) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize) -> CMatrix {
        CMatrix::from_fn(n, n, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
    }

    fn random_hermitian(rng: &mut ChaCha8Rng, n: usize) -> CMatrix {
        let m = random_matrix(rng, n);
        (&m + m.adjoint()) * c(0.5, 0.0)
    }

    #[test]
    fn kron_identity_and_eigenstate() {
        assert_eq!(kron(&identity(2), &identity(2)), identity(4));
        let [_, _, sz] = pauli_half();
        let op = kron(&sz, &identity(2));
        // |down> ⊗ |up> is basis index 2
        let mut v = nalgebra::DVector::<C64>::zeros(4);
        v[2] = c(1.0, 0.0);
        let w = &op * &v;
        assert!((w[2] - c(-0.5, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn kron_mixed_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let (a, b, cc, d) = (
                random_matrix(&mut rng, 2),
                random_matrix(&mut rng, 2),
                random_matrix(&mut rng, 2),
                random_matrix(&mut rng, 2),
            );
            // oracle: explicit index formula for the product of two krons
            let lhs = kron(&a, &b) * kron(&cc, &d);
            let ac = &a * &cc;
            let bd = &b * &d;
            let rhs = CMatrix::from_fn(4, 4, |i, j| ac[(i / 2, j / 2)] * bd[(i % 2, j % 2)]);
            assert!(max_abs(&(lhs - rhs)) < 1e-12);
        }
    }

    #[test]
    fn spin_ops_examples() {
        let s = spin_ops(1, 0).unwrap();
        assert_eq!(s.sz, pauli_half()[2]);
        let s = spin_ops(3, 0).unwrap();
        let (vals, _) = eig_hermitian(&s.sz).unwrap();
        assert_eq!(vals.iter().filter(|v| (**v + 0.5).abs() < 1e-12).count(), 4);
        assert_eq!(vals.iter().filter(|v| (**v - 0.5).abs() < 1e-12).count(), 4);
        let s = spin_ops(3, 2).unwrap();
        let dev = max_abs(&(commutator(&s.sx, &s.sy) - &s.sz * c(0.0, 1.0)));
        assert!(dev < 1e-12);
        assert!(matches!(spin_ops(3, 3), Err(Error::SiteOutOfRange { .. })));
        assert!(spin_ops(5, 0).is_err());
    }

    #[test]
    fn spin_ops_cyclic_commutators_traceless() {
        for n in 1..=4 {
            for site in 0..n {
                let s = spin_ops(n, site).unwrap();
                let i = c(0.0, 1.0);
                assert!(max_abs(&(commutator(&s.sy, &s.sz) - &s.sx * i)) < 1e-12);
                assert!(max_abs(&(commutator(&s.sz, &s.sx) - &s.sy * i)) < 1e-12);
                for op in [&s.sx, &s.sy, &s.sz] {
                    assert!(op.trace().norm() < 1e-12);
                    assert!(hermitian_deviation(op) < 1e-15);
                }
            }
        }
    }

    #[test]
    fn eig_examples() {
        let m = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(3., 0.), c(1., 0.), c(2., 0.)]));
        let (v, _) = eig_hermitian(&m).unwrap();
        assert!((v[0] - 1.0).abs() < 1e-14 && (v[1] - 2.0).abs() < 1e-14 && (v[2] - 3.0).abs() < 1e-14);
        let (v, _) = eig_hermitian(&pauli_half()[0]).unwrap();
        assert!((v[0] + 0.5).abs() < 1e-14 && (v[1] - 0.5).abs() < 1e-14);

        let mut bad = identity(2);
        bad[(0, 1)] = c(1.0, 0.0);
        assert!(matches!(eig_hermitian(&bad), Err(Error::NotHermitian(_))));
    }

    #[test]
    fn eig_reconstruction_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let h = random_hermitian(&mut rng, 8);
            let (vals, vecs) = eig_hermitian(&h).unwrap();
            let lam = CMatrix::from_diagonal(&nalgebra::DVector::from_iterator(8, vals.iter().map(|&v| c(v, 0.0))));
            let recon = &vecs * lam * vecs.adjoint();
            assert!(max_abs(&(recon - &h)) < 1e-10);
            assert!(unitarity_deviation(&vecs) < 1e-10);
            let tr: f64 = vals.iter().sum();
            assert!((tr - h.trace().re).abs() < 1e-9);
            assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn expm_examples() {
        assert!(max_abs(&(expm_unitary(&zeros(4), 3.0).unwrap() - identity(4))) < 1e-15);

        let f = 3.0;
        let t = 0.2;
        let h = pauli_half()[2].clone() * c(f, 0.0);
        let u = expm_unitary(&h, t).unwrap();
        let expected = C64::from_polar(1.0, -PI * f * t);
        assert!((u[(0, 0)] - expected).norm() < 1e-12);

        // 10 MHz Rabi for 50 ns: rotation angle 2π·10·0.05 = π about x
        let h = pauli_half()[0].clone() * c(10.0, 0.0);
        let u = expm_unitary(&h, 0.05).unwrap();
        assert!((u[(1, 0)] - c(0.0, -1.0)).norm() < 1e-12);
        assert!(u[(0, 0)].norm() < 1e-12);
    }

    #[test]
    fn expm_unitary_for_large_arguments() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let h = random_hermitian(&mut rng, 8) * c(100.0, 0.0);
            let u = expm_unitary(&h, 5.0).unwrap();
            assert!(unitarity_deviation(&u) < 1e-10);
        }
    }

    #[test]
    fn fidelity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = random_hermitian(&mut rng, 4);
        let u = expm_unitary(&h, 1.0).unwrap();
        assert!((fidelity_unitary(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        let phased = &u * C64::from_polar(1.0, 0.73);
        assert!((fidelity_unitary(&u, &phased).unwrap() - 1.0).abs() < 1e-12);
        let sx2 = pauli_half()[0].clone() * c(2.0, 0.0);
        assert!(fidelity_unitary(&identity(2), &sx2).unwrap().abs() < 1e-15);
        assert!(matches!(
            fidelity_unitary(&identity(2), &identity(4)),
            Err(Error::DimensionMismatch(2, 4))
        ));
    }
}
