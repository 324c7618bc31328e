//! Dense kernels checked against nalgebra on random inputs.

use ere_core::matrix::{cholesky, min_eigenvalue_sym, spd_solve, spectral_norm, sym_eigenvalues, trace_norm};
use ere_core::{Mat, SymMat};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn to_na(m: &Mat) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn mat(rows: usize, cols: usize) -> impl Strategy<Value = Mat> {
    prop::collection::vec(-3.0..3.0f64, rows * cols).prop_map(move |d| Mat::new(rows, cols, d).unwrap())
}

fn any_mat() -> impl Strategy<Value = Mat> {
    (1usize..6, 1usize..6).prop_flat_map(|(r, c)| mat(r, c))
}

/// `AᵀA + shift·I`, symmetric positive definite.
fn spd(n: usize) -> impl Strategy<Value = SymMat> {
    (mat(n, n), 0.1..2.0f64).prop_map(move |(a, shift)| {
        let mut g = a.tr_mul(&a);
        g += &Mat::identity(n).scale(shift);
        SymMat::from_mat(&g.symmetrize()).unwrap()
    })
}

fn close(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    let scale = 1.0 + b.amax();
    (a - b).amax() <= tol * scale
}

proptest! {
    #[test]
    fn product_matches(
        (a, b) in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(r, k, c)| (mat(r, k), mat(k, c)))
    ) {
        prop_assert!(close(&to_na(&(&a * &b)), &(to_na(&a) * to_na(&b)), 1e-14));
        prop_assert!(close(&to_na(&a.transpose()), &to_na(&a).transpose(), 0.0));
    }

    #[test]
    fn transposed_product_matches(
        (a, b) in (1usize..6, 1usize..6, 1usize..6).prop_flat_map(|(r, k, c)| (mat(k, r), mat(k, c)))
    ) {
        prop_assert!(close(&to_na(&a.tr_mul(&b)), &(to_na(&a).transpose() * to_na(&b)), 1e-14));
    }

    #[test]
    fn cholesky_reconstructs(a in (1usize..6).prop_flat_map(spd)) {
        let l = cholesky(&a, 1e-12).unwrap();
        let na = to_na(a.as_mat());
        let ours = to_na(&l);
        prop_assert!(close(&(&ours * ours.transpose()), &na, 1e-12));
        let theirs = na.cholesky().unwrap().l();
        prop_assert!(close(&ours, &theirs, 1e-10));
    }

    #[test]
    fn spd_solve_matches(
        (a, b) in (1usize..6, 1usize..4).prop_flat_map(|(n, c)| (spd(n), mat(n, c)))
    ) {
        let x = spd_solve(&a, &b).unwrap();
        let theirs = to_na(a.as_mat()).lu().solve(&to_na(&b)).unwrap();
        prop_assert!(close(&to_na(&x), &theirs, 1e-9));
    }

    #[test]
    fn eigenvalues_match(a in (1usize..6).prop_flat_map(|n| mat(n, n))) {
        let s = SymMat::from_mat(&a.symmetrize()).unwrap();
        let ours = sym_eigenvalues(&s).unwrap();
        let mut theirs: Vec<f64> = to_na(s.as_mat()).symmetric_eigen().eigenvalues.iter().copied().collect();
        theirs.sort_by(f64::total_cmp);
        for (x, y) in ours.iter().zip(&theirs) {
            prop_assert!((x - y).abs() <= 1e-10 * (1.0 + y.abs()), "{x} vs {y}");
        }
        let min = min_eigenvalue_sym(&s).unwrap();
        prop_assert!((min - theirs[0]).abs() <= 1e-10 * (1.0 + theirs[0].abs()));
    }

    #[test]
    fn norms_match_singular_values(a in any_mat()) {
        let sv = to_na(&a).singular_values();
        let largest = sv.iter().copied().fold(0.0, f64::max);
        let sum: f64 = sv.iter().sum();
        prop_assert!((spectral_norm(&a) - largest).abs() <= 1e-9 * (1.0 + largest));
        prop_assert!((trace_norm(&a) - sum).abs() <= 1e-9 * (1.0 + sum));
    }

    #[test]
    fn congruence_is_symmetric(
        (k, x) in (1usize..5, 1usize..5).prop_flat_map(|(n, c)| (mat(n, n), mat(n, c)))
    ) {
        let s = k.symmetrize();
        let c = s.congruence(&x);
        prop_assert!(c.asymmetry() <= 1e-12 * (1.0 + c.max_abs()));
        let theirs = to_na(&x).transpose() * to_na(&s) * to_na(&x);
        prop_assert!(close(&to_na(&c), &theirs, 1e-13));
    }
}
