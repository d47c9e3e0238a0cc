//! The hand-written eigensolver and Cholesky solve checked against nalgebra.

use nalgebra::DMatrix;
use ndarray::Array2;
use ntk_core::linalg::cholesky_solve;
use ntk_core::regression::eigendecompose_matrix;
use proptest::prelude::*;

fn symmetric(n: usize) -> impl Strategy<Value = Array2<f64>> {
    prop::collection::vec(-5.0f64..5.0, n * n).prop_map(move |v| {
        let a = Array2::from_shape_vec((n, n), v).unwrap();
        (&a + &a.t()) * 0.5
    })
}

fn to_nalgebra(a: &Array2<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn eigendecomposition_matches(a in (1usize..24).prop_flat_map(symmetric)) {
        let ours = eigendecompose_matrix(a.view()).unwrap();
        let mut theirs: Vec<f64> = to_nalgebra(&a).symmetric_eigen().eigenvalues.iter().copied().collect();
        theirs.sort_by(|x, y| y.total_cmp(x));
        let scale = theirs.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        for (x, y) in ours.eigenvalues().iter().zip(&theirs) {
            prop_assert!((x - y).abs() <= 1e-10 * scale, "{x} vs {y}");
        }
        let v = ours.eigenvectors();
        let gram = v.t().dot(&v);
        for ((i, j), g) in gram.indexed_iter() {
            let want = if i == j { 1.0 } else { 0.0 };
            prop_assert!((g - want).abs() <= 1e-10);
        }
        let back = ours.reconstruction();
        for (x, y) in back.iter().zip(&a) {
            prop_assert!((x - y).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn cholesky_solve_matches(g in prop::collection::vec(-2.0f64..2.0, 10 * 10), b in prop::collection::vec(-2.0f64..2.0, 10 * 3)) {
        let g = Array2::from_shape_vec((10, 10), g).unwrap();
        let a = g.dot(&g.t()) + Array2::<f64>::eye(10);
        let b = Array2::from_shape_vec((10, 3), b).unwrap();
        let ours = cholesky_solve(a.view(), b.view()).unwrap();
        let theirs = to_nalgebra(&a).cholesky().unwrap().solve(&DMatrix::from_fn(10, 3, |i, j| b[[i, j]]));
        for ((i, j), x) in ours.indexed_iter() {
            prop_assert!((x - theirs[(i, j)]).abs() <= 1e-9 * (1.0 + theirs[(i, j)].abs()));
        }
    }
}
