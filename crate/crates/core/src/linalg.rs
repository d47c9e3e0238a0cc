//! Dense symmetric linear algebra: eigendecomposition and Cholesky solves.
//!
//! The eigensolver is Householder tridiagonalisation followed by implicit QL
//! iterations with Wilkinson-style shifts (the classical `tred2`/`tql2` pair).

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const MAX_QL_ITERATIONS: usize = 64;

/// Raw symmetric eigendecomposition, eigenvalues ascending, eigenvectors in columns.
pub(crate) fn symmetric_eigen_ascending<T: Scalar>(
    a: ArrayView2<'_, T>,
) -> Result<(Array1<T>, Array2<T>)> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::param(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical(
            "eigendecomposition input contains non-finite entries".into(),
        ));
    }
    if n == 0 {
        return Ok((Array1::zeros(0), Array2::zeros((0, 0))));
    }
    let mut v = a.to_owned();
    let mut d = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    tred2(&mut v, &mut d, &mut e);
    tql2(&mut v, &mut d, &mut e).map_err(|iters| {
        let diag = a.diag();
        let lo = diag.iter().cloned().fold(T::infinity(), T::min);
        let hi = diag.iter().cloned().fold(T::neg_infinity(), T::max);
        Error::Numerical(format!(
            "QL iteration did not converge after {iters} sweeps (n = {n}, \
             ||A||_F = {:e}, diagonal range [{:e}, {:e}])",
            frobenius_norm(a),
            lo,
            hi
        ))
    })?;

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).expect("finite eigenvalues"));
    let values = Array1::from_iter(order.iter().map(|&i| d[i]));
    let vectors = v.select(Axis(1), &order);
    Ok((values, vectors))
}

fn tred2<T: Scalar>(v: &mut Array2<T>, d: &mut [T], e: &mut [T]) {
    let n = d.len();
    let zero = T::zero();
    for j in 0..n {
        d[j] = v[[n - 1, j]];
    }
    for i in (1..n).rev() {
        let mut scale = zero;
        let mut h = zero;
        for dk in d.iter().take(i) {
            scale += dk.abs();
        }
        if scale == zero {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[[i - 1, j]];
                v[[i, j]] = zero;
                v[[j, i]] = zero;
            }
        } else {
            for dk in d.iter_mut().take(i) {
                *dk /= scale;
                h += *dk * *dk;
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > zero {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = zero;
            }
            for j in 0..i {
                f = d[j];
                v[[j, i]] = f;
                g = e[j] + v[[j, j]] * f;
                for k in (j + 1)..i {
                    g += v[[k, j]] * d[k];
                    e[k] += v[[k, j]] * f;
                }
                e[j] = g;
            }
            f = zero;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    let upd = f * e[k] + g * d[k];
                    v[[k, j]] -= upd;
                }
                d[j] = v[[i - 1, j]];
                v[[i, j]] = zero;
            }
        }
        d[i] = h;
    }

    for i in 0..n.saturating_sub(1) {
        v[[n - 1, i]] = v[[i, i]];
        v[[i, i]] = T::one();
        let h = d[i + 1];
        if h != zero {
            for k in 0..=i {
                d[k] = v[[k, i + 1]] / h;
            }
            for j in 0..=i {
                let mut g = zero;
                for k in 0..=i {
                    g += v[[k, i + 1]] * v[[k, j]];
                }
                for k in 0..=i {
                    let upd = g * d[k];
                    v[[k, j]] -= upd;
                }
            }
        }
        for k in 0..=i {
            v[[k, i + 1]] = zero;
        }
    }
    for j in 0..n {
        d[j] = v[[n - 1, j]];
        v[[n - 1, j]] = zero;
    }
    v[[n - 1, n - 1]] = T::one();
    e[0] = zero;
}

/// Returns the iteration count on failure.
fn tql2<T: Scalar>(v: &mut Array2<T>, d: &mut [T], e: &mut [T]) -> std::result::Result<(), usize> {
    let n = d.len();
    let zero = T::zero();
    let one = T::one();
    let two = T::lit(2.0);
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = zero;

    let mut f = zero;
    let mut tst1 = zero;
    let eps = T::epsilon();
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > MAX_QL_ITERATIONS {
                    return Err(iter);
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (two * e[l]);
                let mut r = p.hypot(one);
                if p < zero {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = one;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = zero;
                let mut s2 = zero;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        let hk = v[[k, i + 1]];
                        let vk = v[[k, i]];
                        v[[k, i + 1]] = s * vk + c * hk;
                        v[[k, i]] = c * vk - s * hk;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = zero;
    }
    Ok(())
}

/// Lower Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky<T: Scalar>(a: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::param("cholesky needs a square matrix"));
    }
    let mut l = Array2::<T>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > T::zero()) {
            return Err(Error::Numerical(format!(
                "matrix is not positive definite (pivot {j} = {:e})",
                diag
            )));
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Ok(l)
}

/// Solves `A X = B` for symmetric positive definite `A` by Cholesky factorisation.
pub fn cholesky_solve<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Result<Array2<T>> {
    let l = cholesky(a)?;
    let n = l.nrows();
    if b.nrows() != n {
        return Err(Error::param(format!(
            "right-hand side has {} rows, matrix has {n}",
            b.nrows()
        )));
    }
    let mut x = b.to_owned();
    for col in 0..x.ncols() {
        // forward: L y = b
        for i in 0..n {
            let mut s = x[[i, col]];
            for k in 0..i {
                s -= l[[i, k]] * x[[k, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
        // backward: L^T x = y
        for i in (0..n).rev() {
            let mut s = x[[i, col]];
            for k in (i + 1)..n {
                s -= l[[k, i]] * x[[k, col]];
            }
            x[[i, col]] = s / l[[i, i]];
        }
    }
    Ok(x)
}

/// Frobenius inner product `Tr(A B^T)`, summed in row-major order.
pub fn frobenius_inner<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> T {
    a.iter().zip(b.iter()).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn frobenius_norm<T: Scalar>(a: ArrayView2<'_, T>) -> T {
    frobenius_inner(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn diagonal_matrix_eigenvalues() {
        let a = array![[3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]];
        let (vals, _) = symmetric_eigen_ascending(a.view()).unwrap();
        assert_eq!(vals.to_vec(), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn one_by_one() {
        let a = array![[4.5f64]];
        let (vals, vecs) = symmetric_eigen_ascending(a.view()).unwrap();
        assert_eq!(vals[0], 4.5);
        assert_eq!(vecs[[0, 0]].abs(), 1.0);
    }

    #[test]
    fn two_by_two_known_spectrum() {
        let a = array![[2.0f64, 1.0], [1.0, 2.0]];
        let (vals, vecs) = symmetric_eigen_ascending(a.view()).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-14);
        assert!((vals[1] - 3.0).abs() < 1e-14);
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((vecs[[0, 1]].abs() - s).abs() < 1e-14);
    }

    #[test]
    fn rejects_non_finite() {
        let a = array![[f64::NAN, 0.0], [0.0, 1.0]];
        assert!(matches!(
            symmetric_eigen_ascending(a.view()),
            Err(Error::Numerical(_))
        ));
    }

    #[test]
    fn cholesky_solve_small_system() {
        let a = array![[4.0f64, 2.0], [2.0, 3.0]];
        let b = array![[2.0], [1.0]];
        let x = cholesky_solve(a.view(), b.view()).unwrap();
        let back = a.dot(&x);
        assert!((back[[0, 0]] - 2.0).abs() < 1e-14);
        assert!((back[[1, 0]] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = array![[1.0f64, 2.0], [2.0, 1.0]];
        assert!(cholesky(a.view()).is_err());
    }
}
