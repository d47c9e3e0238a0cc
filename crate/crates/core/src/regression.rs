//! Kernel regression through the spectrum of the Gram matrix.
//!
//! With `Θ = V Λ V^T`, gradient flow on the squared loss gives
//! `f_t(x) = Θ(x, X)^T V diag((1 - exp(-η λ_i t)) / λ_i) V^T Y`
//! where `η` is the learning rate, and `f_∞` replaces the diagonal by `1 / λ_i`.
//! One factorisation serves every time horizon and every label column.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{cholesky_solve, symmetric_eigen_ascending};
use crate::ntk::{GramMatrix, KernelModel};
use crate::scalar::Scalar;

/// Relative floor below which an eigenvalue counts as singular.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Eigenvalues in descending order with orthonormal eigenvectors in columns.
///
/// Each eigenvector is signed so that its largest-magnitude entry is positive
/// (the lowest index wins ties).
#[derive(Debug, Clone, PartialEq)]
pub struct EigenSystem<T> {
    eigenvalues: Array1<T>,
    eigenvectors: Array2<T>,
}

impl<T: Scalar> EigenSystem<T> {
    pub fn eigenvalues(&self) -> ArrayView1<'_, T> {
        self.eigenvalues.view()
    }

    pub fn eigenvectors(&self) -> ArrayView2<'_, T> {
        self.eigenvectors.view()
    }

    pub fn eigenvector(&self, i: usize) -> ArrayView1<'_, T> {
        self.eigenvectors.column(i)
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// `Σ_{i < p} λ_i v_i v_i^T`.
    pub fn truncated_reconstruction(&self, p: usize) -> Array2<T> {
        let p = p.min(self.len());
        let v = self.eigenvectors.slice(ndarray::s![.., ..p]);
        let scaled = &v * &self.eigenvalues.slice(ndarray::s![..p]).insert_axis(Axis(0));
        scaled.dot(&v.t())
    }

    pub fn reconstruction(&self) -> Array2<T> {
        self.truncated_reconstruction(self.len())
    }
}

/// Symmetric eigendecomposition of an arbitrary symmetric matrix.
pub fn eigendecompose_matrix<T: Scalar>(a: ArrayView2<'_, T>) -> Result<EigenSystem<T>> {
    let (asc_vals, asc_vecs) = symmetric_eigen_ascending(a)?;
    let n = asc_vals.len();
    let eigenvalues = Array1::from_iter(asc_vals.iter().rev().cloned());
    let mut eigenvectors = Array2::zeros((n, n));
    for (dst, src) in (0..n).zip((0..n).rev()) {
        let mut col = asc_vecs.column(src).to_owned();
        let mut lead = 0;
        for (i, v) in col.iter().enumerate() {
            if v.abs() > col[lead].abs() {
                lead = i;
            }
        }
        if n > 0 && col[lead] < T::zero() {
            col.mapv_inplace(|v| -v);
        }
        eigenvectors.column_mut(dst).assign(&col);
    }
    Ok(EigenSystem {
        eigenvalues,
        eigenvectors,
    })
}

pub fn eigendecompose<T: Scalar>(gram: &GramMatrix<T>) -> Result<EigenSystem<T>> {
    eigendecompose_matrix(gram.values())
}

/// Training horizon of the kernel predictor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Horizon<T> {
    Finite(T),
    Infinite,
}

impl<T: Scalar> Horizon<T> {
    fn key(&self) -> Option<u64> {
        match self {
            Horizon::Finite(t) => Some(t.as_f64().to_bits()),
            Horizon::Infinite => None,
        }
    }
}

type CoefficientCache<T> = Mutex<HashMap<Option<u64>, Arc<Array2<T>>>>;

/// Kernel-regression predictor trained on `(X, Y)` with learning rate `η`.
///
/// Cheap to clone; the factorisation and training data are shared.
#[derive(Debug, Clone)]
pub struct Predictor<T> {
    eigen: Arc<EigenSystem<T>>,
    gram: Arc<Array2<T>>,
    train_inputs: Arc<Array2<T>>,
    labels: Arc<Array2<T>>,
    kernel: KernelModel,
    learning_rate: T,
    retained: Option<Arc<Vec<usize>>>,
    cache: Arc<CoefficientCache<T>>,
    direct: Arc<Mutex<Option<Arc<Array2<T>>>>>,
}

impl<T: Scalar> Predictor<T> {
    /// Builds the Gram matrix of `train` and factorises it.
    pub fn fit(kernel: KernelModel, train: &Dataset<T>, learning_rate: T, jitter_scale: f64) -> Result<Self> {
        let gram = kernel.gram(train.inputs(), jitter_scale)?;
        Self::from_gram(&gram, train.inputs().to_owned(), train.label_matrix(), learning_rate)
    }

    pub fn from_gram(
        gram: &GramMatrix<T>,
        train_inputs: Array2<T>,
        labels: Array2<T>,
        learning_rate: T,
    ) -> Result<Self> {
        let n = gram.n();
        if train_inputs.nrows() != n || labels.nrows() != n {
            return Err(Error::param(format!(
                "Gram matrix is {n}x{n} but there are {} inputs and {} label rows",
                train_inputs.nrows(),
                labels.nrows()
            )));
        }
        if !(learning_rate > T::zero()) {
            return Err(Error::param("learning rate must be positive"));
        }
        let eigen = eigendecompose(gram)?;
        Ok(Self {
            eigen: Arc::new(eigen),
            gram: Arc::new(gram.values().to_owned()),
            train_inputs: Arc::new(train_inputs),
            labels: Arc::new(labels),
            kernel: gram.kernel(),
            learning_rate,
            retained: None,
            cache: Arc::default(),
            direct: Arc::default(),
        })
    }

    /// Same kernel and factorisation, different targets.
    pub fn with_labels(&self, labels: Array2<T>) -> Result<Self> {
        if labels.nrows() != self.n() {
            return Err(Error::param("label matrix row count does not match training set"));
        }
        Ok(Self {
            labels: Arc::new(labels),
            cache: Arc::default(),
            direct: Arc::default(),
            ..self.clone()
        })
    }

    /// Restricts the inverse to the span of the given eigen-indices (0-based),
    /// i.e. the pseudo-inverse of `Σ_{i ∈ keep} λ_i v_i v_i^T`.
    pub fn restricted_to(&self, keep: Vec<usize>) -> Result<Self> {
        if let Some(&bad) = keep.iter().find(|&&i| i >= self.n()) {
            return Err(Error::param(format!("eigen-index {bad} out of range")));
        }
        Ok(Self {
            retained: Some(Arc::new(keep)),
            cache: Arc::default(),
            ..self.clone()
        })
    }

    pub fn n(&self) -> usize {
        self.train_inputs.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.train_inputs.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.labels.ncols()
    }

    pub fn eigen(&self) -> &EigenSystem<T> {
        &self.eigen
    }

    pub fn gram_values(&self) -> ArrayView2<'_, T> {
        self.gram.view()
    }

    pub fn train_inputs(&self) -> ArrayView2<'_, T> {
        self.train_inputs.view()
    }

    pub fn labels(&self) -> ArrayView2<'_, T> {
        self.labels.view()
    }

    pub fn kernel(&self) -> KernelModel {
        self.kernel
    }

    pub fn learning_rate(&self) -> T {
        self.learning_rate
    }

    pub fn retained(&self) -> Option<&[usize]> {
        self.retained.as_deref().map(|v| v.as_slice())
    }

    fn active_indices(&self) -> Vec<usize> {
        match &self.retained {
            Some(keep) => keep.as_ref().clone(),
            None => (0..self.n()).collect(),
        }
    }

    /// Spectral filter value for eigenvalue `lambda`.
    fn spectral_weight(&self, index: usize, lambda: T, horizon: Horizon<T>) -> Result<T> {
        match horizon {
            Horizon::Infinite => {
                let top = self.eigen.eigenvalues[0];
                if !(lambda > T::lit(EIGEN_FLOOR) * top) {
                    return Err(Error::Numerical(format!(
                        "eigenvalue {} = {:e} is below the floor {:e} x lambda_1 = {:e}; \
                         increase the jitter",
                        index + 1,
                        lambda,
                        EIGEN_FLOOR,
                        top
                    )));
                }
                Ok(lambda.recip())
            }
            Horizon::Finite(t) => {
                let rate = self.learning_rate * t;
                if lambda == T::zero() {
                    Ok(rate)
                } else {
                    Ok(-(-(rate * lambda)).exp_m1() / lambda)
                }
            }
        }
    }

    /// `Θ^{-1}(I - e^{-ηΘt}) Y` (or `Θ^{-1} Y`), shape `n x k`, cached per horizon.
    pub fn coefficients(&self, horizon: Horizon<T>) -> Result<Arc<Array2<T>>> {
        if let Horizon::Finite(t) = horizon {
            if !(t >= T::zero()) {
                return Err(Error::param(format!("time must be nonnegative, got {t}")));
            }
        }
        let mut cache = self.cache.lock().expect("coefficient cache poisoned");
        if let Some(c) = cache.get(&horizon.key()) {
            return Ok(Arc::clone(c));
        }
        let idx = self.active_indices();
        let v = self.eigen.eigenvectors.select(Axis(1), &idx);
        let weights = idx
            .iter()
            .map(|&i| self.spectral_weight(i, self.eigen.eigenvalues[i], horizon))
            .collect::<Result<Array1<T>>>()?;
        let projected = v.t().dot(self.labels.as_ref()) * &weights.insert_axis(Axis(1));
        let coeffs = Arc::new(v.dot(&projected));
        cache.insert(horizon.key(), Arc::clone(&coeffs));
        Ok(coeffs)
    }

    /// Prediction at `x`, length `k` (1 for signed binary labels).
    pub fn predict(&self, x: ArrayView1<'_, T>, horizon: Horizon<T>) -> Result<Array1<T>> {
        let kx = self.kernel.cross(x, self.train_inputs.view())?;
        let c = self.coefficients(horizon)?;
        Ok(kx.dot(c.as_ref()))
    }

    pub fn predict_infinite_time(&self, x: ArrayView1<'_, T>) -> Result<Array1<T>> {
        self.predict(x, Horizon::Infinite)
    }

    pub fn predict_at_time(&self, x: ArrayView1<'_, T>, t: T) -> Result<Array1<T>> {
        self.predict(x, Horizon::Finite(t))
    }

    /// `Θ^{-1} Y` by a Cholesky solve of the full Gram matrix, bypassing the
    /// eigensystem (and any restriction). Cached.
    pub fn direct_coefficients(&self) -> Result<Arc<Array2<T>>> {
        let mut slot = self.direct.lock().expect("coefficient cache poisoned");
        if let Some(c) = slot.as_ref() {
            return Ok(Arc::clone(c));
        }
        let c = Arc::new(cholesky_solve(self.gram.view(), self.labels.view())?);
        *slot = Some(Arc::clone(&c));
        Ok(c)
    }

    /// `f_∞` via [`Predictor::direct_coefficients`].
    pub fn predict_direct(&self, x: ArrayView1<'_, T>) -> Result<Array1<T>> {
        let alpha = self.direct_coefficients()?;
        let kx = self.kernel.cross(x, self.train_inputs.view())?;
        Ok(kx.dot(alpha.as_ref()))
    }

    /// Input Jacobian of the prediction, `d x k`: `D^T C` where row `j` of `D` is
    /// `∇_x Θ(x, x_j)` and `C` the cached coefficient matrix.
    pub fn prediction_input_gradient(&self, x: ArrayView1<'_, T>, horizon: Horizon<T>) -> Result<Array2<T>> {
        let c = self.coefficients(horizon)?;
        let jac = self.kernel.cross_jacobian(x, self.train_inputs.view())?;
        Ok(jac.t().dot(c.as_ref()))
    }

    /// This predictor frozen at one horizon, usable as an attack target.
    pub fn at(&self, horizon: Horizon<T>) -> KernelView<'_, T> {
        KernelView {
            predictor: self,
            horizon,
        }
    }
}

/// A [`Predictor`] evaluated at a fixed horizon.
#[derive(Debug, Clone, Copy)]
pub struct KernelView<'a, T> {
    pub predictor: &'a Predictor<T>,
    pub horizon: Horizon<T>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn identity_spectrum() {
        let e = eigendecompose_matrix(Array2::<f64>::eye(3).view()).unwrap();
        assert_eq!(e.eigenvalues().to_vec(), vec![1.0, 1.0, 1.0]);
        let vtv = e.eigenvectors().t().dot(&e.eigenvectors());
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((vtv[[i, j]] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn diagonal_spectrum_is_sorted_with_sign_convention() {
        let a = array![[3.0f64, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 2.0]];
        let e = eigendecompose_matrix(a.view()).unwrap();
        assert_eq!(e.eigenvalues().to_vec(), vec![3.0, 2.0, 1.0]);
        assert_eq!(e.eigenvector(0).to_vec(), vec![1.0, 0.0, 0.0]);
        assert_eq!(e.eigenvector(1).to_vec(), vec![0.0, 0.0, 1.0]);
        assert_eq!(e.eigenvector(2).to_vec(), vec![0.0, 1.0, 0.0]);
    }

    fn toy() -> Predictor<f64> {
        let x = array![[1.0, 0.1], [0.2, 1.0], [-0.7, 0.4], [0.5, -0.9]];
        let y = array![[1.0], [-1.0], [1.0], [-1.0]];
        let g = KernelModel::TwoLayerFrozenRelu.gram(x.view(), 1e-8).unwrap();
        Predictor::from_gram(&g, x, y, 0.5).unwrap()
    }

    #[test]
    fn time_zero_predicts_zero() {
        let p = toy();
        let x = array![0.3, 0.3];
        assert_eq!(p.predict_at_time(x.view(), 0.0).unwrap().to_vec(), vec![0.0]);
    }

    #[test]
    fn negative_time_rejected() {
        let p = toy();
        let x = array![0.3, 0.3];
        assert!(matches!(p.predict_at_time(x.view(), -1.0), Err(Error::Parameter(_))));
    }

    #[test]
    fn zero_labels_predict_zero() {
        let p = toy().with_labels(Array2::zeros((4, 1))).unwrap();
        let x = array![0.3, -0.2];
        assert_eq!(p.predict_infinite_time(x.view()).unwrap()[0], 0.0);
        let g = p.prediction_input_gradient(x.view(), Horizon::Infinite).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn coefficients_are_cached() {
        let p = toy();
        let a = p.coefficients(Horizon::Finite(3.0)).unwrap();
        let b = p.coefficients(Horizon::Finite(3.0)).unwrap();
        assert!(Arc::ptr_eq(&a, &b));
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let x = array![[1.0, 0.1], [0.2, 1.0]];
        let g = KernelModel::TwoLayerFrozenRelu.gram(x.view(), 1e-8).unwrap();
        assert!(Predictor::from_gram(&g, x.clone(), Array2::zeros((3, 1)), 1.0).is_err());
        assert!(Predictor::from_gram(&g, x, Array2::zeros((2, 1)), 0.0).is_err());
    }

    #[test]
    fn singular_gram_is_reported_at_infinite_time() {
        // duplicated rows with zero jitter make Θ exactly singular
        let x = array![[1.0f64, 0.0], [1.0, 0.0]];
        let g = KernelModel::TwoLayerFrozenRelu.gram(x.view(), 0.0).unwrap();
        let p = Predictor::from_gram(&g, x, array![[1.0], [1.0]], 1.0).unwrap();
        let q = array![0.5, 0.5];
        assert!(matches!(p.predict_infinite_time(q.view()), Err(Error::Numerical(_))));
        // finite time stays well defined through the λ -> 0 limit
        assert!(p.predict_at_time(q.view(), 2.0).unwrap()[0].is_finite());
    }
}
