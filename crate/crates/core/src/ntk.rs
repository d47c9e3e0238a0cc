//! Analytical neural tangent kernels for fully-connected ReLU networks.
//!
//! Two families are supported:
//!
//! * [`KernelModel::TwoLayerFrozenRelu`]: the kernel of `f(x) = m^{-1/2} A^T relu(W x)`
//!   with a frozen `±1` head, trained in `W` only:
//!   `Θ(x, x') = (1/2 - arccos(ρ) / 2π) <x, x'>`, `ρ = <x, x'> / (|x| |x'|)`.
//! * [`KernelModel::FullyConnectedRelu`]: the arc-cosine recursion for a bias-free
//!   ReLU MLP with `depth` hidden layers, all layers trained, NTK parameterisation
//!   with unit-variance weights and `sqrt(2 / width)` layer scaling.
//!
//! [`empirical_ntk_oracle`] draws finite random networks of the same
//! parameterisations and contracts their exact weight Jacobians, which gives an
//! independent Monte-Carlo check of both closed forms.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nets::{FiniteNet, Network};
use crate::rng::{gaussian, substream, Stream};
use crate::scalar::Scalar;

/// `|ρ|` at or beyond this value uses the subgradient convention (derivative of arccos set to 0).
pub const RHO_EDGE: f64 = 1.0 - 1e-9;
pub const DEFAULT_JITTER_SCALE: f64 = 1e-8;

const GRAM_MAGIC: &[u8; 4] = b"NTKG";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelModel {
    TwoLayerFrozenRelu,
    /// `depth` is the number of hidden ReLU layers (>= 1).
    FullyConnectedRelu { depth: usize },
}

/// Arc-cosine function of order 0, `(π - arccos u) / π`.
pub fn arccos_kernel0<T: Scalar>(u: T) -> T {
    let u = clamp_unit(u);
    (T::PI() - u.acos()) / T::PI()
}

/// Arc-cosine function of order 1, `(sqrt(1 - u²) + (π - arccos u) u) / π`.
pub fn arccos_kernel1<T: Scalar>(u: T) -> T {
    let u = clamp_unit(u);
    ((T::one() - u * u).max(T::zero()).sqrt() + (T::PI() - u.acos()) * u) / T::PI()
}

fn clamp_unit<T: Scalar>(u: T) -> T {
    u.max(-T::one()).min(T::one())
}

fn dot<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> T {
    a.dot(&b)
}

impl KernelModel {
    pub fn fully_connected(depth: usize) -> Result<Self> {
        let k = KernelModel::FullyConnectedRelu { depth };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            KernelModel::FullyConnectedRelu { depth: 0 } => {
                Err(Error::param("fully-connected kernel depth must be >= 1"))
            }
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            KernelModel::TwoLayerFrozenRelu => "two_layer_frozen_relu".into(),
            KernelModel::FullyConnectedRelu { depth } => format!("fully_connected_relu_{depth}"),
        }
    }

    /// Kernel value `Θ(x, x2)`.
    pub fn value<T: Scalar>(&self, x: ArrayView1<'_, T>, x2: ArrayView1<'_, T>) -> Result<T> {
        check_dims(x, x2)?;
        let sxx = dot(x, x);
        let syy = dot(x2, x2);
        if sxx == T::zero() || syy == T::zero() {
            return Err(Error::Domain("kernel input has zero norm".into()));
        }
        let sxy = dot(x, x2);
        match *self {
            KernelModel::TwoLayerFrozenRelu => {
                let rho = clamp_unit(sxy / (sxx.sqrt() * syy.sqrt()));
                let half = T::lit(0.5);
                Ok((half - rho.acos() / (T::lit(2.0) * T::PI())) * sxy)
            }
            KernelModel::FullyConnectedRelu { depth } => {
                if depth == 0 {
                    return Err(Error::param("fully-connected kernel depth must be >= 1"));
                }
                // Σ^l(x,x) = Σ^0(x,x) because κ1(1) = 1, so only the cross term evolves.
                let norm = (sxx * syy).sqrt();
                let mut sigma = sxy;
                let mut theta = sxy;
                for _ in 0..depth {
                    let rho = clamp_unit(sigma / norm);
                    let next = norm * arccos_kernel1(rho);
                    theta = next + theta * arccos_kernel0(rho);
                    sigma = next;
                }
                Ok(theta)
            }
        }
    }

    /// Gradient of `Θ(x, x2)` with respect to its first argument.
    ///
    /// Where `|ρ|` reaches [`RHO_EDGE`] the arccos derivative is taken as 0.
    pub fn input_gradient<T: Scalar>(
        &self,
        x: ArrayView1<'_, T>,
        x2: ArrayView1<'_, T>,
    ) -> Result<Array1<T>> {
        check_dims(x, x2)?;
        match *self {
            KernelModel::TwoLayerFrozenRelu => two_layer_gradient(x, x2),
            KernelModel::FullyConnectedRelu { depth } => {
                if depth == 0 {
                    return Err(Error::param("fully-connected kernel depth must be >= 1"));
                }
                deep_gradient(depth, x, x2)
            }
        }
    }

    /// Gram matrix over the rows of `inputs`, with diagonal jitter
    /// `jitter_scale * trace / n`. Only the upper triangle is evaluated.
    pub fn gram<T: Scalar>(&self, inputs: ArrayView2<'_, T>, jitter_scale: f64) -> Result<GramMatrix<T>> {
        let n = inputs.nrows();
        if n == 0 {
            return Err(Error::param("Gram matrix needs at least one input row"));
        }
        if !(jitter_scale >= 0.0) {
            return Err(Error::param("jitter scale must be nonnegative"));
        }
        let rows: Vec<Vec<T>> = (0..n)
            .into_par_iter()
            .map(|i| {
                (i..n)
                    .map(|j| {
                        self.value(inputs.row(i), inputs.row(j)).map_err(|e| {
                            Error::Domain(format!("Gram entry ({i}, {j}): {e}"))
                        })
                    })
                    .collect::<Result<Vec<T>>>()
            })
            .collect::<Result<_>>()?;
        let mut values = Array2::zeros((n, n));
        for (i, row) in rows.into_iter().enumerate() {
            for (off, v) in row.into_iter().enumerate() {
                values[[i, i + off]] = v;
                values[[i + off, i]] = v;
            }
        }
        let trace: T = values.diag().sum();
        let jitter = T::lit(jitter_scale) * trace / T::lit(n as f64);
        for i in 0..n {
            values[[i, i]] += jitter;
        }
        Ok(GramMatrix {
            values,
            kernel: *self,
            jitter,
        })
    }

    /// `Θ(x, X)`: kernel against every row of `inputs`, without jitter.
    pub fn cross<T: Scalar>(&self, x: ArrayView1<'_, T>, inputs: ArrayView2<'_, T>) -> Result<Array1<T>> {
        let vals: Vec<T> = (0..inputs.nrows())
            .into_par_iter()
            .map(|j| self.value(x, inputs.row(j)))
            .collect::<Result<_>>()?;
        Ok(Array1::from(vals))
    }

    /// Stacked kernel gradients: row `j` is `∇_x Θ(x, x_j)` (shape `n x d`).
    pub fn cross_jacobian<T: Scalar>(
        &self,
        x: ArrayView1<'_, T>,
        inputs: ArrayView2<'_, T>,
    ) -> Result<Array2<T>> {
        let rows: Vec<Array1<T>> = (0..inputs.nrows())
            .into_par_iter()
            .map(|j| self.input_gradient(x, inputs.row(j)))
            .collect::<Result<_>>()?;
        let mut jac = Array2::zeros((inputs.nrows(), x.len()));
        for (j, r) in rows.into_iter().enumerate() {
            jac.row_mut(j).assign(&r);
        }
        Ok(jac)
    }
}

fn check_dims<T>(x: ArrayView1<'_, T>, x2: ArrayView1<'_, T>) -> Result<()> {
    if x.len() != x2.len() {
        return Err(Error::param(format!(
            "kernel inputs have different dimensions ({} vs {})",
            x.len(),
            x2.len()
        )));
    }
    Ok(())
}

fn two_layer_gradient<T: Scalar>(x: ArrayView1<'_, T>, x2: ArrayView1<'_, T>) -> Result<Array1<T>> {
    let sxx = dot(x, x);
    let syy = dot(x2, x2);
    if sxx == T::zero() || syy == T::zero() {
        return Err(Error::Domain("kernel input has zero norm".into()));
    }
    let nx = sxx.sqrt();
    let ny = syy.sqrt();
    let s = dot(x, x2);
    let rho = clamp_unit(s / (nx * ny));
    let two_pi = T::lit(2.0) * T::PI();
    let weight = T::lit(0.5) - rho.acos() / two_pi;
    let mut g = x2.mapv(|v| weight * v);
    if rho.abs() < T::lit(RHO_EDGE) {
        // d/dx [-arccos(ρ) / 2π] * s  with  ∇ρ = (x2/|x2| - ρ x/|x|) / |x|
        let coef = s / (two_pi * (T::one() - rho * rho).sqrt() * nx);
        Zip::from(&mut g).and(x).and(x2).for_each(|gi, &xi, &yi| {
            *gi += coef * (yi / ny - rho * xi / nx);
        });
    }
    Ok(g)
}

// Forward-mode derivative of the recursion in (<x,x>, <x,x2>); the chain rule
// then maps it to x through d<x,x> = 2x and d<x,x2> = x2.
fn deep_gradient<T: Scalar>(depth: usize, x: ArrayView1<'_, T>, x2: ArrayView1<'_, T>) -> Result<Array1<T>> {
    let sxx = dot(x, x);
    let syy = dot(x2, x2);
    if sxx == T::zero() || syy == T::zero() {
        return Err(Error::Domain("kernel input has zero norm".into()));
    }
    let sxy = dot(x, x2);
    let norm = (sxx * syy).sqrt();
    let dnorm = [syy / (T::lit(2.0) * norm), T::zero()];
    let mut sigma = sxy;
    let mut theta = sxy;
    let mut dsigma = [T::zero(), T::one()];
    let mut dtheta = dsigma;
    for _ in 0..depth {
        let rho = clamp_unit(sigma / norm);
        let k0 = arccos_kernel0(rho);
        let k1 = arccos_kernel1(rho);
        let dk0 = if rho.abs() < T::lit(RHO_EDGE) {
            T::one() / (T::PI() * (T::one() - rho * rho).sqrt())
        } else {
            T::zero()
        };
        let mut dnext = [T::zero(); 2];
        let mut dth = [T::zero(); 2];
        for v in 0..2 {
            let drho = dsigma[v] / norm - sigma * dnorm[v] / (norm * norm);
            // κ1' = κ0
            dnext[v] = dnorm[v] * k1 + norm * k0 * drho;
            dth[v] = dnext[v] + dtheta[v] * k0 + theta * dk0 * drho;
        }
        let next = norm * k1;
        theta = next + theta * k0;
        sigma = next;
        dsigma = dnext;
        dtheta = dth;
    }
    let two = T::lit(2.0);
    Ok(Zip::from(x).and(x2).map_collect(|&a, &b| two * a * dtheta[0] + b * dtheta[1]))
}

/// Symmetric kernel matrix on a training set, jitter already on the diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix<T> {
    values: Array2<T>,
    kernel: KernelModel,
    jitter: T,
}

impl<T: Scalar> GramMatrix<T> {
    /// Wraps an explicit symmetric matrix (used for empirical kernels and tests).
    pub fn from_values(values: Array2<T>, kernel: KernelModel, jitter: T) -> Result<Self> {
        let n = values.nrows();
        if values.ncols() != n {
            return Err(Error::param("Gram matrix must be square"));
        }
        let scale = values.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        for i in 0..n {
            for j in 0..i {
                if (values[[i, j]] - values[[j, i]]).abs() > T::lit(1e-10) * scale {
                    return Err(Error::param(format!("Gram matrix not symmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { values, kernel, jitter })
    }

    pub fn values(&self) -> ArrayView2<'_, T> {
        self.values.view()
    }

    pub fn kernel(&self) -> KernelModel {
        self.kernel
    }

    pub fn jitter(&self) -> T {
        self.jitter
    }

    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    /// Binary layout: `NTKG`, u32 n, f64 jitter, then the lower triangle row by
    /// row (`j <= i`), all little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.n();
        let mut out = Vec::with_capacity(16 + 8 * n * (n + 1) / 2);
        out.extend_from_slice(GRAM_MAGIC);
        out.extend_from_slice(&(n as u32).to_le_bytes());
        out.extend_from_slice(&self.jitter.as_f64().to_le_bytes());
        for i in 0..n {
            for j in 0..=i {
                out.extend_from_slice(&self.values[[i, j]].as_f64().to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], kernel: KernelModel) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != GRAM_MAGIC {
            return Err(Error::Format("not a Gram matrix file (bad magic or header)".into()));
        }
        let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let jitter = f64::from_le_bytes(bytes[8..16].try_into().unwrap());
        let expect = 16 + 8 * n * (n + 1) / 2;
        if bytes.len() != expect {
            return Err(Error::Format(format!(
                "Gram file holds {} bytes, expected {expect} for n = {n}",
                bytes.len()
            )));
        }
        let mut values = Array2::zeros((n, n));
        let mut at = 16;
        for i in 0..n {
            for j in 0..=i {
                let v = T::lit(f64::from_le_bytes(bytes[at..at + 8].try_into().unwrap()));
                values[[i, j]] = v;
                values[[j, i]] = v;
                at += 8;
            }
        }
        Ok(Self {
            values,
            kernel,
            jitter: T::lit(jitter),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path, kernel: KernelModel) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, kernel)
    }
}

/// Exact weight-Jacobian Gram of one random finite network of the kernel's
/// architecture, at initialisation. Deterministic per seed.
pub fn empirical_ntk_oracle<T: Scalar>(
    kernel: KernelModel,
    width: usize,
    seed: u64,
    inputs: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    if width == 0 {
        return Err(Error::param("oracle width must be >= 1"));
    }
    match kernel {
        KernelModel::TwoLayerFrozenRelu => {
            let net = FiniteNet::<T>::init(width, inputs.ncols(), 1, seed)?;
            Ok(net.empirical_ntk(inputs))
        }
        KernelModel::FullyConnectedRelu { depth } => {
            kernel.validate()?;
            Ok(deep_relu_ntk(depth, width, seed, inputs))
        }
    }
}

/// Mean of [`empirical_ntk_oracle`] over `seeds` consecutive seeds.
pub fn averaged_ntk_oracle<T: Scalar>(
    kernel: KernelModel,
    width: usize,
    seed: u64,
    seeds: usize,
    inputs: ArrayView2<'_, T>,
) -> Result<Array2<T>> {
    let n = inputs.nrows();
    let mut acc = Array2::zeros((n, n));
    for s in 0..seeds.max(1) as u64 {
        acc += &empirical_ntk_oracle(kernel, width, seed.wrapping_add(s), inputs)?;
    }
    Ok(acc / T::lit(seeds.max(1) as f64))
}

// h1 = W1 x;  h_{l+1} = sqrt(2/m) W_{l+1} relu(h_l);  f = sqrt(2/m) v . relu(h_L);
// all weights standard normal.
fn deep_relu_ntk<T: Scalar>(depth: usize, width: usize, seed: u64, x: ArrayView2<'_, T>) -> Array2<T> {
    let mut rng = substream(seed, Stream::Oracle);
    let d = x.ncols();
    let scale = T::lit((2.0 / width as f64).sqrt());
    let mut draw = |rows: usize, cols: usize| {
        Array2::from_shape_simple_fn((rows, cols), || gaussian::<T, _>(&mut rng, 1.0))
    };
    let first = draw(width, d);
    let hidden: Vec<Array2<T>> = (1..depth).map(|_| draw(width, width)).collect();
    let head = draw(width, 1).column(0).to_owned();

    let relu = |v: &T| v.max(T::zero());
    let step = |v: &T| if *v > T::zero() { T::one() } else { T::zero() };

    let mut pre = vec![x.dot(&first.t())];
    for w in &hidden {
        let act = pre.last().unwrap().map(relu);
        pre.push(act.dot(&w.t()) * scale);
    }
    let acts: Vec<Array2<T>> = pre.iter().map(|h| h.map(relu)).collect();

    let last = acts.last().unwrap();
    let mut ntk = last.dot(&last.t()) * (scale * scale);
    let mut delta = pre.last().unwrap().map(step) * &head.view().insert_axis(Axis(0)) * scale;
    for l in (0..depth - 1).rev() {
        // gradient of W_{l+2}: sqrt(2/m) delta_{l+1} a_l^T
        let dd = delta.dot(&delta.t());
        let aa = acts[l].dot(&acts[l].t());
        ntk = ntk + dd * aa * (scale * scale);
        delta = delta.dot(&hidden[l]) * scale * pre[l].map(step);
    }
    ntk + delta.dot(&delta.t()) * x.dot(&x.t())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_layer_identity_case() {
        let x = array![0.6f64, 0.8];
        assert!((KernelModel::TwoLayerFrozenRelu.value(x.view(), x.view()).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn two_layer_orthogonal_and_antipodal() {
        let k = KernelModel::TwoLayerFrozenRelu;
        let a = array![1.0f64, 0.0];
        let b = array![0.0f64, 1.0];
        assert_eq!(k.value(a.view(), b.view()).unwrap(), 0.0);
        let c = array![-1.0f64, 0.0];
        assert!(k.value(a.view(), c.view()).unwrap().abs() < 1e-16);
    }

    #[test]
    fn zero_norm_is_domain_error() {
        let a = array![0.0f64, 0.0];
        let b = array![1.0f64, 0.0];
        for k in [KernelModel::TwoLayerFrozenRelu, KernelModel::FullyConnectedRelu { depth: 2 }] {
            assert!(matches!(k.value(a.view(), b.view()), Err(Error::Domain(_))));
        }
        assert!(matches!(
            KernelModel::TwoLayerFrozenRelu.input_gradient(a.view(), b.view()),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn zero_depth_rejected() {
        assert!(KernelModel::fully_connected(0).is_err());
    }

    #[test]
    fn arccos_kernels_at_edges() {
        assert_eq!(arccos_kernel0(1.0f64), 1.0);
        assert_eq!(arccos_kernel1(1.0f64), 1.0);
        assert!(arccos_kernel0(-1.0f64).abs() < 1e-16);
        assert!(arccos_kernel1(-1.0f64).abs() < 1e-16);
        // overshoot is clamped
        assert_eq!(arccos_kernel0(1.0f64 + 1e-15), 1.0);
    }

    #[test]
    fn gram_of_one_row() {
        let x = array![[1.0f64, 0.0]];
        let g = KernelModel::TwoLayerFrozenRelu.gram(x.view(), 1e-8).unwrap();
        assert!((g.values()[[0, 0]] - 0.5 * (1.0 + 1e-8)).abs() < 1e-16);
        assert!((g.jitter() - 0.5e-8).abs() < 1e-20);
    }

    #[test]
    fn gram_is_exactly_symmetric() {
        let x = array![[1.0f64, 0.2, -0.3], [0.5, 0.1, 0.9], [-0.4, 1.0, 0.0]];
        let g = KernelModel::FullyConnectedRelu { depth: 3 }.gram(x.view(), 0.0).unwrap();
        assert_eq!(g.values(), g.values().t());
    }

    #[test]
    fn gram_reports_bad_row() {
        let x = array![[1.0f64, 0.0], [0.0, 0.0]];
        let err = KernelModel::TwoLayerFrozenRelu.gram(x.view(), 1e-8).unwrap_err();
        assert!(err.to_string().contains("(0, 1)"), "{err}");
    }

    #[test]
    fn cross_matches_gram_without_jitter() {
        let x = array![[1.0f64, 0.2], [0.5, 0.1], [-0.4, 1.0]];
        let k = KernelModel::TwoLayerFrozenRelu;
        let g = k.gram(x.view(), 1e-8).unwrap();
        let c = k.cross(x.row(1), x.view()).unwrap();
        assert_eq!(c[1], g.values()[[1, 1]] - g.jitter());
        assert_eq!(c[0], g.values()[[1, 0]]);
        let empty = Array2::<f64>::zeros((0, 2));
        assert_eq!(k.cross(x.row(0), empty.view()).unwrap().len(), 0);
    }

    #[test]
    fn gradient_at_coincident_points_uses_subgradient() {
        let x = array![0.6f64, 0.8];
        let g = KernelModel::TwoLayerFrozenRelu.input_gradient(x.view(), x.view()).unwrap();
        assert_eq!(g, array![0.3, 0.4]);
    }

    #[test]
    fn gram_binary_round_trip() {
        let x = array![[1.0f64, 0.2], [0.5, 0.1], [-0.4, 1.0]];
        let g = KernelModel::TwoLayerFrozenRelu.gram(x.view(), 1e-8).unwrap();
        let bytes = g.to_bytes();
        assert_eq!(&bytes[..4], b"NTKG");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 3);
        assert_eq!(bytes.len(), 16 + 8 * 6);
        let back = GramMatrix::<f64>::from_bytes(&bytes, g.kernel()).unwrap();
        assert_eq!(back, g);
        assert!(GramMatrix::<f64>::from_bytes(&bytes[..20], g.kernel()).is_err());
    }

    #[test]
    fn oracle_width_one_is_rank_one_psd() {
        // one hidden unit: the Jacobian rows are multiples of the scalar inputs
        let x = array![[1.0f64], [0.5], [2.0]];
        let k = empirical_ntk_oracle(KernelModel::TwoLayerFrozenRelu, 1, 3, x.view()).unwrap();
        assert_eq!(k, k.t());
        let (vals, _) = crate::linalg::symmetric_eigen_ascending(k.view()).unwrap();
        assert!(vals[0] >= -1e-12);
        assert!(vals[1].abs() < 1e-12);
        assert!(vals[2] > 0.0 || k.iter().all(|&v| v == 0.0));
    }
}
