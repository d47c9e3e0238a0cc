//! Finite-width networks, gradient-descent training (standard and adversarial),
//! empirical NTKs and linearised continuation.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::attacks::{
    clean_accuracy, gradient_attack, robust_accuracy, target_row, AttackConfig, Differentiable, Loss,
};
use crate::datasets::{Dataset, LabelEncoding};
use crate::error::{Error, Result};
use crate::regression::{Horizon, Predictor};
use crate::rng::{gaussian, rademacher, substream, Stream};
use crate::scalar::Scalar;

/// A differentiable model with a flat trainable parameter vector.
///
/// Input and output sizes come from the [`Differentiable`] supertrait.
pub trait Network<T: Scalar>: Differentiable<T> {
    fn num_params(&self) -> usize;
    fn params(&self) -> Array1<T>;
    fn set_params(&mut self, params: ArrayView1<'_, T>) -> Result<()>;
    fn forward(&self, x: ArrayView1<'_, T>) -> Array1<T>;
    /// `d x k`; column `o` is `∇_x f_o(x)`.
    fn input_jacobian(&self, x: ArrayView1<'_, T>) -> Array2<T>;
    /// `k x P`; row `o` is `∇_w f_o(x)`.
    fn param_jacobian(&self, x: ArrayView1<'_, T>) -> Array2<T>;

    /// `J(x)^T u` for an upstream output gradient `u`.
    fn param_gradient(&self, x: ArrayView1<'_, T>, upstream: ArrayView1<'_, T>) -> Array1<T> {
        self.param_jacobian(x).t().dot(&upstream)
    }

    /// `Σ_i J(x_i)^T u_i`, reduced in example order.
    fn batch_param_gradient(&self, inputs: ArrayView2<'_, T>, upstream: ArrayView2<'_, T>) -> Array1<T> {
        let parts: Vec<Array1<T>> = (0..inputs.nrows())
            .into_par_iter()
            .map(|i| self.param_gradient(inputs.row(i), upstream.row(i)))
            .collect();
        parts
            .into_iter()
            .fold(Array1::zeros(self.num_params()), |acc, g| acc + g)
    }

    fn batch_forward(&self, inputs: ArrayView2<'_, T>) -> Array2<T> {
        let rows: Vec<Array1<T>> = (0..inputs.nrows())
            .into_par_iter()
            .map(|i| self.forward(inputs.row(i)))
            .collect();
        let mut out = Array2::zeros((inputs.nrows(), self.output_dim()));
        for (mut r, v) in out.axis_iter_mut(Axis(0)).zip(rows) {
            r.assign(&v);
        }
        out
    }

    /// `Θ(x, x') = Σ_o ∇_w f_o(x) · ∇_w f_o(x')` over the rows of `inputs`.
    fn empirical_ntk(&self, inputs: ArrayView2<'_, T>) -> Array2<T> {
        let n = inputs.nrows();
        let width = self.output_dim() * self.num_params();
        let rows: Vec<Array2<T>> = (0..n)
            .into_par_iter()
            .map(|i| self.param_jacobian(inputs.row(i)))
            .collect();
        let mut flat = Array2::zeros((n, width));
        for (mut r, j) in flat.axis_iter_mut(Axis(0)).zip(rows) {
            r.assign(&Array1::from_iter(j.iter().cloned()));
        }
        symmetrize(flat.dot(&flat.t()))
    }
}

fn symmetrize<T: Scalar>(a: Array2<T>) -> Array2<T> {
    let half = T::lit(0.5);
    (&a + &a.t()) * half
}

fn relu<T: Scalar>(v: &T) -> T {
    v.max(T::zero())
}

fn step<T: Scalar>(v: &T) -> T {
    if *v > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

/// Implements [`Differentiable`] from the `Network` forward pass and input Jacobian.
macro_rules! differentiable_via_network {
    ([$($gen:tt)*] $ty:ty, $input:expr, $output:expr) => {
        impl<$($gen)*> Differentiable<T> for $ty {
            fn input_dim(&self) -> usize {
                #[allow(clippy::redundant_closure_call)]
                ($input)(self)
            }

            fn output_dim(&self) -> usize {
                #[allow(clippy::redundant_closure_call)]
                ($output)(self)
            }

            fn evaluate(&self, x: ArrayView1<'_, T>) -> Result<Array1<T>> {
                Ok(self.forward(x))
            }

            fn jacobian(&self, x: ArrayView1<'_, T>) -> Result<Array2<T>> {
                Ok(self.input_jacobian(x))
            }
        }
    };
}

/// Standard deviation of the first-layer weights at initialisation.
pub const FINITE_NET_INIT_STD: f64 = 0.01;

/// Two-layer ReLU net `f(x) = m^{-1/2} A^T relu(W x)` with a frozen `±1` head `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteNet<T> {
    weights: Array2<T>,
    head: Array2<i8>,
}

impl<T: Scalar> FiniteNet<T> {
    /// `W ~ N(0, 0.01²)`, `A` uniform on `±1`, both from the init stream of `seed`.
    pub fn init(width: usize, input_dim: usize, outputs: usize, seed: u64) -> Result<Self> {
        if width == 0 || input_dim == 0 || outputs == 0 {
            return Err(Error::param(format!(
                "network sizes must be >= 1 (m = {width}, d = {input_dim}, k = {outputs})"
            )));
        }
        let mut rng = substream(seed, Stream::Init);
        let weights = Array2::from_shape_simple_fn((width, input_dim), || {
            gaussian::<T, _>(&mut rng, FINITE_NET_INIT_STD)
        });
        let head = Array2::from_shape_simple_fn((width, outputs), || rademacher(&mut rng));
        Ok(Self { weights, head })
    }

    pub fn from_parts(weights: Array2<T>, head: Array2<i8>) -> Result<Self> {
        if weights.nrows() != head.nrows() || weights.nrows() == 0 {
            return Err(Error::param("weights and head must share a nonzero width"));
        }
        if head.iter().any(|&a| a != 1 && a != -1) {
            return Err(Error::param("head entries must be +1 or -1"));
        }
        Ok(Self { weights, head })
    }

    pub fn width(&self) -> usize {
        self.weights.nrows()
    }

    pub fn weights(&self) -> ArrayView2<'_, T> {
        self.weights.view()
    }

    pub fn head(&self) -> ArrayView2<'_, i8> {
        self.head.view()
    }

    fn scale(&self) -> T {
        T::lit(self.width() as f64).sqrt().recip()
    }

    fn head_t(&self) -> Array2<T> {
        self.head.mapv(|a| T::lit(a as f64))
    }

    /// Same weights with the head negated.
    pub fn with_flipped_head(&self) -> Self {
        Self {
            weights: self.weights.clone(),
            head: self.head.mapv(|a| -a),
        }
    }

    pub fn same_architecture(&self, other: &Self) -> bool {
        self.weights.dim() == other.weights.dim() && self.head == other.head
    }

    /// Binary checkpoint: `NTKW`, u32 m/d/k, W row-major f64, A as i8 (all little-endian).
    pub fn to_bytes(&self) -> Vec<u8> {
        let (m, d) = self.weights.dim();
        let k = self.head.ncols();
        let mut out = Vec::with_capacity(16 + 8 * m * d + m * k);
        out.extend_from_slice(b"NTKW");
        for v in [m, d, k] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for w in self.weights.iter() {
            out.extend_from_slice(&w.as_f64().to_le_bytes());
        }
        out.extend(self.head.iter().map(|&a| a as u8));
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != b"NTKW" {
            return Err(Error::Format("not a network checkpoint (bad magic)".into()));
        }
        let read_u32 = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let (m, d, k) = (read_u32(4), read_u32(8), read_u32(12));
        let expected = 16 + 8 * m * d + m * k;
        if bytes.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint for m={m}, d={d}, k={k} should be {expected} bytes, got {}",
                bytes.len()
            )));
        }
        let w = bytes[16..16 + 8 * m * d]
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect::<Vec<_>>();
        let a = bytes[16 + 8 * m * d..].iter().map(|&b| b as i8).collect::<Vec<_>>();
        let weights = Array2::from_shape_vec((m, d), w).map_err(|e| Error::Format(e.to_string()))?;
        let head = Array2::from_shape_vec((m, k), a).map_err(|e| Error::Format(e.to_string()))?;
        Self::from_parts(weights, head).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn write_checkpoint(&self, path: &Path) -> Result<()> {
        fs::File::create(path)?.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_checkpoint(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

differentiable_via_network!([T: Scalar] FiniteNet<T>, |n: &FiniteNet<T>| n.weights.ncols(), |n: &FiniteNet<T>| n.head.ncols());

impl<T: Scalar> Network<T> for FiniteNet<T> {
    fn num_params(&self) -> usize {
        self.weights.len()
    }

    fn params(&self) -> Array1<T> {
        Array1::from_iter(self.weights.iter().cloned())
    }

    fn set_params(&mut self, params: ArrayView1<'_, T>) -> Result<()> {
        if params.len() != self.weights.len() {
            return Err(Error::param("parameter vector has the wrong length"));
        }
        for (w, &p) in self.weights.iter_mut().zip(params) {
            *w = p;
        }
        Ok(())
    }

    fn forward(&self, x: ArrayView1<'_, T>) -> Array1<T> {
        let act = self.weights.dot(&x).mapv(|v| relu(&v));
        self.head_t().t().dot(&act) * self.scale()
    }

    fn input_jacobian(&self, x: ArrayView1<'_, T>) -> Array2<T> {
        let mask = self.weights.dot(&x).mapv(|v| step(&v));
        let gated = self.head_t() * &mask.insert_axis(Axis(1));
        self.weights.t().dot(&gated) * self.scale()
    }

    fn param_jacobian(&self, x: ArrayView1<'_, T>) -> Array2<T> {
        let (m, d) = self.weights.dim();
        let k = self.head.ncols();
        let mask = self.weights.dot(&x).mapv(|v| step(&v));
        let mut jac = Array2::zeros((k, m * d));
        let c = self.scale();
        for o in 0..k {
            let mut row = jac.row_mut(o);
            for j in 0..m {
                let g = c * T::lit(self.head[[j, o]] as f64) * mask[j];
                if g != T::zero() {
                    row.slice_mut(s![j * d..(j + 1) * d]).assign(&x.mapv(|v| v * g));
                }
            }
        }
        jac
    }

    fn param_gradient(&self, x: ArrayView1<'_, T>, upstream: ArrayView1<'_, T>) -> Array1<T> {
        let mask = self.weights.dot(&x).mapv(|v| step(&v));
        let gate = self.head_t().dot(&upstream) * &mask * self.scale();
        let outer = gate.insert_axis(Axis(1)).dot(&x.insert_axis(Axis(0)));
        Array1::from_iter(outer.iter().cloned())
    }

    fn batch_param_gradient(&self, inputs: ArrayView2<'_, T>, upstream: ArrayView2<'_, T>) -> Array1<T> {
        // G = m^{-1/2} ((U A^T) ⊙ mask)^T X
        let mask = inputs.dot(&self.weights.t()).mapv(|v| step(&v));
        let gate = upstream.dot(&self.head_t().t()) * &mask * self.scale();
        let g = gate.t().dot(&inputs);
        Array1::from_iter(g.iter().cloned())
    }

    fn batch_forward(&self, inputs: ArrayView2<'_, T>) -> Array2<T> {
        let act = inputs.dot(&self.weights.t()).mapv(|v| relu(&v));
        act.dot(&self.head_t()) * self.scale()
    }

    /// Closed form `(k/m) (M M^T) ⊙ (X X^T)` with `M` the activation mask,
    /// using `A_jo² = 1`.
    fn empirical_ntk(&self, inputs: ArrayView2<'_, T>) -> Array2<T> {
        let mask = inputs.dot(&self.weights.t()).mapv(|v| step(&v));
        let k = T::lit(self.head.ncols() as f64);
        let gram = inputs.dot(&inputs.t());
        let shared = mask.dot(&mask.t());
        symmetrize(shared * gram * (k / T::lit(self.width() as f64)))
    }
}

/// Fully trainable ReLU perceptron with biases, He-initialised weights and a
/// linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    weights: Vec<Array2<T>>,
    biases: Vec<Array1<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// `sizes = [d, h_1, ..., h_L, k]`; weights `N(0, 2 / fan_in)`, zero biases.
    pub fn init(sizes: &[usize], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::param(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = substream(seed, Stream::Init);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let std = (2.0 / pair[0] as f64).sqrt();
            weights.push(Array2::from_shape_simple_fn((pair[1], pair[0]), || {
                gaussian::<T, _>(&mut rng, std)
            }));
            biases.push(Array1::zeros(pair[1]));
        }
        Ok(Self { weights, biases })
    }

    pub fn layer_sizes(&self) -> Vec<usize> {
        let mut s = vec![self.weights[0].ncols()];
        s.extend(self.weights.iter().map(|w| w.nrows()));
        s
    }

    /// Pre-activations and activations of a batch (rows are examples).
    fn forward_batch_cached(&self, x: ArrayView2<'_, T>) -> (Vec<Array2<T>>, Vec<Array2<T>>) {
        let last = self.weights.len() - 1;
        let mut acts = vec![x.to_owned()];
        let mut pres = Vec::new();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let h = acts[l].dot(&w.t()) + &b.view().insert_axis(Axis(0));
            let a = if l == last { h.clone() } else { h.mapv(|v| relu(&v)) };
            pres.push(h);
            acts.push(a);
        }
        (pres, acts)
    }

    /// Backpropagates the batch upstream gradient `u` (n x k); returns per-layer
    /// weight/bias gradients summed over rows and the input gradient rows.
    fn backward_batch(
        &self,
        pres: &[Array2<T>],
        acts: &[Array2<T>],
        upstream: ArrayView2<'_, T>,
    ) -> (Vec<Array2<T>>, Vec<Array1<T>>, Array2<T>) {
        let depth = self.weights.len();
        let mut gw = vec![Array2::zeros((0, 0)); depth];
        let mut gb = vec![Array1::zeros(0); depth];
        let mut delta = upstream.to_owned();
        for l in (0..depth).rev() {
            if l + 1 < depth {
                delta = delta * pres[l].mapv(|v| step(&v));
            }
            gw[l] = delta.t().dot(&acts[l]);
            gb[l] = delta.sum_axis(Axis(0));
            delta = delta.dot(&self.weights[l]);
        }
        (gw, gb, delta)
    }

    fn flatten(&self, gw: &[Array2<T>], gb: &[Array1<T>]) -> Array1<T> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in gw.iter().zip(gb) {
            out.extend(w.iter().cloned());
            out.extend(b.iter().cloned());
        }
        Array1::from_vec(out)
    }
}

differentiable_via_network!([T: Scalar] Mlp<T>, |n: &Mlp<T>| n.weights[0].ncols(), |n: &Mlp<T>| n.weights.last().unwrap().nrows());

impl<T: Scalar> Network<T> for Mlp<T> {
    fn num_params(&self) -> usize {
        self.weights.iter().zip(&self.biases).map(|(w, b)| w.len() + b.len()).sum()
    }

    fn params(&self) -> Array1<T> {
        self.flatten(&self.weights, &self.biases)
    }

    fn set_params(&mut self, params: ArrayView1<'_, T>) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::param("parameter vector has the wrong length"));
        }
        let mut it = params.iter();
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.iter_mut().chain(b.iter_mut()).for_each(|v| *v = *it.next().unwrap());
        }
        Ok(())
    }

    fn forward(&self, x: ArrayView1<'_, T>) -> Array1<T> {
        self.batch_forward(x.insert_axis(Axis(0))).row(0).to_owned()
    }

    fn batch_forward(&self, inputs: ArrayView2<'_, T>) -> Array2<T> {
        self.forward_batch_cached(inputs).1.pop().unwrap()
    }

    fn input_jacobian(&self, x: ArrayView1<'_, T>) -> Array2<T> {
        let k = self.output_dim();
        let xb = x.broadcast((k, x.len())).unwrap().to_owned();
        let (pres, acts) = self.forward_batch_cached(xb.view());
        let eye = Array2::<T>::eye(k);
        let (_, _, dx) = self.backward_batch(&pres, &acts, eye.view());
        dx.reversed_axes()
    }

    fn param_jacobian(&self, x: ArrayView1<'_, T>) -> Array2<T> {
        let k = self.output_dim();
        let (pres, acts) = self.forward_batch_cached(x.insert_axis(Axis(0)));
        let mut jac = Array2::zeros((k, self.num_params()));
        for o in 0..k {
            let mut u = Array2::zeros((1, k));
            u[[0, o]] = T::one();
            let (gw, gb, _) = self.backward_batch(&pres, &acts, u.view());
            jac.row_mut(o).assign(&self.flatten(&gw, &gb));
        }
        jac
    }

    fn param_gradient(&self, x: ArrayView1<'_, T>, upstream: ArrayView1<'_, T>) -> Array1<T> {
        self.batch_param_gradient(x.insert_axis(Axis(0)), upstream.insert_axis(Axis(0)))
    }

    fn batch_param_gradient(&self, inputs: ArrayView2<'_, T>, upstream: ArrayView2<'_, T>) -> Array1<T> {
        let (pres, acts) = self.forward_batch_cached(inputs);
        let (gw, gb, _) = self.backward_batch(&pres, &acts, upstream);
        self.flatten(&gw, &gb)
    }
}

/// First-order expansion of a network around its weights `w0`:
/// `f_lin(x; w) = f(x; w0) + J(x; w0)(w - w0)`.
#[derive(Debug, Clone)]
pub struct LinearizedNet<T, N> {
    base: N,
    offset: Array1<T>,
}

impl<T: Scalar, N: Network<T> + Clone> LinearizedNet<T, N> {
    pub fn new(base: &N) -> Self {
        Self {
            base: base.clone(),
            offset: Array1::zeros(base.num_params()),
        }
    }

    /// The network at the expansion point.
    pub fn base(&self) -> &N {
        &self.base
    }
}

differentiable_via_network!(
    [T: Scalar, N: Network<T> + Clone] LinearizedNet<T, N>,
    |n: &LinearizedNet<T, N>| n.base.input_dim(),
    |n: &LinearizedNet<T, N>| n.base.output_dim()
);

impl<T: Scalar, N: Network<T> + Clone> Network<T> for LinearizedNet<T, N> {
    fn num_params(&self) -> usize {
        self.base.num_params()
    }

    fn params(&self) -> Array1<T> {
        self.base.params() + &self.offset
    }

    fn set_params(&mut self, params: ArrayView1<'_, T>) -> Result<()> {
        if params.len() != self.base.num_params() {
            return Err(Error::param("parameter vector has the wrong length"));
        }
        self.offset = &params - &self.base.params();
        Ok(())
    }

    fn forward(&self, x: ArrayView1<'_, T>) -> Array1<T> {
        self.base.forward(x) + self.base.param_jacobian(x).dot(&self.offset)
    }

    /// `∂_x f(x; w0) + ∂_x [J(x; w0) Δw]`. The second term is the derivative of
    /// `∂_x f(x; w0 + sΔw)` at `s = 0`, taken by central differences in `s`.
    fn input_jacobian(&self, x: ArrayView1<'_, T>) -> Array2<T> {
        let j0 = self.base.input_jacobian(x);
        let off = self.offset.dot(&self.offset).sqrt();
        if off == T::zero() {
            return j0;
        }
        let w0 = self.base.params();
        let h = T::lit(1e-5) * w0.dot(&w0).sqrt().max(T::one()) / off;
        let shifted = |s: T| {
            let mut net = self.base.clone();
            net.set_params((&w0 + &(&self.offset * s)).view())
                .expect("parameter length is fixed");
            net.input_jacobian(x)
        };
        j0 + (shifted(h) - shifted(-h)) / (h + h)
    }

    fn param_jacobian(&self, x: ArrayView1<'_, T>) -> Array2<T> {
        self.base.param_jacobian(x)
    }

    fn param_gradient(&self, x: ArrayView1<'_, T>, upstream: ArrayView1<'_, T>) -> Array1<T> {
        self.base.param_gradient(x, upstream)
    }

    fn batch_param_gradient(&self, inputs: ArrayView2<'_, T>, upstream: ArrayView2<'_, T>) -> Array1<T> {
        self.base.batch_param_gradient(inputs, upstream)
    }

    fn empirical_ntk(&self, inputs: ArrayView2<'_, T>) -> Array2<T> {
        self.base.empirical_ntk(inputs)
    }
}

/// `x ↦ f(x; W) - f(x; W_init)`.
pub struct Centered<'a, N> {
    pub net: &'a N,
    pub init: &'a N,
}

impl<T: Scalar, N: Network<T>> Differentiable<T> for Centered<'_, N> {
    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.net.output_dim()
    }

    fn evaluate(&self, x: ArrayView1<'_, T>) -> Result<Array1<T>> {
        Ok(self.net.forward(x) - self.init.forward(x))
    }

    fn jacobian(&self, x: ArrayView1<'_, T>) -> Result<Array2<T>> {
        Ok(self.net.input_jacobian(x) - self.init.input_jacobian(x))
    }
}

/// `f(x; W) - f(x; W_init)` for two nets sharing the frozen head.
pub fn centered_prediction<T: Scalar>(
    net: &FiniteNet<T>,
    net_init: &FiniteNet<T>,
    x: ArrayView1<'_, T>,
) -> Result<Array1<T>> {
    if !net.same_architecture(net_init) {
        return Err(Error::param("centered prediction needs nets with equal shapes and head"));
    }
    Ok(net.forward(x) - net_init.forward(x))
}

pub fn init_net<T: Scalar>(width: usize, input_dim: usize, outputs: usize, seed: u64) -> Result<FiniteNet<T>> {
    FiniteNet::init(width, input_dim, outputs, seed)
}

/// Cosine similarity of two vectors; `None` if either has zero norm.
pub fn cosine<T: Scalar>(a: ArrayView1<'_, T>, b: ArrayView1<'_, T>) -> Option<f64> {
    let na = a.dot(&a).sqrt().as_f64();
    let nb = b.dot(&b).sqrt().as_f64();
    if na == 0.0 || nb == 0.0 || !na.is_finite() || !nb.is_finite() {
        return None;
    }
    Some((a.dot(&b).as_f64() / (na * nb)).clamp(-1.0, 1.0))
}

/// Per-example cosine between the input gradient of the cross-entropy of the
/// centered network and that of the kernel predictor at `t = epoch_to_time · epoch`.
/// Examples with a vanishing gradient are `None`.
pub fn gradient_cosine_similarity<T: Scalar, N: Network<T>>(
    net: &N,
    net_init: &N,
    predictor: &Predictor<T>,
    ds: &Dataset<T>,
    epoch: usize,
    epoch_to_time: T,
) -> Result<Vec<Option<f64>>> {
    if !(epoch_to_time > T::zero()) {
        return Err(Error::param("epoch_to_time must be positive"));
    }
    let k = net.output_dim();
    if predictor.output_dim() != k {
        return Err(Error::param(format!(
            "network has {k} outputs but the predictor has {}",
            predictor.output_dim()
        )));
    }
    let horizon = Horizon::Finite(epoch_to_time * T::lit(epoch as f64));
    let centered = Centered { net, init: net_init };
    let view = predictor.at(horizon);
    (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let x = ds.input(i);
            let target = target_row::<T>(ds.labels()[i], k);
            let (_, g_net) = crate::attacks::loss_input_gradient(&centered, x, target.view(), Loss::CrossEntropy)?;
            let (_, g_ker) = crate::attacks::loss_input_gradient(&view, x, target.view(), Loss::CrossEntropy)?;
            Ok(cosine(g_net.view(), g_ker.view()))
        })
        .collect()
}

/// Mean over defined entries; `None` if none are defined.
pub fn defined_mean(values: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = values.iter().flatten().cloned().collect();
    (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Standard,
    AdvFgsm,
    AdvPgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Batching {
    FullBatch,
    Minibatch(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    pub learning_rate: T,
    pub epochs: usize,
    pub mode: TrainMode,
    /// Attack used to build training inputs in adversarial modes.
    pub attack: Option<AttackConfig<T>>,
    pub batch: Batching,
    pub seed: u64,
    /// Training objective, summed over the batch.
    pub loss: Loss,
    /// Epochs at which parameters are stored in the trace.
    pub checkpoint_epochs: Vec<usize>,
    /// Attack for the robust validation accuracy column; `None` leaves it NaN.
    pub robust_eval: Option<AttackConfig<T>>,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self {
            learning_rate: T::lit(1e-2),
            epochs: 100,
            mode: TrainMode::Standard,
            attack: None,
            batch: Batching::FullBatch,
            seed: 0,
            loss: Loss::SquaredError,
            checkpoint_epochs: Vec::new(),
            robust_eval: None,
        }
    }
}

impl<T: Scalar> TrainConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= T::zero()) || !self.learning_rate.is_finite() {
            return Err(Error::param("learning rate must be finite and >= 0"));
        }
        if let Batching::Minibatch(0) = self.batch {
            return Err(Error::param("minibatch size must be >= 1"));
        }
        match (self.mode, &self.attack) {
            (TrainMode::Standard, _) => {}
            (_, None) => return Err(Error::param("adversarial training needs an attack config")),
            (_, Some(a)) => {
                a.validate()?;
            }
        }
        if let Some(a) = &self.robust_eval {
            a.validate()?;
        }
        Ok(())
    }

    /// The attack actually run during training (one step for FGSM mode).
    fn training_attack(&self) -> Option<AttackConfig<T>> {
        match self.mode {
            TrainMode::Standard => None,
            TrainMode::AdvFgsm => self.attack.map(|a| AttackConfig {
                steps: 1,
                step_size: a.epsilon,
                ..a
            }),
            TrainMode::AdvPgd => self.attack,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub robust_val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainTrace<T> {
    pub records: Vec<EpochRecord>,
    pub checkpoints: Vec<(usize, Array1<T>)>,
}

impl<T: Scalar> TrainTrace<T> {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,loss,train_acc,val_acc,robust_val_acc\n");
        for r in &self.records {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.epoch, r.loss, r.train_acc, r.val_acc, r.robust_val_acc
            ));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv())?;
        Ok(())
    }
}

fn check_compatible<T: Scalar, N: Network<T>>(net: &N, ds: &Dataset<T>) -> Result<()> {
    if net.input_dim() != ds.dim() {
        return Err(Error::param(format!(
            "network expects {} inputs, dataset has {}",
            net.input_dim(),
            ds.dim()
        )));
    }
    let k = net.output_dim();
    let expect = match ds.encoding() {
        LabelEncoding::SignedBinary => 1,
        LabelEncoding::OneHot => ds.num_classes(),
    };
    if k != expect {
        return Err(Error::param(format!(
            "network has {k} outputs, dataset labels need {expect}"
        )));
    }
    Ok(())
}

/// Summed loss over all rows.
pub fn dataset_loss<T: Scalar, N: Network<T>>(net: &N, inputs: ArrayView2<'_, T>, targets: ArrayView2<'_, T>, loss: Loss) -> T {
    let f = net.batch_forward(inputs);
    f.outer_iter()
        .zip(targets.outer_iter())
        .map(|(fi, yi)| loss.value(fi, yi))
        .fold(T::zero(), |a, b| a + b)
}

/// Replaces each row by its attacked version against the current net.
fn attack_rows<T: Scalar, N: Network<T>>(
    net: &N,
    inputs: ArrayView2<'_, T>,
    targets: ArrayView2<'_, T>,
    loss: Loss,
    cfg: &AttackConfig<T>,
) -> Result<Array2<T>> {
    let rows: Vec<Array1<T>> = (0..inputs.nrows())
        .into_par_iter()
        .map(|i| {
            let p = gradient_attack(net, inputs.row(i), targets.row(i), loss, cfg)?;
            Ok(p.apply(inputs.row(i)))
        })
        .collect::<Result<_>>()?;
    let mut out = Array2::zeros(inputs.raw_dim());
    for (mut r, v) in out.axis_iter_mut(Axis(0)).zip(rows) {
        r.assign(&v);
    }
    Ok(out)
}

/// One gradient step on `(inputs, targets)`; returns the batch loss before the step.
fn gradient_step<T: Scalar, N: Network<T>>(
    net: &mut N,
    inputs: ArrayView2<'_, T>,
    targets: ArrayView2<'_, T>,
    cfg: &TrainConfig<T>,
) -> Result<T> {
    let f = net.batch_forward(inputs);
    let mut upstream = Array2::zeros(f.raw_dim());
    let mut total = T::zero();
    for ((fi, yi), mut ui) in f.outer_iter().zip(targets.outer_iter()).zip(upstream.outer_iter_mut()) {
        total += cfg.loss.value(fi, yi);
        ui.assign(&cfg.loss.output_gradient(fi, yi));
    }
    if cfg.learning_rate != T::zero() {
        let g = net.batch_param_gradient(inputs, upstream.view());
        let mut w = net.params();
        w.scaled_add(-cfg.learning_rate, &g);
        net.set_params(w.view())?;
    }
    Ok(total)
}

pub fn train<T: Scalar, N: Network<T>>(
    net: &mut N,
    train_set: &Dataset<T>,
    val: Option<&Dataset<T>>,
    cfg: &TrainConfig<T>,
) -> Result<TrainTrace<T>> {
    train_observed(net, train_set, val, cfg, &mut |_, _| Ok(()))
}

/// Gradient descent with `observer(epoch, net)` called before training
/// (epoch 0) and after every epoch.
pub fn train_observed<T: Scalar, N: Network<T>>(
    net: &mut N,
    train_set: &Dataset<T>,
    val: Option<&Dataset<T>>,
    cfg: &TrainConfig<T>,
    observer: &mut dyn FnMut(usize, &N) -> Result<()>,
) -> Result<TrainTrace<T>> {
    cfg.validate()?;
    check_compatible(net, train_set)?;
    if let Some(v) = val {
        check_compatible(net, v)?;
    }
    let inputs = train_set.inputs();
    let targets = train_set.label_matrix();
    let attack = cfg.training_attack();
    let mut batch_rng = substream(cfg.seed, Stream::Batch);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let initial = dataset_loss(net, inputs, targets.view(), cfg.loss).as_f64();
    let limit = 1e6 * initial.max(f64::MIN_POSITIVE);
    let mut trace = TrainTrace::default();
    observer(0, net)?;
    if cfg.checkpoint_epochs.contains(&0) {
        trace.checkpoints.push((0, net.params()));
    }

    for epoch in 1..=cfg.epochs {
        let batches: Vec<Vec<usize>> = match cfg.batch {
            Batching::FullBatch => vec![order.clone()],
            Batching::Minibatch(size) => {
                order.shuffle(&mut batch_rng);
                order.chunks(size).map(|c| c.to_vec()).collect()
            }
        };
        for idx in &batches {
            let xb = inputs.select(Axis(0), idx);
            let yb = targets.select(Axis(0), idx);
            let xb = match &attack {
                Some(a) => attack_rows(net, xb.view(), yb.view(), cfg.loss, a)?,
                None => xb,
            };
            let batch_loss = gradient_step(net, xb.view(), yb.view(), cfg)?.as_f64();
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch, loss: batch_loss });
            }
        }
        let loss = dataset_loss(net, inputs, targets.view(), cfg.loss).as_f64();
        if !loss.is_finite() || loss > limit {
            return Err(Error::Divergence { epoch, loss });
        }
        let (val_acc, robust_val_acc) = match val {
            Some(v) if !v.is_empty() => (
                clean_accuracy(net, v)?,
                match &cfg.robust_eval {
                    Some(a) => robust_accuracy(net, v, a)?,
                    None => f64::NAN,
                },
            ),
            _ => (f64::NAN, f64::NAN),
        };
        trace.records.push(EpochRecord {
            epoch,
            loss,
            train_acc: clean_accuracy(net, train_set)?,
            val_acc,
            robust_val_acc,
        });
        if cfg.checkpoint_epochs.contains(&epoch) {
            trace.checkpoints.push((epoch, net.params()));
        }
        observer(epoch, net)?;
    }
    Ok(trace)
}

/// Freezes the Jacobian of `net` at its current weights and keeps training the
/// linear model; attacks during adversarial modes are generated from it too.
pub fn linearize_and_continue<T: Scalar, N: Network<T> + Clone>(
    net: &N,
    train_set: &Dataset<T>,
    val: Option<&Dataset<T>>,
    cfg: &TrainConfig<T>,
) -> Result<(LinearizedNet<T, N>, TrainTrace<T>)> {
    let mut lin = LinearizedNet::new(net);
    let trace = train(&mut lin, train_set, val, cfg)?;
    Ok((lin, trace))
}
