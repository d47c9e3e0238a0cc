//! Eigen-features of the converged kernel predictor.
//!
//! With `Θ = Σ λ_i v_i v_i^T`, the predictor splits as
//! `f_∞(x) = Σ_i f^(i)(x)` with `f^(i)(x) = λ_i^{-1} Θ(x, X)^T v_i v_i^T Y`.
//! Each feature is scored for usefulness (clean validation accuracy of its
//! induced classifier) and robustness (accuracy under an attack on itself).

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;

use crate::attacks::{gradient_attack, target_row, AttackConfig, Differentiable, Loss};
use crate::datasets::{classify, Dataset};
use crate::error::{Error, Result};
use crate::regression::{Predictor, EIGEN_FLOOR};
use crate::scalar::{sigmoid, Scalar};

/// One spectral component `f^(i)` of a predictor; `index` is 1-based.
#[derive(Debug, Clone)]
pub struct FeatureFunction<'a, T> {
    predictor: &'a Predictor<T>,
    index: usize,
    eigenvalue: T,
    projection: Array2<T>,
}

impl<'a, T: Scalar> FeatureFunction<'a, T> {
    pub fn new(predictor: &'a Predictor<T>, index: usize) -> Result<Self> {
        let n = predictor.n();
        if index == 0 || index > n {
            return Err(Error::param(format!("feature index {index} outside [1, {n}]")));
        }
        let eigen = predictor.eigen();
        let lambda = eigen.eigenvalues()[index - 1];
        let top = eigen.eigenvalues()[0];
        if !(lambda > T::lit(EIGEN_FLOOR) * top) {
            return Err(Error::Numerical(format!(
                "feature {index}: eigenvalue {lambda:e} is below the floor {EIGEN_FLOOR:e} x {top:e}"
            )));
        }
        let v = eigen.eigenvector(index - 1);
        let coeff = v.dot(&predictor.labels());
        let projection = v
            .insert_axis(Axis(1))
            .dot(&coeff.insert_axis(Axis(0)));
        Ok(Self {
            predictor,
            index,
            eigenvalue: lambda,
            projection,
        })
    }

    /// All `n` features in eigenvalue order.
    pub fn all(predictor: &'a Predictor<T>) -> Result<Vec<Self>> {
        (1..=predictor.n()).map(|i| Self::new(predictor, i)).collect()
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn eigenvalue(&self) -> T {
        self.eigenvalue
    }

    /// `v_i v_i^T Y`, `n x k`.
    pub fn projection(&self) -> &Array2<T> {
        &self.projection
    }

    /// Same feature with the projection multiplied by `factor`.
    pub fn scaled(&self, factor: T) -> Self {
        Self {
            projection: &self.projection * factor,
            ..self.clone()
        }
    }

    pub fn eval(&self, x: ArrayView1<'_, T>) -> Result<Array1<T>> {
        let kx = self.predictor.kernel().cross(x, self.predictor.train_inputs())?;
        Ok(kx.dot(&self.projection) / self.eigenvalue)
    }

    /// `d x k` input Jacobian.
    pub fn gradient(&self, x: ArrayView1<'_, T>) -> Result<Array2<T>> {
        let jac = self
            .predictor
            .kernel()
            .cross_jacobian(x, self.predictor.train_inputs())?;
        Ok(jac.t().dot(&self.projection) / self.eigenvalue)
    }

    /// Gradient of the output coordinate for `class` (the only one when binary).
    pub fn gradient_image(&self, x: ArrayView1<'_, T>, class: usize) -> Result<Array1<T>> {
        let g = self.gradient(x)?;
        let col = if g.ncols() == 1 { 0 } else { class };
        if col >= g.ncols() {
            return Err(Error::param(format!("class {class} out of range")));
        }
        Ok(g.column(col).to_owned())
    }
}

impl<T: Scalar> Differentiable<T> for FeatureFunction<'_, T> {
    fn input_dim(&self) -> usize {
        self.predictor.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.projection.ncols()
    }

    fn evaluate(&self, x: ArrayView1<'_, T>) -> Result<Array1<T>> {
        self.eval(x)
    }

    fn jacobian(&self, x: ArrayView1<'_, T>) -> Result<Array2<T>> {
        self.gradient(x)
    }
}

/// Coefficients `α_i = (σ(f_∞) - ŷ) / (σ(f^(i)) - ŷ)` with `ŷ = (y + 1) / 2`,
/// so that `Σ α_i ∇L(f^(i)) = ∇L(f_∞)` for the logistic loss.
///
/// `f_∞` is taken as the sum of the features.
pub fn gradient_decomposition_coeffs<T: Scalar>(p: &Predictor<T>, x: ArrayView1<'_, T>, y: T) -> Result<Array1<T>> {
    if p.output_dim() != 1 {
        return Err(Error::param("gradient decomposition needs a scalar-output predictor"));
    }
    let y_hat = (y + T::one()) * T::lit(0.5);
    let values = FeatureFunction::all(p)?
        .iter()
        .map(|f| f.eval(x).map(|v| v[0]))
        .collect::<Result<Vec<T>>>()?;
    let total: T = values.iter().fold(T::zero(), |a, &b| a + b);
    let numerator = sigmoid(total) - y_hat;
    values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let den = sigmoid(v) - y_hat;
            if den.abs() < T::lit(1e-12) {
                return Err(Error::Numerical(format!(
                    "feature {}: decomposition denominator {den:e} vanishes",
                    i + 1
                )));
            }
            Ok(numerator / den)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureScore {
    pub index: usize,
    pub eigenvalue: f64,
    pub usefulness: f64,
    pub robustness: f64,
    pub useful_flag: bool,
    pub epsilon: f64,
}

/// Attack used to score robustness: one step when `steps == 1`, otherwise
/// sign-gradient iterations with step `2.5 ε / steps`.
pub fn feature_attack_config<T: Scalar>(epsilon: T, steps: usize) -> AttackConfig<T> {
    if steps <= 1 {
        AttackConfig::one_step(epsilon)
    } else {
        AttackConfig::iterative(epsilon, steps, T::lit(2.5) * epsilon / T::lit(steps as f64))
    }
}

/// Clean and robust accuracy of one feature's classifier on `val`.
fn score_one<T: Scalar>(f: &FeatureFunction<'_, T>, val: &Dataset<T>, cfg: &AttackConfig<T>) -> Result<(f64, f64)> {
    let k = f.output_dim();
    let mut clean = 0usize;
    let mut robust = 0usize;
    for i in 0..val.len() {
        let x = val.input(i);
        let label = val.labels()[i];
        let ok = classify(f.eval(x)?.view()) == label;
        clean += usize::from(ok);
        if ok {
            let target = target_row::<T>(label, k);
            let pert = if cfg.epsilon == T::zero() {
                None
            } else {
                Some(gradient_attack(f, x, target.view(), Loss::CrossEntropy, cfg)?)
            };
            let still = match pert {
                None => true,
                Some(p) => classify(f.eval(p.apply(x).view())?.view()) == label,
            };
            robust += usize::from(still);
        }
    }
    let n = val.len() as f64;
    Ok((clean as f64 / n, robust as f64 / n))
}

fn score_list<T: Scalar>(features: &[FeatureFunction<'_, T>], val: &Dataset<T>, epsilon: T, steps: usize) -> Result<Vec<FeatureScore>> {
    if val.is_empty() {
        return Err(Error::param("feature scoring needs a nonempty validation set"));
    }
    if !(epsilon >= T::zero()) {
        return Err(Error::param("epsilon must be >= 0"));
    }
    let cfg = feature_attack_config(epsilon, steps);
    let majority = val.majority_rate();
    features
        .par_iter()
        .map(|f| {
            let (usefulness, robustness) = score_one(f, val, &cfg)?;
            Ok(FeatureScore {
                index: f.index(),
                eigenvalue: f.eigenvalue().as_f64(),
                usefulness,
                robustness,
                useful_flag: usefulness > majority,
                epsilon: epsilon.as_f64(),
            })
        })
        .collect()
}

/// Scores every feature of `p` on `val`.
pub fn score_features<T: Scalar>(p: &Predictor<T>, val: &Dataset<T>, epsilon: T, attack_steps: usize) -> Result<Vec<FeatureScore>> {
    score_list(&FeatureFunction::all(p)?, val, epsilon, attack_steps)
}

/// Scores only the `count` leading features.
pub fn score_top_features<T: Scalar>(
    p: &Predictor<T>,
    val: &Dataset<T>,
    epsilon: T,
    attack_steps: usize,
    count: usize,
) -> Result<Vec<FeatureScore>> {
    let features = (1..=count.min(p.n()))
        .map(|i| FeatureFunction::new(p, i))
        .collect::<Result<Vec<_>>>()?;
    score_list(&features, val, epsilon, attack_steps)
}

/// Scores a given set of (possibly rescaled) features.
pub fn score_feature_set<T: Scalar>(
    features: &[FeatureFunction<'_, T>],
    val: &Dataset<T>,
    epsilon: T,
    attack_steps: usize,
) -> Result<Vec<FeatureScore>> {
    score_list(features, val, epsilon, attack_steps)
}

/// Feature indices (1-based) by decreasing robustness, then decreasing
/// usefulness, then increasing index.
pub fn robustness_ranking(scores: &[FeatureScore]) -> Vec<usize> {
    let mut s: Vec<&FeatureScore> = scores.iter().collect();
    s.sort_by(|a, b| {
        b.robustness
            .total_cmp(&a.robustness)
            .then(b.usefulness.total_cmp(&a.usefulness))
            .then(a.index.cmp(&b.index))
    });
    s.into_iter().map(|f| f.index).collect()
}

/// Kernel machine using only the `r` first features of `ranking` (1-based),
/// with the pseudo-inverse of `Σ_{i ∈ top r} λ_i v_i v_i^T`.
pub fn filtered_predictor<T: Scalar>(p: &Predictor<T>, ranking: &[usize], r: usize) -> Result<Predictor<T>> {
    let n = p.n();
    if r == 0 || r > n || r > ranking.len() {
        return Err(Error::param(format!(
            "filter size {r} outside [1, {}]",
            n.min(ranking.len())
        )));
    }
    let keep = ranking[..r]
        .iter()
        .map(|&i| {
            if i == 0 || i > n {
                Err(Error::param(format!("feature index {i} outside [1, {n}]")))
            } else {
                Ok(i - 1)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    p.restricted_to(keep)
}

/// Writes `index,eigenvalue,usefulness,robustness,useful_flag`.
pub fn write_scores_csv(scores: &[FeatureScore], path: &Path) -> Result<()> {
    let mut out = String::from("index,eigenvalue,usefulness,robustness,useful_flag\n");
    for s in scores {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            s.index, s.eigenvalue, s.usefulness, s.robustness, s.useful_flag
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

/// Writes one row `index,v0,...,v{d-1}` per feature gradient image.
pub fn write_gradient_images_csv<T: Scalar>(images: &[(usize, Array1<T>)], path: &Path) -> Result<()> {
    let d = images.first().map_or(0, |(_, g)| g.len());
    let mut out = String::from("index");
    for j in 0..d {
        out.push_str(&format!(",v{j}"));
    }
    out.push('\n');
    for (i, g) in images {
        out.push_str(&i.to_string());
        for v in g {
            out.push_str(&format!(",{}", v.as_f64()));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
