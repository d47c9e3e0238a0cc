//! l∞ adversarial perturbations against kernel predictors and finite networks.
//!
//! Gradient attacks (one-step sign attack and its projected iterative version)
//! work on anything implementing [`Differentiable`]. The Taylor attacks use the
//! first-order expansion `f(x + η) ≈ f(x) + η^T z` of the converged kernel
//! predictor, with `z = D^T Θ^{-1} Y`.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;

use crate::datasets::{classify, signed_label, Dataset, LabelEncoding};
use crate::error::{Error, Result};
use crate::regression::{Horizon, KernelView, Predictor};
use crate::scalar::{sigmoid, softplus, Scalar};

/// A vector-valued model with an input Jacobian.
pub trait Differentiable<T: Scalar>: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn evaluate(&self, x: ArrayView1<'_, T>) -> Result<Array1<T>>;
    /// `d x k` matrix whose column `o` is `∇_x f_o(x)`.
    fn jacobian(&self, x: ArrayView1<'_, T>) -> Result<Array2<T>>;
}

impl<T: Scalar> Differentiable<T> for KernelView<'_, T> {
    fn input_dim(&self) -> usize {
        self.predictor.input_dim()
    }

    fn output_dim(&self) -> usize {
        self.predictor.output_dim()
    }

    fn evaluate(&self, x: ArrayView1<'_, T>) -> Result<Array1<T>> {
        self.predictor.predict(x, self.horizon)
    }

    fn jacobian(&self, x: ArrayView1<'_, T>) -> Result<Array2<T>> {
        self.predictor.prediction_input_gradient(x, self.horizon)
    }
}

/// Loss on model outputs given an encoded target row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Loss {
    /// `½ |f - y|²`.
    SquaredError,
    /// Sigmoid cross-entropy for a single ±1 output, softmax cross-entropy otherwise.
    #[default]
    CrossEntropy,
}

impl Loss {
    pub fn value<T: Scalar>(&self, f: ArrayView1<'_, T>, target: ArrayView1<'_, T>) -> T {
        match self {
            Loss::SquaredError => {
                f.iter().zip(target).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() * T::lit(0.5)
            }
            Loss::CrossEntropy if f.len() == 1 => softplus(-target[0] * f[0]),
            Loss::CrossEntropy => {
                let m = f.iter().cloned().fold(T::neg_infinity(), T::max);
                let lse = m + f.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
                lse - f.dot(&target)
            }
        }
    }

    /// `∂L / ∂f`.
    pub fn output_gradient<T: Scalar>(&self, f: ArrayView1<'_, T>, target: ArrayView1<'_, T>) -> Array1<T> {
        match self {
            Loss::SquaredError => &f - &target,
            Loss::CrossEntropy if f.len() == 1 => {
                let y_hat = (target[0] + T::one()) * T::lit(0.5);
                Array1::from_elem(1, sigmoid(f[0]) - y_hat)
            }
            Loss::CrossEntropy => &softmax(f) - &target,
        }
    }
}

/// Softmax with max-logit subtraction.
pub fn softmax<T: Scalar>(f: ArrayView1<'_, T>) -> Array1<T> {
    let m = f.iter().cloned().fold(T::neg_infinity(), T::max);
    let e = f.mapv(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

/// Encoded target for class `class` with `k` outputs (±1 when `k == 1`).
pub fn target_row<T: Scalar>(class: usize, k: usize) -> Array1<T> {
    if k == 1 {
        Array1::from_elem(1, signed_label(class))
    } else {
        let mut t = Array1::zeros(k);
        t[class] = T::one();
        t
    }
}

/// Loss value and its gradient with respect to the input.
pub fn loss_input_gradient<T: Scalar, M: Differentiable<T> + ?Sized>(
    model: &M,
    x: ArrayView1<'_, T>,
    target: ArrayView1<'_, T>,
    loss: Loss,
) -> Result<(T, Array1<T>)> {
    let f = model.evaluate(x)?;
    let jac = model.jacobian(x)?;
    let up = loss.output_gradient(f.view(), target);
    Ok((loss.value(f.view(), target), jac.dot(&up)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig<T> {
    pub epsilon: T,
    pub steps: usize,
    /// Ignored when `steps == 1`.
    pub step_size: T,
    pub clamp_box: Option<(T, T)>,
}

impl<T: Scalar> AttackConfig<T> {
    pub fn one_step(epsilon: T) -> Self {
        Self {
            epsilon,
            steps: 1,
            step_size: epsilon,
            clamp_box: None,
        }
    }

    pub fn iterative(epsilon: T, steps: usize, step_size: T) -> Self {
        Self {
            epsilon,
            steps,
            step_size,
            clamp_box: None,
        }
    }

    pub fn with_clamp(mut self, lo: T, hi: T) -> Self {
        self.clamp_box = Some((lo, hi));
        self
    }

    /// Checks the configuration; returns warnings for legal but unusual settings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if !(self.epsilon >= T::zero()) || !self.epsilon.is_finite() {
            return Err(Error::param(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::param("attack steps must be >= 1"));
        }
        if self.steps > 1 && !(self.step_size > T::zero()) {
            return Err(Error::param("iterative attacks need a positive step size"));
        }
        if let Some((lo, hi)) = self.clamp_box {
            if !(lo < hi) {
                return Err(Error::param("clamp box must satisfy lo < hi"));
            }
        }
        let mut warnings = Vec::new();
        if self.steps > 1 && self.step_size > self.epsilon {
            warnings.push(format!(
                "step size {} exceeds epsilon {}",
                self.step_size, self.epsilon
            ));
        }
        Ok(warnings)
    }
}

/// An l∞-bounded input perturbation.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation<T> {
    pub delta: Array1<T>,
    pub budget: T,
}

impl<T: Scalar> Perturbation<T> {
    pub fn zero(dim: usize, budget: T) -> Self {
        Self {
            delta: Array1::zeros(dim),
            budget,
        }
    }

    pub fn linf_norm(&self) -> T {
        self.delta.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn apply(&self, x: ArrayView1<'_, T>) -> Array1<T> {
        &x + &self.delta
    }
}

/// Projects `delta` onto the box (if any) and then the ε-ball, in place.
fn project<T: Scalar>(delta: &mut Array1<T>, x: ArrayView1<'_, T>, epsilon: T, clamp: Option<(T, T)>) {
    for (d, &xi) in delta.iter_mut().zip(x.iter()) {
        let mut v = *d;
        if let Some((lo, hi)) = clamp {
            v = (xi + v).max(lo).min(hi) - xi;
        }
        *d = v.max(-epsilon).min(epsilon);
    }
}

/// Projected sign-gradient ascent on `loss`, starting at `x` (no random start).
///
/// With `steps == 1` this is the one-step attack `ε · sign(∇_x L)`.
pub fn gradient_attack<T: Scalar, M: Differentiable<T> + ?Sized>(
    model: &M,
    x: ArrayView1<'_, T>,
    target: ArrayView1<'_, T>,
    loss: Loss,
    cfg: &AttackConfig<T>,
) -> Result<Perturbation<T>> {
    cfg.validate()?;
    let alpha = if cfg.steps == 1 { cfg.epsilon } else { cfg.step_size };
    let mut delta = Array1::zeros(x.len());
    for _ in 0..cfg.steps {
        let probe = &x + &delta;
        let (_, g) = loss_input_gradient(model, probe.view(), target, loss)?;
        delta.zip_mut_with(&g, |d, &gi| *d += alpha * gi.sign0());
        project(&mut delta, x, cfg.epsilon, cfg.clamp_box);
    }
    Ok(Perturbation {
        delta,
        budget: cfg.epsilon,
    })
}

pub fn fgsm<T: Scalar, M: Differentiable<T> + ?Sized>(
    model: &M,
    x: ArrayView1<'_, T>,
    target: ArrayView1<'_, T>,
    loss: Loss,
    epsilon: T,
    clamp: Option<(T, T)>,
) -> Result<Perturbation<T>> {
    let mut cfg = AttackConfig::one_step(epsilon);
    cfg.clamp_box = clamp;
    gradient_attack(model, x, target, loss, &cfg)
}

fn require_binary<T: Scalar>(p: &Predictor<T>) -> Result<()> {
    if p.output_dim() != 1 {
        return Err(Error::param(format!(
            "binary attack needs a scalar-output predictor, got {} outputs",
            p.output_dim()
        )));
    }
    Ok(())
}

fn require_multiclass<T: Scalar>(p: &Predictor<T>, class: usize) -> Result<()> {
    let k = p.output_dim();
    if k < 2 {
        return Err(Error::param("multiclass attack needs at least 2 outputs"));
    }
    if class >= k {
        return Err(Error::param(format!("class {class} out of range for {k} outputs")));
    }
    Ok(())
}

/// `δ = -y ε sign(∇_x f_t(x))` for a scalar kernel predictor and `y = ±1`.
pub fn fgsm_kernel_binary<T: Scalar>(
    p: &Predictor<T>,
    x: ArrayView1<'_, T>,
    y: T,
    horizon: Horizon<T>,
    epsilon: T,
) -> Result<Perturbation<T>> {
    require_binary(p)?;
    let grad = p.prediction_input_gradient(x, horizon)?;
    let delta = grad.column(0).mapv(|g| -y * epsilon * g.sign0());
    Ok(Perturbation { delta, budget: epsilon })
}

/// Softmax cross-entropy sign attack:
/// `ε sign(-∇f_y + Σ_r e^{f_r} ∇f_r / Σ_r e^{f_r})`, one Jacobian for all classes.
pub fn fgsm_kernel_multiclass<T: Scalar>(
    p: &Predictor<T>,
    x: ArrayView1<'_, T>,
    class: usize,
    horizon: Horizon<T>,
    epsilon: T,
) -> Result<Perturbation<T>> {
    require_multiclass(p, class)?;
    let f = p.predict(x, horizon)?;
    let jac = p.prediction_input_gradient(x, horizon)?;
    let weights = softmax(f.view());
    let mixed = jac.dot(&weights);
    let direction = &mixed - &jac.column(class);
    Ok(Perturbation {
        delta: direction.mapv(|g| epsilon * g.sign0()),
        budget: epsilon,
    })
}

/// Iterative attack on the kernel predictor's cross-entropy.
pub fn pgd_kernel<T: Scalar>(
    p: &Predictor<T>,
    x: ArrayView1<'_, T>,
    class: usize,
    horizon: Horizon<T>,
    cfg: &AttackConfig<T>,
) -> Result<Perturbation<T>> {
    let target = target_row(class, p.output_dim());
    gradient_attack(&p.at(horizon), x, target.view(), Loss::CrossEntropy, cfg)
}

/// Per-class first-order sensitivities `z_r = A^T Θ^{-1} Y_{:,r}` (`d x k`), row
/// `j` of `A` being `∇_x Θ(x, x_j)`.
///
/// `Θ^{-1} Y` comes from a direct solve rather than the eigensystem; restricted
/// predictors use their own pseudo-inverse.
pub fn taylor_directions<T: Scalar>(p: &Predictor<T>, x: ArrayView1<'_, T>) -> Result<Array2<T>> {
    if p.retained().is_some() {
        return p.prediction_input_gradient(x, Horizon::Infinite);
    }
    let a = p.kernel().cross_jacobian(x, p.train_inputs())?;
    Ok(a.t().dot(p.direct_coefficients()?.as_ref()))
}

/// `η = -ε y sign(A^T Θ^{-1} Y)`.
pub fn taylor_attack_binary<T: Scalar>(
    p: &Predictor<T>,
    x: ArrayView1<'_, T>,
    y: T,
    epsilon: T,
) -> Result<Perturbation<T>> {
    require_binary(p)?;
    let z = taylor_directions(p, x)?;
    Ok(Perturbation {
        delta: z.column(0).mapv(|v| -epsilon * y * v.sign0()),
        budget: epsilon,
    })
}

/// Pushes towards the competitor `r ≠ r*` with the largest `|z_r - z_{r*}|_1`
/// (lowest index on ties): `η = ε sign(z_r - z_{r*})`.
pub fn taylor_attack_max_l1<T: Scalar>(
    p: &Predictor<T>,
    x: ArrayView1<'_, T>,
    class: usize,
    epsilon: T,
) -> Result<Perturbation<T>> {
    require_multiclass(p, class)?;
    let z = taylor_directions(p, x)?;
    let own = z.column(class);
    let mut best: Option<(usize, T)> = None;
    for r in (0..z.ncols()).filter(|&r| r != class) {
        let gap: T = z.column(r).iter().zip(own).map(|(&a, &b)| (a - b).abs()).sum();
        if best.is_none_or(|(_, g)| gap > g) {
            best = Some((r, gap));
        }
    }
    let (r, _) = best.expect("at least one competitor");
    let diff = &z.column(r) - &own;
    Ok(Perturbation {
        delta: diff.mapv(|v| epsilon * v.sign0()),
        budget: epsilon,
    })
}

/// `η = ε sign(Σ_{r ≠ r*} (z_r - z_{r*}))`.
pub fn taylor_attack_sum_dz<T: Scalar>(
    p: &Predictor<T>,
    x: ArrayView1<'_, T>,
    class: usize,
    epsilon: T,
) -> Result<Perturbation<T>> {
    require_multiclass(p, class)?;
    let z = taylor_directions(p, x)?;
    let own = z.column(class).to_owned();
    let mut acc = Array1::<T>::zeros(z.nrows());
    for r in (0..z.ncols()).filter(|&r| r != class) {
        acc = acc + (&z.column(r) - &own);
    }
    Ok(Perturbation {
        delta: acc.mapv(|v| epsilon * v.sign0()),
        budget: epsilon,
    })
}

/// Attack selector for batch evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackKind {
    /// Sign-gradient attack on the cross-entropy; iterative when `steps > 1`.
    Gradient,
    TaylorBinary,
    TaylorMaxL1,
    TaylorSumDz,
}

/// Something that produces a perturbation for a labelled example.
pub trait Attacker<T: Scalar>: Sync {
    fn perturb(&self, x: ArrayView1<'_, T>, class: usize) -> Result<Perturbation<T>>;
}

/// Gradient attack against a differentiable model's own loss.
pub struct GradientAttacker<'a, T, M: ?Sized> {
    pub model: &'a M,
    pub loss: Loss,
    pub cfg: AttackConfig<T>,
}

impl<T: Scalar, M: Differentiable<T> + ?Sized> Attacker<T> for GradientAttacker<'_, T, M> {
    fn perturb(&self, x: ArrayView1<'_, T>, class: usize) -> Result<Perturbation<T>> {
        let target = target_row(class, self.model.output_dim());
        gradient_attack(self.model, x, target.view(), self.loss, &self.cfg)
    }
}

/// Taylor-expansion attacks built from a converged kernel predictor.
pub struct TaylorAttacker<'a, T> {
    pub predictor: &'a Predictor<T>,
    pub kind: AttackKind,
    pub cfg: AttackConfig<T>,
}

impl<T: Scalar> Attacker<T> for TaylorAttacker<'_, T> {
    fn perturb(&self, x: ArrayView1<'_, T>, class: usize) -> Result<Perturbation<T>> {
        let eps = self.cfg.epsilon;
        let mut p = match self.kind {
            AttackKind::TaylorBinary => taylor_attack_binary(self.predictor, x, signed_label(class), eps)?,
            AttackKind::TaylorMaxL1 => taylor_attack_max_l1(self.predictor, x, class, eps)?,
            AttackKind::TaylorSumDz => taylor_attack_sum_dz(self.predictor, x, class, eps)?,
            AttackKind::Gradient => {
                return pgd_kernel(self.predictor, x, class, Horizon::Infinite, &self.cfg);
            }
        };
        project(&mut p.delta, x, eps, self.cfg.clamp_box);
        Ok(p)
    }
}

/// One row of the attack CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackRecord<T> {
    pub example_id: usize,
    pub label: usize,
    pub clean_pred: usize,
    pub adv_pred: usize,
    pub loss_clean: T,
    pub loss_adv: T,
    pub linf_norm: T,
}

impl<T> AttackRecord<T> {
    /// Correct on the clean input and on the perturbed one.
    pub fn robust(&self) -> bool {
        self.clean_pred == self.label && self.adv_pred == self.label
    }
}

/// Attacks every example of `ds` with `attacker` and scores the result on `target`.
///
/// The loss columns use the target's cross-entropy.
pub fn attack_dataset<T: Scalar, A: Attacker<T> + ?Sized, M: Differentiable<T> + ?Sized>(
    attacker: &A,
    target: &M,
    ds: &Dataset<T>,
) -> Result<Vec<AttackRecord<T>>> {
    let k = target.output_dim();
    if (ds.encoding() == LabelEncoding::SignedBinary) != (k == 1) {
        return Err(Error::param(format!(
            "dataset encoding {:?} incompatible with a {k}-output model",
            ds.encoding()
        )));
    }
    (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let x = ds.input(i);
            let label = ds.labels()[i];
            let tgt = target_row::<T>(label, k);
            let pert = attacker.perturb(x, label)?;
            let adv = pert.apply(x);
            let f_clean = target.evaluate(x)?;
            let f_adv = target.evaluate(adv.view())?;
            Ok(AttackRecord {
                example_id: i,
                label,
                clean_pred: classify(f_clean.view()),
                adv_pred: classify(f_adv.view()),
                loss_clean: Loss::CrossEntropy.value(f_clean.view(), tgt.view()),
                loss_adv: Loss::CrossEntropy.value(f_adv.view(), tgt.view()),
                linf_norm: pert.linf_norm(),
            })
        })
        .collect()
}

/// Fraction of records that stay correctly classified under attack.
pub fn robust_fraction<T>(records: &[AttackRecord<T>]) -> f64 {
    if records.is_empty() {
        return 0.0;
    }
    records.iter().filter(|r| r.robust()).count() as f64 / records.len() as f64
}

/// Robust accuracy of `target` against perturbations from `attacker`.
pub fn robust_accuracy_against<T: Scalar, A: Attacker<T> + ?Sized, M: Differentiable<T> + ?Sized>(
    attacker: &A,
    target: &M,
    ds: &Dataset<T>,
) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::param("robust accuracy needs a nonempty evaluation set"));
    }
    Ok(robust_fraction(&attack_dataset(attacker, target, ds)?))
}

/// Robust accuracy of a model against its own gradient attack.
pub fn robust_accuracy<T: Scalar, M: Differentiable<T> + ?Sized>(
    model: &M,
    ds: &Dataset<T>,
    cfg: &AttackConfig<T>,
) -> Result<f64> {
    let attacker = GradientAttacker {
        model,
        loss: Loss::CrossEntropy,
        cfg: *cfg,
    };
    robust_accuracy_against(&attacker, model, ds)
}

/// Robust accuracy of a kernel predictor under any attack kind.
pub fn kernel_robust_accuracy<T: Scalar>(
    p: &Predictor<T>,
    horizon: Horizon<T>,
    ds: &Dataset<T>,
    kind: AttackKind,
    cfg: &AttackConfig<T>,
) -> Result<f64> {
    let view = p.at(horizon);
    match kind {
        AttackKind::Gradient => robust_accuracy(&view, ds, cfg),
        _ => robust_accuracy_against(
            &TaylorAttacker {
                predictor: p,
                kind,
                cfg: *cfg,
            },
            &view,
            ds,
        ),
    }
}

/// Clean classification accuracy of a model on `ds`.
pub fn clean_accuracy<T: Scalar, M: Differentiable<T> + ?Sized>(model: &M, ds: &Dataset<T>) -> Result<f64> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let correct = (0..ds.len())
        .into_par_iter()
        .map(|i| Ok(usize::from(classify(model.evaluate(ds.input(i))?.view()) == ds.labels()[i])))
        .collect::<Result<Vec<usize>>>()?;
    Ok(correct.iter().sum::<usize>() as f64 / ds.len() as f64)
}

/// Writes `example_id,clean_pred,adv_pred,loss_clean,loss_adv,linf_norm`.
pub fn write_attack_csv<T: Scalar>(records: &[AttackRecord<T>], path: &Path) -> Result<()> {
    let mut out = String::from("example_id,clean_pred,adv_pred,loss_clean,loss_adv,linf_norm\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.example_id,
            r.clean_pred,
            r.adv_pred,
            r.loss_clean.as_f64(),
            r.loss_adv.as_f64(),
            r.linf_norm.as_f64()
        ));
    }
    fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}

/// Stacks per-example perturbations into a matrix (rows aligned with examples).
pub fn stack_deltas<T: Scalar>(perts: &[Perturbation<T>]) -> Array2<T> {
    let d = perts.first().map_or(0, |p| p.delta.len());
    let mut m = Array2::zeros((perts.len(), d));
    for (mut row, p) in m.axis_iter_mut(Axis(0)).zip(perts) {
        row.assign(&p.delta);
    }
    m
}
