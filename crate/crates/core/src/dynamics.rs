//! Trajectory metrics of empirical NTKs recorded during training.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;

use crate::attacks::gradient_attack;
use crate::datasets::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{frobenius_inner, frobenius_norm};
use crate::nets::{train_observed, Network, TrainConfig, TrainTrace};
use crate::regression::eigendecompose_matrix;
use crate::scalar::Scalar;

/// Scale-invariant distance `1 - <A, B>_F / (|A|_F |B|_F)`.
///
/// The denominator is `sqrt(<A,A> <B,B>)` so that `d(A, A) = 0` exactly.
pub fn kernel_distance<T: Scalar>(a: ArrayView2<'_, T>, b: ArrayView2<'_, T>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::param(format!("shape mismatch {:?} vs {:?}", a.dim(), b.dim())));
    }
    let aa = frobenius_inner(a, a).as_f64();
    let bb = frobenius_inner(b, b).as_f64();
    if !(aa > 0.0 && bb > 0.0) {
        return Err(Error::Undefined("kernel distance of a zero matrix".into()));
    }
    let ab = frobenius_inner(a, b).as_f64();
    Ok(1.0 - ab / (aa * bb).sqrt())
}

/// `θ = arccos(1 - d)`, argument clamped to `[-1, 1]`.
pub fn angle_from_distance(d: f64) -> f64 {
    (1.0 - d).clamp(-1.0, 1.0).acos()
}

/// Polar position `(r, θ)` of `Θ_t` relative to the initial and final kernels.
pub fn polar_coordinates<T: Scalar>(
    theta_t: ArrayView2<'_, T>,
    theta_0: ArrayView2<'_, T>,
    theta_f: ArrayView2<'_, T>,
) -> Result<(f64, f64)> {
    let span = frobenius_norm((&theta_f - &theta_0).view()).as_f64();
    if !(span > 0.0) {
        return Err(Error::Undefined(
            "final kernel equals the initial kernel; radial coordinate undefined".into(),
        ));
    }
    let r = frobenius_norm((&theta_t - &theta_0).view()).as_f64() / span;
    Ok((r, angle_from_distance(kernel_distance(theta_t, theta_0)?)))
}

/// `Σ_{i ≤ p} λ_i² / Σ_i λ_i²` for a descending spectrum.
pub fn concentration<T: Scalar>(eigs: ArrayView1<'_, T>, p: usize) -> Result<f64> {
    let n = eigs.len();
    if p == 0 || p > n {
        return Err(Error::param(format!("cutoff {p} outside [1, {n}]")));
    }
    let sq: Vec<f64> = eigs.iter().map(|v| v.as_f64().powi(2)).collect();
    let total: f64 = sq.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Undefined("concentration of an all-zero spectrum".into()));
    }
    if p == n {
        return Ok(1.0);
    }
    Ok((sq[..p].iter().sum::<f64>() / total).min(1.0))
}

/// Projection of a symmetric matrix onto its own top-`p` eigenspace.
pub fn top_subspace<T: Scalar>(k: ArrayView2<'_, T>, p: usize) -> Result<Array2<T>> {
    if p == 0 || p > k.nrows() {
        return Err(Error::param(format!("cutoff {p} outside [1, {}]", k.nrows())));
    }
    if p == k.nrows() {
        return Ok(k.to_owned());
    }
    Ok(eigendecompose_matrix(k)?.truncated_reconstruction(p))
}

/// Polar trajectory of a kernel sequence, optionally restricted to each
/// snapshot's top-`p` eigenspace. The last snapshot is the final kernel.
/// An undefined radial coordinate is reported as NaN.
pub fn polar_trajectory<T: Scalar>(kernels: &[Array2<T>], p: Option<usize>) -> Result<Vec<(f64, f64)>> {
    let projected: Vec<Array2<T>> = match p {
        Some(p) => kernels
            .par_iter()
            .map(|k| top_subspace(k.view(), p))
            .collect::<Result<_>>()?,
        None => kernels.to_vec(),
    };
    let (Some(first), Some(last)) = (projected.first(), projected.last()) else {
        return Ok(Vec::new());
    };
    projected
        .iter()
        .map(|k| match polar_coordinates(k.view(), first.view(), last.view()) {
            Ok(rt) => Ok(rt),
            Err(Error::Undefined(_)) => Ok((f64::NAN, angle_from_distance(kernel_distance(k.view(), first.view())?))),
            Err(e) => Err(e),
        })
        .collect()
}

pub fn top_subspace_polar<T: Scalar>(kernels: &[Array2<T>], p: usize) -> Result<Vec<(f64, f64)>> {
    polar_trajectory(kernels, Some(p))
}

/// Pairwise distance matrix between snapshot kernels.
pub fn distance_heatmap<T: Scalar>(kernels: &[Array2<T>]) -> Result<Array2<f64>> {
    let n = kernels.len();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = kernel_distance(kernels[i].view(), kernels[j].view())?;
            out[[i, j]] = d;
            out[[j, i]] = d;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySnapshot {
    pub epoch: usize,
    pub frobenius_norm: f64,
    pub distance_to_init: f64,
    /// NaN when the final kernel equals the initial one.
    pub r: f64,
    pub theta: f64,
    pub concentration: BTreeMap<usize, f64>,
    pub eigenvalues: Vec<f64>,
}

/// Which inputs the tracked kernel is evaluated on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TrackedInputs {
    #[default]
    Clean,
    /// The tracked batch attacked against the current network with the
    /// training attack.
    Attacked,
}

/// Metrics for a sequence of `(epoch, kernel)` checkpoints; the last is final.
pub fn snapshots_from_kernels<T: Scalar>(kernels: &[(usize, Array2<T>)], cutoffs: &[usize]) -> Result<Vec<TrajectorySnapshot>> {
    let Some((_, first)) = kernels.first() else {
        return Ok(Vec::new());
    };
    let mats: Vec<Array2<T>> = kernels.iter().map(|(_, k)| k.clone()).collect();
    let polar = polar_trajectory(&mats, None)?;
    let n = first.nrows();
    kernels
        .par_iter()
        .zip(polar.par_iter())
        .map(|((epoch, k), &(r, theta))| {
            let eig = eigendecompose_matrix(k.view())?;
            let eigs = eig.eigenvalues();
            let mut conc = BTreeMap::new();
            for &p in cutoffs {
                conc.insert(p, concentration(eigs, p.min(n))?);
            }
            Ok(TrajectorySnapshot {
                epoch: *epoch,
                frobenius_norm: frobenius_norm(k.view()).as_f64(),
                distance_to_init: kernel_distance(k.view(), first.view())?,
                r,
                theta,
                concentration: conc,
                eigenvalues: eigs.iter().map(|v| v.as_f64()).collect(),
            })
        })
        .collect()
}

/// Output of [`record_dynamics`].
#[derive(Debug, Clone)]
pub struct DynamicsRun<T> {
    pub snapshots: Vec<TrajectorySnapshot>,
    pub kernels: Vec<(usize, Array2<T>)>,
    pub trace: TrainTrace<T>,
    /// Set when training stopped early; metrics use the last checkpoint taken.
    pub aborted: Option<String>,
}

/// Trains `net` and records the empirical NTK of `tracked` (row indices of
/// `ds`) at every epoch in `checkpoints`.
pub fn record_dynamics<T: Scalar, N: Network<T>>(
    net: &mut N,
    ds: &Dataset<T>,
    cfg: &TrainConfig<T>,
    tracked: &[usize],
    checkpoints: &[usize],
    cutoffs: &[usize],
    inputs: TrackedInputs,
) -> Result<DynamicsRun<T>> {
    if tracked.is_empty() {
        return Err(Error::param("tracked batch is empty"));
    }
    if let Some(&bad) = tracked.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::param(format!("tracked index {bad} outside the training set")));
    }
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::param("checkpoint epochs must be strictly increasing"));
    }
    let batch = ds.subset(tracked)?;
    let targets = batch.label_matrix();
    let attack = cfg.attack;
    let loss = cfg.loss;
    let mut kernels: Vec<(usize, Array2<T>)> = Vec::new();
    let mut observer = |epoch: usize, net: &N| -> Result<()> {
        if !checkpoints.contains(&epoch) {
            return Ok(());
        }
        let k = match (inputs, attack) {
            (TrackedInputs::Attacked, Some(a)) => {
                let mut adv = batch.inputs().to_owned();
                for (i, mut row) in adv.rows_mut().into_iter().enumerate() {
                    let p = gradient_attack(net, batch.input(i), targets.row(i), loss, &a)?;
                    row.assign(&p.apply(batch.input(i)));
                }
                net.empirical_ntk(adv.view())
            }
            _ => net.empirical_ntk(batch.inputs()),
        };
        kernels.push((epoch, k));
        Ok(())
    };
    let (trace, aborted) = match train_observed(net, ds, None, cfg, &mut observer) {
        Ok(t) => (t, None),
        Err(e @ Error::Divergence { .. }) => (TrainTrace::default(), Some(e.to_string())),
        Err(e) => return Err(e),
    };
    let snapshots = snapshots_from_kernels(&kernels, cutoffs)?;
    Ok(DynamicsRun {
        snapshots,
        kernels,
        trace,
        aborted,
    })
}

/// Writes `epoch,frob_norm,dist_to_init,r,theta,conc_p10,conc_p20`.
pub fn write_trajectory_csv(snapshots: &[TrajectorySnapshot], path: &Path) -> Result<()> {
    fs::write(path, trajectory_csv(snapshots))?;
    Ok(())
}

pub fn trajectory_csv(snapshots: &[TrajectorySnapshot]) -> String {
    let mut out = String::from("epoch,frob_norm,dist_to_init,r,theta,conc_p10,conc_p20\n");
    let conc = |s: &TrajectorySnapshot, p: usize| s.concentration.get(&p).copied().unwrap_or(f64::NAN);
    for s in snapshots {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            s.epoch,
            s.frobenius_norm,
            s.distance_to_init,
            s.r,
            s.theta,
            conc(s, 10),
            conc(s, 20)
        ));
    }
    out
}

/// Square CSV with no header.
pub fn write_matrix_csv(m: &Array2<f64>, path: &Path) -> Result<()> {
    let mut out = String::new();
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Convenience: descending eigenvalues of a symmetric matrix.
pub fn spectrum<T: Scalar>(k: ArrayView2<'_, T>) -> Result<Array1<T>> {
    Ok(eigendecompose_matrix(k)?.eigenvalues().to_owned())
}
