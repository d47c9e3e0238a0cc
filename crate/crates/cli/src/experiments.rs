//! The experiment protocols. Each writes its artifacts into `out` and returns
//! the file names.

use std::path::Path;

use ndarray::Array2;
use ntk_core::attacks::{
    attack_dataset, clean_accuracy, kernel_robust_accuracy, robust_accuracy, robust_accuracy_against,
    write_attack_csv, AttackKind, GradientAttacker, TaylorAttacker,
};
use ntk_core::datasets::{classify, generate_gaussian_blobs, load_idx_images, Normalization};
use ntk_core::dynamics::{
    distance_heatmap, kernel_distance, record_dynamics, top_subspace_polar, write_matrix_csv,
    write_trajectory_csv, DynamicsRun, TrackedInputs,
};
use ntk_core::features::{
    filtered_predictor, robustness_ranking, score_features, score_top_features, write_gradient_images_csv,
    write_scores_csv, FeatureFunction,
};
use ntk_core::nets::{defined_mean, gradient_cosine_similarity, train_observed};
use ntk_core::{
    Dataset, FiniteNet, Horizon, Loss, Mlp, Network, Predictor, SplitSpec, TrainConfig,
};
use serde_json::json;

use crate::config::{AttackName, DatasetKind, Experiment, ExperimentConfig, ModeSpec, NormalizeSpec, TrackedSpec};
use crate::{Context, RunError};

/// Collects written file names.
struct Outputs<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &'a Path) -> Self {
        Self { dir, files: Vec::new() }
    }

    fn path(&mut self, name: &str) -> std::path::PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn text(&mut self, name: &str, body: &str) -> Result<(), RunError> {
        let path = self.path(name);
        std::fs::write(&path, body).map_err(|source| RunError::Io { path, source })
    }

    fn json(&mut self, name: &str, value: &serde_json::Value) -> Result<(), RunError> {
        self.text(name, &serde_json::to_string_pretty(value).expect("json value"))
    }
}

pub fn dispatch(experiment: Experiment, cfg: &ExperimentConfig, out: &Path) -> Result<Vec<String>, RunError> {
    let mut o = Outputs::new(out);
    match experiment {
        Experiment::Gram => gram(cfg, &mut o)?,
        Experiment::Transfer => transfer(cfg, &mut o)?,
        Experiment::Attack => attack(cfg, &mut o)?,
        Experiment::Features => features(cfg, &mut o)?,
        Experiment::Filter => filter(cfg, &mut o)?,
        Experiment::Dynamics => dynamics(cfg, &mut o)?,
        Experiment::LinAdv => lin_adv(cfg, &mut o)?,
    }
    Ok(o.files)
}

/// Train and validation splits of the configured data.
pub fn load_data(cfg: &ExperimentConfig) -> Result<(Dataset<f64>, Dataset<f64>), RunError> {
    let d = &cfg.dataset;
    let (full, normalize) = match d.kind {
        DatasetKind::Blobs => (
            generate_gaussian_blobs(d.n, d.dim, d.classes, d.separation, cfg.seed).context("generating blobs")?,
            Normalization::from(d.normalize),
        ),
        DatasetKind::Idx => {
            let images = d.images.as_deref().expect("validated");
            let labels = d.labels.as_deref().expect("validated");
            let ds = load_idx_images(images, labels, Some(d.limit), d.class_filter.as_deref())
                .context("loading IDX files")?;
            // pixels are already scaled to [0, 1] by the loader
            let norm = match d.normalize {
                NormalizeSpec::UnitNorm => Normalization::UnitNorm,
                _ => Normalization::None,
            };
            (ds, norm)
        }
    };
    full.split(&SplitSpec {
        train_fraction: d.train_fraction,
        seed: cfg.seed,
        normalize,
    })
    .context("splitting data")
}

fn horizon(cfg: &ExperimentConfig) -> Horizon<f64> {
    cfg.kernel.time.map_or(Horizon::Infinite, Horizon::Finite)
}

fn fit(cfg: &ExperimentConfig, train: &Dataset<f64>, learning_rate: f64) -> Result<Predictor<f64>, RunError> {
    Predictor::fit(cfg.kernel.model(), train, learning_rate, cfg.kernel.jitter_scale).context("fitting kernel predictor")
}

fn kernel_accuracy(p: &Predictor<f64>, h: Horizon<f64>, ds: &Dataset<f64>) -> Result<f64, RunError> {
    clean_accuracy(&p.at(h), ds).context("evaluating kernel predictor")
}

fn gram(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<(), RunError> {
    let (train, val) = load_data(cfg)?;
    let g = cfg
        .kernel
        .model()
        .gram(train.inputs(), cfg.kernel.jitter_scale)
        .context("assembling Gram matrix")?;
    g.write(&o.path("gram.bin")).context("writing Gram matrix")?;
    let p = Predictor::from_gram(&g, train.inputs().to_owned(), train.label_matrix(), cfg.kernel.learning_rate)
        .context("factorising Gram matrix")?;
    let eigs = p.eigen().eigenvalues();
    let mut spectrum = String::from("index,eigenvalue\n");
    for (i, l) in eigs.iter().enumerate() {
        spectrum.push_str(&format!("{},{}\n", i + 1, l));
    }
    o.text("spectrum.csv", &spectrum)?;

    let h = horizon(cfg);
    let mut preds = String::from("example_id,label,predicted\n");
    let mut correct = 0usize;
    for i in 0..val.len() {
        let f = p.predict(val.input(i), h).context("predicting")?;
        let c = classify(f.view());
        correct += usize::from(c == val.labels()[i]);
        preds.push_str(&format!("{i},{},{c}\n", val.labels()[i]));
    }
    o.text("predictions.csv", &preds)?;
    o.json(
        "summary.json",
        &json!({
            "kernel": cfg.kernel.model().name(),
            "train_n": train.len(),
            "val_n": val.len(),
            "jitter": g.jitter(),
            "lambda_max": eigs[0],
            "lambda_min": eigs[eigs.len() - 1],
            "val_accuracy": correct as f64 / val.len().max(1) as f64,
        }),
    )
}

fn attack(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<(), RunError> {
    let (train, val) = load_data(cfg)?;
    let p = fit(cfg, &train, cfg.kernel.learning_rate)?;
    let h = horizon(cfg);
    let view = p.at(h);
    let acfg = cfg.attack_config();
    let records = match cfg.attack.kind.kind() {
        AttackKind::Gradient => attack_dataset(
            &GradientAttacker {
                model: &view,
                loss: Loss::CrossEntropy,
                cfg: acfg,
            },
            &view,
            &val,
        ),
        kind => attack_dataset(
            &TaylorAttacker {
                predictor: &p,
                kind,
                cfg: acfg,
            },
            &view,
            &val,
        ),
    }
    .context("attacking validation set")?;
    write_attack_csv(&records, &o.path("attacks.csv")).context("writing attacks")?;
    let clean = records.iter().filter(|r| r.clean_pred == r.label).count() as f64 / records.len().max(1) as f64;
    o.json(
        "summary.json",
        &json!({
            "attack": cfg.attack.kind,
            "epsilon": acfg.epsilon,
            "steps": acfg.steps,
            "clean_accuracy": clean,
            "robust_accuracy": ntk_core::attacks::robust_fraction(&records),
        }),
    )
}

fn feature_steps(cfg: &ExperimentConfig) -> usize {
    match cfg.attack.kind {
        AttackName::Pgd => cfg.attack.steps,
        _ => 1,
    }
}

fn features(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<(), RunError> {
    let (train, val) = load_data(cfg)?;
    let p = fit(cfg, &train, cfg.kernel.learning_rate)?;
    let eps = cfg.epsilon();
    let steps = feature_steps(cfg);
    let scores = match cfg.features.top {
        Some(top) => score_top_features(&p, &val, eps, steps, top),
        None => score_features(&p, &val, eps, steps),
    }
    .context("scoring features")?;
    write_scores_csv(&scores, &o.path("feature_scores.csv")).context("writing scores")?;

    let example = cfg.features.image_example;
    if example >= val.len() {
        return Err(RunError::Config(format!(
            "features.image_example: {example} outside the validation set of {}",
            val.len()
        )));
    }
    let class = val.labels()[example];
    let mut images = Vec::new();
    for i in 1..=cfg.features.images.min(p.n()) {
        let f = FeatureFunction::new(&p, i).context("building feature")?;
        images.push((i, f.gradient_image(val.input(example), class).context("feature gradient")?));
    }
    write_gradient_images_csv(&images, &o.path("feature_gradients.csv")).context("writing gradient images")?;
    let shape = val.image_shape();
    o.json(
        "feature_gradients.json",
        &json!({
            "dim": val.dim(),
            "height": shape.map(|s| s.0),
            "width": shape.map(|s| s.1),
            "example_id": example,
            "class": class,
            "features": images.iter().map(|(i, _)| *i).collect::<Vec<_>>(),
        }),
    )?;
    let best = scores
        .iter()
        .max_by(|a, b| a.robustness.total_cmp(&b.robustness).then(b.index.cmp(&a.index)))
        .map(|s| s.index);
    o.json(
        "summary.json",
        &json!({
            "epsilon": eps,
            "attack_steps": steps,
            "features_scored": scores.len(),
            "useful_features": scores.iter().filter(|s| s.useful_flag).count(),
            "most_robust_index": best,
            "majority_rate": val.majority_rate(),
        }),
    )
}

fn filter(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<(), RunError> {
    let (train, val) = load_data(cfg)?;
    let p = fit(cfg, &train, cfg.kernel.learning_rate)?;
    let eps = cfg.epsilon();
    let scores = score_features(&p, &val, eps, feature_steps(cfg)).context("scoring features")?;
    write_scores_csv(&scores, &o.path("feature_scores.csv")).context("writing scores")?;
    let ranking = robustness_ranking(&scores);
    let sizes: Vec<usize> = if cfg.features.filter_sizes.is_empty() {
        (1..=p.n()).collect()
    } else {
        cfg.features.filter_sizes.clone()
    };
    let fgsm = cfg.fgsm_config();
    let pgd = cfg.pgd_config();
    let mut body = String::from("r,clean_acc,fgsm_acc,pgd_acc\n");
    for r in sizes {
        let fp = filtered_predictor(&p, &ranking, r).context("filtering predictor")?;
        let clean = kernel_accuracy(&fp, Horizon::Infinite, &val)?;
        let a = kernel_robust_accuracy(&fp, Horizon::Infinite, &val, AttackKind::Gradient, &fgsm)
            .context("FGSM on filtered predictor")?;
        let b = kernel_robust_accuracy(&fp, Horizon::Infinite, &val, AttackKind::Gradient, &pgd)
            .context("PGD on filtered predictor")?;
        body.push_str(&format!("{r},{clean},{a},{b}\n"));
    }
    o.text("filter_sweep.csv", &body)
}

/// One logged row of the transfer experiment.
#[derive(Debug, Clone, Copy)]
pub struct TransferRow {
    pub epoch: usize,
    pub time: f64,
    pub cosine_mean: f64,
    pub cosine_defined: usize,
    pub clean_acc: f64,
    pub robust_acc_own: f64,
    pub robust_acc_kernel: f64,
    pub kernel_clean_acc: f64,
    pub kernel_robust_acc: f64,
}

/// Trains a frozen-head net of `width` and logs gradient alignment with the
/// kernel predictor and the transfer of kernel attacks at `log_epochs`.
pub fn transfer_run(
    cfg: &ExperimentConfig,
    train: &Dataset<f64>,
    val: &Dataset<f64>,
    width: usize,
) -> Result<(Vec<TransferRow>, ntk_core::TrainTrace<f64>), RunError> {
    let lr = cfg.train.learning_rate;
    let p = fit(cfg, train, lr)?;
    let mut net = FiniteNet::init(width, train.dim(), train.output_dim(), cfg.seed).context("initialising net")?;
    let init = net.clone();
    let fgsm = cfg.fgsm_config();
    let e2t = cfg.transfer.epoch_to_time;
    let log = &cfg.transfer.log_epochs;
    let mut tcfg = cfg.train_config(ModeSpec::Standard, cfg.train.epochs, cfg.seed);
    tcfg.robust_eval = None;
    let mut rows = Vec::new();
    let mut observer = |epoch: usize, net: &FiniteNet<f64>| -> ntk_core::Result<()> {
        if !log.contains(&epoch) {
            return Ok(());
        }
        let t = e2t * epoch as f64;
        let view = p.at(Horizon::Finite(t));
        let cos = gradient_cosine_similarity(net, &init, &p, val, epoch, e2t)?;
        let kernel_attacker = GradientAttacker {
            model: &view,
            loss: Loss::CrossEntropy,
            cfg: fgsm,
        };
        rows.push(TransferRow {
            epoch,
            time: t,
            cosine_mean: defined_mean(&cos).unwrap_or(f64::NAN),
            cosine_defined: cos.iter().flatten().count(),
            clean_acc: clean_accuracy(net, val)?,
            robust_acc_own: robust_accuracy(net, val, &fgsm)?,
            robust_acc_kernel: robust_accuracy_against(&kernel_attacker, net, val)?,
            kernel_clean_acc: clean_accuracy(&view, val)?,
            kernel_robust_acc: robust_accuracy(&view, val, &fgsm)?,
        });
        Ok(())
    };
    let trace = train_observed(&mut net, train, Some(val), &tcfg, &mut observer).context("training net")?;
    Ok((rows, trace))
}

pub fn transfer_csv(rows: &[TransferRow]) -> String {
    let mut body = String::from(
        "epoch,time,cosine_mean,cosine_defined,clean_acc,robust_acc_own,robust_acc_kernel,kernel_clean_acc,kernel_robust_acc\n",
    );
    for r in rows {
        body.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.epoch,
            r.time,
            r.cosine_mean,
            r.cosine_defined,
            r.clean_acc,
            r.robust_acc_own,
            r.robust_acc_kernel,
            r.kernel_clean_acc,
            r.kernel_robust_acc
        ));
    }
    body
}

fn transfer(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<(), RunError> {
    let (train, val) = load_data(cfg)?;
    let mut summary = Vec::new();
    for &width in &cfg.transfer.widths {
        let (rows, trace) = transfer_run(cfg, &train, &val, width)?;
        o.text(&format!("transfer_w{width}.csv"), &transfer_csv(&rows))?;
        o.text(&format!("train_trace_w{width}.csv"), &trace.to_csv())?;
        let cos: Vec<Option<f64>> = rows.iter().map(|r| Some(r.cosine_mean).filter(|c| c.is_finite())).collect();
        let last = rows.last();
        summary.push(json!({
            "width": width,
            "mean_cosine": defined_mean(&cos),
            "final_robust_acc_own": last.map(|r| r.robust_acc_own),
            "final_robust_acc_kernel": last.map(|r| r.robust_acc_kernel),
        }));
    }
    o.json("summary.json", &json!({ "epsilon": cfg.epsilon(), "widths": summary }))
}

fn mlp(cfg: &ExperimentConfig, train: &Dataset<f64>, seed: u64) -> Result<Mlp<f64>, RunError> {
    let mut sizes = vec![train.dim()];
    sizes.extend(&cfg.train.hidden);
    sizes.push(train.output_dim());
    Mlp::init(&sizes, seed).context("initialising perceptron")
}

/// Adversarial mode used when an experiment contrasts against standard training.
fn adversarial_mode(cfg: &ExperimentConfig) -> ModeSpec {
    match cfg.train.mode {
        ModeSpec::Standard => ModeSpec::AdvPgd,
        m => m,
    }
}

fn checkpoints(cfg: &ExperimentConfig, epochs: usize) -> Vec<usize> {
    if cfg.dynamics.checkpoints.is_empty() {
        (0..=epochs).collect()
    } else {
        cfg.dynamics.checkpoints.clone()
    }
}

fn tracked_rows(cfg: &ExperimentConfig, train: &Dataset<f64>) -> Vec<usize> {
    (0..cfg.dynamics.tracked_batch.min(train.len())).collect()
}

/// Standard and adversarial dynamics runs from the same seed.
pub fn dynamics_pair(
    cfg: &ExperimentConfig,
    train: &Dataset<f64>,
    seed: u64,
    inputs: TrackedInputs,
) -> Result<(DynamicsRun<f64>, DynamicsRun<f64>), RunError> {
    let epochs = cfg.train.epochs;
    let cps = checkpoints(cfg, epochs);
    let tracked = tracked_rows(cfg, train);
    let run = |mode: ModeSpec| -> Result<DynamicsRun<f64>, RunError> {
        let mut net = mlp(cfg, train, seed)?;
        let tcfg = cfg.train_config(mode, epochs, seed);
        record_dynamics(&mut net, train, &tcfg, &tracked, &cps, &cfg.dynamics.cutoffs, inputs)
            .context("recording dynamics")
    };
    Ok((run(ModeSpec::Standard)?, run(adversarial_mode(cfg))?))
}

fn write_dynamics(o: &mut Outputs, tag: &str, run: &DynamicsRun<f64>, top: usize) -> Result<(), RunError> {
    write_trajectory_csv(&run.snapshots, &o.path(&format!("trajectory_{tag}.csv"))).context("writing trajectory")?;
    let kernels: Vec<Array2<f64>> = run.kernels.iter().map(|(_, k)| k.clone()).collect();
    let heat = distance_heatmap(&kernels).context("distance heatmap")?;
    write_matrix_csv(&heat, &o.path(&format!("heatmap_{tag}.csv"))).context("writing heatmap")?;
    let n = kernels.first().map_or(1, |k| k.nrows());
    let polar = top_subspace_polar(&kernels, top.min(n)).context("top-space polar dynamics")?;
    let mut body = String::from("epoch,r,theta\n");
    for ((epoch, _), (r, th)) in run.kernels.iter().zip(polar) {
        body.push_str(&format!("{epoch},{r},{th}\n"));
    }
    o.text(&format!("polar_top_{tag}.csv"), &body)?;
    o.text(&format!("train_trace_{tag}.csv"), &run.trace.to_csv())
}

fn dynamics(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<(), RunError> {
    let (train, _) = load_data(cfg)?;
    let variants: &[(TrackedInputs, &str)] = match cfg.dynamics.tracked {
        TrackedSpec::Clean => &[(TrackedInputs::Clean, "")],
        TrackedSpec::Attacked => &[(TrackedInputs::Attacked, "_attacked")],
        TrackedSpec::Both => &[(TrackedInputs::Clean, ""), (TrackedInputs::Attacked, "_attacked")],
    };
    let mut summary = serde_json::Map::new();
    for &(inputs, suffix) in variants {
        let (std_run, adv_run) = dynamics_pair(cfg, &train, cfg.seed, inputs)?;
        for (name, run) in [("standard", &std_run), ("adversarial", &adv_run)] {
            let tag = format!("{name}{suffix}");
            write_dynamics(o, &tag, run, cfg.dynamics.top_space)?;
            let last = run.snapshots.last();
            summary.insert(
                tag,
                json!({
                    "final_frob_norm": last.map(|s| s.frobenius_norm),
                    "final_concentration": last.map(|s| s.concentration.clone()),
                    "aborted": run.aborted,
                }),
            );
        }
    }
    o.json("summary.json", &serde_json::Value::Object(summary))
}

/// Distances between consecutive empirical NTKs after linearisation.
#[derive(Debug, Clone)]
pub struct LinearizedRun {
    pub epochs: Vec<usize>,
    pub consecutive_distance: Vec<f64>,
    pub trace: ntk_core::TrainTrace<f64>,
    pub pre_trace: ntk_core::TrainTrace<f64>,
}

pub fn linearized_run(cfg: &ExperimentConfig, train: &Dataset<f64>, val: &Dataset<f64>) -> Result<LinearizedRun, RunError> {
    let mut net = mlp(cfg, train, cfg.seed)?;
    let pre_cfg = cfg.train_config(cfg.train.mode, cfg.dynamics.linearize_at, cfg.seed);
    let pre_trace = ntk_core::nets::train(&mut net, train, Some(val), &pre_cfg).context("training before linearisation")?;
    let post_cfg: TrainConfig<f64> = cfg.train_config(adversarial_mode(cfg), cfg.train.epochs, cfg.seed);
    let tracked = train.subset(&tracked_rows(cfg, train)).context("tracked batch")?;

    // the linearised model reports its kernel at every epoch
    let mut kernels: Vec<(usize, Array2<f64>)> = Vec::new();
    let mut lin = ntk_core::LinearizedNet::new(&net);
    let mut observer = |epoch: usize, m: &ntk_core::LinearizedNet<f64, Mlp<f64>>| -> ntk_core::Result<()> {
        kernels.push((epoch, m.empirical_ntk(tracked.inputs())));
        Ok(())
    };
    let trace = train_observed(&mut lin, train, Some(val), &post_cfg, &mut observer).context("linearised training")?;
    let mut dist = Vec::new();
    for w in kernels.windows(2) {
        dist.push(kernel_distance(w[0].1.view(), w[1].1.view()).context("kernel distance")?);
    }
    Ok(LinearizedRun {
        epochs: kernels.iter().skip(1).map(|(e, _)| *e).collect(),
        consecutive_distance: dist,
        trace,
        pre_trace,
    })
}

fn lin_adv(cfg: &ExperimentConfig, o: &mut Outputs) -> Result<(), RunError> {
    let (train, val) = load_data(cfg)?;
    let run = linearized_run(cfg, &train, &val)?;
    let mut body = String::from("epoch,dist_to_prev\n");
    for (e, d) in run.epochs.iter().zip(&run.consecutive_distance) {
        body.push_str(&format!("{e},{d}\n"));
    }
    o.text("linearized_distances.csv", &body)?;
    o.text("train_trace_pre.csv", &run.pre_trace.to_csv())?;
    o.text("train_trace_linearized.csv", &run.trace.to_csv())?;
    let max = run.consecutive_distance.iter().cloned().fold(0.0, f64::max);
    o.json(
        "summary.json",
        &json!({
            "linearize_at": cfg.dynamics.linearize_at,
            "epochs_after": run.trace.records.len(),
            "max_consecutive_distance": max,
            "final_loss": run.trace.records.last().map(|r| r.loss),
        }),
    )
}
