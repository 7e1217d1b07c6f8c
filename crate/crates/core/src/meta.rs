//! Bilevel meta-training of loss parameters φ.
//!
//! Each meta-iteration takes an inner SGD step on the task model θ under the
//! learned loss (batch half A), evaluates the updated model with plain MSE on
//! batch half B, and moves φ along the exact gradient of that outer loss,
//! differentiating through the inner update.

use metaloss_autodiff::{Graph, Node};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{sample_contiguous_batch, Batch, DynDataset, DynRecord};
use crate::error::{Error, Result};
use crate::loss::{mse_loss, BoundLoss, LossParams, LossVariant};
use crate::model::{mse_values, predict, ModelParams, ModelSpec, OptState, OptimizerKind};
use crate::nn::BoundMlp;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaConfig {
    pub epochs: usize,
    pub batches_per_epoch: usize,
    /// Contiguous batch size K, split into halves A and B.
    pub batch_size: usize,
    /// Inner (task model) learning rate α.
    pub inner_lr: f64,
    /// Outer (loss) learning rate η.
    pub outer_lr: f64,
    pub iters_max: usize,
    /// Inner steps differentiated through per outer update.
    pub unroll: usize,
    /// Draw a fresh batch for every iteration instead of reusing A/B.
    pub resample_halves: bool,
    pub divergence_threshold: f64,
    pub model: ModelSpec,
    pub seed: u64,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            batches_per_epoch: 100,
            batch_size: 256,
            inner_lr: 0.001,
            outer_lr: 0.01,
            iters_max: 10,
            unroll: 1,
            resample_halves: false,
            divergence_threshold: 1e6,
            model: ModelSpec::default(),
            seed: 0,
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(format!("meta config: {m}")));
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.iters_max == 0 || self.unroll == 0 {
            return bad("epochs, batches_per_epoch, iters_max and unroll must be positive");
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return bad("batch_size must be even and at least 2");
        }
        if !(self.inner_lr > 0.0 && self.inner_lr.is_finite() && self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return bad("learning rates must be positive and finite");
        }
        if !(self.divergence_threshold > 0.0) {
            return bad("divergence_threshold must be positive");
        }
        if self.model.hidden.is_empty() || self.model.hidden.contains(&0) {
            return bad("model needs nonempty, nonzero hidden sizes");
        }
        Ok(())
    }

    pub fn step_params(&self) -> StepParams {
        StepParams {
            inner_lr: self.inner_lr,
            outer_lr: self.outer_lr,
            iters_max: self.iters_max,
            unroll: self.unroll,
            divergence_threshold: self.divergence_threshold,
        }
    }
}

/// Hyperparameters of one [`meta_step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepParams {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub iters_max: usize,
    pub unroll: usize,
    pub divergence_threshold: f64,
}

/// A batch bound into a graph as constants.
#[derive(Clone, Copy, Debug)]
pub struct BatchNodes {
    pub x: Node,
    pub q: Node,
    pub dq: Node,
    pub tau: Node,
}

impl BatchNodes {
    pub fn bind(g: &mut Graph, model: &ModelParams, batch: &Batch) -> Result<Self> {
        Ok(Self {
            x: model.input_node(g, batch)?,
            q: g.constant(batch.q.clone()),
            dq: g.constant(batch.dq.clone()),
            tau: g.constant(batch.tau.clone()),
        })
    }
}

/// One differentiable SGD step `θ − α·∇_θ L_φ(θ; A)`.
pub fn inner_update(g: &mut Graph, theta: &BoundMlp, loss: &BoundLoss, a: &BatchNodes, alpha: f64) -> Result<BoundMlp> {
    let pred = predict(g, theta, a.x)?;
    let l = loss.eval(g, a.q, a.dq, pred, a.tau)?;
    let params = theta.params();
    let grads = g.backward(l, &params, true)?;
    let mut updated = Vec::with_capacity(params.len());
    for (p, d) in params.iter().zip(grads) {
        let step = g.scalar_mul(d, alpha)?;
        updated.push(g.sub(*p, step)?);
    }
    Ok(BoundMlp::from_params(&updated))
}

/// Outer loss and its gradient with respect to φ.
#[derive(Clone, Debug)]
pub struct MetaGradient {
    /// MSE of the updated model on B.
    pub outer_loss: f64,
    /// `∇_φ` in [`LossParams::flat`] order.
    pub grad: Vec<f64>,
    /// Task model after the `unroll` inner steps.
    pub theta_new: ModelParams,
}

/// `∇_φ MSE(f_{θ'}(B), τ_B)` with `θ'` the result of `unroll` inner steps on A.
pub fn meta_gradient(phi: &LossParams, theta: &ModelParams, a: &Batch, b: &Batch, alpha: f64, unroll: usize) -> Result<MetaGradient> {
    if phi.variant() == LossVariant::Mse {
        return Err(Error::UnsupportedVariant {
            op: "meta_gradient",
            variant: phi.variant().to_string(),
        });
    }
    let mut g = Graph::new();
    let loss = phi.bind(&mut g, true)?;
    let mut net = theta.bind(&mut g, true)?;
    let an = BatchNodes::bind(&mut g, theta, a)?;
    let bn = BatchNodes::bind(&mut g, theta, b)?;
    for _ in 0..unroll {
        net = inner_update(&mut g, &net, &loss, &an, alpha)?;
    }
    let pred = predict(&mut g, &net, bn.x)?;
    let outer = mse_loss(&mut g, pred, bn.tau)?;
    let outer_loss = g.value(outer).item();
    let phi_nodes = loss.params();
    let grads = g.backward(outer, &phi_nodes, false)?;
    let grad: Vec<f64> = grads.iter().flat_map(|n| g.value(*n).data().iter().copied()).collect();
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient("loss parameters".into()));
    }
    let theta_new = ModelParams {
        joints: theta.joints,
        net: theta.net.from_bound(&g, &net),
        input_norm: theta.input_norm.clone(),
    };
    Ok(MetaGradient {
        outer_loss,
        grad,
        theta_new,
    })
}

/// Per-iteration record of one [`meta_step`].
#[derive(Clone, Debug, Default)]
pub struct MetaStepDiagnostics {
    pub outer_losses: Vec<f64>,
    /// Meta-gradient applied at each iteration.
    pub grads: Vec<Vec<f64>>,
    /// Task model entering each iteration.
    pub thetas: Vec<ModelParams>,
    pub final_theta: Option<ModelParams>,
}

/// Runs `iters_max` meta-iterations from `theta_init`. With one batch the
/// halves A/B stay fixed; with `iters_max` batches iteration `i` uses
/// `batches[i]`. φ is updated after every iteration and θ carries forward.
pub fn meta_step(phi: &LossParams, theta_init: &ModelParams, batches: &[&[DynRecord]], p: &StepParams) -> Result<(LossParams, MetaStepDiagnostics)> {
    if batches.len() != 1 && batches.len() != p.iters_max {
        return Err(Error::InvalidArgument(format!(
            "meta_step needs 1 or {} batches, got {}",
            p.iters_max,
            batches.len()
        )));
    }
    let halves = batches
        .iter()
        .map(|recs| {
            let k = recs.len();
            if k < 2 || k % 2 != 0 {
                return Err(Error::InvalidArgument(format!("meta batch size must be even and at least 2, got {k}")));
            }
            Ok((Batch::from_records(&recs[..k / 2])?, Batch::from_records(&recs[k / 2..])?))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut phi = phi.clone();
    let mut theta = theta_init.clone();
    let mut diag = MetaStepDiagnostics::default();
    for i in 0..p.iters_max {
        let (a, b) = &halves[i % halves.len()];
        let mg = meta_gradient(&phi, &theta, a, b, p.inner_lr, p.unroll)?;
        if !mg.outer_loss.is_finite() || mg.outer_loss > p.divergence_threshold {
            return Err(Error::Divergence(format!("outer loss {} at iteration {i}", mg.outer_loss)));
        }
        let mut flat = phi.flat();
        for (v, d) in flat.iter_mut().zip(&mg.grad) {
            *v -= p.outer_lr * d;
        }
        phi.set_flat(&flat);
        diag.outer_losses.push(mg.outer_loss);
        diag.grads.push(mg.grad);
        diag.thetas.push(std::mem::replace(&mut theta, mg.theta_new));
    }
    diag.final_theta = Some(theta);
    Ok((phi, diag))
}

/// Outer-loss statistics for one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSummary {
    pub epoch: usize,
    pub mean_outer_loss: f64,
    pub max_outer_loss: f64,
}

#[derive(Clone, Debug)]
pub struct MetaOutcome {
    pub phi: LossParams,
    pub epochs: Vec<EpochSummary>,
}

/// Meta-trains a fresh `variant` loss on `train`. For every batch a new task
/// model is drawn and a contiguous batch sampled; `hook` runs after every
/// epoch with the current φ.
pub fn meta_train<F>(cfg: &MetaConfig, variant: LossVariant, train: &DynDataset, mut hook: F) -> Result<MetaOutcome>
where
    F: FnMut(&EpochSummary, &LossParams) -> Result<()>,
{
    if variant == LossVariant::Mse {
        return Err(Error::UnsupportedVariant {
            op: "meta_train",
            variant: variant.to_string(),
        });
    }
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut phi = LossParams::init(variant, train.joints, &mut rng);
    let params = cfg.step_params();
    let n_batches = if cfg.resample_halves { cfg.iters_max } else { 1 };
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut sum = 0.0;
        let mut max = f64::NEG_INFINITY;
        let mut count = 0usize;
        for batch in 0..cfg.batches_per_epoch {
            let theta = cfg.model.init(train.joints, rng.random())?;
            let recs = (0..n_batches)
                .map(|_| sample_contiguous_batch(train, cfg.batch_size, &mut rng).map(|(r, _)| r))
                .collect::<Result<Vec<_>>>()?;
            let (next, diag) = meta_step(&phi, &theta, &recs, &params).map_err(|e| Error::MetaDiverged {
                epoch,
                batch,
                msg: e.to_string(),
            })?;
            phi = next;
            for l in diag.outer_losses {
                sum += l;
                max = max.max(l);
                count += 1;
            }
        }
        let summary = EpochSummary {
            epoch,
            mean_outer_loss: sum / count as f64,
            max_outer_loss: max,
        };
        hook(&summary, &phi)?;
        epochs.push(summary);
    }
    Ok(MetaOutcome { phi, epochs })
}

/// Batch MSE of `model`, value of `loss` and `∇_θ loss`, per parameter array.
pub fn task_gradient(model: &ModelParams, loss: &LossParams, batch: &Batch) -> Result<(f64, f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let net = model.bind(&mut g, true)?;
    let bl = loss.bind(&mut g, false)?;
    let bn = BatchNodes::bind(&mut g, model, batch)?;
    let pred = predict(&mut g, &net, bn.x)?;
    let mse = mse_values(g.value(pred).data(), batch.tau.data());
    let l = bl.eval(&mut g, bn.q, bn.dq, pred, bn.tau)?;
    let value = g.value(l).item();
    let grads = g.backward(l, &net.params(), false)?;
    Ok((mse, value, grads.iter().map(|n| g.value(*n).data().to_vec()).collect()))
}

/// MSE of `model` over every record of `data`.
pub fn dataset_mse(model: &ModelParams, data: &DynDataset) -> Result<f64> {
    let recs: Vec<DynRecord> = data.records().cloned().collect();
    model.mse(&Batch::from_records(&recs)?)
}

/// Training of fresh task models under a fixed loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub steps: usize,
    pub seeds: Vec<u64>,
    pub batch_size: usize,
    pub lr: f64,
    pub model: ModelSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            steps: 100,
            seeds: (0..5).collect(),
            batch_size: 256,
            lr: 0.001,
            model: ModelSpec::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalCurves {
    /// Batch MSE before each step, one curve per seed.
    pub per_seed: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Full-dataset MSE after the last step, per seed.
    pub final_mse: Vec<f64>,
}

/// Trains a fresh model per seed for `steps` SGD steps on `loss` over
/// contiguous batches of `data`, logging the batch MSE before every step.
pub fn eval_learned_loss(loss: &LossParams, data: &DynDataset, cfg: &EvalConfig) -> Result<EvalCurves> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("evaluation dataset is empty".into()));
    }
    let mut per_seed = Vec::with_capacity(cfg.seeds.len());
    let mut final_mse = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = cfg.model.init(data.joints, rng.random())?;
        let mut opt = OptState::new(OptimizerKind::sgd(cfg.lr))?;
        let mut curve = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let (recs, _) = sample_contiguous_batch(data, cfg.batch_size, &mut rng)?;
            let (mse, _, grads) = task_gradient(&model, loss, &Batch::from_records(recs)?)?;
            curve.push(mse);
            opt.step(&mut model.net, &grads)?;
        }
        final_mse.push(dataset_mse(&model, data)?);
        per_seed.push(curve);
    }
    let (mean, std) = mean_std_columns(&per_seed, cfg.steps);
    Ok(EvalCurves {
        per_seed,
        mean,
        std,
        final_mse,
    })
}

/// Column-wise mean and population standard deviation.
pub fn mean_std_columns(rows: &[Vec<f64>], len: usize) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    (0..len)
        .map(|i| {
            let m = rows.iter().map(|r| r[i]).sum::<f64>() / n;
            let v = rows.iter().map(|r| (r[i] - m).powi(2)).sum::<f64>() / n;
            (m, v.sqrt())
        })
        .unzip()
}
