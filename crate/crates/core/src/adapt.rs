//! Online streaming adaptation and the segmented pick-and-place task.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::arm::{min_jerk_trajectory, ArmModel, ArmSim, ArmState, Gains};
use crate::dataset::{sample_contiguous_batch, track, Batch, DynDataset, DynRecord};
use crate::error::{Error, Result};
use crate::loss::{LossParams, LossVariant};
use crate::meta::task_gradient;
use crate::model::{ModelParams, ModelSpec, OptState, OptimizerKind};

/// Streaming MSE log of one adaptation pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptReport {
    pub loss: LossVariant,
    /// `None` for a frozen model.
    pub optimizer: Option<OptimizerKind>,
    pub batch: usize,
    /// MSE of each window, measured before that window's update.
    pub batch_mse: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Streams `stream` through the model in consecutive windows of `batch`
/// records: log the window MSE, then take one optimizer step on `loss` over
/// it. With `opt = None` the model only predicts. A trailing partial window is
/// dropped. Returns the adapted model alongside the report.
pub fn online_adapt(
    theta0: &ModelParams,
    loss: &LossParams,
    mut opt: Option<&mut OptState>,
    stream: &[DynRecord],
    batch: usize,
) -> Result<(ModelParams, AdaptReport)> {
    if batch == 0 || stream.len() < batch {
        return Err(Error::InvalidArgument(format!(
            "stream of {} records is shorter than the batch size {batch}",
            stream.len()
        )));
    }
    let mut theta = theta0.clone();
    let mut log = Vec::with_capacity(stream.len() / batch);
    for (step, window) in stream.chunks_exact(batch).enumerate() {
        let b = Batch::from_records(window)?;
        let diverged = |e: Error| Error::AdaptDiverged {
            step,
            msg: e.to_string(),
        };
        match opt.as_deref_mut() {
            None => log.push(theta.mse(&b).map_err(diverged)?),
            Some(o) => {
                let (mse, _, grads) = task_gradient(&theta, loss, &b).map_err(diverged)?;
                log.push(mse);
                o.step(&mut theta.net, &grads).map_err(diverged)?;
                if theta.net.layers.iter().any(|l| l.weight.iter().chain(&l.bias).any(|v| !v.is_finite())) {
                    return Err(diverged(Error::InvalidArgument("non-finite parameters".into())));
                }
            }
        }
    }
    let (mean, std) = mean_std(&log);
    let report = AdaptReport {
        loss: loss.variant(),
        optimizer: opt.map(|o| o.kind.clone()),
        batch,
        batch_mse: log,
        mean,
        std,
    };
    Ok((theta, report))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentName {
    Reach,
    Lift,
    MoveOver,
    Lower,
    Retract,
}

impl SegmentName {
    pub const ALL: [SegmentName; 5] = [Self::Reach, Self::Lift, Self::MoveOver, Self::Lower, Self::Retract];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Reach => "reach",
            Self::Lift => "lift",
            Self::MoveOver => "move_over",
            Self::Lower => "lower",
            Self::Retract => "retract",
        }
    }

    /// Whether the object is held during this motion.
    pub fn carries_payload(self) -> bool {
        matches!(self, Self::Lift | Self::MoveOver | Self::Lower)
    }
}

impl fmt::Display for SegmentName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Pick-and-place motion: six joint-space waypoints visited in order, one
/// minimum-jerk segment between each consecutive pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub dt: f64,
    pub segment_duration: f64,
    /// Mass held during lift, move_over and lower, kg.
    pub payload: f64,
    /// Home, grasp, lifted, above place, placed, home.
    pub waypoints: Vec<Vec<f64>>,
    /// Half-width of the uniform per-trial waypoint perturbation, rad.
    pub perturbation: f64,
    pub noise_std: f64,
    pub batch: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            dt: 1.0 / 240.0,
            segment_duration: 3.0,
            payload: 0.857,
            waypoints: default_waypoints(3),
            perturbation: 0.05,
            noise_std: 0.0,
            batch: 5,
        }
    }
}

/// Default pick-and-place waypoints for a `joints`-joint arm. Moves of at most
/// 0.3 rad over the default 3 s keep |q|, |dq| and |ddq| close to the range of
/// the 0.5 rad sine runs.
pub fn default_waypoints(joints: usize) -> Vec<Vec<f64>> {
    let base: [[f64; 3]; 6] = [
        [0.0, 0.0, 0.0],
        [0.3, -0.2, 0.25],
        [0.25, 0.1, 0.4],
        [-0.05, 0.3, 0.4],
        [-0.2, 0.05, 0.2],
        [0.0, 0.0, 0.0],
    ];
    base.iter()
        .map(|w| (0..joints).map(|i| w[i % 3] * 0.85f64.powi((i / 3) as i32)).collect())
        .collect()
}

impl TaskConfig {
    pub fn validate(&self, joints: usize) -> Result<()> {
        if self.waypoints.len() != SegmentName::ALL.len() + 1 {
            return Err(Error::InvalidArgument(format!(
                "task needs {} waypoints, got {}",
                SegmentName::ALL.len() + 1,
                self.waypoints.len()
            )));
        }
        if let Some(w) = self.waypoints.iter().find(|w| w.len() != joints) {
            return Err(Error::Dimension {
                expected: joints,
                got: w.len(),
            });
        }
        if !(self.dt > 0.0 && self.segment_duration > 0.0 && self.payload >= 0.0 && self.perturbation >= 0.0 && self.noise_std >= 0.0) {
            return Err(Error::InvalidArgument("task dt, duration, payload, perturbation and noise must be nonnegative (dt, duration positive)".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidArgument("adaptation batch must be positive".into()));
        }
        Ok(())
    }
}

/// Records of one simulated motion segment.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentData {
    pub name: SegmentName,
    pub payload: f64,
    pub records: Vec<DynRecord>,
}

/// Simulates one trial of the task on `arm`: waypoints perturbed by
/// `U(±perturbation)` from `trial_seed`, the arm starting at rest on the
/// first waypoint, and the payload attached during the carrying segments.
/// The arm state carries over between segments.
pub fn simulate_task(arm: &ArmModel, gains: &Gains, cfg: &TaskConfig, trial_seed: u64) -> Result<Vec<SegmentData>> {
    let j = arm.joints();
    cfg.validate(j)?;
    let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
    let waypoints: Vec<Vec<f64>> = cfg
        .waypoints
        .iter()
        .map(|w| {
            w.iter()
                .map(|v| if cfg.perturbation > 0.0 { v + rng.random_range(-cfg.perturbation..cfg.perturbation) } else { *v })
                .collect()
        })
        .collect();
    let mut sim = ArmSim::new(arm.clone(), ArmState::at_rest(waypoints[0].clone()), cfg.dt)?;
    SegmentName::ALL
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let traj = min_jerk_trajectory(&waypoints[i], &waypoints[i + 1], cfg.dt, cfg.segment_duration)?;
            let payload = if name.carries_payload() { cfg.payload } else { 0.0 };
            sim.model.payload = payload;
            let records = track(&mut sim, gains, &traj, cfg.noise_std, &mut rng)?;
            Ok(SegmentData {
                name: *name,
                payload,
                records,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentedReport {
    pub segments: Vec<(SegmentName, AdaptReport)>,
    pub final_theta: ModelParams,
}

/// Adapts on each segment in order, warm-starting every segment from the
/// model the previous one ended with. The optimizer state also carries over.
pub fn run_segmented_task(
    theta0: &ModelParams,
    loss: &LossParams,
    mut opt: Option<OptState>,
    segments: &[SegmentData],
    batch: usize,
) -> Result<SegmentedReport> {
    let mut theta = theta0.clone();
    let mut out = Vec::with_capacity(segments.len());
    for seg in segments {
        let (next, report) = online_adapt(&theta, loss, opt.as_mut(), &seg.records, batch)?;
        theta = next;
        out.push((seg.name, report));
    }
    Ok(SegmentedReport {
        segments: out,
        final_theta: theta,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub model: ModelSpec,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 256,
            optimizer: OptimizerKind::adam(1e-3),
            model: ModelSpec::default(),
            seed: 0,
        }
    }
}

/// Trains a model on `data` with the MSE loss; it is never updated afterwards.
pub fn pretrain_frozen_baseline(data: &DynDataset, cfg: &PretrainConfig) -> Result<ModelParams> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("pretraining dataset is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut theta = cfg.model.init(data.joints, rng.random())?;
    let mut opt = OptState::new(cfg.optimizer.clone())?;
    let k = cfg.batch_size.min(data.runs.iter().map(|r| r.records.len()).max().unwrap_or(0));
    for _ in 0..cfg.steps {
        let (recs, _) = sample_contiguous_batch(data, k, &mut rng)?;
        let (_, _, grads) = task_gradient(&theta, &LossParams::Mse, &Batch::from_records(recs)?)?;
        opt.step(&mut theta.net, &grads)?;
    }
    Ok(theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Run;
    use crate::nn::{Dense, Mlp};

    fn stream(n: usize) -> Vec<DynRecord> {
        (0..n)
            .map(|i| {
                let x = (i as f64 * 0.1).sin();
                DynRecord {
                    q: vec![x, -x],
                    dq: vec![0.5 * x, x],
                    ddq_next: vec![0.0, 1.0],
                    tau: vec![x, 2.0 * x],
                }
            })
            .collect()
    }

    fn small_model(seed: u64) -> ModelParams {
        ModelSpec {
            hidden: vec![8],
            input_norm: None,
        }
        .init(2, seed)
        .unwrap()
    }

    #[test]
    fn window_count_and_remainder() {
        let m = small_model(0);
        let mut opt = OptState::new(OptimizerKind::sgd(0.001)).unwrap();
        let (_, r) = online_adapt(&m, &LossParams::Mse, Some(&mut opt), &stream(2400), 5).unwrap();
        assert_eq!(r.batch_mse.len(), 480);
        assert_eq!(opt.steps(), 480);
        let (_, r) = online_adapt(&m, &LossParams::Mse, None, &stream(23), 5).unwrap();
        assert_eq!(r.batch_mse.len(), 4);
        assert!(online_adapt(&m, &LossParams::Mse, None, &stream(4), 5).is_err());
    }

    #[test]
    fn logs_before_update() {
        let m = small_model(1);
        let s = stream(10);
        let mut opt = OptState::new(OptimizerKind::sgd(0.05)).unwrap();
        let (after, r) = online_adapt(&m, &LossParams::Mse, Some(&mut opt), &s, 5).unwrap();
        assert_eq!(r.batch_mse[0], m.mse(&Batch::from_records(&s[..5]).unwrap()).unwrap());
        assert_ne!(after, m);
    }

    /// Model whose output layer reads `tau = (q_0, -2 q_1)` exactly.
    fn perfect_model() -> ModelParams {
        // hidden relu(±q) units, so the net is linear in q
        let mut w0 = vec![0.0; 6 * 4];
        w0[0] = 1.0; // q_0 → h0
        w0[1] = -1.0; // q_0 → h1
        w0[4 + 2] = 1.0; // q_1 → h2
        w0[4 + 3] = -1.0; // q_1 → h3
        ModelParams {
            joints: 2,
            net: Mlp {
                layers: vec![
                    Dense {
                        shape: [6, 4],
                        weight: w0,
                        bias: vec![0.0; 4],
                    },
                    Dense {
                        shape: [4, 2],
                        weight: vec![1.0, 0.0, -1.0, 0.0, 0.0, -2.0, 0.0, 2.0],
                        bias: vec![0.0; 2],
                    },
                ],
            },
            input_norm: None,
        }
    }

    #[test]
    fn perfect_model_is_left_unchanged() {
        let m = perfect_model();
        let s = stream(50);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for v in [LossVariant::Mse, LossVariant::Structured, LossVariant::StateDependent] {
            let loss = LossParams::init(v, 2, &mut rng);
            let mut opt = OptState::new(OptimizerKind::sgd(0.01)).unwrap();
            let (after, r) = online_adapt(&m, &loss, Some(&mut opt), &s, 5).unwrap();
            assert!(r.batch_mse.iter().all(|e| *e == 0.0), "{v}");
            assert_eq!(after, m, "{v}");
        }
    }

    #[test]
    fn non_finite_update_reports_step() {
        let m = small_model(2);
        let mut s = stream(20);
        s[12].tau[0] = 1e300;
        let mut opt = OptState::new(OptimizerKind::sgd(1.0)).unwrap();
        match online_adapt(&m, &LossParams::Mse, Some(&mut opt), &s, 5) {
            Err(Error::AdaptDiverged { step, .. }) => assert_eq!(step, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn segments_are_continuous_and_payload_placed() {
        let arm = ArmModel::planar(3);
        let cfg = TaskConfig {
            segment_duration: 0.5,
            ..TaskConfig::default()
        };
        let segs = simulate_task(&arm, &Gains::default_for(3), &cfg, 7).unwrap();
        assert_eq!(segs.len(), 5);
        let payloads: Vec<f64> = segs.iter().map(|s| s.payload).collect();
        assert_eq!(payloads, vec![0.0, 0.857, 0.857, 0.857, 0.0]);
        assert!(segs.iter().all(|s| s.records.len() == 120));
        assert_eq!(segs, simulate_task(&arm, &Gains::default_for(3), &cfg, 7).unwrap());
        assert_ne!(segs, simulate_task(&arm, &Gains::default_for(3), &cfg, 8).unwrap());
        // the next segment starts where the previous one ended
        for w in segs.windows(2) {
            let last = w[0].records.last().unwrap();
            let first = &w[1].records[0];
            let dt = cfg.dt;
            for i in 0..3 {
                let dq = last.dq[i] + dt * last.ddq_next[i];
                assert!((first.dq[i] - dq).abs() < 1e-9);
                assert!((first.q[i] - (last.q[i] + dt * dq)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn default_task_stays_near_sine_envelope() {
        let cfg = TaskConfig::default();
        for seed in 0..3 {
            let segs = simulate_task(&ArmModel::planar(3), &Gains::default_for(3), &cfg, seed).unwrap();
            let recs: Vec<&DynRecord> = segs.iter().flat_map(|s| &s.records).collect();
            let max_abs = |f: fn(&DynRecord) -> &Vec<f64>| recs.iter().flat_map(|r| f(r)).fold(0.0f64, |m, v| m.max(v.abs()));
            let (q, dq) = (max_abs(|r| &r.q), max_abs(|r| &r.dq));
            // picking up and releasing the payload jolts the arm briefly
            let mut ddq: Vec<f64> = recs.iter().flat_map(|r| r.ddq_next.iter().map(|v| v.abs())).collect();
            ddq.sort_by(f64::total_cmp);
            let p99 = ddq[ddq.len() * 99 / 100];
            assert!(q < 0.55 && dq < 0.35 && p99 < 0.5, "seed {seed}: |q| {q}, |dq| {dq}, p99 |ddq| {p99}");
        }
    }

    #[test]
    fn warm_start_carries_theta_bit_exactly() {
        let arm = ArmModel::planar(2);
        let cfg = TaskConfig {
            segment_duration: 1.0,
            waypoints: default_waypoints(2),
            ..TaskConfig::default()
        };
        let segs = simulate_task(&arm, &Gains::default_for(2), &cfg, 1).unwrap();
        let m = small_model(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loss = LossParams::init(LossVariant::Structured, 2, &mut rng);
        let opt = OptState::new(OptimizerKind::sgd(0.001)).unwrap();
        let rep = run_segmented_task(&m, &loss, Some(opt.clone()), &segs, 5).unwrap();
        let mut theta = m.clone();
        let mut o = opt;
        for (seg, (name, r)) in segs.iter().zip(&rep.segments) {
            let (next, r2) = online_adapt(&theta, &loss, Some(&mut o), &seg.records, 5).unwrap();
            assert_eq!(&r2, r);
            assert_eq!(*name, seg.name);
            theta = next;
        }
        assert_eq!(theta, rep.final_theta);
    }

    #[test]
    fn frozen_baseline_is_deterministic_and_never_updated() {
        let runs = vec![Run {
            freq: 0.1,
            records: stream(300),
        }];
        let data = DynDataset::new(0.01, 2, runs).unwrap();
        let cfg = PretrainConfig {
            steps: 50,
            batch_size: 64,
            model: ModelSpec {
                hidden: vec![8],
                input_norm: None,
            },
            ..PretrainConfig::default()
        };
        let pre = pretrain_frozen_baseline(&data, &cfg).unwrap();
        assert_eq!(pre, pretrain_frozen_baseline(&data, &cfg).unwrap());
        let fresh = cfg.model.init(2, ChaCha8Rng::seed_from_u64(0).random()).unwrap();
        let all = Batch::from_records(&data.runs[0].records).unwrap();
        assert!(pre.mse(&all).unwrap() < fresh.mse(&all).unwrap());
        let snapshot = pre.clone();
        let (after, r) = online_adapt(&pre, &LossParams::Mse, None, &stream(100), 5).unwrap();
        assert_eq!(after, snapshot);
        assert_eq!(pre, snapshot);
        assert!(r.optimizer.is_none());
    }
}
