//! Inverse dynamics records `(q_t, dq_t, ddq_{t+1}, τ_t)` grouped by run.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use metaloss_autodiff::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::arm::{pd_ff_control, sine_trajectory, ArmModel, ArmSim, ArmState, Gains, RefTrajectory};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DynRecord {
    pub q: Vec<f64>,
    pub dq: Vec<f64>,
    /// Acceleration observed over the following step.
    pub ddq_next: Vec<f64>,
    /// Torque applied (as sensed) at this step.
    pub tau: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Run {
    pub freq: f64,
    pub records: Vec<DynRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DynDataset {
    pub dt: f64,
    pub joints: usize,
    pub runs: Vec<Run>,
}

impl DynDataset {
    pub fn new(dt: f64, joints: usize, runs: Vec<Run>) -> Result<Self> {
        if !(dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
        }
        for run in &runs {
            for r in &run.records {
                for v in [&r.q, &r.dq, &r.ddq_next, &r.tau] {
                    if v.len() != joints {
                        return Err(Error::Dimension {
                            expected: joints,
                            got: v.len(),
                        });
                    }
                }
            }
        }
        Ok(Self { dt, joints, runs })
    }

    pub fn len(&self) -> usize {
        self.runs.iter().map(|r| r.records.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> impl Iterator<Item = &DynRecord> {
        self.runs.iter().flat_map(|r| r.records.iter())
    }

    pub fn frequencies(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.freq).collect()
    }
}

/// Dense batch view: four `B × J` matrices.
#[derive(Clone, Debug)]
pub struct Batch {
    pub q: Tensor,
    pub dq: Tensor,
    pub ddq: Tensor,
    pub tau: Tensor,
}

impl Batch {
    pub fn from_records(records: &[DynRecord]) -> Result<Self> {
        let j = records.first().map_or(0, |r| r.q.len());
        let mat = |f: &dyn Fn(&DynRecord) -> &Vec<f64>| -> Result<Tensor> {
            let mut data = Vec::with_capacity(records.len() * j);
            for r in records {
                data.extend_from_slice(f(r));
            }
            Ok(Tensor::matrix(records.len(), j, data)?)
        };
        Ok(Self {
            q: mat(&|r| &r.q)?,
            dq: mat(&|r| &r.dq)?,
            ddq: mat(&|r| &r.ddq_next)?,
            tau: mat(&|r| &r.tau)?,
        })
    }

    pub fn len(&self) -> usize {
        self.q.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Model input `[q | dq | ddq]`, `B × 3J`.
    pub fn inputs(&self) -> Tensor {
        let (b, j) = (self.len(), self.q.shape()[1]);
        let mut data = Vec::with_capacity(b * 3 * j);
        for r in 0..b {
            data.extend_from_slice(self.q.row(r));
            data.extend_from_slice(self.dq.row(r));
            data.extend_from_slice(self.ddq.row(r));
        }
        Tensor::matrix(b, 3 * j, data).expect("finite batch data")
    }
}

/// Tracks `traj` with PD feedback (no feedforward) from the reference's
/// initial state and logs one record per transition. Sensor noise of standard
/// deviation `noise_std` is added to the logged torques only.
pub fn collect_run<R: Rng>(
    model: &ArmModel,
    gains: &Gains,
    traj: &RefTrajectory,
    noise_std: f64,
    rng: &mut R,
) -> Result<Vec<DynRecord>> {
    if traj.is_empty() {
        gains.validate(model.joints())?;
        return Ok(Vec::new());
    }
    let start = ArmState::new(traj.q[0].clone(), traj.dq[0].clone());
    let mut sim = ArmSim::new(model.clone(), start, traj.dt)?;
    track(&mut sim, gains, traj, noise_std, rng)
}

/// Like [`collect_run`] but continues from the simulator's current state, so
/// consecutive trajectories can be tracked without resetting the arm.
pub fn track<R: Rng>(
    sim: &mut ArmSim,
    gains: &Gains,
    traj: &RefTrajectory,
    noise_std: f64,
    rng: &mut R,
) -> Result<Vec<DynRecord>> {
    let j = sim.model.joints();
    gains.validate(j)?;
    if traj.is_empty() {
        return Ok(Vec::new());
    }
    if (traj.dt - sim.dt).abs() > 1e-15 {
        return Err(Error::InvalidArgument(format!(
            "trajectory dt {} differs from simulator dt {}",
            traj.dt, sim.dt
        )));
    }
    let noise = Normal::new(0.0, noise_std.max(0.0))
        .map_err(|e| Error::InvalidArgument(format!("noise std: {e}")))?;
    let zero = vec![0.0; j];
    let mut out = Vec::with_capacity(traj.len() - 1);
    for t in 0..traj.len() - 1 {
        let state = sim.state.clone();
        let tau = pd_ff_control(&traj.q[t], &traj.dq[t], &zero, &state, gains)?;
        let next = sim.step(&tau)?;
        let ddq_next = next.dq.iter().zip(&state.dq).map(|(a, b)| (a - b) / traj.dt).collect();
        let sensed = if noise_std > 0.0 {
            tau.iter().map(|t| t + noise.sample(rng)).collect()
        } else {
            tau
        };
        out.push(DynRecord {
            q: state.q,
            dq: state.dq,
            ddq_next,
            tau: sensed,
        });
    }
    Ok(out)
}

/// Sine-motion collection schedule: one run per frequency.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SineSchedule {
    pub dt: f64,
    pub duration: f64,
    pub frequencies: Vec<f64>,
    pub amplitude: Vec<f64>,
    pub q_rest: Vec<f64>,
    pub noise_std: f64,
}

/// Collects one run per scheduled frequency; run `i` draws its sensor noise
/// from a generator seeded with `seed + i`.
pub fn collect_sine_dataset(model: &ArmModel, gains: &Gains, sched: &SineSchedule, seed: u64) -> Result<DynDataset> {
    let runs = sched
        .frequencies
        .iter()
        .enumerate()
        .map(|(i, &freq)| {
            let wrap = |e: Error| Error::Run {
                freq,
                source: Box::new(e),
            };
            let traj = sine_trajectory(&sched.amplitude, freq, sched.dt, sched.duration, &sched.q_rest).map_err(wrap)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(i as u64));
            let records = collect_run(model, gains, &traj, sched.noise_std, &mut rng).map_err(wrap)?;
            Ok(Run { freq, records })
        })
        .collect::<Result<Vec<_>>>()?;
    DynDataset::new(sched.dt, model.joints(), runs)
}

fn freq_in(list: &[f64], f: f64) -> bool {
    list.iter().any(|x| (x - f).abs() <= 1e-12 * x.abs().max(1.0))
}

/// Partitions runs into (train, test) by frequency, preserving run order.
pub fn split_by_frequency(ds: &DynDataset, train: &[f64], test: &[f64]) -> Result<(DynDataset, DynDataset)> {
    for f in train {
        if freq_in(test, *f) {
            return Err(Error::Split(format!("{f} Hz is assigned to both splits")));
        }
    }
    let mut a = Vec::new();
    let mut b = Vec::new();
    for run in &ds.runs {
        match (freq_in(train, run.freq), freq_in(test, run.freq)) {
            (true, false) => a.push(run.clone()),
            (false, true) => b.push(run.clone()),
            _ => {
                return Err(Error::Split(format!(
                    "run at {} Hz is not assigned to a split",
                    run.freq
                )))
            }
        }
    }
    Ok((
        DynDataset::new(ds.dt, ds.joints, a)?,
        DynDataset::new(ds.dt, ds.joints, b)?,
    ))
}

/// Where a contiguous batch was taken from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchOrigin {
    pub run: usize,
    pub start: usize,
}

/// `k` consecutive records from a single run: a uniformly random run among
/// those long enough, then a uniformly random start index.
pub fn sample_contiguous_batch<'a, R: Rng>(ds: &'a DynDataset, k: usize, rng: &mut R) -> Result<(&'a [DynRecord], BatchOrigin)> {
    let eligible: Vec<usize> = (0..ds.runs.len()).filter(|i| ds.runs[*i].records.len() >= k && k > 0).collect();
    if eligible.is_empty() {
        let longest = ds.runs.iter().map(|r| r.records.len()).max().unwrap_or(0);
        return Err(Error::BatchTooLarge { requested: k, longest });
    }
    let run = eligible[rng.random_range(0..eligible.len())];
    let n = ds.runs[run].records.len();
    let start = rng.random_range(0..=n - k);
    Ok((&ds.runs[run].records[start..start + k], BatchOrigin { run, start }))
}

fn csv_header(j: usize) -> String {
    let mut h = String::from("t,freq");
    for prefix in ["q", "dq", "ddqn", "tau"] {
        for i in 0..j {
            let _ = write!(h, ",{prefix}_{i}");
        }
    }
    h
}

/// Serializes with shortest round-trip decimal formatting, so reading the
/// file back reproduces every value bit for bit.
pub fn to_csv_string(ds: &DynDataset) -> String {
    let mut s = csv_header(ds.joints);
    s.push('\n');
    for run in &ds.runs {
        for (t, r) in run.records.iter().enumerate() {
            let _ = write!(s, "{:?},{:?}", t as f64 * ds.dt, run.freq);
            for v in r.q.iter().chain(&r.dq).chain(&r.ddq_next).chain(&r.tau) {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
    }
    s
}

pub fn write_csv(ds: &DynDataset, path: &Path) -> Result<()> {
    fs::write(path, to_csv_string(ds))?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<DynDataset> {
    parse_csv(&fs::read_to_string(path)?)
}

/// Parses the dataset format. A new run starts whenever the frequency
/// changes or the time column returns to zero; `dt` is recovered from the
/// second row of any run.
pub fn parse_csv(text: &str) -> Result<DynDataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "empty file".into(),
    })?;
    let cols: Vec<&str> = header.trim().split(',').collect();
    if cols.len() < 6 || (cols.len() - 2) % 4 != 0 {
        return Err(Error::Parse {
            line: 1,
            msg: format!("unexpected column count {}", cols.len()),
        });
    }
    let j = (cols.len() - 2) / 4;
    if header.trim() != csv_header(j) {
        return Err(Error::Parse {
            line: 1,
            msg: format!("header must be `{}`", csv_header(j)),
        });
    }

    let mut runs: Vec<Run> = Vec::new();
    let mut dt: Option<f64> = None;
    let mut prev_t = 0.0;
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim().split(',').collect();
        if fields.len() != cols.len() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected {} fields, found {}", cols.len(), fields.len()),
            });
        }
        let mut vals = Vec::with_capacity(fields.len());
        for f in &fields {
            let v: f64 = f.parse().map_err(|_| Error::Parse {
                line: line_no,
                msg: format!("not a number: `{f}`"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("non-finite value `{f}`"),
                });
            }
            vals.push(v);
        }
        let (t, freq) = (vals[0], vals[1]);
        let record = DynRecord {
            q: vals[2..2 + j].to_vec(),
            dq: vals[2 + j..2 + 2 * j].to_vec(),
            ddq_next: vals[2 + 2 * j..2 + 3 * j].to_vec(),
            tau: vals[2 + 3 * j..2 + 4 * j].to_vec(),
        };
        let continues = matches!(runs.last(), Some(r) if r.freq == freq && t != 0.0);
        if continues {
            let run = runs.last_mut().unwrap();
            if run.records.len() == 1 && dt.is_none() {
                dt = Some(t - prev_t);
            }
            run.records.push(record);
        } else {
            if t != 0.0 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: "run does not start at t = 0".into(),
                });
            }
            runs.push(Run {
                freq,
                records: vec![record],
            });
        }
        prev_t = t;
    }
    if runs.is_empty() {
        return Err(Error::Parse {
            line: 2,
            msg: "no records".into(),
        });
    }
    let dt = dt.ok_or(Error::Parse {
        line: 2,
        msg: "cannot infer dt: every run has a single record".into(),
    })?;
    if !(dt > 0.0) {
        return Err(Error::Parse {
            line: 3,
            msg: format!("non-increasing time column (dt = {dt})"),
        });
    }
    DynDataset::new(dt, j, runs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dataset(freqs: &[f64], noise: f64, seed: u64) -> DynDataset {
        let model = ArmModel::planar(2);
        let gains = Gains::default_for(2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let runs = freqs
            .iter()
            .map(|f| {
                let tr = sine_trajectory(&[0.5, 0.5], *f, 1.0 / 240.0, 0.5, &[0.2, 0.3]).unwrap();
                Run {
                    freq: *f,
                    records: collect_run(&model, &gains, &tr, noise, &mut rng).unwrap(),
                }
            })
            .collect();
        DynDataset::new(1.0 / 240.0, 2, runs).unwrap()
    }

    #[test]
    fn run_length_is_trajectory_minus_one() {
        let ds = small_dataset(&[0.05], 0.0, 0);
        assert_eq!(ds.runs[0].records.len(), 120);
    }

    #[test]
    fn collection_is_deterministic() {
        assert_eq!(small_dataset(&[0.05, 0.07], 0.1, 3), small_dataset(&[0.05, 0.07], 0.1, 3));
        assert_ne!(small_dataset(&[0.05], 0.1, 3), small_dataset(&[0.05], 0.1, 4));
    }

    #[test]
    fn noiseless_torque_is_rigid_body_plus_friction() {
        let ds = small_dataset(&[0.09], 0.0, 0);
        let model = ArmModel::planar(2);
        let dt = ds.dt;
        for r in ds.records().step_by(17) {
            let id = model.inverse_dynamics(&r.q, &r.dq, &r.ddq_next).unwrap();
            // friction acts at the end-of-step velocity
            let v: Vec<f64> = r.dq.iter().zip(&r.ddq_next).map(|(v, a)| v + dt * a).collect();
            let fr = model.friction(&v);
            for i in 0..2 {
                assert!((id[i] + fr[i] - r.tau[i]).abs() < 1e-8, "{} vs {}", id[i] + fr[i], r.tau[i]);
            }
        }
    }

    #[test]
    fn split_counts_and_errors() {
        let freqs: Vec<f64> = (1..=9).map(|i| i as f64 / 100.0).collect();
        let ds = small_dataset(&freqs, 0.0, 0);
        let (a, b) = split_by_frequency(&ds, &[0.01, 0.03, 0.05, 0.06, 0.07, 0.08], &[0.02, 0.04, 0.09]).unwrap();
        assert_eq!((a.runs.len(), b.runs.len()), (6, 3));
        assert_eq!(a.len() + b.len(), ds.len());
        assert!(split_by_frequency(&ds, &[0.01, 0.02], &[0.02]).is_err());
        assert!(split_by_frequency(&ds, &[0.01], &[0.02]).is_err());
    }

    #[test]
    fn batch_whole_run_and_too_large() {
        let ds = small_dataset(&[0.05, 0.06], 0.0, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (b, origin) = sample_contiguous_batch(&ds, 120, &mut rng).unwrap();
        assert_eq!(b.len(), 120);
        assert_eq!(origin.start, 0);
        assert!(matches!(
            sample_contiguous_batch(&ds, 121, &mut rng),
            Err(Error::BatchTooLarge { requested: 121, longest: 120 })
        ));
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let ds = small_dataset(&[0.01, 0.02, 0.02], 0.05, 9);
        let back = parse_csv(&to_csv_string(&ds)).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn csv_errors() {
        assert!(matches!(parse_csv(""), Err(Error::Parse { line: 1, .. })));
        let ds = small_dataset(&[0.01], 0.0, 0);
        let text = to_csv_string(&ds);
        let missing_col: String = text
            .lines()
            .map(|l| l.rsplit_once(',').unwrap().0.to_string() + "\n")
            .collect();
        assert!(matches!(parse_csv(&missing_col), Err(Error::Parse { line: 1, .. })));
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        lines[3] = lines[3].replacen(',', ",x", 2);
        let bad = lines.join("\n");
        assert!(matches!(parse_csv(&bad), Err(Error::Parse { line: 4, .. })));
    }

    #[test]
    fn batch_inputs_layout() {
        let ds = small_dataset(&[0.05], 0.0, 0);
        let recs = &ds.runs[0].records[..4];
        let b = Batch::from_records(recs).unwrap();
        let x = b.inputs();
        assert_eq!(x.shape(), &[4, 6]);
        assert_eq!(x.row(2)[..2], recs[2].q[..]);
        assert_eq!(x.row(2)[4..], recs[2].ddq_next[..]);
    }

    #[test]
    fn sine_schedule_nine_runs_of_2400() {
        let sched = SineSchedule {
            dt: 1.0 / 240.0,
            duration: 10.0,
            frequencies: (1..=9).map(|i| i as f64 / 100.0).collect(),
            amplitude: vec![1.0, 0.8, 0.6],
            q_rest: vec![0.0; 3],
            noise_std: 0.0,
        };
        let ds = collect_sine_dataset(&ArmModel::planar(3), &Gains::default_for(3), &sched, 0).unwrap();
        assert_eq!(ds.runs.len(), 9);
        assert!(ds.runs.iter().all(|r| r.records.len() == 2400));
        assert_eq!(ds.frequencies(), sched.frequencies);
    }
}
