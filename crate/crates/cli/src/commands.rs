//! The experiment commands. Each writes its outputs plus a manifest into an
//! output directory and returns the names of the files it wrote.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write as _};
use std::path::{Path, PathBuf};

use metaloss::adapt::{online_adapt, pretrain_frozen_baseline, run_segmented_task, simulate_task, AdaptReport, SegmentName};
use metaloss::dataset::{collect_sine_dataset, read_csv, split_by_frequency, write_csv, DynDataset};
use metaloss::loss::{export_phi, LossParams, LossVariant, PhiTable};
use metaloss::meta::{eval_learned_loss, meta_train as run_meta_train, EvalCurves};
use metaloss::model::{ModelParams, ModelSpec, OptState, OptimizerKind};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};
use crate::manifest::Outputs;

pub const DATA_FILE: &str = "data.csv";

/// Simulates the configured sine schedule.
pub fn collect_dataset(cfg: &ExperimentConfig) -> Result<DynDataset> {
    Ok(collect_sine_dataset(&cfg.arm, &cfg.gains, &cfg.collection, cfg.seed)?)
}

/// Train and test splits of `data` under the configured frequency lists.
pub fn split(cfg: &ExperimentConfig, data: &DynDataset) -> Result<(DynDataset, DynDataset)> {
    if data.joints != cfg.joints() {
        return Err(CliError::Config(format!(
            "dataset has {} joints, configured arm has {}",
            data.joints,
            cfg.joints()
        )));
    }
    Ok(split_by_frequency(data, &cfg.split.train, &cfg.split.test)?)
}

fn load_data(path: &Path) -> Result<DynDataset> {
    if !path.exists() {
        return Err(CliError::Missing(format!("dataset {} (run gen-data first)", path.display())));
    }
    Ok(read_csv(path)?)
}

#[derive(Serialize)]
struct SplitManifest<'a> {
    train: &'a [f64],
    test: &'a [f64],
    train_runs: usize,
    test_runs: usize,
    train_records: usize,
    test_records: usize,
}

pub fn gen_data(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<String>> {
    let mut out = Outputs::new(out_dir)?;
    let data = collect_dataset(cfg)?;
    let (train, test) = split(cfg, &data)?;
    write_csv(&data, &out.path(DATA_FILE))?;
    out.record(DATA_FILE);
    let manifest = SplitManifest {
        train: &cfg.split.train,
        test: &cfg.split.test,
        train_runs: train.runs.len(),
        test_runs: test.runs.len(),
        train_records: train.len(),
        test_records: test.len(),
    };
    out.write("split.json", &(serde_json::to_string_pretty(&manifest)? + "\n"))?;
    out.finish("gen-data", cfg, &[])
}

/// Meta-trained loss parameters as stored on disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhiCheckpoint {
    pub variant: LossVariant,
    pub joints: usize,
    pub seed: u64,
    pub epochs: usize,
    pub phi: LossParams,
}

pub fn phi_file(v: LossVariant) -> String {
    format!("phi_{v}.json")
}

pub fn load_checkpoint(dir: &Path, v: LossVariant) -> Result<PhiCheckpoint> {
    let p = dir.join(phi_file(v));
    if !p.exists() {
        return Err(CliError::Missing(format!("checkpoint {} (run meta-train first)", p.display())));
    }
    let text = fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
    let ck: PhiCheckpoint = serde_json::from_str(&text)?;
    if ck.variant != v {
        return Err(CliError::Config(format!("{} holds a {} loss", p.display(), ck.variant)));
    }
    Ok(ck)
}

pub const EPOCH_HEADER: &str = "epoch,variant,seed,split,final_mse_after_100_steps";

fn epoch_rows(epoch: usize, v: LossVariant, split: &str, seeds: &[u64], c: &EvalCurves) -> String {
    let mut s = String::new();
    for (seed, m) in seeds.iter().zip(&c.final_mse) {
        let _ = writeln!(s, "{epoch},{v},{seed},{split},{m:?}");
    }
    s
}

fn meta_train_variant(cfg: &ExperimentConfig, v: LossVariant, train: &DynDataset, test: &DynDataset, spec: &ModelSpec, out_dir: &Path) -> Result<PhiCheckpoint> {
    let epochs_path = out_dir.join(format!("meta_epochs_{v}.csv"));
    let outer_path = out_dir.join(format!("meta_outer_{v}.csv"));
    let create = |p: &Path| File::create(p).map(BufWriter::new).map_err(|e| CliError::io(p, e));
    let mut epochs_log = create(&epochs_path)?;
    let mut outer_log = create(&outer_path)?;
    writeln!(epochs_log, "{EPOCH_HEADER}").map_err(|e| CliError::io(&epochs_path, e))?;
    writeln!(outer_log, "epoch,mean_outer_loss,max_outer_loss").map_err(|e| CliError::io(&outer_path, e))?;
    let eval_cfg = cfg.eval_config(&cfg.epoch_eval, spec.clone());
    let meta_cfg = cfg.meta_config(Some(spec.clone()));
    let outcome = run_meta_train(&meta_cfg, v, train, |s, phi| {
        let mut rows = String::new();
        for (name, ds) in [("train", train), ("test", test)] {
            let c = eval_learned_loss(phi, ds, &eval_cfg)?;
            rows += &epoch_rows(s.epoch, v, name, &eval_cfg.seeds, &c);
        }
        epochs_log.write_all(rows.as_bytes())?;
        epochs_log.flush()?;
        writeln!(outer_log, "{},{:?},{:?}", s.epoch, s.mean_outer_loss, s.max_outer_loss)?;
        outer_log.flush()?;
        Ok(())
    })
    .map_err(CliError::context(format!("meta-training {v}")))?;
    Ok(PhiCheckpoint {
        variant: v,
        joints: train.joints,
        seed: cfg.seed,
        epochs: cfg.meta.epochs,
        phi: outcome.phi,
    })
}

/// Meta-trains every variant in `variants` (in parallel), writing per-epoch
/// logs as it goes. A diverging variant keeps its partial logs; the others
/// still finish.
pub fn meta_train(cfg: &ExperimentConfig, data_path: &Path, out_dir: &Path, variants: &[LossVariant]) -> Result<Vec<String>> {
    let mut out = Outputs::new(out_dir)?;
    let data = load_data(data_path)?;
    let (train, test) = split(cfg, &data)?;
    let spec = cfg.model_spec(&train);
    let results: Vec<Result<PhiCheckpoint>> = variants
        .par_iter()
        .map(|v| meta_train_variant(cfg, *v, &train, &test, &spec, out.dir()))
        .collect();
    let mut merged = format!("{EPOCH_HEADER}\n");
    let mut failed = 0;
    for (v, r) in variants.iter().zip(results) {
        let name = format!("meta_epochs_{v}.csv");
        out.record(&name);
        out.record(&format!("meta_outer_{v}.csv"));
        let text = fs::read_to_string(out.path(&name)).map_err(|e| CliError::io(&out.path(&name), e))?;
        merged.extend(text.lines().skip(1).map(|l| format!("{l}\n")));
        match r {
            Ok(ck) => out.write(&phi_file(*v), &(serde_json::to_string_pretty(&ck)? + "\n"))?,
            Err(e) => {
                eprintln!("error: {e}");
                failed += 1;
            }
        }
    }
    out.write("meta_epochs.csv", &merged)?;
    let written = out.finish("meta-train", cfg, &[data_path])?;
    if failed > 0 {
        return Err(CliError::Partial {
            failed,
            total: variants.len(),
        });
    }
    Ok(written)
}

/// Losses to evaluate: plain MSE plus every requested learned loss.
fn losses_with_baseline(phi_dir: &Path, variants: &[LossVariant]) -> Result<Vec<(LossVariant, LossParams)>> {
    let mut losses = vec![(LossVariant::Mse, LossParams::Mse)];
    for v in variants {
        losses.push((*v, load_checkpoint(phi_dir, *v)?.phi));
    }
    Ok(losses)
}

fn curve_csv(seeds: &[u64], c: &EvalCurves) -> String {
    let mut s = String::from("step,mean,std");
    for seed in seeds {
        let _ = write!(s, ",seed_{seed}");
    }
    s.push('\n');
    for i in 0..c.mean.len() {
        let _ = write!(s, "{i},{:?},{:?}", c.mean[i], c.std[i]);
        for row in &c.per_seed {
            let _ = write!(s, ",{:?}", row[i]);
        }
        s.push('\n');
    }
    s
}

/// 100-step training curves for every loss on both splits.
pub fn eval(cfg: &ExperimentConfig, data_path: &Path, phi_dir: &Path, out_dir: &Path, variants: &[LossVariant]) -> Result<Vec<String>> {
    let mut out = Outputs::new(out_dir)?;
    let losses = losses_with_baseline(phi_dir, variants)?;
    let data = load_data(data_path)?;
    let (train, test) = split(cfg, &data)?;
    let spec = cfg.model_spec(&train);
    let eval_cfg = cfg.eval_config(&cfg.eval, spec);
    let jobs: Vec<(LossVariant, &LossParams, &str, &DynDataset)> = losses
        .iter()
        .flat_map(|(v, p)| [(*v, p, "train", &train), (*v, p, "test", &test)])
        .collect();
    let curves: Vec<Result<EvalCurves>> = jobs
        .par_iter()
        .map(|(v, p, name, ds)| eval_learned_loss(p, ds, &eval_cfg).map_err(CliError::context(format!("evaluating {v} on {name}"))))
        .collect();
    let mut finals = String::from("loss,split,seed,final_mse\n");
    for ((v, _, name, _), c) in jobs.iter().zip(curves) {
        let c = c?;
        out.write(&format!("eval_curve_{v}_{name}.csv"), &curve_csv(&eval_cfg.seeds, &c))?;
        for (seed, m) in eval_cfg.seeds.iter().zip(&c.final_mse) {
            let _ = writeln!(finals, "{v},{name},{seed},{m:?}");
        }
    }
    out.write("eval_final.csv", &finals)?;
    let mut inputs: Vec<PathBuf> = vec![data_path.to_path_buf()];
    inputs.extend(variants.iter().map(|v| phi_dir.join(phi_file(*v))));
    let refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    out.finish("eval", cfg, &refs)
}

/// How a model is updated during online adaptation.
#[derive(Clone, Debug)]
pub enum Learner {
    Sgd { loss: LossParams, lr: f64 },
    Adam { lr: f64 },
    Frozen,
}

/// One row of the online comparison.
#[derive(Clone, Debug)]
pub struct LearnerConfig {
    pub label: String,
    pub lr: f64,
    pub learner: Learner,
}

/// mse at each configured rate, Adam on mse, every learned loss at the
/// learned-loss rate, and the pretrained-frozen baseline.
pub fn learner_grid(cfg: &ExperimentConfig, learned: &[(LossVariant, LossParams)]) -> Vec<LearnerConfig> {
    let a = &cfg.adapt;
    let mut grid: Vec<LearnerConfig> = a
        .mse_lrs
        .iter()
        .map(|lr| LearnerConfig {
            label: "mse".into(),
            lr: *lr,
            learner: Learner::Sgd {
                loss: LossParams::Mse,
                lr: *lr,
            },
        })
        .collect();
    grid.push(LearnerConfig {
        label: "adam_mse".into(),
        lr: a.adam_lr,
        learner: Learner::Adam { lr: a.adam_lr },
    });
    for (v, p) in learned {
        grid.push(LearnerConfig {
            label: v.to_string(),
            lr: a.learned_lr,
            learner: Learner::Sgd {
                loss: p.clone(),
                lr: a.learned_lr,
            },
        });
    }
    grid.push(LearnerConfig {
        label: "pretrained_frozen".into(),
        lr: 0.0,
        learner: Learner::Frozen,
    });
    grid
}

/// One (learner, seed, trial) cell of the segmented evaluation.
#[derive(Clone, Debug)]
pub struct SegmentedRun {
    pub label: String,
    pub lr: f64,
    pub seed: u64,
    pub trial: usize,
    pub segments: Vec<(SegmentName, AdaptReport)>,
}

fn start_model(learner: &Learner, fresh: &ModelParams, pretrained: &ModelParams) -> (ModelParams, LossParams, Option<OptState>) {
    match learner {
        Learner::Sgd { loss, lr } => (fresh.clone(), loss.clone(), Some(OptState::new(OptimizerKind::sgd(*lr)).expect("validated lr"))),
        Learner::Adam { lr } => (fresh.clone(), LossParams::Mse, Some(OptState::new(OptimizerKind::adam(*lr)).expect("validated lr"))),
        Learner::Frozen => (pretrained.clone(), LossParams::Mse, None),
    }
}

/// Runs the segmented payload task for every learner, model seed and trial.
/// Adapted models start from a fresh model per seed; the frozen baseline is
/// pretrained on `train` with the same seed.
pub fn segmented_grid(cfg: &ExperimentConfig, train: &DynDataset, learned: &[(LossVariant, LossParams)]) -> Result<Vec<SegmentedRun>> {
    let spec = cfg.model_spec(train);
    let a = &cfg.adapt;
    let trials = (0..a.trials)
        .into_par_iter()
        .map(|t| simulate_task(&cfg.arm, &cfg.gains, &a.task, trial_seed(cfg, t)))
        .collect::<metaloss::Result<Vec<_>>>()?;
    let seeds: Vec<u64> = a.seeds.iter().map(|s| cfg.seed.wrapping_add(*s)).collect();
    let starts = seeds
        .par_iter()
        .map(|s| Ok((spec.init(cfg.joints(), *s)?, pretrain_frozen_baseline(train, &cfg.pretrain_config(spec.clone(), *s))?)))
        .collect::<Result<Vec<_>>>()?;
    let grid = learner_grid(cfg, learned);
    let (ns, nt) = (seeds.len(), trials.len());
    let cells: Vec<(usize, usize, usize)> = (0..grid.len())
        .flat_map(|g| (0..ns).flat_map(move |s| (0..nt).map(move |t| (g, s, t))))
        .collect();
    cells
        .par_iter()
        .map(|&(g, s, t)| {
            let lc = &grid[g];
            let (theta, loss, opt) = start_model(&lc.learner, &starts[s].0, &starts[s].1);
            let rep = run_segmented_task(&theta, &loss, opt, &trials[t], a.task.batch)
                .map_err(CliError::context(format!("{} (lr {}) seed {} trial {t}", lc.label, lc.lr, seeds[s])))?;
            Ok(SegmentedRun {
                label: lc.label.clone(),
                lr: lc.lr,
                seed: seeds[s],
                trial: t,
                segments: rep.segments,
            })
        })
        .collect()
}

pub fn trial_seed(cfg: &ExperimentConfig, trial: usize) -> u64 {
    cfg.seed.wrapping_add(10_000 + trial as u64)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Per (segment, learner): mean and std over seeds and trials of the
/// per-run segment means, in grid order.
pub fn segment_summary(runs: &[SegmentedRun]) -> Vec<(SegmentName, String, f64, f64, f64)> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for r in runs {
        if !keys.iter().any(|(l, lr)| *l == r.label && *lr == r.lr) {
            keys.push((r.label.clone(), r.lr));
        }
    }
    let mut rows = Vec::new();
    for seg in SegmentName::ALL {
        for (label, lr) in &keys {
            let means: Vec<f64> = runs
                .iter()
                .filter(|r| r.label == *label && r.lr == *lr)
                .flat_map(|r| r.segments.iter().filter(|(n, _)| *n == seg).map(|(_, a)| a.mean))
                .collect();
            if means.is_empty() {
                continue;
            }
            let (m, s) = mean_std(&means);
            rows.push((seg, label.clone(), *lr, m, s));
        }
    }
    rows
}

fn checkpoints(phi_dir: &Path, variants: &[LossVariant]) -> Result<Vec<(LossVariant, LossParams)>> {
    variants.iter().map(|v| Ok((*v, load_checkpoint(phi_dir, *v)?.phi))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OnlineMode {
    Segmented,
    Stream,
}

/// Online adaptation: the segmented payload task, or streaming over the
/// held-out runs.
pub fn online(cfg: &ExperimentConfig, data_path: &Path, phi_dir: &Path, out_dir: &Path, variants: &[LossVariant], mode: OnlineMode) -> Result<Vec<String>> {
    let mut out = Outputs::new(out_dir)?;
    let learned = checkpoints(phi_dir, variants)?;
    let data = load_data(data_path)?;
    let (train, test) = split(cfg, &data)?;
    match mode {
        OnlineMode::Segmented => {
            let runs = segmented_grid(cfg, &train, &learned)?;
            let mut steps = String::from("segment,loss,lr,seed,trial,step,batch_mse\n");
            let mut per_run = String::from("segment,loss,lr,seed,trial,mean,std\n");
            for r in &runs {
                for (seg, rep) in &r.segments {
                    for (i, m) in rep.batch_mse.iter().enumerate() {
                        let _ = writeln!(steps, "{seg},{},{:?},{},{},{i},{m:?}", r.label, r.lr, r.seed, r.trial);
                    }
                    let _ = writeln!(per_run, "{seg},{},{:?},{},{},{:?},{:?}", r.label, r.lr, r.seed, r.trial, rep.mean, rep.std);
                }
            }
            let mut summary = String::from("segment,loss,lr,mean,std\n");
            for (seg, label, lr, m, s) in segment_summary(&runs) {
                let _ = writeln!(summary, "{seg},{label},{lr:?},{m:?},{s:?}");
            }
            out.write("online_steps.csv", &steps)?;
            out.write("online_runs.csv", &per_run)?;
            out.write("online_summary.csv", &summary)?;
        }
        OnlineMode::Stream => {
            let spec = cfg.model_spec(&train);
            let grid = learner_grid(cfg, &learned);
            let seeds: Vec<u64> = cfg.adapt.seeds.iter().map(|s| cfg.seed.wrapping_add(*s)).collect();
            let starts = seeds
                .par_iter()
                .map(|s| Ok((spec.init(cfg.joints(), *s)?, pretrain_frozen_baseline(&train, &cfg.pretrain_config(spec.clone(), *s))?)))
                .collect::<Result<Vec<_>>>()?;
            let (ng, ns) = (grid.len(), seeds.len());
            let cells: Vec<(usize, usize, usize)> = (0..test.runs.len())
                .flat_map(|r| (0..ng).flat_map(move |g| (0..ns).map(move |s| (r, g, s))))
                .collect();
            let reports = cells
                .par_iter()
                .map(|&(r, g, s)| {
                    let lc = &grid[g];
                    let (theta, loss, mut opt) = start_model(&lc.learner, &starts[s].0, &starts[s].1);
                    online_adapt(&theta, &loss, opt.as_mut(), &test.runs[r].records, cfg.adapt.task.batch)
                        .map(|(_, rep)| rep)
                        .map_err(CliError::context(format!("{} (lr {}) seed {} run {}", lc.label, lc.lr, seeds[s], test.runs[r].freq)))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut steps = String::from("freq,loss,lr,seed,step,batch_mse\n");
            let mut summary = String::from("freq,loss,lr,mean,std\n");
            let mut means: Vec<f64> = Vec::new();
            for (k, (&(r, g, s), rep)) in cells.iter().zip(&reports).enumerate() {
                let lc = &grid[g];
                let freq = test.runs[r].freq;
                for (i, m) in rep.batch_mse.iter().enumerate() {
                    let _ = writeln!(steps, "{freq:?},{},{:?},{},{i},{m:?}", lc.label, lc.lr, seeds[s]);
                }
                means.push(rep.mean);
                let last_seed = k + 1 == cells.len() || cells[k + 1].1 != g || cells[k + 1].0 != r;
                if last_seed {
                    let (m, sd) = mean_std(&means);
                    let _ = writeln!(summary, "{freq:?},{},{:?},{m:?},{sd:?}", lc.label, lc.lr);
                    means.clear();
                }
            }
            out.write("stream_steps.csv", &steps)?;
            out.write("stream_summary.csv", &summary)?;
        }
    }
    let mut inputs: Vec<PathBuf> = vec![data_path.to_path_buf()];
    inputs.extend(variants.iter().map(|v| phi_dir.join(phi_file(*v))));
    let refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    let name = match mode {
        OnlineMode::Segmented => "online",
        OnlineMode::Stream => "online-stream",
    };
    out.finish(name, cfg, &refs)
}

#[derive(Serialize)]
struct ReportSummary {
    produced: Vec<String>,
    missing: Vec<String>,
    structured_phi: Option<Vec<f64>>,
    eval_final_mean: Vec<EvalMean>,
    online_summary: Vec<OnlineRow>,
}

#[derive(Serialize)]
struct EvalMean {
    loss: String,
    split: String,
    mean: f64,
    std: f64,
}

#[derive(Serialize)]
struct OnlineRow {
    segment: String,
    loss: String,
    lr: f64,
    mean: f64,
    std: f64,
}

fn read_rows(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    Ok(text.lines().skip(1).filter(|l| !l.is_empty()).map(|l| l.split(',').map(str::to_string).collect()).collect())
}

fn num(s: &str, path: &Path) -> Result<f64> {
    s.parse().map_err(|_| CliError::Config(format!("{}: bad number `{s}`", path.display())))
}

/// φ-weight exports and a consolidated summary from whatever artifacts
/// exist in `out_dir`. Missing inputs are listed and skipped.
pub fn report(cfg: &ExperimentConfig, data_path: &Path, out_dir: &Path) -> Result<Vec<String>> {
    let mut out = Outputs::new(out_dir)?;
    let mut missing = Vec::new();
    let mut produced = Vec::new();
    let mut inputs: Vec<PathBuf> = Vec::new();
    let mut structured_phi = None;

    let sp = out_dir.join(phi_file(LossVariant::Structured));
    if sp.exists() {
        let ck = load_checkpoint(out_dir, LossVariant::Structured)?;
        let table = export_phi(&ck.phi, &[])?;
        if let PhiTable::PerJoint(w) = &table {
            structured_phi = Some(w.clone());
        }
        out.write("phi_structured.csv", &table.to_csv())?;
        produced.push("phi_structured.csv".to_string());
        inputs.push(sp);
    } else {
        missing.push(phi_file(LossVariant::Structured));
    }

    let dp = out_dir.join(phi_file(LossVariant::StateDependent));
    match (dp.exists(), data_path.exists()) {
        (true, true) => {
            let ck = load_checkpoint(out_dir, LossVariant::StateDependent)?;
            let data = read_csv(data_path)?;
            let states: Vec<(Vec<f64>, Vec<f64>)> = data.records().step_by(cfg.probe_stride).map(|r| (r.q.clone(), r.dq.clone())).collect();
            out.write("phi_state_dependent.csv", &export_phi(&ck.phi, &states)?.to_csv())?;
            produced.push("phi_state_dependent.csv".to_string());
            inputs.push(dp);
            inputs.push(data_path.to_path_buf());
        }
        (has_ck, has_data) => {
            if !has_ck {
                missing.push(phi_file(LossVariant::StateDependent));
            }
            if !has_data {
                missing.push(data_path.display().to_string());
            }
        }
    }

    let mut eval_final_mean = Vec::new();
    let ep = out_dir.join("eval_final.csv");
    if ep.exists() {
        let rows = read_rows(&ep)?;
        let mut keys: Vec<(String, String)> = Vec::new();
        for r in &rows {
            let k = (r[0].clone(), r[1].clone());
            if !keys.contains(&k) {
                keys.push(k);
            }
        }
        for (loss, split) in keys {
            let vals = rows
                .iter()
                .filter(|r| r[0] == loss && r[1] == split)
                .map(|r| num(&r[3], &ep))
                .collect::<Result<Vec<_>>>()?;
            let (mean, std) = mean_std(&vals);
            eval_final_mean.push(EvalMean { loss, split, mean, std });
        }
        produced.push("eval_final.csv".to_string());
        inputs.push(ep);
    } else {
        missing.push("eval_final.csv".into());
    }

    let mut online_summary = Vec::new();
    let op = out_dir.join("online_summary.csv");
    if op.exists() {
        for r in read_rows(&op)? {
            online_summary.push(OnlineRow {
                segment: r[0].clone(),
                loss: r[1].clone(),
                lr: num(&r[2], &op)?,
                mean: num(&r[3], &op)?,
                std: num(&r[4], &op)?,
            });
        }
        produced.push("online_summary.csv".to_string());
        inputs.push(op);
    } else {
        missing.push("online_summary.csv".into());
    }

    for m in &missing {
        eprintln!("report: skipping missing {m}");
    }
    if produced.is_empty() {
        return Err(CliError::Missing(format!("no artifacts to report on in {}", out_dir.display())));
    }
    let summary = ReportSummary {
        produced,
        missing,
        structured_phi,
        eval_final_mean,
        online_summary,
    };
    out.write("report_summary.json", &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    let refs: Vec<&Path> = inputs.iter().map(|p| p.as_path()).collect();
    out.finish("report", cfg, &refs)
}
