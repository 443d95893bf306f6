//! Runners behind the command-line subcommands.
//!
//! Training visits the training set cyclically: step `t` uses images
//! `t*batch .. (t+1)*batch` modulo the set size. With more than one thread the
//! images of a step are processed concurrently and their gradients merged in
//! image order, so results do not depend on the thread count.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, Mode};
use crate::data::synth_dataset;
use crate::engine::{accumulate_minibatch, sgd_step, streaming_forward, MemoryMeter, ParamGrads};
use crate::equivalence::{
    baseline_forward_backward, compare_runs, finite_difference_check, lockstep_train, streaming_forward_backward,
    write_lockstep_csv, EquivalenceReport, FdReport, LockstepSettings, RunOutput,
};
use crate::error::{Error, Result};
use crate::memory::{estimate_streaming, estimate_whole_image, reduction_report, MemoryEstimate};
use crate::network::{forward_layers, NetParams, NetworkSpec};
use crate::planner::{build_tile_plan, validate_tile_plan, TilePlan};
use crate::tensor::{DType, Scalar, Tensor4};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanReport {
    pub plan: TilePlan,
    pub whole_image: MemoryEstimate,
    pub streaming: MemoryEstimate,
    pub reduction_percent: f64,
}

/// Builds and validates the tile plan and evaluates the memory model.
pub fn run_plan(cfg: &ExperimentConfig) -> Result<PlanReport> {
    let net = cfg.network()?;
    let plan = build_tile_plan(&net, cfg.image_size, cfg.grid)?;
    validate_tile_plan(&plan, &net).into_result()?;
    let whole = estimate_whole_image(&net, cfg.image_size, cfg.batch_size, cfg.precision)?;
    let streaming = estimate_streaming(&net, &plan, cfg.batch_size, cfg.precision)?;
    let reduction_percent = reduction_report(&whole, &streaming)?;
    Ok(PlanReport {
        plan,
        whole_image: whole,
        streaming,
        reduction_percent,
    })
}

/// Labelled images in the working precision.
pub type Dataset<T> = Vec<(Tensor4<T>, u8)>;

/// Training and held-out sets of the synthetic task.
pub fn datasets<T: Scalar>(cfg: &ExperimentConfig) -> Result<(Dataset<T>, Dataset<T>)> {
    let (train_seed, _, test_seed) = cfg.seeds();
    let make = |seed, n| -> Result<Dataset<T>> {
        Ok(synth_dataset(seed, cfg.image_size, cfg.input_channels, n)?
            .into_iter()
            .map(|s| (s.image.cast(), s.label))
            .collect())
    };
    Ok((make(train_seed, cfg.train_samples)?, make(test_seed, cfg.test_samples)?))
}

pub fn initial_params<T: Scalar>(cfg: &ExperimentConfig, net: &NetworkSpec) -> Result<NetParams<T>> {
    let (_, init_seed, _) = cfg.seeds();
    Ok(NetParams::<f64>::init(net, cfg.image_size, init_seed)?.cast())
}

/// Runs `f` over `items`, on up to `threads` scoped threads, preserving order.
pub fn map_ordered<I: Sync, R: Send>(items: &[I], threads: usize, f: impl Fn(&I) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

/// Executor of one training arm.
#[derive(Debug, Clone, Copy)]
pub enum Executor<'a> {
    WholeImage,
    Streaming(&'a TilePlan),
}

impl Executor<'_> {
    pub fn run<T: Scalar>(
        &self,
        net: &NetworkSpec,
        params: &NetParams<T>,
        image: &Tensor4<T>,
        label: u8,
    ) -> Result<RunOutput<T>> {
        match self {
            Executor::WholeImage => baseline_forward_backward(net, params, image, label),
            Executor::Streaming(plan) => streaming_forward_backward(net, params, image, label, plan),
        }
    }

    /// Logit of one image.
    pub fn predict<T: Scalar>(&self, net: &NetworkSpec, params: &NetParams<T>, image: &Tensor4<T>) -> Result<T> {
        let logit = match self {
            Executor::WholeImage => forward_layers(&net.layers, &params.layers, image.clone())?
                .output()
                .data()[0],
            Executor::Streaming(plan) => streaming_forward(net, params, image, plan, &mut MemoryMeter::new())?.logit(),
        };
        Ok(logit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    /// Share of correctly classified training images over all steps so far.
    pub train_acc_running: f64,
    /// Largest tracked activation peak of a single image pass in this step.
    pub peak_bytes: usize,
}

pub struct TrainOutcome<T> {
    pub params: NetParams<T>,
    pub metrics: Vec<StepMetrics>,
}

/// Mini-batch SGD with one executor.
#[allow(clippy::too_many_arguments)]
pub fn train_arm<T: Scalar>(
    net: &NetworkSpec,
    params0: &NetParams<T>,
    data: &[(Tensor4<T>, u8)],
    exec: Executor<'_>,
    steps: usize,
    batch: usize,
    lr: f64,
    threads: usize,
) -> Result<TrainOutcome<T>> {
    if steps > 0 && (data.is_empty() || batch == 0) {
        return Err(Error::Config("training needs data and a positive batch size".into()));
    }
    let mut params = params0.clone();
    let mut metrics = Vec::with_capacity(steps);
    let (mut correct, mut seen) = (0usize, 0usize);
    for step in 0..steps {
        let idx: Vec<usize> = (0..batch).map(|j| (step * batch + j) % data.len()).collect();
        let outs = map_ordered(&idx, threads, |&i| exec.run(net, &params, &data[i].0, data[i].1));
        let mut loss = 0.0;
        let mut peak = 0;
        let mut grads: Vec<ParamGrads<T>> = Vec::with_capacity(batch);
        for (out, &i) in outs.into_iter().zip(&idx) {
            let out = out?;
            loss += out.loss.as_f64();
            peak = peak.max(out.peak_bytes);
            correct += usize::from((out.logit.as_f64() > 0.0) == (data[i].1 == 1));
            seen += 1;
            grads.push(out.grads);
        }
        let loss = loss / batch as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("training diverged at step {step}")));
        }
        sgd_step(&mut params, &accumulate_minibatch(&grads)?, T::of(lr))?;
        metrics.push(StepMetrics {
            step,
            loss,
            train_acc_running: correct as f64 / seen as f64,
            peak_bytes: peak,
        });
    }
    Ok(TrainOutcome { params, metrics })
}

/// Class predictions (`logit > 0`) on a set of images.
pub fn predictions<T: Scalar>(
    net: &NetworkSpec,
    params: &NetParams<T>,
    data: &[(Tensor4<T>, u8)],
    exec: Executor<'_>,
    threads: usize,
) -> Result<Vec<bool>> {
    map_ordered(data, threads, |(img, _)| {
        exec.predict(net, params, img).map(|l| l.as_f64() > 0.0)
    })
    .into_iter()
    .collect()
}

pub fn accuracy(pred: &[bool], data: &[(impl Sized, u8)]) -> f64 {
    let hits = pred.iter().zip(data).filter(|(&p, (_, y))| p == (*y == 1)).count();
    hits as f64 / pred.len().max(1) as f64
}

fn write_metrics_csv(path: &Path, metrics: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for m in metrics {
        w.serialize(m).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// One ST4 file per parameter tensor, named after the tensor.
pub fn write_checkpoint<T: Scalar>(params: &NetParams<T>, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    params
        .slices()
        .iter()
        .map(|s| {
            let path = dir.join(format!("{}.st4", s.name));
            let t = Tensor4::from_vec(s.dims, s.data.to_vec())?;
            t.write_fixture(fs::File::create(&path)?)?;
            Ok(path)
        })
        .collect()
}

pub fn read_checkpoint<T: Scalar>(params: &mut NetParams<T>, dir: &Path) -> Result<()> {
    let names: Vec<String> = params.slices().iter().map(|s| s.name.clone()).collect();
    for (name, dst) in names.iter().zip(params.slices_mut()) {
        let t = Tensor4::<T>::read_fixture(fs::File::open(dir.join(format!("{name}.st4")))?)?;
        if t.len() != dst.len() {
            return Err(Error::Shape(format!(
                "checkpoint tensor {name} has {} values, expected {}",
                t.len(),
                dst.len()
            )));
        }
        dst.copy_from_slice(t.data());
    }
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: Mode,
    pub precision: DType,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub final_train_acc_running: Option<f64>,
    pub test_accuracy: f64,
    /// Lockstep mode only: share of test images where the arms disagree.
    pub prediction_mismatch: Option<f64>,
    pub metrics_csv: PathBuf,
    pub checkpoint_dir: PathBuf,
}

/// Trains in the configured mode and writes metrics and a checkpoint.
pub fn run_train(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<TrainReport> {
    match cfg.precision {
        DType::Single => train_typed::<f32>(cfg, out, threads),
        DType::Double => train_typed::<f64>(cfg, out, threads),
    }
}

fn train_typed<T: Scalar>(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<TrainReport> {
    let net = cfg.network()?;
    let plan = build_tile_plan(&net, cfg.image_size, cfg.grid)?;
    let (train, test) = datasets::<T>(cfg)?;
    let params0 = initial_params::<T>(cfg, &net)?;
    fs::create_dir_all(out)?;
    let run = |exec| {
        train_arm(
            &net,
            &params0,
            &train,
            exec,
            cfg.steps,
            cfg.batch_size,
            cfg.learning_rate,
            threads,
        )
    };

    let (outcome, exec, mismatch) = match cfg.mode {
        Mode::Sgd => (run(Executor::WholeImage)?, Executor::WholeImage, None),
        Mode::Ssgd => (run(Executor::Streaming(&plan))?, Executor::Streaming(&plan), None),
        Mode::Lockstep => {
            let sgd = run(Executor::WholeImage)?;
            let ssgd = run(Executor::Streaming(&plan))?;
            let a = predictions(&net, &sgd.params, &test, Executor::WholeImage, threads)?;
            let b = predictions(&net, &ssgd.params, &test, Executor::Streaming(&plan), threads)?;
            let differ = a.iter().zip(&b).filter(|(x, y)| x != y).count() as f64 / a.len() as f64;
            write_metrics_csv(&out.join("metrics_sgd.csv"), &sgd.metrics)?;
            (ssgd, Executor::Streaming(&plan), Some(differ))
        }
    };
    let metrics_csv = out.join("metrics.csv");
    write_metrics_csv(&metrics_csv, &outcome.metrics)?;
    let checkpoint_dir = out.join("checkpoint");
    write_checkpoint(&outcome.params, &checkpoint_dir)?;
    let pred = predictions(&net, &outcome.params, &test, exec, threads)?;
    let report = TrainReport {
        mode: cfg.mode,
        precision: cfg.precision,
        steps: cfg.steps,
        final_loss: outcome.metrics.last().map(|m| m.loss),
        final_train_acc_running: outcome.metrics.last().map(|m| m.train_acc_running),
        test_accuracy: accuracy(&pred, &test),
        prediction_mismatch: mismatch,
        metrics_csv,
        checkpoint_dir,
    };
    fs::write(out.join("train.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyReport {
    pub pass: bool,
    /// Name of the first quantity outside its tolerance.
    pub failure: Option<String>,
    pub first_image: EquivalenceReport,
    pub lockstep_steps: usize,
    pub mean_abs_loss_diff: f64,
    pub max_abs_loss_diff: f64,
    pub max_grad_rel_diff: f64,
    pub fd_whole_image: FdReport,
    pub fd_streaming: FdReport,
    pub lockstep_csv: PathBuf,
}

/// Lockstep comparison of both executors plus finite-difference checks.
pub fn run_verify(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<VerifyReport> {
    match cfg.precision {
        DType::Single => verify_typed::<f32>(cfg, out, threads),
        DType::Double => verify_typed::<f64>(cfg, out, threads),
    }
}

fn verify_typed<T: Scalar>(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<VerifyReport> {
    let net = cfg.network()?;
    let plan = build_tile_plan(&net, cfg.image_size, cfg.grid)?;
    let (train, _) = datasets::<T>(cfg)?;
    let params0 = initial_params::<T>(cfg, &net)?;
    let tol = cfg.tolerances();
    fs::create_dir_all(out)?;

    let (img, label) = &train[0];
    let first_image = compare_runs(
        &baseline_forward_backward(&net, &params0, img, *label)?,
        &streaming_forward_backward(&net, &params0, img, *label, &plan)?,
        &tol,
    )?;

    let settings = LockstepSettings {
        steps: cfg.steps,
        batch: cfg.batch_size,
        lr: cfg.learning_rate,
        parallel: threads > 1,
    };
    let lock = lockstep_train(&net, &params0, &train, &plan, &settings)?;
    let lockstep_csv = out.join("lockstep.csv");
    write_lockstep_csv(&lock.rows, fs::File::create(&lockstep_csv)?)?;
    let max_grad_rel = lock.rows.iter().map(|r| r.max_grad_rel_diff).fold(0.0, f64::max);

    // gradient checks always run in double precision on the same initial point
    let p64: NetParams<f64> = params0.cast();
    let img64: Tensor4<f64> = img.cast();
    let fd = &cfg.finite_difference;
    let (_, init_seed, _) = cfg.seeds();
    let base = baseline_forward_backward(&net, &p64, &img64, *label)?;
    let stream = streaming_forward_backward(&net, &p64, &img64, *label, &plan)?;
    let fd_whole = finite_difference_check(
        &net,
        &p64,
        &img64,
        *label,
        None,
        fd.eps,
        &base.grads.grads,
        fd.per_tensor,
        init_seed,
    )?;
    let fd_stream = finite_difference_check(
        &net,
        &p64,
        &img64,
        *label,
        Some(&plan),
        fd.eps,
        &stream.grads.grads,
        fd.per_tensor,
        init_seed,
    )?;

    let checks = [
        ("lockstep loss".to_string(), lock.max_abs_loss_diff() <= tol.loss),
        ("lockstep gradients".to_string(), max_grad_rel <= tol.grads),
        (
            format!("finite differences (whole image, {})", fd_whole.worst),
            fd_whole.max_rel_err <= fd.tol,
        ),
        (
            format!("finite differences (streaming, {})", fd_stream.worst),
            fd_stream.max_rel_err <= fd.tol,
        ),
    ];
    let failure = first_image
        .first_failure()
        .map(|q| q.name.clone())
        .or_else(|| checks.into_iter().find(|(_, ok)| !ok).map(|(name, _)| name));
    let report = VerifyReport {
        pass: failure.is_none(),
        failure,
        first_image,
        lockstep_steps: lock.rows.len(),
        mean_abs_loss_diff: lock.mean_abs_loss_diff(),
        max_abs_loss_diff: lock.max_abs_loss_diff(),
        max_grad_rel_diff: max_grad_rel,
        fd_whole_image: fd_whole,
        fd_streaming: fd_stream,
        lockstep_csv,
    };
    fs::write(out.join("verify.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchReport {
    pub steps: usize,
    pub sgd_ms_per_step: f64,
    pub ssgd_ms_per_step: f64,
    /// `ssgd / sgd` step time.
    pub recompute_overhead: f64,
    pub sgd_peak_bytes: usize,
    pub ssgd_peak_bytes: usize,
}

/// Times both executors over the configured number of steps.
pub fn run_bench(cfg: &ExperimentConfig, threads: usize) -> Result<BenchReport> {
    match cfg.precision {
        DType::Single => bench_typed::<f32>(cfg, threads),
        DType::Double => bench_typed::<f64>(cfg, threads),
    }
}

fn bench_typed<T: Scalar>(cfg: &ExperimentConfig, threads: usize) -> Result<BenchReport> {
    let net = cfg.network()?;
    let plan = build_tile_plan(&net, cfg.image_size, cfg.grid)?;
    let (train, _) = datasets::<T>(cfg)?;
    let params0 = initial_params::<T>(cfg, &net)?;
    let steps = cfg.steps.max(1);
    let time = |exec| -> Result<(f64, usize)> {
        let start = Instant::now();
        let r = train_arm(
            &net,
            &params0,
            &train,
            exec,
            steps,
            cfg.batch_size,
            cfg.learning_rate,
            threads,
        )?;
        let ms = start.elapsed().as_secs_f64() * 1e3 / steps as f64;
        Ok((ms, r.metrics.iter().map(|m| m.peak_bytes).max().unwrap_or(0)))
    };
    let (sgd_ms, sgd_peak) = time(Executor::WholeImage)?;
    let (ssgd_ms, ssgd_peak) = time(Executor::Streaming(&plan))?;
    Ok(BenchReport {
        steps,
        sgd_ms_per_step: sgd_ms,
        ssgd_ms_per_step: ssgd_ms,
        recompute_overhead: ssgd_ms / sgd_ms,
        sgd_peak_bytes: sgd_peak,
        ssgd_peak_bytes: ssgd_peak,
    })
}
