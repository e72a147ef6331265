//! Implementations of the four subcommands.
//!
//! Each command loads its inputs, runs the experiment through the library
//! modules, streams CSV rows as results appear, and prints a one-line
//! summary per artifact written.  All randomness is derived from the
//! `--seed` flag, so rerunning a command reproduces its outputs except
//! for the `wall_ms` column.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::data::{self, Dataset, Fraction};
use crate::nn::{checkpoint, Network};
use crate::optim::{
    self, evaluate_mc, evaluate_mc_curve, evaluate_standard, EvalMode, EvalResult, TrainConfig,
};

use super::csvout::{CsvWriter, Row};
use super::zoo::{self, ModelKind};
use super::{parse_t_grid, CliError, EvalArgs, HyperArgs, OverfitArgs, SweepArgs, TrainArgs};

/// Images per stacked forward pass during test-set evaluation.
const EVAL_CHUNK: usize = 100;

/// Iteration budgets used when `--max-iters` is not given.
const DEFAULT_ITERS_FULL: u64 = 20_000;
const DEFAULT_ITERS_SUBSET: u64 = 10_000;

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

fn mode_str(mode: EvalMode) -> &'static str {
    match mode {
        EvalMode::Standard => "standard",
        EvalMode::Mc => "mc",
    }
}

/// `1/4` renders as `1-4` inside run identifiers and file names.
fn fraction_slug(f: Fraction) -> String {
    f.to_string().replace('/', "-")
}

fn mnist_file(dir: &Path, name: &str) -> Result<PathBuf, CliError> {
    let path = dir.join(name);
    if !path.is_file() {
        return Err(CliError::Runtime(format!(
            "MNIST file {} not found; point --data-dir (or BCNN_DATA_DIR) at a directory \
             with the idx files, e.g. fetched by scripts/fetch_mnist.sh",
            path.display()
        )));
    }
    Ok(path)
}

fn load_train_and_test(dir: &Path) -> Result<(Dataset, Dataset), CliError> {
    let train = data::load_mnist(
        &mnist_file(dir, "train-images-idx3-ubyte")?,
        &mnist_file(dir, "train-labels-idx1-ubyte")?,
    )
    .map_err(runtime)?;
    let test = load_test(dir)?;
    Ok((train, test))
}

fn load_test(dir: &Path) -> Result<Dataset, CliError> {
    data::load_mnist(
        &mnist_file(dir, "t10k-images-idx3-ubyte")?,
        &mnist_file(dir, "t10k-labels-idx1-ubyte")?,
    )
    .map_err(runtime)
}

fn ensure_out_dir(out: &Path) -> Result<(), CliError> {
    fs::create_dir_all(out)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", out.display())))
}

fn train_config(hyper: &HyperArgs, batch_size: usize, eval_every: u64, seed: u64) -> TrainConfig {
    TrainConfig {
        base_lr: hyper.base_lr,
        gamma: hyper.gamma,
        power: hyper.power,
        momentum: hyper.momentum,
        weight_decay: hyper.weight_decay,
        max_iters: 0, // set per job
        batch_size,
        seed,
        eval_every,
    }
}

fn default_iters(fraction: Fraction) -> u64 {
    if fraction == Fraction::ONE {
        DEFAULT_ITERS_FULL
    } else {
        DEFAULT_ITERS_SUBSET
    }
}

/// One model trained on one training-set fraction, with CSV rows streamed
/// at every evaluation point and a checkpoint written at the end.
struct TrainJob<'a> {
    model: ModelKind,
    fraction: Fraction,
    seed: u64,
    cfg: TrainConfig,
    /// Prediction rules logged at each evaluation point, with the Monte
    /// Carlo sample count to use for `mc` rows.
    modes: &'a [EvalMode],
    mc_samples: usize,
    run_id: &'a str,
    out: &'a Path,
}

fn run_training_job(
    job: &TrainJob<'_>,
    train_full: &Dataset,
    test: &Dataset,
    started: Instant,
) -> Result<(), CliError> {
    let train_ds = data::subset(train_full, job.fraction, job.seed).map_err(runtime)?;
    let mut net = zoo::build_model(job.model);
    net.init_params(job.seed);

    let csv_path = job.out.join(format!("{}.csv", job.run_id));
    let ckpt_path = job.out.join(format!("{}.bcnn", job.run_id));
    let mut writer = CsvWriter::create(&csv_path)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", csv_path.display())))?;

    let model_name = job.model.name();
    let mut write_err: Option<io::Error> = None;
    let log = optim::train(&mut net, &train_ds, &job.cfg, |net, iter, train_loss| {
        let mut evals = Vec::new();
        for &mode in job.modes {
            let result = match mode {
                EvalMode::Standard => evaluate_standard(net, test, EVAL_CHUNK)?,
                EvalMode::Mc => {
                    evaluate_mc(net, test, job.mc_samples, job.seed, 0, EVAL_CHUNK)?
                }
            };
            if write_err.is_none() {
                let row = Row {
                    run_id: job.run_id,
                    model: model_name,
                    mode: mode_str(result.mode),
                    t: result.t_samples,
                    iter,
                    train_loss: Some(train_loss),
                    test_error: result.test_error,
                    seed: job.seed,
                    wall_ms: started.elapsed().as_millis(),
                };
                if let Err(e) = writer.row(&row) {
                    write_err = Some(e);
                }
            }
            evals.push(result);
        }
        Ok(evals)
    })
    .map_err(runtime)?;
    if let Some(e) = write_err {
        return Err(CliError::Runtime(format!("writing {}: {e}", csv_path.display())));
    }

    checkpoint::save(&net, &ckpt_path).map_err(runtime)?;
    print!(
        "{}: {} iterations on {} examples",
        job.run_id,
        job.cfg.max_iters,
        train_ds.len()
    );
    if let Some(point) = log.points.last() {
        for eval in &point.evals {
            print!(", {} error {:.4}", mode_str(eval.mode), eval.test_error);
        }
    }
    println!(" -> {}", ckpt_path.display());
    Ok(())
}

pub fn cmd_train(a: TrainArgs) -> Result<(), CliError> {
    let started = Instant::now();
    if a.eval_modes.is_empty() {
        return Err(CliError::Usage("at least one --eval-modes entry is required".into()));
    }
    if a.eval_modes.contains(&super::EvalModeArg::Mc) && a.mc_samples == 0 {
        return Err(CliError::Usage("--mc-samples must be >= 1 for mc evaluation".into()));
    }
    ensure_out_dir(&a.io.out)?;
    let (train_full, test) = load_train_and_test(&a.io.data_dir)?;

    let mut modes: Vec<EvalMode> = Vec::new();
    for m in &a.eval_modes {
        if !modes.contains(&m.to_mode()) {
            modes.push(m.to_mode());
        }
    }
    let mut cfg = train_config(&a.hyper, a.batch_size, a.eval_every, a.seed);
    cfg.max_iters = a.max_iters.unwrap_or_else(|| default_iters(a.subset));
    let run_id = a.run_id.clone().unwrap_or_else(|| {
        format!("train_{}_{}_s{}", a.model.name(), fraction_slug(a.subset), a.seed)
    });

    let job = TrainJob {
        model: a.model,
        fraction: a.subset,
        seed: a.seed,
        cfg,
        modes: &modes,
        mc_samples: a.mc_samples,
        run_id: &run_id,
        out: &a.io.out,
    };
    run_training_job(&job, &train_full, &test, started)
}

/// The over-fitting study's evaluation rule per model: models with dropout
/// on the convolutions are scored by Monte Carlo averaging, the others by
/// the standard scaled pass.
fn overfit_mode(model: ModelKind) -> EvalMode {
    match model {
        ModelKind::LenetAll | ModelKind::LenetAllWide => EvalMode::Mc,
        ModelKind::LenetNone | ModelKind::LenetIp => EvalMode::Standard,
    }
}

pub fn cmd_overfit(a: OverfitArgs) -> Result<(), CliError> {
    let started = Instant::now();
    if a.models.is_empty() || a.fractions.is_empty() {
        return Err(CliError::Usage("--models and --fractions must be nonempty".into()));
    }
    if a.mc_samples == 0 {
        return Err(CliError::Usage("--mc-samples must be >= 1".into()));
    }
    ensure_out_dir(&a.io.out)?;
    let (train_full, test) = load_train_and_test(&a.io.data_dir)?;

    for &model in &a.models {
        for &fraction in &a.fractions {
            let mut cfg = train_config(&a.hyper, a.batch_size, a.eval_every, a.seed);
            cfg.max_iters = a.max_iters.unwrap_or_else(|| default_iters(fraction));
            let run_id = format!(
                "overfit_{}_{}_s{}",
                model.name(),
                fraction_slug(fraction),
                a.seed
            );
            let modes = [overfit_mode(model)];
            let job = TrainJob {
                model,
                fraction,
                seed: a.seed,
                cfg,
                modes: &modes,
                mc_samples: a.mc_samples,
                run_id: &run_id,
                out: &a.io.out,
            };
            run_training_job(&job, &train_full, &test, started)?;
        }
    }
    Ok(())
}

/// Loads a checkpoint and names it for the CSV `model` column.
fn load_checkpoint(path: &Path) -> Result<(Network, &'static str), CliError> {
    let net = checkpoint::load(path)
        .map_err(|e| CliError::Runtime(format!("loading {}: {e}", path.display())))?;
    let name = zoo::identify(&net).map(ModelKind::name).unwrap_or("custom");
    Ok((net, name))
}

/// Mean and sample standard deviation (n - 1) of a nonempty slice.
fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let started = Instant::now();
    if a.mode == super::EvalModeArg::Mc && a.t == 0 {
        return Err(CliError::Usage("--t must be >= 1 in mc mode".into()));
    }
    if a.repeats == 0 {
        return Err(CliError::Usage("--repeats must be >= 1".into()));
    }
    ensure_out_dir(&a.io.out)?;
    let (net, model) = load_checkpoint(&a.checkpoint)?;
    let test = load_test(&a.io.data_dir)?;

    let run_id = a.run_id.clone().unwrap_or_else(|| match a.mode {
        super::EvalModeArg::Standard => format!("eval_{model}_standard_s{}", a.seed),
        super::EvalModeArg::Mc => format!("eval_{model}_mc_T{}_s{}", a.t, a.seed),
    });
    let csv_path = a.io.out.join(format!("{run_id}.csv"));
    let mut writer = CsvWriter::create(&csv_path)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", csv_path.display())))?;
    let mut write = |id: &str, result: &EvalResult| {
        writer
            .row(&Row {
                run_id: id,
                model,
                mode: mode_str(result.mode),
                t: result.t_samples,
                iter: 0,
                train_loss: None,
                test_error: result.test_error,
                seed: a.seed,
                wall_ms: started.elapsed().as_millis(),
            })
            .map_err(runtime)
    };

    match a.mode {
        super::EvalModeArg::Standard => {
            let result = evaluate_standard(&net, &test, EVAL_CHUNK).map_err(runtime)?;
            write(&run_id, &result)?;
            println!("{run_id}: standard error {:.4} -> {}", result.test_error, csv_path.display());
        }
        super::EvalModeArg::Mc => {
            let mut errors = Vec::new();
            for repeat in 0..a.repeats {
                let result =
                    evaluate_mc(&net, &test, a.t, a.seed, repeat, EVAL_CHUNK).map_err(runtime)?;
                write(&run_id, &result)?;
                errors.push(result.test_error);
            }
            let (mean, std) = mean_and_std(&errors);
            let summary = EvalResult {
                mode: EvalMode::Mc,
                t_samples: a.t,
                test_error: mean,
                correct_per_class: vec![],
                total_per_class: vec![],
            };
            write(&format!("{run_id}-mean"), &summary)?;
            if a.repeats >= 2 {
                write(&format!("{run_id}-std"), &EvalResult { test_error: std, ..summary })?;
            }
            println!(
                "{run_id}: mc error {mean:.4} +- {std:.4} over {} repeats (T = {}) -> {}",
                a.repeats,
                a.t,
                csv_path.display()
            );
        }
    }
    Ok(())
}

pub fn cmd_mc_sweep(a: SweepArgs) -> Result<(), CliError> {
    let started = Instant::now();
    let grid = parse_t_grid(&a.t_grid).map_err(CliError::Usage)?;
    if a.repeats == 0 {
        return Err(CliError::Usage("--repeats must be >= 1".into()));
    }
    ensure_out_dir(&a.io.out)?;
    let (net, model) = load_checkpoint(&a.checkpoint)?;
    let test = load_test(&a.io.data_dir)?;

    let run_id = a.run_id.clone().unwrap_or_else(|| format!("mcsweep_{model}_s{}", a.seed));
    let csv_path = a.io.out.join(format!("{run_id}.csv"));
    let mut writer = CsvWriter::create(&csv_path)
        .map_err(|e| CliError::Runtime(format!("creating {}: {e}", csv_path.display())))?;
    let mut write = |id: &str, result: &EvalResult| {
        writer
            .row(&Row {
                run_id: id,
                model,
                mode: mode_str(result.mode),
                t: result.t_samples,
                iter: 0,
                train_loss: None,
                test_error: result.test_error,
                seed: a.seed,
                wall_ms: started.elapsed().as_millis(),
            })
            .map_err(runtime)
    };

    // The deterministic weight-averaging score anchors the curve.
    let baseline = evaluate_standard(&net, &test, EVAL_CHUNK).map_err(runtime)?;
    write(&run_id, &baseline)?;

    // Each repeat draws max(grid) samples per image once; the running
    // probability means are read out at every grid count, so the whole
    // curve costs max(grid) passes per repeat rather than their sum.
    let mut curves: Vec<Vec<EvalResult>> = Vec::new();
    for repeat in 0..a.repeats {
        curves
            .push(evaluate_mc_curve(&net, &test, &grid, a.seed, repeat, EVAL_CHUNK)
                .map_err(runtime)?);
    }
    for (i, &t) in grid.iter().enumerate() {
        let mut errors = Vec::new();
        for curve in &curves {
            write(&run_id, &curve[i])?;
            errors.push(curve[i].test_error);
        }
        let (mean, std) = mean_and_std(&errors);
        let summary = EvalResult {
            mode: EvalMode::Mc,
            t_samples: t,
            test_error: mean,
            correct_per_class: vec![],
            total_per_class: vec![],
        };
        write(&format!("{run_id}-mean"), &summary)?;
        if a.repeats >= 2 {
            write(&format!("{run_id}-std"), &EvalResult { test_error: std, ..summary })?;
        }
    }
    let last = grid.len() - 1;
    let (last_mean, _) = mean_and_std(
        &curves.iter().map(|c| c[last].test_error).collect::<Vec<_>>(),
    );
    println!(
        "{run_id}: standard error {:.4}, mc error {last_mean:.4} at T = {} -> {}",
        baseline.test_error,
        grid[last],
        csv_path.display()
    );
    Ok(())
}
