//! Library side of the `s2rm` command: argument types, config loading and
//! the five commands, each producing a [`RunReport`].

pub mod artifacts;
pub mod report;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use thiserror::Error;

use s2rm_core::bench::bench_correlation;
use s2rm_core::blob::Blob;
use s2rm_core::gradcheck::{gradcheck_config, gradcheck_model, gradcheck_ops, ModelCheck};
use s2rm_core::oracle::{
    oracle_pipeline, GradCheckReport, FD_EPS, GRAD_TOLERANCE, ORACLE_MAX_SIDE,
};
use s2rm_core::pipeline::{forward, infer, synth_batch, train_toy, ModelConfig, ModelParams};
use s2rm_core::suites::{config_checks, run_suites, Check, Status, PIPELINE_TOLERANCE};
use s2rm_core::tensor::nn::Mode;
use s2rm_core::tensor::{OpKind, Tape};

pub use report::RunReport;

/// Overfit gates for `train-toy`.
pub const MAX_FINAL_LOSS: f64 = 0.1;
pub const MIN_TRAIN_IOU: f64 = 0.8;

#[derive(Debug, Parser)]
#[command(
    name = "s2rm",
    version,
    about = "Fusion operator and decoder verification tool"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// JSON config; fields override the built-in toy defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Shift laws, oracle equivalence, shape, attention, gate and ablation suites.
    Check {
        #[command(flatten)]
        common: Common,
        /// Keep only checks whose name contains this.
        #[arg(long)]
        filter: Option<String>,
    },
    /// Tape gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Finite-difference step; anything but the default is informational.
        #[arg(long, default_value_t = FD_EPS)]
        eps: f64,
        /// Corrupt one operation's backward rule (negative test).
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Batched-matmul correlation against the loop oracle.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        repeat: usize,
    },
    /// SGD overfit on the synthetic set; writes params and loss trace.
    TrainToy {
        #[command(flatten)]
        common: Common,
        /// Directory for params.s2rm and loss.csv.
        #[arg(long, default_value = ".")]
        artifacts: PathBuf,
    },
    /// Masks for the synthetic set; writes PGM, raw f64 and shape sidecar.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "zero_params")]
        params: Option<PathBuf>,
        /// Use all-zero parameters instead of a params file.
        #[arg(long, conflicts_with = "params")]
        zero_params: bool,
        /// Directory for mask_<k>.pgm, mask_<k>.f64 and mask_<k>.json.
        #[arg(long, default_value = ".")]
        artifacts: PathBuf,
    },
}

impl Command {
    pub fn common(&self) -> &Common {
        match self {
            Command::Check { common, .. }
            | Command::Gradcheck { common, .. }
            | Command::Bench { common, .. }
            | Command::TrainToy { common, .. }
            | Command::Infer { common, .. } => common,
        }
    }
}

#[derive(Debug, Error)]
pub enum CliError {
    /// Bad configuration, flags or input files.
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] s2rm_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use s2rm_core::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(
                E::Config { .. }
                | E::TooManyWords { .. }
                | E::Missing(_)
                | E::ParamMismatch(_)
                | E::Format(_)
                | E::Io(_)
                | E::Json(_),
            ) => 2,
            CliError::Core(_) => 1,
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Recursively overlay `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Toy defaults overlaid with the config file, then the seed flag.
pub fn load_config(common: &Common) -> Result<ModelConfig, CliError> {
    let mut value = serde_json::to_value(ModelConfig::toy()).expect("config serializes");
    if let Some(path) = &common.config {
        let text = std::fs::read_to_string(path)
            .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        let patch: Value = serde_json::from_str(&text)
            .map_err(|e| usage(format!("config {}: {e}", path.display())))?;
        if !patch.is_object() {
            return Err(usage(format!(
                "config {}: expected a JSON object",
                path.display()
            )));
        }
        merge(&mut value, patch);
    }
    let mut config: ModelConfig =
        serde_json::from_value(value).map_err(|e| usage(format!("invalid config: {e}")))?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

pub fn run(command: &Command) -> Result<RunReport, CliError> {
    let start = Instant::now();
    let config = load_config(command.common())?;
    let echo = serde_json::to_value(&config).expect("config serializes");
    let mut report = match command {
        Command::Check { filter, .. } => {
            let mut r = RunReport::new("check", config.seed, echo);
            r.checks = check(&config, filter.as_deref())?;
            r
        }
        Command::Gradcheck {
            eps, inject_fault, ..
        } => {
            let mut r = RunReport::new("gradcheck", config.seed, echo);
            gradcheck(&mut r, &config, *eps, inject_fault.as_deref())?;
            r
        }
        Command::Bench { repeat, .. } => {
            let mut r = RunReport::new("bench", config.seed, echo);
            bench(&mut r, config.seed, *repeat)?;
            r
        }
        Command::TrainToy { artifacts, .. } => {
            let mut r = RunReport::new("train-toy", config.seed, echo);
            train(&mut r, &config, artifacts)?;
            r
        }
        Command::Infer {
            params,
            zero_params,
            artifacts,
            ..
        } => {
            let mut r = RunReport::new("infer", config.seed, echo);
            let params = match (params, zero_params) {
                (Some(path), _) => load_params(&config, path)?,
                (None, true) => ModelParams::zeros(&config)?,
                (None, false) => return Err(usage("infer needs --params or --zero-params")),
            };
            run_infer(&mut r, &config, &params, artifacts)?;
            r
        }
    };
    report.timings.total_s = start.elapsed().as_secs_f64();
    Ok(report)
}

fn check(config: &ModelConfig, filter: Option<&str>) -> Result<Vec<Check>, CliError> {
    let mut checks = run_suites(filter, config.seed)?;
    checks.extend(
        config_checks(config)?
            .into_iter()
            .filter(|c| filter.is_none_or(|f| c.name.contains(f))),
    );
    Ok(checks)
}

fn grad_check(report: &GradCheckReport, gated: bool, detail: Option<String>) -> Check {
    let mut c = Check::new(
        format!("gradcheck.{}", report.op),
        report.pass,
        Some(report.max_rel_err),
        detail,
    );
    if !gated {
        c.status = Status::Skip;
    }
    c
}

fn gradcheck(
    report: &mut RunReport,
    config: &ModelConfig,
    eps: f64,
    fault: Option<&str>,
) -> Result<(), CliError> {
    if !(eps.is_finite() && eps > 0.0) {
        return Err(usage(format!(
            "--eps must be positive and finite, got {eps}"
        )));
    }
    let fault = match fault {
        None => None,
        Some(name) => Some(
            OpKind::ALL
                .into_iter()
                .find(|k| k.name() == name)
                .ok_or_else(|| usage(format!("unknown op `{name}` for --inject-fault")))?,
        ),
    };
    // The gate is defined at the default step; other steps only report.
    let gated = eps == FD_EPS;
    let informational = (!gated).then(|| format!("informational at eps {eps:e}"));
    let t0 = Instant::now();
    for r in gradcheck_ops(eps, config.seed, fault)? {
        report
            .checks
            .push(grad_check(&r, gated, informational.clone()));
    }
    report
        .timings
        .entries
        .insert("ops_s".into(), t0.elapsed().as_secs_f64());

    // The small end-to-end geometry carries the configured switches.
    let t0 = Instant::now();
    let mut stage_counts = vec![config.decoder.stages];
    if config.decoder.stages == 3 {
        stage_counts.push(2);
    }
    let mut details = Vec::new();
    for stages in stage_counts {
        let mut cfg = gradcheck_config(stages, config.seed);
        cfg.fusion = config.fusion;
        cfg.decoder = config.decoder;
        cfg.decoder.stages = stages;
        for check in [ModelCheck::EVAL, ModelCheck::TRAIN_DECODER] {
            let r = gradcheck_model(&cfg, eps, check, fault)?;
            report
                .checks
                .push(grad_check(&r, gated, informational.clone()));
            details.push(serde_json::to_value(&r).expect("report serializes"));
        }
    }
    // Constant positional channels under train-mode batch norm have exactly
    // zero gradient, which central differences resolve only to roundoff.
    let r = gradcheck_model(
        &gradcheck_config(config.decoder.stages, config.seed),
        eps,
        ModelCheck::TRAIN,
        fault,
    )?;
    report.checks.push(grad_check(
        &r,
        false,
        Some("informational: train mode over all tensors".into()),
    ));
    details.push(serde_json::to_value(&r).expect("report serializes"));
    report
        .timings
        .entries
        .insert("end_to_end_s".into(), t0.elapsed().as_secs_f64());
    report.results = json!({ "eps": eps, "tolerance": GRAD_TOLERANCE, "end_to_end": details });
    Ok(())
}

fn bench(report: &mut RunReport, seed: u64, repeat: usize) -> Result<(), CliError> {
    let cases = bench_correlation(repeat, seed)?;
    let mut results = Vec::new();
    for c in &cases {
        let key = format!("h{}_c{}", c.side, c.channels);
        report.checks.push(Check::new(
            format!("bench.{key}.equivalence"),
            c.equivalent,
            Some(c.max_abs_err),
            None,
        ));
        let t = &mut report.timings.entries;
        t.insert(format!("{key}.optimized_median_s"), c.optimized_median_s);
        t.insert(format!("{key}.oracle_median_s"), c.oracle_median_s);
        t.insert(format!("{key}.f32_median_s"), c.f32_median_s);
        t.insert(format!("{key}.speedup"), c.speedup);
        if c.speedup < 1.0 {
            report.timings.warnings.push(format!(
                "{key}: matmul path slower than loop oracle (speedup {:.2})",
                c.speedup
            ));
        }
        results.push(json!({
            "side": c.side,
            "channels": c.channels,
            "max_abs_err": c.max_abs_err,
            "f32_max_abs_err": c.f32_max_abs_err,
        }));
    }
    report.results = json!({ "repeat": repeat, "cases": results });
    Ok(())
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| usage(format!("artifacts {}: {e}", dir.display())))
}

fn write_artifact(
    report: &mut RunReport,
    dir: &Path,
    name: &str,
    bytes: &[u8],
) -> Result<(), CliError> {
    let path = dir.join(name);
    artifacts::write_file(&path, bytes).map_err(|e| usage(format!("{}: {e}", path.display())))?;
    report.artifacts.push(name.to_string());
    Ok(())
}

fn train(report: &mut RunReport, config: &ModelConfig, dir: &Path) -> Result<(), CliError> {
    create_dir(dir)?;
    let t0 = Instant::now();
    let outcome = train_toy(config)?;
    report
        .timings
        .entries
        .insert("train_s".into(), t0.elapsed().as_secs_f64());

    write_artifact(
        report,
        dir,
        "params.s2rm",
        &outcome.params.to_blob().to_bytes(),
    )?;
    let csv = artifacts::loss_csv(&outcome.losses, config.lr);
    write_artifact(report, dir, "loss.csv", csv.as_bytes())?;

    // Loss of the final parameters, i.e. after the last update.
    let mut tape = Tape::inference();
    let mut trained = outcome.params.clone();
    let loss = s2rm_core::pipeline::batch_loss(
        &mut tape,
        &outcome.samples,
        &mut trained,
        config,
        Mode::Train,
    )?;
    let final_loss = tape.value(loss).item();
    let ious = outcome
        .samples
        .iter()
        .map(|s| infer(config, &outcome.params, s).map(|i| i.iou))
        .collect::<Result<Vec<_>, _>>()?;
    let mean_iou = ious.iter().sum::<f64>() / ious.len() as f64;
    report.checks.push(Check::new(
        "train.final_loss",
        final_loss < MAX_FINAL_LOSS,
        Some(final_loss),
        Some(format!(
            "dice after {} steps, gate < {MAX_FINAL_LOSS}",
            config.steps
        )),
    ));
    report.checks.push(Check::new(
        "train.iou",
        ious.iter().all(|&v| v > MIN_TRAIN_IOU),
        Some(mean_iou),
        Some(format!(
            "mean training-set IoU, every sample gated > {MIN_TRAIN_IOU}"
        )),
    ));
    report.checks.push(oracle_agreement(config, &outcome)?);
    report.results = json!({
        "steps": config.steps,
        "initial_loss": outcome.losses.first(),
        "final_loss": final_loss,
        "ious": ious,
        "mean_iou": mean_iou,
    });
    Ok(())
}

/// The trained parameters give the same eval-mode masks through the loop
/// oracle as through the optimized path.
fn oracle_agreement(
    config: &ModelConfig,
    outcome: &s2rm_core::pipeline::TrainOutcome,
) -> Result<Check, CliError> {
    let (h4, w4) = config.stage_size(4);
    let name = "train.oracle_agreement";
    if h4 > ORACLE_MAX_SIDE || w4 > ORACLE_MAX_SIDE {
        let mut c = Check::new(
            name,
            true,
            None,
            Some(format!("deepest map {h4}x{w4} exceeds the oracle limit")),
        );
        c.status = Status::Skip;
        return Ok(c);
    }
    let traces = oracle_pipeline(&outcome.samples, &outcome.params, config, Mode::Eval)?;
    let mut tape = Tape::inference();
    let fwd = forward(
        &mut tape,
        &outcome.samples,
        &mut outcome.params.clone(),
        config,
        Mode::Eval,
    )?;
    let err = fwd
        .decoder
        .iter()
        .zip(&traces)
        .map(|(d, t)| tape.value(d.mask).max_abs_diff(&t.mask))
        .fold(0.0, f64::max);
    Ok(Check::new(
        name,
        err <= PIPELINE_TOLERANCE,
        Some(err),
        Some("eval-mode masks, max abs error".into()),
    ))
}

fn load_params(config: &ModelConfig, path: &Path) -> Result<ModelParams, CliError> {
    if !path.exists() {
        return Err(usage(format!("params file {} not found", path.display())));
    }
    let blob = Blob::load(path)?;
    Ok(ModelParams::from_blob(config, &blob)?)
}

fn run_infer(
    report: &mut RunReport,
    config: &ModelConfig,
    params: &ModelParams,
    dir: &Path,
) -> Result<(), CliError> {
    create_dir(dir)?;
    let samples = synth_batch(config, config.seed, config.batch_size)?;
    let mut ious = Vec::new();
    let (mut shape_ok, mut range_ok) = (true, true);
    for (k, sample) in samples.iter().enumerate() {
        let out = infer(config, params, sample)?;
        shape_ok &= out.soft.shape() == [config.height, config.width, 1];
        range_ok &= out.soft.data().iter().all(|&p| (0.0..=1.0).contains(&p));
        write_artifact(
            report,
            dir,
            &format!("mask_{k}.pgm"),
            &artifacts::pgm_bytes(&out.soft),
        )?;
        let raw = format!("mask_{k}.f64");
        write_artifact(report, dir, &raw, &artifacts::raw_f64_bytes(&out.soft))?;
        let sidecar = serde_json::to_string_pretty(&artifacts::shape_sidecar(&out.soft, &raw))
            .expect("json")
            + "\n";
        write_artifact(report, dir, &format!("mask_{k}.json"), sidecar.as_bytes())?;
        report.notes.push(format!("sample {k}: IoU {:.4}", out.iou));
        ious.push(out.iou);
    }
    let mean_iou = ious.iter().sum::<f64>() / ious.len() as f64;
    report.notes.push(format!("mean IoU {mean_iou:.4}"));
    report.checks.push(Check::new(
        "infer.mask_shape",
        shape_ok,
        None,
        Some(format!("{}x{}x1", config.height, config.width)),
    ));
    report
        .checks
        .push(Check::new("infer.mask_range", range_ok, None, None));
    report.results = json!({ "ious": ious, "mean_iou": mean_iou });
    Ok(())
}
