use std::fs;
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use saeda::eval::alignment_diagnostic;
use saeda::pipeline::{run_full_pipeline, JsonlLog, PipelineData, RunOptions};
use serde::Serialize;

use super::{build_report, create_dir, obtain_data, print_metric, write_json, write_predictions, write_report};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::TrainArgs;

pub const LOG_FILE: &str = "training_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Serialize)]
struct RunMeta {
    version: &'static str,
    started_unix: u64,
    finished_unix: u64,
    resumed_from: Option<String>,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

pub fn run(args: &TrainArgs) -> Result<ExitCode, CliError> {
    let started = unix_now();
    let mut cfg = RunConfig::resolve(&args.run)?;
    if let Some(beta) = args.beta {
        cfg.ablations.beta_override = Some(beta);
    }
    if let Some(g) = args.cws_grad {
        cfg.ablations.cws_grad = g;
    }
    cfg.ablations.skip_stage3 |= args.skip_stage3;
    if let Some(b) = cfg.ablations.beta_override {
        if !(b >= 0.0 && b.is_finite()) {
            return Err(CliError::Usage("--beta must be a non-negative number".into()));
        }
    }

    let out = cfg.output_dir.clone();
    create_dir(&out)?;
    cfg.write(&out.join("effective_config.json"))?;
    let data = obtain_data(&cfg, &out)?;

    let log_path = out.join(LOG_FILE);
    if args.resume.is_none() {
        fs::write(&log_path, "").map_err(|e| CliError::io(&log_path, e))?;
    }
    let mut log = JsonlLog::append(&log_path)?;
    let options = RunOptions {
        checkpoint_dir: Some(out.join(CHECKPOINT_DIR)),
        resume_from: args.resume,
        stop_after: None,
        skip_stage3: cfg.ablations.skip_stage3,
    };
    let training = cfg.effective_training();
    let output = run_full_pipeline(
        PipelineData {
            source: &data.source,
            target_labeled: &data.target_labeled,
            target_unlabeled: &data.target_unlabeled,
        },
        cfg.task,
        &training,
        &options,
        &mut log,
    )?;

    for r in &output.reports {
        println!(
            "{:<13} epochs {:>4}  final loss {:>12.6}  {}",
            r.stage.name(),
            r.epochs_run,
            r.final_loss.unwrap_or(f64::NAN),
            if r.converged { "converged" } else { "epoch cap" }
        );
    }
    let predictions = output.predictions.as_ref().expect("full runs predict");
    write_predictions(predictions, &out.join("predictions.json"))?;

    let report = match &data.truth {
        Some(truth) => {
            let mut report = build_report(&output.model, &data.target_unlabeled, predictions, truth)?;
            if output.model.num_classes() >= 2 {
                let a = alignment_diagnostic(&output.model, &data.source, &data.target_labeled)?;
                report.matched_discrepancy = Some(a.matched);
                report.mismatched_discrepancy = Some(a.mismatched);
            }
            write_report(&report, &out)?;
            Some(report)
        }
        None => None,
    };

    write_json(
        &RunMeta {
            version: env!("CARGO_PKG_VERSION"),
            started_unix: started,
            finished_unix: unix_now(),
            resumed_from: args.resume.map(|s| s.dir_name()),
        },
        &out.join("run_meta.json"),
    )?;

    let converged = output.all_converged();
    if !converged {
        log::warn!("at least one stage stopped at its epoch cap before converging");
    }
    if let Some(report) = &report {
        print_metric(report);
    }
    Ok(if converged { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
