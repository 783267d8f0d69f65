use std::process::ExitCode;

use saeda::eval::{alignment_diagnostic, Alignment};
use saeda::pipeline::{build_model_for, num_classes, run_full_pipeline, NoLog, PipelineData, RunOptions, Stage};
use saeda::Dataset;
use serde::Serialize;

use super::{create_dir, obtain_data, write_json};
use crate::config::RunConfig;
use crate::error::CliError;
use crate::DiagnoseArgs;

#[derive(Serialize)]
struct Diagnosis {
    /// Source split against the labeled target split.
    labeled: Phases,
    /// Source split against the unlabeled target split scored with the
    /// hidden truth, when it is available.
    #[serde(skip_serializing_if = "Option::is_none")]
    held_out: Option<Phases>,
}

#[derive(Serialize)]
struct Phases {
    before: Alignment,
    after: Alignment,
}

pub fn run(args: &DiagnoseArgs) -> Result<ExitCode, CliError> {
    let mut cfg = RunConfig::resolve(&args.run)?;
    if let Some(beta) = args.beta {
        cfg.ablations.beta_override = Some(beta);
    }
    let training = cfg.effective_training();
    let out = cfg.output_dir.clone();
    create_dir(&out)?;
    let data = obtain_data(&cfg, &out)?;
    let held_out = data.truth.as_ref().map(|t| Dataset {
        labels: Some(t.labels.clone()),
        ..data.target_unlabeled.clone()
    });

    let classes = num_classes(&data.source, &data.target_labeled)?;
    let untrained = build_model_for(&data.source, &data.target_labeled, cfg.task, classes, &training)?;
    let trained = run_full_pipeline(
        PipelineData {
            source: &data.source,
            target_labeled: &data.target_labeled,
            target_unlabeled: &data.target_unlabeled,
        },
        cfg.task,
        &training,
        &RunOptions {
            stop_after: Some(Stage::Autoencoders),
            ..RunOptions::default()
        },
        &mut NoLog,
    )?
    .model;

    let phases = |target: &Dataset| -> Result<Phases, CliError> {
        Ok(Phases {
            before: alignment_diagnostic(&untrained, &data.source, target)?,
            after: alignment_diagnostic(&trained, &data.source, target)?,
        })
    };
    let diagnosis = Diagnosis {
        labeled: phases(&data.target_labeled)?,
        held_out: held_out.as_ref().map(phases).transpose()?,
    };
    write_json(&diagnosis, &out.join("diagnose.json"))?;

    println!("{:<24} {:>12} {:>12} {:>8}", "comparison", "matched", "mismatched", "ratio");
    let mut rows = vec![("labeled target", &diagnosis.labeled)];
    if let Some(h) = &diagnosis.held_out {
        rows.push(("held-out target", h));
    }
    for (name, p) in &rows {
        for (when, a) in [("before", p.before), ("after", p.after)] {
            println!(
                "{:<24} {:>12.4} {:>12.4} {:>8.3}",
                format!("{name} ({when})"),
                a.matched,
                a.mismatched,
                a.ratio()
            );
        }
    }
    let last = rows.last().expect("at least the labeled row").1.after;
    println!("metric={}", last.ratio());
    Ok(ExitCode::SUCCESS)
}
