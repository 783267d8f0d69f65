use std::process::ExitCode;

use saeda::eval::alignment_diagnostic;
use saeda::pipeline::predict;
use saeda::{load_dataset, load_model, GroundTruth};

use super::{build_report, create_dir, print_metric, read_json, write_report};
use crate::error::CliError;
use crate::EvaluateArgs;

pub fn run(args: &EvaluateArgs) -> Result<ExitCode, CliError> {
    let model = load_model(&args.model)?;
    let dataset = load_dataset(&args.dataset)?;
    let truth: GroundTruth = read_json(&args.truth)?;
    if truth.labels.len() != dataset.len() {
        return Err(CliError::Usage(format!(
            "{} has {} entries but the dataset holds {} samples",
            args.truth.display(),
            truth.labels.len(),
            dataset.len()
        )));
    }
    let predictions = predict(&model, &dataset)?;
    let mut report = build_report(&model, &dataset, &predictions, &truth)?;
    if let (Some(s), Some(t)) = (&args.source, &args.target_labeled) {
        let a = alignment_diagnostic(&model, &load_dataset(s)?, &load_dataset(t)?)?;
        report.matched_discrepancy = Some(a.matched);
        report.mismatched_discrepancy = Some(a.mismatched);
    }
    create_dir(&args.output)?;
    write_report(&report, &args.output)?;
    print_metric(&report);
    Ok(ExitCode::SUCCESS)
}
