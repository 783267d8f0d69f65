use std::process::ExitCode;

use saeda::{Dataset, DatasetConfig};

use super::{create_dir, save_paired};
use crate::config::{DataSource, RunConfig};
use crate::error::CliError;
use crate::RunArgs;

pub fn run(args: &RunArgs) -> Result<ExitCode, CliError> {
    let cfg = RunConfig::resolve(args)?;
    let DataSource::Generate(dc) = cfg.data_source() else {
        return Err(CliError::Usage(
            "generate needs an inline `dataset` config, not `dataset_paths`".into(),
        ));
    };
    create_dir(&cfg.output_dir)?;
    let paired = saeda::generate_paired(dc)?;
    let root = save_paired(&paired, &cfg.output_dir)?;
    print!("{}", summary(dc, [&paired.source, &paired.target_labeled, &paired.target_unlabeled]));
    println!("wrote {}", root.display());
    Ok(ExitCode::SUCCESS)
}

fn summary(dc: &DatasetConfig, splits: [&Dataset; 3]) -> String {
    let mut out = format!("{:<18} {:>8} {:>12} {:>8} {:>7}\n", "split", "samples", "shape", "classes", "labels");
    for d in splits {
        out.push_str(&format!(
            "{:<18} {:>8} {:>12} {:>8} {:>7}\n",
            d.split.dir_name(),
            d.len(),
            d.shape.to_string(),
            dc.num_classes,
            if d.labels.is_some() { "yes" } else { "hidden" }
        ));
    }
    out.push_str(&format!("task {}, seed {}\n", dc.task, dc.seed));
    out
}
