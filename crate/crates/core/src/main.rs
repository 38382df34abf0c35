use std::process::ExitCode;

use clap::Parser;
use qfed::data::DATA_DIR_ENV;
use qfed::experiment::{self, CliArgs};
use qfed::QfedError;

fn main() -> ExitCode {
    let args = match CliArgs::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let cfg = match experiment::parse_config(&args, std::env::var(DATA_DIR_ENV).ok().as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("qfed: {e}");
            return ExitCode::from(2);
        }
    };
    match experiment::run_experiment(&cfg) {
        Ok(out) => {
            let m = &out.manifest;
            println!(
                "{} [{}]: accuracy {:.4}, loss {:.4}, trainable params {} of {} ({:.1}% reduction); wrote {}",
                m.label,
                cfg.mode.as_str(),
                m.final_accuracy,
                m.final_loss,
                m.params.trainable,
                m.params.classical,
                m.params.reduction_percent,
                cfg.out_dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("qfed: {e}");
            if matches!(e, QfedError::Usage(_)) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
