//! Command-line driver for attnlab.
//!
//! Exit codes: 0 pass, 1 property violation, 2 usage or config error, 3 I/O
//! error.

pub mod args;
pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::io::Write;
use std::path::{Path, PathBuf};

pub use args::{Cli, Command, TensorOp};
pub use commands::Outcome;
pub use config::{Format, RunConfig};
pub use error::CliError;

/// Loads the config file (if any) and applies command-line overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&cli.overrides());
    match &cli.command {
        Command::Verify { inject_sign_flip: true, .. } => cfg.verify.inject_sign_flip = true,
        Command::Sweep { logits, grid } => {
            if logits.is_some() {
                cfg.sweep.logits = logits.clone();
            }
            if grid.is_some() {
                cfg.sweep.grid = grid.clone();
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn execute(cli: &Cli, cfg: &RunConfig) -> Result<Outcome, CliError> {
    let base = cli.config.as_deref().and_then(Path::parent).map(Path::to_path_buf).unwrap_or_default();
    match &cli.command {
        Command::Verify { suite, .. } => commands::verify(cfg, *suite),
        Command::Sweep { .. } => commands::sweep(cfg),
        Command::Calibrate { validate_fixture: Some(m), blocks } => {
            commands::validate_fixture(*m, blocks.unwrap_or(cfg.schedule.blocks))
        }
        Command::Calibrate { validate_fixture: None, .. } => commands::calibrate_cmd(cfg, &base),
        Command::Simulate => commands::simulate(cfg),
        Command::Config => Ok(Outcome {
            outputs: vec![report::Output::Document {
                name: "config".into(),
                value: serde_json::to_value(cfg).expect("config serializes"),
            }],
            default_format: Some(Format::Json),
            ..Outcome::default()
        }),
        Command::Tensor { op: TensorOp::Info { path } } => commands::tensor_info(path),
        Command::Tensor { op: TensorOp::Random { path, dims, mask } } => commands::tensor_random(cfg, path, dims, *mask),
    }
}

/// Output directory from the flag or config, else the environment.
pub fn output_dir(cfg: &RunConfig) -> Option<PathBuf> {
    cfg.output.dir.clone().or_else(|| std::env::var_os(config::OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
}

/// Writes the outcome and turns violations into an error.
pub fn emit(outcome: &Outcome, cfg: &RunConfig, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<(), CliError> {
    let format = cfg.output.format.or(outcome.default_format).unwrap_or(Format::Csv);
    match output_dir(cfg) {
        Some(dir) => {
            for p in report::write_outputs(&dir, &outcome.outputs, format)? {
                writeln!(stderr, "wrote {}", p.display())?;
            }
        }
        None => stdout.write_all(report::render(&outcome.outputs, format)?.as_bytes())?,
    }
    for line in &outcome.summary {
        writeln!(stderr, "{line}")?;
    }
    match outcome.violations.first() {
        None => Ok(()),
        Some(first) => Err(CliError::Violation(format!("{} violation(s); first: {first}", outcome.violations.len()))),
    }
}

/// Full run with process exit code.
pub fn run(cli: &Cli, stdout: &mut dyn Write, stderr: &mut dyn Write) -> u8 {
    let result = resolve_config(cli).and_then(|cfg| {
        let outcome = execute(cli, &cfg)?;
        emit(&outcome, &cfg, stdout, stderr)
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "attnlab: {e}");
            e.exit_code()
        }
    }
}
