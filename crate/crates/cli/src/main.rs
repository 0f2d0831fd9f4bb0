//! `kmask`: command-line front end for the knowledge-masking pipeline.

mod commands;
mod io;

use std::process::ExitCode;

use clap::Parser;
use kmask_core::{Error, ErrorKind};

use commands::Cli;

/// First line: `kmask: error kind=<k> exit=<n> msg=<json string>`.
/// Following lines: human detail.
fn report(err: &anyhow::Error) -> u8 {
    let core = err.chain().find_map(|e| e.downcast_ref::<Error>());
    let kind = core.map_or(ErrorKind::Runtime, Error::kind);
    // Sources already spelled out by their parent's message are skipped.
    let mut parts: Vec<String> = Vec::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if parts.last().is_none_or(|p| !p.contains(&text)) {
            parts.push(text);
        }
    }
    let msg = parts
        .iter()
        .map(|p| p.lines().next().unwrap_or_default())
        .collect::<Vec<_>>()
        .join(": ");
    eprintln!(
        "kmask: error kind={} exit={} msg={}",
        kind,
        kind.exit_code(),
        serde_json::to_string(&msg).expect("string serializes")
    );
    if let Some(Error::Config(issues)) = core {
        for i in issues {
            eprintln!("  {i}");
        }
    } else if parts.len() > 1 || parts[0].contains('\n') {
        for line in parts.iter().flat_map(|p| p.lines()) {
            eprintln!("  {line}");
        }
    }
    kind.exit_code() as u8
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(cli.log_level())
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => ExitCode::from(report(&e)),
    }
}
