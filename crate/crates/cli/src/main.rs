use std::process::ExitCode;

use clap::Parser;
use stainprompt_cli::{run, Cli};

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let kind = e.chain().find_map(|c| c.downcast_ref::<stainprompt::Error>()).map(error_kind).unwrap_or("command");
            let record = serde_json::json!({
                "error": {
                    "command": cli.command.name(),
                    "kind": kind,
                    "message": format!("{e:#}"),
                    "chain": e.chain().map(|c| c.to_string()).collect::<Vec<_>>(),
                }
            });
            eprintln!("{record}");
            ExitCode::FAILURE
        }
    }
}

fn error_kind(e: &stainprompt::Error) -> &'static str {
    use stainprompt::Error::*;
    match e {
        Shape(_) => "shape",
        Config(_) => "config",
        Domain(_) => "domain",
        Numeric(_) => "numeric",
        Input(_) => "input",
        Load(_) => "load",
        Training(_) => "training",
        Adapter(_) => "adapter",
        Optimization { .. } => "optimization",
        Stage { source, .. } => error_kind(source),
        Io { .. } => "io",
        Image(_) => "image",
        Serialization(_) => "serialization",
    }
}
