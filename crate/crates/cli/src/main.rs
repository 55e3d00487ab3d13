use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;
use lid_cli::{run, Cli};

fn one_line(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("ERROR usage: {}", one_line(first));
            return ExitCode::from(2);
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(&cli, &mut stdout) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let cat = e.category();
            let msg = e.to_string();
            let msg = msg.strip_prefix(&format!("{cat}: ")).unwrap_or(&msg);
            eprintln!("ERROR {cat}: {}", one_line(msg));
            ExitCode::from(if e.category() == "usage" { 2 } else { 1 })
        }
    }
}
