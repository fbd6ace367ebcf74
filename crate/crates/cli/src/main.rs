use std::process::ExitCode;

use clap::Parser;
use mrcom_cli::args::Cli;
use mrcom_cli::commands::execute;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = cli.command.resolve().and_then(|cfg| execute(&cfg));
    match outcome {
        Ok(o) => {
            if let Some(s) = &o.summary {
                print!("{}", s.markdown());
            }
            for l in &o.lines {
                println!("{l}");
            }
            ExitCode::from(o.exit_code)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
