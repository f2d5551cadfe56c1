use clap::Parser;
use tailcast_cli::{run, Cli, CliError};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = match run(cli) {
        Ok(outcome) => outcome.exit_code(),
        Err(e) => {
            eprintln!("{e}");
            match e {
                CliError::Usage(_) => 1,
                CliError::Runtime(_) => 2,
            }
        }
    };
    std::process::exit(code);
}
