use clap::error::ErrorKind;
use clap::Parser;
use evllm_cli::{run, Cli, EXIT_OK, EXIT_USAGE};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            std::process::exit(EXIT_OK);
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments");
            eprintln!("evllm: usage error: {} (see `evllm --help`)", line.trim_start_matches("error: "));
            std::process::exit(EXIT_USAGE);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("evllm: error: {e}");
        std::process::exit(e.exit_code());
    }
}
