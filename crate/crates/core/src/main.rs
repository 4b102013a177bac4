use clap::error::ErrorKind;
use clap::Parser;
use featkd::cli::{exit_code, run, Cli};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) if matches!(err.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => err.exit(),
        Err(err) => {
            // Usage errors are config errors; keep them to one line like every other failure.
            let text = err.render().to_string();
            let first = text
                .lines()
                .find(|l| !l.trim().is_empty())
                .unwrap_or("invalid arguments");
            eprintln!("error: {}", first.trim_start_matches("error: "));
            std::process::exit(2);
        }
    };
    if let Err(err) = run(&cli) {
        eprintln!("error: {}", err.to_string().replace('\n', " "));
        std::process::exit(exit_code(&err));
    }
}
