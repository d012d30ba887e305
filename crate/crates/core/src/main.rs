use clap::Parser;
use otfm::cli::{error_line, run, Cli};

fn main() {
    let cli = Cli::parse();
    let mut stdout = std::io::stdout().lock();
    if let Err(e) = run(&cli, &mut stdout) {
        eprintln!("{}", error_line(&e));
        std::process::exit(e.exit_code());
    }
}
