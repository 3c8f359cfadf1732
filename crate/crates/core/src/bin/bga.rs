use clap::Parser;

use bga_mner::cli::{error_line, run, Cli};

fn main() {
    let cli = Cli::parse();
    let stdout = std::io::stdout();
    if let Err(e) = run(cli, &mut stdout.lock()) {
        eprintln!("{}", error_line(&e));
        std::process::exit(1);
    }
}
