mod cli;

use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = cli::Cli::parse();
    if let Err(f) = cli::run(args) {
        eprintln!("error: {}", f.error());
        std::process::exit(f.exit_code());
    }
}
