use clap::Parser;
use nnh_adapt::cli::{run, Cli};

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        let message = e.to_string().replace('\n', " ");
        eprintln!("error kind={} code={}: {message}", e.kind(), e.exit_code());
        std::process::exit(e.exit_code());
    }
}
