use clap::Parser;

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // clap reports its own usage errors with exit code 2.
    let cli = fbc_cli::Cli::parse();
    if let Err(e) = fbc_cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
