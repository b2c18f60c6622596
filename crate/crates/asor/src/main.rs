use clap::Parser;

fn main() {
    let cli = asor::cli::Cli::parse();
    if let Err(e) = asor::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
