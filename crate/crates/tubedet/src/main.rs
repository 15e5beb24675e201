use clap::Parser;

fn main() {
    let cli = tubedet::cli::Cli::parse();
    if let Err(e) = tubedet::cli::run(&cli) {
        eprintln!("error: {}", e);
        std::process::exit(1);
    }
}
