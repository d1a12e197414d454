use clap::Parser;

fn main() {
    let cli = evfi_cli::Cli::parse();
    if let Err(e) = evfi_cli::run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
