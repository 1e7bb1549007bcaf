use clap::Parser;

fn main() {
    let cli = sealign_cli::Cli::parse();
    if let Err(err) = sealign_cli::run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}
