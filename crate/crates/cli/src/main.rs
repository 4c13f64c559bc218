use clap::Parser;

fn main() {
    let cli = ctxsel::Cli::parse();
    if let Err(e) = ctxsel::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
