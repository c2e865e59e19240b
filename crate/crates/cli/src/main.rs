use clap::Parser;

fn main() {
    let cli = cimq::Cli::parse();
    if let Err(e) = cimq::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
