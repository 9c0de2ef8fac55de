use clap::Parser;

fn main() {
    let cli = equibody_cli::Cli::parse();
    if let Err(e) = equibody_cli::run(cli) {
        eprintln!("equibody: {e}");
        std::process::exit(e.exit_code());
    }
}
