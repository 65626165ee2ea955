use clap::Parser;

fn main() {
    let cli = upet_cli::Cli::parse();
    if let Err(e) = upet_cli::commands::run(cli) {
        eprintln!("{}", upet_cli::error_json(&e));
        std::process::exit(1);
    }
}
