use clap::Parser;

fn main() {
    let cli = whitenet::cli::Cli::parse();
    std::process::exit(whitenet::cli::run(cli));
}
