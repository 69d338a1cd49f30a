use clap::Parser;
use plcvio::bench::cli;

fn main() {
    let args = cli::Cli::parse();
    std::process::exit(cli::run(args));
}
