use clap::Parser;
use esindy::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
