use clap::Parser;
use minivl::cli::{run, Cli};

fn main() {
    std::process::exit(run(Cli::parse()));
}
