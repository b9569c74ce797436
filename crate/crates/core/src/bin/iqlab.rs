use clap::Parser;
use iqlab::cli::{execute, CliArgs};

fn main() {
    let args = CliArgs::parse();
    std::process::exit(execute(args));
}
