use std::process::ExitCode;

use clap::Parser;
use fockspace::cli::{run, CliArgs};

fn main() -> ExitCode {
    run(&CliArgs::parse())
}
