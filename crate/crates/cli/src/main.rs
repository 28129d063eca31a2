//! `tltc`: train, compress and analyse tiny Transformer language models.

mod args;
mod commands;
mod setup;

use clap::Parser;

fn main() {
    let cli = args::Cli::parse();
    if let Err(e) = setup::init_threads() {
        eprintln!("error: {e:#}");
        std::process::exit(2);
    }
    if let Err(e) = commands::run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
