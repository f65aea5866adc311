mod args;
mod cmds;
mod config;
mod util;

use clap::Parser;

use args::{Cli, Command};

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmds::gen_data(a),
        Command::Train(a) => cmds::train_cmd(a),
        Command::ProbeLeakage(a) => cmds::probe_leakage(a),
        Command::Steer(a) => cmds::steer_cmd(a),
        Command::Eval(a) => cmds::eval_cmd(a),
        Command::Ablate(a) => cmds::ablate(a),
    };
    if let Err(e) = result {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
