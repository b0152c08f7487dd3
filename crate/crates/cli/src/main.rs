mod args;
mod commands;
mod output;
mod scene;

use std::process::ExitCode;
use std::time::Instant;

use clap::Parser;

use args::{Cli, Command};
use output::{read_manifest, write_manifest, Failure, Manifest, Outputs};

fn run(cli: &Cli, out: &mut Outputs) -> Result<(), Failure> {
    match &cli.command {
        Command::Simulate(a) => commands::simulate(a, cli.seed, out),
        Command::Optimize(a) => commands::optimize(a, cli.seed, cli.format, out),
        Command::Ablate(a) => commands::ablate_cmd(a, cli.seed, cli.format, out),
        Command::Masks(a) => commands::masks(a, cli.seed, cli.format, out),
        Command::Evaluate(a) => commands::evaluate(a, out),
        Command::Replay(_) => unreachable!("replay is resolved before dispatch"),
    }
}

/// Swaps a replay invocation for the one its manifest recorded.
fn resolve(cli: Cli) -> Result<Cli, Failure> {
    let Command::Replay(r) = &cli.command else {
        return Ok(cli);
    };
    let mut recorded = read_manifest(&r.manifest)?.config;
    if let Command::Replay(_) = recorded.command {
        return Err(Failure::Input("a manifest cannot record a replay".into()));
    }
    if let Some(dir) = &r.out {
        recorded.command.set_out_dir(dir.clone());
    }
    recorded.threads = cli.threads;
    Ok(recorded)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let start = Instant::now();
    let cli = match resolve(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("input error: --threads: {e}");
            return ExitCode::from(2);
        }
    }
    let dir = cli.command.out_dir().expect("resolved commands have an output directory").clone();
    let mut out = Outputs::new(&dir);
    let result = run(&cli, &mut out);
    let status = result.as_ref().map_or_else(|e| e.exit_code(), |_| 0);
    if let Err(e) = &result {
        eprintln!("{e}");
    }
    // a failed run still documents itself when it got as far as writing output
    if status == 0 || dir.is_dir() {
        let manifest = Manifest {
            command: cli.command.name().to_string(),
            seed: cli.seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: out.files().to_vec(),
            wall_time_s: start.elapsed().as_secs_f64(),
            status,
            config: cli,
        };
        if let Err(e) = std::fs::create_dir_all(&dir).map_err(|e| Failure::Input(e.to_string())).and_then(|_| write_manifest(&dir, &manifest)) {
            eprintln!("{e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    }
    ExitCode::from(status as u8)
}
