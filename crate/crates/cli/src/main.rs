use std::process::ExitCode;

use clap::Parser;
use step_cli::{cmd_classify, cmd_oracle, cmd_run, cmd_synth_cassette, Cli, Command, RunConfig};
use step_core::eval::format_percent;

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run(args) => {
            let cfg = RunConfig::resolve(&args)?;
            let out = cmd_run(&cfg)?;
            println!(
                "{} episodes, SR {}, SSR {}; reports in {}",
                out.traces.len(),
                format_percent(out.result.sr),
                format_percent(out.result.ssr),
                cfg.out_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Oracle { task, depth } => match cmd_oracle(&task, depth)? {
            Some(plan) => {
                print!("{plan}");
                Ok(ExitCode::SUCCESS)
            }
            None => {
                eprintln!("no plan within {depth} steps");
                Ok(ExitCode::from(2))
            }
        },
        Command::Classify { trace, task } => {
            println!("{}", cmd_classify(&trace, &task)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::SynthCassette { suite, recipes, out } => {
            let n = cmd_synth_cassette(&suite, recipes.as_deref(), &out)?;
            println!("wrote {n} entries to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
