use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use vpgc_cli::{commands, RunConfig};

#[derive(Parser)]
#[command(name = "vpgc", version, about = "Visual prompt completion experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.steps=500`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the generator and decoder on random-target pairs and captions.
    Pretrain(Common),
    /// Build training, held-out and eval data.
    GenData(Common),
    /// Train the completion module on a frozen backbone.
    Train(Common),
    /// Score eval records.
    Eval(Common),
    /// Train and score one completion module per insert layer.
    ProbeLayers(Common),
    /// Dump the generator's attention for one image.
    DumpAttn(Common),
    /// Print the resolved configuration.
    Config(Common),
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let common = match &cli.command {
        Command::Pretrain(c)
        | Command::GenData(c)
        | Command::Train(c)
        | Command::Eval(c)
        | Command::ProbeLayers(c)
        | Command::DumpAttn(c)
        | Command::Config(c) => c,
    };
    let cfg = RunConfig::resolve(common.config.as_deref(), &common.overrides)?;
    match cli.command {
        Command::Pretrain(_) => {
            let s = commands::pretrain(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::GenData(_) => println!("{}", commands::gen_data(&cfg)?.render()),
        Command::Train(_) => {
            let s = commands::train(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Command::Eval(_) => {
            let s = commands::eval(&cfg)?;
            print!("{}", vpgc_core::evalkit::report_csv(&s.result.rows));
            if let Some(p) = &s.probe {
                print!("{}", vpgc_core::evalkit::probe_csv(&p.rows));
            }
        }
        Command::ProbeLayers(_) => print!("{}", commands::layer_csv(&commands::probe_layers(&cfg)?)),
        Command::DumpAttn(_) => {
            let s = commands::dump_attn(&cfg)?;
            println!(
                "{} layers x {} queries over a {}x{} grid; global map sum {:.12}",
                s.layers, s.queries, s.side, s.side, s.global_sum
            );
        }
        Command::Config(_) => println!("{}", serde_json::to_string_pretty(&cfg)?),
    }
    Ok(())
}
