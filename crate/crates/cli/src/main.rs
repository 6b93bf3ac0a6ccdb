use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use c2vae_cli::{
    ablate, eval_csv, eval_model, gen_data, load_config, load_data, open_checkpoint, sweep_gamma, train_run, traverse_run,
    CliError, GenDataArgs, TraverseArgs,
};

#[derive(Parser)]
#[command(name = "c2vae", version, about = "Contrastive copula VAE lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// key=value config file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic sprite dataset
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        shapes: usize,
        #[arg(long, default_value_t = 4)]
        scales: usize,
        #[arg(long, default_value_t = 8)]
        pos_x: usize,
        #[arg(long, default_value_t = 8)]
        pos_y: usize,
        /// Add a four-valued orientation factor
        #[arg(long)]
        orientation: bool,
        #[arg(long, default_value_t = 16)]
        resolution: usize,
    },
    /// Train one model
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Repeat the metric protocol with this many seeds
        #[arg(long, default_value_t = 1)]
        seeds: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the CSV here instead of stdout
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode latent traversals of one image as PGM files
    Traverse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        anchor: usize,
        /// Comma-separated latent dims (default: all)
        #[arg(long, value_delimiter = ',')]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 7)]
        steps: usize,
        #[arg(long, default_value_t = 2.0)]
        range: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score one model per gamma
    SweepGamma {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,6,8,10")]
        gammas: Vec<f64>,
        #[arg(long)]
        out: PathBuf,
        /// Runs trained concurrently
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Compare the four negative sources
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData { out, shapes, scales, pos_x, pos_y, orientation, resolution } => {
            let data = gen_data(&GenDataArgs { shapes, scales, pos_x, pos_y, orientation, resolution }, &out)?;
            println!("{} images in {}", data.len(), out.display());
        }
        Command::Train { config, data, out } => {
            let cfg = load_config(config.config.as_deref(), &config.set)?;
            let data = load_data(&data)?;
            let (_, logs) = train_run(&cfg, &data, &out)?;
            if let Some(last) = logs.last() {
                println!("step {} recon {:.4} kl {:.4}", last.step, last.recon, last.kl);
            }
        }
        Command::Eval { checkpoint, data, seeds, seed, out } => {
            let data = load_data(&data)?;
            let ckpt = open_checkpoint(&checkpoint, &data)?;
            let csv = eval_csv(&eval_model(&ckpt.model, &data, seeds, seed)?);
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
        }
        Command::Traverse { checkpoint, data, anchor, dims, steps, range, out } => {
            let data = load_data(&data)?;
            let ckpt = open_checkpoint(&checkpoint, &data)?;
            let files = traverse_run(&ckpt.model, &data, &TraverseArgs { anchor, dims, steps, range }, &out)?;
            println!("{} images in {}", files.len(), out.display());
        }
        Command::SweepGamma { config, data, gammas, out, jobs } => {
            let cfg = load_config(config.config.as_deref(), &config.set)?;
            let data = load_data(&data)?;
            print!("{}", sweep_gamma(&cfg, &data, &gammas, &out, jobs)?.to_csv());
        }
        Command::Ablate { config, data, out, jobs } => {
            let cfg = load_config(config.config.as_deref(), &config.set)?;
            let data = load_data(&data)?;
            print!("{}", ablate(&cfg, &data, &out, jobs)?.to_csv());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
