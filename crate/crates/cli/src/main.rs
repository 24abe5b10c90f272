use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use irkd_cli::{cmd_analyze, cmd_eval, cmd_generate, cmd_plot, cmd_train};
use irkd_core::dataset::GenerateOptions;

#[derive(Parser)]
#[command(
    name = "irkd",
    version,
    about = "Point-supervised infrared small-target detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with manifest and splits.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 160)]
        n_train: usize,
        #[arg(long, default_value_t = 40)]
        n_test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        val_ratio: f64,
    },
    /// Train from a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate the student of a checkpoint and write report.csv.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Output directory; defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Attention statistics and feature panels of the teacher.
    Analyze {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Maximum number of panels to write.
        #[arg(long, default_value_t = 8)]
        panels: usize,
    },
    /// Plot train/test IoU curves from an epoch log.
    Plot {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn default_out(ckpt: &std::path::Path, out: Option<PathBuf>) -> PathBuf {
    out.unwrap_or_else(|| ckpt.parent().map(|p| p.to_path_buf()).unwrap_or_default())
}

fn run(cli: Cli) -> irkd_core::Result<()> {
    match cli.command {
        Command::Generate {
            out,
            n_train,
            n_test,
            size,
            seed,
            val_ratio,
        } => {
            let ds = cmd_generate(
                &out,
                &GenerateOptions {
                    n_train,
                    n_test,
                    size,
                    seed,
                    val_ratio,
                },
            )?;
            println!(
                "wrote {} samples ({} train, {} val, {} test) to {}",
                ds.samples.len(),
                ds.split.train.len(),
                ds.split.val.len(),
                ds.split.test.len(),
                out.display()
            );
        }
        Command::Train { config, resume } => {
            let dir = cmd_train(&config, resume.as_deref())?;
            println!("run directory: {}", dir.display());
        }
        Command::Eval {
            ckpt,
            data,
            split,
            out,
        } => {
            let out = default_out(&ckpt, out);
            let report = cmd_eval(&ckpt, &data, &split, &out)?;
            print!("{}", report.to_table());
        }
        Command::Analyze {
            ckpt,
            data,
            split,
            out,
            panels,
        } => {
            let out = default_out(&ckpt, out);
            let a = cmd_analyze(&ckpt, &data, &split, &out, panels)?;
            print!("{}", irkd_core::metrics::attention_csv(&a.attention));
            println!("{} panels written to {}", a.panels.len(), out.display());
        }
        Command::Plot { log, out } => {
            let n = cmd_plot(&log, &out)?;
            println!("plotted {n} epochs to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
