use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use interproto::experiment::{
    cmd_analyze, cmd_compare, cmd_eval, cmd_gen_data, cmd_train, Arm, Context, ExperimentConfig, OUT_ENV,
};

#[derive(Parser)]
#[command(name = "interproto", version, about = "Inter-prototype loss experiments on synthetic child/adult faces")]
struct Cli {
    /// Flat `key = value` experiment config; defaults apply to omitted keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Seed to run (repeatable); replaces the config's seed list.
    #[arg(long = "seed", global = true, value_name = "N")]
    seeds: Vec<u64>,

    /// Output root.
    #[arg(long, global = true, value_name = "DIR", long_help = format!(
        "Output root. Falls back to the config's out_dir, then ${OUT_ENV}, then ./interproto-out"
    ))]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and test sets.
    GenData,
    /// Train one arm for every seed.
    Train {
        #[arg(long, value_name = "NAME")]
        arm: Arm,
        /// Training CSV (default: <out>/data/train.csv).
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Verification and rank-1 identification metrics for one arm.
    Eval {
        #[arg(long, value_name = "NAME")]
        arm: Arm,
        /// Evaluation CSV (default: <out>/data/test.csv).
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Similarity heatmaps and the 2D prototype projection for one arm.
    Analyze {
        #[arg(long, value_name = "NAME")]
        arm: Arm,
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Mean and standard deviation over seeds per arm.
    Compare {
        /// Arms to include (repeatable); default is every arm with runs.
        #[arg(long = "arm", value_name = "NAME")]
        arms: Vec<Arm>,
    },
}

fn run(cli: Cli) -> interproto::Result<()> {
    let config = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    let ctx = Context::new(config, cli.out, cli.seeds)?;
    match cli.command {
        Command::GenData => {
            let summary = cmd_gen_data(&ctx)?;
            println!("{summary}");
            println!("wrote {} and {}", ctx.train_path().display(), ctx.test_path().display());
        }
        Command::Train { arm, data } => {
            for s in cmd_train(&ctx, arm, data.as_deref())? {
                let cos = s.child_mean_abs_cos.map_or("n/a".to_string(), |c| format!("{c:.4}"));
                println!(
                    "{} seed {}: final loss {:.4}, child prototype |cos| {cos} -> {}",
                    s.arm,
                    s.seed,
                    s.final_total_loss,
                    s.run_dir.display()
                );
            }
        }
        Command::Eval { arm, data } => {
            for m in cmd_eval(&ctx, arm, data.as_deref())? {
                let verification: Vec<String> = m
                    .verification
                    .iter()
                    .map(|(gap, acc)| format!("gap {gap}: {acc:.4}"))
                    .collect();
                println!(
                    "{} seed {}: verification {}; rank-1 {:.4} ({} probes)",
                    m.arm,
                    m.seed,
                    verification.join(", "),
                    m.rank1,
                    m.rank1_probes
                );
            }
        }
        Command::Analyze { arm, data } => {
            for s in cmd_analyze(&ctx, arm, data.as_deref())? {
                println!(
                    "{} seed {}: child prototype |cos| {:.4}, child intra {:.4}, child inter {:.4} -> {}",
                    s.arm,
                    s.seed,
                    s.child_prototype_mean_abs_cos,
                    s.child_intra_mean,
                    s.child_inter_mean,
                    ctx.run_dir(arm, s.seed).join("analysis").display()
                );
            }
        }
        Command::Compare { arms } => {
            let report = cmd_compare(&ctx, &arms)?;
            print!("{}", report.render_table());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
