use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use d2st_cli::config::RunConfig;
use d2st_cli::output::OUT_DIR_ENV;
use d2st_cli::{commands, exit_code};
use d2st_core::fewshot::Metric;
use d2st_core::{Error, Result};

#[derive(Parser)]
#[command(name = "d2st", version, about = "Few-shot video adapters on a frozen toy backbone")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed, overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Episode count (evaluation episodes, or episodes to export).
    #[arg(long, global = true)]
    episodes: Option<usize>,
    #[arg(long, global = true)]
    metric: Option<Metric>,
    /// Output directory. Falls back to $D2ST_OUT_DIR, then the config, then `runs`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint to write (train) or read (eval, viz).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    Train,
    Eval,
    Gradcheck,
    Bench,
    Viz {
        /// Number of top points per pathway in viz_topk.csv.
        #[arg(long, default_value_t = 50)]
        topk: usize,
        /// Video tensor file `[T, H, W, 3]`; a rendered video is used otherwise.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    #[command(name = "gen-data")]
    GenData,
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(n) = cli.episodes {
        cfg.episodes.eval_episodes = n;
    }
    if let Some(m) = cli.metric {
        cfg.metric = m;
    }
    let out = out_dir(&cli, &cfg);
    let ck = cli.checkpoint.as_deref();
    let record = |name: &str| out.join(format!("{name}.json")).display().to_string();
    match &cli.command {
        Command::Train => {
            let r = commands::cmd_train(&cfg, &out, ck)?;
            println!(
                "trained {} steps, final loss {:?}, checkpoint {}",
                r.steps,
                r.final_loss,
                r.checkpoint.display()
            );
            if !r.frozen_unchanged {
                return Err(Error::Contract("frozen parameters changed during training".into()));
            }
        }
        Command::Eval => {
            let r = commands::cmd_eval(&cfg, &out, ck)?;
            let note = if r.degenerate_ci { " (degenerate: one episode)" } else { "" };
            println!("accuracy {:.2}% ± {:.2}{note} over {} episodes", r.accuracy, r.ci95, r.episodes);
        }
        Command::Gradcheck => {
            let r = commands::cmd_gradcheck(&cfg, &out, None)?;
            for row in &r.rows {
                println!("{:<22} {:.3e} {}", row.name, row.max_rel_error, if row.passed { "ok" } else { "FAIL" });
            }
            if !r.passed {
                return Err(Error::Contract(format!("gradient check failed, see {}", record("gradcheck"))));
            }
        }
        Command::Bench => {
            let r = commands::cmd_bench(&cfg, &out)?;
            for row in &r.rows {
                println!(
                    "{:?}: tokens {} points {} flop ratio {:.1} dense {:.3} ms adsta {:.3} ms conv {:.3} ms",
                    row.volume, row.tokens, row.points, row.flop_ratio, row.dense_ms, row.adsta_ms, row.conv_ms
                );
            }
            println!("dense cross-check max |diff| {:.3e}", r.crosscheck_max_abs_diff);
        }
        Command::Viz { topk, input } => {
            let r = commands::cmd_viz(&cfg, &out, ck, input.as_deref(), *topk)?;
            for p in &r.pathways {
                println!("stage {} {}: {} points, importance sum {:.6}", p.stage, p.pathway, p.points, p.total_importance);
            }
        }
        Command::GenData => {
            let n = cli.episodes.unwrap_or(1);
            let r = commands::cmd_gen_data(&cfg, &out, n)?;
            println!("wrote {} episodes to {}", r.episodes.len(), Path::new(&out).display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
