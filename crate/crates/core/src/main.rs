use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mmbt::commands::{
    cmd_ablate, cmd_check_gradients, cmd_export_attention, cmd_gen, cmd_train, ConfigRuns,
};
use mmbt::config::ExperimentConfig;
use mmbt::metrics::format_pct;
use mmbt::Error;

/// Image-guided multi-modality ultrasound classifier on synthetic studies.
#[derive(Parser)]
#[command(name = "mmbt", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Gen {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        difficulty: f64,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
        /// Also write PGM previews of the static images.
        #[arg(long)]
        previews: bool,
    },
    /// Cross-validate one configuration.
    Train {
        /// key=value config file; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Run the ablation matrix under shared folds and seeds.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated row names; all seven when omitted.
        #[arg(long, value_delimiter = ',')]
        rows: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Export frame attention of one study under a checkpoint.
    ExportAttention {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        study: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of full-model gradients. Set MMBT_VERIFY=1
    /// for 64-bit mode.
    CheckGradients {
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
}

fn load_config(path: Option<&PathBuf>) -> Result<ExperimentConfig, Error> {
    path.map_or_else(
        || Ok(ExperimentConfig::default()),
        |p| ExperimentConfig::load(p),
    )
}

fn print_runs(runs: &[ConfigRuns]) {
    for r in runs {
        let (auc, f1, acc) = (
            r.median_of(|s| &s.auc),
            r.median_of(|s| &s.f1),
            r.median_of(|s| &s.acc),
        );
        println!(
            "{:<14} AUC {}  F1 {}  Acc {}",
            r.name,
            format_pct(auc.mean, auc.std),
            format_pct(f1.mean, f1.std),
            format_pct(acc.mean, acc.std)
        );
    }
}

fn usage(msg: &str) -> ExitCode {
    eprintln!("error: {msg}");
    ExitCode::from(1)
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Gen {
            seed,
            n,
            out,
            difficulty,
            force,
            previews,
        } => {
            if n == 0 {
                return Ok(usage("--n must be at least 1"));
            }
            let (m, hash) = cmd_gen(&out, seed, n, difficulty, force, previews)?;
            println!(
                "wrote {} studies ({} benign, {} malignant) to {}",
                m.n,
                m.benign,
                m.malignant,
                out.display()
            );
            println!("dataset hash {hash}");
        }
        Command::Train {
            config,
            data,
            out,
            jobs,
        } => {
            let cfg = load_config(config.as_ref())?;
            let runs = cmd_train(&cfg, &data, &out, jobs.max(1))?;
            print_runs(std::slice::from_ref(&runs));
        }
        Command::Ablate {
            config,
            data,
            out,
            rows,
            jobs,
        } => {
            let cfg = load_config(config.as_ref())?;
            let runs = cmd_ablate(&cfg, &rows, &data, &out, jobs.max(1))?;
            print_runs(&runs);
            println!("wrote {}", out.join("table1.csv").display());
        }
        Command::ExportAttention {
            ckpt,
            data,
            study,
            out,
        } => {
            let frames = cmd_export_attention(&ckpt, &data, study, &out)?;
            for f in &frames {
                println!(
                    "frame {:>3}  weight {:.4}  rank {:>2}{}",
                    f.frame_index,
                    f.weight,
                    f.rank,
                    if f.keyframe { "  keyframe" } else { "" }
                );
            }
        }
        Command::CheckGradients { seeds } => {
            let verify = std::env::var("MMBT_VERIFY").is_ok_and(|v| v == "1");
            let lines = cmd_check_gradients(&seeds, verify)?;
            let mode = if verify { "f64" } else { "f32" };
            let mut ok = true;
            for l in &lines {
                ok &= l.passed;
                println!(
                    "{} {mode} {:<28} seed {}  max rel error {:.3e} ({} coords, worst {})",
                    if l.passed { "ok  " } else { "FAIL" },
                    l.variant,
                    l.seed,
                    l.report.max_rel_error,
                    l.report.coords_checked,
                    l.report.worst_param.as_deref().unwrap_or("-")
                );
            }
            if !ok {
                eprintln!("error: gradient check failed");
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
