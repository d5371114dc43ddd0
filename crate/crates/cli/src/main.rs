use std::path::PathBuf;
use std::process::ExitCode;

use augal_core::active::CycleReport;
use augal_core::harness::{self, Cell, GridSpec, RunOptions};
use augal_core::{verify, Error};
use clap::{Args, Parser, Subcommand};

/// Deterministic deep active learning with augmentation-based uncertainty.
#[derive(Parser)]
#[command(name = "augal", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every (strategy, loss, seed) cell of a config or preset.
    Run(RunArgs),
    /// Plot mean test accuracy per cycle from a results directory.
    Chart {
        results_dir: PathBuf,
        out_svg: PathBuf,
    },
    /// Like `run`, additionally writing per-cycle score CSVs for every cell.
    ScoreDump(RunArgs),
    /// Run the built-in gradient and invariant checks.
    Verify,
}

#[derive(Args)]
struct RunArgs {
    /// Config file path or preset name (fashion-desk, full-protocol, synth-smoke).
    config: String,
    /// Dataset root; defaults to $AUGAL_DATA_DIR, then ./data.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    /// Results root.
    #[arg(long, default_value = "results")]
    out_dir: PathBuf,
    /// Override the config's seed list, e.g. 1,2,3.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Grid cells run concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Write each cell's augmentation events as JSON lines (augment.jsonl).
    #[arg(long)]
    dump_augment: bool,
}

fn progress(cell: &Cell, r: &CycleReport) {
    let loss = r.final_loss();
    eprintln!(
        "{cell} cycle {}: labeled {} test accuracy {:.2}% (l_ce {:.4}, l_co {:.4}, l_cm {:.4}) {:.1}s",
        r.cycle, r.labeled_count, r.test_accuracy, loss.l_ce, loss.l_co, loss.l_cm, r.wall_time_s
    );
}

fn run(args: RunArgs, dump_scores: bool) -> Result<ExitCode, Error> {
    let mut grid = GridSpec::load(&args.config)?;
    if let Some(seeds) = args.seeds {
        grid.seeds = seeds;
        grid.validate()?;
    }
    let opts = RunOptions {
        out_dir: args.out_dir,
        data_dir: harness::resolve_data_dir(args.data_dir.as_deref()),
        jobs: args.jobs,
        dump_augment: args.dump_augment,
        dump_scores,
    };
    let cells = grid.cells().len();
    eprintln!(
        "running {cells} cells of `{}` into {}",
        grid.name,
        opts.out_dir.display()
    );
    let manifest = harness::run_grid(&grid, &opts, Some(&progress))?;
    let failed: Vec<_> = manifest.failures().collect();
    for f in &failed {
        eprintln!(
            "cell {} failed: {}",
            f.cell,
            f.error.as_deref().unwrap_or("unknown error")
        );
    }
    eprintln!(
        "{} of {cells} cells succeeded; manifest at {}",
        cells - failed.len(),
        opts.out_dir.join("manifest.json").display()
    );
    Ok(if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn chart(results: PathBuf, out: PathBuf) -> Result<ExitCode, Error> {
    let curves = harness::emit_chart(&results, &out)?;
    for c in &curves {
        let last = c.points.last().expect("nonempty curve");
        println!(
            "{}: cycle {} mean {:.2} ± {:.2} over {} seeds",
            c.label(),
            last.cycle,
            last.mean,
            last.std,
            last.seeds
        );
    }
    println!(
        "wrote {} and {}",
        out.display(),
        out.with_extension("csv").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn verify() -> Result<ExitCode, Error> {
    let checks = verify::run_all()?;
    let mut ok = true;
    for c in &checks {
        ok &= c.passed;
        let status = if c.passed { "PASS" } else { "FAIL" };
        println!("{status} {}: {}", c.name, c.detail);
    }
    Ok(if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args, false),
        Command::ScoreDump(args) => run(args, true),
        Command::Chart {
            results_dir,
            out_svg,
        } => chart(results_dir, out_svg),
        Command::Verify => verify(),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Usage(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
