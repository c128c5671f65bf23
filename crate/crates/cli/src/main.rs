use std::fs::{self, File};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use d2l::assets::{build_generator, build_oracle, generalization_check};
use d2l::config::RunConfig;
use d2l::cost::{cost_table, cost_text, write_cost_csv, CostInputs};
use d2l::generator::FrozenGenerator;
use d2l::metrics::{aggregate, read_results_csv, summary_svg, summary_table, ResultRow};
use d2l::oracle::{write_ranking_csv, write_windows_csv};
use d2l::pipeline::run_experiment;
use d2l::synth::make_benchmark;
use d2l::Error;

#[derive(Parser)]
#[command(name = "d2l", version, about = "Continual learning with dream classes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the frozen generator on a set disjoint from the benchmark.
    PretrainGen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory; defaults to `assets.generator`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Label trajectories on a disjoint bank and train the stopping oracle.
    TrainOracle {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Checkpoint directory; defaults to `assets.oracle`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also compare against an oracle trained on a second disjoint bank.
        #[arg(long)]
        generalization: bool,
    },
    /// Run a continual-learning experiment over seeds.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Use seeds 0..N instead of the configured list.
        #[arg(long)]
        seeds: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write stop-time dream samples as PGM files.
        #[arg(long)]
        dump_dreams: bool,
    },
    /// Print the training-cost table.
    Cost {
        #[arg(long, default_value = "paper-table7")]
        preset: String,
        /// `key=value` input override; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Also write the table as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Aggregate results CSVs into mean ± std per method and buffer.
    Report {
        #[arg(required = true)]
        results: Vec<PathBuf>,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingCheckpoint(_) => 3,
        Error::NonFinite(_) | Error::GeneratorUnusable { .. } => 4,
        _ => 1,
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn pretrain_gen(config: Option<&Path>, out: Option<PathBuf>) -> Result<(), Error> {
    let cfg = load_config(config)?;
    let dir = out.unwrap_or(cfg.assets.generator.clone());
    let bench = make_benchmark(&cfg.benchmark)?;
    let (generator, manifest) = build_generator(&bench, &cfg.generator_set, &cfg.pretrain)?;
    generator.save(&dir, &manifest)?;
    println!(
        "generator {} held-out error {:.5} -> {}",
        &manifest.hash[..12],
        manifest.heldout_error,
        dir.display()
    );
    Ok(())
}

fn train_oracle(config: Option<&Path>, out: Option<PathBuf>, generalization: bool) -> Result<(), Error> {
    let cfg = load_config(config)?;
    let dir = out.unwrap_or(cfg.assets.oracle.clone());
    let (generator, _) = FrozenGenerator::load(&cfg.assets.generator)?;
    let bench = make_benchmark(&cfg.benchmark)?;
    let art = build_oracle(&bench, &generator, &cfg.oracle, &[])?;
    art.oracle.save(&dir, &art.report)?;
    write_windows_csv(&art.labeled.windows, File::create(dir.join("windows.csv"))?)?;
    write_ranking_csv(&art.ranking, File::create(dir.join("ranking.csv"))?)?;
    println!(
        "oracle {} trajectories {} discarded {} windows {} val accuracy {:.4} -> {}",
        &art.oracle.hash()[..12],
        art.labeled.labels.len(),
        art.labeled.discarded,
        art.labeled.windows.len(),
        art.report.val_accuracy,
        dir.display()
    );
    if generalization {
        let report = generalization_check(&bench, &generator, &cfg.oracle)?;
        let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Checkpoint(e.to_string()))?;
        fs::write(dir.join("generalization.json"), json)?;
        println!(
            "generalization: mean |stop difference| {:.2} over {} of {} trajectories",
            report.mean_abs_deviation, report.compared, report.trajectories
        );
    }
    Ok(())
}

fn run(config: Option<&Path>, seeds: Option<u64>, out: Option<PathBuf>, dump_dreams: bool) -> Result<(), Error> {
    let mut cfg = load_config(config)?;
    if let Some(n) = seeds {
        cfg.seeds = (0..n).collect();
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let outcomes = run_experiment(&cfg, dump_dreams)?;
    let rows: Vec<ResultRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    print!("{}", summary_table(&aggregate(&rows)));
    println!("results -> {}", cfg.output_dir.join("results.csv").display());
    Ok(())
}

fn cost(preset: &str, overrides: &[String], csv: Option<PathBuf>) -> Result<(), Error> {
    let mut inputs = CostInputs::preset(preset)?;
    inputs.apply_overrides(overrides)?;
    inputs.validate()?;
    let table = cost_table(&inputs);
    print!("{}", cost_text(&table));
    if let Some(p) = csv {
        write_cost_csv(&table, File::create(p)?)?;
    }
    Ok(())
}

fn report(results: &[PathBuf], svg: Option<PathBuf>) -> Result<(), Error> {
    let mut rows = Vec::new();
    for p in results {
        let f = File::open(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        rows.extend(read_results_csv(f)?);
    }
    let summaries = aggregate(&rows);
    print!("{}", summary_table(&summaries));
    if let Some(p) = svg {
        fs::write(p, summary_svg(&summaries))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::PretrainGen { config, out } => pretrain_gen(config.as_deref(), out),
        Command::TrainOracle {
            config,
            out,
            generalization,
        } => train_oracle(config.as_deref(), out, generalization),
        Command::Run {
            config,
            seeds,
            out,
            dump_dreams,
        } => run(config.as_deref(), seeds, out, dump_dreams),
        Command::Cost { preset, overrides, csv } => cost(&preset, &overrides, csv),
        Command::Report { results, svg } => report(&results, svg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
