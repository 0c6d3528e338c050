use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cvs_core::harness::{
    ablation_specs, checks_text, comparison_specs, dataset_dir, default_lambdas, ensure_dataset, lambda_label, run_specs, seeds_from, selftest,
    sweep_specs, train_run, write_report, zero_lambda_mismatches, AblationTable, ComparisonTable, RunConfig, SimilarityTable,
    StudyInputs, StudyRuns, SweepTable,
};
use cvs_core::mapeval::Roi;
use cvs_core::scenegen::Split;
use cvs_core::supervision::Variant;
use cvs_core::{Error, Result};

#[derive(Parser)]
#[command(name = "cvs", about = "Cross-view BEV supervision experiments")]
struct Cli {
    /// TOML run configuration; omitted fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Student seed (first seed for multi-seed commands).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output root for datasets, teachers, runs and reports.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Override the configured region of interest.
    #[arg(long, global = true)]
    roi: Option<Roi>,
    /// Retrain runs even when a matching record exists.
    #[arg(long, global = true)]
    fresh: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration as TOML.
    Config,
    /// Generate and export the corpus.
    Gen {
        /// Total scene count for a smoke corpus.
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train one student variant (pretraining the teacher if needed).
    Train {
        #[arg(long, default_value = "norm_adapter")]
        variant: Variant,
        #[arg(long)]
        lambda: Option<f64>,
    },
    /// Baseline versus the full method.
    Compare {
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// The four training variants.
    Ablation {
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Sensitivity to the alignment weight.
    SweepLambda {
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Comma-separated weights; default 0 and 0.25..4 times the tuned weight.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Feature similarity of every variant to the teacher.
    Similarity {
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Comparison on both RoIs, ablation, sweep and similarity on the
    /// configured RoI, then the report.
    Study {
        #[arg(long, default_value_t = 3)]
        seeds: usize,
    },
    /// Markdown report from the run directories under the output root.
    Report,
    /// Oracle and property suites plus a contract-checked smoke run.
    Selftest {
        #[arg(long, default_value_t = 200)]
        smoke_steps: usize,
    },
}

/// Hard failure or partial sweep failure.
enum Outcome {
    Done,
    Partial,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output = o.clone();
    }
    if let Some(r) = cli.roi {
        cfg.roi = r;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(dir: &Path, name: &str, text: &str) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|source| Error::Io { path, source })
}

fn report_failures(runs: &StudyRuns) -> Outcome {
    for (spec, e) in &runs.failures {
        eprintln!("FAILED {} lambda={} seed={}: {e}", spec.variant, lambda_label(spec.lambda), spec.seed);
    }
    if runs.partial() {
        Outcome::Partial
    } else {
        Outcome::Done
    }
}

fn worst(a: Outcome, b: Outcome) -> Outcome {
    match (a, b) {
        (Outcome::Done, Outcome::Done) => Outcome::Done,
        _ => Outcome::Partial,
    }
}

fn compare(cfg: &RunConfig, seeds: &[u64], jobs: usize, reuse: bool) -> Result<Outcome> {
    let runs = run_specs(cfg, &comparison_specs(cfg, seeds), jobs, reuse)?;
    let t = ComparisonTable::from_records(cfg.roi, cfg.supervision.lambda_bev, &runs.records);
    let md = t.to_markdown();
    print!("{md}");
    write_text(&cfg.output.join("tables"), &format!("comparison_{}.md", cfg.roi), &md)?;
    Ok(report_failures(&runs))
}

fn ablation(cfg: &RunConfig, seeds: &[u64], jobs: usize, reuse: bool) -> Result<Outcome> {
    let runs = run_specs(cfg, &ablation_specs(cfg, seeds), jobs, reuse)?;
    let lambda = cfg.supervision.lambda_bev;
    let md = AblationTable::from_records(cfg.roi, lambda, &runs.records).to_markdown();
    print!("{md}");
    write_text(&cfg.output.join("tables"), &format!("ablation_{}.md", cfg.roi), &md)?;
    let sim = SimilarityTable::from_records(cfg.roi, lambda, &runs.records).to_markdown();
    write_text(&cfg.output.join("tables"), &format!("similarity_{}.md", cfg.roi), &sim)?;
    Ok(report_failures(&runs))
}

fn similarity(cfg: &RunConfig, seeds: &[u64], jobs: usize, reuse: bool) -> Result<Outcome> {
    let runs = run_specs(cfg, &ablation_specs(cfg, seeds), jobs, reuse)?;
    let md = SimilarityTable::from_records(cfg.roi, cfg.supervision.lambda_bev, &runs.records).to_markdown();
    print!("{md}");
    write_text(&cfg.output.join("tables"), &format!("similarity_{}.md", cfg.roi), &md)?;
    Ok(report_failures(&runs))
}

fn sweep(cfg: &RunConfig, seeds: &[u64], values: &[f64], jobs: usize, reuse: bool) -> Result<Outcome> {
    let tuned = cfg.supervision.lambda_bev;
    let lambdas = if values.is_empty() { default_lambdas(tuned) } else { values.to_vec() };
    if !lambdas.contains(&0.0) {
        return Err(Error::Config("the sweep must include lambda = 0".into()));
    }
    let runs = run_specs(cfg, &sweep_specs(cfg, seeds, &lambdas), jobs, reuse)?;
    let t = SweepTable::from_records(cfg.roi, tuned, &runs.records);
    let text = t.to_text();
    print!("{text}");
    println!("variation {:.6} gain {:.6}", t.variation(), t.gain());
    let dir = cfg.output.join("tables");
    write_text(&dir, &format!("sweep_{}.txt", cfg.roi), &text)?;
    write_text(&dir, &format!("sweep_{}.svg", cfg.roi), &t.to_svg())?;
    let bad = zero_lambda_mismatches(cfg.roi, &runs.records);
    if !bad.is_empty() {
        return Err(Error::Format {
            path: dir,
            reason: format!("lambda = 0 differs from the baseline for seeds {bad:?}"),
        });
    }
    Ok(report_failures(&runs))
}

fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = load_config(cli)?;
    let reuse = !cli.fresh;
    let seeds = |n: usize| seeds_from(cfg.seed, n);
    if !matches!(cli.command, Command::Config | Command::Report) {
        fs::create_dir_all(&cfg.output).map_err(|source| Error::Io {
            path: cfg.output.clone(),
            source,
        })?;
        cfg.save(&cfg.output.join("config.toml"))?;
    }
    match &cli.command {
        Command::Config => {
            print!("{}", cfg.to_toml());
            Ok(Outcome::Done)
        }
        Command::Gen { scenes } => {
            let mut c = cfg.clone();
            if let Some(n) = scenes {
                c.data = RunConfig::smoke(*n, 1).data;
            }
            let data = ensure_dataset(&c)?;
            println!(
                "{}: {} train + {} val scenes, grid {}x{} cells",
                dataset_dir(&c).display(),
                data.split(Split::Train).count(),
                data.split(Split::Val).count(),
                data.grid.width_cells,
                data.grid.height_cells
            );
            Ok(Outcome::Done)
        }
        Command::Train { variant, lambda } => {
            let c = cfg.for_run(*variant, lambda.unwrap_or(cfg.supervision.lambda_bev), cfg.seed);
            let inputs = StudyInputs::prepare(&c)?;
            let r = train_run(&c, &inputs, reuse)?;
            println!(
                "{} {} mAP {:.4} teacher_invocations {} ({:.1}s)",
                r.dir.display(),
                r.roi,
                r.eval.map,
                r.teacher_invocations,
                r.wall_seconds
            );
            Ok(Outcome::Done)
        }
        Command::Compare { seeds: n } => compare(&cfg, &seeds(*n), cli.jobs, reuse),
        Command::Ablation { seeds: n } => ablation(&cfg, &seeds(*n), cli.jobs, reuse),
        Command::SweepLambda { seeds: n, values } => sweep(&cfg, &seeds(*n), values, cli.jobs, reuse),
        Command::Similarity { seeds: n } => similarity(&cfg, &seeds(*n), cli.jobs, reuse),
        Command::Study { seeds: n } => {
            let s = seeds(*n);
            let mut out = Outcome::Done;
            for roi in Roi::ALL {
                let c = RunConfig { roi, ..cfg.clone() };
                out = worst(out, compare(&c, &s, cli.jobs, reuse)?);
            }
            out = worst(out, ablation(&cfg, &s, cli.jobs, reuse)?);
            out = worst(out, sweep(&cfg, &s, &[], cli.jobs, reuse)?);
            let path = write_report(&cfg.output, cfg.supervision.lambda_bev)?;
            println!("report: {}", path.display());
            Ok(out)
        }
        Command::Report => {
            let stored = cfg.output.join("config.toml");
            let lambda = if cli.config.is_none() && stored.is_file() {
                RunConfig::load(&stored)?.supervision.lambda_bev
            } else {
                cfg.supervision.lambda_bev
            };
            let path = write_report(&cfg.output, lambda)?;
            println!("report: {}", path.display());
            Ok(Outcome::Done)
        }
        Command::Selftest { smoke_steps } => {
            let checks = selftest(&cfg.output, *smoke_steps)?;
            let text = checks_text(&checks);
            print!("{text}");
            write_text(&cfg.output, "selftest.txt", &text)?;
            if checks.iter().all(|c| c.passed()) {
                Ok(Outcome::Done)
            } else {
                Err(Error::Config("selftest failures".into()))
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(1)
        }
    }
}
