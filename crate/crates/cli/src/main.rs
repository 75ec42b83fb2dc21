use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use meshfit::error::Error;
use meshfit::fixtures::{fixture, FIXTURE_NAMES};
use meshfit::pipeline::{run_files, write_fixture, FitReport, RunConfig, RunPaths};

#[derive(Parser, Debug)]
#[command(name = "meshfit", version, about = "Fit an accessory mesh onto a region of a base mesh without intersections")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the fitting pipeline.
    Fit(FitArgs),
    /// Write the bundled test scenes as OBJ, region and config files.
    Fixtures {
        #[arg(long, default_value = ".")]
        dir: PathBuf,
        /// Only this fixture; all of them by default.
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(FIXTURE_NAMES))]
        name: Option<String>,
    },
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    base: PathBuf,
    #[arg(long)]
    object: PathBuf,
    /// Face indices of the fit region, one per line.
    #[arg(long)]
    region: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Named material preset.
    #[arg(long, conflicts_with_all = ["youngs", "poisson"])]
    material: Option<String>,
    #[arg(long, requires = "poisson")]
    youngs: Option<f64>,
    #[arg(long, requires = "youngs")]
    poisson: Option<f64>,
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Disable a step: 0 initialization, 1 tight fit, 2 trajectory,
    /// 3 fine-tune, 4 deformation. Repeatable.
    #[arg(long = "skip-step", value_parser = clap::value_parser!(u8).range(0..=4))]
    skip_step: Vec<u8>,
    /// Let Step 3 start from an intersecting pose, uncertified.
    #[arg(long)]
    force_ablation: bool,
    /// Write per-iteration losses to `<out>.trace.csv`.
    #[arg(long)]
    trace: bool,
    /// Write the final per-face Jacobians to `<out>.jacobians.txt`.
    #[arg(long)]
    dump_jacobians: bool,
    /// Print a per-step summary and record step timings in the report.
    #[arg(long)]
    verbose: bool,
}

impl FitArgs {
    fn config(&self) -> Result<RunConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if self.material.is_some() || self.youngs.is_some() {
            cfg.material = self.material.clone();
            cfg.youngs_modulus = self.youngs;
            cfg.poisson_ratio = self.poisson;
        }
        for &n in &self.skip_step {
            cfg.steps.disable(n as usize)?;
        }
        cfg.force_ablation |= self.force_ablation;
        cfg.report_timings |= self.verbose;
        cfg.validate()?;
        Ok(cfg)
    }

    fn paths(&self) -> RunPaths {
        RunPaths {
            base: self.base.clone(),
            object: self.object.clone(),
            region: self.region.clone(),
            output: self.out.clone(),
            trace: self.trace,
            dump_jacobians: self.dump_jacobians,
        }
    }
}

fn summarize(report: &FitReport) {
    eprintln!("material {} (E {}, nu {})", report.material_name, report.material.youngs_modulus, report.material.poisson_ratio);
    for s in &report.steps {
        eprintln!(
            "{:>6}  iters {:>5}  L_p {:.6e}  total {:.6e}  faces {}  depth {:e}{}",
            s.step,
            s.iterations,
            s.losses.proximity,
            s.losses.total,
            s.metrics.intersecting_face_count,
            s.metrics.max_penetration,
            s.note.as_deref().map(|n| format!("  ({n})")).unwrap_or_default(),
        );
        if let Some(t) = &s.trajectory {
            eprintln!(
                "        candidates {}/{} tried, {} rounds, {} timesteps kept",
                t.candidates_accepted, t.candidates_tried, t.rounds, t.accepted_timesteps
            );
        }
    }
}

fn fit(args: &FitArgs) -> Result<u8, Error> {
    let cfg = args.config()?;
    let (report, code) = run_files(&args.paths(), &cfg)?;
    if args.verbose {
        summarize(&report);
    }
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    let m = report.final_metrics;
    eprintln!(
        "{}: intersecting faces {}, max penetration {:e}",
        if report.certified { "certified" } else { "not certified" },
        m.intersecting_face_count,
        m.max_penetration
    );
    Ok(code as u8)
}

fn fixtures(dir: &PathBuf, name: Option<&str>) -> Result<u8, Error> {
    let names: Vec<&str> = match name {
        Some(n) => vec![n],
        None => FIXTURE_NAMES.to_vec(),
    };
    for n in names {
        let files = write_fixture(&fixture(n)?, dir)?;
        println!("{}", files.config.display());
    }
    Ok(0)
}

fn main() -> ExitCode {
    // Usage errors exit 1 like other hard errors; 2 means a warned run.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = match &cli.command {
        Command::Fit(args) => fit(args),
        Command::Fixtures { dir, name } => fixtures(dir, name.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
