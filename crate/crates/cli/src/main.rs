use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowforge::dataset::load_csv;
use flowforge::pipeline::{ablate, build, eval_models, AnyModel, BuildConfig, BuildOptions, StageError};
use flowforge::Error;

/// Dataset-to-accelerator toolchain for level-based flow soft sensors.
#[derive(Parser)]
#[command(name = "forge", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every stage from dataset to HDL bundle and report.json.
    Build {
        #[arg(short, long)]
        config: PathBuf,
        /// Emit HDL even when the design does not fit the target.
        #[arg(long)]
        override_fit: bool,
        /// Output directory (overrides `output_dir` in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed (overrides `seed` in the config).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score serialized models on a CSV dataset. Pass `-m` once per model.
    Eval {
        #[arg(short, long = "model", required = true)]
        models: Vec<PathBuf>,
        #[arg(short, long)]
        data: PathBuf,
    },
    /// Train and score one model per sensor subset from the config.
    Ablate {
        #[arg(short, long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Print JSON rows instead of a table.
        #[arg(long)]
        json: bool,
    },
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn load_config(path: &Path) -> Result<BuildConfig, StageError> {
    BuildConfig::load(path).map_err(|source| StageError {
        stage: flowforge::pipeline::Stage::Config,
        source,
    })
}

fn fail(err: &StageError) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(err.exit_code())
}

fn run_build(config: &Path, opts: BuildOptions) -> ExitCode {
    let cfg = match load_config(config) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let out = match build(&cfg, &config_dir(config), &opts) {
        Ok(o) => o,
        Err(e) => return fail(&e),
    };
    let r = &out.report;
    println!("wrote {}", out.out_dir.display());
    println!(
        "float  r2 {:.5}  mape {:.3}%",
        r.float_metrics.r2, r.float_metrics.mape_percent
    );
    println!(
        "int8   r2 {:.5}  mape {:.3}%  accuracy delta {:.3} pp",
        r.quant_metrics.r2, r.quant_metrics.mape_percent, r.accuracy_delta_pp
    );
    println!(
        "cycles sequential {}  {} {}  reduction {:.2}%",
        r.cycles.sequential.total_cycles,
        r.cycles.configured.mode,
        r.cycles.configured.total_cycles,
        r.cycles.speedup.reduction_percent
    );
    for c in &r.comparisons {
        println!(
            "target {:<10} lut {:6.2}%  bram {:6.2}%  dsp {:6.2}%  {:.3e} J/inference{}{}",
            c.target,
            c.resources.lut_percent,
            c.resources.bram_percent,
            c.resources.dsp_percent,
            c.energy.energy_per_inference_j,
            if c.fit.fits { "" } else { "  (does not fit)" },
            if c.min_energy { "  <- lowest energy" } else { "" },
        );
    }
    for w in &r.fit.warnings {
        eprintln!("warning: {w}");
    }
    for f in &r.lint_findings {
        eprintln!("lint: {f}");
    }
    ExitCode::SUCCESS
}

fn run_eval(models: &[PathBuf], data: &Path) -> ExitCode {
    let result = (|| -> flowforge::Result<_> {
        let models = models
            .iter()
            .map(|p| AnyModel::load(p))
            .collect::<flowforge::Result<Vec<_>>>()?;
        let dataset = load_csv(data)?;
        eval_models(&models, &dataset)
    })();
    match result {
        Ok(report) => {
            println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Config { .. }
                | Error::Parse { .. }
                | Error::Io { .. }
                | Error::Json(_)
                | Error::Argument(_) => 4,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn run_ablate(config: &Path, seed: Option<u64>, json: bool) -> ExitCode {
    let rows = match load_config(config).and_then(|cfg| ablate(&cfg, &config_dir(config), seed)) {
        Ok(r) => r,
        Err(e) => return fail(&e),
    };
    if json {
        println!("{}", serde_json::to_string_pretty(&rows).expect("rows serialize"));
        return ExitCode::SUCCESS;
    }
    println!("{:<12} {:>9} {:>9} {:>12}", "sensors", "r2", "mape%", "mse");
    for r in &rows {
        let sensors: Vec<String> = r.sensors.iter().map(|s| s.to_string()).collect();
        println!(
            "{:<12} {:>9.5} {:>9.3} {:>12.4e}",
            format!("{{{}}}", sensors.join(",")),
            r.metrics.r2,
            r.metrics.mape_percent,
            r.metrics.mse
        );
    }
    ExitCode::SUCCESS
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Build {
            config,
            override_fit,
            out,
            seed,
        } => run_build(
            &config,
            BuildOptions {
                override_fit,
                out_dir: out,
                seed,
                profile_dir: None,
            },
        ),
        Command::Eval { models, data } => run_eval(&models, &data),
        Command::Ablate { config, seed, json } => run_ablate(&config, seed, json),
    }
}
