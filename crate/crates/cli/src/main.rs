use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mipcad::mip::export_png;
use mipcad::pipeline::{Pipeline, PipelineConfig, Stage, StageOutcome};
use mipcad::synthetic::{write_dataset, SyntheticConfig};
use mipcad::{Error, Result};

/// Lung nodule detection on sliding-slab MIP images.
#[derive(Debug, Parser)]
#[command(name = "mipcad", version)]
struct Cli {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `data_root` (after MIPCAD_DATA_ROOT).
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Overrides `cache_root` (after MIPCAD_CACHE_ROOT).
    #[arg(long, global = true)]
    cache_root: Option<PathBuf>,
    #[arg(long, global = true)]
    fold: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Repeat for more log output.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Resample, normalize and lung-mask every scan.
    Segment,
    /// Render the MIP stacks of every slab thickness.
    Mip,
    /// Train one detector per slab thickness.
    TrainDetect,
    /// Run the detectors and extract per-stream candidates.
    Detect,
    /// Fuse the per-stream candidates.
    Merge,
    /// Train both false-positive reduction classifiers.
    TrainFpr,
    /// Score the fused candidates of the test scans.
    Score,
    /// Stage-one metrics and the FROC curve on the test scans.
    Froc,
    /// Write the text summary, FROC table and plot.
    Report,
    /// Run every stage in order.
    #[command(alias = "all")]
    Run,
    /// Write the synthetic mini-dataset and a matching config file.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 6)]
        scans: usize,
        #[arg(long, default_value_t = 7)]
        data_seed: u64,
        /// Where to write the config; defaults to `<out>/mipcad.toml`.
        #[arg(long)]
        config_out: Option<PathBuf>,
    },
    /// Print the fold plan as JSON.
    Plan,
    /// Print the effective configuration as TOML.
    Config {
        /// Start from the synthetic preset instead of the defaults.
        #[arg(long)]
        synthetic: bool,
    },
    /// Write one cached MIP image as PNG.
    ExportPng {
        #[arg(long)]
        scan: String,
        #[arg(long)]
        thickness: u32,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn stage_of(c: &Command) -> Option<Stage> {
    Some(match c {
        Command::Segment => Stage::Segment,
        Command::Mip => Stage::Mip,
        Command::TrainDetect => Stage::TrainDetect,
        Command::Detect => Stage::Detect,
        Command::Merge => Stage::Merge,
        Command::TrainFpr => Stage::TrainFpr,
        Command::Score => Stage::Score,
        Command::Froc => Stage::Froc,
        Command::Report => Stage::Report,
        _ => return None,
    })
}

fn resolve_config(cli: &Cli, base: Option<PipelineConfig>) -> Result<PipelineConfig> {
    let mut cfg = match (&cli.config, base) {
        (Some(path), _) => PipelineConfig::load(path)?,
        (None, Some(b)) => b,
        (None, None) => {
            let mut c = PipelineConfig::default();
            c.apply_env();
            c
        }
    };
    if let Some(d) = &cli.data_root {
        cfg.data_root = d.clone();
    }
    if let Some(d) = &cli.cache_root {
        cfg.cache_root = d.clone();
    }
    if let Some(f) = cli.fold {
        cfg.fold = f;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn print_outcome(o: &StageOutcome) {
    let tag = if o.cached { " (cached)" } else { "" };
    if o.stage == Stage::Report {
        println!("{}{tag}", o.stage);
        print!("{}", o.message);
    } else {
        println!("{}{tag}: {}", o.stage, o.message);
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(stage) = stage_of(&cli.command) {
        let p = Pipeline::open(resolve_config(cli, None)?)?;
        print_outcome(&p.run(stage)?);
        return Ok(());
    }
    match &cli.command {
        Command::Run => {
            let p = Pipeline::open(resolve_config(cli, None)?)?;
            for s in Stage::ALL {
                print_outcome(&p.run(s)?);
            }
            println!("candidates: {}", p.candidates_csv().display());
            println!("report: {}", p.report_dir().display());
        }
        Command::Synth {
            out,
            scans,
            data_seed,
            config_out,
        } => {
            let sc = SyntheticConfig {
                scans: *scans,
                seed: *data_seed,
                ..SyntheticConfig::default()
            };
            let anns = write_dataset(out, &sc)?;
            let mut cfg = PipelineConfig::synthetic();
            cfg.data_root = out.clone();
            cfg.cache_root = out.join("cache");
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            let path = config_out.clone().unwrap_or_else(|| out.join("mipcad.toml"));
            std::fs::write(&path, cfg.to_toml_string()?)?;
            println!("{scans} scans with {} nodules in {}", anns.len(), out.display());
            println!("config: {}", path.display());
        }
        Command::Plan => {
            let p = Pipeline::open(resolve_config(cli, None)?)?;
            println!("{}", serde_json::to_string_pretty(p.plan())?);
        }
        Command::Config { synthetic } => {
            let base = synthetic.then(PipelineConfig::synthetic);
            print!("{}", resolve_config(cli, base)?.to_toml_string()?);
        }
        Command::ExportPng {
            scan,
            thickness,
            index,
            out,
        } => {
            let p = Pipeline::open(resolve_config(cli, None)?)?;
            if !p.scan_dir(scan).join(format!("mip-{thickness}.arr")).exists() {
                return Err(Error::MissingDependency {
                    stage: "export-png".into(),
                    what: format!("{thickness} mm MIP stack of {scan} was not found"),
                    run_first: Stage::Mip.name().into(),
                });
            }
            export_png(&p.load_stack(scan, *thickness)?, *index, out)?;
            println!("{}", out.display());
        }
        _ => unreachable!("stage commands handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
