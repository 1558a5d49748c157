use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use headsplat::commands::{cmd_eval, cmd_fit, cmd_render, cmd_synth, metrics_json};
use headsplat::config::{Group, RunConfig};
use headsplat::{CliError, Result};

/// Mesh-rigged Gaussian surfel head fitting.
#[derive(Parser, Debug)]
#[command(name = "headsplat", version)]
struct Cli {
    /// TOML config; command-line flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads (default: available cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset with known parameters.
    Synth(SynthArgs),
    /// Fit a head to a dataset.
    Fit(FitArgs),
    /// Re-render a checkpoint, optionally at a new expression or pose.
    Render(RenderArgs),
    /// Point-to-surface distances between a mesh and a scan.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
}

#[derive(Args, Debug)]
struct FitArgs {
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<u64>,
    /// Parameter groups kept at their initial values.
    #[arg(long, value_enum, value_delimiter = ',')]
    freeze: Vec<Group>,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    snapshot_every: Option<u64>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    frame: Option<usize>,
    /// Expression code, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    psi: Option<Vec<f64>>,
    /// Extra global rotation as a rotation vector in degrees: x,y,z.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    rotate: Option<Vec<f64>>,
    /// Global translation x,y,z.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    translation: Option<Vec<f64>>,
    /// Also write color.ppm.
    #[arg(long)]
    ppm: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    mesh: Option<PathBuf>,
    #[arg(long)]
    scan: Option<PathBuf>,
    #[arg(long)]
    landmarks: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    /// Metrics JSON destination.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Fix the alignment scale to 1.
    #[arg(long)]
    metrical: bool,
    #[arg(long)]
    icp_iterations: Option<usize>,
}

fn triple(flag: &str, v: &[f64]) -> Result<[f64; 3]> {
    match v {
        [x, y, z] => Ok([*x, *y, *z]),
        _ => Err(CliError::validation(format!("--{flag} takes 3 comma-separated values, got {}", v.len()))),
    }
}

fn apply_flags(config: &mut RunConfig, cli: Cli) -> Result<Command> {
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    match &cli.command {
        Command::Synth(a) => {
            let s = &mut config.synth;
            if let Some(v) = &a.output {
                s.output = v.clone();
            }
            if let Some(v) = a.frames {
                s.frames = v;
            }
            if let Some(v) = a.width {
                config.camera.width = v;
            }
            if let Some(v) = a.height {
                config.camera.height = v;
            }
        }
        Command::Fit(a) => {
            let f = &mut config.fit;
            if let Some(v) = &a.dataset {
                f.dataset = v.clone();
            }
            if let Some(v) = &a.output {
                f.output = v.clone();
            }
            if let Some(v) = a.iterations {
                f.settings.iterations = v;
            }
            if !a.freeze.is_empty() {
                f.freeze = a.freeze.clone();
            }
            if let Some(v) = &a.resume {
                f.resume = Some(v.clone());
            }
            if let Some(v) = a.checkpoint_every {
                f.checkpoint_every = v;
            }
            if let Some(v) = a.snapshot_every {
                f.snapshot_every = v;
            }
        }
        Command::Render(a) => {
            let r = &mut config.render;
            if let Some(v) = &a.checkpoint {
                r.checkpoint = v.clone();
            }
            if let Some(v) = &a.dataset {
                r.dataset = v.clone();
            }
            if let Some(v) = &a.output {
                r.output = v.clone();
            }
            if let Some(v) = a.frame {
                r.frame = v;
            }
            if let Some(v) = &a.psi {
                r.psi = Some(v.clone());
            }
            if let Some(v) = &a.rotate {
                r.rotate_deg = Some(triple("rotate", v)?);
            }
            if let Some(v) = &a.translation {
                r.translation = Some(triple("translation", v)?);
            }
            r.ppm |= a.ppm;
        }
        Command::Eval(a) => {
            let e = &mut config.eval;
            if let Some(v) = &a.mesh {
                e.mesh = v.clone();
            }
            if let Some(v) = &a.scan {
                e.scan = v.clone();
            }
            if let Some(v) = &a.landmarks {
                e.landmarks = v.clone();
            }
            if let Some(v) = &a.model {
                e.model = Some(v.clone());
            }
            if let Some(v) = &a.output {
                e.output = Some(v.clone());
            }
            e.metrical |= a.metrical;
            if let Some(v) = a.icp_iterations {
                e.icp_iterations = v;
            }
        }
    }
    Ok(cli.command)
}

fn run(cli: Cli) -> Result<()> {
    let threads = cli
        .threads
        .unwrap_or_else(|| std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1));
    if threads == 0 {
        return Err(CliError::validation("--threads must be >= 1"));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::runtime(format!("thread pool: {e}")))?;

    let (mut config, source) = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::validation(format!("{}: {e}", p.display())))?;
            (RunConfig::parse(&text).map_err(|e| e.context(p.display()))?, Some(text))
        }
        None => (RunConfig::default(), None),
    };
    let command = apply_flags(&mut config, cli)?;
    let source = source.as_deref();
    match command {
        Command::Synth(_) => {
            let r = cmd_synth(&config, source)?;
            println!(
                "synth: {} frames in {}, mesh coverage {:?} px, {} scan points",
                r.frames,
                config.synth.output.display(),
                r.coverage,
                r.scan_points
            );
        }
        Command::Fit(_) => {
            let s = cmd_fit(&config, source)?;
            println!(
                "fit: {} iterations, {} prototypes, masked L1 {:.6} -> {:.6}, {:.1} s",
                s.iterations, s.prototypes, s.initial_l1, s.final_l1, s.wall_time
            );
        }
        Command::Render(_) => {
            let r = cmd_render(&config, source)?;
            println!("render: wrote {}", r.output.display());
        }
        Command::Eval(_) => {
            let m = cmd_eval(&config)?;
            println!("{}", metrics_json(&m)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
