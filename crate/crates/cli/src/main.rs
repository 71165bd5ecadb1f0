use std::net::{IpAddr, Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::de::DeserializeOwned;
use volcore::io::read_json;
use volcore::pipeline::{align_stack, evaluate, write_synth_stack, AlignParams, EvalInput, REPORT_FILE};
use volcore::synth::{generate_stack, SynthSpec};
use volcore::volume::{export_patches, extract_patches, read_core, PatchParams};
use volcore_service::{serve, tile_core, TileParams};

#[derive(Debug, Parser)]
#[command(name = "volcore", version, about = "Volumetric cores from serial tissue sections")]
struct Cli {
    /// More logging (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Register a section stack and write the core archive.
    Align {
        stack_dir: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        /// JSON file of alignment parameters.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Skip the non-rigid stage.
        #[arg(long)]
        rigid_only: bool,
        /// Run the rigid stage on sections downsampled by this factor.
        #[arg(long)]
        downsample: Option<usize>,
    },
    /// Extract volumetric patches from a core archive.
    Patch {
        core_dir: PathBuf,
        /// Defaults to `<core_dir>/patches`.
        #[arg(short, long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = PatchParams::default().size)]
        size: usize,
        #[arg(long, default_value_t = PatchParams::default().min_tissue)]
        min_tissue: f64,
    },
    /// Build deep-zoom pyramids and the manifest for a core archive.
    Tile {
        core_dir: PathBuf,
        #[arg(long, default_value_t = TileParams::default().tile_size)]
        tile_size: usize,
        #[arg(long, default_value_t = TileParams::default().overlap)]
        overlap: usize,
        #[arg(long, default_value_t = TileParams::default().quality, value_parser = clap::value_parser!(u8).range(1..=100))]
        quality: u8,
    },
    /// Serve tiled cores under a root directory.
    Serve {
        #[arg(env = "VOLCORE_ROOT")]
        root: PathBuf,
        #[arg(short, long, env = "VOLCORE_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value_t = IpAddr::V4(Ipv4Addr::LOCALHOST))]
        host: IpAddr,
        /// Static files (the viewer) served for non-API paths.
        #[arg(long)]
        static_dir: Option<PathBuf>,
    },
    /// Generate a synthetic section stack from a JSON spec.
    Synth {
        spec: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value = "synth")]
        core_id: String,
    },
    /// Compute metrics and print them as JSON.
    Eval {
        /// JSON evaluation input; flags override its fields.
        input: Option<PathBuf>,
        #[arg(long)]
        core_dir: Option<PathBuf>,
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Also write the report here.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Pipeline(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Pipeline(e)
    }
}

impl From<volcore::Error> for Failure {
    fn from(e: volcore::Error) -> Self {
        Failure::Pipeline(e.into())
    }
}

fn config<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    read_json(path).with_context(|| format!("reading {}", path.display())).map_err(Failure::Usage)
}

fn run(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Align {
            stack_dir,
            out,
            params,
            rigid_only,
            downsample,
        } => {
            let mut p: AlignParams = match params {
                Some(path) => config(&path)?,
                None => AlignParams::default(),
            };
            if rigid_only {
                p.nonrigid = None;
            }
            if let Some(f) = downsample {
                if f == 0 {
                    return Err(Failure::Usage(anyhow::anyhow!("--downsample must be positive")));
                }
                p.rigid_downsample = f;
            }
            let report = align_stack(&stack_dir, &out, &p).with_context(|| format!("aligning {}", stack_dir.display()))?;
            if !report.failed_pairs.is_empty() {
                warn!("pairs without a transform: {:?}", report.failed_pairs);
            }
            info!("final error {:.3} um in {:.1} s", report.final_error.core_error, report.elapsed_seconds);
            println!("{}", out.join(REPORT_FILE).display());
        }
        Command::Patch {
            core_dir,
            out,
            size,
            min_tissue,
        } => {
            if size == 0 || !(0.0..=1.0).contains(&min_tissue) {
                return Err(Failure::Usage(anyhow::anyhow!("need size > 0 and min-tissue in [0, 1]")));
            }
            let params = PatchParams {
                size,
                min_tissue,
                ..PatchParams::default()
            };
            let core = read_core(&core_dir).with_context(|| format!("reading {}", core_dir.display()))?;
            let patches = extract_patches(&core, &params);
            if patches.is_empty() {
                warn!("{}: no patch passes the tissue threshold", core_dir.display());
            }
            let out = out.unwrap_or_else(|| core_dir.join("patches"));
            let index = export_patches(&patches, &params, core.depth(), &out)?;
            println!("{} patches in {}", index.patches.len(), out.display());
        }
        Command::Tile {
            core_dir,
            tile_size,
            overlap,
            quality,
        } => {
            if tile_size == 0 {
                return Err(Failure::Usage(anyhow::anyhow!("--tile-size must be positive")));
            }
            let params = TileParams {
                tile_size,
                overlap,
                quality,
            };
            let m = tile_core(&core_dir, &params).with_context(|| format!("tiling {}", core_dir.display()))?;
            println!("{} pyramids of {}x{}", m.depth, m.width, m.height);
        }
        Command::Serve {
            root,
            port,
            host,
            static_dir,
        } => {
            if !root.is_dir() {
                return Err(Failure::Usage(anyhow::anyhow!("{} is not a directory", root.display())));
            }
            let rt = tokio::runtime::Runtime::new().context("starting runtime")?;
            rt.block_on(serve(root, SocketAddr::new(host, port), static_dir)).context("server")?;
        }
        Command::Synth { spec, out, core_id } => {
            let spec: SynthSpec = config(&spec)?;
            let stack = generate_stack(&spec).context("generating stack")?;
            write_synth_stack(&stack, &core_id, &out)?;
            println!("{} sections in {}", stack.sections.len(), out.display());
        }
        Command::Eval {
            input,
            core_dir,
            truth,
            out,
        } => {
            let mut inp: EvalInput = match input {
                Some(path) => config(&path)?,
                None => EvalInput::default(),
            };
            inp.core_dir = core_dir.or(inp.core_dir);
            inp.truth = truth.or(inp.truth);
            let report = evaluate(&inp)?;
            let text = serde_json::to_string_pretty(&report).context("serialising report")?;
            if let Some(path) = out {
                std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
            }
            println!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Pipeline(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
