use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tsc_bench::commands::{self, Context, FeatureRef};
use tsc_bench::config::{parse_layout, parse_rows};
use tsc_bench::grid::GridMode;
use tsc_bench::report::REFERENCE_LAYOUTS;
use tsc_bench::sweep::{parse_generator, Axis};
use tsc_bench::{CliError, CliResult, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "tsc-bench", version, about = "Train and benchmark transformational sparse coding models")]
struct Cli {
    /// Flat `key = value` configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    /// Suppress progress and summary output.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a forest and write the model and per-epoch metrics.
    Train {
        /// Image file, PGM directory, or `synthetic`.
        #[arg(long)]
        data: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Compare forests against the sparse-coding baseline on held-out patches.
    Compare {
        #[arg(long)]
        data: Option<String>,
        /// Comma-separated `lambda:TxB` rows, e.g. `0.4:4x8,0.5:8x8`.
        #[arg(long)]
        rows: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Render a model's features as a PGM grid.
    ExportFeatures {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_enum, default_value_t = GridMode::Leaves)]
        mode: GridMode,
        /// Output file; defaults to `features.pgm` in the output directory.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Sweep two transformation coordinates and record the best-scale error.
    Sweep {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: Option<String>,
        #[arg(long, default_value_t = 0)]
        tree: usize,
        /// Leaf index within the tree; the root when omitted.
        #[arg(long)]
        leaf: Option<usize>,
        /// Two generators by name or index.
        #[arg(long, default_value = "translate-x,translate-y")]
        axes: String,
        #[arg(long, default_value_t = 17)]
        points: usize,
        /// `LO:HI` for the first axis.
        #[arg(long, allow_hyphen_values = true)]
        range_a: Option<String>,
        /// `LO:HI` for the second axis.
        #[arg(long, allow_hyphen_values = true)]
        range_b: Option<String>,
        #[arg(long, default_value_t = 2000)]
        batch: usize,
    },
    /// Report degrees of freedom of forests and equal-size dictionaries.
    Dof {
        /// `TxB` layouts; defaults to the reference table's.
        #[arg(long = "layout")]
        layouts: Vec<String>,
        /// Pixels per patch.
        #[arg(long, default_value_t = 100)]
        pixels: u64,
    },
    /// Generate synthetic double-line patches.
    GenLines {
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
}

fn load_config(cli: &Cli, data: Option<&String>) -> CliResult<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(data) = data {
        cfg.data = Some(data.clone());
    }
    Ok(cfg)
}

fn parse_range(text: &str) -> CliResult<(f64, f64)> {
    let bad = || CliError::Config(format!("expected `LO:HI`, got `{text}`"));
    let (lo, hi) = text.split_once(':').ok_or_else(bad)?;
    Ok((lo.trim().parse().map_err(|_| bad())?, hi.trim().parse().map_err(|_| bad())?))
}

fn axis(name: &str, range: Option<&String>, points: usize) -> CliResult<Axis> {
    let g = parse_generator(name)?;
    match range {
        Some(r) => {
            let (lo, hi) = parse_range(r)?;
            Axis::new(g, lo, hi, points)
        }
        None => Axis::with_default_range(g, points),
    }
}

fn run(cli: &Cli) -> CliResult<()> {
    load_config(cli, None)?;
    let ctx = Context { out: cli.out.clone(), quiet: cli.quiet };
    let say = |text: &str| {
        if !cli.quiet {
            print!("{text}");
            if !text.ends_with('\n') {
                println!();
            }
        }
    };
    match &cli.command {
        Command::Train { data, epochs } => {
            let mut cfg = load_config(cli, data.as_ref())?;
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            say(&commands::cmd_train(&cfg, &ctx)?);
        }
        Command::Compare { data, rows, epochs } => {
            let mut cfg = load_config(cli, data.as_ref())?;
            if let Some(r) = rows {
                cfg.rows = parse_rows(r).map_err(CliError::Config)?;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = *e;
            }
            let result = commands::cmd_compare(&cfg, &ctx)?;
            say(&result.text);
            if let Some((label, err)) = result.failures.into_iter().next() {
                return Err(err.context(format!("row {label}")));
            }
        }
        Command::ExportFeatures { model, mode, output } => {
            let (path, image) = commands::cmd_export_features(model, *mode, output.as_deref(), &ctx)?;
            say(&format!("wrote {}x{} grid to {}", image.width, image.height, path.display()));
        }
        Command::Sweep { model, data, tree, leaf, axes, points, range_a, range_b, batch } => {
            let cfg = load_config(cli, data.as_ref())?;
            let names: Vec<&str> = axes.split(',').collect();
            let [a, b] = names[..] else {
                return Err(CliError::Config(format!("--axes needs two generators, got `{axes}`")));
            };
            let a = axis(a, range_a.as_ref(), *points)?;
            let b = axis(b, range_b.as_ref(), *points)?;
            let which = FeatureRef { tree: *tree, leaf: *leaf };
            let surface = commands::cmd_sweep(&cfg, model, which, a, b, *batch, &ctx)?;
            let (va, vb) = surface.argmin_params();
            say(&format!(
                "minimum error {:.6} at {} = {va}, {} = {vb}",
                surface.raw[surface.argmin],
                surface.a.generator.name(),
                surface.b.generator.name()
            ));
        }
        Command::Dof { layouts, pixels } => {
            let parsed = if layouts.is_empty() {
                REFERENCE_LAYOUTS.to_vec()
            } else {
                layouts.iter().map(|l| parse_layout(l)).collect::<Result<_, _>>().map_err(CliError::Config)?
            };
            say(&commands::cmd_dof(&parsed, *pixels, &ctx)?);
        }
        Command::GenLines { count } => {
            let seed = load_config(cli, None)?.train.seed;
            let batch = commands::cmd_gen_lines(*count, seed, &ctx)?;
            say(&format!("wrote {} synthetic patches to {}", batch.len(), cli.out.display()));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tsc-bench: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
