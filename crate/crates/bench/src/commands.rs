//! Subcommand implementations. Each returns the text it would print so the
//! binary and the tests share one code path.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsc::dataio::{
    gen_synthetic_lines, load_image_set, load_model, sample_patches, save_metrics, save_model, save_pgm, PatchSource,
    SYNTHETIC_SIDE,
};
use tsc::trainer::{evaluate, train, train_sc_baseline};
use tsc::{build_generators, Forest, PatchBatch, GROUP_DIM};

use crate::config::{RunConfig, SYNTHETIC};
use crate::error::{CliError, CliResult};
use crate::grid::{feature_grid, render_rows, GrayImage, GridMode};
use crate::report::{comparison_csv, comparison_text, dof_csv, dof_text, ComparisonRow, DofReport};
use crate::sweep::{surface_csv, surface_pixels, sweep_surface, Axis, Surface};

pub const MODEL_FILE: &str = "model.tsc";
pub const METRICS_FILE: &str = "metrics.txt";
pub const COMPARISON_CSV: &str = "comparison.csv";
pub const COMPARISON_TXT: &str = "comparison.txt";
pub const DOF_CSV: &str = "dof.csv";
pub const FEATURES_PGM: &str = "features.pgm";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_PGM: &str = "sweep.pgm";
pub const LINES_CSV: &str = "lines.csv";
pub const LINES_PGM: &str = "lines.pgm";

/// Keeps data sampling independent of the trainer's stream for the same seed.
const DATA_STREAM: u64 = 0xda7a_5eed;

/// Cells per row in the synthetic preview image.
const PREVIEW_COLUMNS: usize = 8;
const PREVIEW_MAX: usize = 64;

#[derive(Clone, Debug)]
pub struct Context {
    pub out: PathBuf,
    pub quiet: bool,
}

impl Context {
    fn path(&self, name: &str) -> CliResult<PathBuf> {
        fs::create_dir_all(&self.out)
            .map_err(|e| CliError::Output(format!("cannot create {}: {e}", self.out.display())))?;
        Ok(self.out.join(name))
    }

    fn write(&self, name: &str, text: &str) -> CliResult<PathBuf> {
        let path = self.path(name)?;
        fs::write(&path, text).map_err(|e| CliError::Output(format!("{}: {e}", path.display())))?;
        Ok(path)
    }

    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }
}

/// Draws `count` patches of the given side from the configured source.
pub fn draw_patches(cfg: &RunConfig, side: usize, count: usize) -> CliResult<PatchBatch<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ DATA_STREAM);
    let Some(source) = cfg.data.as_deref() else {
        return Err(CliError::Config("no data source: set `data` in the config or pass --data".into()));
    };
    if source == SYNTHETIC {
        if side != SYNTHETIC_SIDE {
            return Err(CliError::Config(format!("synthetic lines need side {SYNTHETIC_SIDE}, got {side}")));
        }
        return gen_synthetic_lines(count, side, &mut rng).map_err(CliError::data);
    }
    let path = Path::new(source);
    if !path.exists() {
        return Err(CliError::Data(format!("data path {} does not exist", path.display())));
    }
    let images = load_image_set(path).map_err(CliError::data)?;
    sample_patches(&images, side, count, &mut rng).map_err(CliError::data)
}

/// Training and held-out patches drawn from the configured source.
pub fn load_split(cfg: &RunConfig) -> CliResult<(PatchBatch<f64>, PatchBatch<f64>)> {
    let all = draw_patches(cfg, cfg.train.side, cfg.patches)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ DATA_STREAM ^ 1);
    Ok(all.split(cfg.holdout, &mut rng))
}

fn fmt4(v: f64) -> String {
    format!("{v:.4}")
}

pub fn cmd_train(cfg: &RunConfig, ctx: &Context) -> CliResult<String> {
    let (pool, held) = load_split(cfg)?;
    let t = &cfg.train;
    ctx.progress(format!(
        "training {}x{} (depth {}) on {} patches for {} epochs",
        t.trees,
        t.branching,
        t.depth,
        pool.len(),
        t.epochs
    ));
    let (forest, metrics) = train(t, &pool)?;
    let model = ctx.path(MODEL_FILE)?;
    save_model(&forest, &model).map_err(CliError::output)?;
    let metrics_path = ctx.path(METRICS_FILE)?;
    save_metrics(&metrics, &metrics_path).map_err(CliError::output)?;

    let train_mse = metrics.epochs.last().map_or("-".to_string(), |e| fmt4(e.loss.mse));
    let held_mse = if held.is_empty() {
        "-".to_string()
    } else {
        let leaves = forest.materialize_leaves(&build_generators(forest.side())?)?;
        fmt4(evaluate(&leaves, &held, t.lambda_w)?.mse)
    };
    let reinits: usize = metrics.epochs.iter().map(|e| e.reinits).sum();
    Ok(format!(
        "epochs {} batch_mse {train_mse} heldout_mse {held_mse} reinits {reinits} df {} model {} metrics {}",
        metrics.epochs.len(),
        forest.degrees_of_freedom(GROUP_DIM),
        model.display(),
        metrics_path.display()
    ))
}

fn average_norm(leaves: &nalgebra::DMatrix<f64>) -> f64 {
    leaves.column_iter().map(|c| c.norm()).sum::<f64>() / leaves.ncols().max(1) as f64
}

pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    /// Rows that failed, with their error; the remaining rows still ran.
    pub failures: Vec<(String, CliError)>,
    pub text: String,
}

pub fn cmd_compare(cfg: &RunConfig, ctx: &Context) -> CliResult<Comparison> {
    let (pool, held) = load_split(cfg)?;
    if held.is_empty() {
        return Err(CliError::Config("comparison needs a held-out set: holdout must be positive".into()));
    }
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for wanted in &cfg.rows {
        let label = format!("{} {}", wanted.lambda_w, wanted.layout());
        ctx.progress(format!("row {label}: training on {} patches", pool.len()));
        match compare_row(cfg, wanted.lambda_w, wanted.trees, wanted.branching, &pool, &held) {
            Ok(row) => rows.push(row),
            Err(e) => {
                ctx.progress(format!("row {label} failed: {e}"));
                failures.push((label, e));
            }
        }
    }
    ctx.write(COMPARISON_CSV, &comparison_csv(&rows))?;
    let text = comparison_text(&rows);
    ctx.write(COMPARISON_TXT, &text)?;
    Ok(Comparison { rows, failures, text })
}

/// Trains both models for one row and evaluates them on `held`.
pub fn compare_row(
    cfg: &RunConfig,
    lambda_w: f64,
    trees: usize,
    branching: usize,
    pool: &PatchBatch<f64>,
    held: &PatchBatch<f64>,
) -> CliResult<ComparisonRow> {
    let tc = tsc::TrainConfig { lambda_w, trees, branching, depth: 1, ..cfg.train.clone() };
    let (forest, _) = train(&tc, pool)?;
    let leaves = forest.materialize_leaves(&build_generators(forest.side())?)?;
    let magnitude = average_norm(&leaves);
    let tsc_eval = evaluate(&leaves, held, lambda_w)?;

    let sc_config = tsc::TrainConfig { epochs: cfg.sc_epochs.unwrap_or(tc.epochs), ..tc.clone() };
    let num_features = leaves.ncols();
    let (dict, _) = train_sc_baseline(pool, num_features, lambda_w, magnitude, &sc_config)?;
    let sc_eval = evaluate(&dict, held, lambda_w)?;

    let df_tsc = forest.degrees_of_freedom(GROUP_DIM);
    let df_sc = tsc::dof_sc(num_features as u64, forest.pixels() as u64);
    Ok(ComparisonRow {
        lambda_w,
        layout: format!("{trees}x{branching}"),
        tsc_mse: tsc_eval.mse,
        tsc_sparsity: tsc_eval.sparsity,
        df_tsc,
        sc_mse: sc_eval.mse,
        sc_sparsity: sc_eval.sparsity,
        df_sc,
        num_features,
        df_ratio: df_sc as f64 / df_tsc as f64,
    })
}

pub fn cmd_dof(layouts: &[(usize, usize)], pixels: u64, ctx: &Context) -> CliResult<String> {
    let reports: Vec<DofReport> = layouts.iter().map(|&(t, b)| DofReport::new(t, b, pixels)).collect();
    ctx.write(DOF_CSV, &dof_csv(&reports))?;
    Ok(dof_text(&reports))
}

fn read_model(path: &Path) -> CliResult<Forest<f64>> {
    load_model(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_pgm(path: &Path, image: &GrayImage) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(CliError::output)?;
    }
    save_pgm(path, image.width, image.height, &image.pixels).map_err(CliError::output)
}

pub fn cmd_export_features(
    model: &Path,
    mode: GridMode,
    output: Option<&Path>,
    ctx: &Context,
) -> CliResult<(PathBuf, GrayImage)> {
    let forest = read_model(model)?;
    let image = feature_grid(&forest, mode)?;
    let path = match output {
        Some(p) => p.to_path_buf(),
        None => ctx.path(FEATURES_PGM)?,
    };
    write_pgm(&path, &image)?;
    Ok((path, image))
}

/// What to sweep: a root, or one leaf of a tree in leaf order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FeatureRef {
    pub tree: usize,
    pub leaf: Option<usize>,
}

pub fn select_feature(forest: &Forest<f64>, which: FeatureRef) -> CliResult<DVector<f64>> {
    let tree = forest
        .trees()
        .get(which.tree)
        .ok_or_else(|| CliError::Config(format!("model has {} trees, asked for tree {}", forest.trees().len(), which.tree)))?;
    let Some(k) = which.leaf else {
        return Ok(tree.root().clone());
    };
    let leaves = tree.leaves();
    let node = *leaves
        .get(k)
        .ok_or_else(|| CliError::Config(format!("tree {} has {} leaves, asked for leaf {k}", which.tree, leaves.len())))?;
    let gens = build_generators(forest.side())?;
    Ok(tsc::apply_transform(&gens, &tree.path_params(node)?, tree.root())?)
}

pub fn cmd_sweep(
    cfg: &RunConfig,
    model: &Path,
    which: FeatureRef,
    a: Axis,
    b: Axis,
    batch_size: usize,
    ctx: &Context,
) -> CliResult<Surface> {
    let forest = read_model(model)?;
    let feature = select_feature(&forest, which)?;
    if batch_size == 0 {
        return Err(CliError::Config("sweep batch must be positive".into()));
    }
    let batch = draw_patches(cfg, forest.side(), batch_size)?;
    let gens = build_generators(forest.side())?;
    let surface = sweep_surface(&gens, &feature, &batch, a, b)?;
    ctx.write(SWEEP_CSV, &surface_csv(&surface))?;
    let (w, h, pixels) = surface_pixels(&surface);
    write_pgm(&ctx.path(SWEEP_PGM)?, &GrayImage { width: w, height: h, pixels })?;
    Ok(surface)
}

pub fn cmd_gen_lines(count: usize, seed: u64, ctx: &Context) -> CliResult<PatchBatch<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DATA_STREAM);
    let batch: PatchBatch<f64> = gen_synthetic_lines(count, SYNTHETIC_SIDE, &mut rng).map_err(|e| match e {
        tsc::Error::InvalidArgument(m) => CliError::Config(m),
        other => CliError::from(other),
    })?;
    let tag = |v: Option<u8>| v.map_or(String::new(), |p| p.to_string());
    let mut csv = String::from("index,vertical,horizontal");
    for p in 0..batch.pixels() {
        csv.push_str(&format!(",p{p}"));
    }
    csv.push('\n');
    for (i, source) in batch.sources().iter().enumerate() {
        let (v, h) = match *source {
            PatchSource::Lines { vertical, horizontal } => (tag(vertical), tag(horizontal)),
            _ => (String::new(), String::new()),
        };
        csv.push_str(&format!("{i},{v},{h}"));
        for value in batch.patch(i).iter() {
            csv.push_str(&format!(",{value}"));
        }
        csv.push('\n');
    }
    ctx.write(LINES_CSV, &csv)?;

    let shown = batch.len().min(PREVIEW_MAX);
    let cells: Vec<DVector<f64>> = (0..shown).map(|i| batch.patch(i)).collect();
    let rows: Vec<Vec<DVector<f64>>> = cells.chunks(PREVIEW_COLUMNS).map(<[_]>::to_vec).collect();
    write_pgm(&ctx.path(LINES_PGM)?, &render_rows(SYNTHETIC_SIDE, &rows))?;
    Ok(batch)
}
