//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Every other line must
//! be `key = value` with a known key; unknown and repeated keys are errors.

use std::path::Path;
use std::str::FromStr;

use tsc::{GradientQuadrature, TrainConfig, GROUP_DIM};

use crate::error::{CliError, CliResult};

/// Value of the `data` key selecting the double-line generator.
pub const SYNTHETIC: &str = "synthetic";

pub const KEYS: &[&str] = &[
    "side",
    "trees",
    "branching",
    "depth",
    "lambda_w",
    "lambda_base",
    "lambda_multipliers",
    "lambda_f",
    "learning_rate",
    "lr_decay",
    "backtracking",
    "max_halvings",
    "batch_size",
    "epochs",
    "quadrature",
    "underuse_threshold",
    "reinit_sigma",
    "reinit_every",
    "init_sigma",
    "init_translation_sigma",
    "x_max",
    "seed",
    "data",
    "patches",
    "holdout",
    "sc_epochs",
    "rows",
];

/// One comparison row: a weight penalty and a flat `trees × branching` layout.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RowSpec {
    pub lambda_w: f64,
    pub trees: usize,
    pub branching: usize,
}

impl RowSpec {
    pub fn layout(&self) -> String {
        format!("{}x{}", self.trees, self.branching)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Image file, directory of PGM files, or [`SYNTHETIC`].
    pub data: Option<String>,
    /// Patches drawn before the train/held-out split.
    pub patches: usize,
    pub holdout: f64,
    /// Baseline epochs; defaults to the forest's.
    pub sc_epochs: Option<usize>,
    pub rows: Vec<RowSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            train: TrainConfig::default(),
            data: None,
            patches: 50_000,
            holdout: 0.1,
            sc_epochs: None,
            rows: vec![RowSpec { lambda_w: 0.4, trees: 4, branching: 8 }],
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> CliResult<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = i + 1;
            let Some((key, value)) = line.split_once('=') else {
                return Err(CliError::Config(format!("line {lineno}: expected `key = value`")));
            };
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(CliError::Config(format!("line {lineno}: unknown key `{key}`")));
            }
            if seen.contains(&key) {
                return Err(CliError::Config(format!("line {lineno}: duplicate key `{key}`")));
            }
            seen.push(key);
            cfg.set(key, value).map_err(|m| CliError::Config(format!("line {lineno}: {key}: {m}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, key: &str, value: &str) -> Result<(), String> {
        let t = &mut self.train;
        match key {
            "side" => t.side = num(value)?,
            "trees" => t.trees = num(value)?,
            "branching" => t.branching = num(value)?,
            "depth" => t.depth = num(value)?,
            "lambda_w" => t.lambda_w = num(value)?,
            "lambda_base" => t.lambda_base = num(value)?,
            "lambda_multipliers" => t.lambda_multipliers = multipliers(value)?,
            "lambda_f" => t.lambda_f = num(value)?,
            "learning_rate" => t.learning_rate = num(value)?,
            "lr_decay" => t.lr_decay = num(value)?,
            "backtracking" => t.backtracking = num(value)?,
            "max_halvings" => t.max_halvings = num(value)?,
            "batch_size" => t.batch_size = num(value)?,
            "epochs" => t.epochs = num(value)?,
            "quadrature" => t.quadrature = parse_quadrature(value)?,
            "underuse_threshold" => t.underuse_threshold = num(value)?,
            "reinit_sigma" => t.reinit_sigma = num(value)?,
            "reinit_every" => t.reinit_every = num(value)?,
            "init_sigma" => t.init_sigma = num(value)?,
            "init_translation_sigma" => t.init_translation_sigma = Some(num(value)?),
            "x_max" => t.x_max = num(value)?,
            "seed" => t.seed = num(value)?,
            "data" => self.data = Some(value.to_string()),
            "patches" => self.patches = num(value)?,
            "holdout" => self.holdout = num(value)?,
            "sc_epochs" => self.sc_epochs = Some(num(value)?),
            "rows" => self.rows = parse_rows(value)?,
            _ => unreachable!("key list and setter disagree on `{key}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> CliResult<()> {
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.patches == 0 {
            return Err(CliError::Config("patches must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.holdout) {
            return Err(CliError::Config("holdout must lie in [0, 1)".into()));
        }
        if self.rows.is_empty() {
            return Err(CliError::Config("rows must name at least one comparison".into()));
        }
        Ok(())
    }
}

fn num<T: FromStr>(value: &str) -> Result<T, String> {
    value.parse().map_err(|_| format!("cannot parse `{value}`"))
}

fn multipliers(value: &str) -> Result<[f64; GROUP_DIM], String> {
    let parts: Vec<f64> = value.split(',').map(|p| num(p.trim())).collect::<Result<_, _>>()?;
    parts.try_into().map_err(|p: Vec<f64>| format!("expected {GROUP_DIM} comma-separated values, got {}", p.len()))
}

/// `stochastic:S` or `fixed:S`.
pub fn parse_quadrature(value: &str) -> Result<GradientQuadrature, String> {
    let (kind, samples) = value.split_once(':').ok_or_else(|| format!("expected `stochastic:S` or `fixed:S`, got `{value}`"))?;
    let samples: usize = num(samples.trim())?;
    match kind.trim() {
        "stochastic" => Ok(GradientQuadrature::Stochastic(samples)),
        "fixed" => Ok(GradientQuadrature::FixedNodes(samples)),
        other => Err(format!("unknown quadrature `{other}`")),
    }
}

/// `TxB`, also accepting `×` as the separator.
pub fn parse_layout(value: &str) -> Result<(usize, usize), String> {
    let value = value.trim();
    let (a, b) = value
        .split_once('x')
        .or_else(|| value.split_once('×'))
        .ok_or_else(|| format!("expected a layout like `4x8`, got `{value}`"))?;
    let (trees, branching): (usize, usize) = (num(a.trim())?, num(b.trim())?);
    if trees == 0 || branching == 0 {
        return Err(format!("layout `{value}` must be positive"));
    }
    Ok((trees, branching))
}

/// Comma-separated `lambda:TxB` entries, e.g. `0.4:4x8, 0.5:8x8`.
pub fn parse_rows(value: &str) -> Result<Vec<RowSpec>, String> {
    value
        .split(',')
        .map(|entry| {
            let (lambda, layout) = entry
                .split_once(':')
                .ok_or_else(|| format!("expected `lambda:TxB`, got `{}`", entry.trim()))?;
            let lambda_w: f64 = num(lambda.trim())?;
            if !(lambda_w.is_finite() && lambda_w >= 0.0) {
                return Err(format!("weight penalty `{}` must be nonnegative", lambda.trim()));
            }
            let (trees, branching) = parse_layout(layout)?;
            Ok(RowSpec { lambda_w, trees, branching })
        })
        .collect()
}
