//! Reconstruction-error surfaces over two transformation coordinates.

use nalgebra::{DMatrix, DVector};
use tsc::{apply_transform, Generator, GeneratorSet, PatchBatch, TransformParams};

use crate::error::{CliError, CliResult};

#[derive(Clone, Debug, PartialEq)]
pub struct Axis {
    pub generator: Generator,
    pub values: Vec<f64>,
}

impl Axis {
    pub fn new(generator: Generator, lo: f64, hi: f64, points: usize) -> CliResult<Self> {
        if points < 2 {
            return Err(CliError::Config("a sweep axis needs at least 2 points".into()));
        }
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(CliError::Config(format!("invalid sweep range [{lo}, {hi}]")));
        }
        let step = (hi - lo) / (points - 1) as f64;
        let values = (0..points).map(|i| if i + 1 == points { hi } else { lo + step * i as f64 }).collect();
        Ok(Axis { generator, values })
    }

    pub fn with_default_range(generator: Generator, points: usize) -> CliResult<Self> {
        let (lo, hi) = default_range(generator);
        Axis::new(generator, lo, hi, points)
    }
}

/// `[-4, 4]` pixels for translations, `[-π/2, π/2]` for rotation, `[-1, 1]` otherwise.
pub fn default_range(generator: Generator) -> (f64, f64) {
    match generator {
        Generator::TranslateX | Generator::TranslateY => (-4.0, 4.0),
        Generator::Rotate => (-std::f64::consts::FRAC_PI_2, std::f64::consts::FRAC_PI_2),
        _ => (-1.0, 1.0),
    }
}

pub fn parse_generator(name: &str) -> CliResult<Generator> {
    let name = name.trim();
    Generator::ALL
        .into_iter()
        .find(|g| g.name() == name || name.parse::<usize>().is_ok_and(|i| i == g.index()))
        .ok_or_else(|| {
            let names: Vec<_> = Generator::ALL.iter().map(|g| g.name()).collect();
            CliError::Config(format!("unknown generator `{name}`; expected an index or one of {}", names.join(", ")))
        })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Surface {
    pub a: Axis,
    pub b: Axis,
    /// Batch-mean error, `a.values.len() × b.values.len()`.
    pub raw: DMatrix<f64>,
    /// `raw` affinely mapped to `[0, 1]`; all zeros when `raw` is constant.
    pub normalized: DMatrix<f64>,
    pub argmin: (usize, usize),
}

impl Surface {
    pub fn argmin_params(&self) -> (f64, f64) {
        (self.a.values[self.argmin.0], self.b.values[self.argmin.1])
    }
}

/// Per-datum `min_w ‖I − w·TF‖²` with `w = ⟨I, TF⟩/‖TF‖²` (0 if `TF = 0`).
pub fn best_scale_errors(transformed: &DVector<f64>, batch: &PatchBatch<f64>) -> DVector<f64> {
    let norm2 = transformed.norm_squared();
    DVector::from_iterator(
        batch.len(),
        batch.data().column_iter().map(|patch| {
            let w = if norm2 > 0.0 { patch.dot(transformed) / norm2 } else { 0.0 };
            (patch - transformed * w).norm_squared()
        }),
    )
}

pub fn sweep_surface(
    gens: &GeneratorSet<f64>,
    feature: &DVector<f64>,
    batch: &PatchBatch<f64>,
    a: Axis,
    b: Axis,
) -> CliResult<Surface> {
    if a.generator == b.generator {
        return Err(CliError::Config("sweep axes must use different generators".into()));
    }
    if feature.len() != batch.pixels() || gens.pixels() != batch.pixels() {
        return Err(CliError::Data(format!(
            "feature has {} pixels, patches have {}",
            feature.len(),
            batch.pixels()
        )));
    }
    if batch.is_empty() {
        return Err(CliError::Data("empty sweep batch".into()));
    }
    let n = batch.len() as f64;
    let mut raw = DMatrix::zeros(a.values.len(), b.values.len());
    for (i, &va) in a.values.iter().enumerate() {
        for (j, &vb) in b.values.iter().enumerate() {
            let mut x = TransformParams::zero();
            x.0[a.generator.index()] = va;
            x.0[b.generator.index()] = vb;
            let tf = apply_transform(gens, &x, feature)?;
            raw[(i, j)] = best_scale_errors(&tf, batch).sum() / n;
        }
    }
    let (lo, hi) = (raw.min(), raw.max());
    let normalized = if hi > lo { raw.map(|v| (v - lo) / (hi - lo)) } else { DMatrix::zeros(raw.nrows(), raw.ncols()) };
    let mut argmin = (0, 0);
    for j in 0..raw.ncols() {
        for i in 0..raw.nrows() {
            if raw[(i, j)] < raw[argmin] {
                argmin = (i, j);
            }
        }
    }
    Ok(Surface { a, b, raw, normalized, argmin })
}

pub fn surface_csv(s: &Surface) -> String {
    let mut out = format!("{},{},error,normalized,argmin\n", s.a.generator.name(), s.b.generator.name());
    for (i, va) in s.a.values.iter().enumerate() {
        for (j, vb) in s.b.values.iter().enumerate() {
            let mark = u8::from((i, j) == s.argmin);
            out.push_str(&format!("{va},{vb},{},{},{mark}\n", s.raw[(i, j)], s.normalized[(i, j)]));
        }
    }
    out
}

/// Rows follow axis `b`, columns axis `a`; dark means low error.
pub fn surface_pixels(s: &Surface) -> (usize, usize, Vec<u8>) {
    let (w, h) = (s.a.values.len(), s.b.values.len());
    let mut pixels = Vec::with_capacity(w * h);
    for j in 0..h {
        for i in 0..w {
            pixels.push((s.normalized[(i, j)] * 255.0).round() as u8);
        }
    }
    (w, h, pixels)
}
