//! Image ingestion, patch batches, the synthetic double-line generator, and
//! the text formats for models and training metrics.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::liegroup::{TransformParams, GROUP_DIM};
use crate::model::{Forest, Tree};
use crate::scalar::Scalar;
use crate::trainer::TrainMetrics;

pub const MODEL_MAGIC: &str = "TSCMODEL";
pub const MODEL_VERSION: u32 = 1;

/// Side length the double-line generator supports (eight line positions).
pub const SYNTHETIC_SIDE: usize = 8;

/// Where a patch came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchSource {
    Image { image: usize, row: usize, col: usize },
    /// Synthetic double-line patch: optional vertical line column and horizontal line row.
    Lines { vertical: Option<u8>, horizontal: Option<u8> },
    Unknown,
}

impl PatchSource {
    pub fn line_count(&self) -> usize {
        match self {
            PatchSource::Lines { vertical, horizontal } => vertical.is_some() as usize + horizontal.is_some() as usize,
            _ => 0,
        }
    }
}

/// N mean-subtracted patches stored column-wise in an M × N matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch<T: Scalar> {
    side: usize,
    data: DMatrix<T>,
    sources: Vec<PatchSource>,
}

impl<T: Scalar> PatchBatch<T> {
    /// Wraps already-centered columns.
    pub fn new(side: usize, data: DMatrix<T>, sources: Vec<PatchSource>) -> Result<Self> {
        if data.nrows() != side * side {
            return Err(Error::DimensionMismatch(format!(
                "patches have {} rows, side {side} needs {}",
                data.nrows(),
                side * side
            )));
        }
        if sources.len() != data.ncols() {
            return Err(Error::DimensionMismatch("one source tag per patch required".into()));
        }
        Ok(PatchBatch { side, data, sources })
    }

    /// Centers each column of `raw` and wraps it.
    pub fn from_raw(side: usize, mut raw: DMatrix<T>, sources: Vec<PatchSource>) -> Result<Self> {
        center_columns(&mut raw);
        Self::new(side, raw, sources)
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn len(&self) -> usize {
        self.data.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.data.ncols() == 0
    }

    /// M × N patch matrix, one column per patch.
    pub fn data(&self) -> &DMatrix<T> {
        &self.data
    }

    pub fn patch(&self, i: usize) -> DVector<T> {
        self.data.column(i).into_owned()
    }

    pub fn sources(&self) -> &[PatchSource] {
        &self.sources
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        PatchBatch {
            side: self.side,
            data: self.data.select_columns(indices),
            sources: indices.iter().map(|&i| self.sources[i]).collect(),
        }
    }

    /// Random disjoint split; the second part receives `round(holdout · N)` patches.
    pub fn split<R: Rng + ?Sized>(&self, holdout: f64, rng: &mut R) -> (Self, Self) {
        let n = self.len();
        let held = ((holdout.clamp(0.0, 1.0) * n as f64).round() as usize).min(n);
        let perm = index::sample(rng, n, n).into_vec();
        let (h, t) = perm.split_at(held);
        let mut h = h.to_vec();
        let mut t = t.to_vec();
        h.sort_unstable();
        t.sort_unstable();
        (self.select(&t), self.select(&h))
    }

    /// Re-centers every patch. A no-op on an already-centered batch up to rounding.
    pub fn recenter(&mut self) {
        center_columns(&mut self.data);
    }

    /// Mean squared error of the best constant predictor (the mean patch).
    pub fn constant_predictor_mse(&self) -> T {
        let n = self.len();
        if n == 0 {
            return T::zero();
        }
        let mean = self.data.column_mean();
        let mut total = T::zero();
        for c in self.data.column_iter() {
            total += (c - &mean).norm_squared();
        }
        total / T::of(n as f64)
    }
}

fn center_columns<T: Scalar>(m: &mut DMatrix<T>) {
    let rows = m.nrows();
    if rows == 0 {
        return;
    }
    for mut c in m.column_iter_mut() {
        let mean = c.sum() / T::of(rows as f64);
        c.add_scalar_mut(-mean);
    }
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

/// Decodes a binary 8-bit PGM (P5) into an H × W matrix of intensities in `[0, 1]`.
pub fn parse_pgm(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(format_err("not a binary PGM (expected magic P5); only 8-bit P5 images are supported"));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while pos < bytes.len() && bytes[pos] != b'\n' {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(format_err("truncated PGM header")),
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(format_err("malformed PGM header"));
        }
        let text = std::str::from_utf8(&bytes[start..pos]).map_err(|_| format_err("malformed PGM header"))?;
        *field = text.parse().map_err(|_| format_err("malformed PGM header"))?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format_err(format!("unsupported PGM maxval {maxval}; only 255 is supported")));
    }
    if width == 0 || height == 0 {
        return Err(format_err("PGM has zero size"));
    }
    match bytes.get(pos) {
        Some(c) if c.is_ascii_whitespace() => pos += 1,
        _ => return Err(format_err("malformed PGM header")),
    }
    let payload = &bytes[pos..];
    let needed = width * height;
    if payload.len() < needed {
        return Err(format_err(format!(
            "truncated PGM payload: header declares {needed} bytes, found {}",
            payload.len()
        )));
    }
    Ok(DMatrix::from_fn(height, width, |r, c| payload[r * width + c] as f64 / 255.0))
}

pub fn load_grayscale(path: impl AsRef<Path>) -> Result<DMatrix<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    parse_pgm(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Encodes row-major 8-bit pixels as P5.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn save_pgm(path: impl AsRef<Path>, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, pixels))?;
    Ok(())
}

/// Loads every `.pgm` file in a directory (sorted by name), or a single file.
pub fn load_image_set(path: impl AsRef<Path>) -> Result<Vec<DMatrix<f64>>> {
    let path = path.as_ref();
    if path.is_dir() {
        let mut files: Vec<_> = fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(format_err(format!("no .pgm images in {}", path.display())));
        }
        files.iter().map(load_grayscale).collect()
    } else {
        Ok(vec![load_grayscale(path)?])
    }
}

/// Samples `count` patches with top-left corners uniform over every valid
/// corner position across all images.
pub fn sample_patches<T: Scalar, R: Rng + ?Sized>(
    images: &[DMatrix<f64>],
    side: usize,
    count: usize,
    rng: &mut R,
) -> Result<PatchBatch<T>> {
    if count == 0 {
        return Err(Error::InvalidArgument("patch count must be positive".into()));
    }
    if side == 0 {
        return Err(Error::InvalidArgument("patch side must be positive".into()));
    }
    if images.is_empty() {
        return Err(Error::InvalidArgument("no images to sample from".into()));
    }
    let mut cumulative = Vec::with_capacity(images.len());
    let mut total = 0usize;
    for (i, img) in images.iter().enumerate() {
        if img.nrows() < side || img.ncols() < side {
            return Err(Error::InvalidArgument(format!(
                "image {i} is {}x{}, smaller than the {side}x{side} patch",
                img.nrows(),
                img.ncols()
            )));
        }
        total += (img.nrows() - side + 1) * (img.ncols() - side + 1);
        cumulative.push(total);
    }

    let m = side * side;
    let mut data = DMatrix::<T>::zeros(m, count);
    let mut sources = Vec::with_capacity(count);
    for n in 0..count {
        let pick = rng.random_range(0..total);
        let image = cumulative.partition_point(|&c| c <= pick);
        let offset = pick - if image == 0 { 0 } else { cumulative[image - 1] };
        let img = &images[image];
        let cols = img.ncols() - side + 1;
        let (row, col) = (offset / cols, offset % cols);
        for r in 0..side {
            for c in 0..side {
                data[(r * side + c, n)] = T::of(img[(row + r, col + c)]);
            }
        }
        sources.push(PatchSource::Image { image, row, col });
    }
    PatchBatch::from_raw(side, data, sources)
}

/// Renders an un-centered line patch: intensity 1 on the lines, 0 elsewhere.
pub fn line_pattern(side: usize, vertical: Option<usize>, horizontal: Option<usize>) -> DVector<f64> {
    DVector::from_fn(side * side, |p, _| {
        let (r, c) = (p / side, p % side);
        if Some(c) == vertical || Some(r) == horizontal {
            1.0
        } else {
            0.0
        }
    })
}

/// Double-line patches: blank with probability 1/9, exactly one line with
/// probability 2/3 (orientation uniform), one vertical plus one horizontal
/// line with probability 2/9. Positions are uniform over the eight rows or columns.
pub fn gen_synthetic_lines<T: Scalar, R: Rng + ?Sized>(count: usize, side: usize, rng: &mut R) -> Result<PatchBatch<T>> {
    if count == 0 {
        return Err(Error::InvalidArgument("patch count must be positive".into()));
    }
    if side != SYNTHETIC_SIDE {
        return Err(Error::InvalidArgument(format!(
            "double-line patches are {SYNTHETIC_SIDE}x{SYNTHETIC_SIDE}, got side {side}"
        )));
    }
    let m = side * side;
    let mut data = DMatrix::<T>::zeros(m, count);
    let mut sources = Vec::with_capacity(count);
    for n in 0..count {
        let category = rng.random_range(0..9u8);
        let (vertical, horizontal) = match category {
            0 => (None, None),
            1..=6 => {
                let pos = rng.random_range(0..side as u8);
                if rng.random_bool(0.5) {
                    (Some(pos), None)
                } else {
                    (None, Some(pos))
                }
            }
            _ => (Some(rng.random_range(0..side as u8)), Some(rng.random_range(0..side as u8))),
        };
        let pattern = line_pattern(side, vertical.map(usize::from), horizontal.map(usize::from));
        for (p, v) in pattern.iter().enumerate() {
            data[(p, n)] = T::of(*v);
        }
        sources.push(PatchSource::Lines { vertical, horizontal });
    }
    PatchBatch::from_raw(side, data, sources)
}

/// Round-trip-exact decimal with 17 significant digits.
fn fmt_real<T: Scalar>(v: T) -> String {
    format!("{:.16e}", v.to_f64_lossy())
}

pub fn format_model<T: Scalar>(forest: &Forest<T>) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{MODEL_MAGIC} {MODEL_VERSION}");
    let _ = writeln!(out, "{} {}", forest.side(), forest.trees().len());
    for tree in forest.trees() {
        let _ = writeln!(out, "tree {}", tree.edge_count());
        let root: Vec<String> = tree.root().iter().map(|&v| fmt_real(v)).collect();
        let _ = writeln!(out, "{}", root.join(" "));
        for (parent, child, x) in tree.edges() {
            let xs: Vec<String> = x.0.iter().map(|&v| fmt_real(v)).collect();
            let _ = writeln!(out, "{parent} {child} {}", xs.join(" "));
        }
    }
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Result<(usize, &'a str)> {
        for (i, line) in self.inner.by_ref() {
            let line = line.trim();
            if !line.is_empty() {
                self.last = i + 1;
                return Ok((i + 1, line));
            }
        }
        Err(Error::Parse { line: self.last + 1, message: "unexpected end of file".into() })
    }
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse { line, message: message.into() }
}

fn parse_num<N: std::str::FromStr>(line: usize, tok: &str) -> Result<N> {
    tok.parse().map_err(|_| parse_err(line, format!("invalid number {tok:?}")))
}

pub fn parse_model<T: Scalar>(text: &str) -> Result<Forest<T>> {
    let mut lines = Lines { inner: text.lines().enumerate(), last: 0 };
    let (_, header) = lines.next().map_err(|_| Error::Version("empty model file".into()))?;
    let mut head = header.split_whitespace();
    if head.next() != Some(MODEL_MAGIC) {
        return Err(Error::Version(format!("missing {MODEL_MAGIC} header")));
    }
    match head.next() {
        Some(v) if v == MODEL_VERSION.to_string() && head.next().is_none() => {}
        Some(v) => return Err(Error::Version(format!("version {v} (supported: {MODEL_VERSION})"))),
        None => return Err(Error::Version("missing version".into())),
    }

    let (ln, dims) = lines.next()?;
    let dims: Vec<&str> = dims.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(parse_err(ln, "expected `side trees`"));
    }
    let side: usize = parse_num(ln, dims[0])?;
    let tree_count: usize = parse_num(ln, dims[1])?;
    if side == 0 {
        return Err(Error::Consistency("side must be positive".into()));
    }
    let m = side * side;

    let mut trees = Vec::with_capacity(tree_count);
    for t in 0..tree_count {
        let (ln, head) = lines.next()?;
        let head: Vec<&str> = head.split_whitespace().collect();
        if head.len() != 2 || head[0] != "tree" {
            return Err(parse_err(ln, format!("expected `tree <edges>` for tree {t}")));
        }
        let edge_count: usize = parse_num(ln, head[1])?;

        let (ln, root_line) = lines.next()?;
        let root: Vec<T> = root_line
            .split_whitespace()
            .map(|tok| parse_num::<f64>(ln, tok).map(T::of))
            .collect::<Result<_>>()?;
        if root.len() != m {
            return Err(Error::Consistency(format!(
                "line {ln}: tree {t} root has {} values, expected {m}",
                root.len()
            )));
        }

        let mut edges = Vec::with_capacity(edge_count);
        for _ in 0..edge_count {
            let (ln, e) = lines.next()?;
            let toks: Vec<&str> = e.split_whitespace().collect();
            if toks.len() != 2 + GROUP_DIM {
                return Err(parse_err(ln, "expected `parent child x1 x2 x3 x4 x5 x6`"));
            }
            let parent: usize = parse_num(ln, toks[0])?;
            let child: usize = parse_num(ln, toks[1])?;
            let mut x = [T::zero(); GROUP_DIM];
            for (j, tok) in toks[2..].iter().enumerate() {
                x[j] = T::of(parse_num::<f64>(ln, tok)?);
            }
            edges.push((parent, child, TransformParams(x)));
        }
        let tree = Tree::from_edges(DVector::from_vec(root), edges)
            .map_err(|e| Error::Consistency(format!("tree {t}: {e}")))?;
        trees.push(tree);
    }
    if let Ok((ln, _)) = lines.next() {
        return Err(parse_err(ln, "trailing content after last tree"));
    }
    Forest::new(side, trees)
}

pub fn save_model<T: Scalar>(forest: &Forest<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_model(forest))?;
    Ok(())
}

pub fn load_model<T: Scalar>(path: impl AsRef<Path>) -> Result<Forest<T>> {
    parse_model(&fs::read_to_string(path)?)
}

pub const METRICS_HEADER: &str = "# epoch mse weight_penalty p1 p2 p3 p4 p5 p6 sparsity reinits";

/// One line per epoch: `epoch mse weight_penalty p1..p6 sparsity reinits`.
pub fn format_metrics<T: Scalar>(metrics: &TrainMetrics<T>) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for e in &metrics.epochs {
        let mut fields = vec![e.epoch.to_string(), fmt_real(e.loss.mse), fmt_real(e.loss.weight_penalty)];
        fields.extend(e.loss.param_penalties.iter().map(|&p| fmt_real(p)));
        fields.push(fmt_real(e.sparsity));
        fields.push(e.reinits.to_string());
        out.push_str(&fields.join(" "));
        out.push('\n');
    }
    out
}

pub fn save_metrics<T: Scalar>(metrics: &TrainMetrics<T>, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, format_metrics(metrics))?;
    Ok(())
}

/// A parsed metrics line.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub mse: f64,
    pub weight_penalty: f64,
    pub param_penalties: [f64; GROUP_DIM],
    pub sparsity: f64,
    pub reinits: usize,
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let ln = i + 1;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        if toks.len() != 11 {
            return Err(parse_err(ln, format!("expected 11 fields, found {}", toks.len())));
        }
        let mut p = [0.0; GROUP_DIM];
        for j in 0..GROUP_DIM {
            p[j] = parse_num(ln, toks[3 + j])?;
        }
        out.push(MetricsRecord {
            epoch: parse_num(ln, toks[0])?,
            mse: parse_num(ln, toks[1])?,
            weight_penalty: parse_num(ln, toks[2])?,
            param_penalties: p,
            sparsity: parse_num(ln, toks[9])?,
            reinits: parse_num(ln, toks[10])?,
        });
    }
    Ok(out)
}
