//! Comparison and degrees-of-freedom tables.
//!
//! Each row is rendered to CSV fields once; the text table is laid out from
//! those same strings so the two outputs never disagree.

use tsc::{dof_sc, dof_tsc, GROUP_DIM};

pub const COMPARISON_HEADER: [&str; 10] = [
    "lambda_w",
    "layout",
    "tsc_mse",
    "tsc_sparsity",
    "df_tsc",
    "sc_mse",
    "sc_sparsity",
    "df_sc",
    "num_features",
    "df_ratio",
];

#[derive(Clone, Debug, PartialEq)]
pub struct ComparisonRow {
    pub lambda_w: f64,
    pub layout: String,
    pub tsc_mse: f64,
    pub tsc_sparsity: f64,
    pub df_tsc: u64,
    pub sc_mse: f64,
    pub sc_sparsity: f64,
    pub df_sc: u64,
    pub num_features: usize,
    pub df_ratio: f64,
}

impl ComparisonRow {
    /// Fields in header order. Floats use the shortest exact representation.
    pub fn fields(&self) -> [String; 10] {
        [
            self.lambda_w.to_string(),
            self.layout.clone(),
            self.tsc_mse.to_string(),
            self.tsc_sparsity.to_string(),
            self.df_tsc.to_string(),
            self.sc_mse.to_string(),
            self.sc_sparsity.to_string(),
            self.df_sc.to_string(),
            self.num_features.to_string(),
            self.df_ratio.to_string(),
        ]
    }

    pub fn from_fields(fields: &[&str]) -> Option<Self> {
        if fields.len() != COMPARISON_HEADER.len() {
            return None;
        }
        Some(ComparisonRow {
            lambda_w: fields[0].parse().ok()?,
            layout: fields[1].to_string(),
            tsc_mse: fields[2].parse().ok()?,
            tsc_sparsity: fields[3].parse().ok()?,
            df_tsc: fields[4].parse().ok()?,
            sc_mse: fields[5].parse().ok()?,
            sc_sparsity: fields[6].parse().ok()?,
            df_sc: fields[7].parse().ok()?,
            num_features: fields[8].parse().ok()?,
            df_ratio: fields[9].parse().ok()?,
        })
    }
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = COMPARISON_HEADER.join(",");
    out.push('\n');
    for row in rows {
        out.push_str(&row.fields().join(","));
        out.push('\n');
    }
    out
}

pub fn parse_comparison_csv(text: &str) -> Option<Vec<ComparisonRow>> {
    let mut lines = text.lines();
    if lines.next()? != COMPARISON_HEADER.join(",") {
        return None;
    }
    lines.map(|l| ComparisonRow::from_fields(&l.split(',').collect::<Vec<_>>())).collect()
}

/// Right-aligned columns built from the CSV fields.
pub fn comparison_text(rows: &[ComparisonRow]) -> String {
    let cells: Vec<Vec<String>> = std::iter::once(COMPARISON_HEADER.map(String::from).to_vec())
        .chain(rows.iter().map(|r| r.fields().to_vec()))
        .collect();
    align(&cells)
}

fn align(cells: &[Vec<String>]) -> String {
    let cols = cells.first().map_or(0, Vec::len);
    let widths: Vec<usize> =
        (0..cols).map(|c| cells.iter().map(|r| r[c].chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in cells {
        let line: Vec<String> = row.iter().zip(&widths).map(|(s, w)| format!("{s:>w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    out
}

/// Layouts of the reference comparison table, in row order, deduplicated.
pub const REFERENCE_LAYOUTS: [(usize, usize); 6] = [(1, 64), (1, 128), (8, 8), (4, 16), (16, 16), (8, 32)];

/// df_TSC printed for 1x64 in the reference table; the formula gives 483.
pub const REFERENCE_1X64_PRINTED: u64 = 447;

#[derive(Clone, Debug, PartialEq)]
pub struct DofReport {
    pub trees: usize,
    pub branching: usize,
    pub pixels: u64,
    pub df_tsc: u64,
    pub df_sc: u64,
    pub note: Option<String>,
}

impl DofReport {
    pub fn new(trees: usize, branching: usize, pixels: u64) -> Self {
        let df_tsc = dof_tsc(trees as u64, branching as u64, pixels, GROUP_DIM as u64);
        let df_sc = dof_sc((trees * branching) as u64, pixels);
        let note = (trees == 1 && branching == 64 && pixels == 100).then(|| {
            format!(
                "reference table prints df_tsc = {REFERENCE_1X64_PRINTED} for this layout; the formula gives {df_tsc}"
            )
        });
        DofReport { trees, branching, pixels, df_tsc, df_sc, note }
    }

    pub fn ratio(&self) -> f64 {
        self.df_sc as f64 / self.df_tsc as f64
    }

    /// The ratio truncated, not rounded, to two decimals, as in the reference table.
    pub fn ratio_text(&self) -> String {
        truncate2(self.ratio())
    }

    pub fn layout(&self) -> String {
        format!("{}x{}", self.trees, self.branching)
    }
}

pub fn truncate2(v: f64) -> String {
    // The epsilon keeps exact quotients such as 8.5 from dropping a digit.
    let t = (v * 100.0 + 1e-9).floor() / 100.0;
    format!("{t:.2}")
}

pub fn dof_csv(reports: &[DofReport]) -> String {
    let mut out = String::from("layout,pixels,df_tsc,df_sc,df_ratio,note\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.layout(),
            r.pixels,
            r.df_tsc,
            r.df_sc,
            r.ratio_text(),
            r.note.as_deref().unwrap_or("")
        ));
    }
    out
}

pub fn dof_text(reports: &[DofReport]) -> String {
    let mut cells = vec![["layout", "M", "df_tsc", "df_sc", "ratio"].map(String::from).to_vec()];
    for r in reports {
        cells.push(vec![
            r.layout(),
            r.pixels.to_string(),
            r.df_tsc.to_string(),
            r.df_sc.to_string(),
            r.ratio_text(),
        ]);
    }
    let mut out = align(&cells);
    for r in reports {
        if let Some(note) = &r.note {
            out.push_str(&format!("note ({}): {note}\n", r.layout()));
        }
    }
    out
}
