//! Shared pieces of the `forge` and `analytics` binaries.

use std::io::Read;
use std::path::Path;

use anyhow::{bail, Context, Result};
use sati_core::analytics::{friedman, holm_bonferroni, mann_whitney_u, wilcoxon_paired, wilcoxon_signed_rank};
use sati_core::TestResult;

/// One CSV column: header plus its values, with blank cells kept as `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub values: Vec<Option<f64>>,
}

impl Column {
    pub fn present(&self) -> Vec<f64> {
        self.values.iter().flatten().copied().collect()
    }
}

/// Read a headed CSV into columns. Blank cells are missing values.
pub fn read_columns(input: impl Read) -> Result<Vec<Column>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).flexible(true).from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        bail!("CSV has no header row");
    }
    let mut cols: Vec<Column> =
        headers.iter().map(|h| Column { name: h.to_string(), values: Vec::new() }).collect();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        for (j, col) in cols.iter_mut().enumerate() {
            let cell = rec.get(j).unwrap_or("");
            let v = if cell.is_empty() {
                None
            } else {
                Some(cell.parse::<f64>().with_context(|| format!("row {}, column `{}`: `{cell}`", row + 2, col.name))?)
            };
            col.values.push(v);
        }
    }
    Ok(cols)
}

pub fn read_columns_from(path: &Path) -> Result<Vec<Column>> {
    let f = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_columns(f)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TestMethod {
    Wilcoxon,
    Mwu,
    Friedman,
}

/// Wilcoxon takes one column of differences or two columns (pre, post).
/// Mann-Whitney takes two groups of possibly unequal length. Friedman takes
/// one column per condition with complete rows.
pub fn run_test(method: TestMethod, cols: &[Column]) -> Result<TestResult> {
    let r = match method {
        TestMethod::Wilcoxon => match cols {
            [d] => wilcoxon_signed_rank(&d.present())?,
            [pre, post] => {
                let (a, b): (Vec<f64>, Vec<f64>) = pre
                    .values
                    .iter()
                    .zip(&post.values)
                    .filter_map(|(a, b)| Some(((*a)?, (*b)?)))
                    .unzip();
                wilcoxon_paired(&a, &b)?
            }
            _ => bail!("wilcoxon needs 1 column of differences or 2 columns (pre, post), got {}", cols.len()),
        },
        TestMethod::Mwu => match cols {
            [a, b] => mann_whitney_u(&a.present(), &b.present())?,
            _ => bail!("mwu needs exactly 2 columns, got {}", cols.len()),
        },
        TestMethod::Friedman => {
            if cols.len() < 2 {
                bail!("friedman needs at least 2 columns, got {}", cols.len());
            }
            let n = cols[0].values.len();
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|i| cols.iter().map(|c| c.values.get(i).copied().flatten().unwrap_or(f64::NAN)).collect())
                .collect();
            friedman(&rows)?
        }
    };
    Ok(r)
}

/// Holm-adjusted values of the first column, blanks skipped.
pub fn holm(cols: &[Column]) -> Result<Vec<(f64, f64)>> {
    let Some(first) = cols.first() else { bail!("no columns") };
    let raw = first.present();
    let adj = holm_bonferroni(&raw)?;
    Ok(raw.into_iter().zip(adj).collect())
}
