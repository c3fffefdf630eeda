use std::collections::BTreeSet;
use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};

/// Fine → coarse label tables, one column per coarse level.
///
/// Text form: one line per fine class, `fine<TAB>coarse_1<TAB>…<TAB>coarse_m`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelHierarchy {
    fine_classes: usize,
    columns: Vec<Vec<usize>>,
    column_classes: Vec<usize>,
}

impl LabelHierarchy {
    pub fn new(columns: Vec<Vec<usize>>) -> Result<Self> {
        let fine_classes = columns.first().map_or(0, Vec::len);
        if fine_classes == 0 {
            return Err(Error::Config("label hierarchy has no classes".into()));
        }
        let mut column_classes = Vec::new();
        for (c, col) in columns.iter().enumerate() {
            if col.len() != fine_classes {
                return Err(Error::Config(format!("hierarchy column {} is not total", c + 1)));
            }
            let used: BTreeSet<usize> = col.iter().copied().collect();
            let n = used.iter().next_back().map_or(0, |m| m + 1);
            if used.len() != n {
                return Err(Error::Config(format!(
                    "hierarchy column {} skips coarse classes (not surjective)",
                    c + 1
                )));
            }
            column_classes.push(n);
        }
        Ok(Self {
            fine_classes,
            columns,
            column_classes,
        })
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut rows: Vec<(usize, Vec<usize>)> = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Result<Vec<usize>> = line
                .split('\t')
                .map(|f| {
                    f.trim()
                        .parse()
                        .map_err(|_| Error::Config(format!("hierarchy line {}: `{f}` is not an index", n + 1)))
                })
                .collect();
            let fields = fields?;
            if fields.len() < 2 {
                return Err(Error::Config(format!(
                    "hierarchy line {}: expected `fine<TAB>coarse…`",
                    n + 1
                )));
            }
            rows.push((fields[0], fields[1..].to_vec()));
        }
        rows.sort_by_key(|r| r.0);
        let width = rows.first().map_or(0, |r| r.1.len());
        for (i, (fine, coarse)) in rows.iter().enumerate() {
            if *fine != i {
                return Err(Error::Config(format!("hierarchy has no line for fine class {i}")));
            }
            if coarse.len() != width {
                return Err(Error::Config(format!(
                    "hierarchy line for class {fine} has a different column count"
                )));
            }
        }
        let columns = (0..width).map(|c| rows.iter().map(|r| r.1[c]).collect()).collect();
        Self::new(columns)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Digits 0–4 → 0, 5–9 → 1.
    pub fn digits() -> Self {
        Self::new(vec![(0..10).map(|d| d / 5).collect()]).expect("static table")
    }

    pub fn identity(classes: usize) -> Self {
        Self::new(vec![(0..classes).collect()]).expect("static table")
    }

    pub fn fine_classes(&self) -> usize {
        self.fine_classes
    }

    pub fn columns(&self) -> &[Vec<usize>] {
        &self.columns
    }

    pub fn column_classes(&self) -> &[usize] {
        &self.column_classes
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for f in 0..self.fine_classes {
            out.push_str(&f.to_string());
            for col in &self.columns {
                out.push('\t');
                out.push_str(&col[f].to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Adds one coarse label column per hierarchy column.
pub fn attach_hierarchy(ds: &Dataset, h: &LabelHierarchy) -> Result<Dataset> {
    if let Some(&label) = ds.labels.iter().find(|&&l| l >= h.fine_classes) {
        return Err(Error::LabelOutOfRange {
            label,
            classes: h.fine_classes,
        });
    }
    let mut out = ds.clone();
    out.coarse = h
        .columns
        .iter()
        .map(|col| ds.labels.iter().map(|&l| col[l]).collect())
        .collect();
    out.coarse_classes = h.column_classes.clone();
    Ok(out)
}
