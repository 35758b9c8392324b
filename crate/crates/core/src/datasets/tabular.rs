//! Generic tabular fallback: header row, float feature columns and an
//! integer column named `label`.

use std::path::Path;

use super::{one_hot, LabeledDataset, Sample, TaskKind};
use crate::error::{Error, Result};

pub fn load_tabular_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let path = path.as_ref();
    let text =
        std::fs::read_to_string(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty() && !l.starts_with('#'));
    let header: Vec<&str> = lines
        .next()
        .ok_or_else(|| Error::Parse("empty CSV".into()))?
        .split(',')
        .map(str::trim)
        .collect();
    let label_col = header
        .iter()
        .position(|h| *h == "label")
        .ok_or_else(|| Error::Parse("CSV has no `label` column".into()))?;

    let mut rows = Vec::new();
    for (ln, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != header.len() {
            return Err(Error::Parse(format!(
                "row {}: {} fields, expected {}",
                ln + 2,
                fields.len(),
                header.len()
            )));
        }
        let mut x = Vec::with_capacity(header.len() - 1);
        let mut label = 0usize;
        for (i, f) in fields.iter().enumerate() {
            if i == label_col {
                label = f
                    .parse()
                    .map_err(|_| Error::Parse(format!("row {}: bad label {f:?}", ln + 2)))?;
            } else {
                x.push(
                    f.parse()
                        .map_err(|_| Error::Parse(format!("row {}: bad feature {f:?}", ln + 2)))?,
                );
            }
        }
        rows.push((x, label));
    }
    let classes = rows.iter().map(|r| r.1).max().map_or(2, |m| (m + 1).max(2));
    let samples = rows
        .into_iter()
        .map(|(x, l)| Sample {
            x,
            y: one_hot(l, classes),
        })
        .collect();
    LabeledDataset::new(TaskKind::Classification, header.len() - 1, classes, samples)
}
