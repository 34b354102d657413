use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{BmlError, Result};

/// One line of the summary table: method × setting × branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub setting: String,
    pub branch: String,
    pub accuracy: f64,
    pub ci95: f64,
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

pub fn write_csv_summary(rows: &[SummaryRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| BmlError::invalid(format!("{}: {e}", path.display())))?;
    for row in rows {
        w.serialize(row).map_err(|e| BmlError::invalid(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
