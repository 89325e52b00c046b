//! Line-oriented JSON helpers shared by the file formats.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

/// Parse every non-blank line of `text`, converting each with `convert`.
/// Errors carry the 1-based line number.
pub fn parse_lines<R, T, F>(text: &str, mut convert: F) -> Result<Vec<T>>
where
    R: DeserializeOwned,
    F: FnMut(R) -> Result<T>,
{
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: R = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(convert(raw).map_err(|e| e.at_line(line_no))?);
    }
    Ok(out)
}

pub fn read_lines<R, T, F>(path: &Path, convert: F) -> Result<Vec<T>>
where
    R: DeserializeOwned,
    F: FnMut(R) -> Result<T>,
{
    let text = fs::read_to_string(path)?;
    parse_lines(&text, convert)
}

/// Serialize items as LF-terminated JSON lines.
pub fn to_string<T: Serialize>(items: impl IntoIterator<Item = T>) -> String {
    let mut out = String::new();
    for item in items {
        out.push_str(&serde_json::to_string(&item).expect("serializable record"));
        out.push('\n');
    }
    out
}

pub fn write<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    numerics::write_atomic(path, to_string(items).as_bytes())?;
    Ok(())
}
