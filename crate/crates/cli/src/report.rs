//! Artifact emission: every number the CLI prints or writes into JSON is
//! rounded to 12 significant digits, and files are written atomically enough
//! for re-runs to be byte-identical.

use std::path::{Path, PathBuf};

use serde_json::Value;

use crate::scenario::{CliError, CliResult};

/// Formats a float with 12 significant digits (scientific notation).
pub fn sig12(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    format!("{x:.11e}")
}

/// Rounds a float to 12 significant digits.
pub fn round12(x: f64) -> f64 {
    if !x.is_finite() || x == 0.0 {
        return x;
    }
    format!("{x:.11e}").parse().expect("formatted float")
}

/// Rounds every number inside a JSON value to 12 significant digits.
pub fn round_json(v: &mut Value) {
    match v {
        Value::Number(n) => {
            if let Some(x) = n.as_f64() {
                // Keep integers exact; only round true floats.
                if !n.is_i64() && !n.is_u64() {
                    if let Some(rounded) = serde_json::Number::from_f64(round12(x)) {
                        *v = Value::Number(rounded);
                    }
                }
            }
        }
        Value::Array(items) => items.iter_mut().for_each(round_json),
        Value::Object(map) => map.values_mut().for_each(round_json),
        _ => {}
    }
}

/// Creates the output directory (if needed) and returns the path of a file
/// inside it.
pub fn artifact_path(out_dir: &Path, name: &str) -> CliResult<PathBuf> {
    std::fs::create_dir_all(out_dir)
        .map_err(|e| CliError(format!("{}: {e}", out_dir.display())))?;
    Ok(out_dir.join(name))
}

/// Writes a JSON value (rounded to 12 significant digits) with a trailing
/// newline. Returns the path for the console summary.
pub fn write_json(out_dir: &Path, name: &str, mut value: Value) -> CliResult<PathBuf> {
    let path = artifact_path(out_dir, name)?;
    round_json(&mut value);
    let text = serde_json::to_string_pretty(&value)
        .map_err(|e| CliError(format!("{}: {e}", path.display())))?;
    std::fs::write(&path, text + "\n").map_err(|e| CliError(format!("{}: {e}", path.display())))?;
    Ok(path)
}

/// Prints a two-column summary table.
pub fn print_table(title: &str, rows: &[(String, String)]) {
    println!("{title}");
    let width = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    for (k, v) in rows {
        println!("  {k:<width$}  {v}");
    }
}
