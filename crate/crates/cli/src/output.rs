//! Structured output records.
//!
//! Every command writes `<command>.json`:
//!
//! ```text
//! { "schema": "d2st.<command>.v1",
//!   "code_digest": <sha-256 of the sources this binary was built from>,
//!   "config": <RunConfig::to_json()>,
//!   "result": { ...command specific... },
//!   "timing": { "wall_clock_s": ... } }
//! ```
//!
//! `result` depends only on the configuration and seeds; `timing` does not.
//! Tables go to comma-separated files next to the record.

use std::path::{Path, PathBuf};

use serde::Serialize;

use d2st_core::{Error, Result};

pub const CODE_DIGEST: &str = env!("D2ST_CODE_DIGEST");
/// Default output directory when `--out` is not given.
pub const OUT_DIR_ENV: &str = "D2ST_OUT_DIR";

#[derive(Serialize)]
pub struct Record<'a, T: Serialize> {
    pub schema: String,
    pub code_digest: &'a str,
    pub config: serde_json::Value,
    pub result: &'a T,
    pub timing: Timing,
}

#[derive(Clone, Debug, Serialize)]
pub struct Timing {
    pub wall_clock_s: f64,
}

pub fn write_record<T: Serialize>(dir: &Path, command: &str, config: serde_json::Value, result: &T, wall_clock_s: f64) -> Result<PathBuf> {
    let rec = Record {
        schema: format!("d2st.{command}.v1"),
        code_digest: CODE_DIGEST,
        config,
        result,
        timing: Timing { wall_clock_s },
    };
    let path = dir.join(format!("{command}.json"));
    let text = serde_json::to_string_pretty(&rec).map_err(|e| Error::Format(e.to_string()))?;
    std::fs::write(&path, text + "\n")?;
    Ok(path)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Format(e.to_string()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
