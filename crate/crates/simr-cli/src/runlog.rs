//! Sidecar run log. Wall-clock timestamps live here and nowhere else, so
//! every other artifact can be compared byte for byte across runs.

use simr::Result;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

pub fn append(out_dir: &Path, message: &str) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let ts = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0);
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("run.log"))?;
    writeln!(f, "[{ts}] {message}")?;
    Ok(())
}
