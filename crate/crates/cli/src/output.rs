use std::env;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

/// Relative output paths are taken relative to this directory when set.
pub const OUT_DIR_ENV: &str = "KVEVICT_OUT_DIR";

pub fn resolve(path: Option<PathBuf>, default_name: &str) -> PathBuf {
    let path = path.unwrap_or_else(|| PathBuf::from(default_name));
    match env::var_os(OUT_DIR_ENV) {
        Some(dir) if path.is_relative() && !dir.is_empty() => Path::new(&dir).join(path),
        _ => path,
    }
}

/// Writes to a temp file next to `path`, then renames it into place, so
/// readers never see a partial file. Missing parent directories are created.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| CliError::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| CliError::io(path, e))?;
    tmp.persist(path).map_err(|e| CliError::io(path, e.error))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(kvevict::Error::from)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_csv<I: IntoIterator<Item = String>>(path: &Path, header: &str, lines: I) -> CliResult<()> {
    let mut text = String::from(header);
    text.push('\n');
    for line in lines {
        text.push_str(&line);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}
