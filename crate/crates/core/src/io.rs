use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{RasrError, Result};

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| RasrError::io(dir, e))?;
    }
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".tmp");
    let tmp = path.with_file_name(name);
    let mut f = fs::File::create(&tmp).map_err(|e| RasrError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| RasrError::io(&tmp, e))?;
    f.sync_all().map_err(|e| RasrError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| RasrError::io(path, e))
}
