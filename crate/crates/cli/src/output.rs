//! Write-then-rename output.

use std::io::Write;
use std::path::{Path, PathBuf};

use tempfile::NamedTempFile;

use crate::error::CliError;

/// Writes every `(name, bytes)` into `dir`. All contents are staged in
/// temporary files first, so a failure leaves no target file half-written.
pub fn write_all(dir: &Path, files: &[(&str, Vec<u8>)]) -> Result<Vec<PathBuf>, CliError> {
    let io = |path: &Path| {
        let path = path.to_path_buf();
        move |source| CliError::Io { path, source }
    };
    std::fs::create_dir_all(dir).map_err(io(dir))?;
    let mut staged = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let target = dir.join(name);
        let mut tmp = NamedTempFile::new_in(dir).map_err(io(&target))?;
        tmp.write_all(bytes).map_err(io(&target))?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            tmp.as_file().set_permissions(std::fs::Permissions::from_mode(0o644)).map_err(io(&target))?;
        }
        tmp.as_file().sync_all().map_err(io(&target))?;
        staged.push((tmp, target));
    }
    staged
        .into_iter()
        .map(|(tmp, target)| tmp.persist(&target).map(|_| target.clone()).map_err(|e| CliError::Io { path: target, source: e.error }))
        .collect()
}

/// Pretty JSON with a trailing newline.
pub fn json_bytes<T: serde::Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("report types serialise");
    s.push('\n');
    s.into_bytes()
}
