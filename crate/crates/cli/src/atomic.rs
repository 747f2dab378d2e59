//! Write-to-temp-then-rename, so failed commands leave no partial files.

use std::io::Write;
use std::path::Path;

use anyhow::Context;

fn parent(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

pub fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    write_with(path, |w| Ok(w.write_all(bytes)?))
}

pub fn write_with<F>(path: &Path, fill: F) -> anyhow::Result<()>
where
    F: FnOnce(&mut dyn Write) -> anyhow::Result<()>,
{
    let dir = parent(path);
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    {
        let mut w = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut w)?;
        w.flush()?;
    }
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    write_with(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)?;
        Ok(())
    })
}

/// Builds a directory in a sibling temp dir and renames it into place.
/// `dest` must not exist or be an empty directory.
pub fn write_dir<F>(dest: &Path, fill: F) -> anyhow::Result<()>
where
    F: FnOnce(&Path) -> anyhow::Result<()>,
{
    if dest.exists() {
        let empty = std::fs::read_dir(dest)
            .with_context(|| format!("{} exists and is not a directory", dest.display()))?
            .next()
            .is_none();
        anyhow::ensure!(empty, "{} already exists and is not empty", dest.display());
        std::fs::remove_dir(dest)?;
    }
    let dir = parent(dest);
    std::fs::create_dir_all(dir)?;
    let tmp = tempfile::Builder::new().prefix(".mammoth-").tempdir_in(dir)?;
    fill(tmp.path())?;
    let path = tmp.keep();
    std::fs::rename(&path, dest).with_context(|| format!("moving output into {}", dest.display()))?;
    Ok(())
}
