//! Output files are written to a temporary sibling and renamed into place, so
//! an interrupted command never leaves a truncated artifact behind.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bcva_core::net::{read_checkpoint, write_checkpoint, CheckpointHeader, LabelingRef};
use bcva_core::trajlog::{read_dataset, read_labeled_dataset, write_dataset_to, write_labeled_dataset_to};
use bcva_core::{Dataset, LabeledDataset, Model, TrainMode};

use crate::error::{CliError, Result};

/// Fails with an `exists` error unless `force` is set or `path` is free.
pub fn check_free(path: &Path, force: bool) -> Result<()> {
    if !force && path.exists() {
        return Err(CliError::Exists(path.display().to_string()));
    }
    Ok(())
}

pub fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(CliError::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file"),
        ));
    }
    Ok(())
}

fn temp_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}

/// Writes through `fill` into a temporary file, then renames it over `path`.
pub fn atomic_write<F>(path: &Path, force: bool, fill: F) -> Result<()>
where
    F: FnOnce(&mut BufWriter<File>) -> Result<()>,
{
    check_free(path, force)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let tmp = temp_path(path);
    let result = (|| {
        let f = File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
        let mut w = BufWriter::new(f);
        fill(&mut w)?;
        let f = w.into_inner().map_err(|e| CliError::io(&tmp, e.into_error()))?;
        f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn write_text(path: &Path, force: bool, text: &str) -> Result<()> {
    atomic_write(path, force, |w| w.write_all(text.as_bytes()).map_err(|e| CliError::io(path, e)))
}

pub fn save_dataset(path: &Path, force: bool, dataset: &Dataset) -> Result<()> {
    atomic_write(path, force, |w| Ok(write_dataset_to(dataset, w)?))
}

pub fn save_labeled(path: &Path, force: bool, labeled: &LabeledDataset) -> Result<()> {
    atomic_write(path, force, |w| Ok(write_labeled_dataset_to(labeled, w)?))
}

pub fn save_model(
    path: &Path,
    force: bool,
    model: &Model,
    mode: TrainMode,
    labeling: Option<LabelingRef>,
) -> Result<()> {
    atomic_write(path, force, |w| Ok(write_checkpoint(model, mode, labeling, w)?))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    require(path)?;
    read_dataset(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn load_labeled(path: &Path) -> Result<LabeledDataset> {
    require(path)?;
    read_labeled_dataset(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn load_model(path: &Path) -> Result<(Model, CheckpointHeader)> {
    require(path)?;
    let f = File::open(path).map_err(|e| CliError::io(path, e))?;
    read_checkpoint(std::io::BufReader::new(f))
        .map_err(|e| CliError::Model(format!("{}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> Result<String> {
    require(path)?;
    fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}
