//! `manifest.csv` + `images/` storage.
//!
//! Manifest columns: `lesion_id,label,modality,view_index,relative_path`,
//! one row per appearance, `\n` line endings. Rows of a lesion keep the
//! lesion's label; modality is `mg` or `us`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pnm;
use super::synth::LatentRecord;
use super::{Dataset, Label, LesionPair, Modality, Split};
use crate::error::{Error, Result};
use crate::models::Patch;

pub const MANIFEST: &str = "manifest.csv";
pub const LATENT: &str = "latent.csv";
pub const IMAGES: &str = "images";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    lesion_id: String,
    label: u8,
    modality: String,
    view_index: usize,
    relative_path: String,
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(file))
}

pub(crate) fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, format!("{other:?}")),
    }
}

fn image_name(lesion_id: &str, modality: Modality, view: usize) -> String {
    format!("{IMAGES}/{lesion_id}_{}_{view}.pgm", modality.tag())
}

/// Writes images and the manifest under `dir`, creating it if needed.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    let images = dir.join(IMAGES);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest = dir.join(MANIFEST);
    let mut w = csv_writer(&manifest)?;
    // Header is written explicitly so an empty dataset still has one.
    w.write_record(["lesion_id", "label", "modality", "view_index", "relative_path"])
        .map_err(|e| csv_error(&manifest, e))?;
    for lesion in ds.lesions() {
        for modality in Modality::BOTH {
            for (view, patch) in lesion.appearances(modality).iter().enumerate() {
                let rel = image_name(&lesion.lesion_id, modality, view);
                pnm::write_file(&dir.join(&rel), &pnm::patch_to_pgm(patch))?;
                w.write_record([
                    lesion.lesion_id.clone(),
                    lesion.label.index().to_string(),
                    modality.tag().to_string(),
                    view.to_string(),
                    rel,
                ])
                .map_err(|e| csv_error(&manifest, e))?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(&manifest, e))
}

struct Pending {
    label: Label,
    first_row: usize,
    views: [Vec<(usize, Patch)>; 2],
}

/// Reads a dataset written by [`save_dataset`] (or by hand). The split tag is
/// not stored on disk; loaded datasets are tagged [`Split::Train`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    if text.trim().is_empty() {
        return Dataset::new(Vec::new(), Split::Train);
    }
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let mut order: Vec<String> = Vec::new();
    let mut pending: HashMap<String, Pending> = HashMap::new();
    for (i, rec) in reader.deserialize::<ManifestRow>().enumerate() {
        // Row numbers count the header as row 1.
        let row_no = i + 2;
        let row_err = |reason: String| Error::parse(&manifest, format!("row {row_no}: {reason}"));
        let row = rec.map_err(|e| row_err(e.to_string()))?;
        let label = Label::from_index(row.label as usize).map_err(|e| row_err(e.to_string()))?;
        let modality = Modality::from_tag(&row.modality)
            .ok_or_else(|| row_err(format!("unknown modality `{}`", row.modality)))?;
        let image_path = dir.join(&row.relative_path);
        if !image_path.is_file() {
            return Err(row_err(format!("image {} does not exist", row.relative_path)));
        }
        let patch = pnm::read_patch(&image_path).map_err(|e| row_err(e.to_string()))?;
        let entry = pending.entry(row.lesion_id.clone()).or_insert_with(|| {
            order.push(row.lesion_id.clone());
            Pending {
                label,
                first_row: row_no,
                views: [Vec::new(), Vec::new()],
            }
        });
        if entry.label != label {
            return Err(row_err(format!(
                "lesion {} has label {} here but {} on row {}",
                row.lesion_id,
                label.index(),
                entry.label.index(),
                entry.first_row
            )));
        }
        let views = &mut entry.views[modality as usize];
        if views.iter().any(|(v, _)| *v == row.view_index) {
            return Err(row_err(format!(
                "duplicate view {} for lesion {} ({})",
                row.view_index, row.lesion_id, modality
            )));
        }
        views.push((row.view_index, patch));
    }
    let mut lesions = Vec::with_capacity(order.len());
    let mut size = None;
    for id in order {
        let Pending { label, views, .. } = pending.remove(&id).expect("lesion recorded");
        let [mut mg, mut us] = views;
        mg.sort_by_key(|(v, _)| *v);
        us.sort_by_key(|(v, _)| *v);
        let mg: Vec<Patch> = mg.into_iter().map(|(_, p)| p).collect();
        let us: Vec<Patch> = us.into_iter().map(|(_, p)| p).collect();
        for p in mg.iter().chain(&us) {
            match size {
                None => size = Some(p.size()),
                Some(s) if s != p.size() => {
                    return Err(Error::parse(
                        &manifest,
                        format!("lesion {id}: patch size {} differs from {s}", p.size()),
                    ))
                }
                _ => {}
            }
        }
        lesions.push(
            LesionPair::new(id, label, mg, us).map_err(|e| Error::parse(&manifest, e.to_string()))?,
        );
    }
    Dataset::new(lesions, Split::Train).map_err(|e| Error::parse(&manifest, e.to_string()))
}

pub fn save_latent(records: &[LatentRecord], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(LATENT);
    let mut w = csv_writer(&path)?;
    for r in records {
        w.serialize(r).map_err(|e| csv_error(&path, e))?;
    }
    w.flush().map_err(|e| Error::io(&path, e))
}

pub fn load_latent(dir: &Path) -> Result<Vec<LatentRecord>> {
    let path = dir.join(LATENT);
    let mut reader = csv::Reader::from_path(&path).map_err(|e| csv_error(&path, e))?;
    reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_error(&path, e))
}
