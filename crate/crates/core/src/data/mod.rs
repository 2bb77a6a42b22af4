//! Paired-lesion datasets.
//!
//! A dataset directory holds `manifest.csv`, the referenced `images/*.pgm`
//! and, for generated data, a `latent.csv` sidecar with the generator's
//! ground truth.

pub mod augment;
mod manifest;
pub mod pnm;
pub mod synth;

use std::collections::HashSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
pub use crate::models::Patch;
use crate::seed;

pub use manifest::{load_dataset, load_latent, save_dataset, save_latent};
pub(crate) use manifest::{csv_error, csv_writer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "u8", try_from = "u8")]
pub enum Label {
    Benign = 0,
    Malignant = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Result<Self> {
        match i {
            0 => Ok(Label::Benign),
            1 => Ok(Label::Malignant),
            other => Err(Error::contract(format!("label {other} is not 0 or 1"))),
        }
    }

    pub fn flipped(self) -> Self {
        match self {
            Label::Benign => Label::Malignant,
            Label::Malignant => Label::Benign,
        }
    }
}

impl From<Label> for u8 {
    fn from(l: Label) -> u8 {
        l as u8
    }
}

impl TryFrom<u8> for Label {
    type Error = String;

    fn try_from(v: u8) -> std::result::Result<Self, String> {
        Label::from_index(v as usize).map_err(|e| e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    #[serde(rename = "mg")]
    Mammography,
    #[serde(rename = "us")]
    Ultrasound,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::Mammography, Modality::Ultrasound];

    pub fn tag(self) -> &'static str {
        match self {
            Modality::Mammography => "mg",
            Modality::Ultrasound => "us",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "mg" => Some(Modality::Mammography),
            "us" => Some(Modality::Ultrasound),
            _ => None,
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// One biopsy-labelled lesion seen in both modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionPair {
    pub lesion_id: String,
    pub label: Label,
    mg: Vec<Patch>,
    us: Vec<Patch>,
}

impl LesionPair {
    pub fn new(lesion_id: impl Into<String>, label: Label, mg: Vec<Patch>, us: Vec<Patch>) -> Result<Self> {
        let lesion_id = lesion_id.into();
        if mg.is_empty() || us.is_empty() {
            return Err(Error::contract(format!(
                "lesion {lesion_id} needs at least one appearance per modality (mg: {}, us: {})",
                mg.len(),
                us.len()
            )));
        }
        Ok(LesionPair {
            lesion_id,
            label,
            mg,
            us,
        })
    }

    pub fn appearances(&self, modality: Modality) -> &[Patch] {
        match modality {
            Modality::Mammography => &self.mg,
            Modality::Ultrasound => &self.us,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    lesions: Vec<LesionPair>,
    pub split: Split,
}

impl Dataset {
    pub fn new(lesions: Vec<LesionPair>, split: Split) -> Result<Self> {
        let mut seen = HashSet::new();
        for l in &lesions {
            if !seen.insert(l.lesion_id.as_str()) {
                return Err(Error::contract(format!("duplicate lesion id {}", l.lesion_id)));
            }
        }
        Ok(Dataset { lesions, split })
    }

    pub fn lesions(&self) -> &[LesionPair] {
        &self.lesions
    }

    pub fn len(&self) -> usize {
        self.lesions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lesions.is_empty()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.lesions.iter().map(|l| l.label).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.lesions.iter().filter(|l| l.label == label).count()
    }

    pub fn has_both_classes(&self) -> bool {
        self.count(Label::Benign) > 0 && self.count(Label::Malignant) > 0
    }

    /// Patch side length, if the dataset is non-empty.
    pub fn patch_size(&self) -> Option<usize> {
        self.lesions.first().map(|l| l.mg[0].size())
    }

    pub fn ids(&self) -> Vec<&str> {
        self.lesions.iter().map(|l| l.lesion_id.as_str()).collect()
    }

    /// Lesions at `indices`, in that order.
    pub fn subset(&self, indices: &[usize], split: Split) -> Dataset {
        Dataset {
            lesions: indices.iter().map(|&i| self.lesions[i].clone()).collect(),
            split,
        }
    }
}

/// Splits off `n_holdout` lesions as a validation set.
///
/// The retained training set is class-balanced where the class counts allow
/// it (153 lesions with 73 malignant and 33 held out leave 60 + 60); any
/// remainder is drawn proportionally. Selection within each class is a
/// seeded shuffle, and both halves keep the original lesion order.
pub fn split_holdout(ds: &Dataset, n_holdout: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_holdout >= ds.len() {
        return Err(Error::contract(format!(
            "cannot hold out {n_holdout} of {} lesions",
            ds.len()
        )));
    }
    let n_train = ds.len() - n_holdout;
    let mut rng = seed::rng(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(), Vec::new()];
    for (i, l) in ds.lesions.iter().enumerate() {
        by_class[l.label.index()].push(i);
    }
    for idx in &mut by_class {
        idx.shuffle(&mut rng);
    }
    let (n_ben, n_mal) = (by_class[0].len(), by_class[1].len());
    let mal_train = (n_train / 2).min(n_mal).max(n_train.saturating_sub(n_ben));
    let ben_train = n_train - mal_train;
    let mut train: Vec<usize> = by_class[1][..mal_train]
        .iter()
        .chain(&by_class[0][..ben_train])
        .copied()
        .collect();
    train.sort_unstable();
    let keep: HashSet<usize> = train.iter().copied().collect();
    let held: Vec<usize> = (0..ds.len()).filter(|i| !keep.contains(i)).collect();
    Ok((ds.subset(&train, Split::Train), ds.subset(&held, Split::Validation)))
}
