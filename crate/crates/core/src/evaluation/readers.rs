//! Reader-study comparison: ordinal 0–10 ratings against the model's fused
//! scores.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::Serialize;

use super::roc::{roc_auc, RocCurve};
use super::ScoreRecord;
use crate::data::Label;
use crate::error::{Error, Result};

pub const MAX_RATING: u8 = 10;

/// Ratings table: one row per lesion, one column per reader.
#[derive(Debug, Clone, PartialEq)]
pub struct Ratings {
    pub readers: Vec<String>,
    pub lesion_ids: Vec<String>,
    pub labels: Vec<Label>,
    /// `ratings[r][i]` is reader `r`'s rating of lesion `i`.
    pub ratings: Vec<Vec<u8>>,
}

/// Reads `lesion_id,label,<reader>...`; reader names come from the header.
pub fn read_ratings(path: &Path) -> Result<Ratings> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| crate::data::csv_error(path, e))?;
    let header = reader.headers().map_err(|e| crate::data::csv_error(path, e))?.clone();
    if header.len() < 3 || &header[0] != "lesion_id" || &header[1] != "label" {
        return Err(Error::parse(
            path,
            "header must be lesion_id,label followed by at least one reader column",
        ));
    }
    let readers: Vec<String> = header.iter().skip(2).map(String::from).collect();
    let mut out = Ratings {
        ratings: vec![Vec::new(); readers.len()],
        readers,
        lesion_ids: Vec::new(),
        labels: Vec::new(),
    };
    for (i, rec) in reader.records().enumerate() {
        let row_no = i + 2;
        let rec = rec.map_err(|e| crate::data::csv_error(path, e))?;
        let bad = |reason: String| Error::parse(path, format!("row {row_no}: {reason}"));
        let label = rec[1]
            .trim()
            .parse::<usize>()
            .map_err(|e| bad(format!("label: {e}")))
            .and_then(|l| Label::from_index(l).map_err(|e| bad(e.to_string())))?;
        out.lesion_ids.push(rec[0].to_string());
        out.labels.push(label);
        for (r, field) in rec.iter().skip(2).enumerate() {
            let v: u8 = field
                .trim()
                .parse()
                .map_err(|_| bad(format!("rating `{field}` is not an integer 0-{MAX_RATING}")))?;
            if v > MAX_RATING {
                return Err(bad(format!("rating {v} exceeds {MAX_RATING}")));
            }
            out.ratings[r].push(v);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ReaderAuc {
    pub name: String,
    pub auc: f64,
    pub curve: RocCurve,
}

fn mismatch(model: &BTreeSet<&str>, readers: &BTreeSet<&str>) -> Error {
    let only_model: Vec<_> = model.difference(readers).collect();
    let only_readers: Vec<_> = readers.difference(model).collect();
    Error::contract(format!(
        "lesion sets differ: only in scores {only_model:?}; only in ratings {only_readers:?}"
    ))
}

/// Per-reader AUCs plus the model's (on `score_fused`, named `model`),
/// sorted by AUC descending; equal AUCs keep reader order with the model
/// last.
pub fn compare_readers(model: &[ScoreRecord], ratings: &Ratings) -> Result<Vec<ReaderAuc>> {
    let model_ids: BTreeSet<&str> = model.iter().map(|r| r.lesion_id.as_str()).collect();
    let rating_ids: BTreeSet<&str> = ratings.lesion_ids.iter().map(String::as_str).collect();
    if model_ids.len() != model.len() || rating_ids.len() != ratings.lesion_ids.len() {
        return Err(Error::contract("duplicate lesion ids in scores or ratings"));
    }
    if model_ids != rating_ids {
        return Err(mismatch(&model_ids, &rating_ids));
    }
    let model_labels: HashMap<&str, Label> = model.iter().map(|r| (r.lesion_id.as_str(), r.label)).collect();
    for (id, label) in ratings.lesion_ids.iter().zip(&ratings.labels) {
        if model_labels[id.as_str()] != *label {
            return Err(Error::contract(format!("lesion {id}: label differs between scores and ratings")));
        }
    }

    let y: Vec<usize> = ratings.labels.iter().map(|l| l.index()).collect();
    let mut rows = Vec::with_capacity(ratings.readers.len() + 1);
    for (name, r) in ratings.readers.iter().zip(&ratings.ratings) {
        let scores: Vec<f64> = r.iter().map(|&v| v as f64).collect();
        let curve = roc_auc(&scores, &y)?;
        rows.push(ReaderAuc {
            name: name.clone(),
            auc: curve.auc,
            curve,
        });
    }
    let fused: HashMap<&str, f64> = model.iter().map(|r| (r.lesion_id.as_str(), r.score_fused)).collect();
    let scores: Vec<f64> = ratings.lesion_ids.iter().map(|id| fused[id.as_str()]).collect();
    let curve = roc_auc(&scores, &y)?;
    rows.push(ReaderAuc {
        name: "model".into(),
        auc: curve.auc,
        curve,
    });
    rows.sort_by(|a, b| b.auc.total_cmp(&a.auc));
    Ok(rows)
}

#[derive(Serialize)]
struct ComparisonRow<'a> {
    name: &'a str,
    auc: f64,
}

pub fn write_comparison(rows: &[ReaderAuc], path: &Path) -> Result<()> {
    let mut w = crate::data::csv_writer(path)?;
    for r in rows {
        w.serialize(ComparisonRow { name: &r.name, auc: r.auc })
            .map_err(|e| crate::data::csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
