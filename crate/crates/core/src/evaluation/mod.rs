//! Leave-one-out and k-fold evaluation, appearance-averaged scoring, ROC/AUC
//! and reader comparison.

mod readers;
mod roc;
mod svg;

pub use readers::{compare_readers, read_ratings, write_comparison, ReaderAuc, Ratings};
pub use roc::{roc_auc, write_roc_csv, RocCurve};
pub use svg::emit_roc_svg;

use std::collections::HashSet;
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Label, LesionPair, Modality, Split};
use crate::error::{Error, Result};
use crate::losses::LossKind;
use crate::models::{Architecture, ModelConfig};
use crate::seed;
use crate::training::{self, Method, TrainConfig, TrainedTriple};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    #[default]
    Loo,
    Kfold,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub protocol: Protocol,
    /// Number of folds for `kfold`.
    pub folds: usize,
    /// Lesions set aside as a validation split before cross-validation;
    /// 0 keeps everything.
    pub holdout: usize,
    /// Architectures swept by the experiment matrix; empty means the model
    /// section's architecture only.
    pub matrix_architectures: Vec<Architecture>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            protocol: Protocol::Loo,
            folds: 5,
            holdout: 33,
            matrix_architectures: Vec::new(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.protocol == Protocol::Kfold && self.folds < 2 {
            return Err(Error::config("eval.folds", "k-fold needs at least 2 folds"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub lesion_id: String,
    pub label: Label,
    pub score_mg: f64,
    pub score_us: f64,
    pub score_fused: f64,
}

/// AUCs in mammography/ultrasound/combined order.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripleAuc {
    pub mammography: f64,
    pub ultrasound: f64,
    pub combined: f64,
}

impl fmt::Display for TripleAuc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2}/{:.2}/{:.2}", self.mammography, self.ultrasound, self.combined)
    }
}

/// One ROC curve per score column.
#[derive(Debug, Clone)]
pub struct TripleRoc {
    pub mammography: RocCurve,
    pub ultrasound: RocCurve,
    pub combined: RocCurve,
}

impl TripleRoc {
    pub fn from_records(records: &[ScoreRecord]) -> Result<Self> {
        let y: Vec<usize> = records.iter().map(|r| r.label.index()).collect();
        let col = |f: fn(&ScoreRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
        Ok(TripleRoc {
            mammography: roc_auc(&col(|r| r.score_mg), &y)?,
            ultrasound: roc_auc(&col(|r| r.score_us), &y)?,
            combined: roc_auc(&col(|r| r.score_fused), &y)?,
        })
    }

    pub fn aucs(&self) -> TripleAuc {
        TripleAuc {
            mammography: self.mammography.auc,
            ultrasound: self.ultrasound.auc,
            combined: self.combined.auc,
        }
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Scores a lesion with a trained triple: mean malignancy probability over
/// its raw appearances per modality, and over every mammography ×
/// ultrasound pair for the fused score.
pub fn score_lesion(models: &TrainedTriple, lesion: &LesionPair) -> Result<ScoreRecord> {
    let mg_patches: Vec<_> = lesion.appearances(Modality::Mammography).iter().collect();
    let us_patches: Vec<_> = lesion.appearances(Modality::Ultrasound).iter().collect();
    let mg = training::infer_cnn(&models.mg, &mg_patches)?;
    let us = training::infer_cnn(&models.us, &us_patches)?;
    let pairs: Vec<(&[f64], &[f64])> = mg
        .iter()
        .flat_map(|a| us.iter().map(move |b| (a.0.as_slice(), b.0.as_slice())))
        .collect();
    let fused = training::infer_fusion(&models.fusion, &pairs)?;
    Ok(ScoreRecord {
        lesion_id: lesion.lesion_id.clone(),
        label: lesion.label,
        score_mg: mean(&mg.iter().map(|x| x.1).collect::<Vec<_>>()),
        score_us: mean(&us.iter().map(|x| x.1).collect::<Vec<_>>()),
        score_fused: mean(&fused),
    })
}

/// Test-set indices of each fold.
pub fn loo_folds(n: usize) -> Vec<Vec<usize>> {
    (0..n).map(|i| vec![i]).collect()
}

/// Stratified k-fold: each class is shuffled with `seed` and dealt round
/// robin, so fold sizes differ by at most one per class. Indices within a
/// fold are ascending.
pub fn kfold_folds(labels: &[Label], k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k > labels.len() {
        return Err(Error::contract(format!(
            "cannot make {k} folds from {} lesions",
            labels.len()
        )));
    }
    let mut rng = seed::rng(seed);
    let mut folds = vec![Vec::new(); k];
    let mut next = 0;
    for class in [Label::Malignant, Label::Benign] {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for i in idx {
            folds[next % k].push(i);
            next += 1;
        }
    }
    for f in &mut folds {
        f.sort_unstable();
    }
    Ok(folds)
}

/// Outcome of the structural leakage check for one fold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAudit {
    pub fold: usize,
    pub train_lesions: usize,
    pub test_ids: Vec<String>,
    /// Test lesion ids that also appear in the fold's training set.
    pub leaked: Vec<String>,
}

impl FoldAudit {
    pub fn passed(&self) -> bool {
        self.leaked.is_empty()
    }
}

pub fn audit_fold(fold: usize, train: &Dataset, test: &Dataset) -> FoldAudit {
    let train_ids: HashSet<&str> = train.ids().into_iter().collect();
    let test_ids: Vec<String> = test.ids().into_iter().map(String::from).collect();
    let leaked = test_ids
        .iter()
        .filter(|id| train_ids.contains(id.as_str()))
        .cloned()
        .collect();
    FoldAudit {
        fold,
        train_lesions: train.len(),
        test_ids,
        leaked,
    }
}

#[derive(Debug, Clone)]
pub struct CrossValidation {
    /// In dataset order.
    pub records: Vec<ScoreRecord>,
    pub audits: Vec<FoldAudit>,
}

fn split_fold(ds: &Dataset, test: &[usize]) -> (Dataset, Dataset) {
    let held: HashSet<usize> = test.iter().copied().collect();
    let train: Vec<usize> = (0..ds.len()).filter(|i| !held.contains(i)).collect();
    (ds.subset(&train, Split::Train), ds.subset(test, Split::Validation))
}

/// Trains one model triple per fold and scores that fold's test lesions.
/// Fold `f` trains with seed `seed ^ f`, so results do not depend on how
/// folds are scheduled; `threads` sets fold-level parallelism.
pub fn cross_validate(
    ds: &Dataset,
    folds: &[Vec<usize>],
    model: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
    threads: usize,
) -> Result<CrossValidation> {
    if ds.len() < 3 {
        return Err(Error::contract(format!(
            "cross-validation needs at least 3 lesions, got {}",
            ds.len()
        )));
    }
    cfg.validate()?;
    let mut covered = vec![0usize; ds.len()];
    for f in folds {
        for &i in f {
            if i >= ds.len() {
                return Err(Error::contract(format!("fold index {i} out of range")));
            }
            covered[i] += 1;
        }
    }
    if let Some(i) = covered.iter().position(|&c| c != 1) {
        return Err(Error::contract(format!(
            "folds must cover every lesion exactly once; lesion {} appears {} times",
            ds.lesions()[i].lesion_id,
            covered[i]
        )));
    }
    // Class checks happen up front so no fold trains before a bad one is found.
    for (f, test) in folds.iter().enumerate() {
        let (train, _) = split_fold(ds, test);
        if !train.has_both_classes() {
            return Err(Error::contract(format!(
                "fold {f}: training set lacks a class (test lesions {:?})",
                test.iter().map(|&i| ds.lesions()[i].lesion_id.as_str()).collect::<Vec<_>>()
            )));
        }
    }

    let run_fold = |(f, test): (usize, &Vec<usize>)| -> Result<(FoldAudit, Vec<ScoreRecord>)> {
        let (train, held) = split_fold(ds, test);
        let audit = audit_fold(f, &train, &held);
        if !audit.passed() {
            return Err(Error::contract(format!("fold {f}: test lesions {:?} leaked into training", audit.leaked)));
        }
        let models = training::train(&train, model, cfg, seed::fold_seed(seed, f))?;
        let records = held
            .lesions()
            .iter()
            .map(|l| score_lesion(&models, l))
            .collect::<Result<Vec<_>>>()?;
        Ok((audit, records))
    };

    let results: Vec<(FoldAudit, Vec<ScoreRecord>)> = if threads <= 1 {
        folds.iter().enumerate().map(run_fold).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::contract(format!("cannot start {threads} worker threads: {e}")))?;
        pool.install(|| folds.par_iter().enumerate().map(run_fold).collect::<Result<_>>())?
    };

    let mut slots: Vec<Option<ScoreRecord>> = vec![None; ds.len()];
    let mut audits = Vec::with_capacity(folds.len());
    for ((audit, records), test) in results.into_iter().zip(folds) {
        for (r, &i) in records.into_iter().zip(test) {
            slots[i] = Some(r);
        }
        audits.push(audit);
    }
    Ok(CrossValidation {
        records: slots.into_iter().map(|r| r.expect("every lesion scored")).collect(),
        audits,
    })
}

/// Leave-one-out: one fold per lesion.
pub fn loo_run(ds: &Dataset, model: &ModelConfig, cfg: &TrainConfig, seed: u64, threads: usize) -> Result<CrossValidation> {
    cross_validate(ds, &loo_folds(ds.len()), model, cfg, seed, threads)
}

/// Folds for `eval.protocol`.
pub fn folds_for(ds: &Dataset, eval: &EvalConfig, seed: u64) -> Result<Vec<Vec<usize>>> {
    eval.validate()?;
    match eval.protocol {
        Protocol::Loo => Ok(loo_folds(ds.len())),
        Protocol::Kfold => kfold_folds(&ds.labels(), eval.folds, seed),
    }
}

pub fn write_scores(records: &[ScoreRecord], path: &Path) -> Result<()> {
    let mut w = crate::data::csv_writer(path)?;
    for r in records {
        w.serialize(r).map_err(|e| crate::data::csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRecord>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| crate::data::csv_error(path, e))?;
    let records: Vec<ScoreRecord> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| crate::data::csv_error(path, e))?;
    for r in &records {
        for s in [r.score_mg, r.score_us, r.score_fused] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::parse(path, format!("lesion {}: score {s} outside [0, 1]", r.lesion_id)));
            }
        }
    }
    Ok(records)
}

/// One cell of the experiment grid.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MatrixRow {
    pub method: Method,
    pub loss: LossKind,
    pub architecture: Architecture,
    pub mammography: f64,
    pub ultrasound: f64,
    pub combined: f64,
}

impl MatrixRow {
    pub fn aucs(&self) -> TripleAuc {
        TripleAuc {
            mammography: self.mammography,
            ultrasound: self.ultrasound,
            combined: self.combined,
        }
    }
}

/// Runs the method × loss (× architecture) grid with the same folds and
/// seed for every cell.
pub fn run_matrix(
    ds: &Dataset,
    folds: &[Vec<usize>],
    model: &ModelConfig,
    cfg: &TrainConfig,
    eval: &EvalConfig,
    seed: u64,
    threads: usize,
) -> Result<Vec<MatrixRow>> {
    let archs = if eval.matrix_architectures.is_empty() {
        vec![model.architecture]
    } else {
        eval.matrix_architectures.clone()
    };
    let mut rows = Vec::new();
    for method in [Method::Separate, Method::End2end] {
        for loss in [LossKind::Bce, LossKind::Lmcl] {
            for &architecture in &archs {
                let cell_cfg = TrainConfig {
                    method,
                    loss,
                    ..cfg.clone()
                };
                let cell_model = ModelConfig {
                    architecture,
                    ..*model
                };
                let cv = cross_validate(ds, folds, &cell_model, &cell_cfg, seed, threads)?;
                let auc = TripleRoc::from_records(&cv.records)?.aucs();
                rows.push(MatrixRow {
                    method,
                    loss,
                    architecture,
                    mammography: auc.mammography,
                    ultrasound: auc.ultrasound,
                    combined: auc.combined,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_matrix(rows: &[MatrixRow], path: &Path) -> Result<()> {
    let mut w = crate::data::csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| crate::data::csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn summary_uses_table_convention() {
        let t = TripleAuc {
            mammography: 0.756,
            ultrasound: 0.8,
            combined: 0.912,
        };
        assert_eq!(t.to_string(), "0.76/0.80/0.91");
    }

    #[test]
    fn kfold_partitions_and_stratifies() {
        let labels: Vec<Label> = (0..23)
            .map(|i| if i % 3 == 0 { Label::Malignant } else { Label::Benign })
            .collect();
        let folds = kfold_folds(&labels, 4, 9).unwrap();
        let mut all: Vec<usize> = folds.concat();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        for f in &folds {
            let m = f.iter().filter(|&&i| labels[i] == Label::Malignant).count();
            assert!((1..=3).contains(&m), "{f:?}");
        }
        assert_eq!(folds, kfold_folds(&labels, 4, 9).unwrap());
    }

    #[test]
    fn audit_flags_shared_ids() {
        let p = crate::models::Patch::filled(8, 0.5);
        let lesion = |id: &str| LesionPair::new(id, Label::Benign, vec![p.clone()], vec![p.clone()]).unwrap();
        let train = Dataset::new(vec![lesion("a"), lesion("b")], Split::Train).unwrap();
        let clean = Dataset::new(vec![lesion("c")], Split::Validation).unwrap();
        let dirty = Dataset::new(vec![lesion("b")], Split::Validation).unwrap();
        assert!(audit_fold(0, &train, &clean).passed());
        assert_eq!(audit_fold(1, &train, &dirty).leaked, vec!["b".to_string()]);
    }
}
