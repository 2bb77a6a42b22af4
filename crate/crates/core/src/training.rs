//! Training regimes: each CNN alone followed by the fusion network on frozen
//! descriptors (`separate`), or all three networks at once under a weighted
//! sum of their losses (`end2end`).
//!
//! Every run is a pure function of its inputs and a seed. Sub-seeds come from
//! [`seed::derive`] with the labels `"mg"`, `"us"` and `"fusion"`, and inside a
//! run `"init"` seeds the parameters while `"epochs"` drives shuffling,
//! augmentation and view sampling.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::augment::{apply_all, random_transform};
use crate::data::{Dataset, Label, LesionPair, Modality};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{LmclParams, LossKind};
use crate::models::{
    BoundCnn, BoundFusion, CnnArch, CnnParams, FusionParams, HeadKind, ModelConfig, Patch,
    DESCRIPTOR_WIDTH,
};
use crate::optim::{Adam, AdamConfig};
use crate::seed::{self, Rng};
use crate::tensor::Tensor;

/// Rows per inference batch; no effect on results.
const INFER_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Separate,
    End2end,
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Separate => "separate",
            Method::End2end => "end2end",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub method: Method,
    /// Passes over the appearances (separate) or lesions (end2end).
    pub epochs: usize,
    /// Passes over the descriptor pairs when training the fusion network alone.
    pub fusion_epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Randomly transformed copies of each appearance per epoch; 0 disables
    /// augmentation.
    pub augmentations_per_appearance: usize,
    /// Cap on mammography × ultrasound pairs per lesion for fusion training.
    pub max_pairs: usize,
    pub lmcl: LmclParams,
    /// Weights of the mammography, ultrasound and fusion terms of the
    /// end-to-end loss.
    pub loss_weights: [f64; 3],
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            loss: LossKind::Bce,
            method: Method::Separate,
            epochs: 60,
            fusion_epochs: 60,
            batch_size: 16,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            augmentations_per_appearance: 1,
            max_pairs: 9,
            lmcl: LmclParams::default(),
            loss_weights: [1.0, 1.0, 1.0],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("train.{key}"), reason))
            }
        };
        check(self.epochs > 0, "epochs", "must be positive")?;
        check(self.fusion_epochs > 0, "fusion_epochs", "must be positive")?;
        check(self.batch_size > 0, "batch_size", "must be positive")?;
        check(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate",
            "must be positive",
        )?;
        check((0.0..1.0).contains(&self.beta1), "beta1", "must lie in [0, 1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2", "must lie in [0, 1)")?;
        check(self.epsilon > 0.0, "epsilon", "must be positive")?;
        check(self.max_pairs > 0, "max_pairs", "must be positive")?;
        check(
            self.loss_weights.iter().all(|w| *w >= 0.0 && w.is_finite()),
            "loss_weights",
            "must be finite and non-negative",
        )?;
        self.lmcl.validate()
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }

    fn head(&self) -> HeadKind {
        HeadKind::for_loss(self.loss, &self.lmcl)
    }
}

/// One row of the training log. Stages that are not active leave their
/// column empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    pub loss_mg: Option<f64>,
    pub loss_us: Option<f64>,
    pub loss_fused: Option<f64>,
    pub total: f64,
}

pub fn write_log(rows: &[LogRow], path: &Path) -> Result<()> {
    let mut w = crate::data::csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(|e| crate::data::csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct SingleRun {
    pub params: CnnParams,
    /// Loss at initialisation followed by the mean minibatch loss per epoch.
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FusionRun {
    pub params: FusionParams,
    pub losses: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainedTriple {
    pub mg: CnnParams,
    pub us: CnnParams,
    pub fusion: FusionParams,
    pub log: Vec<LogRow>,
}

fn class_indices(labels: &[Label]) -> Vec<usize> {
    labels.iter().map(|l| l.index()).collect()
}

fn require_both_classes(labels: &[usize], op: &str) -> Result<()> {
    if labels.contains(&0) && labels.contains(&1) {
        Ok(())
    } else {
        Err(Error::contract(format!(
            "{op}: training data must contain both classes ({} samples)",
            labels.len()
        )))
    }
}

fn augmented(patch: &Patch, cfg: &TrainConfig, rng: &mut Rng) -> Result<Patch> {
    if cfg.augmentations_per_appearance == 0 {
        return Ok(patch.clone());
    }
    apply_all(patch, &random_transform(rng, patch.size()))
}

fn patch_vars(g: &mut Graph, patches: &[&Patch]) -> Result<Vec<Var>> {
    patches.iter().map(|p| g.constant(p.input_tensor())).collect()
}

/// Mean loss of a model over `patches` without augmentation.
fn cnn_eval_loss(params: &CnnParams, patches: &[&Patch], labels: &[usize], cfg: &TrainConfig) -> Result<f64> {
    let mut total = 0.0;
    for (chunk, y) in patches.chunks(INFER_BATCH).zip(labels.chunks(INFER_BATCH)) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false)?;
        let xs = patch_vars(&mut g, chunk)?;
        let out = bound.forward(&mut g, &xs)?;
        let loss = bound.head.loss(&mut g, out.descriptors, out.probs, y, &cfg.lmcl)?;
        total += g.value(loss).item()? * chunk.len() as f64;
    }
    Ok(total / patches.len() as f64)
}

/// Trains one CNN on labelled patches.
pub fn train_single(
    patches: &[&Patch],
    labels: &[Label],
    arch: &CnnArch,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<SingleRun> {
    cfg.validate()?;
    if patches.len() != labels.len() {
        return Err(Error::contract(format!(
            "train_single: {} patches but {} labels",
            patches.len(),
            labels.len()
        )));
    }
    let y = class_indices(labels);
    require_both_classes(&y, "train_single")?;
    let mut params = CnnParams::init(arch, cfg.head(), seed::derive(seed, "init"))?;
    let mut adam = Adam::new(cfg.adam(), &params);
    let mut rng = seed::rng(seed::derive(seed, "epochs"));
    let mut losses = vec![cnn_eval_loss(&params, patches, &y, cfg)?];
    let copies = cfg.augmentations_per_appearance.max(1);
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..patches.len())
            .flat_map(|i| std::iter::repeat_n(i, copies))
            .collect();
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| augmented(patches[i], cfg, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let by: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true)?;
            let xs = patch_vars(&mut g, &batch.iter().collect::<Vec<_>>())?;
            let out = bound.forward(&mut g, &xs)?;
            let loss = bound.head.loss(&mut g, out.descriptors, out.probs, &by, &cfg.lmcl)?;
            sum += g.value(loss).item()? * chunk.len() as f64;
            g.backward(loss)?;
            adam.step(&mut params, &g, &bound.vars());
        }
        losses.push(sum / order.len() as f64);
    }
    Ok(SingleRun { params, losses })
}

/// Descriptor and malignancy probability of each patch.
pub fn infer_cnn(params: &CnnParams, patches: &[&Patch]) -> Result<Vec<(Vec<f64>, f64)>> {
    let mut out = Vec::with_capacity(patches.len());
    for chunk in patches.chunks(INFER_BATCH) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false)?;
        let xs = patch_vars(&mut g, chunk)?;
        let o = bound.forward(&mut g, &xs)?;
        let desc = g.value(o.descriptors).data();
        let probs = g.value(o.probs).data();
        for (d, p) in desc.chunks(DESCRIPTOR_WIDTH).zip(probs.chunks(2)) {
            out.push((d.to_vec(), p[Label::Malignant.index()]));
        }
    }
    Ok(out)
}

/// Fused malignancy probability for each (mammography, ultrasound) pair.
pub fn infer_fusion(params: &FusionParams, pairs: &[(&[f64], &[f64])]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(pairs.len());
    for chunk in pairs.chunks(INFER_BATCH) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false)?;
        let (a, b) = pair_vars(&mut g, chunk)?;
        let o = bound.forward(&mut g, a, b)?;
        out.extend(g.value(o.probs).data().chunks(2).map(|p| p[Label::Malignant.index()]));
    }
    Ok(out)
}

fn pair_vars(g: &mut Graph, pairs: &[(&[f64], &[f64])]) -> Result<(Var, Var)> {
    let n = pairs.len();
    let mut mg = Vec::with_capacity(n * DESCRIPTOR_WIDTH);
    let mut us = Vec::with_capacity(n * DESCRIPTOR_WIDTH);
    for (a, b) in pairs {
        if a.len() != DESCRIPTOR_WIDTH || b.len() != DESCRIPTOR_WIDTH {
            return Err(Error::Dimension {
                op: "fusion_forward",
                lhs: vec![a.len(), b.len()],
                rhs: vec![DESCRIPTOR_WIDTH, DESCRIPTOR_WIDTH],
            });
        }
        mg.extend_from_slice(a);
        us.extend_from_slice(b);
    }
    let a = g.constant(Tensor::matrix(n, DESCRIPTOR_WIDTH, mg)?)?;
    let b = g.constant(Tensor::matrix(n, DESCRIPTOR_WIDTH, us)?)?;
    Ok((a, b))
}

/// One descriptor per appearance.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorRow {
    pub lesion_id: String,
    pub view_index: usize,
    pub descriptor: Vec<f64>,
    /// The CNN's malignancy probability for the same appearance.
    pub prob_malignant: f64,
}

/// Runs a frozen CNN over every appearance of `modality` in `ds`.
pub fn extract_descriptors(params: &CnnParams, ds: &Dataset, modality: Modality) -> Result<Vec<DescriptorRow>> {
    let mut keys = Vec::new();
    let mut patches = Vec::new();
    for l in ds.lesions() {
        for (v, p) in l.appearances(modality).iter().enumerate() {
            keys.push((l.lesion_id.as_str(), v));
            patches.push(p);
        }
    }
    Ok(infer_cnn(params, &patches)?
        .into_iter()
        .zip(keys)
        .map(|((descriptor, prob_malignant), (id, view_index))| DescriptorRow {
            lesion_id: id.to_string(),
            view_index,
            descriptor,
            prob_malignant,
        })
        .collect())
}

fn group_rows(rows: &[DescriptorRow]) -> (Vec<&str>, HashMap<&str, Vec<&DescriptorRow>>) {
    let mut order = Vec::new();
    let mut groups: HashMap<&str, Vec<&DescriptorRow>> = HashMap::new();
    for r in rows {
        groups
            .entry(r.lesion_id.as_str())
            .or_insert_with(|| {
                order.push(r.lesion_id.as_str());
                Vec::new()
            })
            .push(r);
    }
    (order, groups)
}

fn describe_difference(a: &HashSet<&str>, b: &HashSet<&str>) -> String {
    let mut only_a: Vec<_> = a.difference(b).copied().collect();
    let mut only_b: Vec<_> = b.difference(a).copied().collect();
    only_a.sort_unstable();
    only_b.sort_unstable();
    format!("only in mammography: {only_a:?}; only in ultrasound: {only_b:?}")
}

/// Builds the fusion training pairs: per lesion, the Cartesian product of its
/// mammography and ultrasound rows, reduced to a seeded subset of `max_pairs`
/// when larger.
fn fusion_pairs<'a>(
    mg: &'a [DescriptorRow],
    us: &'a [DescriptorRow],
    labels: &HashMap<String, Label>,
    max_pairs: usize,
    rng: &mut Rng,
) -> Result<Vec<(&'a [f64], &'a [f64], usize)>> {
    let (order, mg_groups) = group_rows(mg);
    let (_, us_groups) = group_rows(us);
    let mg_ids: HashSet<&str> = mg_groups.keys().copied().collect();
    let us_ids: HashSet<&str> = us_groups.keys().copied().collect();
    if mg_ids != us_ids {
        return Err(Error::contract(format!(
            "train_fusion: descriptor tables cover different lesions ({})",
            describe_difference(&mg_ids, &us_ids)
        )));
    }
    let mut pairs = Vec::new();
    for id in order {
        let label = labels
            .get(id)
            .ok_or_else(|| Error::contract(format!("train_fusion: no label for lesion {id}")))?;
        let (a, b) = (&mg_groups[id], &us_groups[id]);
        let mut cells: Vec<(usize, usize)> = (0..a.len())
            .flat_map(|i| (0..b.len()).map(move |j| (i, j)))
            .collect();
        if cells.len() > max_pairs {
            cells.shuffle(rng);
            cells.truncate(max_pairs);
            cells.sort_unstable();
        }
        pairs.extend(
            cells
                .into_iter()
                .map(|(i, j)| (a[i].descriptor.as_slice(), b[j].descriptor.as_slice(), label.index())),
        );
    }
    Ok(pairs)
}

fn fusion_batch_loss(
    g: &mut Graph,
    bound: &BoundFusion,
    batch: &[(&[f64], &[f64])],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Var> {
    let (a, b) = pair_vars(g, batch)?;
    let out = bound.forward(g, a, b)?;
    bound.head.loss(g, out.penultimate, out.probs, labels, &cfg.lmcl)
}

/// Trains the fusion network on frozen descriptors. `labels` maps lesion ids
/// to their class; both tables must cover the same lesions.
pub fn train_fusion(
    mg: &[DescriptorRow],
    us: &[DescriptorRow],
    labels: &HashMap<String, Label>,
    cfg: &TrainConfig,
    normalize: bool,
    seed: u64,
) -> Result<FusionRun> {
    cfg.validate()?;
    let mut rng = seed::rng(seed::derive(seed, "epochs"));
    let pairs = fusion_pairs(mg, us, labels, cfg.max_pairs, &mut rng)?;
    let y: Vec<usize> = pairs.iter().map(|p| p.2).collect();
    require_both_classes(&y, "train_fusion")?;
    let views: Vec<(&[f64], &[f64])> = pairs.iter().map(|p| (p.0, p.1)).collect();
    let mut params = FusionParams::init(cfg.head(), normalize, seed::derive(seed, "init"));
    let mut adam = Adam::new(cfg.adam(), &params);

    let mut init = 0.0;
    for (chunk, cy) in views.chunks(INFER_BATCH).zip(y.chunks(INFER_BATCH)) {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false)?;
        let loss = fusion_batch_loss(&mut g, &bound, chunk, cy, cfg)?;
        init += g.value(loss).item()? * chunk.len() as f64;
    }
    let mut losses = vec![init / views.len() as f64];

    let mut order: Vec<usize> = (0..views.len()).collect();
    for _ in 0..cfg.fusion_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<_> = chunk.iter().map(|&i| views[i]).collect();
            let by: Vec<usize> = chunk.iter().map(|&i| y[i]).collect();
            let mut g = Graph::new();
            let bound = params.bind(&mut g, true)?;
            let loss = fusion_batch_loss(&mut g, &bound, &batch, &by, cfg)?;
            sum += g.value(loss).item()? * chunk.len() as f64;
            g.backward(loss)?;
            adam.step(&mut params, &g, &bound.vars());
        }
        losses.push(sum / views.len() as f64);
    }
    Ok(FusionRun { params, losses })
}

fn modality_samples(ds: &Dataset, modality: Modality) -> (Vec<&Patch>, Vec<Label>) {
    ds.lesions()
        .iter()
        .flat_map(|l| l.appearances(modality).iter().map(move |p| (p, l.label)))
        .unzip()
}

fn check_trainable(ds: &Dataset) -> Result<usize> {
    let size = ds
        .patch_size()
        .ok_or_else(|| Error::contract("cannot train on an empty dataset"))?;
    if !ds.has_both_classes() {
        return Err(Error::contract(format!(
            "training set of {} lesions lacks a class",
            ds.len()
        )));
    }
    Ok(size)
}

/// Two-stage training: both CNNs, then the fusion network on their frozen
/// descriptors.
pub fn train_separate(ds: &Dataset, model: &ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<TrainedTriple> {
    let size = check_trainable(ds)?;
    let arch = CnnArch::new(model.architecture, size);
    let mut runs = Vec::with_capacity(2);
    for (modality, label) in [(Modality::Mammography, "mg"), (Modality::Ultrasound, "us")] {
        let (patches, labels) = modality_samples(ds, modality);
        runs.push(train_single(&patches, &labels, &arch, cfg, seed::derive(seed, label))?);
    }
    let us = runs.pop().expect("two runs");
    let mg = runs.pop().expect("two runs");
    let labels: HashMap<String, Label> = ds
        .lesions()
        .iter()
        .map(|l| (l.lesion_id.clone(), l.label))
        .collect();
    let mg_rows = extract_descriptors(&mg.params, ds, Modality::Mammography)?;
    let us_rows = extract_descriptors(&us.params, ds, Modality::Ultrasound)?;
    let fusion = train_fusion(
        &mg_rows,
        &us_rows,
        &labels,
        cfg,
        model.normalize_descriptors,
        seed::derive(seed, "fusion"),
    )?;
    let mut log: Vec<LogRow> = mg
        .losses
        .iter()
        .zip(&us.losses)
        .enumerate()
        .map(|(epoch, (&a, &b))| LogRow {
            epoch,
            loss_mg: Some(a),
            loss_us: Some(b),
            loss_fused: None,
            total: a + b,
        })
        .collect();
    log.extend(fusion.losses.iter().enumerate().map(|(epoch, &f)| LogRow {
        epoch,
        loss_mg: None,
        loss_us: None,
        loss_fused: Some(f),
        total: f,
    }));
    Ok(TrainedTriple {
        mg: mg.params,
        us: us.params,
        fusion: fusion.params,
        log,
    })
}

/// The three models bound onto one graph.
pub struct BoundTriple {
    pub mg: BoundCnn,
    pub us: BoundCnn,
    pub fusion: BoundFusion,
}

impl BoundTriple {
    pub fn bind(g: &mut Graph, mg: &CnnParams, us: &CnnParams, fusion: &FusionParams, trainable: bool) -> Result<Self> {
        Ok(BoundTriple {
            mg: mg.bind(g, trainable)?,
            us: us.bind(g, trainable)?,
            fusion: fusion.bind(g, trainable)?,
        })
    }
}

/// Scalar loss nodes of one end-to-end step.
#[derive(Debug, Clone, Copy)]
pub struct EndToEndLoss {
    pub mg: Var,
    pub us: Var,
    pub fused: Var,
    pub total: Var,
}

/// Shared forward pass over a batch of (mammography, ultrasound) patch pairs
/// of the same lesions, returning the three losses and their weighted sum.
pub fn end2end_loss(
    g: &mut Graph,
    bound: &BoundTriple,
    mg: &[&Patch],
    us: &[&Patch],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<EndToEndLoss> {
    let xm = patch_vars(g, mg)?;
    let xu = patch_vars(g, us)?;
    let om = bound.mg.forward(g, &xm)?;
    let ou = bound.us.forward(g, &xu)?;
    let of = bound.fusion.forward(g, om.descriptors, ou.descriptors)?;
    let l_mg = bound.mg.head.loss(g, om.descriptors, om.probs, labels, &cfg.lmcl)?;
    let l_us = bound.us.head.loss(g, ou.descriptors, ou.probs, labels, &cfg.lmcl)?;
    let l_f = bound.fusion.head.loss(g, of.penultimate, of.probs, labels, &cfg.lmcl)?;
    let [w_mg, w_us, w_f] = cfg.loss_weights;
    let a = g.scale(l_mg, w_mg)?;
    let b = g.scale(l_us, w_us)?;
    let c = g.scale(l_f, w_f)?;
    let ab = g.add(a, b)?;
    let total = g.add(ab, c)?;
    Ok(EndToEndLoss {
        mg: l_mg,
        us: l_us,
        fused: l_f,
        total,
    })
}

#[derive(Default)]
struct LossSums {
    mg: f64,
    us: f64,
    fused: f64,
    total: f64,
    n: usize,
}

impl LossSums {
    fn add(&mut self, g: &Graph, l: &EndToEndLoss, n: usize) -> Result<()> {
        let w = n as f64;
        self.mg += g.value(l.mg).item()? * w;
        self.us += g.value(l.us).item()? * w;
        self.fused += g.value(l.fused).item()? * w;
        self.total += g.value(l.total).item()? * w;
        self.n += n;
        Ok(())
    }

    fn row(&self, epoch: usize) -> LogRow {
        let n = self.n as f64;
        LogRow {
            epoch,
            loss_mg: Some(self.mg / n),
            loss_us: Some(self.us / n),
            loss_fused: Some(self.fused / n),
            total: self.total / n,
        }
    }
}

/// One epoch of end-to-end samples as (lesion, mg view, us view). Every
/// appearance of both modalities is visited once; the views of a lesion are
/// paired through independent shuffles, the shorter list wrapping around.
fn epoch_pairs(lesions: &[LesionPair], rng: &mut Rng) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (i, l) in lesions.iter().enumerate() {
        let mut vm: Vec<usize> = (0..l.appearances(Modality::Mammography).len()).collect();
        let mut vu: Vec<usize> = (0..l.appearances(Modality::Ultrasound).len()).collect();
        vm.shuffle(rng);
        vu.shuffle(rng);
        let n = vm.len().max(vu.len());
        out.extend((0..n).map(|k| (i, vm[k % vm.len()], vu[k % vu.len()])));
    }
    out
}

/// End-to-end training: every batch entry is one mammography and one
/// ultrasound appearance of the same lesion, and each step updates all three
/// networks on the weighted loss sum.
pub fn train_end2end(ds: &Dataset, model: &ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<TrainedTriple> {
    cfg.validate()?;
    let size = check_trainable(ds)?;
    let arch = CnnArch::new(model.architecture, size);
    let head = cfg.head();
    let mut mg = CnnParams::init(&arch, head, seed::derive(seed::derive(seed, "mg"), "init"))?;
    let mut us = CnnParams::init(&arch, head, seed::derive(seed::derive(seed, "us"), "init"))?;
    let mut fusion = FusionParams::init(
        head,
        model.normalize_descriptors,
        seed::derive(seed::derive(seed, "fusion"), "init"),
    );
    let mut adams = [
        Adam::new(cfg.adam(), &mg),
        Adam::new(cfg.adam(), &us),
        Adam::new(cfg.adam(), &fusion),
    ];
    let mut rng = seed::rng(seed::derive(seed, "epochs"));
    let lesions = ds.lesions();
    let y: Vec<usize> = lesions.iter().map(|l| l.label.index()).collect();

    // Epoch 0: first view of each modality, no augmentation.
    let mut sums = LossSums::default();
    for (chunk, cy) in lesions.chunks(INFER_BATCH).zip(y.chunks(INFER_BATCH)) {
        let mut g = Graph::new();
        let bound = BoundTriple::bind(&mut g, &mg, &us, &fusion, false)?;
        let first = |m: Modality| chunk.iter().map(|l| &l.appearances(m)[0]).collect::<Vec<_>>();
        let l = end2end_loss(&mut g, &bound, &first(Modality::Mammography), &first(Modality::Ultrasound), cy, cfg)?;
        sums.add(&g, &l, chunk.len())?;
    }
    let mut log = vec![sums.row(0)];

    for epoch in 1..=cfg.epochs {
        let mut order = epoch_pairs(lesions, &mut rng);
        order.shuffle(&mut rng);
        let mut sums = LossSums::default();
        for chunk in order.chunks(cfg.batch_size) {
            let mut xm = Vec::with_capacity(chunk.len());
            let mut xu = Vec::with_capacity(chunk.len());
            for &(i, vm, vu) in chunk {
                let l = &lesions[i];
                xm.push(augmented(&l.appearances(Modality::Mammography)[vm], cfg, &mut rng)?);
                xu.push(augmented(&l.appearances(Modality::Ultrasound)[vu], cfg, &mut rng)?);
            }
            let by: Vec<usize> = chunk.iter().map(|&(i, _, _)| y[i]).collect();
            let mut g = Graph::new();
            let bound = BoundTriple::bind(&mut g, &mg, &us, &fusion, true)?;
            let l = end2end_loss(
                &mut g,
                &bound,
                &xm.iter().collect::<Vec<_>>(),
                &xu.iter().collect::<Vec<_>>(),
                &by,
                cfg,
            )?;
            sums.add(&g, &l, chunk.len())?;
            g.backward(l.total)?;
            adams[0].step(&mut mg, &g, &bound.mg.vars());
            adams[1].step(&mut us, &g, &bound.us.vars());
            adams[2].step(&mut fusion, &g, &bound.fusion.vars());
        }
        log.push(sums.row(epoch));
    }
    Ok(TrainedTriple { mg, us, fusion, log })
}

/// Dispatches on `cfg.method`.
pub fn train(ds: &Dataset, model: &ModelConfig, cfg: &TrainConfig, seed: u64) -> Result<TrainedTriple> {
    cfg.validate()?;
    match cfg.method {
        Method::Separate => train_separate(ds, model, cfg, seed),
        Method::End2end => train_end2end(ds, model, cfg, seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Architecture;

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            fusion_epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    fn blob(size: usize, bright: bool) -> Patch {
        let c = size as f64 / 2.0;
        let data = (0..size * size)
            .map(|i| {
                let (r, col) = ((i / size) as f64, (i % size) as f64);
                let inside = (r - c).hypot(col - c) < size as f64 / 4.0;
                if inside == bright { 0.9 } else { 0.1 }
            })
            .collect();
        Patch::new(size, data).unwrap()
    }

    #[test]
    fn single_class_is_rejected() {
        let p = blob(16, true);
        let arch = CnnArch::new(Architecture::Basic, 16);
        let err = train_single(&[&p, &p], &[Label::Benign; 2], &arch, &quick(), 0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)), "{err}");
    }

    #[test]
    fn config_validation_names_keys() {
        let cfg = TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("train.batch_size"));
        let cfg = TrainConfig {
            lmcl: LmclParams { s: 30.0, m: 1.5 },
            ..TrainConfig::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("train.lmcl.m"));
    }

    fn row(id: &str, v: usize, x: f64) -> DescriptorRow {
        DescriptorRow {
            lesion_id: id.into(),
            view_index: v,
            descriptor: vec![x; DESCRIPTOR_WIDTH],
            prob_malignant: 0.5,
        }
    }

    #[test]
    fn fusion_rejects_mismatched_lesion_sets() {
        let labels: HashMap<String, Label> =
            [("a".to_string(), Label::Benign), ("b".to_string(), Label::Malignant)].into();
        let mg = vec![row("a", 0, 0.1), row("b", 0, 0.2)];
        let us = vec![row("a", 0, 0.1), row("c", 0, 0.2)];
        let err = train_fusion(&mg, &us, &labels, &quick(), false, 0).unwrap_err().to_string();
        assert!(err.contains("\"b\"") && err.contains("\"c\""), "{err}");
    }

    #[test]
    fn pairs_are_cartesian_and_capped() {
        let labels: HashMap<String, Label> = [("a".to_string(), Label::Benign)].into();
        let mg: Vec<_> = (0..4).map(|v| row("a", v, v as f64)).collect();
        let us: Vec<_> = (0..3).map(|v| row("a", v, 10.0 + v as f64)).collect();
        let mut rng = seed::rng(0);
        assert_eq!(fusion_pairs(&mg, &us, &labels, 100, &mut rng).unwrap().len(), 12);
        let capped = fusion_pairs(&mg, &us, &labels, 9, &mut rng).unwrap();
        assert_eq!(capped.len(), 9);
        let distinct: HashSet<(u64, u64)> = capped
            .iter()
            .map(|(a, b, _)| (a[0].to_bits(), b[0].to_bits()))
            .collect();
        assert_eq!(distinct.len(), 9);
    }
}
