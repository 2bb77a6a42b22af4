//! Training objectives: binary cross-entropy over softmax probabilities and
//! the large-margin cosine loss (LMCL).
//!
//! Both return a scalar [`Var`] on the caller's graph so gradients flow back
//! into whatever produced the probabilities or features.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Probabilities are clamped into `[PROB_FLOOR, 1 - PROB_FLOOR]` before the log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Which objective a model is trained with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Bce,
    Lmcl,
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            LossKind::Bce => "bce",
            LossKind::Lmcl => "lmcl",
        })
    }
}

/// Scale `s` and margin `m` of the cosine loss. The class anchors are model
/// parameters and are passed separately.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmclParams {
    #[serde(default = "LmclParams::default_s")]
    pub s: f64,
    #[serde(default = "LmclParams::default_m")]
    pub m: f64,
}

impl LmclParams {
    fn default_s() -> f64 {
        30.0
    }

    fn default_m() -> f64 {
        0.35
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.s > 0.0 && self.s.is_finite()) {
            return Err(Error::config("train.lmcl.s", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.m) {
            return Err(Error::config("train.lmcl.m", "must lie in [0, 1)"));
        }
        Ok(())
    }
}

impl Default for LmclParams {
    fn default() -> Self {
        LmclParams {
            s: Self::default_s(),
            m: Self::default_m(),
        }
    }
}

fn check_labels(op: &str, labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&l| l >= classes) {
        Some(bad) => Err(Error::contract(format!(
            "{op}: label {bad} outside 0..{classes}"
        ))),
        None => Ok(()),
    }
}

/// Mean over the batch of `-ln p(true class)`, for `probs` of shape batch×2.
pub fn bce_loss(g: &mut Graph, probs: Var, labels: &[usize]) -> Result<Var> {
    let shape = g.shape(probs).to_vec();
    if shape.len() != 2 || shape[1] != 2 || shape[0] != labels.len() {
        return Err(Error::Dimension {
            op: "bce_loss",
            lhs: shape,
            rhs: vec![labels.len(), 2],
        });
    }
    check_labels("bce_loss", labels, 2)?;
    for (r, row) in g.value(probs).data().chunks(2).enumerate() {
        if (row[0] + row[1] - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!(
                "bce_loss: probability row {r} sums to {}",
                row[0] + row[1]
            )));
        }
    }
    let picked = g.gather_rows(probs, labels)?;
    let clamped = g.clamp(picked, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let logs = g.log(clamped)?;
    let mean = g.mean(logs)?;
    g.scale(mean, -1.0)
}

/// Cosines between each L2-normalised feature row and each L2-normalised
/// anchor row: batch×d and k×d give batch×k.
pub fn cosines(g: &mut Graph, features: Var, anchors: Var) -> Result<Var> {
    let (fs, anchor_shape) = (g.shape(features).to_vec(), g.shape(anchors).to_vec());
    if fs.len() != 2 || anchor_shape.len() != 2 || fs[1] != anchor_shape[1] || fs[1] == 0 {
        return Err(Error::Dimension {
            op: "lmcl",
            lhs: fs,
            rhs: anchor_shape,
        });
    }
    let f = g.row_normalize(features).map_err(|e| degenerate(e, "feature"))?;
    let w = g.row_normalize(anchors).map_err(|e| degenerate(e, "class anchor"))?;
    g.matmul_nt(f, w)
}

fn degenerate(e: Error, what: &str) -> Error {
    match e {
        Error::Degenerate { reason, .. } => Error::Degenerate {
            op: "lmcl_loss",
            reason: format!("{what} {reason}"),
        },
        other => other,
    }
}

/// Large-margin cosine loss: cross-entropy over `s·cosθ_j`, with `m`
/// subtracted from the true class cosine before scaling.
pub fn lmcl_loss(
    g: &mut Graph,
    features: Var,
    anchors: Var,
    labels: &[usize],
    params: &LmclParams,
) -> Result<Var> {
    params.validate()?;
    let batch = g.shape(features).first().copied().unwrap_or(0);
    if batch != labels.len() {
        return Err(Error::Dimension {
            op: "lmcl_loss",
            lhs: g.shape(features).to_vec(),
            rhs: vec![labels.len()],
        });
    }
    let cos = cosines(g, features, anchors)?;
    let k = g.shape(cos)[1];
    check_labels("lmcl_loss", labels, k)?;
    let mut margin = Tensor::zeros(&[batch, k]);
    for (r, &l) in labels.iter().enumerate() {
        margin.data_mut()[r * k + l] = -params.m;
    }
    let shifted = g.add_const(cos, &margin)?;
    let logits = g.scale(shifted, params.s)?;
    let log_probs = g.log_softmax_rows(logits)?;
    let picked = g.gather_rows(log_probs, labels)?;
    let mean = g.mean(picked)?;
    g.scale(mean, -1.0)
}
