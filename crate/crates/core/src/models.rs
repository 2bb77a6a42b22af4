//! Single-modality CNN and the fully connected fusion network.
//!
//! Parameters are plain [`Tensor`]s owned by [`CnnParams`] / [`FusionParams`].
//! To run a forward pass they are bound onto a [`Graph`] as leaves, which
//! yields a `Bound*` view of graph handles; gradients for an optimizer step
//! are read back from those handles in [`Parameters::tensors`] order.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{self, LossKind, LmclParams};
use crate::seed;
use crate::tensor::Tensor;

/// Width of the penultimate CNN layer.
pub const DESCRIPTOR_WIDTH: usize = 512;
/// Input width followed by hidden widths of the fusion network.
pub const FUSION_WIDTHS: [usize; 7] = [1024, 512, 256, 128, 64, 32, 16];
pub const NUM_CLASSES: usize = 2;
/// Gain applied to the output layer's init bound so fresh models predict
/// close to uniform.
const HEAD_GAIN: f64 = 0.1;

/// Square grayscale image patch with values in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    size: usize,
    data: Vec<f64>,
}

impl Patch {
    pub fn new(size: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != size * size {
            return Err(Error::Dimension {
                op: "patch",
                lhs: vec![size, size],
                rhs: vec![data.len()],
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("patch value {v} outside [0, 1]")));
        }
        Ok(Patch { size, data })
    }

    pub fn filled(size: usize, value: f64) -> Self {
        Patch {
            size,
            data: vec![value.clamp(0.0, 1.0); size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.size + col]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![1, self.size, self.size], self.data.clone()).expect("patch shape")
    }

    /// Network input: the patch shifted to zero mean and scaled to unit
    /// variance, as a 1×S×S tensor. Flat patches are only centred.
    pub fn input_tensor(&self) -> Tensor {
        let n = self.data.len().max(1) as f64;
        let mean = self.data.iter().sum::<f64>() / n;
        let var = self.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
        let data = self.data.iter().map(|v| (v - mean) * inv).collect();
        Tensor::new(vec![1, self.size, self.size], data).expect("patch shape")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// Three conv blocks with 16/32/64 channels.
    #[default]
    Basic,
    /// Same depth, doubled channel widths.
    Deeper,
}

impl Architecture {
    pub fn channels(self) -> Vec<usize> {
        match self {
            Architecture::Basic => vec![16, 32, 64],
            Architecture::Deeper => vec![32, 64, 128],
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Architecture::Basic => "basic",
            Architecture::Deeper => "deeper",
        })
    }
}

/// Model section of a run config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub architecture: Architecture,
    /// L2-normalise each modality's descriptor before fusion.
    pub normalize_descriptors: bool,
}

/// Concrete CNN layout: `conv k×k (same padding) → ReLU → maxpool 2` per
/// entry of `channels`, then flatten → dense 512 + ReLU → head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnArch {
    pub patch_size: usize,
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl CnnArch {
    pub fn new(arch: Architecture, patch_size: usize) -> Self {
        CnnArch {
            patch_size,
            channels: arch.channels(),
            kernel: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.kernel % 2 == 0 {
            return Err(Error::contract(format!("unsupported CNN layout {self:?}")));
        }
        if self.spatial_after_convs() == 0 {
            return Err(Error::contract(format!(
                "patch size {} too small for {} pooling stages",
                self.patch_size,
                self.channels.len()
            )));
        }
        Ok(())
    }

    fn spatial_after_convs(&self) -> usize {
        self.channels.iter().fold(self.patch_size, |s, _| s / 2)
    }

    pub fn flatten_len(&self) -> usize {
        let s = self.spatial_after_convs();
        self.channels.last().copied().unwrap_or(0) * s * s
    }

    /// Spatial extent of conv block `layer`'s activation (before pooling).
    pub fn activation_size(&self, layer: usize) -> usize {
        (0..layer).fold(self.patch_size, |s, _| s / 2)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kernels: Tensor,
    pub bias: Tensor,
}

/// Output layer. A linear head is followed by softmax; a cosine head holds
/// LMCL class anchors and predicts `softmax(s · cosθ_j)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Head {
    Linear(DenseLayer),
    Cosine { anchors: Tensor, scale: f64 },
}

impl Head {
    pub fn kind(&self) -> LossKind {
        match self {
            Head::Linear(_) => LossKind::Bce,
            Head::Cosine { .. } => LossKind::Lmcl,
        }
    }

    pub fn scale(&self) -> Option<f64> {
        match self {
            Head::Linear(_) => None,
            Head::Cosine { scale, .. } => Some(*scale),
        }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Head::Linear(d) => vec![&d.weights, &d.bias],
            Head::Cosine { anchors, .. } => vec![anchors],
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Head::Linear(d) => vec![&mut d.weights, &mut d.bias],
            Head::Cosine { anchors, .. } => vec![anchors],
        }
    }

    fn names(&self) -> Vec<String> {
        match self {
            Head::Linear(_) => vec!["head.weights".into(), "head.bias".into()],
            Head::Cosine { .. } => vec!["head.anchors".into()],
        }
    }

    fn init(kind: HeadKind, fan_in: usize, rng: &mut seed::Rng) -> Head {
        match kind {
            HeadKind::Linear => Head::Linear(dense_init(fan_in, NUM_CLASSES, HEAD_GAIN, rng)),
            HeadKind::Cosine { scale } => Head::Cosine {
                anchors: uniform(&[NUM_CLASSES, fan_in], fan_in, 1.0, rng),
                scale,
            },
        }
    }

    fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundHead> {
        Ok(match self {
            Head::Linear(d) => {
                let (w, b) = bind_pair(g, &d.weights, &d.bias, trainable)?;
                BoundHead::Linear { weights: w, bias: b }
            }
            Head::Cosine { anchors, scale } => BoundHead::Cosine {
                anchors: leaf(g, anchors, trainable)?,
                scale: *scale,
            },
        })
    }
}

/// Which head a freshly initialised model gets.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadKind {
    Linear,
    Cosine { scale: f64 },
}

impl HeadKind {
    pub fn for_loss(loss: LossKind, lmcl: &LmclParams) -> Self {
        match loss {
            LossKind::Bce => HeadKind::Linear,
            LossKind::Lmcl => HeadKind::Cosine { scale: lmcl.s },
        }
    }
}

/// Flat view of a model's tensors, in a fixed order shared with the
/// corresponding `Bound*::vars`.
pub trait Parameters {
    fn tensors(&self) -> Vec<&Tensor>;
    fn tensors_mut(&mut self) -> Vec<&mut Tensor>;
    fn names(&self) -> Vec<String>;

    fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnParams {
    pub arch: CnnArch,
    pub convs: Vec<ConvLayer>,
    pub descriptor: DenseLayer,
    pub head: Head,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionParams {
    /// Six dense+ReLU layers, 1024→512→…→16.
    pub hidden: Vec<DenseLayer>,
    pub head: Head,
    /// L2-normalise each modality's descriptor before concatenation.
    pub normalize_inputs: bool,
    pub seed: u64,
}

fn uniform(shape: &[usize], fan_in: usize, gain: f64, rng: &mut seed::Rng) -> Tensor {
    let bound = gain * (6.0 / fan_in as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

fn dense_init(fan_in: usize, fan_out: usize, gain: f64, rng: &mut seed::Rng) -> DenseLayer {
    DenseLayer {
        weights: uniform(&[fan_out, fan_in], fan_in, gain, rng),
        bias: Tensor::zeros(&[fan_out]),
    }
}

impl CnnParams {
    /// Fan-in scaled uniform weights (|w| ≤ √(6/fan_in)), zero biases.
    pub fn init(arch: &CnnArch, head: HeadKind, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::rng(seed);
        let mut convs = Vec::with_capacity(arch.channels.len());
        let mut c_in = 1;
        for &c_out in &arch.channels {
            let fan_in = c_in * arch.kernel * arch.kernel;
            convs.push(ConvLayer {
                kernels: uniform(&[c_out, c_in, arch.kernel, arch.kernel], fan_in, 1.0, &mut rng),
                bias: Tensor::zeros(&[c_out]),
            });
            c_in = c_out;
        }
        let descriptor = dense_init(arch.flatten_len(), DESCRIPTOR_WIDTH, 1.0, &mut rng);
        let head = Head::init(head, DESCRIPTOR_WIDTH, &mut rng);
        Ok(CnnParams {
            arch: arch.clone(),
            convs,
            descriptor,
            head,
            seed,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundCnn> {
        let convs = self
            .convs
            .iter()
            .map(|c| bind_pair(g, &c.kernels, &c.bias, trainable))
            .collect::<Result<_>>()?;
        let descriptor = bind_pair(g, &self.descriptor.weights, &self.descriptor.bias, trainable)?;
        Ok(BoundCnn {
            arch: self.arch.clone(),
            convs,
            descriptor,
            head: self.head.bind(g, trainable)?,
        })
    }
}

impl Parameters for CnnParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for c in &self.convs {
            out.push(&c.kernels);
            out.push(&c.bias);
        }
        out.push(&self.descriptor.weights);
        out.push(&self.descriptor.bias);
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for c in &mut self.convs {
            out.push(&mut c.kernels);
            out.push(&mut c.bias);
        }
        out.push(&mut self.descriptor.weights);
        out.push(&mut self.descriptor.bias);
        out.extend(self.head.tensors_mut());
        out
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.convs.len() {
            out.push(format!("conv{i}.kernels"));
            out.push(format!("conv{i}.bias"));
        }
        out.push("descriptor.weights".into());
        out.push("descriptor.bias".into());
        out.extend(self.head.names());
        out
    }
}

impl FusionParams {
    pub fn init(head: HeadKind, normalize_inputs: bool, seed: u64) -> Self {
        let mut rng = seed::rng(seed);
        let hidden = FUSION_WIDTHS
            .windows(2)
            .map(|w| dense_init(w[0], w[1], 1.0, &mut rng))
            .collect();
        let head = Head::init(head, FUSION_WIDTHS[FUSION_WIDTHS.len() - 1], &mut rng);
        FusionParams {
            hidden,
            head,
            normalize_inputs,
            seed,
        }
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<BoundFusion> {
        let hidden = self
            .hidden
            .iter()
            .map(|d| bind_pair(g, &d.weights, &d.bias, trainable))
            .collect::<Result<_>>()?;
        Ok(BoundFusion {
            hidden,
            head: self.head.bind(g, trainable)?,
            normalize_inputs: self.normalize_inputs,
        })
    }
}

impl Parameters for FusionParams {
    fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for d in &self.hidden {
            out.push(&d.weights);
            out.push(&d.bias);
        }
        out.extend(self.head.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for d in &mut self.hidden {
            out.push(&mut d.weights);
            out.push(&mut d.bias);
        }
        out.extend(self.head.tensors_mut());
        out
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.hidden.len() {
            out.push(format!("fc{i}.weights"));
            out.push(format!("fc{i}.bias"));
        }
        out.extend(self.head.names());
        out
    }
}

fn leaf(g: &mut Graph, t: &Tensor, trainable: bool) -> Result<Var> {
    if trainable {
        g.param(t.clone())
    } else {
        g.constant(t.clone())
    }
}

fn bind_pair(g: &mut Graph, w: &Tensor, b: &Tensor, trainable: bool) -> Result<(Var, Var)> {
    Ok((leaf(g, w, trainable)?, leaf(g, b, trainable)?))
}

#[derive(Debug, Clone, Copy)]
pub enum BoundHead {
    Linear { weights: Var, bias: Var },
    Cosine { anchors: Var, scale: f64 },
}

impl BoundHead {
    fn vars(&self) -> Vec<Var> {
        match *self {
            BoundHead::Linear { weights, bias } => vec![weights, bias],
            BoundHead::Cosine { anchors, .. } => vec![anchors],
        }
    }

    /// Class logits (batch×2) for a batch of feature rows.
    pub fn logits(&self, g: &mut Graph, features: Var) -> Result<Var> {
        match *self {
            BoundHead::Linear { weights, bias } => g.linear_rows(features, weights, bias),
            BoundHead::Cosine { anchors, scale } => {
                let cos = losses::cosines(g, features, anchors)?;
                g.scale(cos, scale)
            }
        }
    }

    /// Training loss for a batch. A linear head is scored by BCE on its
    /// softmax probabilities; a cosine head by LMCL on the raw features.
    pub fn loss(
        &self,
        g: &mut Graph,
        features: Var,
        probs: Var,
        labels: &[usize],
        lmcl: &LmclParams,
    ) -> Result<Var> {
        match *self {
            BoundHead::Linear { .. } => losses::bce_loss(g, probs, labels),
            BoundHead::Cosine { anchors, scale } => {
                let params = LmclParams { s: scale, m: lmcl.m };
                losses::lmcl_loss(g, features, anchors, labels, &params)
            }
        }
    }
}

/// A [`CnnParams`] bound onto a graph.
#[derive(Debug, Clone)]
pub struct BoundCnn {
    arch: CnnArch,
    convs: Vec<(Var, Var)>,
    descriptor: (Var, Var),
    pub head: BoundHead,
}

#[derive(Debug, Clone)]
pub struct CnnOutput {
    /// Per sample, the post-ReLU activation of each conv block before pooling.
    pub conv_activations: Vec<Vec<Var>>,
    /// batch×512
    pub descriptors: Var,
    /// batch×2
    pub logits: Var,
    /// batch×2
    pub probs: Var,
}

impl BoundCnn {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(k, b) in &self.convs {
            out.push(k);
            out.push(b);
        }
        out.push(self.descriptor.0);
        out.push(self.descriptor.1);
        out.extend(self.head.vars());
        out
    }

    /// Runs a batch of 1×S×S patches through the network.
    pub fn forward(&self, g: &mut Graph, patches: &[Var]) -> Result<CnnOutput> {
        if patches.is_empty() {
            return Err(Error::contract("cnn forward on an empty batch"));
        }
        let expected = [1, self.arch.patch_size, self.arch.patch_size];
        let pad = self.arch.kernel / 2;
        let mut flats = Vec::with_capacity(patches.len());
        let mut conv_activations = Vec::with_capacity(patches.len());
        for &patch in patches {
            if g.shape(patch) != expected {
                return Err(Error::Dimension {
                    op: "cnn_forward",
                    lhs: g.shape(patch).to_vec(),
                    rhs: expected.to_vec(),
                });
            }
            let mut x = patch;
            let mut acts = Vec::with_capacity(self.convs.len());
            for &(k, b) in &self.convs {
                let c = g.conv2d(x, k, b, 1, pad)?;
                let a = g.relu(c)?;
                acts.push(a);
                x = g.maxpool2d(a, 2, 2)?;
            }
            conv_activations.push(acts);
            flats.push(g.flatten(x)?);
        }
        let flat = g.stack(&flats)?;
        let pre = g.linear_rows(flat, self.descriptor.0, self.descriptor.1)?;
        let descriptors = g.relu(pre)?;
        let logits = self.head.logits(g, descriptors)?;
        let probs = g.softmax_rows(logits)?;
        Ok(CnnOutput {
            conv_activations,
            descriptors,
            logits,
            probs,
        })
    }
}

/// A [`FusionParams`] bound onto a graph.
#[derive(Debug, Clone)]
pub struct BoundFusion {
    hidden: Vec<(Var, Var)>,
    pub head: BoundHead,
    normalize_inputs: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct FusionOutput {
    /// batch×1024 concatenation, mammography first.
    pub input: Var,
    /// Output of the last hidden layer (batch×16).
    pub penultimate: Var,
    pub logits: Var,
    pub probs: Var,
}

impl BoundFusion {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for &(w, b) in &self.hidden {
            out.push(w);
            out.push(b);
        }
        out.extend(self.head.vars());
        out
    }

    /// `desc_mg` and `desc_us` are batch×512 with matching rows.
    pub fn forward(&self, g: &mut Graph, desc_mg: Var, desc_us: Var) -> Result<FusionOutput> {
        for d in [desc_mg, desc_us] {
            let s = g.shape(d);
            if s.len() != 2 || s[1] != DESCRIPTOR_WIDTH {
                return Err(Error::Dimension {
                    op: "fusion_forward",
                    lhs: s.to_vec(),
                    rhs: vec![DESCRIPTOR_WIDTH],
                });
            }
        }
        let (a, b) = if self.normalize_inputs {
            (g.row_normalize(desc_mg)?, g.row_normalize(desc_us)?)
        } else {
            (desc_mg, desc_us)
        };
        let input = g.concat(a, b)?;
        let mut x = input;
        for &(w, bias) in &self.hidden {
            let pre = g.linear_rows(x, w, bias)?;
            x = g.relu(pre)?;
        }
        let logits = self.head.logits(g, x)?;
        let probs = g.softmax_rows(logits)?;
        Ok(FusionOutput {
            input,
            penultimate: x,
            logits,
            probs,
        })
    }
}

fn row_of(t: &Tensor) -> Tensor {
    Tensor::vector(t.data().to_vec())
}

/// Descriptor (length 512) and class probabilities (length 2) of one patch.
pub fn cnn_forward(patch: &Patch, params: &CnnParams) -> Result<(Tensor, Tensor)> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false)?;
    let x = g.constant(patch.input_tensor())?;
    let out = bound.forward(&mut g, &[x])?;
    Ok((row_of(g.value(out.descriptors)), row_of(g.value(out.probs))))
}

/// Fused class probabilities for one (mammography, ultrasound) descriptor pair.
pub fn fusion_forward(desc_mg: &Tensor, desc_us: &Tensor, params: &FusionParams) -> Result<Tensor> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false)?;
    let mut rows = [desc_mg, desc_us].into_iter().map(|d| {
        if d.shape() != [DESCRIPTOR_WIDTH] {
            return Err(Error::Dimension {
                op: "fusion_forward",
                lhs: d.shape().to_vec(),
                rhs: vec![DESCRIPTOR_WIDTH],
            });
        }
        g.constant(d.reshaped(&[1, DESCRIPTOR_WIDTH])?)
    });
    let a = rows.next().expect("two rows")?;
    let b = rows.next().expect("two rows")?;
    drop(rows);
    let out = bound.forward(&mut g, a, b)?;
    Ok(row_of(g.value(out.probs)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> CnnArch {
        CnnArch {
            patch_size: 16,
            channels: vec![4, 4, 8],
            kernel: 3,
        }
    }

    fn ramp_patch(size: usize) -> Patch {
        let data = (0..size * size).map(|i| (i % 17) as f64 / 16.0).collect();
        Patch::new(size, data).unwrap()
    }

    #[test]
    fn default_layout_flattens_to_4096() {
        let arch = CnnArch::new(Architecture::Basic, 64);
        assert_eq!(arch.flatten_len(), 4096);
        assert_eq!(CnnArch::new(Architecture::Deeper, 64).flatten_len(), 8192);
    }

    #[test]
    fn cnn_output_widths() {
        let params = CnnParams::init(&small_arch(), HeadKind::Linear, 3).unwrap();
        let (d, p) = cnn_forward(&ramp_patch(16), &params).unwrap();
        assert_eq!(d.shape(), &[DESCRIPTOR_WIDTH]);
        assert_eq!(p.shape(), &[2]);
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_head_predicts_uniform() {
        let mut params = CnnParams::init(&small_arch(), HeadKind::Linear, 3).unwrap();
        if let Head::Linear(d) = &mut params.head {
            d.weights.data_mut().fill(0.0);
        }
        let (_, p) = cnn_forward(&ramp_patch(16), &params).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let arch = small_arch();
        let a = CnnParams::init(&arch, HeadKind::Linear, 11).unwrap();
        let b = CnnParams::init(&arch, HeadKind::Linear, 11).unwrap();
        let c = CnnParams::init(&arch, HeadKind::Linear, 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for layer in &a.convs {
            let fan_in: usize = layer.kernels.shape()[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            assert!(layer.kernels.data().iter().all(|w| w.abs() <= bound));
            assert!(layer.bias.data().iter().all(|&b| b == 0.0));
        }
        let fan_in = a.descriptor.weights.shape()[1];
        let bound = (6.0 / fan_in as f64).sqrt();
        assert!(a.descriptor.weights.data().iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn wrong_patch_size_is_dimension_error() {
        let params = CnnParams::init(&small_arch(), HeadKind::Linear, 3).unwrap();
        assert!(matches!(
            cnn_forward(&ramp_patch(8), &params),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn fusion_zero_weights_predict_uniform() {
        let mut params = FusionParams::init(HeadKind::Linear, false, 5);
        params.tensors_mut().into_iter().for_each(|t| t.data_mut().fill(0.0));
        let d = Tensor::vector(vec![0.3; DESCRIPTOR_WIDTH]);
        let p = fusion_forward(&d, &d, &params).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn fusion_first_layer_consumes_1024() {
        let params = FusionParams::init(HeadKind::Linear, false, 5);
        assert_eq!(params.hidden[0].weights.shape(), &[512, 1024]);
        let widths: Vec<usize> = params.hidden.iter().map(|d| d.weights.shape()[0]).collect();
        assert_eq!(widths, vec![512, 256, 128, 64, 32, 16]);
        match &params.head {
            Head::Linear(d) => assert_eq!(d.weights.shape(), &[2, 16]),
            _ => unreachable!(),
        }
        let short = Tensor::vector(vec![0.1; 10]);
        assert!(fusion_forward(&short, &short, &params).is_err());
    }

    #[test]
    fn patch_rejects_out_of_range_values() {
        assert!(Patch::new(2, vec![0.0, 0.5, 1.0, 1.5]).is_err());
        assert!(Patch::new(2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn cosine_head_probabilities() {
        let params = CnnParams::init(&small_arch(), HeadKind::Cosine { scale: 30.0 }, 9).unwrap();
        let (_, p) = cnn_forward(&ramp_patch(16), &params).unwrap();
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(params.names().last().unwrap(), "head.anchors");
    }
}
