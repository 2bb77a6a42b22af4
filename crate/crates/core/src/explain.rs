//! Grad-CAM over a single-modality CNN.
//!
//! Channel weights are the spatial mean of ∂logit/∂activation, taken at a
//! conv block's post-ReLU, pre-pool activation. The map is
//! ReLU(Σ_c w_c·A_c), scaled to max 1 when it has any positive entry.

use serde::{Deserialize, Serialize};

use crate::data::pnm;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::{CnnParams, Patch};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplainConfig {
    /// Conv block index; `None` selects the last block.
    pub layer: Option<usize>,
    pub target_class: usize,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            layer: None,
            target_class: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    /// h×w at the layer's resolution, normalised.
    pub map: Tensor,
    /// S×S bilinear upsampling of `map`.
    pub upsampled: Tensor,
    pub target_class: usize,
    pub layer: usize,
}

/// ReLU(Σ_c mean(grad_c)·act_c) for C×H×W activation and gradient tensors,
/// before normalisation.
pub fn cam_map(activation: &Tensor, gradient: &Tensor) -> Result<Tensor> {
    let shape = activation.shape();
    if shape.len() != 3 || gradient.shape() != shape {
        return Err(Error::Dimension {
            op: "grad_cam",
            lhs: shape.to_vec(),
            rhs: gradient.shape().to_vec(),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let plane = h * w;
    let mut map = vec![0.0; plane];
    for ch in 0..c {
        let range = ch * plane..(ch + 1) * plane;
        let weight = gradient.data()[range.clone()].iter().sum::<f64>() / plane as f64;
        for (m, a) in map.iter_mut().zip(&activation.data()[range]) {
            *m += weight * a;
        }
    }
    for m in &mut map {
        *m = m.max(0.0);
    }
    Tensor::new(vec![h, w], map)
}

/// Divides by the maximum when it is positive; an all-zero map stays zero.
pub fn normalize(map: &Tensor) -> Tensor {
    let max = map.data().iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        let data = map.data().iter().map(|v| v / max).collect();
        Tensor::new(map.shape().to_vec(), data).expect("same shape")
    } else {
        map.clone()
    }
}

/// Bilinear resize of an h×w grid to `size`×`size`, sampling at pixel
/// centres and clamping at the borders.
pub fn upsample(map: &Tensor, size: usize) -> Tensor {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let src = |i: usize, n: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * n as f64 / size as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, pos - lo as f64)
    };
    let d = map.data();
    let mut out = Vec::with_capacity(size * size);
    for r in 0..size {
        let (r0, r1, fr) = src(r, h);
        for c in 0..size {
            let (c0, c1, fc) = src(c, w);
            let top = d[r0 * w + c0] * (1.0 - fc) + d[r0 * w + c1] * fc;
            let bottom = d[r1 * w + c0] * (1.0 - fc) + d[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    Tensor::new(vec![size, size], out).expect("square")
}

/// Grad-CAM of `target_class`'s logit at conv block `layer`.
pub fn grad_cam(params: &CnnParams, patch: &Patch, target_class: usize, layer: usize) -> Result<Heatmap> {
    let blocks = params.convs.len();
    if layer >= blocks {
        return Err(Error::contract(format!(
            "layer {layer} is not a conv layer (model has {blocks})"
        )));
    }
    if target_class > 1 {
        return Err(Error::contract(format!("class {target_class} is not 0 or 1")));
    }
    if patch.size() != params.arch.patch_size {
        return Err(Error::contract(format!(
            "patch is {0}x{0} but the model expects {1}x{1}",
            patch.size(),
            params.arch.patch_size
        )));
    }
    let mut g = Graph::new();
    // Trainable binding so gradients reach the activations.
    let bound = params.bind(&mut g, true)?;
    let x = g.constant(patch.input_tensor())?;
    let out = bound.forward(&mut g, &[x])?;
    let act = out.conv_activations[0][layer];
    let picked = g.gather_rows(out.logits, &[target_class])?;
    let target = g.sum(picked)?;
    g.backward(target)?;
    let activation = g.value(act).clone();
    let gradient = g
        .grad_tensor(act)
        .unwrap_or_else(|| Tensor::zeros(activation.shape()));
    let map = normalize(&cam_map(&activation, &gradient)?);
    let upsampled = upsample(&map, patch.size());
    Ok(Heatmap {
        map,
        upsampled,
        target_class,
        layer,
    })
}

/// Heatmap as a PGM.
pub fn heatmap_pgm(heatmap: &Heatmap) -> Vec<u8> {
    let n = heatmap.upsampled.shape()[0];
    let bytes: Vec<u8> = heatmap.upsampled.data().iter().map(|&v| pnm::quantize(v)).collect();
    pnm::encode_pgm(n, n, &bytes)
}

/// The patch in grey, blended towards red by heatmap intensity, as a PPM.
pub fn overlay(patch: &Patch, heatmap: &Heatmap) -> Result<Vec<u8>> {
    let n = patch.size();
    if heatmap.upsampled.shape() != [n, n] {
        return Err(Error::Dimension {
            op: "overlay",
            lhs: vec![n, n],
            rhs: heatmap.upsampled.shape().to_vec(),
        });
    }
    let mut rgb = Vec::with_capacity(n * n * 3);
    for (&p, &h) in patch.data().iter().zip(heatmap.upsampled.data()) {
        let grey = pnm::quantize(p) as f64;
        let h = h.clamp(0.0, 1.0);
        let red = grey + (255.0 - grey) * h;
        let rest = grey * (1.0 - h);
        rgb.extend([red.round() as u8, rest.round() as u8, rest.round() as u8]);
    }
    Ok(pnm::encode_ppm(n, n, &rgb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_example() {
        let act = Tensor::new(vec![1, 2, 2], vec![1.0, -1.0, 2.0, 0.0]).unwrap();
        let grad = Tensor::filled(&[1, 2, 2], 1.0);
        let map = cam_map(&act, &grad).unwrap();
        assert_eq!(map.data(), &[1.0, 0.0, 2.0, 0.0]);
        assert_eq!(normalize(&map).data(), &[0.5, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn upsampling_keeps_constant_maps_and_corners() {
        let flat = Tensor::filled(&[3, 3], 0.25);
        assert!(upsample(&flat, 8).data().iter().all(|&v| v == 0.25));
        let m = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let up = upsample(&m, 4);
        assert_eq!(up.data()[0], 1.0);
        assert_eq!(up.data()[15], 0.0);
    }

    #[test]
    fn zero_heatmap_overlay_is_grey() {
        let patch = Patch::new(2, vec![0.0, 0.2, 0.6, 1.0]).unwrap();
        let h = Heatmap {
            map: Tensor::zeros(&[1, 1]),
            upsampled: Tensor::zeros(&[2, 2]),
            target_class: 1,
            layer: 0,
        };
        let ppm = overlay(&patch, &h).unwrap();
        let pixels = &ppm[ppm.len() - 12..];
        for (i, px) in pixels.chunks(3).enumerate() {
            let g = pnm::quantize(patch.data()[i]);
            assert_eq!(px, [g, g, g]);
        }
    }
}
