//! Seeded synthetic paired-lesion generator.
//!
//! Each lesion has a latent shape: an ellipse whose radius is modulated by
//! `1 + a·h(θ)`, where `h` is a random mix of harmonics 5..=14 normalised to
//! max |h| = 1 and `a` is the boundary amplitude. Malignant lesions draw `a`
//! from a high range, benign ones from a low range. A modality renders the
//! lesion with its true amplitude with probability `fidelity`, otherwise
//! with an amplitude drawn from the opposite class's range.
//!
//! Mammography views show a bright mass on a smooth background with additive
//! Gaussian noise; ultrasound views show a dark mass under multiplicative
//! gamma speckle. Every view gets its own rotation, scale, stretch and shift.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Gamma, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::pnm::snap;
use super::{Dataset, Label, LesionPair, Modality, Split};
use crate::error::{Error, Result};
use crate::models::Patch;
use crate::seed::{self, Rng};

const HARMONICS: std::ops::RangeInclusive<usize> = 5..=14;
const N_HARMONICS: usize = 4;
/// Angular samples used for the perimeter/area statistic.
const CONTOUR_SAMPLES: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub n_lesions: usize,
    pub malignant_fraction: f64,
    pub patch_size: usize,
    pub views_per_modality: usize,
    /// Boundary amplitude range `[lo, hi]` for benign shapes.
    pub benign_amplitude: [f64; 2],
    pub malignant_amplitude: [f64; 2],
    pub fidelity_mg: f64,
    pub fidelity_us: f64,
    /// Standard deviation of the additive mammography noise.
    pub noise_mg: f64,
    /// Standard deviation of the unit-mean ultrasound speckle.
    pub noise_us: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n_lesions: 153,
            malignant_fraction: 73.0 / 153.0,
            patch_size: 64,
            views_per_modality: 3,
            benign_amplitude: [0.02, 0.06],
            malignant_amplitude: [0.18, 0.35],
            fidelity_mg: 0.85,
            fidelity_us: 0.85,
            noise_mg: 0.05,
            noise_us: 0.15,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, key: &str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::config(format!("data.{key}"), reason))
            }
        };
        check(self.n_lesions > 0, "n_lesions", "must be positive")?;
        check(
            self.malignant_fraction > 0.0 && self.malignant_fraction < 1.0,
            "malignant_fraction",
            "must lie strictly between 0 and 1",
        )?;
        check(self.patch_size >= 16, "patch_size", "must be at least 16")?;
        check(self.views_per_modality > 0, "views_per_modality", "must be positive")?;
        for (key, [lo, hi]) in [
            ("benign_amplitude", self.benign_amplitude),
            ("malignant_amplitude", self.malignant_amplitude),
        ] {
            check(
                (0.0..=hi).contains(&lo) && hi < 0.6,
                key,
                "must be an ordered range within [0, 0.6)",
            )?;
        }
        check(
            self.benign_amplitude[1] < self.malignant_amplitude[0],
            "malignant_amplitude",
            "must lie above benign_amplitude",
        )?;
        for (key, f) in [("fidelity_mg", self.fidelity_mg), ("fidelity_us", self.fidelity_us)] {
            check((0.0..=1.0).contains(&f), key, "must lie in [0, 1]")?;
        }
        for (key, s) in [("noise_mg", self.noise_mg), ("noise_us", self.noise_us)] {
            check((0.0..1.0).contains(&s), key, "must lie in [0, 1)")?;
        }
        Ok(())
    }

    pub fn n_malignant(&self) -> usize {
        (self.n_lesions as f64 * self.malignant_fraction).round() as usize
    }

    fn fidelity(&self, modality: Modality) -> f64 {
        match modality {
            Modality::Mammography => self.fidelity_mg,
            Modality::Ultrasound => self.fidelity_us,
        }
    }

    fn amplitude_range(&self, label: Label) -> [f64; 2] {
        match label {
            Label::Benign => self.benign_amplitude,
            Label::Malignant => self.malignant_amplitude,
        }
    }
}

/// Generator ground truth for one lesion; never fed to training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentRecord {
    pub lesion_id: String,
    pub label: Label,
    pub true_amplitude: f64,
    pub mg_amplitude: f64,
    pub us_amplitude: f64,
    pub mg_corrupted: bool,
    pub us_corrupted: bool,
    /// Perimeter²/area of the true shape divided by that of its ellipse.
    pub irregularity: f64,
}

pub struct Synthetic {
    pub dataset: Dataset,
    pub latent: Vec<LatentRecord>,
}

/// Latent lesion outline in its own frame.
#[derive(Debug, Clone)]
pub struct Shape {
    /// Semi-axes in pixels.
    pub axes: (f64, f64),
    harmonics: Vec<(f64, f64, f64)>,
    norm: f64,
}

impl Shape {
    fn random(rng: &mut Rng, patch_size: usize) -> Shape {
        let base = patch_size as f64 * rng.random_range(0.19..0.25);
        let aspect = rng.random_range(0.7..1.0);
        let mut ks: Vec<usize> = HARMONICS.collect();
        ks.shuffle(rng);
        let harmonics = ks[..N_HARMONICS]
            .iter()
            .map(|&k| (k as f64, rng.random_range(0.5..1.0), rng.random_range(0.0..2.0 * PI)))
            .collect();
        let mut shape = Shape {
            axes: (base, base * aspect),
            harmonics,
            norm: 1.0,
        };
        let peak = (0..CONTOUR_SAMPLES)
            .map(|i| shape.h(2.0 * PI * i as f64 / CONTOUR_SAMPLES as f64).abs())
            .fold(0.0, f64::max);
        shape.norm = peak;
        shape
    }

    /// Harmonic perturbation, max |h| = 1 up to sampling.
    fn h(&self, theta: f64) -> f64 {
        self.harmonics
            .iter()
            .map(|&(k, w, phase)| w * (k * theta + phase).sin())
            .sum::<f64>()
            / self.norm
    }

    /// Boundary radius at polar angle `theta` for amplitude `amp`.
    pub fn radius(&self, theta: f64, amp: f64) -> f64 {
        let (a, b) = self.axes;
        let (s, c) = theta.sin_cos();
        let ellipse = a * b / ((b * c).powi(2) + (a * s).powi(2)).sqrt();
        ellipse * (1.0 + amp * self.h(theta))
    }

    /// Perimeter² / area of the outline, from a dense polygon.
    pub fn p2a(&self, amp: f64) -> f64 {
        let pts: Vec<(f64, f64)> = (0..CONTOUR_SAMPLES)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / CONTOUR_SAMPLES as f64;
                let r = self.radius(t, amp);
                (r * t.cos(), r * t.sin())
            })
            .collect();
        let (mut perim, mut area2) = (0.0, 0.0);
        for i in 0..pts.len() {
            let (x0, y0) = pts[i];
            let (x1, y1) = pts[(i + 1) % pts.len()];
            perim += (x1 - x0).hypot(y1 - y0);
            area2 += x0 * y1 - x1 * y0;
        }
        perim * perim / (area2.abs() / 2.0)
    }

    pub fn irregularity(&self, amp: f64) -> f64 {
        self.p2a(amp) / self.p2a(0.0)
    }
}

struct View {
    angle: f64,
    scale: f64,
    stretch: f64,
    shift: (f64, f64),
}

impl View {
    fn random(rng: &mut Rng, patch_size: usize) -> View {
        let max_shift = patch_size as f64 * 0.06;
        View {
            angle: rng.random_range(0.0..2.0 * PI),
            scale: rng.random_range(0.9..1.1),
            stretch: rng.random_range(0.9..1.1),
            shift: (
                rng.random_range(-max_shift..max_shift),
                rng.random_range(-max_shift..max_shift),
            ),
        }
    }

    /// Soft inside-mask of `shape` rendered with amplitude `amp`.
    fn mask(&self, shape: &Shape, amp: f64, n: usize) -> Vec<f64> {
        let centre = (n as f64 - 1.0) / 2.0;
        let (s, c) = self.angle.sin_cos();
        let mut out = Vec::with_capacity(n * n);
        for r in 0..n {
            for col in 0..n {
                let x = (col as f64 - centre - self.shift.0) / self.scale;
                let y = (r as f64 - centre - self.shift.1) / self.scale;
                let u = (c * x + s * y) / self.stretch;
                let v = (-s * x + c * y) * self.stretch;
                let rho = u.hypot(v);
                let edge = shape.radius(v.atan2(u), amp) - rho;
                out.push(1.0 / (1.0 + (-edge / 0.6).exp()));
            }
        }
        out
    }
}

/// Smooth background: a random plane plus one broad blob.
fn background(rng: &mut Rng, n: usize, level: f64, spread: f64) -> Vec<f64> {
    let gx = rng.random_range(-spread..spread);
    let gy = rng.random_range(-spread..spread);
    let bx = rng.random_range(0.0..n as f64);
    let by = rng.random_range(0.0..n as f64);
    let bamp = rng.random_range(-spread..spread);
    let width = n as f64 * 0.4;
    let mut out = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let (x, y) = (c as f64 / n as f64 - 0.5, r as f64 / n as f64 - 0.5);
            let d2 = ((c as f64 - bx).powi(2) + (r as f64 - by).powi(2)) / (width * width);
            out.push(level + gx * x + gy * y + bamp * (-d2).exp());
        }
    }
    out
}

fn render(rng: &mut Rng, modality: Modality, shape: &Shape, amp: f64, cfg: &GenConfig) -> Patch {
    let n = cfg.patch_size;
    let view = View::random(rng, n);
    let mask = view.mask(shape, amp, n);
    let data = match modality {
        Modality::Mammography => {
            let level = rng.random_range(0.25..0.35);
            let bg = background(rng, n, level, 0.08);
            let contrast = rng.random_range(0.3..0.4);
            let noise = Normal::new(0.0, cfg.noise_mg).expect("validated noise");
            bg.iter()
                .zip(&mask)
                .map(|(b, m)| snap(b + contrast * m + noise.sample(rng)))
                .collect()
        }
        Modality::Ultrasound => {
            let level = rng.random_range(0.5..0.6);
            let bg = background(rng, n, level, 0.08);
            let mass = rng.random_range(0.12..0.2);
            let speckle = (cfg.noise_us > 0.0).then(|| {
                let k = 1.0 / (cfg.noise_us * cfg.noise_us);
                Gamma::new(k, 1.0 / k).expect("validated noise")
            });
            bg.iter()
                .zip(&mask)
                .map(|(b, m)| {
                    let clean = b * (1.0 - m) + mass * m;
                    let s = speckle.as_ref().map_or(1.0, |g| g.sample(rng));
                    snap(clean * s)
                })
                .collect()
        }
    };
    Patch::new(n, data).expect("snapped values lie in [0, 1]")
}

fn lesion(cfg: &GenConfig, seed: u64, index: usize, label: Label) -> (LesionPair, LatentRecord) {
    let mut rng = seed::rng(seed::derive_index(seed, index as u64));
    let shape = Shape::random(&mut rng, cfg.patch_size);
    let draw = |rng: &mut Rng, l: Label| {
        let [lo, hi] = cfg.amplitude_range(l);
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };
    let true_amplitude = draw(&mut rng, label);
    let id = format!("L{index:03}");
    let mut appearances = Vec::new();
    let mut rendered = Vec::new();
    for modality in Modality::BOTH {
        let corrupted = !rng.random_bool(cfg.fidelity(modality));
        let amp = if corrupted {
            draw(&mut rng, label.flipped())
        } else {
            true_amplitude
        };
        let views: Vec<Patch> = (0..cfg.views_per_modality)
            .map(|_| render(&mut rng, modality, &shape, amp, cfg))
            .collect();
        appearances.push(views);
        rendered.push((amp, corrupted));
    }
    let us = appearances.pop().expect("two modalities");
    let mg = appearances.pop().expect("two modalities");
    let latent = LatentRecord {
        lesion_id: id.clone(),
        label,
        true_amplitude,
        mg_amplitude: rendered[0].0,
        us_amplitude: rendered[1].0,
        mg_corrupted: rendered[0].1,
        us_corrupted: rendered[1].1,
        irregularity: shape.irregularity(true_amplitude),
    };
    let pair = LesionPair::new(id, label, mg, us).expect("views_per_modality > 0");
    (pair, latent)
}

/// Generates `cfg.n_lesions` lesions; exactly `round(n · malignant_fraction)`
/// are malignant. Output depends only on `(cfg, seed)`.
pub fn generate(cfg: &GenConfig, seed: u64) -> Result<Synthetic> {
    cfg.validate()?;
    let mut labels = vec![Label::Benign; cfg.n_lesions];
    labels[..cfg.n_malignant()].fill(Label::Malignant);
    labels.shuffle(&mut seed::rng(seed::derive(seed, "labels")));
    let lesion_seed = seed::derive(seed, "lesions");
    let (lesions, latent): (Vec<_>, Vec<_>) = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| lesion(cfg, lesion_seed, i, label))
        .unzip();
    Ok(Synthetic {
        dataset: Dataset::new(lesions, Split::Train)?,
        latent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(n: usize) -> GenConfig {
        GenConfig {
            n_lesions: n,
            patch_size: 32,
            views_per_modality: 1,
            ..GenConfig::default()
        }
    }

    #[test]
    fn default_counts_match_cohort() {
        let cfg = GenConfig::default();
        assert_eq!(cfg.n_malignant(), 73);
        let s = generate(&GenConfig { patch_size: 16, views_per_modality: 1, ..cfg }, 3).unwrap();
        assert_eq!(s.dataset.count(Label::Malignant), 73);
        assert_eq!(s.dataset.count(Label::Benign), 80);
    }

    #[test]
    fn same_seed_same_bits() {
        let a = generate(&small(6), 9).unwrap();
        let b = generate(&small(6), 9).unwrap();
        let c = generate(&small(6), 10).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.latent, b.latent);
        assert_ne!(a.dataset, c.dataset);
    }

    #[test]
    fn views_are_distinct_and_on_the_byte_grid() {
        let cfg = GenConfig {
            views_per_modality: 3,
            ..small(2)
        };
        let s = generate(&cfg, 1).unwrap();
        for l in s.dataset.lesions() {
            let mg = l.appearances(Modality::Mammography);
            assert_eq!(mg.len(), 3);
            assert_ne!(mg[0], mg[1]);
            for p in mg.iter().chain(l.appearances(Modality::Ultrasound)) {
                assert!(p.data().iter().all(|&v| v == snap(v)));
            }
        }
    }

    #[test]
    fn mammography_mass_is_bright_and_ultrasound_mass_is_dark() {
        let cfg = GenConfig {
            noise_mg: 0.0,
            noise_us: 0.0,
            ..small(4)
        };
        let s = generate(&cfg, 5).unwrap();
        let centre_vs_corner = |p: &Patch| {
            let n = p.size();
            p.get(n / 2, n / 2) - p.get(0, 0)
        };
        for l in s.dataset.lesions() {
            assert!(centre_vs_corner(&l.appearances(Modality::Mammography)[0]) > 0.1);
            assert!(centre_vs_corner(&l.appearances(Modality::Ultrasound)[0]) < -0.1);
        }
    }

    #[test]
    fn config_errors_name_the_key() {
        let bad = GenConfig {
            malignant_fraction: 1.5,
            ..GenConfig::default()
        };
        let err = bad.validate().unwrap_err().to_string();
        assert!(err.contains("data.malignant_fraction"), "{err}");
        let bad = GenConfig {
            fidelity_us: -0.1,
            ..GenConfig::default()
        };
        assert!(bad.validate().unwrap_err().to_string().contains("data.fidelity_us"));
        let bad = GenConfig {
            benign_amplitude: [0.1, 0.3],
            ..GenConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn circle_irregularity_is_one() {
        let mut rng = seed::rng(0);
        let s = Shape::random(&mut rng, 64);
        assert!((s.irregularity(0.0) - 1.0).abs() < 1e-12);
        assert!(s.irregularity(0.3) > s.irregularity(0.05));
    }
}
