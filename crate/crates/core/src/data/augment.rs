//! Label-preserving geometric augmentation: flips, quarter-turn rotations and
//! small translations with edge replication.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::models::Patch;
use crate::seed::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augment {
    HFlip,
    VFlip,
    /// `k` quarter turns; each maps pixel (r, c) to (c, H−1−r).
    Rot90(u8),
    /// Shift content right by `dx` and down by `dy` pixels.
    Translate { dx: i32, dy: i32 },
}

/// Largest allowed translation: 10% of the patch side.
pub fn max_shift(size: usize) -> i32 {
    (size / 10) as i32
}

fn remap(patch: &Patch, src: impl Fn(usize, usize) -> (usize, usize)) -> Patch {
    let n = patch.size();
    let mut data = Vec::with_capacity(n * n);
    for r in 0..n {
        for c in 0..n {
            let (sr, sc) = src(r, c);
            data.push(patch.get(sr, sc));
        }
    }
    Patch::new(n, data).expect("remap keeps values and size")
}

pub fn augment(patch: &Patch, op: Augment) -> Result<Patch> {
    let n = patch.size();
    if n == 0 {
        return Ok(patch.clone());
    }
    let last = n - 1;
    Ok(match op {
        Augment::HFlip => remap(patch, |r, c| (r, last - c)),
        Augment::VFlip => remap(patch, |r, c| (last - r, c)),
        Augment::Rot90(k) => {
            let mut out = patch.clone();
            for _ in 0..k % 4 {
                // out(c, H−1−r) = in(r, c)  ⇔  out(i, j) = in(H−1−j, i)
                out = remap(&out, |i, j| (last - j, i));
            }
            out
        }
        Augment::Translate { dx, dy } => {
            let limit = max_shift(n);
            if dx.abs() > limit || dy.abs() > limit {
                return Err(Error::contract(format!(
                    "translation ({dx}, {dy}) exceeds ±{limit} px for a {n}px patch"
                )));
            }
            let clamp = |v: i64| v.clamp(0, last as i64) as usize;
            remap(patch, |r, c| {
                (clamp(r as i64 - dy as i64), clamp(c as i64 - dx as i64))
            })
        }
    })
}

/// One random element of the augmentation group: a quarter-turn rotation,
/// an optional horizontal flip and a translation.
pub fn random_transform(rng: &mut Rng, size: usize) -> Vec<Augment> {
    let limit = max_shift(size);
    let rot = rng.random_range(0..4u8);
    let flip = rng.random_bool(0.5);
    let dx = rng.random_range(-limit..=limit);
    let dy = rng.random_range(-limit..=limit);
    let mut ops = vec![Augment::Rot90(rot)];
    if flip {
        ops.push(Augment::HFlip);
    }
    ops.push(Augment::Translate { dx, dy });
    ops
}

pub fn apply_all(patch: &Patch, ops: &[Augment]) -> Result<Patch> {
    ops.iter().try_fold(patch.clone(), |p, &op| augment(&p, op))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Patch {
        Patch::new(n, (0..n * n).map(|i| i as f64 / (n * n) as f64).collect()).unwrap()
    }

    #[test]
    fn rot90_moves_pixels_as_documented() {
        let p = ramp(5);
        let q = augment(&p, Augment::Rot90(1)).unwrap();
        for r in 0..5 {
            for c in 0..5 {
                assert_eq!(q.get(c, 4 - r), p.get(r, c));
            }
        }
    }

    #[test]
    fn involutions_and_identities() {
        let p = ramp(10);
        let twice = apply_all(&p, &[Augment::HFlip, Augment::HFlip]).unwrap();
        assert_eq!(twice, p);
        let twice = apply_all(&p, &[Augment::VFlip, Augment::VFlip]).unwrap();
        assert_eq!(twice, p);
        let four = apply_all(&p, &[Augment::Rot90(1); 4]).unwrap();
        assert_eq!(four, p);
        assert_eq!(augment(&p, Augment::Translate { dx: 0, dy: 0 }).unwrap(), p);
    }

    #[test]
    fn translation_replicates_edges() {
        let p = ramp(10);
        let q = augment(&p, Augment::Translate { dx: 1, dy: 0 }).unwrap();
        for r in 0..10 {
            assert_eq!(q.get(r, 0), p.get(r, 0));
            assert_eq!(q.get(r, 1), p.get(r, 0));
            assert_eq!(q.get(r, 9), p.get(r, 8));
        }
    }

    #[test]
    fn translation_limit() {
        let p = ramp(64);
        assert!(augment(&p, Augment::Translate { dx: 6, dy: -6 }).is_ok());
        assert!(matches!(
            augment(&p, Augment::Translate { dx: 7, dy: 0 }),
            Err(Error::Contract(_))
        ));
    }
}
