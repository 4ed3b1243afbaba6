//! Pair construction for one training epoch.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{flip_horizontal, subtract, translate, ImageSet};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairConfig {
    /// Add flipped, translated, and flipped-and-translated copies of every image.
    pub augment: bool,
    /// Largest translation as a fraction of each image dimension.
    pub translate_fraction: f64,
    /// Negatives drawn per positive pair of each subject.
    pub negatives_per_positive: usize,
    /// Also pair images of one identity taken by the same camera.
    pub same_camera_positives: bool,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            augment: true,
            translate_fraction: 0.05,
            negatives_per_positive: 5,
            same_camera_positives: false,
        }
    }
}

/// An image of the training set with its augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ImageRef {
    pub image: usize,
    pub flip: bool,
    /// `(rows, cols)` shift applied after flipping.
    pub shift: (isize, isize),
}

impl ImageRef {
    pub fn plain(image: usize) -> Self {
        ImageRef {
            image,
            flip: false,
            shift: (0, 0),
        }
    }

    /// The augmented image with `mean` subtracted.
    pub fn render<T: Real>(&self, set: &ImageSet<T>, mean: &Tensor<T>) -> Result<Tensor<T>> {
        let mut img = set.images[self.image].clone();
        if self.flip {
            img = flip_horizontal(&img);
        }
        if self.shift != (0, 0) {
            img = translate(&img, self.shift.0, self.shift.1);
        }
        subtract(&img, mean)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Pair {
    pub a: ImageRef,
    pub b: ImageRef,
    /// 0 for a positive pair, 1 for a negative pair.
    pub label: u8,
}

fn variants<R: Rng>(image: usize, h: usize, w: usize, cfg: &PairConfig, rng: &mut R) -> Vec<ImageRef> {
    let mut out = vec![ImageRef::plain(image)];
    if cfg.augment {
        let (my, mx) = (
            (cfg.translate_fraction * h as f64).round() as i64,
            (cfg.translate_fraction * w as f64).round() as i64,
        );
        let shift = |rng: &mut R| (rng.random_range(-my..=my) as isize, rng.random_range(-mx..=mx) as isize);
        out.push(ImageRef {
            image,
            flip: true,
            shift: (0, 0),
        });
        out.push(ImageRef {
            image,
            flip: false,
            shift: shift(rng),
        });
        out.push(ImageRef {
            image,
            flip: true,
            shift: shift(rng),
        });
    }
    out
}

/// All pairs of one epoch, shuffled.
///
/// Every positive pair (two images of one identity, from different cameras
/// unless `same_camera_positives`) is included for every combination of
/// their augmented copies. Each subject then receives exactly
/// `negatives_per_positive` times as many negatives, pairing a random copy
/// of one of its images with a random copy of a uniformly drawn image of
/// another identity.
pub fn build_epoch_pairs<T: Real>(set: &ImageSet<T>, cfg: &PairConfig, seed: u64, epoch: usize) -> Result<Vec<Pair>> {
    let groups = set.by_identity();
    if groups.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "pair construction needs at least 2 training identities, got {}",
            groups.len()
        )));
    }
    let mut aug_rng = substream(seed, Stream::Augmentation, epoch as u64);
    let refs: Vec<Vec<ImageRef>> = set
        .images
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let s = img.shape();
            variants(i, s.h, s.w, cfg, &mut aug_rng)
        })
        .collect();

    let mut rng = substream(seed, Stream::Sampling, epoch as u64);
    let mut pairs = Vec::new();
    for (&id, members) in &groups {
        let mut positives = 0;
        for (k, &i) in members.iter().enumerate() {
            for &j in &members[k + 1..] {
                if !cfg.same_camera_positives && set.labels[i].camera == set.labels[j].camera {
                    continue;
                }
                for &a in &refs[i] {
                    for &b in &refs[j] {
                        pairs.push(Pair { a, b, label: 0 });
                        positives += 1;
                    }
                }
            }
        }
        let others: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i].identity != id).collect();
        for _ in 0..positives * cfg.negatives_per_positive {
            let i = *members.choose(&mut rng).expect("nonempty group");
            let j = *others.choose(&mut rng).expect("at least two identities");
            let a = *refs[i].choose(&mut rng).expect("variants");
            let b = *refs[j].choose(&mut rng).expect("variants");
            pairs.push(Pair { a, b, label: 1 });
        }
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ImageLabel;
    use crate::tensor::Shape;
    use std::collections::HashMap;

    fn set(ids: &[(u64, u64)]) -> ImageSet<f32> {
        let labels = ids
            .iter()
            .map(|&(identity, camera)| ImageLabel { identity, camera })
            .collect();
        let images = (0..ids.len())
            .map(|i| Tensor::full(Shape::new(1, 8, 8, 3), i as f32))
            .collect();
        ImageSet::new(labels, images).unwrap()
    }

    #[test]
    fn two_identities_two_cameras() {
        let cfg = PairConfig {
            augment: false,
            ..Default::default()
        };
        let pairs = build_epoch_pairs(&set(&[(0, 0), (0, 1), (1, 0), (1, 1)]), &cfg, 1, 0).unwrap();
        assert_eq!(pairs.iter().filter(|p| p.label == 0).count(), 2);
        assert_eq!(pairs.iter().filter(|p| p.label == 1).count(), 10);
    }

    #[test]
    fn negative_ratio_is_exact_per_subject() {
        let s = set(&[(0, 0), (0, 1), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1), (2, 0), (2, 1)]);
        let pairs = build_epoch_pairs(&s, &PairConfig::default(), 9, 3).unwrap();
        let mut counts: HashMap<u64, (usize, usize)> = HashMap::new();
        for p in &pairs {
            let id = s.labels[p.a.image].identity;
            let c = counts.entry(id).or_default();
            if p.label == 0 {
                c.0 += 1;
                assert_eq!(s.labels[p.b.image].identity, id);
                assert_ne!(s.labels[p.a.image].camera, s.labels[p.b.image].camera);
            } else {
                c.1 += 1;
                assert_ne!(s.labels[p.b.image].identity, id);
            }
        }
        for (pos, neg) in counts.values() {
            assert!(*pos > 0);
            assert_eq!(*neg, 5 * pos);
        }
    }

    #[test]
    fn deterministic_without_augmentation() {
        let s = set(&[(0, 0), (0, 1), (1, 0), (1, 1), (2, 0), (2, 1)]);
        let cfg = PairConfig {
            augment: false,
            ..Default::default()
        };
        assert_eq!(
            build_epoch_pairs(&s, &cfg, 4, 0).unwrap(),
            build_epoch_pairs(&s, &cfg, 4, 0).unwrap()
        );
    }

    #[test]
    fn translations_stay_within_five_percent() {
        let s = set(&[(0, 0), (0, 1), (1, 0), (1, 1)]);
        let mut big = s.clone();
        big.images = big
            .images
            .iter()
            .map(|_| Tensor::zeros(Shape::new(1, 128, 64, 3)))
            .collect();
        for p in build_epoch_pairs(&big, &PairConfig::default(), 2, 0).unwrap() {
            for r in [p.a, p.b] {
                assert!(r.shift.0.abs() <= 6 && r.shift.1.abs() <= 3);
            }
        }
    }

    #[test]
    fn rejects_single_identity() {
        assert!(build_epoch_pairs(&set(&[(0, 0), (0, 1)]), &PairConfig::default(), 0, 0).is_err());
    }
}
