//! Synthetic pedestrians for desk-scale experiments.
//!
//! Each identity is a figure with a head, a torso and two legs in colors
//! drawn per identity, on a flat background. Cameras other than the first
//! darken and tint the whole frame and shift the figure sideways. A
//! fraction of identities come in twin pairs that share everything but a
//! small high-contrast cue patch carried by one of the two (a hat on the
//! head or a bag at the left hip).

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::{INPUT_HEIGHT, INPUT_WIDTH};
use super::{Dataset, ImageLabel, ImageSet, Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::rng::{substream, Stream};
use crate::tensor::{Real, Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub cameras: usize,
    /// `(height, width)` of the cue patch in pixels.
    pub cue_size: (usize, usize),
    pub noise_sigma: f64,
    /// Fraction of identities that belong to a twin pair.
    pub local_cue_fraction: f64,
    /// Fraction of identities held out of training; their first-camera
    /// images form the query split and the rest the gallery.
    pub holdout_fraction: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_identities: 20,
            images_per_identity: 4,
            cameras: 2,
            cue_size: (12, 12),
            noise_sigma: 0.02,
            local_cue_fraction: 0.0,
            holdout_fraction: 0.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(format!("synthetic spec: {m}")));
        if self.n_identities < 2 {
            return bad(format!("n_identities must be at least 2, got {}", self.n_identities));
        }
        if self.images_per_identity == 0 || self.cameras == 0 {
            return bad("images_per_identity and cameras must be positive".into());
        }
        let (ch, cw) = self.cue_size;
        if ch == 0 || cw == 0 || ch > 24 || cw > 12 {
            return bad(format!("cue patch {ch}×{cw} does not fit its body region"));
        }
        if !(0.0..=1.0).contains(&self.local_cue_fraction) || !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("fractions must lie in [0, 1]".into());
        }
        if !(self.noise_sigma >= 0.0) {
            return bad(format!("noise_sigma must be nonnegative, got {}", self.noise_sigma));
        }
        if self.holdout_fraction > 0.0 && (self.cameras < 2 || self.images_per_identity < 2) {
            return bad("held-out identities need images from at least two cameras".into());
        }
        Ok(())
    }

    fn twin_identities(&self) -> usize {
        ((self.local_cue_fraction * self.n_identities as f64).round() as usize / 2) * 2
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CuePlacement {
    /// Upper quarter of the frame, on the head.
    Hat,
    /// Middle rows, left of the torso.
    Bag,
}

/// Pixel rectangle `rows × cols` (half-open).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub rows: std::ops::Range<usize>,
    pub cols: std::ops::Range<usize>,
}

impl Region {
    pub fn contains(&self, y: usize, x: usize) -> bool {
        self.rows.contains(&y) && self.cols.contains(&x)
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticImage {
    pub entry: ManifestEntry,
    /// 8-bit RGB raster, row-major.
    pub pixels: Vec<u8>,
    /// Where the cue patch was drawn, for the twin carrying it.
    pub cue: Option<(CuePlacement, Region)>,
}

impl SyntheticImage {
    /// Same values the PPM loader produces for this raster.
    pub fn tensor<T: Real>(&self) -> Tensor<T> {
        let scale = T::of(1.0 / 255.0);
        let data = self.pixels.iter().map(|b| T::of(*b as f64) * scale).collect();
        Tensor::new(Shape::new(1, INPUT_HEIGHT, INPUT_WIDTH, 3), data).expect("raster size")
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticSet {
    pub spec: SyntheticSpec,
    pub images: Vec<SyntheticImage>,
    /// `(plain twin, cue twin)` identity pairs.
    pub twins: Vec<(u64, u64)>,
}

impl SyntheticSet {
    pub fn manifest(&self) -> Manifest {
        Manifest::new(self.images.iter().map(|i| i.entry.clone()).collect())
    }

    pub fn image_set<T: Real>(&self, split: Split) -> ImageSet<T> {
        let picked: Vec<&SyntheticImage> = self.images.iter().filter(|i| i.entry.split == split).collect();
        ImageSet {
            labels: picked
                .iter()
                .map(|i| ImageLabel {
                    identity: i.entry.identity_id,
                    camera: i.entry.camera_id,
                })
                .collect(),
            images: picked.iter().map(|i| i.tensor()).collect(),
        }
    }

    pub fn dataset<T: Real>(&self) -> Dataset<T> {
        Dataset {
            train: self.image_set(Split::Train),
            val: self.image_set(Split::Val),
            query: self.image_set(Split::Query),
            gallery: self.image_set(Split::Gallery),
        }
    }

    pub fn find(&self, identity: u64, index: usize) -> Option<&SyntheticImage> {
        self.images
            .iter()
            .filter(|i| i.entry.identity_id == identity)
            .nth(index)
    }
}

struct Appearance {
    skin: [f64; 3],
    torso: [f64; 3],
    legs: [f64; 3],
}

struct Nuisance {
    background: [f64; 3],
    shift: isize,
}

fn color<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(lo..hi))
}

const HEAD_ROWS: std::ops::Range<usize> = 6..28;
const TORSO_ROWS: std::ops::Range<usize> = 28..72;
const LEG_ROWS: std::ops::Range<usize> = 72..122;
const MAX_SHIFT: i64 = 6;

fn cue_region(placement: CuePlacement, (ch, cw): (usize, usize), center: usize) -> Region {
    match placement {
        CuePlacement::Hat => Region {
            rows: 2..2 + ch,
            cols: center - cw / 2..center - cw / 2 + cw,
        },
        CuePlacement::Bag => {
            let top = INPUT_HEIGHT / 2 - ch / 2;
            let right = center - 13;
            Region {
                rows: top..top + ch,
                cols: right - cw..right,
            }
        }
    }
}

fn render(
    spec: &SyntheticSpec,
    look: &Appearance,
    nuisance: &Nuisance,
    camera: usize,
    cue: Option<CuePlacement>,
    noise_rng: &mut impl Rng,
) -> (Vec<u8>, Option<(CuePlacement, Region)>) {
    let center = (INPUT_WIDTH as isize / 2 + nuisance.shift) as usize;
    let cue = cue.map(|p| (p, cue_region(p, spec.cue_size, center)));
    let in_cols = |x: usize, half: usize| x + half >= center && x < center + half;
    let noise = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("valid sigma");
    let brightness = 1.0 - 0.15 * camera as f64;
    let tint = [0.05, 0.0, -0.05].map(|t| t * camera as f64);
    let mut pixels = Vec::with_capacity(INPUT_HEIGHT * INPUT_WIDTH * 3);
    for y in 0..INPUT_HEIGHT {
        for x in 0..INPUT_WIDTH {
            let base = match &cue {
                Some((_, r)) if r.contains(y, x) => {
                    // checkerboard of 3-pixel squares in complementary colors
                    let on = ((y - r.rows.start) / 3 + (x - r.cols.start) / 3) % 2 == 0;
                    let c = look.torso.map(|v| 1.0 - v);
                    if on {
                        c
                    } else {
                        look.torso.map(|v| v * 0.2)
                    }
                }
                _ if HEAD_ROWS.contains(&y) && in_cols(x, 7) => look.skin,
                _ if TORSO_ROWS.contains(&y) && in_cols(x, 12) => look.torso,
                _ if LEG_ROWS.contains(&y) && in_cols(x, 11) && !in_cols(x, 1) => look.legs,
                _ => nuisance.background,
            };
            for c in 0..3 {
                let mut v = base[c] * brightness + tint[c];
                if spec.noise_sigma > 0.0 {
                    v += noise.sample(noise_rng);
                }
                pixels.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    (pixels, cue)
}

/// Renders the whole set in memory; deterministic in `seed`.
pub fn render_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticSet> {
    spec.validate()?;
    let n = spec.n_identities;
    let n_twins = spec.twin_identities();
    // groups of identities sharing appearance: twin pairs first, then singles
    let mut groups: Vec<Vec<u64>> = (0..n_twins as u64 / 2).map(|k| vec![2 * k, 2 * k + 1]).collect();
    groups.extend((n_twins as u64..n as u64).map(|id| vec![id]));

    let mut split_rng = substream(seed, Stream::Split, 0);
    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut split_rng);
    // twin pairs and singles are held out in proportion, so held-out
    // identities carry the same share of hard negatives as training
    let want = (spec.holdout_fraction * n as f64).round() as usize;
    let want_pairs = ((spec.holdout_fraction * (n_twins / 2) as f64).round() as usize).min(want / 2);
    let want_singles = want - 2 * want_pairs;
    let (mut pairs, mut singles) = (0, 0);
    let mut held = vec![false; groups.len()];
    for g in order {
        let quota = if groups[g].len() == 2 { &mut pairs } else { &mut singles };
        let limit = if groups[g].len() == 2 { want_pairs } else { want_singles };
        if *quota < limit {
            held[g] = true;
            *quota += 1;
        }
    }

    let mut images = Vec::new();
    let mut twins = Vec::new();
    for (gi, group) in groups.iter().enumerate() {
        let mut rng = substream(seed, Stream::Synthetic, gi as u64);
        let look = Appearance {
            skin: color(&mut rng, 0.55, 0.85),
            torso: color(&mut rng, 0.05, 0.95),
            legs: color(&mut rng, 0.05, 0.95),
        };
        let placement = if rng.random_bool(0.5) {
            CuePlacement::Hat
        } else {
            CuePlacement::Bag
        };
        let nuisances: Vec<Nuisance> = (0..spec.images_per_identity)
            .map(|j| {
                let camera = j % spec.cameras;
                Nuisance {
                    background: [rng.random_range(0.3..0.6); 3],
                    shift: if camera == 0 {
                        0
                    } else {
                        rng.random_range(-MAX_SHIFT..=MAX_SHIFT) as isize
                    },
                }
            })
            .collect();
        if group.len() == 2 {
            twins.push((group[0], group[1]));
        }
        for (member, &id) in group.iter().enumerate() {
            let cue = (member == 1).then_some(placement);
            for (j, nuisance) in nuisances.iter().enumerate() {
                let camera = j % spec.cameras;
                let mut noise_rng = substream(seed, Stream::Synthetic, (1 << 32) + id * 4096 + j as u64);
                let (pixels, cue) = render(spec, &look, nuisance, camera, cue, &mut noise_rng);
                let split = match (held[gi], camera) {
                    (false, _) => Split::Train,
                    (true, 0) => Split::Query,
                    (true, _) => Split::Gallery,
                };
                images.push(SyntheticImage {
                    entry: ManifestEntry {
                        image_path: format!("images/{id:04}_{j:02}.ppm"),
                        identity_id: id,
                        camera_id: camera as u64,
                        split,
                    },
                    pixels,
                    cue,
                });
            }
        }
    }
    images.sort_by_key(|i| (i.entry.identity_id, i.entry.image_path.clone()));
    Ok(SyntheticSet {
        spec: spec.clone(),
        images,
        twins,
    })
}

/// Renders the set and writes `manifest.csv` plus `images/*.ppm` under `root`.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64, root: &Path) -> Result<(Manifest, SyntheticSet)> {
    let set = render_synthetic(spec, seed)?;
    let dir = root.join("images");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for img in &set.images {
        let path = root.join(&img.entry.image_path);
        let mut bytes = format!("P6\n{INPUT_WIDTH} {INPUT_HEIGHT}\n255\n").into_bytes();
        bytes.extend_from_slice(&img.pixels);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = set.manifest();
    manifest.write(root.join("manifest.csv"))?;
    Ok((manifest, set))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: &[u8], b: &[u8]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (*x as f64 - *y as f64).powi(2) / (255.0 * 255.0))
            .sum::<f64>()
            .sqrt()
    }

    #[test]
    fn global_color_separates_identities() {
        let set = render_synthetic(&SyntheticSpec::default(), 11).unwrap();
        let (mut intra, mut inter) = ((0.0, 0), (0.0, 0));
        for (i, a) in set.images.iter().enumerate() {
            for b in &set.images[i + 1..] {
                let d = dist(&a.pixels, &b.pixels);
                if a.entry.identity_id == b.entry.identity_id {
                    intra = (intra.0 + d, intra.1 + 1);
                } else {
                    inter = (inter.0 + d, inter.1 + 1);
                }
            }
        }
        assert!(inter.0 / inter.1 as f64 > intra.0 / intra.1 as f64);
    }

    #[test]
    fn twins_differ_only_inside_the_cue() {
        let spec = SyntheticSpec {
            local_cue_fraction: 0.5,
            ..Default::default()
        };
        let set = render_synthetic(&spec, 5).unwrap();
        assert_eq!(set.twins.len(), 5);
        for &(plain, cued) in &set.twins {
            for j in 0..spec.images_per_identity {
                let a = set.find(plain, j).unwrap();
                let b = set.find(cued, j).unwrap();
                let (_, region) = b.cue.clone().expect("cue twin carries the cue");
                assert!(a.cue.is_none());
                let (mut sq, mut n) = (0.0, 0usize);
                for y in 0..INPUT_HEIGHT {
                    for x in 0..INPUT_WIDTH {
                        if region.contains(y, x) {
                            continue;
                        }
                        for c in 0..3 {
                            let o = (y * INPUT_WIDTH + x) * 3 + c;
                            sq += ((a.pixels[o] as f64 - b.pixels[o] as f64) / 255.0).powi(2);
                            n += 1;
                        }
                    }
                }
                assert!((sq / n as f64).sqrt() <= 5.0 * spec.noise_sigma);
            }
        }
    }

    #[test]
    fn holdout_splits_by_camera() {
        let spec = SyntheticSpec {
            holdout_fraction: 0.25,
            ..Default::default()
        };
        let m = render_synthetic(&spec, 2).unwrap().manifest();
        assert_eq!(m.identities(Split::Query).len(), 5);
        assert_eq!(m.identities(Split::Query), m.identities(Split::Gallery));
        assert!(m.split(Split::Query).iter().all(|e| e.camera_id == 0));
        assert!(m.identities(Split::Train).is_disjoint(&m.identities(Split::Query)));
        m.validate().unwrap();
    }

    #[test]
    fn holdout_keeps_twins_together_in_proportion() {
        let spec = SyntheticSpec {
            local_cue_fraction: 0.5,
            holdout_fraction: 0.25,
            ..Default::default()
        };
        for seed in 0..5 {
            let set = render_synthetic(&spec, seed).unwrap();
            let m = set.manifest();
            let held = m.identities(Split::Query);
            assert_eq!(held.len(), 5);
            let held_pairs = set
                .twins
                .iter()
                .filter(|(a, b)| held.contains(a) && held.contains(b))
                .count();
            assert_eq!(held_pairs, 1);
            assert!(set.twins.iter().all(|(a, b)| held.contains(a) == held.contains(b)));
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let one = SyntheticSpec {
            n_identities: 1,
            ..Default::default()
        };
        assert!(render_synthetic(&one, 0).is_err());
        let big_cue = SyntheticSpec {
            cue_size: (12, 20),
            ..Default::default()
        };
        assert!(big_cue.validate().is_err());
    }
}
