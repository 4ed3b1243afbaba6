//! Datasets: CSV manifests, PPM images, mean images and augmentation.

mod image;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::warn;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use image::{
    flip_horizontal, load_image, read_ppm, resize_bilinear, translate, write_ppm, INPUT_HEIGHT, INPUT_WIDTH,
};
pub use synthetic::{
    generate_synthetic, render_synthetic, CuePlacement, Region, SyntheticImage, SyntheticSet, SyntheticSpec,
};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::InvalidArgument(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_path: String,
    pub identity_id: u64,
    pub camera_id: u64,
    pub split: Split,
}

/// Image list with identity, camera and split labels.
///
/// Stored as CSV with header `image_path,identity_id,camera_id,split`;
/// paths are relative to a dataset root.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Self {
        Manifest { entries }
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(file).map_err(|e| match e {
            Error::Csv(c) => Error::format(path, c.to_string()),
            other => other,
        })
    }

    pub fn from_reader(r: impl std::io::Read) -> Result<Self> {
        let mut reader = csv::Reader::from_reader(r);
        let entries = reader
            .deserialize()
            .collect::<std::result::Result<Vec<ManifestEntry>, _>>()?;
        Ok(Manifest { entries })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv()?).map_err(|e| Error::io(path, e))
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for e in &self.entries {
            w.serialize(e)?;
        }
        // serialize() only emits the header once a record is written
        if self.entries.is_empty() {
            w.write_record(["image_path", "identity_id", "camera_id", "split"])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn split(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }

    pub fn identities(&self, split: Split) -> BTreeSet<u64> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.identity_id)
            .collect()
    }

    /// Every query identity must also appear in the gallery.
    pub fn validate(&self) -> Result<()> {
        let gallery = self.identities(Split::Gallery);
        if let Some(id) = self
            .identities(Split::Query)
            .into_iter()
            .find(|id| !gallery.contains(id))
        {
            return Err(Error::InvalidArgument(format!(
                "manifest: query identity {id} has no gallery images"
            )));
        }
        Ok(())
    }

    /// Moves a fraction of the train identities (at least one when the
    /// fraction is positive) to the validation split, chosen by `seed`.
    /// A manifest that already has validation entries is returned unchanged.
    pub fn with_validation_split(&self, fraction: f64, seed: u64) -> Manifest {
        if fraction <= 0.0 || !self.split(Split::Val).is_empty() {
            return self.clone();
        }
        let mut ids: Vec<u64> = self.identities(Split::Train).into_iter().collect();
        if ids.len() < 2 {
            return self.clone();
        }
        let take = ((ids.len() as f64 * fraction).round() as usize).clamp(1, ids.len() - 1);
        ids.shuffle(&mut stream(seed, Stream::Split));
        let val: BTreeSet<u64> = ids[..take].iter().copied().collect();
        let entries = self
            .entries
            .iter()
            .map(|e| {
                let mut e = e.clone();
                if e.split == Split::Train && val.contains(&e.identity_id) {
                    e.split = Split::Val;
                }
                e
            })
            .collect();
        Manifest { entries }
    }
}

/// Labels of one loaded image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageLabel {
    pub identity: u64,
    pub camera: u64,
}

/// Images of one split held in memory, values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct ImageSet<T> {
    pub labels: Vec<ImageLabel>,
    pub images: Vec<Tensor<T>>,
}

impl<T: Real> ImageSet<T> {
    pub fn new(labels: Vec<ImageLabel>, images: Vec<Tensor<T>>) -> Result<Self> {
        if labels.len() != images.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} images",
                labels.len(),
                images.len()
            )));
        }
        Ok(ImageSet { labels, images })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Loads every entry of `split`, resolving paths against `root`.
    pub fn load(manifest: &Manifest, root: &Path, split: Split, size: (usize, usize)) -> Result<Self> {
        let entries = manifest.split(split);
        let images = entries
            .iter()
            .map(|e| load_image::<T>(&root.join(&e.image_path), size))
            .collect::<Result<Vec<_>>>()?;
        let labels = entries
            .iter()
            .map(|e| ImageLabel {
                identity: e.identity_id,
                camera: e.camera_id,
            })
            .collect();
        Ok(ImageSet { labels, images })
    }

    /// Image indices grouped by identity.
    pub fn by_identity(&self) -> BTreeMap<u64, Vec<usize>> {
        let mut m: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, l) in self.labels.iter().enumerate() {
            m.entry(l.identity).or_default().push(i);
        }
        m
    }

    /// Copy with `mean` subtracted from every image.
    pub fn centered(&self, mean: &Tensor<T>) -> Result<Self> {
        let images = self
            .images
            .iter()
            .map(|img| subtract(img, mean))
            .collect::<Result<Vec<_>>>()?;
        Ok(ImageSet {
            labels: self.labels.clone(),
            images,
        })
    }
}

/// Images of a manifest split by role.
#[derive(Clone, Debug)]
pub struct Dataset<T> {
    pub train: ImageSet<T>,
    pub val: ImageSet<T>,
    pub query: ImageSet<T>,
    pub gallery: ImageSet<T>,
}

impl<T: Real> Dataset<T> {
    pub fn load(manifest: &Manifest, root: &Path, size: (usize, usize)) -> Result<Self> {
        manifest.validate()?;
        Ok(Dataset {
            train: ImageSet::load(manifest, root, Split::Train, size)?,
            val: ImageSet::load(manifest, root, Split::Val, size)?,
            query: ImageSet::load(manifest, root, Split::Query, size)?,
            gallery: ImageSet::load(manifest, root, Split::Gallery, size)?,
        })
    }
}

/// Pixelwise mean over `images`, accumulated in f64.
pub fn compute_mean_image<T: Real>(images: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::InvalidArgument("mean image of an empty training split".into()))?;
    let shape = first.shape();
    let mut acc = vec![0.0f64; shape.len()];
    for img in images {
        if img.shape() != shape {
            return Err(Error::shape(
                "compute_mean_image",
                format!("image {} differs from {shape}", img.shape()),
            ));
        }
        for (a, v) in acc.iter_mut().zip(img.data()) {
            *a += v.as_f64();
        }
    }
    let n = images.len() as f64;
    Tensor::new(shape, acc.into_iter().map(|a| T::of(a / n)).collect())
}

pub fn subtract<T: Real>(img: &Tensor<T>, mean: &Tensor<T>) -> Result<Tensor<T>> {
    if img.shape() != mean.shape() {
        return Err(Error::shape(
            "mean subtraction",
            format!("{} vs {}", img.shape(), mean.shape()),
        ));
    }
    let data = img.data().iter().zip(mean.data()).map(|(a, b)| *a - *b).collect();
    Tensor::new(img.shape(), data)
}

/// Logs identities whose images cannot form a positive pair.
pub(crate) fn warn_singletons<T: Real>(set: &ImageSet<T>) {
    for (id, idx) in set.by_identity() {
        if idx.len() < 2 {
            warn!("identity {id} has a single image and contributes no positive pairs");
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn entry(path: &str, id: u64, cam: u64, split: Split) -> ManifestEntry {
        ManifestEntry {
            image_path: path.into(),
            identity_id: id,
            camera_id: cam,
            split,
        }
    }

    #[test]
    fn manifest_csv_round_trip() {
        let m = Manifest::new(vec![
            entry("a/1.ppm", 0, 1, Split::Train),
            entry("b,2.ppm", 3, 2, Split::Query),
            entry("c.gscn", 3, 1, Split::Gallery),
        ]);
        let text = m.to_csv().unwrap();
        assert!(text.starts_with("image_path,identity_id,camera_id,split\n"));
        assert_eq!(Manifest::from_reader(text.as_bytes()).unwrap(), m);
    }

    #[test]
    fn rejects_query_without_gallery() {
        let m = Manifest::new(vec![entry("q.ppm", 4, 1, Split::Query)]);
        assert!(m.validate().unwrap_err().to_string().contains("identity 4"));
    }

    #[test]
    fn validation_split_moves_whole_identities() {
        let entries = (0..20).flat_map(|id| (0..2).map(move |j| entry(&format!("{id}_{j}"), id, j, Split::Train)));
        let m = Manifest::new(entries.collect()).with_validation_split(0.1, 3);
        let val = m.identities(Split::Val);
        assert_eq!(val.len(), 2);
        assert!(m.identities(Split::Train).is_disjoint(&val));
        assert_eq!(m.split(Split::Val).len(), 4);
    }

    #[test]
    fn mean_image_examples() {
        let a = Tensor::<f64>::from_fn(Shape::new(1, 2, 2, 3), |_, h, w, c| (h + w + c) as f64 * 0.1);
        assert_eq!(compute_mean_image(std::slice::from_ref(&a)).unwrap(), a);
        let b = a.map(|v| v + 0.3);
        let m = compute_mean_image(&[a.clone(), b]).unwrap();
        assert!(m.max_abs_diff(&a.map(|v| v + 0.15)) < 1e-15);
        assert!(compute_mean_image::<f32>(&[]).is_err());
    }
}
