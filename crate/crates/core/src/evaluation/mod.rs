//! Re-identification scoring: distance matrices, CMC/mAP and gate dumps.

mod ranking;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

pub use ranking::{cmc_map, fuse_multi_query, Protocol, RankingResult, ResultsSummary};

use crate::data::{subtract, ImageLabel, ImageSet};
use crate::error::{Error, Result};
use crate::gate::GateMask;
use crate::layers::Mode;
use crate::network::{pair_distance, Checkpoint, ForwardOptions, ForwardRecord, GatePlacement, NetworkParams};
use crate::tensor::{write_tensor, Graph, Real, Shape, Tensor};

/// Pairs pushed through the gated head at once.
const PAIR_CHUNK: usize = 64;

/// Query × gallery distances with the labels of both sides.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    /// Row-major, `rows × cols`.
    pub values: Vec<f64>,
    pub query: Vec<ImageLabel>,
    pub gallery: Vec<ImageLabel>,
}

impl DistanceMatrix {
    pub fn new(values: Vec<f64>, query: Vec<ImageLabel>, gallery: Vec<ImageLabel>) -> Result<Self> {
        let (rows, cols) = (query.len(), gallery.len());
        if values.len() != rows * cols {
            return Err(Error::shape(
                "distance_matrix",
                format!("{} values for {rows}×{cols}", values.len()),
            ));
        }
        if let Some(v) = values.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::NonFinite(format!("distance matrix entry {v}")));
        }
        Ok(DistanceMatrix {
            rows,
            cols,
            values,
            query,
            gallery,
        })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    /// Elementwise mean of matrices over the same query and gallery.
    pub fn average(parts: &[DistanceMatrix]) -> Result<DistanceMatrix> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("no distance matrices to average".into()))?;
        if parts
            .iter()
            .any(|p| p.query != first.query || p.gallery != first.gallery)
        {
            return Err(Error::InvalidArgument(
                "distance matrices cover different query or gallery sets".into(),
            ));
        }
        let k = parts.len() as f64;
        let values = (0..first.values.len())
            .map(|i| parts.iter().map(|p| p.values[i]).sum::<f64>() / k)
            .collect();
        DistanceMatrix::new(values, first.query.clone(), first.gallery.clone())
    }

    /// `(1, rows, cols, 1)` tensor for the binary container.
    pub fn to_tensor(&self) -> Tensor<f64> {
        Tensor::new(Shape::new(1, self.rows, self.cols, 1), self.values.clone()).expect("rows × cols")
    }

    pub fn write_container(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensor(path, &self.to_tensor())
    }

    /// One line per query: identity, camera, then the distances.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("query_identity,query_camera");
        for j in 0..self.cols {
            let _ = write!(s, ",g{j}");
        }
        s.push('\n');
        for (i, q) in self.query.iter().enumerate() {
            let _ = write!(s, "{},{}", q.identity, q.camera);
            for v in self.row(i) {
                let _ = write!(s, ",{v:e}");
            }
            s.push('\n');
        }
        s
    }
}

fn centered<T: Real>(set: &ImageSet<T>, mean: Option<&Tensor<T>>) -> Result<Vec<Tensor<T>>> {
    match mean {
        Some(m) => set.images.iter().map(|img| subtract(img, m)).collect(),
        None => Ok(set.images.clone()),
    }
}

fn prefixes<T: Real>(params: &NetworkParams<T>, images: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    images
        .par_chunks(PAIR_CHUNK)
        .map(|chunk| {
            let refs: Vec<&Tensor<T>> = chunk.iter().collect();
            let out = params.prefix(&Tensor::stack(&refs)?)?;
            Ok((0..chunk.len()).map(|i| out.sample(i)).collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()
        .map(|v| v.into_iter().flatten().collect())
}

/// Distances of every query against every gallery image. Images must
/// already be mean-subtracted.
///
/// A baseline embeds each image once. A gated network caches each image's
/// activations up to its first gate and runs the remaining layers per pair.
/// Rows are computed in parallel and placed by index, so the result does
/// not depend on the thread count.
pub fn distance_matrix_centered<T: Real>(
    params: &NetworkParams<T>,
    query: &[Tensor<T>],
    query_labels: &[ImageLabel],
    gallery: &[Tensor<T>],
    gallery_labels: &[ImageLabel],
) -> Result<DistanceMatrix> {
    if query.is_empty() || gallery.is_empty() {
        return Err(Error::InvalidArgument("query and gallery must be nonempty".into()));
    }
    let q = prefixes(params, query)?;
    let g = prefixes(params, gallery)?;
    let rows: Vec<Vec<f64>> = if params.config().is_baseline() {
        q.par_iter()
            .map(|a| g.iter().map(|b| pair_distance(a.data(), b.data()).as_f64()).collect())
            .collect()
    } else {
        q.par_iter()
            .map(|a| -> Result<Vec<f64>> {
                let mut row = Vec::with_capacity(g.len());
                for chunk in g.chunks(PAIR_CHUNK) {
                    let refs: Vec<&Tensor<T>> = chunk.iter().collect();
                    let firsts: Vec<&Tensor<T>> = vec![a; chunk.len()];
                    let (e1, e2) = params.embed_from_prefix(&Tensor::stack(&firsts)?, &Tensor::stack(&refs)?)?;
                    let per = e1.shape().sample_len();
                    for k in 0..chunk.len() {
                        let r = k * per..(k + 1) * per;
                        row.push(pair_distance(&e1.data()[r.clone()], &e2.data()[r]).as_f64());
                    }
                }
                Ok(row)
            })
            .collect::<Result<_>>()?
    };
    DistanceMatrix::new(rows.concat(), query_labels.to_vec(), gallery_labels.to_vec())
}

/// Distances from one checkpoint, subtracting its stored mean image.
pub fn compute_distance_matrix<T: Real>(
    ckpt: &Checkpoint<T>,
    query: &ImageSet<T>,
    gallery: &ImageSet<T>,
) -> Result<DistanceMatrix> {
    let mean = ckpt.mean_image.as_ref();
    distance_matrix_centered(
        &ckpt.params,
        &centered(query, mean)?,
        &query.labels,
        &centered(gallery, mean)?,
        &gallery.labels,
    )
}

/// Per-pair distances averaged over several checkpoints.
pub fn averaged_distance_matrix<T: Real>(
    ckpts: &[Checkpoint<T>],
    query: &ImageSet<T>,
    gallery: &ImageSet<T>,
) -> Result<DistanceMatrix> {
    if ckpts.is_empty() {
        return Err(Error::InvalidArgument("at least one checkpoint is required".into()));
    }
    let parts = ckpts
        .iter()
        .map(|c| compute_distance_matrix(c, query, gallery))
        .collect::<Result<Vec<_>>>()?;
    DistanceMatrix::average(&parts)
}

/// Gate values of every gate for the pair `(img1, img2)` (mean-subtracted),
/// computed in eval mode.
pub fn gate_masks<T: Real>(
    params: &NetworkParams<T>,
    img1: &Tensor<T>,
    img2: &Tensor<T>,
) -> Result<Vec<(GatePlacement, GateMask<T>)>> {
    if params.config().is_baseline() {
        return Err(Error::InvalidArgument(
            "the model has no gates (baseline network); gate masks need a gated model".into(),
        ));
    }
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let x = g.constant(Tensor::stack(&[img1, img2])?);
    let mut rec = ForwardRecord::default();
    params.forward_stacked(&mut g, &vars, x, ForwardOptions::new(Mode::Eval), &mut rec)?;
    rec.gates
        .iter()
        .map(|&(pl, v)| Ok((pl, GateMask::from_tensor(g.value(v), 0)?)))
        .collect()
}

/// Writes `gate_{a}-{b}.csv` (rows × channels) and
/// `gate_{a}-{b}_profile.csv` (channel means per row) for every gate.
pub fn dump_gate_masks<T: Real>(
    params: &NetworkParams<T>,
    img1: &Tensor<T>,
    img2: &Tensor<T>,
    out_dir: &Path,
) -> Result<Vec<(GatePlacement, GateMask<T>, PathBuf)>> {
    let masks = gate_masks(params, img1, img2)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    masks
        .into_iter()
        .map(|(pl, m)| {
            let path = out_dir.join(format!("gate_{}.csv", pl.label()));
            fs::write(&path, m.to_csv()).map_err(|e| Error::io(&path, e))?;
            let profile = out_dir.join(format!("gate_{}_profile.csv", pl.label()));
            fs::write(&profile, m.profile_csv()).map_err(|e| Error::io(&profile, e))?;
            Ok((pl, m, path))
        })
        .collect()
}
