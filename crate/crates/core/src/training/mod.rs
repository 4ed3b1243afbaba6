//! Contrastive training of siamese networks with RMSProp.

mod loss;
mod optim;
mod pairs;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

pub use loss::{contrastive_loss, contrastive_loss_node, DEFAULT_MARGIN};
pub use optim::{RmsProp, RmsPropConfig};
pub use pairs::{build_epoch_pairs, ImageRef, Pair, PairConfig};

use crate::data::{compute_mean_image, warn_singletons, Dataset, ImageSet};
use crate::error::{Error, Result};
use crate::evaluation::{cmc_map, distance_matrix_centered, Protocol};
use crate::layers::Mode;
use crate::network::{ForwardOptions, ForwardRecord, NetworkConfig, NetworkParams};
use crate::tensor::{Graph, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub margin: f64,
    pub optimizer: RmsPropConfig,
    /// Pairs per iteration.
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many iterations in total, mid-epoch if needed.
    pub max_iterations: Option<usize>,
    pub pairs: PairConfig,
    /// Fraction of training identities moved to validation when the
    /// manifest has no validation split.
    pub val_fraction: f64,
    /// Epochs without sufficient validation improvement before stopping.
    pub early_stop_patience: usize,
    /// Required Rank-1 improvement, in percentage points.
    pub early_stop_min_delta: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            margin: DEFAULT_MARGIN,
            optimizer: RmsPropConfig::default(),
            batch_size: 100,
            epochs: 20,
            max_iterations: None,
            pairs: PairConfig::default(),
            val_fraction: 0.1,
            early_stop_patience: 3,
            early_stop_min_delta: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if !(self.margin > 0.0) {
            return bad("margin must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        self.optimizer.validate()
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MetricsRecord {
    Iteration {
        iter: usize,
        epoch: usize,
        lr: f64,
        loss: f64,
    },
    Epoch {
        epoch: usize,
        val_rank1: Option<f64>,
        val_map: Option<f64>,
    },
}

pub struct TrainOutcome<T> {
    pub params: NetworkParams<T>,
    pub mean_image: Tensor<T>,
    /// Mean batch loss per iteration.
    pub losses: Vec<f64>,
    pub log: Vec<MetricsRecord>,
    pub checkpoints: Vec<PathBuf>,
    pub stopped_early: bool,
}

struct MetricsSink {
    file: Option<fs::File>,
    path: PathBuf,
    records: Vec<MetricsRecord>,
}

impl MetricsSink {
    fn push(&mut self, r: MetricsRecord) -> Result<()> {
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&r)?;
            writeln!(f, "{line}").map_err(|e| Error::io(&self.path, e))?;
        }
        self.records.push(r);
        Ok(())
    }
}

/// Stacks the first images of every pair, then the second images.
fn assemble<T: Real>(batch: &[Pair], set: &ImageSet<T>, mean: &Tensor<T>) -> Result<Tensor<T>> {
    let firsts = batch.iter().map(|p| p.a.render(set, mean));
    let seconds = batch.iter().map(|p| p.b.render(set, mean));
    let images = firsts.chain(seconds).collect::<Result<Vec<_>>>()?;
    Tensor::stack(&images.iter().collect::<Vec<_>>())
}

/// One optimization step on a batch; returns the mean batch loss. A
/// non-finite loss is returned without touching the parameters.
pub fn train_step<T: Real>(
    params: &mut NetworkParams<T>,
    opt: &mut RmsProp<T>,
    batch: Tensor<T>,
    labels: &[u8],
    margin: f64,
    lr: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g);
    let x = g.constant(batch);
    let mut rec = ForwardRecord::default();
    let emb = params.forward_stacked(&mut g, &vars, x, ForwardOptions::new(Mode::Train), &mut rec)?;
    let n = labels.len();
    let e1 = g.slice_batch(emb, 0, n)?;
    let e2 = g.slice_batch(emb, n, n)?;
    let d = g.pair_distance(e1, e2)?;
    let loss = loss::contrastive_loss_node(&mut g, d, labels, margin)?;
    let value = g.value(loss).data()[0].as_f64();
    if !value.is_finite() {
        return Ok(value);
    }
    let mut grads = g.backward(loss)?;
    let ordered = vars.ordered();
    let grads: Vec<Tensor<T>> = ordered
        .iter()
        .zip(params.named_trainable())
        .map(|(v, (_, t))| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    opt.step(&mut params.trainable_mut(), &grads, lr)?;
    params.clamp_gate_p();
    params.update_running_stats(&g, &rec);
    Ok(value)
}

/// Validation Rank-1 (fraction) and mAP of `set` ranked against itself.
pub fn self_ranking<T: Real>(params: &NetworkParams<T>, set: &ImageSet<T>, mean: &Tensor<T>) -> Result<(f64, f64)> {
    let images = set.centered(mean)?;
    let dm = distance_matrix_centered(params, &images.images, &images.labels, &images.images, &images.labels)?;
    let r = cmc_map(&dm, Protocol::Sq);
    Ok((r.rank(1), r.map))
}

/// Trains a fresh network on `data.train`, validating on `data.val`.
///
/// With `out_dir`, writes `metrics.jsonl` and one `epoch_{k}.ckpt` per
/// epoch (1-based). Identical inputs and seed give identical outputs.
pub fn train<T: Real>(
    net: NetworkConfig,
    cfg: &TrainConfig,
    data: &Dataset<T>,
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut params = NetworkParams::<T>::init(net, seed)?;
    let mean = compute_mean_image(&data.train.images)?;
    warn_singletons(&data.train);

    let mut sink = MetricsSink {
        file: None,
        path: PathBuf::new(),
        records: Vec::new(),
    };
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        sink.path = dir.join("metrics.jsonl");
        sink.file = Some(fs::File::create(&sink.path).map_err(|e| Error::io(&sink.path, e))?);
    }

    let mut opt = RmsProp::new(
        cfg.optimizer.clone(),
        params.named_trainable().into_iter().map(|(_, t)| t),
    );
    let mut losses = Vec::new();
    let mut checkpoints = Vec::new();
    let mut best: Option<f64> = None;
    let mut stale = 0;
    let mut stopped_early = false;
    let mut iter = 0;
    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.learning_rate_at(epoch);
        let pairs = build_epoch_pairs(&data.train, &cfg.pairs, seed, epoch)?;
        info!("epoch {}: {} pairs, lr {lr:.3e}", epoch + 1, pairs.len());
        let mut capped = false;
        for batch in pairs.chunks(cfg.batch_size) {
            if cfg.max_iterations.is_some_and(|m| iter >= m) {
                capped = true;
                break;
            }
            iter += 1;
            let x = assemble(batch, &data.train, &mean)?;
            let labels: Vec<u8> = batch.iter().map(|p| p.label).collect();
            let loss = train_step(&mut params, &mut opt, x, &labels, cfg.margin, lr)?;
            if !loss.is_finite() || !params.named_trainable().iter().all(|(_, t)| t.is_finite()) {
                return Err(Error::Diverged { iteration: iter, loss });
            }
            losses.push(loss);
            sink.push(MetricsRecord::Iteration {
                iter,
                epoch: epoch + 1,
                lr,
                loss,
            })?;
            if iter % 10 == 0 || iter == 1 {
                info!("iter {iter}: loss {loss:.5}");
            }
        }

        let (val_rank1, val_map) = if data.val.is_empty() {
            (None, None)
        } else {
            let (r1, map) = self_ranking(&params, &data.val, &mean)?;
            info!("epoch {}: val rank-1 {:.2}%, mAP {:.4}", epoch + 1, r1 * 100.0, map);
            (Some(r1), Some(map))
        };
        sink.push(MetricsRecord::Epoch {
            epoch: epoch + 1,
            val_rank1,
            val_map,
        })?;
        if let Some(dir) = out_dir {
            let path = dir.join(format!("epoch_{}.ckpt", epoch + 1));
            params.save(&path, Some(epoch + 1), Some(&mean))?;
            checkpoints.push(path);
        }
        if capped || cfg.max_iterations.is_some_and(|m| iter >= m) {
            break 'epochs;
        }
        if let Some(r1) = val_rank1 {
            let points = r1 * 100.0;
            match best {
                Some(b) if points <= b + cfg.early_stop_min_delta => {
                    stale += 1;
                    if stale >= cfg.early_stop_patience {
                        info!("validation rank-1 saturated; stopping after epoch {}", epoch + 1);
                        stopped_early = true;
                        break 'epochs;
                    }
                }
                _ => {
                    best = Some(best.map_or(points, |b: f64| b.max(points)));
                    stale = 0;
                }
            }
        }
    }
    Ok(TrainOutcome {
        params,
        mean_image: mean,
        losses,
        log: sink.records,
        checkpoints,
        stopped_early,
    })
}
