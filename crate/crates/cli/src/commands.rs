//! Subcommand implementations, callable without spawning the binary.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gscnn::data::{
    generate_synthetic, load_image, Dataset, ImageSet, Manifest, Split, SyntheticSpec, INPUT_HEIGHT, INPUT_WIDTH,
};
use gscnn::evaluation::{averaged_distance_matrix, cmc_map, dump_gate_masks, Protocol, ResultsSummary};
use gscnn::gate::{matching_gate_forward, GateVars, MatchingGateParams};
use gscnn::layers::{convblock_forward, ConvBlockParams, ConvBlockSpec, ConvBlockVars, Mode};
use gscnn::network::{Checkpoint, ForwardOptions, ForwardRecord, GatePlacement, NetworkParams};
use gscnn::rng::{stream, Stream};
use gscnn::tensor::{gradcheck, GradCheckOptions, GradCheckReport};
use gscnn::training::{contrastive_loss_node, train};
use gscnn::{Graph, Real, Shape, Tensor, Var};
use log::info;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::{Precision, RunConfig};

const INPUT_SIZE: (usize, usize) = (INPUT_HEIGHT, INPUT_WIDTH);

fn create_out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.out_dir).with_context(|| format!("creating {}", cfg.out_dir.display()))?;
    Ok(&cfg.out_dir)
}

/// What a training run produced.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub checkpoints: Vec<PathBuf>,
    pub losses: Vec<f64>,
    pub stopped_early: bool,
}

/// Trains on the manifest's train split; writes `config.toml`,
/// `metrics.jsonl` and one checkpoint per epoch under the output directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let net = cfg.network()?;
    let tcfg = cfg.training()?;
    let manifest = Manifest::read(cfg.manifest_path()?)?.with_validation_split(cfg.val_fraction, cfg.seed);
    let root = cfg.dataset_root();
    let out = create_out_dir(cfg)?;
    fs::write(out.join("config.toml"), cfg.to_toml()?)?;
    match cfg.precision {
        Precision::F32 => train_as::<f32>(cfg, net, &tcfg, &manifest, &root, out),
        Precision::F64 => train_as::<f64>(cfg, net, &tcfg, &manifest, &root, out),
    }
}

fn train_as<T: Real>(
    cfg: &RunConfig,
    net: gscnn::network::NetworkConfig,
    tcfg: &gscnn::training::TrainConfig,
    manifest: &Manifest,
    root: &Path,
    out: &Path,
) -> Result<TrainSummary> {
    let data = Dataset::<T>::load(manifest, root, INPUT_SIZE)?;
    info!(
        "{} train, {} val, {} query, {} gallery images",
        data.train.len(),
        data.val.len(),
        data.query.len(),
        data.gallery.len()
    );
    let outcome = train(net, tcfg, &data, cfg.seed, Some(out))?;
    Ok(TrainSummary {
        checkpoints: outcome.checkpoints,
        losses: outcome.losses,
        stopped_early: outcome.stopped_early,
    })
}

/// Ranks the query split against the gallery with distances averaged over
/// `checkpoints`; writes `results.json` (and the distance matrix when
/// `export_distances`) under the output directory.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoints: &[PathBuf],
    protocol: Protocol,
    export_distances: bool,
) -> Result<ResultsSummary> {
    if checkpoints.is_empty() {
        bail!("no checkpoints given (pass --checkpoint at least once)");
    }
    let manifest = Manifest::read(cfg.manifest_path()?)?;
    manifest.validate()?;
    match cfg.precision {
        Precision::F32 => eval_as::<f32>(cfg, &manifest, checkpoints, protocol, export_distances),
        Precision::F64 => eval_as::<f64>(cfg, &manifest, checkpoints, protocol, export_distances),
    }
}

fn load_checkpoints<T: Real>(paths: &[PathBuf]) -> Result<Vec<Checkpoint<T>>> {
    let ckpts = paths
        .iter()
        .map(|p| NetworkParams::<T>::load(p).with_context(|| format!("loading {}", p.display())))
        .collect::<Result<Vec<_>>>()?;
    if let Some((i, _)) = ckpts
        .iter()
        .enumerate()
        .find(|(_, c)| c.params.config() != ckpts[0].params.config())
    {
        bail!(
            "checkpoint/config mismatch: {} and {} hold different network configurations",
            paths[0].display(),
            paths[i].display()
        );
    }
    Ok(ckpts)
}

fn eval_as<T: Real>(
    cfg: &RunConfig,
    manifest: &Manifest,
    paths: &[PathBuf],
    protocol: Protocol,
    export_distances: bool,
) -> Result<ResultsSummary> {
    let ckpts = load_checkpoints::<T>(paths)?;
    let root = cfg.dataset_root();
    let query = ImageSet::<T>::load(manifest, &root, Split::Query, INPUT_SIZE)?;
    let gallery = ImageSet::<T>::load(manifest, &root, Split::Gallery, INPUT_SIZE)?;
    if query.is_empty() || gallery.is_empty() {
        bail!("manifest needs nonempty query and gallery splits");
    }
    let dm = averaged_distance_matrix(&ckpts, &query, &gallery)?;
    let summary = cmc_map(&dm, protocol).summary();
    let out = create_out_dir(cfg)?;
    fs::write(out.join("results.json"), serde_json::to_string_pretty(&summary)? + "\n")?;
    if export_distances {
        fs::write(out.join("distances.csv"), dm.to_csv())?;
        dm.write_container(out.join("distances.gscn"))?;
    }
    Ok(summary)
}

/// Options of the gradient check beyond the network settings.
#[derive(Clone, Debug)]
pub struct GradcheckOptions {
    pub coords: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Op whose backward is deliberately scaled (negative control).
    pub corrupt: Option<String>,
    /// Resample coordinates whose difference window straddles a kink.
    pub skip_kinks: bool,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            coords: 200,
            step: 1e-5,
            tolerance: 1e-4,
            corrupt: None,
            skip_kinks: true,
        }
    }
}

/// One checked tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckLine {
    pub name: String,
    pub checked: usize,
    /// Coordinates differenced with a reduced step near a kink.
    pub reduced_step: usize,
    pub min_step: f64,
    pub skipped: usize,
    pub max_rel_error: f64,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst: (f64, f64),
}

#[derive(Clone, Debug, Default)]
pub struct GradcheckSummary {
    pub lines: Vec<GradcheckLine>,
    pub tolerance: f64,
}

impl GradcheckSummary {
    pub fn passed(&self) -> bool {
        self.lines.iter().all(|l| l.max_rel_error < self.tolerance)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.lines.iter().map(|l| l.max_rel_error).fold(0.0, f64::max)
    }

    fn extend(&mut self, prefix: &str, names: &[String], report: &GradCheckReport) {
        for t in &report.tensors {
            self.lines.push(GradcheckLine {
                name: format!("{prefix}{}", names[t.tensor]),
                checked: t.checked,
                reduced_step: t.reduced_step,
                min_step: t.min_step,
                skipped: t.skipped,
                max_rel_error: t.max_rel_error,
                worst: (t.analytic, t.numeric),
            });
        }
    }
}

fn normal(shape: Shape, rng: &mut impl Rng, scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| scale * rng.sample::<f64, _>(StandardNormal))
}

/// Scalar `Σ y ⊙ r` for a fixed random `r`, so every output entry matters.
fn project(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    let r = normal(g.shape(y), &mut stream(seed, Stream::Sampling), 1.0);
    let c = g.constant(r);
    let m = g.mul(y, c)?;
    Ok(g.sum(m))
}

/// f64 central-difference checks of a ConvBlock (train mode), a matching
/// gate, and the contrastive loss through the whole network (eval mode)
/// on one random pair.
pub fn cmd_gradcheck(cfg: &RunConfig, opts: &GradcheckOptions) -> Result<GradcheckSummary> {
    let net = cfg.network()?;
    let gc = GradCheckOptions {
        coords_per_tensor: opts.coords,
        step: opts.step,
        seed: cfg.seed,
        skip_kinks: opts.skip_kinks,
        ..Default::default()
    };
    let corrupt = |g: &mut Graph<f64>| {
        if let Some(op) = &opts.corrupt {
            g.corrupt_backward(leak(op), 1.5);
        }
    };
    let mut rng = stream(cfg.seed, Stream::Sampling);
    let mut summary = GradcheckSummary {
        tolerance: opts.tolerance,
        ..Default::default()
    };

    // ConvBlock with batch statistics. The conv bias is held constant: the
    // batch mean cancels it, so its true gradient is exactly zero.
    let spec = ConvBlockSpec::new(3, 3, 2, 3, 1);
    let mut block = ConvBlockParams::<f64>::init(spec, &mut stream(cfg.seed, Stream::Init));
    block.bn_gamma = normal(Shape::vector(3), &mut rng, 0.3).map(|v| 1.0 + v);
    block.bn_beta = normal(Shape::vector(3), &mut rng, 0.3);
    block.prelu_slope = normal(Shape::vector(3), &mut rng, 0.3).map(|v| 0.25 + v);
    let x = normal(Shape::new(3, 5, 4, 2), &mut rng, 1.0);
    let params = vec![
        x,
        block.filters.clone(),
        block.bn_gamma.clone(),
        block.bn_beta.clone(),
        block.prelu_slope.clone(),
    ];
    let names: Vec<String> = ["input", "filters", "bn_gamma", "bn_beta", "prelu_slope"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let report = gradcheck(
        &params,
        |g, v| {
            corrupt(g);
            let bias = g.constant(block.bias.clone());
            let vars = ConvBlockVars {
                filters: v[1],
                bias,
                gamma: v[2],
                beta: v[3],
                slope: v[4],
            };
            let out = convblock_forward(g, v[0], &vars, &block, Mode::Train)?;
            Ok(project(g, out.out, cfg.seed ^ 1).expect("shapes agree"))
        },
        &gc,
    )?;
    summary.extend("layer/convblock.", &names, &report);

    // Matching gate on its own, with a narrow kernel so the mask varies.
    let mut gate = MatchingGateParams::<f64>::init(4, 3, 1.0, &mut stream(cfg.seed, Stream::Init));
    gate.b = normal(Shape::vector(3), &mut rng, 0.1);
    let x1 = normal(Shape::new(2, 3, 4, 3), &mut rng, 1.0);
    let x2 = normal(Shape::new(2, 3, 4, 3), &mut rng, 1.0);
    let mut params = vec![x1, x2];
    params.extend(gate.trainable().into_iter().cloned());
    let mut names: Vec<String> = vec!["input1".into(), "input2".into()];
    names.extend(gscnn::gate::GATE_TRAINABLE.iter().map(|s| s.to_string()));
    let report = gradcheck(
        &params,
        |g, v| {
            corrupt(g);
            let vars = GateVars::from_ordered(&v[2..]);
            let out = matching_gate_forward(g, v[0], v[1], &vars, net.gate_gradient)?;
            let l1 = project(g, out.a1, cfg.seed ^ 2).expect("shapes agree");
            let l2 = project(g, out.a2, cfg.seed ^ 3).expect("shapes agree");
            g.add(l1, l2)
        },
        &gc,
    )?;
    summary.extend("layer/gate.", &names, &report);

    // Whole network on one pair with the contrastive loss of a positive pair.
    // Running statistics are set from the pair itself, so eval-mode
    // activations are normalized as in a trained model rather than left at
    // the scale of the raw input.
    let mut model = NetworkParams::<f64>::init(net.clone(), cfg.seed)?;
    let (h, w, c) = net.input_shape;
    let pair = normal(Shape::new(2, h, w, c), &mut rng, 0.3);
    model.calibrate_running_stats(&pair)?;
    let named = model.named_trainable();
    let names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let params: Vec<Tensor<f64>> = named.into_iter().map(|(_, t)| t.clone()).collect();
    let margin = cfg.margin;
    let report = gradcheck(
        &params,
        |g, v| {
            corrupt(g);
            let vars = model.vars_from_ordered(v)?;
            let x = g.constant(pair.clone());
            let mut rec = ForwardRecord::default();
            let emb = model.forward_stacked(g, &vars, x, ForwardOptions::new(Mode::Eval), &mut rec)?;
            let e1 = g.slice_batch(emb, 0, 1)?;
            let e2 = g.slice_batch(emb, 1, 1)?;
            let d = g.pair_distance(e1, e2)?;
            contrastive_loss_node(g, d, &[0], margin)
        },
        &gc,
    )?;
    summary.extend("", &names, &report);
    Ok(summary)
}

/// Op names are `&'static str`; the handful of distinct names passed on
/// the command line are leaked once.
fn leak(s: &str) -> &'static str {
    Box::leak(s.to_string().into_boxed_str())
}

/// Generates a synthetic dataset (`manifest.csv` plus images) under the
/// output directory.
pub fn cmd_synth(cfg: &RunConfig, spec: &SyntheticSpec) -> Result<Manifest> {
    let out = create_out_dir(cfg)?;
    let (manifest, _) = generate_synthetic(spec, cfg.seed, out)?;
    Ok(manifest)
}

/// Writes per-gate CSV grids and row profiles for one image pair.
pub fn cmd_dump_gates(cfg: &RunConfig, checkpoint: &Path, img1: &Path, img2: &Path) -> Result<Vec<PathBuf>> {
    let ckpt = NetworkParams::<f64>::load(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    if ckpt.params.config().is_baseline() {
        bail!("the checkpoint is a baseline network without gates; dump-gates needs a gated model");
    }
    let root = cfg.dataset_root();
    let resolve = |p: &Path| {
        if p.is_relative() && !p.exists() {
            root.join(p)
        } else {
            p.to_path_buf()
        }
    };
    let load = |p: &Path| -> Result<Tensor<f64>> {
        let img = load_image::<f64>(&resolve(p), INPUT_SIZE)?;
        Ok(match &ckpt.mean_image {
            Some(m) => gscnn::data::subtract(&img, m)?,
            None => img,
        })
    };
    let (a, b) = (load(img1)?, load(img2)?);
    let out = create_out_dir(cfg)?;
    let dumped = dump_gate_masks(&ckpt.params, &a, &b, out)?;
    Ok(dumped.into_iter().map(|(_, _, p)| p).collect())
}

/// Profile CSV path written by [`cmd_dump_gates`] for `placement`.
pub fn profile_path(out_dir: &Path, placement: GatePlacement) -> PathBuf {
    out_dir.join(format!("gate_{}_profile.csv", placement.label()))
}
