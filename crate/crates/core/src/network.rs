//! Baseline and gated siamese networks.
//!
//! Both streams share every parameter. A pair batch of `n` pairs travels
//! through the network as one stacked batch of `2n` images, first streams
//! followed by second streams, so batch normalization sees both halves and
//! a matching gate pairs entry `i` with entry `n + i`.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gate::{matching_gate_forward, GateVars, MatchingGateParams, GATE_TRAINABLE};
use crate::layers::{
    convblock_forward, l2norm_channels, ConvBlockParams, ConvBlockSpec, ConvBlockVars, Mode, BLOCK_RUNNING,
    BLOCK_TRAINABLE, BN_MOMENTUM,
};
use crate::rng::{stream, Stream};
use crate::tensor::{decode_tensor, encode_tensor, DType, Graph, Real, Shape, Tensor, Var};

/// Number of pooled blocks at the start of the network.
const POOLED_BLOCKS: usize = 3;

/// Layer boundary a matching gate sits on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum GatePlacement {
    #[serde(rename = "4-5")]
    After4,
    #[serde(rename = "5-6")]
    After5,
    #[serde(rename = "6-7")]
    After6,
}

impl GatePlacement {
    pub const ALL: [GatePlacement; 3] = [GatePlacement::After4, GatePlacement::After5, GatePlacement::After6];

    /// Zero-based index of the block the gate feeds.
    pub fn next_block(self) -> usize {
        match self {
            GatePlacement::After4 => 4,
            GatePlacement::After5 => 5,
            GatePlacement::After6 => 6,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            GatePlacement::After4 => "4-5",
            GatePlacement::After5 => "5-6",
            GatePlacement::After6 => "6-7",
        }
    }

    /// Name prefix of the gate's tensors in checkpoints.
    pub fn tensor_prefix(self) -> &'static str {
        match self {
            GatePlacement::After4 => "gate4_5",
            GatePlacement::After5 => "gate5_6",
            GatePlacement::After6 => "gate6_7",
        }
    }
}

impl fmt::Display for GatePlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for GatePlacement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "4-5" | "45" => Ok(GatePlacement::After4),
            "5-6" | "56" => Ok(GatePlacement::After5),
            "6-7" | "67" => Ok(GatePlacement::After6),
            other => Err(Error::InvalidArgument(format!(
                "unknown gate placement {other:?} (expected 4-5, 5-6 or 6-7)"
            ))),
        }
    }
}

/// Parses `none`, `all`, or a comma separated list such as `4-5,5-6`.
pub fn parse_gate_list(s: &str) -> Result<BTreeSet<GatePlacement>> {
    match s.trim() {
        "" | "none" => Ok(BTreeSet::new()),
        "all" => Ok(GatePlacement::ALL.into_iter().collect()),
        list => list.split(',').map(str::parse).collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// `(height, width, channels)` of every input image.
    pub input_shape: (usize, usize, usize),
    pub gate_placements: BTreeSet<GatePlacement>,
    pub include_final_fc: bool,
    pub embedding_dim: usize,
    /// Initial value of every gate variance entry.
    pub p_init: f64,
    /// Differentiate through the gate mask into the partner stream. When
    /// false the mask is a constant on backward.
    pub gate_gradient: bool,
    /// L2-normalize the embedding before distances are taken.
    pub normalize_embedding: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig::gated()
    }
}

impl NetworkConfig {
    pub fn baseline() -> Self {
        NetworkConfig {
            input_shape: (128, 64, 3),
            gate_placements: BTreeSet::new(),
            include_final_fc: true,
            embedding_dim: 150,
            p_init: 4.0,
            gate_gradient: true,
            normalize_embedding: false,
        }
    }

    pub fn gated() -> Self {
        NetworkConfig {
            gate_placements: GatePlacement::ALL.into_iter().collect(),
            ..Self::baseline()
        }
    }

    /// Final layer removed and gates only at 4-5 and 5-6, the setup used
    /// when fine-tuning on small datasets.
    pub fn transfer() -> Self {
        NetworkConfig {
            gate_placements: [GatePlacement::After4, GatePlacement::After5].into_iter().collect(),
            include_final_fc: false,
            ..Self::baseline()
        }
    }

    pub fn is_baseline(&self) -> bool {
        self.gate_placements.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w, c) = self.input_shape;
        if h == 0 || h % 8 != 0 || w % 8 != 0 || w / 8 < 8 || c == 0 {
            return Err(Error::InvalidArgument(format!(
                "input_shape {h}×{w}×{c}: height must be a positive multiple of 8 and width a multiple of 8 no smaller than 64"
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::InvalidArgument("embedding_dim must be positive".into()));
        }
        if !(self.p_init > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "p_init must be positive, got {}",
                self.p_init
            )));
        }
        if !self.include_final_fc && self.gate_placements.contains(&GatePlacement::After6) {
            return Err(Error::InvalidArgument(
                "gate 6-7 requires the final layer (include_final_fc = true)".into(),
            ));
        }
        Ok(())
    }

    /// Block geometries: Table-1 layout, with the last block sized to
    /// consume the whole remaining map.
    pub fn block_specs(&self) -> Result<Vec<ConvBlockSpec>> {
        self.validate()?;
        let (h, w, c) = self.input_shape;
        let mut specs = vec![
            ConvBlockSpec::new(5, 5, c, 32, 2),
            ConvBlockSpec::new(3, 3, 32, 50, 1),
            ConvBlockSpec::new(3, 3, 50, 32, 1),
            ConvBlockSpec::new(1, 4, 32, 32, 0),
            ConvBlockSpec::new(1, 3, 32, 32, 0),
            ConvBlockSpec::new(1, 3, 32, 32, 0),
        ];
        if self.include_final_fc {
            specs.push(ConvBlockSpec::new(h / 8, w / 8 - 7, 32, self.embedding_dim, 0));
        }
        Ok(specs)
    }

    /// Output shape of every block (after pooling where the block is pooled),
    /// for a batch of one.
    pub fn block_output_shapes(&self) -> Result<Vec<Shape>> {
        let (h, w, c) = self.input_shape;
        let mut s = Shape::new(1, h, w, c);
        let mut out = Vec::new();
        for (i, spec) in self.block_specs()?.iter().enumerate() {
            s = spec.out_shape(s)?;
            if i < POOLED_BLOCKS {
                s = Shape::new(s.n, s.h / 2, s.w / 2, s.c);
            }
            out.push(s);
        }
        Ok(out)
    }

    pub fn output_dim(&self) -> Result<usize> {
        Ok(self.block_output_shapes()?.last().expect("blocks").sample_len())
    }
}

/// Role of a checkpointed tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Trainable,
    RunningStat,
    /// Training-set mean image subtracted from every input.
    MeanImage,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T> {
    config: NetworkConfig,
    pub blocks: Vec<ConvBlockParams<T>>,
    pub gates: Vec<(GatePlacement, MatchingGateParams<T>)>,
}

/// Graph handles for every trainable tensor of a network.
#[derive(Clone, Debug)]
pub struct NetworkVars {
    pub blocks: Vec<ConvBlockVars>,
    pub gates: Vec<GateVars>,
}

impl NetworkVars {
    /// Flattened in the order of [`NetworkParams::named_trainable`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut v: Vec<Var> = self.blocks.iter().flat_map(|b| b.ordered()).collect();
        v.extend(self.gates.iter().flat_map(|g| g.ordered()));
        v
    }
}

/// What a forward pass recorded besides its output.
#[derive(Default, Debug)]
pub struct ForwardRecord {
    /// `(stage name, output shape)` in execution order.
    pub shapes: Vec<(String, Shape)>,
    /// Gate value node per placement, `(pairs, rows, 1, channels)`.
    pub gates: Vec<(GatePlacement, Var)>,
    /// Batch-normalization node per block index.
    pub norms: Vec<(usize, Var)>,
}

/// Options for a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    pub mode: Mode,
    /// Replace every gate by plain channel L2 normalization of both streams,
    /// the limit of the gated network as all `p → ∞`.
    pub bypass_gates: bool,
}

impl ForwardOptions {
    pub fn new(mode: Mode) -> Self {
        ForwardOptions {
            mode,
            bypass_gates: false,
        }
    }
}

impl<T: Real> NetworkParams<T> {
    /// Fresh parameters drawn from the `init` stream of `seed`.
    pub fn init(config: NetworkConfig, seed: u64) -> Result<Self> {
        let specs = config.block_specs()?;
        let shapes = config.block_output_shapes()?;
        let mut rng = stream(seed, Stream::Init);
        let blocks = specs.iter().map(|s| ConvBlockParams::init(*s, &mut rng)).collect();
        let gates = config
            .gate_placements
            .iter()
            .map(|&pl| {
                let s = shapes[pl.next_block() - 1];
                (pl, MatchingGateParams::init(s.w, s.c, config.p_init, &mut rng))
            })
            .collect();
        Ok(NetworkParams { config, blocks, gates })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            config: self.config.clone(),
            blocks: self.blocks.iter().map(ConvBlockParams::cast).collect(),
            gates: self.gates.iter().map(|(p, g)| (*p, g.cast())).collect(),
        }
    }

    pub fn bind(&self, g: &mut Graph<T>) -> NetworkVars {
        NetworkVars {
            blocks: self.blocks.iter().map(|b| b.bind(g)).collect(),
            gates: self.gates.iter().map(|(_, p)| p.bind(g)).collect(),
        }
    }

    /// Rebuilds handles from a flat list laid out like [`Self::named_trainable`].
    pub fn vars_from_ordered(&self, v: &[Var]) -> Result<NetworkVars> {
        let expected = self.blocks.len() * BLOCK_TRAINABLE.len() + self.gates.len() * GATE_TRAINABLE.len();
        if v.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "{} handles for {expected} trainable tensors",
                v.len()
            )));
        }
        let (bv, gv) = v.split_at(self.blocks.len() * BLOCK_TRAINABLE.len());
        Ok(NetworkVars {
            blocks: bv
                .chunks_exact(BLOCK_TRAINABLE.len())
                .map(ConvBlockVars::from_ordered)
                .collect(),
            gates: gv
                .chunks_exact(GATE_TRAINABLE.len())
                .map(GateVars::from_ordered)
                .collect(),
        })
    }

    pub fn named_trainable(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_TRAINABLE.iter().zip(b.trainable()) {
                out.push((format!("conv{}.{name}", i + 1), t));
            }
        }
        for (pl, g) in &self.gates {
            for (name, t) in GATE_TRAINABLE.iter().zip(g.trainable()) {
                out.push((format!("{}.{name}", pl.tensor_prefix()), t));
            }
        }
        out
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for b in &mut self.blocks {
            out.extend(b.trainable_mut());
        }
        for (_, g) in &mut self.gates {
            out.extend(g.trainable_mut());
        }
        out
    }

    /// Every tensor with its checkpoint name and role.
    pub fn named_tensors(&self) -> Vec<(String, TensorRole, &Tensor<T>)> {
        let mut out = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_TRAINABLE.iter().zip(b.trainable()) {
                out.push((format!("conv{}.{name}", i + 1), TensorRole::Trainable, t));
            }
            for (name, t) in BLOCK_RUNNING.iter().zip(b.running()) {
                out.push((format!("conv{}.{name}", i + 1), TensorRole::RunningStat, t));
            }
        }
        for (pl, g) in &self.gates {
            for (name, t) in GATE_TRAINABLE.iter().zip(g.trainable()) {
                out.push((format!("{}.{name}", pl.tensor_prefix()), TensorRole::Trainable, t));
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = Vec::new();
        for b in &mut self.blocks {
            let ConvBlockParams {
                filters,
                bias,
                bn_gamma,
                bn_beta,
                bn_running_mean,
                bn_running_var,
                prelu_slope,
                ..
            } = b;
            out.extend([
                filters,
                bias,
                bn_gamma,
                bn_beta,
                prelu_slope,
                bn_running_mean,
                bn_running_var,
            ]);
        }
        for (_, g) in &mut self.gates {
            out.extend(g.trainable_mut());
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_trainable().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn clamp_gate_p(&mut self) {
        for (_, g) in &mut self.gates {
            g.clamp_p();
        }
    }

    fn gate_index(&self, block: usize) -> Option<usize> {
        self.gates.iter().position(|(pl, _)| pl.next_block() == block)
    }

    /// Blocks that run before the first gate. Their output depends on one
    /// image only and can be cached per image at inference time.
    pub fn prefix_blocks(&self) -> usize {
        self.gates
            .iter()
            .map(|(pl, _)| pl.next_block())
            .min()
            .unwrap_or(self.blocks.len())
    }

    /// Runs blocks `range` on `x`. With `pairs`, `x` is a stacked pair batch
    /// and gates placed in front of a block in the range are applied.
    /// Reaching the last block flattens to `(n, 1, 1, dim)` embeddings.
    pub fn forward_blocks(
        &self,
        g: &mut Graph<T>,
        vars: &NetworkVars,
        mut x: Var,
        range: std::ops::Range<usize>,
        pairs: bool,
        opts: ForwardOptions,
        rec: &mut ForwardRecord,
    ) -> Result<Var> {
        let last = self.blocks.len();
        for i in range.clone() {
            if let Some(gi) = self.gate_index(i).filter(|_| pairs) {
                let n = g.shape(x).n;
                if !n.is_multiple_of(2) {
                    return Err(Error::shape(
                        "matching_gate",
                        format!("stacked pair batch of odd size {n}"),
                    ));
                }
                let x1 = g.slice_batch(x, 0, n / 2)?;
                let x2 = g.slice_batch(x, n / 2, n / 2)?;
                let placement = self.gates[gi].0;
                let (a1, a2) = if opts.bypass_gates {
                    (l2norm_channels(g, x1), l2norm_channels(g, x2))
                } else {
                    let out = matching_gate_forward(g, x1, x2, &vars.gates[gi], self.config.gate_gradient)?;
                    rec.gates.push((placement, out.gate));
                    (out.a1, out.a2)
                };
                x = g.concat(a1, a2)?;
                rec.shapes.push((format!("gate{}", placement.label()), g.shape(x)));
            }
            let out = convblock_forward(g, x, &vars.blocks[i], &self.blocks[i], opts.mode)?;
            rec.norms.push((i, out.norm));
            x = out.out;
            rec.shapes.push((format!("conv{}", i + 1), g.shape(x)));
            if i < POOLED_BLOCKS {
                x = g.maxpool2x2(x)?;
                rec.shapes.push((format!("pool{}", i + 1), g.shape(x)));
            }
        }
        if range.end == last {
            x = g.flatten(x)?;
            if self.config.normalize_embedding {
                x = l2norm_channels(g, x);
            }
            rec.shapes.push(("embedding".into(), g.shape(x)));
        }
        Ok(x)
    }

    /// Whole network on a stacked pair batch `(2n, h, w, c)`; returns
    /// `(2n, 1, 1, dim)` embeddings.
    pub fn forward_stacked(
        &self,
        g: &mut Graph<T>,
        vars: &NetworkVars,
        x: Var,
        opts: ForwardOptions,
        rec: &mut ForwardRecord,
    ) -> Result<Var> {
        self.check_input(g.shape(x))?;
        self.forward_blocks(g, vars, x, 0..self.blocks.len(), true, opts, rec)
    }

    fn check_input(&self, s: Shape) -> Result<()> {
        let (h, w, c) = self.config.input_shape;
        if (s.h, s.w, s.c) != (h, w, c) {
            return Err(Error::shape(
                "network input",
                format!("images of shape {s}, expected (·, {h}, {w}, {c})"),
            ));
        }
        Ok(())
    }

    /// Embeddings of `img1[i]` as paired with `img2[i]` and vice versa.
    /// Running statistics are not updated.
    pub fn forward_pair(&self, img1: &Tensor<T>, img2: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tensor<T>)> {
        if img1.shape() != img2.shape() {
            return Err(Error::shape(
                "forward_pair",
                format!("{} vs {}", img1.shape(), img2.shape()),
            ));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let x = g.constant(Tensor::stack(&[img1, img2])?);
        let emb = self.forward_stacked(
            &mut g,
            &vars,
            x,
            ForwardOptions::new(mode),
            &mut ForwardRecord::default(),
        )?;
        split_halves(g.value(emb))
    }

    /// Moves running statistics toward the batch statistics recorded in a
    /// train-mode forward.
    pub fn update_running_stats(&mut self, g: &Graph<T>, rec: &ForwardRecord) {
        for &(i, norm) in &rec.norms {
            if let Some((mean, var)) = g.batch_statistics(norm) {
                self.blocks[i].update_running_stats(mean, var, T::of(BN_MOMENTUM));
            }
        }
    }

    /// Sets every running statistic to the batch statistics of a
    /// train-mode forward on the stacked pair batch `pairs`, so that eval
    /// mode reproduces train mode on exactly these images.
    pub fn calibrate_running_stats(&mut self, pairs: &Tensor<T>) -> Result<()> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let x = g.constant(pairs.clone());
        let mut rec = ForwardRecord::default();
        self.forward_stacked(&mut g, &vars, x, ForwardOptions::new(Mode::Train), &mut rec)?;
        for &(i, norm) in &rec.norms {
            if let Some((mean, var)) = g.batch_statistics(norm) {
                self.blocks[i].update_running_stats(mean, var, T::one());
            }
        }
        Ok(())
    }

    /// Eval-mode output of the blocks before the first gate (the whole
    /// network, i.e. the embedding, for a baseline).
    pub fn prefix(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(images.shape())?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let x = g.constant(images.clone());
        let out = self.forward_blocks(
            &mut g,
            &vars,
            x,
            0..self.prefix_blocks(),
            false,
            ForwardOptions::new(Mode::Eval),
            &mut ForwardRecord::default(),
        )?;
        Ok(g.value(out).clone())
    }

    /// Eval-mode embeddings of pairs from cached prefixes (see [`Self::prefix`]).
    pub fn embed_from_prefix(&self, p1: &Tensor<T>, p2: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        if self.prefix_blocks() == self.blocks.len() {
            return Ok((p1.clone(), p2.clone()));
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let x = g.constant(Tensor::stack(&[p1, p2])?);
        let out = self.forward_blocks(
            &mut g,
            &vars,
            x,
            self.prefix_blocks()..self.blocks.len(),
            true,
            ForwardOptions::new(Mode::Eval),
            &mut ForwardRecord::default(),
        )?;
        split_halves(g.value(out))
    }

    /// Writes a checkpoint archive:
    ///
    /// ```text
    /// "GSCK" | version u32 | header length u64 | JSON header | tensors...
    /// ```
    /// Each tensor uses the `GSCN` container; the header lists names, roles
    /// and the network configuration in archive order. The mean image, when
    /// given, is stored last.
    pub fn save(&self, path: impl AsRef<Path>, epoch: Option<usize>, mean_image: Option<&Tensor<T>>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes(epoch, mean_image)?).map_err(|e| Error::io(path, e))
    }

    pub fn to_bytes(&self, epoch: Option<usize>, mean_image: Option<&Tensor<T>>) -> Result<Vec<u8>> {
        let mut tensors = self.named_tensors();
        if let Some(m) = mean_image {
            tensors.push((MEAN_IMAGE.to_string(), TensorRole::MeanImage, m));
        }
        let header = CheckpointHeader {
            config: self.config.clone(),
            epoch,
            dtype: T::DTYPE,
            tensors: tensors
                .iter()
                .map(|(name, role, t)| TensorEntry {
                    name: name.clone(),
                    role: *role,
                    shape: t.shape().dims(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in &tensors {
            out.extend(encode_tensor(*t));
        }
        Ok(out)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint<T>> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|d| Error::format(path, d))
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Checkpoint<T>, String> {
        if bytes.len() < 16 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err("not a checkpoint archive".into());
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or("truncated header")?;
        let header: CheckpointHeader = serde_json::from_slice(body).map_err(|e| e.to_string())?;
        let mut params = Self::init(header.config.clone(), 0).map_err(|e| e.to_string())?;
        let names: Vec<(String, TensorRole)> = params.named_tensors().into_iter().map(|(n, r, _)| (n, r)).collect();
        let has_mean = header.tensors.last().is_some_and(|e| e.role == TensorRole::MeanImage);
        if names.len() + has_mean as usize != header.tensors.len() {
            return Err(format!(
                "checkpoint/config mismatch: {} tensors stored, configuration needs {}",
                header.tensors.len(),
                names.len()
            ));
        }
        let mut offset = 16 + hlen;
        for ((slot, (name, role)), entry) in params.tensors_mut().into_iter().zip(&names).zip(&header.tensors) {
            if *name != entry.name || *role != entry.role {
                return Err(format!(
                    "checkpoint/config mismatch: expected {name}, found {}",
                    entry.name
                ));
            }
            let (t, used) = decode_tensor::<T>(&bytes[offset..]).map_err(|e| format!("{name}: {e}"))?;
            if t.shape() != slot.shape() {
                return Err(format!(
                    "checkpoint/config mismatch: {name} has shape {}, configuration needs {}",
                    t.shape(),
                    slot.shape()
                ));
            }
            *slot = t;
            offset += used;
        }
        let mut mean_image = None;
        if has_mean {
            let (t, used) = decode_tensor::<T>(&bytes[offset..]).map_err(|e| format!("{MEAN_IMAGE}: {e}"))?;
            let (h, w, c) = params.config.input_shape;
            if t.shape() != Shape::new(1, h, w, c) {
                return Err(format!(
                    "checkpoint/config mismatch: mean image has shape {}",
                    t.shape()
                ));
            }
            mean_image = Some(t);
            offset += used;
        }
        if offset != bytes.len() {
            return Err(format!("{} trailing bytes", bytes.len() - offset));
        }
        Ok(Checkpoint {
            params,
            epoch: header.epoch,
            mean_image,
        })
    }
}

fn split_halves<T: Real>(t: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = t.shape();
    let half = s.n / 2;
    let per = s.sample_len();
    let a = Tensor::new(s.with_n(half), t.data()[..half * per].to_vec())?;
    let b = Tensor::new(s.with_n(half), t.data()[half * per..].to_vec())?;
    Ok((a, b))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"GSCK";
const CHECKPOINT_VERSION: u32 = 1;
const MEAN_IMAGE: &str = "mean_image";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    role: TensorRole,
    shape: [usize; 4],
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    config: NetworkConfig,
    epoch: Option<usize>,
    dtype: DType,
    tensors: Vec<TensorEntry>,
}

pub struct Checkpoint<T> {
    pub params: NetworkParams<T>,
    pub epoch: Option<usize>,
    pub mean_image: Option<Tensor<T>>,
}

/// Euclidean distance between two embeddings.
pub fn pair_distance<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| (*x - *y) * (*x - *y)).sum::<T>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table1_shapes() {
        let shapes = NetworkConfig::baseline().block_output_shapes().unwrap();
        let dims: Vec<(usize, usize, usize)> = shapes.iter().map(|s| (s.h, s.w, s.c)).collect();
        assert_eq!(
            dims,
            vec![
                (64, 32, 32),
                (32, 16, 50),
                (16, 8, 32),
                (16, 5, 32),
                (16, 3, 32),
                (16, 1, 32),
                (1, 1, 150)
            ]
        );
        assert_eq!(NetworkConfig::transfer().output_dim().unwrap(), 512);
    }

    #[test]
    fn gate_list_parsing() {
        assert!(parse_gate_list("none").unwrap().is_empty());
        assert_eq!(parse_gate_list("all").unwrap().len(), 3);
        let two = parse_gate_list("4-5,5-6").unwrap();
        assert_eq!(two, NetworkConfig::transfer().gate_placements);
        assert!(parse_gate_list("3-4").is_err());
    }

    #[test]
    fn rejects_gate_without_final_layer() {
        let mut c = NetworkConfig::gated();
        c.include_final_fc = false;
        assert!(c.validate().is_err());
    }

    #[test]
    fn distance_reference_values() {
        assert_eq!(pair_distance(&[0.0f64, 0.0], &[3.0, 4.0]), 5.0);
        assert_eq!(pair_distance(&[1.0f64, 2.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn checkpoint_rejects_config_mismatch() {
        let p = NetworkParams::<f32>::init(NetworkConfig::baseline(), 1).unwrap();
        let mut bytes = p.to_bytes(None, None).unwrap();
        // truncate the last tensor
        bytes.truncate(bytes.len() - 4);
        assert!(NetworkParams::<f32>::from_bytes(&bytes).is_err());
    }

    #[test]
    fn calibrated_eval_matches_train_mode() {
        let mut p = NetworkParams::<f64>::init(NetworkConfig::gated(), 2).unwrap();
        let pairs = Tensor::from_fn(Shape::new(2, 128, 64, 3), |n, h, w, c| {
            ((n * 7 + h * 3 + w * 5 + c) % 11) as f64 / 11.0 - 0.5
        });
        let (a, b) = (pairs.sample(0), pairs.sample(1));
        let train = p.forward_pair(&a, &b, Mode::Train).unwrap();
        p.calibrate_running_stats(&pairs).unwrap();
        let eval = p.forward_pair(&a, &b, Mode::Eval).unwrap();
        assert!(train.0.max_abs_diff(&eval.0) < 1e-12);
        assert!(train.1.max_abs_diff(&eval.1) < 1e-12);
    }
}
