//! The full U-shaped model: encoder blocks with shrinkage attention, a
//! bottleneck double-convolution, decoder blocks with pairwise shrinkage
//! fusion and skip connections, and a sigmoid head.
//!
//! Forward passes are built on a [`Tape`] so one backward call yields every
//! parameter gradient. The shrinkage gates are computed from attention
//! *values* and enter the tape as constants: gradient flows through the
//! prior feature only (straight-through), never through the comparison.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend_direction, Direction};
use crate::error::{Error, Result};
use crate::shrinkage::{average_directions, average_pair, shrink_gate, ShrinkageConfig};
use crate::tape::{BnMode, BnStats, NodeId, Tape};
use crate::tensor::{Padding, Tensor};

/// Architecture and run configuration for one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Number of encoder/decoder levels.
    pub depth: usize,
    /// Channels at the first level; deeper levels double up to 8x.
    pub base_filters: usize,
    /// Shrinkage threshold applied to normalized attention evidence.
    pub th: f64,
    /// Square input side; must be divisible by 2^depth.
    pub input_size: usize,
    /// Dropout rate on the decoder's global-context path (train mode only).
    pub dropout_rate: f64,
    /// When false, encoder blocks skip attention entirely (No-TAtt).
    pub enable_encoder_attention: bool,
    /// When false, decoder blocks skip pairwise fusion entirely (No-DAtt).
    pub enable_decoder_attention: bool,
    /// Seed for weight initialization and derived randomness.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            depth: 3,
            base_filters: 8,
            th: 0.3,
            input_size: 64,
            dropout_rate: 0.5,
            enable_encoder_attention: true,
            enable_decoder_attention: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Desk-scale defaults: small enough that tests and training runs finish
    /// in minutes on one CPU core.
    pub fn desk() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(Error::invalid("depth must be >= 1"));
        }
        if self.base_filters < 1 {
            return Err(Error::invalid("base_filters must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid(format!(
                "dropout_rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        if !self.th.is_finite() {
            return Err(Error::invalid("th must be finite"));
        }
        let stride_total = 1usize
            .checked_shl(self.depth as u32)
            .ok_or_else(|| Error::invalid("depth too large"))?;
        if self.input_size == 0 || self.input_size % stride_total != 0 {
            return Err(Error::invalid(format!(
                "input_size {} not divisible by 2^depth = {stride_total}",
                self.input_size
            )));
        }
        // skip-shape ledger: encoder export at level l must equal what the
        // decoder at level l consumes after upsampling
        for level in 0..self.depth {
            let encoder_side = self.input_size >> level;
            let decoder_in = self.input_size >> (level + 1);
            if decoder_in * 2 != encoder_side {
                return Err(Error::invalid(format!(
                    "skip shape ledger broken at level {level}"
                )));
            }
        }
        Ok(())
    }

    /// Channel count at encoder/decoder level `level` (0 = full resolution).
    /// Doubles per level and saturates at 8x the base, so a depth-5 model
    /// repeats the deepest width.
    pub fn filters_at(&self, level: usize) -> usize {
        self.base_filters << level.min(3)
    }

    pub fn bottleneck_filters(&self) -> usize {
        self.base_filters << self.depth.min(3)
    }

    pub fn shrinkage(&self) -> ShrinkageConfig {
        ShrinkageConfig {
            th: self.th,
            normalize_before_gate: true,
        }
    }
}

/// Weight and bias of one convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ConvParams {
    fn zeros(c_out: usize, c_in: usize, k: usize) -> Self {
        ConvParams {
            weight: Tensor::zeros(&[c_out, c_in, k, k]),
            bias: Tensor::zeros(&[c_out]),
        }
    }
}

/// Two consecutive 3x3 convolutions; used by encoder blocks and the
/// bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderBlockParams {
    pub conv1: ConvParams,
    pub conv2: ConvParams,
}

/// Decoder block parameters: the 2x2 up-convolution, the 1x1 projection on
/// the global-context path with its batch norm, and the 3x3 fusion applied
/// after the skip concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderBlockParams {
    pub up: ConvParams,
    pub project: ConvParams,
    pub bn_gamma: Tensor,
    pub bn_beta: Tensor,
    pub bn_running: BnStats,
    pub fuse: ConvParams,
}

/// All parameters of one model instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoders: Vec<EncoderBlockParams>,
    pub bottleneck: EncoderBlockParams,
    pub decoders: Vec<DecoderBlockParams>,
    pub head: ConvParams,
}

impl ModelParams {
    /// Seeded fan-in-uniform initialization; biases zero, batch-norm gains
    /// one.
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut p = Self::skeleton(cfg)?;
        for enc in &mut p.encoders {
            redraw(&mut rng, &mut enc.conv1);
            redraw(&mut rng, &mut enc.conv2);
        }
        redraw(&mut rng, &mut p.bottleneck.conv1);
        redraw(&mut rng, &mut p.bottleneck.conv2);
        for dec in &mut p.decoders {
            redraw(&mut rng, &mut dec.up);
            redraw(&mut rng, &mut dec.project);
            dec.bn_gamma = Tensor::ones(&[dec.bn_gamma.shape()[0]]);
            redraw(&mut rng, &mut dec.fuse);
        }
        redraw(&mut rng, &mut p.head);
        Ok(p)
    }

    /// Zero-valued parameters with the correct shapes for `cfg`; the target
    /// of checkpoint loading and the reference for shape validation.
    pub fn skeleton(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut encoders = Vec::with_capacity(cfg.depth);
        let mut in_ch = 1;
        for level in 0..cfg.depth {
            let c = cfg.filters_at(level);
            encoders.push(EncoderBlockParams {
                conv1: ConvParams::zeros(c, in_ch, 3),
                conv2: ConvParams::zeros(c, c, 3),
            });
            in_ch = c;
        }
        let cb = cfg.bottleneck_filters();
        let bottleneck = EncoderBlockParams {
            conv1: ConvParams::zeros(cb, in_ch, 3),
            conv2: ConvParams::zeros(cb, cb, 3),
        };
        let mut decoders = Vec::with_capacity(cfg.depth);
        let mut up_in = cb;
        for level in (0..cfg.depth).rev() {
            let c = cfg.filters_at(level);
            decoders.push(DecoderBlockParams {
                up: ConvParams::zeros(c, up_in, 2),
                project: ConvParams::zeros(c, c, 1),
                bn_gamma: Tensor::zeros(&[c]),
                bn_beta: Tensor::zeros(&[c]),
                bn_running: BnStats::fresh(c),
                fuse: ConvParams::zeros(c, 3 * c, 3),
            });
            up_in = c;
        }
        decoders.reverse(); // decoders[level] pairs with encoders[level]
        let head = ConvParams::zeros(1, cfg.filters_at(0), 1);
        Ok(ModelParams {
            encoders,
            bottleneck,
            decoders,
            head,
        })
    }

    /// Trainable tensors with stable names, in declaration order. Checkpoint
    /// layout, Adam state and gradient extraction all follow this order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (l, enc) in self.encoders.iter().enumerate() {
            out.push((format!("enc{l}.conv1.weight"), &enc.conv1.weight));
            out.push((format!("enc{l}.conv1.bias"), &enc.conv1.bias));
            out.push((format!("enc{l}.conv2.weight"), &enc.conv2.weight));
            out.push((format!("enc{l}.conv2.bias"), &enc.conv2.bias));
        }
        out.push(("bottleneck.conv1.weight".into(), &self.bottleneck.conv1.weight));
        out.push(("bottleneck.conv1.bias".into(), &self.bottleneck.conv1.bias));
        out.push(("bottleneck.conv2.weight".into(), &self.bottleneck.conv2.weight));
        out.push(("bottleneck.conv2.bias".into(), &self.bottleneck.conv2.bias));
        for (l, dec) in self.decoders.iter().enumerate() {
            out.push((format!("dec{l}.up.weight"), &dec.up.weight));
            out.push((format!("dec{l}.up.bias"), &dec.up.bias));
            out.push((format!("dec{l}.project.weight"), &dec.project.weight));
            out.push((format!("dec{l}.project.bias"), &dec.project.bias));
            out.push((format!("dec{l}.bn.gamma"), &dec.bn_gamma));
            out.push((format!("dec{l}.bn.beta"), &dec.bn_beta));
            out.push((format!("dec{l}.fuse.weight"), &dec.fuse.weight));
            out.push((format!("dec{l}.fuse.bias"), &dec.fuse.bias));
        }
        out.push(("head.weight".into(), &self.head.weight));
        out.push(("head.bias".into(), &self.head.bias));
        out
    }

    /// Mutable view of the trainable tensors, in the same order as
    /// [`ModelParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for enc in &mut self.encoders {
            out.push(&mut enc.conv1.weight);
            out.push(&mut enc.conv1.bias);
            out.push(&mut enc.conv2.weight);
            out.push(&mut enc.conv2.bias);
        }
        out.push(&mut self.bottleneck.conv1.weight);
        out.push(&mut self.bottleneck.conv1.bias);
        out.push(&mut self.bottleneck.conv2.weight);
        out.push(&mut self.bottleneck.conv2.bias);
        for dec in &mut self.decoders {
            out.push(&mut dec.up.weight);
            out.push(&mut dec.up.bias);
            out.push(&mut dec.project.weight);
            out.push(&mut dec.project.bias);
            out.push(&mut dec.bn_gamma);
            out.push(&mut dec.bn_beta);
            out.push(&mut dec.fuse.weight);
            out.push(&mut dec.fuse.bias);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Batch-norm running statistics with stable names, in declaration
    /// order; persisted after the tensor payload in checkpoints.
    pub fn named_stats(&self) -> Vec<(String, &BnStats)> {
        self.decoders
            .iter()
            .enumerate()
            .map(|(l, dec)| (format!("dec{l}.bn"), &dec.bn_running))
            .collect()
    }

    pub fn stats_mut(&mut self) -> Vec<&mut BnStats> {
        self.decoders.iter_mut().map(|d| &mut d.bn_running).collect()
    }

    /// Total number of trainable scalar parameters.
    pub fn param_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }
}

fn redraw(rng: &mut ChaCha8Rng, conv: &mut ConvParams) {
    let shape = conv.weight.shape().to_vec();
    let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
    let bound = (6.0 / fan_in).sqrt();
    let data: Vec<f64> = (0..conv.weight.numel())
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    conv.weight = Tensor::from_raw(shape, data);
}

/// Forward-pass mode: train uses batch statistics and active dropout, eval
/// uses running statistics and identity dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// How shrinkage gate masks are produced during a forward pass.
///
/// `Record`/`Replay` exist so finite-difference checks can hold the gates
/// fixed while the input is perturbed; `ForceOnes` builds the gate-always-on
/// model without computing attention at all.
pub enum GateTrace {
    /// Compute each gate from the live feature values.
    Live,
    /// Compute gates and keep a copy of each mask in encounter order.
    Record(Vec<Tensor>),
    /// Return previously recorded masks instead of computing.
    Replay { masks: Vec<Tensor>, cursor: usize },
    /// Every gate is all-ones.
    ForceOnes,
}

impl GateTrace {
    pub fn record() -> Self {
        GateTrace::Record(Vec::new())
    }

    pub fn replay(masks: Vec<Tensor>) -> Self {
        GateTrace::Replay { masks, cursor: 0 }
    }

    /// Recorded masks, if this trace was recording.
    pub fn into_masks(self) -> Option<Vec<Tensor>> {
        match self {
            GateTrace::Record(masks) => Some(masks),
            _ => None,
        }
    }

    /// Whether gate sites must compute attention values for this trace.
    fn needs_values(&self) -> bool {
        matches!(self, GateTrace::Live | GateTrace::Record(_))
    }

    fn next(&mut self, shape: &[usize], compute: impl FnOnce() -> Result<Tensor>) -> Result<Tensor> {
        match self {
            GateTrace::Live => compute(),
            GateTrace::Record(masks) => {
                let gate = compute()?;
                masks.push(gate.clone());
                Ok(gate)
            }
            GateTrace::Replay { masks, cursor } => {
                let gate = masks
                    .get(*cursor)
                    .ok_or_else(|| Error::invalid("gate replay exhausted"))?
                    .clone();
                if gate.shape() != shape {
                    return Err(Error::invalid(format!(
                        "replayed gate shape {:?} does not match site shape {:?}",
                        gate.shape(),
                        shape
                    )));
                }
                *cursor += 1;
                Ok(gate)
            }
            GateTrace::ForceOnes => Ok(Tensor::ones(shape)),
        }
    }
}

/// Mutable state threaded through one forward pass.
pub struct ForwardSession {
    pub mode: Mode,
    pub gates: GateTrace,
    dropout_rng: Option<ChaCha8Rng>,
    /// Batch statistics observed by each batch-norm site, in encounter
    /// order; the trainer folds these into the running averages.
    pub bn_updates: Vec<BnStats>,
}

impl ForwardSession {
    pub fn eval() -> Self {
        ForwardSession {
            mode: Mode::Eval,
            gates: GateTrace::Live,
            dropout_rng: None,
            bn_updates: Vec::new(),
        }
    }

    pub fn train(dropout_rng: ChaCha8Rng) -> Self {
        ForwardSession {
            mode: Mode::Train,
            gates: GateTrace::Live,
            dropout_rng: Some(dropout_rng),
            bn_updates: Vec::new(),
        }
    }

    pub fn with_gates(mut self, gates: GateTrace) -> Self {
        self.gates = gates;
        self
    }
}

/// Tape node handles for one convolution's parameters.
#[derive(Debug, Clone, Copy)]
pub struct ConvNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub conv1: ConvNodes,
    pub conv2: ConvNodes,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderNodes {
    pub up: ConvNodes,
    pub project: ConvNodes,
    pub bn_gamma: NodeId,
    pub bn_beta: NodeId,
    pub fuse: ConvNodes,
}

/// All parameter tensors inserted on a tape, mirroring [`ModelParams`].
pub struct ModelNodes {
    pub encoders: Vec<EncoderNodes>,
    pub bottleneck: EncoderNodes,
    pub decoders: Vec<DecoderNodes>,
    pub head: ConvNodes,
}

impl ModelNodes {
    /// Insert every parameter as a tape leaf. `trainable` controls whether
    /// gradients accumulate into them.
    pub fn insert(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let conv = |tape: &mut Tape, c: &ConvParams| ConvNodes {
            weight: tape.leaf(c.weight.clone(), trainable),
            bias: tape.leaf(c.bias.clone(), trainable),
        };
        let encoders = params
            .encoders
            .iter()
            .map(|e| EncoderNodes {
                conv1: conv(tape, &e.conv1),
                conv2: conv(tape, &e.conv2),
            })
            .collect();
        let bottleneck = EncoderNodes {
            conv1: conv(tape, &params.bottleneck.conv1),
            conv2: conv(tape, &params.bottleneck.conv2),
        };
        let decoders = params
            .decoders
            .iter()
            .map(|d| DecoderNodes {
                up: conv(tape, &d.up),
                project: conv(tape, &d.project),
                bn_gamma: tape.leaf(d.bn_gamma.clone(), trainable),
                bn_beta: tape.leaf(d.bn_beta.clone(), trainable),
                fuse: conv(tape, &d.fuse),
            })
            .collect();
        let head = conv(tape, &params.head);
        ModelNodes {
            encoders,
            bottleneck,
            decoders,
            head,
        }
    }

    /// Node ids in the same order as [`ModelParams::named_tensors`].
    pub fn flat(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for e in &self.encoders {
            out.extend([e.conv1.weight, e.conv1.bias, e.conv2.weight, e.conv2.bias]);
        }
        out.extend([
            self.bottleneck.conv1.weight,
            self.bottleneck.conv1.bias,
            self.bottleneck.conv2.weight,
            self.bottleneck.conv2.bias,
        ]);
        for d in &self.decoders {
            out.extend([
                d.up.weight,
                d.up.bias,
                d.project.weight,
                d.project.bias,
                d.bn_gamma,
                d.bn_beta,
                d.fuse.weight,
                d.fuse.bias,
            ]);
        }
        out.extend([self.head.weight, self.head.bias]);
        out
    }
}

const BN_EPS: f64 = 1e-5;

/// One encoder block on the tape: double conv, optional shrinkage-attention
/// integration, max pooling. Returns `(f_ta, f_mp)`.
pub fn encoder_block_on(
    tape: &mut Tape,
    x: NodeId,
    nodes: &EncoderNodes,
    cfg: &ModelConfig,
    gates: &mut GateTrace,
) -> Result<(NodeId, NodeId)> {
    let c1 = tape.conv2d(x, nodes.conv1.weight, nodes.conv1.bias, 1, 1)?;
    let r1 = tape.relu(c1)?;
    let c2 = tape.conv2d(r1, nodes.conv2.weight, nodes.conv2.bias, 1, 1)?;
    let f_em = tape.relu(c2)?;

    let f_ta = if cfg.enable_encoder_attention {
        let shape = tape.value(f_em).shape().to_vec();
        let shrink = cfg.shrinkage();
        let evidence = if gates.needs_values() {
            let f = tape.value(f_em);
            let ah = attend_direction(f, Direction::Horizontal)?;
            let av = attend_direction(f, Direction::Vertical)?;
            let ad = attend_direction(f, Direction::Depth)?;
            Some(average_directions(&ah, &av, &ad)?)
        } else {
            None
        };
        let mask = gates.next(&shape, || {
            shrink_gate(evidence.as_ref().expect("values computed for live gate"), &shrink)
        })?;
        let gate = tape.constant(mask);
        tape.mul(f_em, gate)?
    } else {
        f_em
    };

    let f_mp = tape.maxpool2d(f_ta)?;
    Ok((f_ta, f_mp))
}

/// Value-level encoder block (eval semantics, live gates).
pub fn encoder_block_forward(
    x: &Tensor,
    params: &EncoderBlockParams,
    cfg: &ModelConfig,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), false);
    let nodes = EncoderNodes {
        conv1: ConvNodes {
            weight: tape.leaf(params.conv1.weight.clone(), false),
            bias: tape.leaf(params.conv1.bias.clone(), false),
        },
        conv2: ConvNodes {
            weight: tape.leaf(params.conv2.weight.clone(), false),
            bias: tape.leaf(params.conv2.bias.clone(), false),
        },
    };
    let mut gates = GateTrace::Live;
    let (f_ta, f_mp) = encoder_block_on(&mut tape, leaf, &nodes, cfg, &mut gates)?;
    Ok((tape.value(f_ta).clone(), tape.value(f_mp).clone()))
}

/// Pairwise decoder fusion: each unordered pair of directional attention
/// outputs {(H,V), (V,D), (H,D)} produces a gate over the decoder feature;
/// the three gated copies are added.
pub fn decoder_pairwise_fuse_on(
    tape: &mut Tape,
    f_dm: NodeId,
    cfg: &ModelConfig,
    gates: &mut GateTrace,
) -> Result<NodeId> {
    let shape = tape.value(f_dm).shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::invalid(format!(
            "decoder_pairwise_fuse expects a [C,H,W] feature, got {shape:?}"
        )));
    }
    let shrink = cfg.shrinkage();

    let directional = if gates.needs_values() {
        let f = tape.value(f_dm);
        Some((
            attend_direction(f, Direction::Horizontal)?,
            attend_direction(f, Direction::Vertical)?,
            attend_direction(f, Direction::Depth)?,
        ))
    } else {
        None
    };
    let pair_gate = |gates: &mut GateTrace, lhs: usize, rhs: usize| -> Result<Tensor> {
        gates.next(&shape, || {
            let (ah, av, ad) = directional.as_ref().expect("values computed for live gate");
            let pick = |i: usize| match i {
                0 => ah,
                1 => av,
                _ => ad,
            };
            shrink_gate(&average_pair(pick(lhs), pick(rhs))?, &shrink)
        })
    };

    let g1 = pair_gate(gates, 0, 1)?;
    let g2 = pair_gate(gates, 1, 2)?;
    let g3 = pair_gate(gates, 0, 2)?;

    let g1n = tape.constant(g1);
    let g2n = tape.constant(g2);
    let g3n = tape.constant(g3);
    let da1 = tape.mul(f_dm, g1n)?;
    let da2 = tape.mul(f_dm, g2n)?;
    let da3 = tape.mul(f_dm, g3n)?;
    let partial = tape.add(da1, da2)?;
    tape.add(partial, da3)
}

/// Value-level pairwise fusion.
pub fn decoder_pairwise_fuse(f_dm: &Tensor, cfg: &ModelConfig) -> Result<Tensor> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(f_dm.clone(), false);
    let mut gates = GateTrace::Live;
    let out = decoder_pairwise_fuse_on(&mut tape, leaf, cfg, &mut gates)?;
    Ok(tape.value(out).clone())
}

/// One decoder block on the tape: upsample, 2x2 conv, optional pairwise
/// fusion, the 1x1 conv + batch norm + dropout context path, then skip
/// concatenation and a 3x3 fusion conv.
#[allow(clippy::too_many_arguments)]
pub fn decoder_block_on(
    tape: &mut Tape,
    x: NodeId,
    skip: NodeId,
    nodes: &DecoderNodes,
    running: &BnStats,
    cfg: &ModelConfig,
    session: &mut ForwardSession,
) -> Result<NodeId> {
    let x_shape = tape.value(x).shape().to_vec();
    let skip_shape = tape.value(skip).shape().to_vec();
    if skip_shape.len() != 3
        || x_shape.len() != 3
        || skip_shape[1] != 2 * x_shape[1]
        || skip_shape[2] != 2 * x_shape[2]
    {
        return Err(Error::invalid(format!(
            "decoder skip spatial size {:?} must be twice the input {:?}",
            &skip_shape[1..],
            &x_shape[1..]
        )));
    }

    let up = tape.upsample_nearest(x)?;
    // a 2x2 kernel cannot preserve size under symmetric padding; pad one
    // row/column at the bottom-right
    let up_pad = Padding {
        top: 0,
        bottom: 1,
        left: 0,
        right: 1,
    };
    let up_conv = tape.conv2d_padded(up, nodes.up.weight, nodes.up.bias, 1, up_pad)?;
    let f_dm = tape.relu(up_conv)?;

    let f_glob = if cfg.enable_decoder_attention {
        decoder_pairwise_fuse_on(tape, f_dm, cfg, &mut session.gates)?
    } else {
        f_dm
    };

    let projected = tape.conv2d(f_glob, nodes.project.weight, nodes.project.bias, 1, 0)?;
    let bn_mode = match session.mode {
        Mode::Train => BnMode::Batch,
        Mode::Eval => BnMode::Running(running),
    };
    let (bn_out, batch_stats) = tape.batch_norm(projected, nodes.bn_gamma, nodes.bn_beta, BN_EPS, bn_mode)?;
    if let Some(stats) = batch_stats {
        session.bn_updates.push(stats);
    }
    let f_g = match (session.mode, cfg.dropout_rate) {
        (Mode::Train, rate) if rate > 0.0 => {
            let rng = session
                .dropout_rng
                .as_mut()
                .ok_or_else(|| Error::invalid("train-mode forward needs a dropout rng"))?;
            tape.dropout(bn_out, rate, rng)?
        }
        _ => bn_out,
    };

    let cat = tape.concat_channels(&[f_dm, skip, f_g])?;
    let fused = tape.conv2d(cat, nodes.fuse.weight, nodes.fuse.bias, 1, 1)?;
    tape.relu(fused)
}

/// Output handles of a full forward pass.
pub struct ModelOutput {
    pub logits: NodeId,
    pub probs: NodeId,
}

/// Full model forward on a tape: `depth` encoder blocks collecting skips, a
/// bottleneck double-conv, `depth` decoder blocks consuming skips in reverse
/// order, then a 1x1 conv and sigmoid.
pub fn model_forward_on(
    tape: &mut Tape,
    image: NodeId,
    nodes: &ModelNodes,
    params: &ModelParams,
    cfg: &ModelConfig,
    session: &mut ForwardSession,
) -> Result<ModelOutput> {
    cfg.validate()?;
    let shape = tape.value(image).shape().to_vec();
    if shape != [1, cfg.input_size, cfg.input_size] {
        return Err(Error::invalid(format!(
            "model input must be [1,{0},{0}], got {shape:?}",
            cfg.input_size
        )));
    }
    if nodes.encoders.len() != cfg.depth || params.encoders.len() != cfg.depth {
        return Err(Error::invalid("parameter depth does not match config"));
    }

    let mut x = image;
    let mut skips = Vec::with_capacity(cfg.depth);
    for level in 0..cfg.depth {
        let (f_ta, f_mp) = encoder_block_on(tape, x, &nodes.encoders[level], cfg, &mut session.gates)
            .map_err(|e| e.with_context(format!("encoder block {level}")))?;
        skips.push(f_ta);
        x = f_mp;
    }

    let b1 = tape.conv2d(x, nodes.bottleneck.conv1.weight, nodes.bottleneck.conv1.bias, 1, 1)?;
    let b1r = tape.relu(b1)?;
    let b2 = tape.conv2d(b1r, nodes.bottleneck.conv2.weight, nodes.bottleneck.conv2.bias, 1, 1)?;
    x = tape.relu(b2).map_err(|e| e.with_context("bottleneck"))?;

    for level in (0..cfg.depth).rev() {
        x = decoder_block_on(
            tape,
            x,
            skips[level],
            &nodes.decoders[level],
            &params.decoders[level].bn_running,
            cfg,
            session,
        )
        .map_err(|e| e.with_context(format!("decoder block {level}")))?;
    }

    let logits = tape.conv2d(x, nodes.head.weight, nodes.head.bias, 1, 0)?;
    let probs = tape.sigmoid(logits)?;
    Ok(ModelOutput { logits, probs })
}

/// Value-level forward pass returning the probability map. Train mode
/// derives its dropout stream from the config seed.
pub fn model_forward(
    image: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
    mode: Mode,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let leaf = tape.leaf(image.clone(), false);
    let nodes = ModelNodes::insert(&mut tape, params, false);
    let mut session = match mode {
        Mode::Eval => ForwardSession::eval(),
        Mode::Train => ForwardSession::train(ChaCha8Rng::seed_from_u64(cfg.seed)),
    };
    let out = model_forward_on(&mut tape, leaf, &nodes, params, cfg, &mut session)?;
    Ok(tape.value(out.probs).clone())
}

/// Plain U-Net-style forward with every attention and gate path removed,
/// built from the same parameters: double conv + pool encoders, upsample +
/// 2x2 conv decoders with the same context path and skip fusion. The model
/// with both attention flags disabled must match this bit-exactly.
pub fn plain_unet_forward_on(
    tape: &mut Tape,
    image: NodeId,
    nodes: &ModelNodes,
    params: &ModelParams,
    cfg: &ModelConfig,
    session: &mut ForwardSession,
) -> Result<ModelOutput> {
    cfg.validate()?;
    let mut x = image;
    let mut skips = Vec::with_capacity(cfg.depth);
    for level in 0..cfg.depth {
        let e = &nodes.encoders[level];
        let c1 = tape.conv2d(x, e.conv1.weight, e.conv1.bias, 1, 1)?;
        let r1 = tape.relu(c1)?;
        let c2 = tape.conv2d(r1, e.conv2.weight, e.conv2.bias, 1, 1)?;
        let f_em = tape.relu(c2)?;
        skips.push(f_em);
        x = tape.maxpool2d(f_em)?;
    }
    let b1 = tape.conv2d(x, nodes.bottleneck.conv1.weight, nodes.bottleneck.conv1.bias, 1, 1)?;
    let b1r = tape.relu(b1)?;
    let b2 = tape.conv2d(b1r, nodes.bottleneck.conv2.weight, nodes.bottleneck.conv2.bias, 1, 1)?;
    x = tape.relu(b2)?;
    for level in (0..cfg.depth).rev() {
        let d = &nodes.decoders[level];
        let up = tape.upsample_nearest(x)?;
        let pad = Padding {
            top: 0,
            bottom: 1,
            left: 0,
            right: 1,
        };
        let up_conv = tape.conv2d_padded(up, d.up.weight, d.up.bias, 1, pad)?;
        let f_dm = tape.relu(up_conv)?;
        let projected = tape.conv2d(f_dm, d.project.weight, d.project.bias, 1, 0)?;
        let bn_mode = match session.mode {
            Mode::Train => BnMode::Batch,
            Mode::Eval => BnMode::Running(&params.decoders[level].bn_running),
        };
        let (bn_out, stats) = tape.batch_norm(projected, d.bn_gamma, d.bn_beta, BN_EPS, bn_mode)?;
        if let Some(s) = stats {
            session.bn_updates.push(s);
        }
        let f_g = match (session.mode, cfg.dropout_rate) {
            (Mode::Train, rate) if rate > 0.0 => {
                let rng = session
                    .dropout_rng
                    .as_mut()
                    .ok_or_else(|| Error::invalid("train-mode forward needs a dropout rng"))?;
                tape.dropout(bn_out, rate, rng)?
            }
            _ => bn_out,
        };
        let cat = tape.concat_channels(&[f_dm, skips[level], f_g])?;
        let fused = tape.conv2d(cat, d.fuse.weight, d.fuse.bias, 1, 1)?;
        x = tape.relu(fused)?;
    }
    let logits = tape.conv2d(x, nodes.head.weight, nodes.head.bias, 1, 0)?;
    let probs = tape.sigmoid(logits)?;
    Ok(ModelOutput { logits, probs })
}
