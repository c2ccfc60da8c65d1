//! The central-difference gradient suite: every differentiable operation
//! checked in isolation, plus the depth-1 model end to end with its gates
//! held fixed. Shared by the `gradcheck` CLI command and the acceptance
//! tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::attend_direction_on;
use crate::error::Result;
use crate::network::{
    model_forward_on, ForwardSession, GateTrace, ModelConfig, ModelNodes, ModelParams,
};
use crate::tape::{grad_check, BnMode, BnStats, Tape};
use crate::tensor::{Padding, Tensor};

/// One line of the gradient report.
#[derive(Debug, Clone)]
pub struct GradCheckItem {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckItem {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

const OP_TOL: f64 = 1e-6;
const MODEL_TOL: f64 = 1e-4;
const EPS: f64 = 1e-5;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_raw(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn weights(shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_raw(shape.to_vec(), (0..n).map(|i| (i as f64 * 0.37).sin()).collect())
}

/// Run the whole suite with inputs drawn from `seed`.
pub fn gradient_suite(seed: u64) -> Result<Vec<GradCheckItem>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items = Vec::new();
    let push = |name: &'static str, error: f64, tolerance: f64, items: &mut Vec<GradCheckItem>| {
        items.push(GradCheckItem {
            name,
            max_rel_error: error,
            tolerance,
        });
    };

    // linear reduction: the analytic gradient is exactly one
    let x = random(&[2, 3], &mut rng);
    let e = grad_check(|t, x| t.sum(x), &x, EPS)?;
    push("sum", e, 1e-10, &mut items);

    let x = random(&[3, 4], &mut rng);
    let e = grad_check(
        |t, x| {
            let s = t.softmax_rows(x)?;
            let m = t.mul(s, x)?;
            t.sum(m)
        },
        &x,
        EPS,
    )?;
    push("softmax_rows", e, OP_TOL, &mut items);

    let a = random(&[3, 4], &mut rng);
    let b = random(&[4, 2], &mut rng);
    let (b2, a2) = (b.clone(), a.clone());
    let e = grad_check(
        move |t, x| {
            let bn = t.constant(b2.clone());
            let m = t.matmul(x, bn)?;
            t.sum(m)
        },
        &a,
        EPS,
    )?;
    push("matmul (lhs)", e, OP_TOL, &mut items);
    let e = grad_check(
        move |t, x| {
            let an = t.constant(a2.clone());
            let m = t.matmul(an, x)?;
            t.sum(m)
        },
        &b,
        EPS,
    )?;
    push("matmul (rhs)", e, OP_TOL, &mut items);

    let x = random(&[2, 5, 5], &mut rng);
    let k = random(&[3, 2, 3, 3], &mut rng);
    let bias = random(&[3], &mut rng);
    let (kc, bc) = (k.clone(), bias.clone());
    let e = grad_check(
        move |t, leaf| {
            let kn = t.constant(kc.clone());
            let bn = t.constant(bc.clone());
            let c = t.conv2d(leaf, kn, bn, 1, 1)?;
            t.sum(c)
        },
        &x,
        EPS,
    )?;
    push("conv2d (input)", e, OP_TOL, &mut items);
    let (xc, bc) = (x.clone(), bias.clone());
    let e = grad_check(
        move |t, leaf| {
            let xn = t.constant(xc.clone());
            let bn = t.constant(bc.clone());
            let c = t.conv2d(xn, leaf, bn, 1, 1)?;
            t.sum(c)
        },
        &k,
        EPS,
    )?;
    push("conv2d (kernels)", e, OP_TOL, &mut items);
    let (xc, kc) = (x.clone(), k.clone());
    let e = grad_check(
        move |t, leaf| {
            let xn = t.constant(xc.clone());
            let kn = t.constant(kc.clone());
            let c = t.conv2d(xn, kn, leaf, 1, 1)?;
            t.sum(c)
        },
        &bias,
        EPS,
    )?;
    push("conv2d (bias)", e, OP_TOL, &mut items);

    let x = random(&[2, 4, 4], &mut rng);
    let k2 = random(&[2, 2, 2, 2], &mut rng);
    let b2 = random(&[2], &mut rng);
    let pad = Padding {
        top: 0,
        bottom: 1,
        left: 0,
        right: 1,
    };
    let (kc, bc) = (k2.clone(), b2.clone());
    let e = grad_check(
        move |t, leaf| {
            let kn = t.constant(kc.clone());
            let bn = t.constant(bc.clone());
            let c = t.conv2d_padded(leaf, kn, bn, 1, pad)?;
            t.sum(c)
        },
        &x,
        EPS,
    )?;
    push("conv2d 2x2 asymmetric pad", e, OP_TOL, &mut items);

    // well-separated values keep finite differences off pooling ties
    let n = 2 * 4 * 4;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.37).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        vals.swap(i, j);
    }
    let x = Tensor::from_raw(vec![2, 4, 4], vals);
    let e = grad_check(
        |t, leaf| {
            let p = t.maxpool2d(leaf)?;
            t.sum(p)
        },
        &x,
        EPS,
    )?;
    push("maxpool2d", e, OP_TOL, &mut items);

    let x = random(&[2, 4, 4], &mut rng);
    let e = grad_check(
        |t, leaf| {
            let u = t.upsample_nearest(leaf)?;
            let w = t.constant(weights(&[2, 8, 8]));
            let m = t.mul(u, w)?;
            t.sum(m)
        },
        &x,
        EPS,
    )?;
    push("upsample_nearest", e, OP_TOL, &mut items);

    let e = grad_check(
        |t, leaf| {
            let p = t.permute(leaf, &[2, 0, 1])?;
            let r = t.reshape(p, &[4, 8])?;
            let m = t.mul(r, r)?;
            t.sum(m)
        },
        &x,
        EPS,
    )?;
    push("permute + reshape", e, OP_TOL, &mut items);

    // keep relu inputs away from the kink at zero
    let data: Vec<f64> = (0..24)
        .map(|_| {
            let v: f64 = rng.gen_range(0.1..1.0);
            if rng.gen::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect();
    let x = Tensor::from_raw(vec![2, 3, 4], data);
    let e = grad_check(
        |t, leaf| {
            let r = t.relu(leaf)?;
            let m = t.mul(r, r)?;
            t.sum(m)
        },
        &x,
        EPS,
    )?;
    push("relu", e, OP_TOL, &mut items);

    let e = grad_check(
        |t, leaf| {
            let s = t.sigmoid(leaf)?;
            t.sum(s)
        },
        &x,
        EPS,
    )?;
    push("sigmoid", e, OP_TOL, &mut items);

    let other = random(&[2, 3, 4], &mut rng);
    let o2 = other.clone();
    let e = grad_check(
        move |t, leaf| {
            let c = t.constant(o2.clone());
            let a = t.add(leaf, c)?;
            let m = t.mul(a, leaf)?;
            let s = t.scale(m, 0.7)?;
            t.sum(s)
        },
        &x,
        EPS,
    )?;
    push("add + mul + scale", e, OP_TOL, &mut items);

    let a = random(&[1, 2, 2], &mut rng);
    let b = random(&[2, 2, 2], &mut rng);
    let b3 = b.clone();
    let e = grad_check(
        move |t, leaf| {
            let bn = t.constant(b3.clone());
            let cat = t.concat_channels(&[leaf, bn])?;
            let m = t.mul(cat, cat)?;
            t.sum(m)
        },
        &a,
        EPS,
    )?;
    push("concat_channels", e, OP_TOL, &mut items);

    let x = random(&[2, 3, 3], &mut rng);
    let gamma = Tensor::from_raw(vec![2], vec![1.3, 0.8]);
    let beta = Tensor::from_raw(vec![2], vec![0.1, -0.2]);
    let (g2, bt2) = (gamma.clone(), beta.clone());
    let e = grad_check(
        move |t, leaf| {
            let g = t.constant(g2.clone());
            let b = t.constant(bt2.clone());
            let (y, _) = t.batch_norm(leaf, g, b, 1e-5, BnMode::Batch)?;
            let w = t.constant(weights(&[2, 3, 3]));
            let m = t.mul(y, w)?;
            t.sum(m)
        },
        &x,
        EPS,
    )?;
    push("batch_norm train (input)", e, OP_TOL, &mut items);
    let (x2, bt2) = (x.clone(), beta.clone());
    let e = grad_check(
        move |t, leaf| {
            let xn = t.constant(x2.clone());
            let b = t.constant(bt2.clone());
            let (y, _) = t.batch_norm(xn, leaf, b, 1e-5, BnMode::Batch)?;
            let w = t.constant(weights(&[2, 3, 3]));
            let m = t.mul(y, w)?;
            t.sum(m)
        },
        &gamma,
        EPS,
    )?;
    push("batch_norm train (gamma)", e, OP_TOL, &mut items);
    let stats = BnStats {
        mean: vec![0.2, -0.1],
        var: vec![0.9, 1.4],
    };
    let (g2, bt2) = (gamma.clone(), beta.clone());
    let e = grad_check(
        move |t, leaf| {
            let g = t.constant(g2.clone());
            let b = t.constant(bt2.clone());
            let (y, _) = t.batch_norm(leaf, g, b, 1e-5, BnMode::Running(&stats))?;
            let m = t.mul(y, y)?;
            t.sum(m)
        },
        &x,
        EPS,
    )?;
    push("batch_norm eval (input)", e, OP_TOL, &mut items);

    let mask: Vec<f64> = (0..18).map(|i| if i % 3 == 0 { 0.0 } else { 2.0 }).collect();
    let x = random(&[2, 3, 3], &mut rng);
    let m2 = mask.clone();
    let e = grad_check(
        move |t, leaf| {
            let d = t.dropout_with_mask(leaf, m2.clone())?;
            let m = t.mul(d, d)?;
            t.sum(m)
        },
        &x,
        EPS,
    )?;
    push("dropout (fixed mask)", e, OP_TOL, &mut items);

    let logits = random(&[1, 4, 4], &mut rng);
    let target_data: Vec<f64> = (0..16).map(|_| if rng.gen::<bool>() { 1.0 } else { 0.0 }).collect();
    let target = Tensor::from_raw(vec![1, 4, 4], target_data);
    let t2 = target.clone();
    let e = grad_check(move |t, leaf| t.bce_with_logits(leaf, &t2), &logits, EPS)?;
    push("bce_with_logits", e, OP_TOL, &mut items);

    let probs_data: Vec<f64> = (0..16).map(|_| rng.gen_range(0.05..0.95)).collect();
    let probs = Tensor::from_raw(vec![1, 4, 4], probs_data);
    let t2 = target.clone();
    let e = grad_check(move |t, leaf| t.dice_loss(leaf, &t2, 1.0), &probs, EPS)?;
    push("dice_loss", e, OP_TOL, &mut items);

    let f = random(&[2, 4, 4], &mut rng);
    for (dir, name) in [
        (crate::attention::Direction::Horizontal, "attention (horizontal)"),
        (crate::attention::Direction::Vertical, "attention (vertical)"),
        (crate::attention::Direction::Depth, "attention (depth)"),
    ] {
        let e = grad_check(
            move |t, leaf| {
                let a = attend_direction_on(t, leaf, dir)?;
                let w = t.constant(weights(&[2, 4, 4]));
                let m = t.mul(a, w)?;
                t.sum(m)
            },
            &f,
            EPS,
        )?;
        push(name, e, 1e-5, &mut items);
    }

    // the depth-1 model end to end, input gradient, gates held fixed
    let cfg = ModelConfig {
        depth: 1,
        base_filters: 2,
        th: 0.3,
        input_size: 8,
        dropout_rate: 0.0,
        enable_encoder_attention: true,
        enable_decoder_attention: true,
        seed: seed ^ 0x9e37,
    };
    let params = ModelParams::init(&cfg)?;
    let image_data: Vec<f64> = (0..64).map(|_| rng.gen_range(0.0..1.0)).collect();
    let image = Tensor::from_raw(vec![1, 8, 8], image_data);

    let mut record_tape = Tape::new();
    let leaf = record_tape.leaf(image.clone(), false);
    let nodes = ModelNodes::insert(&mut record_tape, &params, false);
    let mut record = ForwardSession::eval().with_gates(GateTrace::record());
    model_forward_on(&mut record_tape, leaf, &nodes, &params, &cfg, &mut record)?;
    let masks = record.gates.into_masks().expect("record mode");

    let (p2, c2) = (params.clone(), cfg.clone());
    let m2 = masks.clone();
    let e = grad_check(
        move |tape, leaf| {
            let nodes = ModelNodes::insert(tape, &p2, false);
            let mut session = ForwardSession::eval().with_gates(GateTrace::replay(m2.clone()));
            let out = model_forward_on(tape, leaf, &nodes, &p2, &c2, &mut session)?;
            tape.sum(out.probs)
        },
        &image,
        EPS,
    )?;
    push("model depth-1 (input)", e, MODEL_TOL, &mut items);

    // the same model, gradient with respect to every parameter tensor:
    // the checked leaf is wired in as the idx-th parameter node
    let n_params = params.named_tensors().len();
    let mut worst_param_err = 0.0f64;
    for idx in 0..n_params {
        let (p2, c2) = (params.clone(), cfg.clone());
        let m2 = masks.clone();
        let img = image.clone();
        let start = params.named_tensors()[idx].1.clone();
        let e = grad_check(
            move |tape, leaf| {
                let image_node = tape.leaf(img.clone(), false);
                let nodes = ModelNodes::insert(tape, &p2, false);
                let mut flat = nodes.flat();
                flat[idx] = leaf;
                let rewired = rewire(&nodes, &flat);
                let mut session = ForwardSession::eval().with_gates(GateTrace::replay(m2.clone()));
                let out = model_forward_on(tape, image_node, &rewired, &p2, &c2, &mut session)?;
                tape.sum(out.probs)
            },
            &start,
            EPS,
        )?;
        worst_param_err = worst_param_err.max(e);
    }
    push("model depth-1 (parameters)", worst_param_err, MODEL_TOL, &mut items);

    Ok(items)
}

/// Rebuild a `ModelNodes` from a flat id list (inverse of
/// [`ModelNodes::flat`]).
fn rewire(reference: &ModelNodes, flat: &[crate::tape::NodeId]) -> ModelNodes {
    let mut it = flat.iter().copied();
    let mut next = || it.next().expect("flat list length matches");
    let encoders = reference
        .encoders
        .iter()
        .map(|_| crate::network::EncoderNodes {
            conv1: crate::network::ConvNodes {
                weight: next(),
                bias: next(),
            },
            conv2: crate::network::ConvNodes {
                weight: next(),
                bias: next(),
            },
        })
        .collect();
    let bottleneck = crate::network::EncoderNodes {
        conv1: crate::network::ConvNodes {
            weight: next(),
            bias: next(),
        },
        conv2: crate::network::ConvNodes {
            weight: next(),
            bias: next(),
        },
    };
    let decoders = reference
        .decoders
        .iter()
        .map(|_| crate::network::DecoderNodes {
            up: crate::network::ConvNodes {
                weight: next(),
                bias: next(),
            },
            project: crate::network::ConvNodes {
                weight: next(),
                bias: next(),
            },
            bn_gamma: next(),
            bn_beta: next(),
            fuse: crate::network::ConvNodes {
                weight: next(),
                bias: next(),
            },
        })
        .collect();
    let head = crate::network::ConvNodes {
        weight: next(),
        bias: next(),
    };
    ModelNodes {
        encoders,
        bottleneck,
        decoders,
        head,
    }
}
