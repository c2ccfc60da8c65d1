//! Acceptance suite: one test per criterion, each printing a PASS line.
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.
//!
//! The oracles in this file (matrix triple loop, six-nested-loop
//! convolution, window-scan pooling) are written from the definitions,
//! independent of the library's implementation paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uesa_core::attention::{brute_force_attention, self_attend};
use uesa_core::data::{encode_pgm, parse_pgm, synth_dataset};
use uesa_core::gradcheck::gradient_suite;
use uesa_core::metrics::{acc, dsc, iou, sen, spec, ConfusionCounts};
use uesa_core::network::{
    decode_checkpoint, encode_checkpoint, model_forward_on, plain_unet_forward_on, ForwardSession,
    ModelConfig, ModelNodes, ModelParams,
};
use uesa_core::shrinkage::{shrink_gate, shrink_integrate, ShrinkageConfig};
use uesa_core::tape::Tape;
use uesa_core::train::{ablate, sweep_threshold, train, LossKind, TrainConfig};
use uesa_core::{matmul, maxpool2d, Tensor};

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Criterion 1: the fast attention path agrees with the brute-force oracle,
/// and the core tensor ops agree with naive loop oracles, all within 1e-12.
#[test]
fn acceptance_1_oracle_equivalence() {
    // attention vs brute force on 50 random instances
    for seed in 0..50 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let n = rng.gen_range(1..=16);
        let d = rng.gen_range(1..=16);
        let view = random_tensor(&[n, d], &mut rng);
        let fast = self_attend(&view).unwrap();
        let brute = brute_force_attention(&view).unwrap();
        assert!(max_abs_diff(&fast.output, &brute.output) < 1e-12, "seed {seed}");
        assert!(max_abs_diff(&fast.alpha, &brute.alpha) < 1e-12, "seed {seed}");
    }

    let mut rng = ChaCha8Rng::seed_from_u64(2000);
    for _ in 0..20 {
        // matmul vs triple loop
        let n = rng.gen_range(1..=8);
        let k = rng.gen_range(1..=8);
        let m = rng.gen_range(1..=8);
        let a = random_tensor(&[n, k], &mut rng);
        let b = random_tensor(&[k, m], &mut rng);
        let fast = matmul(&a, &b).unwrap();
        for i in 0..n {
            for j in 0..m {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                assert!((fast.at(&[i, j]) - s).abs() < 1e-12);
            }
        }

        // conv2d vs six nested loops (3x3 kernel, padding 1)
        let c_in = rng.gen_range(1..=3);
        let c_out = rng.gen_range(1..=3);
        let side = rng.gen_range(3..=8);
        let input = random_tensor(&[c_in, side, side], &mut rng);
        let kernels = random_tensor(&[c_out, c_in, 3, 3], &mut rng);
        let bias = random_tensor(&[c_out], &mut rng);
        let fast = uesa_core::conv2d(&input, &kernels, &bias, 1, 1).unwrap();
        for co in 0..c_out {
            for oy in 0..side {
                for ox in 0..side {
                    let mut acc = bias.at(&[co]);
                    for ci in 0..c_in {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if iy < 0 || ix < 0 || iy >= side as isize || ix >= side as isize {
                                    continue;
                                }
                                acc += input.at(&[ci, iy as usize, ix as usize])
                                    * kernels.at(&[co, ci, ky, kx]);
                            }
                        }
                    }
                    assert!((fast.at(&[co, oy, ox]) - acc).abs() < 1e-12);
                }
            }
        }

        // maxpool vs window scan
        let side = 2 * rng.gen_range(1..=4);
        let t = random_tensor(&[c_in, side, side], &mut rng);
        let fast = maxpool2d(&t).unwrap();
        for c in 0..c_in {
            for oy in 0..side / 2 {
                for ox in 0..side / 2 {
                    let mut best = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            best = best.max(t.at(&[c, 2 * oy + dy, 2 * ox + dx]));
                        }
                    }
                    assert_eq!(fast.at(&[c, oy, ox]), best);
                }
            }
        }
    }

    println!("ACCEPTANCE 1 (oracle equivalence): PASS");
}

/// Criterion 2: every differentiable op and the depth-1 model pass central
/// finite-difference checks (ops < 1e-6, model < 1e-4).
#[test]
fn acceptance_2_gradient_suite() {
    let items = gradient_suite(7).unwrap();
    assert!(items.len() >= 20, "suite unexpectedly small");
    for item in &items {
        assert!(
            item.passed(),
            "{}: max rel error {} over tolerance {}",
            item.name,
            item.max_rel_error,
            item.tolerance
        );
    }
    println!(
        "ACCEPTANCE 2 (gradient suite, {} checks): PASS",
        items.len()
    );
}

/// Criterion 3: gate binariness, threshold monotonicity, sparsity
/// monotonicity, and the th=0 / gate-disabled bit-exact equivalence, each
/// over at least 100 random instances.
#[test]
fn acceptance_3_shrinkage_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    for round in 0..100 {
        let f_em = random_tensor(&[2, 4, 4], &mut rng);
        let f_h = random_tensor(&[2, 4, 4], &mut rng);
        let f_v = random_tensor(&[2, 4, 4], &mut rng);
        let f_d = random_tensor(&[2, 4, 4], &mut rng);

        // binariness
        let th = rng.gen_range(0.0..1.0);
        let gate = shrink_gate(&f_h, &ShrinkageConfig::new(th).unwrap()).unwrap();
        assert!(
            gate.data().iter().all(|&v| v == 0.0 || v == 1.0),
            "round {round}: non-binary gate"
        );

        // threshold monotonicity
        let th1 = rng.gen_range(0.0..1.0);
        let th2 = rng.gen_range(th1..1.0);
        let g1 = shrink_gate(&f_v, &ShrinkageConfig::new(th1).unwrap()).unwrap();
        let g2 = shrink_gate(&f_v, &ShrinkageConfig::new(th2).unwrap()).unwrap();
        assert!(
            g1.data().iter().zip(g2.data()).all(|(a, b)| a >= b),
            "round {round}: gate not monotone in th"
        );

        // sparsity monotonicity of the fused output
        let mut prev_zeros = 0usize;
        for th in [0.0, 0.3, 0.6, 0.9] {
            let cfg = ShrinkageConfig::new(th).unwrap();
            let (f_ta, _) = shrink_integrate(&f_em, &f_h, &f_v, &f_d, &cfg).unwrap();
            let zeros = f_ta.data().iter().filter(|&&v| v == 0.0).count();
            assert!(zeros >= prev_zeros, "round {round}: sparsity not monotone");
            prev_zeros = zeros;
        }

        // th = 0 equals the gate-disabled data path bit-exactly
        let cfg = ShrinkageConfig::new(0.0).unwrap();
        let (f_ta, f_mp) = shrink_integrate(&f_em, &f_h, &f_v, &f_d, &cfg).unwrap();
        assert_eq!(f_ta, f_em, "round {round}: th=0 altered the prior");
        assert_eq!(f_mp, maxpool2d(&f_em).unwrap());
    }

    println!("ACCEPTANCE 3 (shrinkage properties, 100 instances each): PASS");
}

/// Criterion 4: metric formulas against hand-derived counts, and the
/// dsc = 2*iou/(1+iou) identity over 1000 random count tuples.
#[test]
fn acceptance_4_metric_identities() {
    let c = ConfusionCounts::new(3, 1, 2, 4);
    assert!((dsc(&c) - 0.6667).abs() < 5e-5);
    assert!((dsc(&c) - 6.0 / 9.0).abs() < 1e-12);
    assert!((iou(&c) - 0.5).abs() < 1e-12);
    assert!((sen(&c) - 0.6).abs() < 1e-12);
    assert!((spec(&c) - 0.8).abs() < 1e-12);
    assert!((acc(&c) - 0.7).abs() < 1e-12);

    let mut rng = ChaCha8Rng::seed_from_u64(4000);
    let mut checked = 0;
    while checked < 1000 {
        let c = ConfusionCounts::new(
            rng.gen_range(0..1000),
            rng.gen_range(0..1000),
            rng.gen_range(0..1000),
            rng.gen_range(0..1000),
        );
        if c.true_pos + c.false_pos + c.false_neg == 0 {
            continue;
        }
        let i = iou(&c);
        assert!((dsc(&c) - 2.0 * i / (1.0 + i)).abs() < 1e-12);
        checked += 1;
    }

    println!("ACCEPTANCE 4 (metric identities, 1000 tuples): PASS");
}

/// Criterion 5: a depth-2, base-8 model overfits one 32x32 sample to
/// training IoU >= 0.95 within the pinned budget of 200 steps, and the
/// step-loss curve is weakly monotone after warmup. Budget established
/// empirically (first crossing near step 40 across seeds) and frozen.
#[test]
fn acceptance_5_overfit_convergence() {
    const STEP_BUDGET: usize = 200;
    const WARMUP: usize = 50;
    const WINDOW: usize = 50;

    let cfg = TrainConfig {
        model: ModelConfig {
            depth: 2,
            base_filters: 8,
            th: 0.3,
            input_size: 32,
            dropout_rate: 0.0,
            enable_encoder_attention: true,
            enable_decoder_attention: true,
            seed: 11,
        },
        lr: 1e-3,
        batch_size: 1,
        epochs: STEP_BUDGET,
        loss: LossKind::Bce,
        val_fraction: 0.0,
    };
    let data = synth_dataset(1, 32, 11).unwrap();
    let result = train(&cfg, &data).unwrap();

    // one sample, batch one: step k is epoch k, and validation runs on the
    // training sample itself
    let first_hit = result
        .logs
        .iter()
        .find(|log| log.val_iou >= 0.95)
        .map(|log| log.epoch);
    assert!(
        first_hit.is_some(),
        "training IoU never reached 0.95 within {STEP_BUDGET} steps (best {:.4})",
        result.best_val_iou
    );

    // weak monotonicity: after warmup, no 50-step window's mean loss
    // exceeds the previous window's
    let losses = &result.step_losses;
    assert_eq!(losses.len(), STEP_BUDGET);
    for t in WARMUP..=(losses.len() - WINDOW) {
        let prev: f64 = losses[t - WINDOW..t].iter().sum::<f64>() / WINDOW as f64;
        let cur: f64 = losses[t..t + WINDOW].iter().sum::<f64>() / WINDOW as f64;
        assert!(
            cur <= prev + 1e-9,
            "loss window rose at step {t}: {prev:.6} -> {cur:.6}"
        );
    }

    println!(
        "ACCEPTANCE 5 (overfit: IoU >= 0.95 at step {} of {STEP_BUDGET}): PASS",
        first_hit.unwrap()
    );
}

/// Criterion 6: the desk-scale model (depth 3, base 8, size 64) trained for
/// 30 epochs on 200 synthetic samples reaches held-out IoU >= 0.85.
/// Observed 0.9847 on the frozen generator parameters.
#[test]
fn acceptance_6_desk_scale_learning() {
    let cfg = TrainConfig::desk();
    let data = synth_dataset(200, 64, cfg.model.seed).unwrap();
    let result = train(&cfg, &data).unwrap();
    assert!(
        result.best_val_iou >= 0.85,
        "held-out IoU {:.4} below the 0.85 gate",
        result.best_val_iou
    );
    println!(
        "ACCEPTANCE 6 (desk-scale learning: held-out IoU {:.4} >= 0.85): PASS",
        result.best_val_iou
    );
}

fn small_experiment_config() -> TrainConfig {
    TrainConfig {
        model: ModelConfig {
            depth: 2,
            base_filters: 4,
            th: 0.3,
            input_size: 32,
            dropout_rate: 0.0,
            enable_encoder_attention: true,
            enable_decoder_attention: true,
            seed: 21,
        },
        lr: 1e-3,
        batch_size: 4,
        epochs: 4,
        loss: LossKind::Bce,
        val_fraction: 0.25,
    }
}

/// Criterion 7: the ablation harness emits the three-variant table, the
/// no-attention graph equals the plain baseline bit-exactly, and the IoU
/// ordering across variants is reported (never hard-asserted).
#[test]
fn acceptance_7_ablation_structure() {
    // construction equivalence: both flags off == plain baseline
    let cfg = ModelConfig {
        enable_encoder_attention: false,
        enable_decoder_attention: false,
        depth: 2,
        base_filters: 4,
        input_size: 32,
        dropout_rate: 0.0,
        th: 0.3,
        seed: 9,
    };
    let params = ModelParams::init(&cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(7000);
    let image = Tensor::new(
        vec![1, 32, 32],
        (0..1024).map(|_| rng.gen_range(0.0..1.0)).collect(),
    )
    .unwrap();

    let mut tape_a = Tape::new();
    let leaf_a = tape_a.leaf(image.clone(), false);
    let nodes_a = ModelNodes::insert(&mut tape_a, &params, false);
    let mut sess_a = ForwardSession::eval();
    let out_a = model_forward_on(&mut tape_a, leaf_a, &nodes_a, &params, &cfg, &mut sess_a).unwrap();

    let mut tape_b = Tape::new();
    let leaf_b = tape_b.leaf(image, false);
    let nodes_b = ModelNodes::insert(&mut tape_b, &params, false);
    let mut sess_b = ForwardSession::eval();
    let out_b =
        plain_unet_forward_on(&mut tape_b, leaf_b, &nodes_b, &params, &cfg, &mut sess_b).unwrap();
    assert_eq!(
        tape_a.value(out_a.probs),
        tape_b.value(out_b.probs),
        "no-attention model diverged from the plain baseline"
    );

    // table structure at reduced scale
    let cfg = small_experiment_config();
    let data = synth_dataset(24, 32, cfg.model.seed).unwrap();
    let report = ablate(&cfg, &data).unwrap();
    let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["full", "no_tatt", "no_datt"]);
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.trim_end().lines().collect();
    assert_eq!(lines[0], "variant,dsc,iou,sen,spec,acc");
    assert_eq!(lines.len(), 4);
    for line in &lines[1..] {
        assert_eq!(line.matches('±').count(), 5, "row lacks mean±std cells: {line}");
    }

    println!("ACCEPTANCE 7 (ablation structure): PASS [{}]", report.ordering);
}

/// Criterion 8: the threshold sweep emits one row per value over
/// {0.1, 0.2, 0.3, 0.4} and reports the qualitative trend (never
/// hard-asserted).
#[test]
fn acceptance_8_threshold_sweep_structure() {
    let cfg = small_experiment_config();
    let data = synth_dataset(24, 32, cfg.model.seed).unwrap();
    let report = sweep_threshold(&cfg, &[0.1, 0.2, 0.3, 0.4], &data).unwrap();
    assert_eq!(report.rows.len(), 4);
    let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(labels, ["0.1", "0.2", "0.3", "0.4"]);
    let csv = report.to_csv();
    let lines: Vec<&str> = csv.trim_end().lines().collect();
    assert_eq!(lines[0], "th,dsc,iou,sen,spec,acc");
    assert_eq!(lines.len(), 5);
    for line in &lines[1..] {
        assert_eq!(line.matches('±').count(), 5, "row lacks mean±std cells: {line}");
    }
    assert!(!report.trend.is_empty());

    println!("ACCEPTANCE 8 (threshold sweep structure): PASS [{}]", report.trend);
}

/// Criterion 9: bit-level determinism and persistence — identical seeds
/// reproduce identical runs, checkpoints round-trip byte-identically, and
/// PGM files round-trip byte-identically.
#[test]
fn acceptance_9_determinism_and_persistence() {
    // two identical training runs, dropout active
    let mut cfg = small_experiment_config();
    cfg.model.dropout_rate = 0.5;
    cfg.epochs = 2;
    let data = synth_dataset(8, 32, 17).unwrap();
    let a = train(&cfg, &data).unwrap();
    let b = train(&cfg, &data).unwrap();
    assert_eq!(a.logs, b.logs, "epoch logs differ between identical runs");
    assert_eq!(a.step_losses, b.step_losses);
    assert_eq!(a.final_params, b.final_params);

    // checkpoint byte round-trip
    let bytes = encode_checkpoint(&a.final_params);
    let restored = decode_checkpoint(&bytes, &cfg.model).unwrap();
    assert_eq!(encode_checkpoint(&restored), bytes);

    // pgm byte round-trip
    let mut rng = ChaCha8Rng::seed_from_u64(9000);
    let image = Tensor::new(
        vec![1, 16, 16],
        (0..256).map(|_| rng.gen_range(0.0..=1.0)).collect(),
    )
    .unwrap();
    let pgm = encode_pgm(&image).unwrap();
    let decoded = parse_pgm(&pgm).unwrap();
    assert_eq!(encode_pgm(&decoded).unwrap(), pgm);

    println!("ACCEPTANCE 9 (determinism and persistence): PASS");
}
