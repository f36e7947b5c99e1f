use proptest::prelude::*;
use rebirth_core::fixtures;
use rebirth_core::graph::{infer_shapes, run_forward};
use rebirth_core::kernels::{conv2d, pool2d};
use rebirth_core::rng::{derive, uniform_tensor};
use rebirth_core::slim::{absorb_pool, apply_plan, build_slim_plan, Segment, SlimOptions};
use rebirth_core::train::{
    finetune_records, gradient_check, loss_and_grads, reconstruction_loss, sample_pairs, sgd_fit, xavier_bound,
    xavier_conv, xavier_init, FinetuneOptions, InputSource, LrScaling, PairDataset, TrainConfig, TrainError,
};
use rebirth_core::{ConvParams, Hw, LayerKind, Tensor4};

fn f64_conv(seed: u64, o: usize, i: usize, k: usize, s: usize, p: usize) -> ConvParams<f64> {
    let mut rng = derive(seed, "grad-conv");
    ConvParams {
        weights: uniform_tensor(&mut rng, [o, i, k, k], -1.0, 1.0).convert(),
        bias: uniform_tensor(&mut rng, [1, o, 1, 1], -0.5, 0.5).convert::<f64>().into_data(),
        stride: Hw::square(s),
        pad: Hw::square(p),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn analytic_gradient_matches_finite_differences(
        seed in any::<u64>(),
        o in 1usize..4, i in 1usize..4, k in 1usize..4, s in 1usize..3, p in 0usize..2,
        h in 4usize..8, w in 4usize..8, n in 1usize..4,
    ) {
        prop_assume!(p < k);
        let conv = f64_conv(seed, o, i, k, s, p);
        let x: Tensor4<f64> = uniform_tensor(&mut derive(seed, "x"), [n, i, h, w], -1.0, 1.0).convert();
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let y: Tensor4<f64> = uniform_tensor(&mut derive(seed, "y"), [n, o, ho, wo], -1.0, 1.0).convert();
        let err = gradient_check(&conv, &x, &y, 1e-5).unwrap();
        prop_assert!(err <= 1e-3, "relative error {}", err);
    }

    #[test]
    fn xavier_weights_stay_in_bounds(seed in any::<u64>(), o in 1usize..8, i in 1usize..8, k in 1usize..4) {
        let w = xavier_init([o, i, k, k], seed);
        let a = xavier_bound([o, i, k, k]) as f32;
        prop_assert!(w.data().iter().all(|v| v.abs() <= a));
        prop_assert_eq!(w, xavier_init([o, i, k, k], seed));
    }
}

#[test]
fn xavier_statistics() {
    let shape = [64, 32, 3, 3];
    let w = xavier_init(shape, 3);
    let a = xavier_bound(shape);
    assert!((a - (6.0f64 / (32.0 * 9.0 + 64.0 * 9.0)).sqrt()).abs() < 1e-15);
    let n = w.len() as f64;
    let mean = w.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = w.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    // uniform on [-a, a]: mean 0, variance a^2 / 3
    assert!(mean.abs() < 0.02 * a);
    assert!((var / (a * a / 3.0) - 1.0).abs() < 0.03);
    assert_ne!(xavier_init(shape, 3), xavier_init(shape, 4));
}

#[test]
fn gradient_is_correct_for_a_hand_sized_case() {
    // 1x1 conv, single weight w and bias b on a single pixel x with target y:
    // loss = (w x + b - y)^2, dL/dw = 2 (w x + b - y) x, dL/db = 2 (w x + b - y)
    let p = ConvParams::<f64> {
        weights: Tensor4::filled(1, 1, 1, 1, 0.5),
        bias: vec![0.25],
        stride: Hw::square(1),
        pad: Hw::square(0),
    };
    let x = Tensor4::filled(1, 1, 1, 1, 2.0);
    let y = Tensor4::filled(1, 1, 1, 1, 3.0);
    let g = loss_and_grads(&p, &x, &y).unwrap();
    assert_eq!(g.loss, 1.75 * 1.75);
    assert_eq!(g.weights, vec![2.0 * -1.75 * 2.0]);
    assert_eq!(g.bias, vec![2.0 * -1.75]);
}

#[test]
fn identity_segment_pairs_are_conv_outputs() {
    let g = fixtures::pool_fixture(1);
    let data = sample_pairs(&g, &Segment::new("conv", "conv"), 10, &InputSource::Noise, 4).unwrap();
    let LayerKind::Conv(p) = &g.node("conv").unwrap().kind else { panic!() };
    assert!(conv2d(&data.inputs, p).unwrap().bitwise_eq(&data.targets));
    assert!(data.inputs.data().iter().all(|v| (-1.0..1.0).contains(v)));
}

#[test]
fn composite_segment_pairs_compose() {
    let g = fixtures::pool_fixture(2);
    let data = sample_pairs(&g, &Segment::new("conv", "pool"), 40, &InputSource::Smooth, 4).unwrap();
    let LayerKind::Conv(c) = &g.node("conv").unwrap().kind else { panic!() };
    let LayerKind::Pool(p) = &g.node("pool").unwrap().kind else { panic!() };
    let want = pool2d(&conv2d(&data.inputs, c).unwrap(), p).unwrap();
    assert!(want.bitwise_eq(&data.targets));
    let again = sample_pairs(&g, &Segment::new("conv", "pool"), 40, &InputSource::Smooth, 4).unwrap();
    assert_eq!(again, data);
    let other = sample_pairs(&g, &Segment::new("conv", "pool"), 40, &InputSource::Smooth, 5).unwrap();
    assert_ne!(other.inputs, data.inputs);
}

#[test]
fn pairs_from_inside_a_network_read_the_entry_activation() {
    let g = fixtures::alexnet_mini(1);
    let data = sample_pairs(&g, &Segment::new("conv2", "pool2"), 5, &InputSource::Smooth, 2).unwrap();
    let s = infer_shapes(&g, g.input_shape().unwrap()).unwrap();
    assert_eq!(data.inputs.dims(), [5, s["pool1"].c, s["pool1"].h, s["pool1"].w]);
    assert_eq!(data.targets.dims(), [5, s["pool2"].c, s["pool2"].h, s["pool2"].w]);
    assert!(sample_pairs(&g, &Segment::new("pool2", "conv2"), 5, &InputSource::Smooth, 2).is_err());
}

fn exact_dataset() -> (PairDataset, ConvParams) {
    let g = fixtures::pool_fixture(3);
    let data = sample_pairs(&g, &Segment::new("conv", "conv"), 16, &InputSource::Noise, 1).unwrap();
    let p = g.node("conv").unwrap().kind.as_conv().unwrap().clone();
    (data, p)
}

#[test]
fn exact_init_has_zero_loss_and_does_not_move() {
    let (data, p) = exact_dataset();
    let config = TrainConfig {
        max_iters: 20,
        ..TrainConfig::default()
    };
    let (fitted, report) = sgd_fit(&data, &p, &config).unwrap();
    assert_eq!(report.initial_loss, 0.0);
    assert_eq!(report.final_loss, 0.0);
    assert_eq!(fitted, p);
}

#[test]
fn zero_rate_keeps_the_loss_flat() {
    let (data, p) = exact_dataset();
    let init = xavier_conv([8, 4, 3, 3], p.stride, p.pad, 9);
    for scaling in [LrScaling::Raw, LrScaling::Curvature] {
        let config = TrainConfig {
            lr_multiplier_new_layer: 0.0,
            max_iters: 30,
            eval_every: 5,
            lr_scaling: scaling,
            ..TrainConfig::default()
        };
        let (fitted, report) = sgd_fit(&data, &init, &config).unwrap();
        assert_eq!(fitted, init);
        assert!(report.lr_curve.iter().all(|lr| *lr == 0.0));
        assert_eq!(report.final_loss, report.initial_loss);
        assert_eq!(report.best_iteration, 0);
    }
}

#[test]
fn step_schedule_decays() {
    let c = TrainConfig {
        base_lr: 0.01,
        lr_multiplier_new_layer: 10.0,
        gamma: 0.1,
        step_size: 100,
        ..TrainConfig::default()
    };
    assert!((c.lr_at(0) - 0.1).abs() < 1e-15);
    assert!((c.lr_at(99) - 0.1).abs() < 1e-15);
    assert!((c.lr_at(100) - 0.01).abs() < 1e-15);
    assert!((c.lr_at(250) - 0.001).abs() < 1e-15);
}

#[test]
fn invalid_configs_are_rejected() {
    let (data, p) = exact_dataset();
    for bad in [
        TrainConfig { batch_size: 0, ..TrainConfig::default() },
        TrainConfig { momentum: 1.0, ..TrainConfig::default() },
        TrainConfig { base_lr: -1.0, ..TrainConfig::default() },
        TrainConfig { step_size: 0, ..TrainConfig::default() },
    ] {
        assert!(matches!(sgd_fit(&data, &p, &bad), Err(TrainError::Config(_))));
    }
}

#[test]
fn huge_raw_rate_diverges() {
    let (data, p) = exact_dataset();
    let init = xavier_conv([8, 4, 3, 3], p.stride, p.pad, 9);
    let config = TrainConfig {
        base_lr: 1e6,
        lr_scaling: LrScaling::Raw,
        max_iters: 200,
        ..TrainConfig::default()
    };
    assert!(matches!(sgd_fit(&data, &init, &config), Err(TrainError::Diverged { .. })));
}

#[test]
fn pool_absorption_fit_reduces_loss() {
    let g = fixtures::pool_fixture(0);
    let (slim, _) = absorb_pool(&g, "conv", "pool").unwrap();
    let data = sample_pairs(&g, &Segment::new("conv", "pool"), 64, &InputSource::Smooth, 0).unwrap();
    let c = slim.node("conv").unwrap().kind.as_conv().unwrap();
    let init = xavier_conv([8, 4, 3, 3], c.stride, c.pad, 1);
    let config = TrainConfig {
        max_iters: 200,
        ..TrainConfig::default()
    };
    let (fitted, report) = sgd_fit(&data, &init, &config).unwrap();
    assert!(report.final_loss < report.initial_loss / 10.0, "{}", report.table());
    let check = reconstruction_loss(&fitted, &data.inputs, &data.targets).unwrap();
    assert!((check - report.final_loss).abs() <= 1e-9 * report.final_loss.max(1.0));
    let table = report.table();
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 201);
}

#[test]
fn alexnet_finetune_fits_two_layers_deterministically() {
    let g = fixtures::alexnet_mini(0);
    let plan = build_slim_plan(&g, &SlimOptions::default()).unwrap();
    let (slim, records) = apply_plan(&g, &plan).unwrap();
    let opts = FinetuneOptions {
        train: TrainConfig {
            max_iters: 150,
            ..TrainConfig::default()
        },
        samples: 64,
        ..FinetuneOptions::default()
    };
    let (tuned, reports) = finetune_records(&g, &slim, &records, &opts).unwrap();
    assert_eq!(reports.iter().map(|r| r.layer.as_str()).collect::<Vec<_>>(), ["conv1", "conv2"]);
    for r in &reports {
        assert!(r.fit.final_loss < r.fit.initial_loss, "{}", r.layer);
    }
    let (again, _) = finetune_records(&g, &slim, &records, &opts).unwrap();
    assert_eq!(tuned, again);
    let s = g.input_shape().unwrap();
    let x = uniform_tensor(&mut derive(0, "x"), [2, s.c, s.h, s.w], -1.0, 1.0);
    assert!(run_forward(&tuned, &x).is_ok());
}

#[test]
fn plan_without_retraining_is_a_no_op() {
    let g = fixtures::conv_bn_scale(1, 3, 4, 3, true, 0.0);
    let plan = build_slim_plan(&g, &SlimOptions::default()).unwrap();
    let (slim, records) = apply_plan(&g, &plan).unwrap();
    let (tuned, reports) = finetune_records(&g, &slim, &records, &FinetuneOptions::default()).unwrap();
    assert!(reports.is_empty());
    assert_eq!(tuned, slim);
}
