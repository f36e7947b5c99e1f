use super::*;
use crate::fixtures::{
    add_inception, alexnet_mini, conv_bn_scale, googlenet_mini, he_conv, pool_fixture, GoogLeNetMiniOptions,
    InceptionWidths,
};
use crate::graph::{compare_models, infer_shapes, run_forward_outputs, total_flops, Chw, LayerKind, ModelGraph};
use crate::params::{BnParams, LrnParams, PoolMode, PoolParams, ScaleParams};
use crate::rng::{derive, uniform_tensor};

fn max_diff(a: &ModelGraph, b: &ModelGraph, n: usize) -> f64 {
    compare_models(a, b, n, 11, 0.0).unwrap().max_abs_diff
}

fn passes(plan: &SlimPlan) -> Vec<(PassKind, String)> {
    plan.records.iter().map(|r| (r.pass, r.removed_ids.join(","))).collect()
}

#[test]
fn identity_bn_fold_keeps_weights() {
    let mut g = conv_bn_scale(3, 2, 3, 3, true, 0.0);
    g.node_mut("bn").unwrap().kind = LayerKind::BatchNorm(BnParams {
        mean: vec![0.0; 3],
        var: vec![1.0; 3],
        eps: 0.0,
    });
    g.node_mut("scale").unwrap().kind = LayerKind::Scale(ScaleParams::identity(3));
    let (out, rec) = fold_bn_scale(&g, "conv", "bn", Some("scale")).unwrap();
    assert_eq!(out.node("conv").unwrap().kind, g.node("conv").unwrap().kind);
    assert_eq!(rec.removed_ids, vec!["bn", "scale"]);
    assert!(!rec.needs_retrain);
    assert_eq!(out.output_ids(), ["conv"]);
}

#[test]
fn zero_gamma_fold_gives_constant_beta() {
    let mut g = conv_bn_scale(4, 2, 2, 3, true, 1e-5);
    let beta = vec![0.25f32, -1.5];
    g.node_mut("scale").unwrap().kind = LayerKind::Scale(ScaleParams {
        gamma: vec![0.0; 2],
        beta: beta.clone(),
    });
    let (out, _) = fold_bn_scale(&g, "conv", "bn", Some("scale")).unwrap();
    let x = uniform_tensor(&mut derive(1, "x"), [2, 2, 8, 8], -1.0, 1.0);
    let y = run_forward_outputs(&out, &x).unwrap().remove(0);
    for n in 0..2 {
        for (c, b) in beta.iter().enumerate() {
            assert!(y.plane(n, c).iter().all(|v| v == b));
        }
    }
}

#[test]
fn fold_is_exact_with_and_without_scale() {
    for (seed, with_scale) in [(1, true), (2, false)] {
        let g = conv_bn_scale(seed, 3, 5, 3, with_scale, 0.0);
        let scale = with_scale.then_some("scale");
        let (out, _) = fold_bn_scale(&g, "conv", "bn", scale).unwrap();
        assert_eq!(out.len(), g.len() - 1 - usize::from(with_scale));
        assert!(max_diff(&g, &out, 8) <= 1e-4);
    }
}

#[test]
fn fold_rejects_non_adjacent_or_wrong_kind() {
    let g = conv_bn_scale(5, 2, 2, 3, true, 0.0);
    assert!(matches!(
        fold_bn_scale(&g, "conv", "scale", None),
        Err(SlimError::WrongKind { .. })
    ));
    assert!(matches!(
        fold_bn_scale(&g, "data", "bn", None),
        Err(SlimError::WrongKind { .. })
    ));
}

fn two_branch_module(k_a: usize, k_b: usize) -> ModelGraph {
    let mut rng = derive(3, "two-branch");
    let mut g = ModelGraph::new();
    g.push("data", LayerKind::Input(Chw::new(4, 8, 8)), &[]).unwrap();
    g.push("a", LayerKind::Conv(he_conv(&mut rng, 3, 4, k_a, 1, k_a / 2)), &["data"]).unwrap();
    g.push("a_relu", LayerKind::Relu, &["a"]).unwrap();
    g.push("b", LayerKind::Conv(he_conv(&mut rng, 5, 4, k_b, 1, k_b / 2)), &["data"]).unwrap();
    g.push("b_relu", LayerKind::Relu, &["b"]).unwrap();
    g.push("cat", LayerKind::Concat, &["a_relu", "b_relu"]).unwrap();
    g.push("head", LayerKind::Conv(he_conv(&mut rng, 2, 8, 1, 1, 0)), &["cat"]).unwrap();
    g.set_outputs(["head"]);
    g
}

#[test]
fn merge_same_kernel_pair_is_exact() {
    let g = two_branch_module(3, 3);
    let (out, rec) = merge_parallel_convs(&g, &["a", "b"], "cat").unwrap();
    assert_eq!(rec.pass, PassKind::MergeParallelConv);
    assert!(!out.contains("b"));
    assert_eq!(out.node("a").unwrap().kind.as_conv().unwrap().out_channels(), 8);
    assert!(max_diff(&g, &out, 4) <= 1e-6);
}

#[test]
fn merge_rejects_different_kernels() {
    let g = two_branch_module(1, 3);
    assert!(matches!(
        merge_parallel_convs(&g, &["a", "b"], "cat"),
        Err(SlimError::Incompatible(_))
    ));
}

#[test]
fn identity_lrn_prune_is_bitwise_exact() {
    let mut g = alexnet_mini(2);
    for id in ["norm1", "norm2"] {
        g.node_mut(id).unwrap().kind = LayerKind::Lrn(LrnParams {
            alpha: 0.0,
            k: 1.0,
            ..LrnParams::default()
        });
    }
    let (out, rec) = prune_lrn(&g, "norm1").unwrap();
    assert_eq!(rec.new_id, "conv1");
    assert!(rec.needs_retrain);
    let x = uniform_tensor(&mut derive(2, "x"), [3, 3, 32, 32], -1.0, 1.0);
    let a = run_forward_outputs(&g, &x).unwrap().remove(0);
    let b = run_forward_outputs(&out, &x).unwrap().remove(0);
    assert!(a.bitwise_eq(&b));
}

#[test]
fn absorb_pool_matches_post_pool_shape() {
    let g = pool_fixture(1);
    let (out, rec) = absorb_pool(&g, "conv", "pool").unwrap();
    let conv = out.node("conv").unwrap().kind.as_conv().unwrap();
    assert_eq!(conv.stride, crate::Hw::square(2));
    assert_eq!(rec.removed_ids, vec!["pool"]);
    let before = infer_shapes(&g, g.input_shape().unwrap()).unwrap();
    let after = infer_shapes(&out, out.input_shape().unwrap()).unwrap();
    assert_eq!(before["pool"], after["conv"]);
}

#[test]
fn absorb_pool_keeps_relu_and_rejects_other_layers_between() {
    let g = alexnet_mini(1);
    // relu1 -> norm1 sits between conv1 and pool1
    assert!(absorb_pool(&g, "conv1", "pool1").is_err());
    let (pruned, _) = prune_lrn(&g, "norm1").unwrap();
    let (out, _) = absorb_pool(&pruned, "conv1", "pool1").unwrap();
    assert!(matches!(out.node("relu1").unwrap().kind, LayerKind::Relu));
    assert_eq!(out.node("conv2").unwrap().inputs, vec!["relu1"]);
}

#[test]
fn alexnet_mini_plan() {
    let g = alexnet_mini(0);
    let plan = build_slim_plan(&g, &SlimOptions::default()).unwrap();
    assert_eq!(
        passes(&plan),
        vec![
            (PassKind::PruneLrn, "norm1".to_string()),
            (PassKind::AbsorbPool, "pool1".to_string()),
            (PassKind::PruneLrn, "norm2".to_string()),
            (PassKind::AbsorbPool, "pool2".to_string()),
        ]
    );
    let (slim, records) = apply_plan(&g, &plan).unwrap();
    assert_eq!(slim.len(), g.len() - 4);
    assert_eq!(records.len(), 4);
    let shapes = infer_shapes(&slim, slim.input_shape().unwrap()).unwrap();
    assert_eq!(shapes["conv3"], Chw::new(32, 7, 7));
}

#[test]
fn pure_conv_net_has_empty_plan() {
    let mut rng = derive(1, "pure");
    let mut g = ModelGraph::new();
    g.push("data", LayerKind::Input(Chw::new(2, 6, 6)), &[]).unwrap();
    g.push("c1", LayerKind::Conv(he_conv(&mut rng, 3, 2, 3, 1, 1)), &["data"]).unwrap();
    g.push("c2", LayerKind::Conv(he_conv(&mut rng, 3, 3, 3, 1, 1)), &["c1"]).unwrap();
    g.set_outputs(["c2"]);
    let plan = build_slim_plan(&g, &SlimOptions::default()).unwrap();
    assert!(plan.is_empty());
    assert!(format_plan(&plan).contains("empty plan"));
}

#[test]
fn two_tensor_branches_are_refused_without_force() {
    let g = two_branch_module(1, 3);
    let err = slim_tensor_branch(&g, &["a", "a_relu"], "b", &TensorBranchOptions::default()).unwrap_err();
    assert!(matches!(err, SlimError::TooFewBranches { branches: 2, .. }));
    let opts = TensorBranchOptions {
        force: true,
        channels: None,
    };
    let (out, rec) = slim_tensor_branch(&g, &["a", "a_relu"], "b", &opts).unwrap();
    assert!(rec.force);
    assert!(!out.contains("cat"));
    assert_eq!(out.node("b").unwrap().kind.as_conv().unwrap().out_channels(), 8);
    assert_eq!(out.node("head").unwrap().inputs, vec!["b_relu"]);
}

#[test]
fn branch_larger_than_host_is_refused() {
    let g = two_branch_module(3, 1);
    let opts = TensorBranchOptions {
        force: true,
        channels: None,
    };
    assert!(matches!(
        slim_tensor_branch(&g, &["a", "a_relu"], "b", &opts),
        Err(SlimError::KernelTooSmall { .. })
    ));
}

fn module_graph(w: InceptionWidths) -> ModelGraph {
    let mut rng = derive(9, "module");
    let mut g = ModelGraph::new();
    g.push("data", LayerKind::Input(Chw::new(6, 8, 8)), &[]).unwrap();
    add_inception(&mut g, &mut rng, "m", "data", 6, w);
    let head = he_conv(&mut rng, 4, w.total(), 1, 1, 0);
    g.push("head", LayerKind::Conv(head), &["m/concat"]).unwrap();
    g.push(
        "gap",
        LayerKind::Pool(PoolParams::new(PoolMode::Average, 8, 1, 0)),
        &["head"],
    )
    .unwrap();
    g.set_outputs(["gap"]);
    g
}

const WIDTHS: InceptionWidths = InceptionWidths {
    b1: 3,
    b2_reduce: 4,
    b2: 5,
    b3_reduce: 2,
    b3: 3,
    b4: 2,
};

#[test]
fn nontensor_branch_grows_host_and_keeps_channel_count() {
    let g = module_graph(WIDTHS);
    let ids = ["m/b4/pool", "m/b4/proj", "m/b4/relu"];
    let (out, rec) = slim_nontensor_branch(&g, &ids, "m/b3/conv").unwrap();
    assert!(ids.iter().all(|id| !out.contains(id)));
    assert_eq!(out.node("m/b3/conv").unwrap().kind.as_conv().unwrap().out_channels(), 5);
    let shapes = infer_shapes(&out, out.input_shape().unwrap()).unwrap();
    assert_eq!(shapes["m/concat"].c, WIDTHS.total());
    let spec = rec.retrain.iter().find(|s| s.layer == "m/b3/conv").unwrap();
    assert_eq!(spec.target.len(), 2);
    let map = rec.channel_map.unwrap();
    let mut sorted: Vec<usize> = map.iter().map(|m| m.unwrap()).collect();
    sorted.sort_unstable();
    assert_eq!(sorted, (0..WIDTHS.total()).collect::<Vec<_>>());
}

#[test]
fn nontensor_host_must_cover_pool_window() {
    let g = module_graph(WIDTHS);
    let ids = ["m/b4/pool", "m/b4/proj", "m/b4/relu"];
    assert!(matches!(
        slim_nontensor_branch(&g, &ids, "m/b1/conv"),
        Err(SlimError::KernelTooSmall { .. })
    ));
}

#[test]
fn tensor_branch_with_channel_override() {
    let g = module_graph(WIDTHS);
    let opts = TensorBranchOptions {
        force: false,
        channels: Some(10),
    };
    let (out, rec) = slim_tensor_branch(&g, &["m/b1/conv", "m/b1/relu"], "m/b2/conv", &opts).unwrap();
    assert_eq!(out.node("m/b2/conv").unwrap().kind.as_conv().unwrap().out_channels(), 10);
    let map = rec.channel_map.unwrap();
    assert_eq!(map.iter().filter(|m| m.is_none()).count(), 2);
    let shapes = infer_shapes(&out, out.input_shape().unwrap()).unwrap();
    assert_eq!(shapes["m/concat"].c, WIDTHS.total() + 2);
}

#[test]
fn zero_channel_branch_is_absorbed() {
    let mut w = WIDTHS;
    w.b1 = 0;
    let g = module_graph(w);
    let (out, _) =
        slim_tensor_branch(&g, &["m/b1/conv", "m/b1/relu"], "m/b2/conv", &TensorBranchOptions::default()).unwrap();
    assert_eq!(out.node("m/b2/conv").unwrap().kind.as_conv().unwrap().out_channels(), w.b2);
    // nothing moved, so the module computes the same function
    assert!(max_diff(&g, &out, 4) <= 1e-6);
}

#[test]
fn bottleneck_ratio_bounds_and_effect() {
    let g = module_graph(WIDTHS);
    assert!(reduce_bottleneck(&g, "m/b2/reduce", 1.0).unwrap().is_none());
    for bad in [0.0, -0.5, 1.5, f64::NAN] {
        assert!(matches!(reduce_bottleneck(&g, "m/b2/reduce", bad), Err(SlimError::BadRatio(_))));
    }
    let (out, rec) = reduce_bottleneck(&g, "m/b2/reduce", 0.5).unwrap().unwrap();
    let reducer = out.node("m/b2/reduce").unwrap().kind.as_conv().unwrap();
    assert_eq!(reducer.out_channels(), 2);
    assert_eq!(out.node("m/b2/conv").unwrap().kind.as_conv().unwrap().in_channels(), 2);
    assert_eq!(rec.kept.as_ref().unwrap().len(), 2);
    let flops = |g: &ModelGraph| crate::graph::count_flops(g, g.input_shape().unwrap()).unwrap();
    assert_eq!(flops(&out)["m/b2/reduce"] * 2, flops(&g)["m/b2/reduce"]);
    assert!(total_flops(&out).unwrap() < total_flops(&g).unwrap());
}

#[test]
fn reducer_must_feed_a_larger_kernel() {
    let g = module_graph(WIDTHS);
    assert!(matches!(
        reduce_bottleneck(&g, "m/b1/conv", 0.5),
        Err(SlimError::Structure(_))
    ));
}

#[test]
fn exact_only_plan_preserves_outputs() {
    let opts = GoogLeNetMiniOptions {
        batch_norm: true,
        train_head: false,
    };
    let g = googlenet_mini(4, opts);
    let plan = build_slim_plan(&g, &SlimOptions::exact_only()).unwrap();
    assert!(plan.records.iter().all(|r| r.pass.is_exact()));
    assert_eq!(plan.records.len(), 2);
    let (slim, _) = apply_plan(&g, &plan).unwrap();
    assert!(max_diff(&g, &slim, 4) <= 1e-4);
}

#[test]
fn googlenet_mini_plan_slims_every_module() {
    let g = googlenet_mini(
        4,
        GoogLeNetMiniOptions {
            batch_norm: true,
            train_head: false,
        },
    );
    let plan = build_slim_plan(&g, &SlimOptions::default()).unwrap();
    let count = |p: PassKind| plan.records.iter().filter(|r| r.pass == p).count();
    assert_eq!(count(PassKind::FoldBnScale), 2);
    assert_eq!(count(PassKind::PruneLrn), 2);
    assert_eq!(count(PassKind::AbsorbPool), 2);
    assert_eq!(count(PassKind::SlimNonTensorBranch), 3);
    assert_eq!(count(PassKind::SlimTensorBranch), 3);
    let (slim, _) = apply_plan(&g, &plan).unwrap();
    assert!(slim.len() * 10 <= g.len() * 7);
}

#[test]
fn plan_text_round_trips() {
    let g = googlenet_mini(
        4,
        GoogLeNetMiniOptions {
            batch_norm: true,
            train_head: false,
        },
    );
    let opts = SlimOptions {
        bottleneck_ratio: 0.5,
        group_branch_records: true,
        ..SlimOptions::default()
    };
    let plan = build_slim_plan(&g, &opts).unwrap();
    assert!(plan.records.iter().any(|r| r.pass == PassKind::ReduceBottleneck));
    let text = format_plan(&plan);
    let parsed = parse_plan(&text).unwrap();
    assert_eq!(parsed.records, plan.records);
    assert_eq!(format_plan(&parsed), format_plan(&SlimPlan { skipped: vec![], ..plan }));
}

#[test]
fn plan_parse_errors_name_the_line() {
    assert_eq!(parse_plan("").unwrap_err().line, 1);
    let bad = format!("{HEADER}\n# note\nPruneLrn new=a segment=a->b\n", HEADER = text::HEADER);
    let err = parse_plan(&bad).unwrap_err();
    assert_eq!(err.line, 3);
    assert!(parse_plan(&format!("{}\nNoSuchPass new=a\n", text::HEADER)).is_err());
}

#[test]
fn replaying_a_plan_reproduces_the_graph() {
    let g = alexnet_mini(3);
    let plan = build_slim_plan(&g, &SlimOptions::default()).unwrap();
    let (a, ra) = apply_plan(&g, &plan).unwrap();
    let reparsed = parse_plan(&format_plan(&plan)).unwrap();
    let (b, rb) = apply_plan(&g, &reparsed).unwrap();
    assert_eq!(a, b);
    assert_eq!(ra, rb);
}

#[test]
fn failing_plan_reports_partial_progress() {
    let g = alexnet_mini(3);
    let mut plan = build_slim_plan(&g, &SlimOptions::default()).unwrap();
    plan.records[2].removed_ids = vec!["pool2".into()];
    plan.records[2].pass = PassKind::PruneLrn;
    let err = apply_plan(&g, &plan).unwrap_err();
    assert_eq!(err.index, 2);
    assert_eq!(err.applied.len(), 2);
    assert!(!err.partial.contains("pool1"));
}
