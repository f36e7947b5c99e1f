//! Acceptance suite: one line per criterion, `[PASS]` or `[FAIL]`, with the
//! measured values and wall-clock time. Exits non-zero if any criterion fails.

use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;
use rebirth_core::fixtures::{self, GoogLeNetMiniOptions};
use rebirth_core::graph::{
    compare_models, compare_models_on, infer_shapes, load_model, run_forward_outputs, save_model, total_flops,
};
use rebirth_core::kernels::conv2d;
use rebirth_core::profile::{nontensor_fraction, time_forward, LatencyReport};
use rebirth_core::rng::{derive, uniform_tensor};
use rebirth_core::slim::{absorb_pool, apply_plan, build_slim_plan, fold_bn_scale, merge_parallel_convs, prune_lrn, Segment, SlimOptions};
use rebirth_core::train::{
    finetune_records, gather, gradient_check, sample_pairs, sgd_fit, xavier_conv, FinetuneOptions, InputSource,
    TrainConfig,
};
use rebirth_core::{Chw, ConvParams, Hw, LayerKind, LrnParams, ModelGraph, Tensor4};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit: Duration) -> Result<(), String> {
    ensure(
        elapsed < limit,
        format!("took {:.2} s, limit {:.0} s", elapsed.as_secs_f64(), limit.as_secs_f64()),
    )
}

fn ac1_fold_exactness() -> Outcome {
    let t = Instant::now();
    let mut rng = derive(2024, "ac1");
    let mut worst = 0f64;
    for case in 0..100u64 {
        let in_c = rng.gen_range(1..=6);
        let out_c = rng.gen_range(1..=12);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let with_scale = rng.gen_bool(0.5);
        let g = fixtures::conv_bn_scale(case, in_c, out_c, k, with_scale, 0.0);
        let (folded, _) = fold_bn_scale(&g, "conv", "bn", with_scale.then_some("scale")).map_err(|e| e.to_string())?;
        let r = compare_models(&g, &folded, 8, case, 1e-4).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_abs_diff);
        ensure(r.within_tolerance(), format!("case {case}: diff {:.3e}", r.max_abs_diff))?;
    }
    within(t.elapsed(), Duration::from_secs(10))?;
    Ok(format!("100 configurations, max |diff| {worst:.3e} <= 1e-4"))
}

fn random_conv(rng: &mut impl Rng, o: usize, i: usize, k: usize, s: usize, p: usize) -> ConvParams {
    ConvParams {
        weights: uniform_tensor(rng, [o, i, k, k], -1.0, 1.0),
        bias: uniform_tensor(rng, [1, o, 1, 1], -1.0, 1.0).into_data(),
        stride: Hw::square(s),
        pad: Hw::square(p),
    }
}

fn ac2_merge_exactness() -> Outcome {
    let t = Instant::now();
    let mut rng = derive(2024, "ac2");
    let mut worst = 0f64;
    for case in 0..50u64 {
        let c = rng.gen_range(1..=5);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let s = rng.gen_range(1..=2);
        let p = rng.gen_range(0..=k / 2);
        let size = rng.gen_range(k.max(5)..=12);
        let (oa, ob) = (rng.gen_range(1..=8), rng.gen_range(1..=8));
        let mut g = ModelGraph::new();
        let push = |g: &mut ModelGraph, id: &str, kind: LayerKind, inputs: &[&str]| {
            g.push(id, kind, inputs).map_err(|e| e.to_string())
        };
        push(&mut g, "data", LayerKind::Input(Chw::new(c, size, size)), &[])?;
        push(&mut g, "a", LayerKind::Conv(random_conv(&mut rng, oa, c, k, s, p)), &["data"])?;
        push(&mut g, "b", LayerKind::Conv(random_conv(&mut rng, ob, c, k, s, p)), &["data"])?;
        push(&mut g, "cat", LayerKind::Concat, &["a", "b"])?;
        g.set_outputs(["cat"]);
        let (merged, _) = merge_parallel_convs(&g, &["a", "b"], "cat").map_err(|e| e.to_string())?;
        let r = compare_models(&g, &merged, 8, case, 1e-6).map_err(|e| e.to_string())?;
        worst = worst.max(r.max_abs_diff);
        ensure(r.within_tolerance(), format!("case {case}: diff {:.3e}", r.max_abs_diff))?;
    }
    within(t.elapsed(), Duration::from_secs(10))?;
    Ok(format!("50 pairs, max |diff| {worst:.3e} <= 1e-6"))
}

fn ac3_lrn_identity_prune() -> Outcome {
    let t = Instant::now();
    let mut g = fixtures::alexnet_mini(3);
    let identity = LrnParams {
        alpha: 0.0,
        k: 1.0,
        ..LrnParams::default()
    };
    for id in ["norm1", "norm2"] {
        g.node_mut(id).map_err(|e| e.to_string())?.kind = LayerKind::Lrn(identity.clone());
    }
    let (once, _) = prune_lrn(&g, "norm1").map_err(|e| e.to_string())?;
    let (pruned, _) = prune_lrn(&once, "norm2").map_err(|e| e.to_string())?;
    let s = g.input_shape().map_err(|e| e.to_string())?;
    let x = uniform_tensor(&mut derive(3, "ac3"), [16, s.c, s.h, s.w], -1.0, 1.0);
    let a = run_forward_outputs(&g, &x).map_err(|e| e.to_string())?.remove(0);
    let b = run_forward_outputs(&pruned, &x).map_err(|e| e.to_string())?.remove(0);
    ensure(a.bitwise_eq(&b), "outputs differ")?;
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(format!("2 LRN layers pruned, {} outputs bitwise identical", a.len()))
}

fn ac4_gradient_oracle() -> Outcome {
    let t = Instant::now();
    let mut rng = derive(2024, "ac4");
    let mut worst = 0f64;
    let shapes = 24;
    for case in 0..shapes {
        let o = rng.gen_range(1..=4);
        let i = rng.gen_range(1..=3);
        let k = rng.gen_range(1..=3);
        let s = rng.gen_range(1..=2);
        let p = rng.gen_range(0..k);
        let (h, w) = (rng.gen_range(k.max(3)..=8), rng.gen_range(k.max(3)..=8));
        let n = rng.gen_range(1..=3);
        let conv = random_conv(&mut rng, o, i, k, s, p).convert::<f64>();
        let x: Tensor4<f64> = uniform_tensor(&mut rng, [n, i, h, w], -1.0, 1.0).convert();
        let ho = (h + 2 * p - k) / s + 1;
        let wo = (w + 2 * p - k) / s + 1;
        let y: Tensor4<f64> = uniform_tensor(&mut rng, [n, o, ho, wo], -1.0, 1.0).convert();
        let err = gradient_check(&conv, &x, &y, 1e-5).map_err(|e| e.to_string())?;
        worst = worst.max(err);
        ensure(err <= 1e-3, format!("shape {case}: relative error {err:.3e}"))?;
    }
    within(t.elapsed(), Duration::from_secs(30))?;
    Ok(format!("{shapes} shapes, max relative error {worst:.3e} <= 1e-3"))
}

fn ac5_pool_absorption() -> Outcome {
    let t = Instant::now();
    let g = fixtures::pool_fixture(5);
    let (slim, _) = absorb_pool(&g, "conv", "pool").map_err(|e| e.to_string())?;
    let data = sample_pairs(&g, &Segment::new("conv", "pool"), 64, &InputSource::Smooth, 5).map_err(|e| e.to_string())?;
    let c = slim.node("conv").map_err(|e| e.to_string())?.kind.as_conv().ok_or("slim layer is not a conv")?;
    let k = c.kernel();
    let init = xavier_conv([c.out_channels(), c.in_channels(), k.h, k.w], c.stride, c.pad, 5);
    let config = TrainConfig {
        max_iters: 500,
        seed: 5,
        ..TrainConfig::default()
    };
    let (fitted, report) = sgd_fit(&data, &init, &config).map_err(|e| e.to_string())?;
    ensure(report.iterations() == 500, "did not run 500 iterations")?;
    let before = infer_shapes(&g, g.input_shape().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let after = infer_shapes(&slim, slim.input_shape().map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    ensure(before["pool"] == after["conv"], format!("slim shape {} vs pooled {}", after["conv"], before["pool"]))?;
    let produced = conv2d(&data.inputs, &fitted).map_err(|e| e.to_string())?;
    ensure(produced.dims() == data.targets.dims(), "fitted output shape differs from the pooled maps")?;
    let ratio = report.initial_loss / report.final_loss;
    ensure(
        report.final_loss <= report.initial_loss / 10.0,
        format!("loss {:.4e} -> {:.4e}", report.initial_loss, report.final_loss),
    )?;
    within(t.elapsed(), Duration::from_secs(60))?;
    Ok(format!(
        "loss {:.4e} -> {:.4e} ({ratio:.1}x lower), shape {} matches",
        report.initial_loss, report.final_loss, before["pool"]
    ))
}

fn batches(x: &Tensor4) -> Vec<Tensor4> {
    (0..x.n())
        .step_by(32)
        .map(|s| gather(x, &(s..(s + 32).min(x.n())).collect::<Vec<_>>()))
        .collect()
}

fn ac6_end_to_end() -> Outcome {
    let t = Instant::now();
    let seed = 7;
    let g = fixtures::googlenet_mini(seed, GoogLeNetMiniOptions::default());
    let task = fixtures::googlenet_task(seed);
    let (train_x, _) = task.sample(&mut derive(5, "train"), 512);
    let (held_x, held_y) = task.sample(&mut derive(99, "held"), 500);
    let plan = build_slim_plan(&g, &SlimOptions::default()).map_err(|e| e.to_string())?;
    let (slim, records) = apply_plan(&g, &plan).map_err(|e| e.to_string())?;
    let opts = FinetuneOptions {
        train: TrainConfig {
            max_iters: 1000,
            step_size: 700,
            seed,
            ..TrainConfig::default()
        },
        samples: 256,
        source: InputSource::Recorded(train_x),
    };
    let (tuned, reports) = finetune_records(&g, &slim, &records, &opts).map_err(|f| format!("{}: {}", f.layer, f.error))?;
    let removed = 1.0 - tuned.len() as f64 / g.len() as f64;
    let (fo, fs) = (
        total_flops(&g).map_err(|e| e.to_string())?,
        total_flops(&tuned).map_err(|e| e.to_string())?,
    );
    let shape = g.input_shape().map_err(|e| e.to_string())?;
    let before = time_forward(&g, shape, 20, seed).map_err(|e| e.to_string())?;
    let after = time_forward(&tuned, shape, 20, seed).map_err(|e| e.to_string())?;
    let speedup = before.total_ms / after.total_ms;
    let cmp = compare_models_on(&g, &tuned, &batches(&held_x), 1e-4).map_err(|e| e.to_string())?;
    let acc = (fixtures::accuracy(&g, &held_x, &held_y), fixtures::accuracy(&tuned, &held_x, &held_y));
    let detail = format!(
        "nodes {} -> {} ({:.0}% removed), FLOPs {fo} -> {fs}, speed-up {speedup:.2}x, top-1 agreement {:.1}% \
         (accuracy {:.1}% -> {:.1}%), {} layers regenerated",
        g.len(),
        tuned.len(),
        removed * 100.0,
        cmp.top1_agreement * 100.0,
        acc.0 * 100.0,
        acc.1 * 100.0,
        reports.len()
    );
    ensure(removed >= 0.30, format!("node reduction too small: {detail}"))?;
    ensure(fs < fo, format!("FLOPs not reduced: {detail}"))?;
    ensure(speedup > 1.2, format!("speed-up too small: {detail}"))?;
    ensure(cmp.top1_agreement >= 0.90, format!("agreement too low: {detail}"))?;
    within(t.elapsed(), Duration::from_secs(600))?;
    Ok(detail)
}

fn check_accounting(name: &str, r: &LatencyReport) -> Result<f64, String> {
    let f = nontensor_fraction(r).map_err(|e| format!("{name}: {e}"))?;
    ensure((0.0..=1.0).contains(&f), format!("{name}: fraction {f}"))?;
    let sum = r.tensor_ms() + r.nontensor_ms();
    ensure(
        (sum - r.total_ms).abs() <= 1e-9 * r.total_ms.max(1.0),
        format!("{name}: tensor + non-tensor {sum} != total {}", r.total_ms),
    )?;
    Ok(f)
}

fn ac7_latency_fraction() -> Outcome {
    let t = Instant::now();
    let nets = [
        ("alexnet-mini", fixtures::alexnet_mini(0)),
        (
            "googlenet-mini",
            fixtures::googlenet_mini(
                0,
                GoogLeNetMiniOptions {
                    batch_norm: true,
                    train_head: false,
                },
            ),
        ),
        ("pool", fixtures::pool_fixture(0)),
        ("conv-bn-scale", fixtures::conv_bn_scale(0, 3, 4, 3, true, 0.0)),
    ];
    let mut alexnet = 0.0;
    let mut parts = Vec::new();
    for (name, g) in &nets {
        let r = time_forward(g, g.input_shape().map_err(|e| e.to_string())?, 10, 0).map_err(|e| e.to_string())?;
        let f = check_accounting(name, &r)?;
        if *name == "alexnet-mini" {
            alexnet = f;
        }
        parts.push(format!("{name} {:.1}%", f * 100.0));
    }
    ensure(alexnet > 0.0, "AlexNet-mini non-tensor fraction is zero")?;
    within(t.elapsed(), Duration::from_secs(30))?;
    Ok(format!("non-tensor fraction: {}", parts.join(", ")))
}

fn ac8_round_trip() -> Outcome {
    let all = fixtures::all(8);
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t = Instant::now();
    for (name, g) in &all {
        let m = dir.path().join(format!("{name}.json"));
        let w = dir.path().join(format!("{name}.bin"));
        save_model(g, &m, &w).map_err(|e| e.to_string())?;
        let back = load_model(&m, &w).map_err(|e| e.to_string())?;
        ensure(&back == g, format!("{name}: graphs differ"))?;
        let bits = |g: &ModelGraph| -> Vec<u32> {
            g.nodes()
                .flat_map(|n| match &n.kind {
                    LayerKind::Conv(p) => p.weights.data().iter().chain(&p.bias).map(|v| v.to_bits()).collect(),
                    LayerKind::InnerProduct(p) => p.weights.iter().chain(&p.bias).map(|v| v.to_bits()).collect(),
                    LayerKind::BatchNorm(p) => p.mean.iter().chain(&p.var).map(|v| v.to_bits()).collect(),
                    LayerKind::Scale(p) => p.gamma.iter().chain(&p.beta).map(|v| v.to_bits()).collect(),
                    _ => Vec::new(),
                })
                .collect()
        };
        ensure(bits(&back) == bits(g), format!("{name}: weights differ"))?;
    }
    within(t.elapsed(), Duration::from_secs(5))?;
    Ok(format!("{} fixtures saved and reloaded bit-exactly", all.len()))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let mut full = vec!["rebirth"];
    full.extend_from_slice(args);
    match rebirth_cli::run_with(full, &mut out, &mut err) {
        0 => Ok(()),
        code => Err(format!("{} exited {code}: {}", args[0], String::from_utf8_lossy(&err).trim())),
    }
}

fn pipeline(root: &Path, model: &Path, run: &str) -> Result<(), String> {
    let p = |s: &Path| s.to_str().expect("utf-8 temp path").to_string();
    let slim_dir = root.join(run).join("slim");
    let tuned_dir = root.join(run).join("tuned");
    let m = p(&model.join("googlenet-mini.json"));
    let w = p(&model.join("googlenet-mini.bin"));
    cli(&["slim", "--manifest", &m, "--weights", &w, "--out", &p(&slim_dir)])?;
    cli(&[
        "finetune",
        "--manifest",
        &m,
        "--weights",
        &w,
        "--slim-manifest",
        &p(&slim_dir.join("slim.json")),
        "--slim-weights",
        &p(&slim_dir.join("slim.bin")),
        "--plan",
        &p(&slim_dir.join("plan.txt")),
        "--inputs",
        &p(&model.join("googlenet-mini-inputs.bin")),
        "--max-iters",
        "200",
        "--seed",
        "9",
        "--out",
        &p(&tuned_dir),
    ])
}

fn ac9_determinism(ac6_time: Duration) -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let model = dir.path().join("model");
    let model_s = model.to_str().ok_or("non-utf-8 temp path")?;
    cli(&["fixture", "googlenet-mini", "--seed", "7", "--out", model_s, "--task-inputs", "512", "--task-seed", "5"])?;
    pipeline(dir.path(), &model, "a")?;
    pipeline(dir.path(), &model, "b")?;
    let files = [
        "slim/plan.txt",
        "slim/slim.json",
        "slim/slim.bin",
        "tuned/finetuned.json",
        "tuned/finetuned.bin",
        "tuned/fits.json",
    ];
    for f in files {
        let a = fs::read(dir.path().join("a").join(f)).map_err(|e| format!("{f}: {e}"))?;
        let b = fs::read(dir.path().join("b").join(f)).map_err(|e| format!("{f}: {e}"))?;
        ensure(a == b, format!("{f} differs between runs"))?;
    }
    let elapsed = t.elapsed();
    ensure(
        elapsed < 2 * ac6_time,
        format!(
            "took {:.1} s, criterion 6 took {:.1} s",
            elapsed.as_secs_f64(),
            ac6_time.as_secs_f64()
        ),
    )?;
    Ok(format!(
        "{} output files byte-identical across two slim + finetune runs ({:.1} s vs limit {:.1} s)",
        files.len(),
        elapsed.as_secs_f64(),
        2.0 * ac6_time.as_secs_f64()
    ))
}

fn report(label: &str, t: Instant, outcome: Outcome) -> bool {
    let secs = t.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("[PASS] {label}: {detail} ({secs:.2} s)");
            true
        }
        Err(reason) => {
            println!("[FAIL] {label}: {reason} ({secs:.2} s)");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    let simple: [(&str, fn() -> Outcome); 5] = [
        ("AC1 BN/scale fold exactness", ac1_fold_exactness),
        ("AC2 parallel-conv merge exactness", ac2_merge_exactness),
        ("AC3 identity LRN prune", ac3_lrn_identity_prune),
        ("AC4 gradient oracle", ac4_gradient_oracle),
        ("AC5 pooling absorption retraining", ac5_pool_absorption),
    ];
    for (label, f) in simple {
        ok &= report(label, Instant::now(), f());
    }
    let t6 = Instant::now();
    let ac6 = ac6_end_to_end();
    let ac6_time = t6.elapsed();
    ok &= report("AC6 GoogLeNet-mini end to end", t6, ac6);
    ok &= report("AC7 latency fraction accounting", Instant::now(), ac7_latency_fraction());
    ok &= report("AC8 serialization round trip", Instant::now(), ac8_round_trip());
    ok &= report("AC9 determinism", Instant::now(), ac9_determinism(ac6_time));
    if !ok {
        std::process::exit(1);
    }
}
