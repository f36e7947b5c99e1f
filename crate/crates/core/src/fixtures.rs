//! Small reference networks and synthetic data used by tests, benchmarks and
//! the CLI's `fixture` command.

use rand::Rng;

use crate::graph::{run_forward, run_forward_outputs, Chw, LayerKind, ModelGraph};
use crate::params::{BnParams, ConvParams, FcParams, LrnParams, PoolMode, PoolParams, ScaleParams};
use crate::rng::{derive, seeded, Rng64};
use crate::tensor::{Hw, Tensor4};

/// He-style uniform init: `U[-a, a]` with `a = sqrt(6 / fan_in)`.
pub fn he_conv(rng: &mut Rng64, out_c: usize, in_c: usize, k: usize, stride: usize, pad: usize) -> ConvParams {
    let a = (6.0 / (in_c * k * k) as f64).sqrt() as f32;
    ConvParams {
        weights: Tensor4::from_fn(out_c, in_c, k, k, |_, _, _, _| rng.gen_range(-a..=a)),
        bias: (0..out_c).map(|_| rng.gen_range(-0.05..=0.05)).collect(),
        stride: Hw::square(stride),
        pad: Hw::square(pad),
    }
}

pub fn he_fc(rng: &mut Rng64, out_f: usize, in_f: usize) -> FcParams {
    let a = (6.0 / in_f as f64).sqrt() as f32;
    FcParams {
        out_features: out_f,
        in_features: in_f,
        weights: (0..out_f * in_f).map(|_| rng.gen_range(-a..=a)).collect(),
        bias: vec![0.0; out_f],
    }
}

/// A sum of a few random plane waves per channel, roughly in [-1, 1].
fn wave_field(rng: &mut Rng64, shape: Chw, waves: usize, max_cycles: f64) -> Vec<f32> {
    let mut out = vec![0f32; shape.numel()];
    for c in 0..shape.c {
        let params: Vec<(f64, f64, f64, f64)> = (0..waves)
            .map(|_| {
                let fy = rng.gen_range(-max_cycles..=max_cycles);
                let fx = rng.gen_range(-max_cycles..=max_cycles);
                let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                let amp = rng.gen_range(0.3..1.0) / waves as f64;
                (fy, fx, phase, amp)
            })
            .collect();
        for y in 0..shape.h {
            for x in 0..shape.w {
                let (v, u) = (y as f64 / shape.h as f64, x as f64 / shape.w as f64);
                let s: f64 = params
                    .iter()
                    .map(|(fy, fx, ph, a)| a * (std::f64::consts::TAU * (fy * v + fx * u) + ph).sin())
                    .sum();
                out[(c * shape.h + y) * shape.w + x] = s as f32;
            }
        }
    }
    out
}

/// `n` smooth random images: low-frequency waves plus a little pixel noise.
pub fn smooth_images(rng: &mut Rng64, n: usize, shape: Chw) -> Tensor4 {
    let mut data = Vec::with_capacity(n * shape.numel());
    for _ in 0..n {
        let field = wave_field(rng, shape, 3, 2.0);
        data.extend(field.into_iter().map(|v| v + rng.gen_range(-0.05..=0.05)));
    }
    Tensor4::new(n, shape.c, shape.h, shape.w, data).expect("sized above")
}

/// Ten-class (by default) image task: each class is a fixed smooth pattern;
/// samples rescale it, add a smooth nuisance field and pixel noise.
#[derive(Debug, Clone)]
pub struct SyntheticTask {
    pub shape: Chw,
    prototypes: Vec<Vec<f32>>,
}

impl SyntheticTask {
    pub fn new(shape: Chw, classes: usize, seed: u64) -> Self {
        let mut rng = derive(seed, "task-prototypes");
        let prototypes = (0..classes).map(|_| wave_field(&mut rng, shape, 3, 2.5)).collect();
        SyntheticTask { shape, prototypes }
    }

    pub fn classes(&self) -> usize {
        self.prototypes.len()
    }

    pub fn sample(&self, rng: &mut Rng64, n: usize) -> (Tensor4, Vec<usize>) {
        let s = self.shape;
        let mut data = Vec::with_capacity(n * s.numel());
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let label = rng.gen_range(0..self.classes());
            let gain = rng.gen_range(0.8f32..1.2);
            let nuisance = wave_field(rng, s, 1, 1.5);
            for (p, q) in self.prototypes[label].iter().zip(nuisance) {
                data.push(gain * p + 0.2 * q + rng.gen_range(-0.05..=0.05));
            }
            labels.push(label);
        }
        (Tensor4::new(n, s.c, s.h, s.w, data).expect("sized above"), labels)
    }
}

fn max_pool(k: usize, s: usize, p: usize) -> LayerKind {
    LayerKind::Pool(PoolParams::new(PoolMode::Max, k, s, p))
}

/// 3x32x32 -> conv1(k5)/relu/norm1/pool1 -> conv2(k3)/relu/norm2/pool2 ->
/// conv3(k3)/relu -> fc6/relu/dropout -> fc7 -> softmax.
pub fn alexnet_mini(seed: u64) -> ModelGraph {
    let mut rng = derive(seed, "alexnet-mini");
    let mut g = ModelGraph::new();
    let add = |g: &mut ModelGraph, id: &str, kind: LayerKind, input: &str| {
        g.push(id, kind, &[input]).expect("unique ids");
    };
    g.push("data", LayerKind::Input(Chw::new(3, 32, 32)), &[]).expect("unique ids");
    add(&mut g, "conv1", LayerKind::Conv(he_conv(&mut rng, 16, 3, 5, 1, 2)), "data");
    add(&mut g, "relu1", LayerKind::Relu, "conv1");
    add(&mut g, "norm1", LayerKind::Lrn(LrnParams::default()), "relu1");
    add(&mut g, "pool1", max_pool(3, 2, 0), "norm1");
    add(&mut g, "conv2", LayerKind::Conv(he_conv(&mut rng, 32, 16, 3, 1, 1)), "pool1");
    add(&mut g, "relu2", LayerKind::Relu, "conv2");
    add(&mut g, "norm2", LayerKind::Lrn(LrnParams::default()), "relu2");
    add(&mut g, "pool2", max_pool(3, 2, 0), "norm2");
    add(&mut g, "conv3", LayerKind::Conv(he_conv(&mut rng, 32, 32, 3, 1, 1)), "pool2");
    add(&mut g, "relu3", LayerKind::Relu, "conv3");
    add(&mut g, "fc6", LayerKind::InnerProduct(he_fc(&mut rng, 64, 32 * 7 * 7)), "relu3");
    add(&mut g, "relu6", LayerKind::Relu, "fc6");
    add(&mut g, "drop6", LayerKind::Dropout, "relu6");
    add(&mut g, "fc7", LayerKind::InnerProduct(he_fc(&mut rng, 10, 64)), "drop6");
    add(&mut g, "prob", LayerKind::Softmax, "fc7");
    g.set_outputs(["prob"]);
    g
}

/// Channel widths of one inception-style module.
#[derive(Debug, Clone, Copy)]
pub struct InceptionWidths {
    pub b1: usize,
    pub b2_reduce: usize,
    pub b2: usize,
    pub b3_reduce: usize,
    pub b3: usize,
    pub b4: usize,
}

impl InceptionWidths {
    pub fn total(&self) -> usize {
        self.b1 + self.b2 + self.b3 + self.b4
    }
}

/// Adds a four-branch module reading `input` (with `in_c` channels):
/// 1x1 | 1x1 -> 3x3 | 1x1 -> 5x5 | 3x3 max-pool -> 1x1, each followed by
/// ReLU, joined by `<name>/concat`.
pub fn add_inception(g: &mut ModelGraph, rng: &mut Rng64, name: &str, input: &str, in_c: usize, w: InceptionWidths) {
    let id = |s: &str| format!("{name}/{s}");
    let mut add = |node: &str, kind: LayerKind, from: &str| {
        g.push(&id(node), kind, &[from]).expect("unique ids");
    };
    add("b1/conv", LayerKind::Conv(he_conv(rng, w.b1, in_c, 1, 1, 0)), input);
    add("b1/relu", LayerKind::Relu, &id("b1/conv"));
    add("b2/reduce", LayerKind::Conv(he_conv(rng, w.b2_reduce, in_c, 1, 1, 0)), input);
    add("b2/reduce_relu", LayerKind::Relu, &id("b2/reduce"));
    add("b2/conv", LayerKind::Conv(he_conv(rng, w.b2, w.b2_reduce, 3, 1, 1)), &id("b2/reduce_relu"));
    add("b2/relu", LayerKind::Relu, &id("b2/conv"));
    add("b3/reduce", LayerKind::Conv(he_conv(rng, w.b3_reduce, in_c, 1, 1, 0)), input);
    add("b3/reduce_relu", LayerKind::Relu, &id("b3/reduce"));
    add("b3/conv", LayerKind::Conv(he_conv(rng, w.b3, w.b3_reduce, 5, 1, 2)), &id("b3/reduce_relu"));
    add("b3/relu", LayerKind::Relu, &id("b3/conv"));
    add("b4/pool", max_pool(3, 1, 1), input);
    add("b4/proj", LayerKind::Conv(he_conv(rng, w.b4, in_c, 1, 1, 0)), &id("b4/pool"));
    add("b4/relu", LayerKind::Relu, &id("b4/proj"));
    let inputs = [id("b1/relu"), id("b2/relu"), id("b3/relu"), id("b4/relu")];
    let refs: Vec<&str> = inputs.iter().map(String::as_str).collect();
    g.push(&id("concat"), LayerKind::Concat, &refs).expect("unique ids");
}

/// Per-channel statistics of `act`, for calibrating batch-norm layers.
fn channel_stats(act: &Tensor4) -> (Vec<f32>, Vec<f32>) {
    let plane = act.h() * act.w();
    let count = (act.n() * plane) as f64;
    let mut mean = vec![0f64; act.c()];
    let mut sq = vec![0f64; act.c()];
    for n in 0..act.n() {
        for c in 0..act.c() {
            for &v in act.plane(n, c) {
                mean[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
            }
        }
    }
    let var = mean.iter().zip(&sq).map(|(m, s)| (s / count - (m / count).powi(2)).max(1e-6) as f32).collect();
    (mean.iter().map(|m| (m / count) as f32).collect(), var)
}

/// Options for [`googlenet_mini`].
#[derive(Debug, Clone, Copy)]
pub struct GoogLeNetMiniOptions {
    /// Batch-norm + scale after conv1 and conv2.
    pub batch_norm: bool,
    /// Train the classifier on the synthetic task.
    pub train_head: bool,
}

impl Default for GoogLeNetMiniOptions {
    fn default() -> Self {
        GoogLeNetMiniOptions {
            batch_norm: true,
            train_head: true,
        }
    }
}

pub const GOOGLENET_MINI_CLASSES: usize = 10;

/// The synthetic task a [`googlenet_mini`] built with the same seed is
/// trained on.
pub fn googlenet_task(seed: u64) -> SyntheticTask {
    SyntheticTask::new(Chw::new(3, 32, 32), GOOGLENET_MINI_CLASSES, seed)
}

/// Three inception-style modules on 32x32 inputs:
///
/// ```text
/// conv1 k5 [bn scale] relu pool1 norm1 | conv2 k3 [bn scale] relu norm2 pool2
/// inc3a inc3b pool3 inc4a | avgpool dropout fc softmax
/// ```
///
/// Convolutions are randomly initialised; the classifier is fitted to
/// [`googlenet_task`] with softmax cross-entropy on the frozen features.
pub fn googlenet_mini(seed: u64, opts: GoogLeNetMiniOptions) -> ModelGraph {
    let mut rng = derive(seed, "googlenet-mini");
    let mut g = ModelGraph::new();
    g.push("data", LayerKind::Input(Chw::new(3, 32, 32)), &[]).expect("unique ids");
    let mut last = "data".to_string();
    let mut chain = |g: &mut ModelGraph, id: &str, kind: LayerKind| {
        g.push(id, kind, &[&last]).expect("unique ids");
        last = id.to_string();
    };
    chain(&mut g, "conv1", LayerKind::Conv(he_conv(&mut rng, 16, 3, 5, 1, 2)));
    if opts.batch_norm {
        chain(&mut g, "bn1", LayerKind::Dropout);
        chain(&mut g, "scale1", LayerKind::Dropout);
    }
    chain(&mut g, "relu1", LayerKind::Relu);
    chain(&mut g, "pool1", max_pool(2, 2, 0));
    chain(&mut g, "norm1", LayerKind::Lrn(LrnParams::default()));
    chain(&mut g, "conv2", LayerKind::Conv(he_conv(&mut rng, 32, 16, 3, 1, 1)));
    if opts.batch_norm {
        chain(&mut g, "bn2", LayerKind::Dropout);
        chain(&mut g, "scale2", LayerKind::Dropout);
    }
    chain(&mut g, "relu2", LayerKind::Relu);
    chain(&mut g, "norm2", LayerKind::Lrn(LrnParams::default()));
    chain(&mut g, "pool2", max_pool(2, 2, 0));
    let w3a = InceptionWidths { b1: 8, b2_reduce: 24, b2: 16, b3_reduce: 16, b3: 8, b4: 8 };
    let w3b = InceptionWidths { b1: 16, b2_reduce: 32, b2: 24, b3_reduce: 24, b3: 12, b4: 12 };
    let w4a = InceptionWidths { b1: 16, b2_reduce: 32, b2: 32, b3_reduce: 24, b3: 12, b4: 12 };
    add_inception(&mut g, &mut rng, "inc3a", "pool2", 32, w3a);
    add_inception(&mut g, &mut rng, "inc3b", "inc3a/concat", w3a.total(), w3b);
    g.push("pool3", max_pool(2, 2, 0), &["inc3b/concat"]).expect("unique ids");
    add_inception(&mut g, &mut rng, "inc4a", "pool3", w3b.total(), w4a);
    g.push(
        "avgpool",
        LayerKind::Pool(PoolParams::new(PoolMode::Average, 4, 1, 0)),
        &["inc4a/concat"],
    )
    .expect("unique ids");
    g.push("dropout", LayerKind::Dropout, &["avgpool"]).expect("unique ids");
    let features = w4a.total();
    g.push(
        "fc",
        LayerKind::InnerProduct(he_fc(&mut rng, GOOGLENET_MINI_CLASSES, features)),
        &["dropout"],
    )
    .expect("unique ids");
    g.push("prob", LayerKind::Softmax, &["fc"]).expect("unique ids");
    g.set_outputs(["prob"]);

    if opts.batch_norm {
        calibrate_bn(&mut g, &mut rng, &[("bn1", "scale1"), ("bn2", "scale2")]);
    }
    if opts.train_head {
        let task = googlenet_task(seed);
        let mut data_rng = derive(seed, "googlenet-mini-head");
        let (x, labels) = task.sample(&mut data_rng, 1024);
        fit_softmax_head(&mut g, "fc", "dropout", &x, &labels);
    }
    g
}

/// Turns placeholder nodes into batch-norm/scale pairs whose statistics are
/// measured on smooth traffic, with random affine parameters.
fn calibrate_bn(g: &mut ModelGraph, rng: &mut Rng64, pairs: &[(&str, &str)]) {
    let shape = g.input_shape().expect("fixture input");
    let traffic = smooth_images(rng, 64, shape);
    for (bn, scale) in pairs {
        let act = &run_forward(g, &traffic).expect("fixture runs")[g.node(bn).expect("exists").inputs[0].as_str()];
        let (mean, var) = channel_stats(act);
        let c = mean.len();
        g.node_mut(bn).expect("exists").kind = LayerKind::BatchNorm(BnParams {
            mean,
            var,
            eps: BnParams::DEFAULT_EPS,
        });
        g.node_mut(scale).expect("exists").kind = LayerKind::Scale(ScaleParams {
            gamma: (0..c).map(|_| rng.gen_range(0.8..1.2)).collect(),
            beta: (0..c).map(|_| rng.gen_range(-0.1..0.1)).collect(),
        });
    }
}

/// Fits inner product `fc` (reading `features`) by full-batch gradient
/// descent on softmax cross-entropy, with the rest of the network frozen.
fn fit_softmax_head(g: &mut ModelGraph, fc: &str, features: &str, x: &Tensor4, labels: &[usize]) {
    let feats = &run_forward(g, x).expect("fixture runs")[features];
    let n = feats.n();
    let d = feats.len() / n.max(1);
    let LayerKind::InnerProduct(p) = &g.node(fc).expect("exists").kind else {
        panic!("'{fc}' is not an inner product");
    };
    let k = p.out_features;
    // centre features and scale them to unit mean variance
    let mut mean = vec![0f64; d];
    for s in 0..n {
        for (j, &v) in feats.sample_slice(s).iter().enumerate() {
            mean[j] += v as f64 / n as f64;
        }
    }
    let mut var = 0f64;
    for s in 0..n {
        for (j, &v) in feats.sample_slice(s).iter().enumerate() {
            var += (v as f64 - mean[j]).powi(2) / (n * d) as f64;
        }
    }
    let sd = vec![var.sqrt().max(1e-6); d];
    let z: Vec<Vec<f64>> = (0..n)
        .map(|s| {
            feats.sample_slice(s).iter().enumerate().map(|(j, &v)| (v as f64 - mean[j]) / sd[j]).collect()
        })
        .collect();
    let decay = 1e-3;
    let mut w = vec![0f64; k * d];
    let mut b = vec![0f64; k];
    let lr = 0.5;
    for _ in 0..300 {
        let mut gw = vec![0f64; k * d];
        let mut gb = vec![0f64; k];
        for (s, zs) in z.iter().enumerate() {
            let logits: Vec<f64> = (0..k)
                .map(|c| b[c] + w[c * d..(c + 1) * d].iter().zip(zs).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let sum: f64 = e.iter().sum();
            for c in 0..k {
                let g = e[c] / sum - if labels[s] == c { 1.0 } else { 0.0 };
                gb[c] += g / n as f64;
                for j in 0..d {
                    gw[c * d + j] += g * zs[j] / n as f64;
                }
            }
        }
        for (wi, gi) in w.iter_mut().zip(&gw) {
            *wi -= lr * (gi + decay * *wi);
        }
        for (bi, gi) in b.iter_mut().zip(&gb) {
            *bi -= lr * gi;
        }
    }
    // fold the standardisation back into the layer
    let weights: Vec<f32> = (0..k * d).map(|i| (w[i] / sd[i % d]) as f32).collect();
    let bias: Vec<f32> = (0..k)
        .map(|c| (b[c] - (0..d).map(|j| w[c * d + j] * mean[j] / sd[j]).sum::<f64>()) as f32)
        .collect();
    g.node_mut(fc).expect("exists").kind = LayerKind::InnerProduct(FcParams {
        out_features: k,
        in_features: d,
        weights,
        bias,
    });
}

/// Fraction of samples whose top-1 class is `labels`.
pub fn accuracy(g: &ModelGraph, x: &Tensor4, labels: &[usize]) -> f64 {
    let out = run_forward_outputs(g, x).expect("model runs").swap_remove(0);
    let hits = crate::graph::top1(&out).iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len().max(1) as f64
}

/// `Input(4x16x16) -> conv(k3, s1, p1, 4 -> 8) -> max-pool(k2, s2)`.
pub fn pool_fixture(seed: u64) -> ModelGraph {
    let mut rng = derive(seed, "pool-fixture");
    let mut g = ModelGraph::new();
    g.push("data", LayerKind::Input(Chw::new(4, 16, 16)), &[]).expect("unique ids");
    g.push("conv", LayerKind::Conv(he_conv(&mut rng, 8, 4, 3, 1, 1)), &["data"]).expect("unique ids");
    g.push("pool", max_pool(2, 2, 0), &["conv"]).expect("unique ids");
    g.set_outputs(["pool"]);
    g
}

/// `Input -> conv -> bn [-> scale]` with random parameters in [-1, 1],
/// variances in [0.25, 1] and the given eps.
pub fn conv_bn_scale(seed: u64, in_c: usize, out_c: usize, k: usize, with_scale: bool, eps: f32) -> ModelGraph {
    let mut rng = seeded(seed);
    let mut g = ModelGraph::new();
    let u = |rng: &mut Rng64| rng.gen_range(-1.0f32..=1.0);
    let conv = ConvParams {
        weights: Tensor4::from_fn(out_c, in_c, k, k, |_, _, _, _| u(&mut rng)),
        bias: (0..out_c).map(|_| u(&mut rng)).collect(),
        stride: Hw::square(1),
        pad: Hw::square(k / 2),
    };
    g.push("data", LayerKind::Input(Chw::new(in_c, 8, 8)), &[]).expect("unique ids");
    g.push("conv", LayerKind::Conv(conv), &["data"]).expect("unique ids");
    let bn = BnParams {
        mean: (0..out_c).map(|_| u(&mut rng)).collect(),
        var: (0..out_c).map(|_| rng.gen_range(0.25f32..=1.0)).collect(),
        eps,
    };
    g.push("bn", LayerKind::BatchNorm(bn), &["conv"]).expect("unique ids");
    if with_scale {
        let s = ScaleParams {
            gamma: (0..out_c).map(|_| u(&mut rng)).collect(),
            beta: (0..out_c).map(|_| u(&mut rng)).collect(),
        };
        g.push("scale", LayerKind::Scale(s), &["bn"]).expect("unique ids");
        g.set_outputs(["scale"]);
    } else {
        g.set_outputs(["bn"]);
    }
    g
}

/// Every named fixture with its default seed, for round-trip and CLI use.
pub fn all(seed: u64) -> Vec<(&'static str, ModelGraph)> {
    vec![
        ("alexnet-mini", alexnet_mini(seed)),
        ("googlenet-mini", googlenet_mini(seed, GoogLeNetMiniOptions::default())),
        ("pool", pool_fixture(seed)),
        ("conv-bn-scale", conv_bn_scale(seed, 3, 4, 3, true, 0.0)),
    ]
}
