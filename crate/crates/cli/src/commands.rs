use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rebirth_core::fixtures::{self, GoogLeNetMiniOptions};
use rebirth_core::graph::{
    compare_models, compare_models_on, infer_shapes, load_model, save_model, topo_order, GraphError, ModelIoError,
};
use rebirth_core::profile::{nontensor_fraction, speedup_report, time_forward};
use rebirth_core::slim::{apply_plan, build_slim_plan, format_plan, format_record, parse_plan, SlimPlan, TargetPiece};
use rebirth_core::train::{finetune_records, FinetuneOptions, FitReport, InputSource, TrainError};
use rebirth_core::{ModelGraph, Tensor4};
use serde::{Deserialize, Serialize};

use crate::inputs::{decode_inputs, encode_inputs};
use crate::{CliError, Command, FixtureName, ModelArgs, Source};

/// One regenerated layer as stored in `fits.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub layer: String,
    /// Original-graph feature maps the layer was fitted to, as
    /// `node` or `node[channels]`.
    pub target: Vec<String>,
    pub fit: FitReport,
}

/// File name of a layer's fit table; `/` in ids becomes `_`.
pub fn fit_file_name(layer: &str) -> String {
    format!("fit-{}.txt", layer.replace('/', "_"))
}

fn piece_label(p: &TargetPiece) -> String {
    match &p.channels {
        None => p.node.clone(),
        Some(cs) => format!(
            "{}[{}]",
            p.node,
            cs.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
        ),
    }
}

fn input_err(e: impl std::fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

fn load(m: &Path, w: &Path) -> Result<ModelGraph, CliError> {
    load_model(m, w).map_err(input_err)
}

fn save(g: &ModelGraph, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf), CliError> {
    let m = dir.join(format!("{stem}.json"));
    let w = dir.join(format!("{stem}.bin"));
    save_model(g, &m, &w).map_err(|e| match e {
        ModelIoError::Io { .. } => input_err(e),
        other => CliError::Pass(other.to_string()),
    })?;
    Ok((m, w))
}

fn out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Input(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

fn say(out: &mut dyn Write, text: impl std::fmt::Display) {
    let _ = writeln!(out, "{text}");
}

fn read_inputs(path: &Path, g: &ModelGraph) -> Result<Tensor4, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
    let shape = g.input_shape().map_err(input_err)?;
    decode_inputs(&bytes, shape).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))
}

pub(crate) fn dispatch(cmd: Command, out: &mut dyn Write) -> Result<(), CliError> {
    match cmd {
        Command::Profile {
            model,
            runs,
            seed,
            out: dir,
        } => profile(&model, runs, seed, &dir, out),
        Command::Plan { model, passes, out: file } => {
            let g = load(&model.manifest, &model.weights)?;
            let plan = build_slim_plan(&g, &passes.options()?).map_err(|e| CliError::Pass(e.to_string()))?;
            let text = format_plan(&plan);
            if let Some(f) = file {
                write_file(&f, &text)?;
            }
            let _ = write!(out, "{text}");
            Ok(())
        }
        Command::Slim { model, passes, out: dir } => {
            let g = load(&model.manifest, &model.weights)?;
            let plan = build_slim_plan(&g, &passes.options()?).map_err(|e| CliError::Pass(e.to_string()))?;
            slim(&g, &plan, &dir, out)
        }
        Command::Finetune {
            model,
            slim_manifest,
            slim_weights,
            plan,
            train,
            seed,
            out: dir,
        } => {
            let original = load(&model.manifest, &model.weights)?;
            let slim = load(&slim_manifest, &slim_weights)?;
            let text = fs::read_to_string(&plan).map_err(|e| CliError::Input(format!("{}: {e}", plan.display())))?;
            let plan = parse_plan(&text).map_err(input_err)?;
            let source = match (&train.inputs, train.source) {
                (Some(path), _) => InputSource::Recorded(read_inputs(path, &original)?),
                (None, Source::Smooth) => InputSource::Smooth,
                (None, Source::Noise) => InputSource::Noise,
            };
            let opts = FinetuneOptions {
                train: train.config(seed),
                samples: train.samples,
                source,
            };
            finetune(&original, &slim, &plan, &opts, &dir, out)
        }
        Command::Verify {
            model,
            other_manifest,
            other_weights,
            samples,
            inputs,
            seed,
            tolerance,
            agreement,
            out: file,
        } => {
            if !(tolerance > 0.0) {
                return Err(CliError::Input(format!("--tolerance must be positive, got {tolerance}")));
            }
            if let Some(a) = agreement {
                if !(0.0..=1.0).contains(&a) {
                    return Err(CliError::Input(format!("--agreement must be in [0, 1], got {a}")));
                }
            }
            let a = load(&model.manifest, &model.weights)?;
            let b = load(&other_manifest, &other_weights)?;
            let report = match inputs {
                Some(path) => {
                    let x = read_inputs(&path, &a)?;
                    let batches: Vec<Tensor4> = (0..x.n())
                        .step_by(32)
                        .map(|s| rebirth_core::train::gather(&x, &(s..(s + 32).min(x.n())).collect::<Vec<_>>()))
                        .collect();
                    compare_models_on(&a, &b, &batches, tolerance)
                }
                None => compare_models(&a, &b, samples, seed, tolerance),
            }
            .map_err(input_err)?;
            let agreed = agreement.is_some_and(|t| report.top1_agreement >= t);
            let verdict = if report.within_tolerance() {
                "PASS (within tolerance)"
            } else if agreed {
                "PASS (top-1 agreement)"
            } else {
                "FAIL"
            };
            let text = format!("{report}verdict         {verdict}\n");
            if let Some(f) = file {
                write_file(&f, &text)?;
            }
            let _ = write!(out, "{text}");
            if report.within_tolerance() || agreed {
                Ok(())
            } else {
                Err(CliError::Verify(format!(
                    "models differ by {:.6e} (tolerance {:.6e}), top-1 agreement {:.2}%",
                    report.max_abs_diff,
                    tolerance,
                    report.top1_agreement * 100.0
                )))
            }
        }
        Command::Report {
            fits,
            manifest,
            weights,
            other_manifest,
            other_weights,
            runs,
            seed,
            out: file,
        } => {
            let mut text = String::new();
            if let Some(path) = &fits {
                let raw =
                    fs::read_to_string(path).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
                let records: Vec<FitRecord> =
                    serde_json::from_str(&raw).map_err(|e| CliError::Input(format!("{}: {e}", path.display())))?;
                for r in &records {
                    text.push_str(&format!("## {} <- {}\n", r.layer, r.target.join(" + ")));
                    text.push_str(&r.fit.table());
                    text.push('\n');
                }
            }
            let models = match (manifest, weights, other_manifest, other_weights) {
                (Some(m), Some(w), Some(om), Some(ow)) => Some((m, w, om, ow)),
                (None, None, None, None) => None,
                _ => {
                    return Err(CliError::Input(
                        "a speed-up report needs --manifest, --weights, --other-manifest and --other-weights".into(),
                    ))
                }
            };
            if let Some((m, w, om, ow)) = models {
                let before = load(&m, &w)?;
                let after = load(&om, &ow)?;
                let shape = before.input_shape().map_err(input_err)?;
                let rb = time_forward(&before, shape, runs, seed).map_err(input_err)?;
                let ra = time_forward(&after, shape, runs, seed).map_err(input_err)?;
                text.push_str(&speedup_report(&rb, &ra));
            }
            if fits.is_none() && text.is_empty() {
                return Err(CliError::Input("nothing to report: give --fits and/or two models".into()));
            }
            if let Some(f) = file {
                write_file(&f, &text)?;
            }
            let _ = write!(out, "{text}");
            Ok(())
        }
        Command::Fixture {
            name,
            seed,
            out: dir,
            task_inputs,
            task_seed,
        } => {
            let (stem, g) = match name {
                FixtureName::AlexnetMini => ("alexnet-mini", fixtures::alexnet_mini(seed)),
                FixtureName::GooglenetMini => (
                    "googlenet-mini",
                    fixtures::googlenet_mini(seed, GoogLeNetMiniOptions::default()),
                ),
                FixtureName::Pool => ("pool", fixtures::pool_fixture(seed)),
                FixtureName::ConvBnScale => ("conv-bn-scale", fixtures::conv_bn_scale(seed, 3, 4, 3, true, 0.0)),
            };
            out_dir(&dir)?;
            let (m, w) = save(&g, &dir, stem)?;
            say(out, format!("wrote {} and {}", m.display(), w.display()));
            if let Some(n) = task_inputs {
                if name != FixtureName::GooglenetMini {
                    return Err(CliError::Input("--task-inputs is only available for googlenet-mini".into()));
                }
                let task = fixtures::googlenet_task(seed);
                let (x, labels) = task.sample(&mut rebirth_core::rng::seeded(task_seed), n);
                let xi = dir.join(format!("{stem}-inputs.bin"));
                let li = dir.join(format!("{stem}-labels.txt"));
                write_file(&xi, encode_inputs(&x))?;
                let lines: String = labels.iter().map(|l| format!("{l}\n")).collect();
                write_file(&li, lines)?;
                say(out, format!("wrote {} and {}", xi.display(), li.display()));
            }
            Ok(())
        }
    }
}

fn profile(model: &ModelArgs, runs: usize, seed: u64, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    if runs == 0 {
        return Err(CliError::Input("--runs must be at least 1".into()));
    }
    let g = load(&model.manifest, &model.weights)?;
    let shape = g.input_shape().map_err(input_err)?;
    let report = time_forward(&g, shape, runs, seed).map_err(input_err)?;
    out_dir(dir)?;
    write_file(&dir.join("latency.txt"), report.to_text())?;
    write_file(&dir.join("latency.csv"), report.to_csv())?;
    let _ = write!(out, "{}", report.to_text());
    match nontensor_fraction(&report) {
        Ok(f) => say(out, format!("non-tensor fraction: {:.2}%", f * 100.0)),
        Err(e) => say(out, format!("non-tensor fraction: {e}")),
    }
    Ok(())
}

fn slim(g: &ModelGraph, plan: &SlimPlan, dir: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    out_dir(dir)?;
    let text = format_plan(plan);
    write_file(&dir.join("plan.txt"), &text)?;
    match apply_plan(g, plan) {
        Ok((slim, records)) => {
            let (m, w) = save(&slim, dir, "slim")?;
            if plan.is_empty() {
                say(out, "empty plan: nothing to slim");
            }
            let retrain = records.iter().filter(|r| r.needs_retrain).count();
            say(
                out,
                format!(
                    "{} rewrites ({} need retraining); {} -> {} nodes",
                    records.len(),
                    retrain,
                    g.len(),
                    slim.len()
                ),
            );
            say(out, format!("wrote {}, {} and plan.txt", m.display(), w.display()));
            Ok(())
        }
        Err(failure) => {
            let mut report = String::new();
            for r in &failure.applied {
                report.push_str(&format_record(r));
                report.push('\n');
            }
            report.push_str(&format!("# failed: {failure}\n"));
            write_file(&dir.join("partial-plan.txt"), &report)?;
            save(&failure.partial, dir, "partial")?;
            Err(CliError::Pass(failure.to_string()))
        }
    }
}

/// The rebuilt slim graph must match the given one in everything but
/// weights: ids, wiring, kinds, shapes and outputs.
fn check_structure(rebuilt: &ModelGraph, given: &ModelGraph) -> Result<(), String> {
    let order = |g: &ModelGraph| topo_order(g).map_err(|e| e.to_string());
    let (a, b) = (order(rebuilt)?, order(given)?);
    if a != b {
        return Err("slim model nodes differ from the plan's result".into());
    }
    if rebuilt.output_ids() != given.output_ids() {
        return Err("slim model outputs differ from the plan's result".into());
    }
    let shapes = |g: &ModelGraph| -> Result<_, GraphError> { infer_shapes(g, g.input_shape()?) };
    let (sa, sb) = (shapes(rebuilt).map_err(|e| e.to_string())?, shapes(given).map_err(|e| e.to_string())?);
    for id in &a {
        let (na, nb) = (rebuilt.node(id).expect("listed"), given.node(id).expect("listed"));
        if na.inputs != nb.inputs || na.kind.name() != nb.kind.name() || sa[id] != sb[id] {
            return Err(format!("slim model layer '{id}' differs from the plan's result"));
        }
    }
    Ok(())
}

fn finetune(
    original: &ModelGraph,
    slim: &ModelGraph,
    plan: &SlimPlan,
    opts: &FinetuneOptions,
    dir: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let (rebuilt, records) = apply_plan(original, plan).map_err(|e| CliError::Pass(e.to_string()))?;
    check_structure(&rebuilt, slim).map_err(CliError::Input)?;
    out_dir(dir)?;
    let write_fits = |reports: &[rebirth_core::train::JobReport]| -> Result<(), CliError> {
        let fits: Vec<FitRecord> = reports
            .iter()
            .map(|r| FitRecord {
                layer: r.layer.clone(),
                target: r.target.iter().map(piece_label).collect(),
                fit: r.fit.clone(),
            })
            .collect();
        let mut json = serde_json::to_string_pretty(&fits).map_err(|e| CliError::Train(e.to_string()))?;
        json.push('\n');
        write_file(&dir.join("fits.json"), json)?;
        for r in reports {
            write_file(&dir.join(fit_file_name(&r.layer)), r.fit.table())?;
        }
        Ok(())
    };
    match finetune_records(original, slim, &records, opts) {
        Ok((tuned, reports)) => {
            if reports.is_empty() {
                say(out, "no layers need retraining");
            }
            for r in &reports {
                say(
                    out,
                    format!(
                        "{}: loss {:.6e} -> {:.6e} after {} iterations",
                        r.layer, r.fit.initial_loss, r.fit.final_loss, r.fit.best_iteration
                    ),
                );
            }
            write_fits(&reports)?;
            let (m, w) = save(&tuned, dir, "finetuned")?;
            say(out, format!("wrote {} and {}", m.display(), w.display()));
            Ok(())
        }
        Err(failure) => {
            write_fits(&failure.reports)?;
            save(&failure.partial, dir, "partial")?;
            let msg = format!("layer '{}': {}", failure.layer, failure.error);
            Err(match failure.error {
                TrainError::Config(_) => CliError::Input(msg),
                _ => CliError::Train(msg),
            })
        }
    }
}
