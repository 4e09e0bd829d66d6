use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use vidphys::eval::{self, Extrapolation};
use vidphys::loss::LossMode;
use vidphys::ode::{rollout as roll, LatentHistory};
use vidphys::scenes::{self, generate_dataset, load_dataset, load_frames, Dataset, LoadOptions};
use vidphys::trainer::{self, load_checkpoint, save_checkpoint, BatchSpec, RunReport, TrainState};

use crate::config::{resolve, Resolved};
use crate::Common;

/// Latent variance below this means the encoder has collapsed to a constant.
const COLLAPSE_VARIANCE: f64 = 1e-2;

const SYNTHETIC: [&str; 4] = ["intensity", "motion", "scale", "two-body"];

fn canonical(name: &str) -> String {
    name.parse::<scenes::Scenario>()
        .map(|s| s.name().to_string())
        .unwrap_or_else(|_| name.to_string())
}

/// A dataset folder written by `generate`, or a plain folder of numbered frames.
fn load_any(path: &Path, r: Option<&Resolved>) -> Result<Dataset> {
    if path.join(scenes::MANIFEST_FILE).is_file() {
        return load_dataset(path).with_context(|| format!("loading dataset {}", path.display()));
    }
    let r = r.context("a frame folder needs a scenario to split it into windows")?;
    let opts = LoadOptions {
        dt: r.train.dt,
        ..LoadOptions::default()
    };
    let seq = load_frames(path, &opts).with_context(|| format!("loading frames from {}", path.display()))?;
    let window = r.train.frames_per_sample.unwrap_or(seq.n_frames);
    Ok(Dataset::from_video(seq, window, &r.scenario)?)
}

/// Resolves the configuration and obtains the dataset it trains on.
fn setup(common: &Common, dataset: Option<&Path>) -> Result<(Resolved, Dataset)> {
    let manifest_scenario = match dataset {
        Some(p) if p.join(scenes::MANIFEST_FILE).is_file() => Some(load_dataset(p)?),
        _ => None,
    };
    let fallback = manifest_scenario.as_ref().map(|d| d.manifest.scenario.clone());
    let r = resolve(common, fallback.as_deref())?;
    let ds = match (manifest_scenario, dataset) {
        (Some(ds), _) => ds,
        (None, Some(p)) => load_any(p, Some(&r))?,
        (None, None) => match &r.scene {
            Some(scene) => generate_dataset(scene)?,
            None => bail!("{} is a real-video preset; pass --dataset", r.scenario),
        },
    };
    let recorded = canonical(&ds.manifest.scenario);
    let wanted = canonical(&r.scenario);
    if recorded != wanted && (SYNTHETIC.contains(&recorded.as_str()) || SYNTHETIC.contains(&wanted.as_str())) {
        bail!("dataset holds the {recorded} scenario but the run is configured for {wanted}");
    }
    Ok((r, ds))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(file, value)?;
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

pub fn generate(common: &Common) -> Result<()> {
    let r = resolve(common, None)?;
    let scene = r
        .scene
        .as_ref()
        .with_context(|| format!("{} is not a synthetic scenario", r.scenario))?;
    let ds = generate_dataset(scene)?;
    ds.write(&r.out)?;
    let [n, f, c, w, h] = ds.shape();
    println!(
        "wrote {} ({n} samples x {f} frames, {c}x{w}x{h}, dt {}) to {}",
        r.scenario,
        ds.dt(),
        r.out.display()
    );
    Ok(())
}

fn print_report(report: &RunReport, ds: &Dataset) {
    for g in &report.final_gammas {
        match ds.manifest.gt_params.get(&g.name) {
            Some(truth) => println!("{} = {:.6} {} (ground truth {:.6})", g.name, g.value, g.unit, truth),
            None => println!("{} = {:.6} {}", g.name, g.value, g.unit),
        }
    }
    let var: Vec<String> = report.latent_var.iter().map(|v| format!("{v:.4e}")).collect();
    println!("latent variance [{}]", var.join(", "));
    if report.latent_var.iter().any(|v| *v < COLLAPSE_VARIANCE) {
        let hint = if report.config.loss_mode == LossMode::MseOnly {
            "expected without the divergence term"
        } else {
            "the parameter estimates are not meaningful"
        };
        println!("latent collapsed (variance below {COLLAPSE_VARIANCE}); {hint}");
    }
}

pub fn train(common: &Common, dataset: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let (r, ds) = setup(common, dataset)?;
    let outcome = match resume {
        Some(p) => {
            let state = load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display()))?;
            trainer::train_from(&ds, &r.train, state)?
        }
        None => trainer::train(&ds, &r.train)?,
    };
    fs::create_dir_all(&r.out)?;
    save_checkpoint(&r.out.join("checkpoint.bin"), &outcome.state)?;
    write_json(&r.out.join("report.json"), &outcome.report)?;
    let mut csv = create(&r.out.join("epochs.csv"))?;
    outcome.report.write_epoch_csv(&mut csv)?;
    csv.flush()?;
    print_report(&outcome.report, &ds);
    println!("wrote checkpoint, report and epoch log to {}", r.out.display());
    Ok(())
}

/// Dataset plus a batch layout that matches a checkpoint's model.
fn setup_trained(common: &Common, checkpoint: &Path, dataset: Option<&Path>) -> Result<(Resolved, Dataset, TrainState, BatchSpec)> {
    let state = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let (mut r, ds) = setup(common, dataset)?;
    r.train.system = state.model.system.clone();
    r.train.prior = r.train.prior.broadcast(state.model.system.latent_dim())?;
    let spec = BatchSpec::new(&ds, &r.train)?;
    let input = state.model.encoder.dims().input;
    if input != ds.pixels() {
        bail!("checkpoint encoder takes {input} pixels but the dataset frames have {}", ds.pixels());
    }
    Ok((r, ds, state, spec))
}

#[derive(Serialize)]
struct EvalSummary {
    samples: usize,
    horizon: usize,
    mean_rmse: f64,
    mean_normalized_rmse: f64,
}

pub fn eval(common: &Common, checkpoint: &Path, dataset: Option<&Path>, horizon: usize, samples: usize) -> Result<()> {
    let (r, ds, state, spec) = setup_trained(common, checkpoint, dataset)?;
    let n = samples.min(ds.len());
    if n == 0 {
        bail!("nothing to evaluate");
    }
    let results: Vec<Extrapolation> = (0..n)
        .map(|s| eval::extrapolation_error(&state.model, &ds, &spec, s, horizon))
        .collect::<vidphys::Result<_>>()?;
    fs::create_dir_all(&r.out)?;
    let mut align = csv::Writer::from_writer(create(&r.out.join("alignment.csv"))?);
    align.write_record(["sample", "component", "scale", "offset"])?;
    let mut extrap = csv::Writer::from_writer(create(&r.out.join("extrapolation.csv"))?);
    extrap.write_record(["sample", "step", "component", "predicted", "truth"])?;
    for (s, e) in results.iter().enumerate() {
        for (a, (scale, offset)) in e.alignment.iter().enumerate() {
            align.write_record([s.to_string(), a.to_string(), scale.to_string(), offset.to_string()])?;
        }
        for (k, (p, t)) in e.predicted.iter().zip(&e.truth).enumerate() {
            for (a, (pv, tv)) in p.iter().zip(t).enumerate() {
                extrap.write_record([s.to_string(), (k + 1).to_string(), a.to_string(), pv.to_string(), tv.to_string()])?;
            }
        }
    }
    align.flush()?;
    extrap.flush()?;
    let summary = EvalSummary {
        samples: n,
        horizon,
        mean_rmse: results.iter().map(|e| e.rmse).sum::<f64>() / n as f64,
        mean_normalized_rmse: results.iter().map(|e| e.normalized_rmse).sum::<f64>() / n as f64,
    };
    write_json(&r.out.join("eval.json"), &summary)?;
    println!(
        "extrapolation over {horizon} steps on {n} samples: rmse {:.4}, normalized {:.4}",
        summary.mean_rmse, summary.mean_normalized_rmse
    );
    Ok(())
}

pub fn sweep(common: &Common, dataset: Option<&Path>) -> Result<()> {
    let (r, ds) = setup(common, dataset)?;
    let report = eval::robustness_sweep(&ds, &r.train, &r.sweep)?;
    fs::create_dir_all(&r.out)?;
    let mut w = create(&r.out.join("sweep.csv"))?;
    report.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&r.out.join("trajectories.csv"))?;
    report.write_trajectories_csv(&mut w)?;
    w.flush()?;
    write_json(&r.out.join("sweep.json"), &report)?;
    let ok = report.succeeded().count();
    println!("{ok}/{} runs converged", report.runs.len());
    for (i, name) in report.gamma_names.iter().enumerate() {
        if let (Some(m), Some(s)) = (report.mean.get(i), report.std.get(i)) {
            println!("{name} = {m:.6} +/- {s:.6}");
        }
    }
    for run in report.runs.iter().filter(|r| r.error.is_some()) {
        println!("run {} failed: {}", run.run, run.error.as_deref().unwrap_or_default());
    }
    Ok(())
}

pub fn dt_ablation(common: &Common) -> Result<()> {
    let mut r = resolve(common, None)?;
    if !r.epochs_set {
        r.train.epochs = eval::DT_ABLATION_EPOCHS;
    }
    let scene = r
        .scene
        .as_ref()
        .with_context(|| format!("{} is not a synthetic scenario", r.scenario))?;
    let table = eval::dt_ablation(scene, &r.dt_list, &r.train)?;
    fs::create_dir_all(&r.out)?;
    let mut w = create(&r.out.join("dt_ablation.csv"))?;
    table.write_csv(&mut w)?;
    w.flush()?;
    table.write_csv(io::stdout().lock())?;
    Ok(())
}

pub fn rollout(common: &Common, checkpoint: &Path, dataset: Option<&Path>, sample: usize, horizon: usize) -> Result<()> {
    let (_, ds, state, spec) = setup_trained(common, checkpoint, dataset)?;
    let seq = ds
        .samples
        .get(sample)
        .with_context(|| format!("sample {sample} out of {}", ds.len()))?;
    let idx: Vec<usize> = (0..spec.frames).map(|t| t * spec.stride).collect();
    let window = state.model.encode_frames(seq, &idx)?;
    let order = state.model.system.order();
    if window.len() < order {
        bail!("window of {} frames is shorter than the equation's order {order}", window.len());
    }
    let history: Vec<Vec<f64>> = window.iter().rev().take(order).cloned().collect();
    let predicted = if horizon > 0 {
        roll(&LatentHistory::new(history, spec.dt)?, &state.model.system, horizon)?.states
    } else {
        Vec::new()
    };
    let mut out = csv::Writer::from_writer(io::stdout().lock());
    let d = state.model.system.latent_dim();
    let mut header = vec!["step".to_string(), "t".into(), "source".into()];
    header.extend((0..d).map(|a| format!("z{a}")));
    out.write_record(&header)?;
    let rows = window
        .iter()
        .map(|z| ("encoded", z))
        .chain(predicted.iter().map(|z| ("predicted", z)));
    for (k, (source, z)) in rows.enumerate() {
        let mut rec = vec![k.to_string(), (k as f64 * spec.dt).to_string(), source.to_string()];
        rec.extend(z.iter().map(f64::to_string));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
