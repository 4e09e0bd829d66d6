//! Parameter recovery, latent alignment, extrapolation and sweeps, plus the
//! closed-form ground-truth estimators used for the real-video recordings.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{rollout, LatentHistory, OdeSystem};
use crate::scenes::{generate_dataset, Dataset, ScenarioConfig};
use crate::trainer::{train, BatchSpec, GammaInit, Model, TrainConfig};

/// Least-squares affine map from a learned latent to the true state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedLatent {
    pub scale: f64,
    pub offset: f64,
    pub aligned: Vec<f64>,
    pub rmse: f64,
}

pub fn rmse(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.is_empty() {
        return 0.0;
    }
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Fits `scale * z + offset` to `z_real`.
pub fn align_affine(z: &[f64], z_real: &[f64]) -> Result<AlignedLatent> {
    if z.len() != z_real.len() {
        return Err(Error::DimensionMismatch {
            context: "align_affine series",
            expected: z_real.len(),
            actual: z.len(),
        });
    }
    if z.len() < 2 {
        return Err(Error::InvalidArgument("alignment needs at least two points".into()));
    }
    let n = z.len() as f64;
    let mz = z.iter().sum::<f64>() / n;
    let mr = z_real.iter().sum::<f64>() / n;
    let szz: f64 = z.iter().map(|x| (x - mz).powi(2)).sum();
    let szr: f64 = z.iter().zip(z_real).map(|(x, y)| (x - mz) * (y - mr)).sum();
    let spread = z.iter().fold(0.0f64, |m, x| m.max((x - mz).abs()));
    if !(szz > 0.0) || spread <= 1e-12 * mz.abs().max(1.0) {
        return Err(Error::DegenerateFit("latent series is constant"));
    }
    let scale = szr / szz;
    let offset = mr - scale * mz;
    let aligned: Vec<f64> = z.iter().map(|x| scale * x + offset).collect();
    let rmse = rmse(&aligned, z_real);
    Ok(AlignedLatent {
        scale,
        offset,
        aligned,
        rmse,
    })
}

/// A rollout beyond the training window compared with the true continuation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Extrapolation {
    /// Per latent component, fitted on the training window.
    pub alignment: Vec<(f64, f64)>,
    /// `horizon` rows of aligned predictions.
    pub predicted: Vec<Vec<f64>>,
    pub truth: Vec<Vec<f64>>,
    pub rmse: f64,
    /// `rmse` divided by the half peak-to-peak range of the true state.
    pub normalized_rmse: f64,
}

/// Aligns `window` to `truth_window` per component, rolls the last `n`
/// window states forward `truth_future.len()` steps and scores the aligned
/// rollout. An empty future scores zero.
pub fn extrapolate_latent(
    window: &[Vec<f64>],
    truth_window: &[Vec<f64>],
    truth_future: &[Vec<f64>],
    system: &OdeSystem,
    dt: f64,
) -> Result<Extrapolation> {
    let n = system.order();
    let d = system.latent_dim();
    if window.len() != truth_window.len() || window.len() < n.max(2) {
        return Err(Error::InvalidArgument(format!(
            "extrapolation needs matching windows of at least {} states",
            n.max(2)
        )));
    }
    let column = |rows: &[Vec<f64>], a: usize| -> Vec<f64> { rows.iter().map(|r| r[a]).collect() };
    let mut alignment = Vec::with_capacity(d);
    for a in 0..d {
        let fit = align_affine(&column(window, a), &column(truth_window, a))?;
        alignment.push((fit.scale, fit.offset));
    }
    let horizon = truth_future.len();
    if horizon == 0 {
        return Ok(Extrapolation {
            alignment,
            predicted: Vec::new(),
            truth: Vec::new(),
            rmse: 0.0,
            normalized_rmse: 0.0,
        });
    }
    let history: Vec<Vec<f64>> = window.iter().rev().take(n).cloned().collect();
    let roll = rollout(&LatentHistory::new(history, dt)?, system, horizon)?;
    let predicted: Vec<Vec<f64>> = roll
        .states
        .iter()
        .map(|s| s.iter().zip(&alignment).map(|(z, (a, b))| a * z + b).collect())
        .collect();
    let flat = |rows: &[Vec<f64>]| -> Vec<f64> { rows.iter().flatten().copied().collect() };
    let err = rmse(&flat(&predicted), &flat(truth_future));
    let mut amplitude = 0.0;
    for a in 0..d {
        let all: Vec<f64> = truth_window.iter().chain(truth_future).map(|r| r[a]).collect();
        let (lo, hi) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        amplitude += (hi - lo) / 2.0;
    }
    amplitude /= d as f64;
    if !(amplitude > 0.0) {
        return Err(Error::DegenerateFit("true state does not vary"));
    }
    Ok(Extrapolation {
        alignment,
        predicted,
        truth: truth_future.to_vec(),
        rmse: err,
        normalized_rmse: err / amplitude,
    })
}

/// Encodes the training window of `sample`, then rolls the learned physics
/// block `horizon` steps past its end against the simulator's continuation.
pub fn extrapolation_error(
    model: &Model,
    dataset: &Dataset,
    spec: &BatchSpec,
    sample: usize,
    horizon: usize,
) -> Result<Extrapolation> {
    let seq = dataset
        .samples
        .get(sample)
        .ok_or_else(|| Error::InvalidArgument(format!("sample {sample} out of {}", dataset.len())))?;
    let idx: Vec<usize> = (0..spec.frames).map(|t| t * spec.stride).collect();
    let window = model.encode_frames(seq, &idx)?;
    let total = (spec.frames + horizon - 1) * spec.stride + 1;
    let gt = dataset.ground_truth(sample, total)?;
    let strided: Vec<Vec<f64>> = gt.into_iter().step_by(spec.stride).collect();
    let (truth_window, future) = strided.split_at(spec.frames);
    extrapolate_latent(&window, truth_window, future, &model.system, spec.dt)
}

/// Mean normalized extrapolation error over the first `samples` samples.
pub fn mean_extrapolation_error(
    model: &Model,
    dataset: &Dataset,
    spec: &BatchSpec,
    samples: usize,
    horizon: usize,
) -> Result<f64> {
    let n = samples.min(dataset.len()).max(1);
    let errs: Vec<Result<f64>> = spec.execution.map_range(n, |s| {
        extrapolation_error(model, dataset, spec, s, horizon).map(|e| e.normalized_rmse)
    });
    let mut total = 0.0;
    for e in errs {
        total += e?;
    }
    Ok(total / n as f64)
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, std)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub runs: usize,
    pub init_range: (f64, f64),
    /// Give run `i` seed `seed + i` for the encoder and shuffling as well;
    /// otherwise runs differ only in their physics initialization.
    pub vary_seed: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            runs: 7,
            init_range: (-10.0, 10.0),
            vary_seed: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub run: usize,
    pub seed: u64,
    pub init: Vec<f64>,
    pub final_gammas: Vec<f64>,
    pub latent_var: Vec<f64>,
    /// Per-epoch parameter values.
    pub trajectory: Vec<Vec<f64>>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub gamma_names: Vec<String>,
    pub runs: Vec<SweepRun>,
    /// Over successful runs only.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl SweepReport {
    pub fn succeeded(&self) -> impl Iterator<Item = &SweepRun> {
        self.runs.iter().filter(|r| r.error.is_none())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["run".to_string(), "seed".into()];
        header.extend(self.gamma_names.iter().map(|n| format!("init_{n}")));
        header.extend(self.gamma_names.iter().map(|n| format!("final_{n}")));
        header.push("status".into());
        out.write_record(&header)?;
        let p = self.gamma_names.len();
        for r in &self.runs {
            let mut rec = vec![r.run.to_string(), r.seed.to_string()];
            rec.extend(r.init.iter().map(f64::to_string));
            if r.final_gammas.len() == p {
                rec.extend(r.final_gammas.iter().map(f64::to_string));
            } else {
                rec.extend(std::iter::repeat_n(String::new(), p));
            }
            rec.push(r.error.clone().unwrap_or_else(|| "ok".into()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Per-epoch parameter trajectories, one row per (run, epoch).
    pub fn write_trajectories_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["run".to_string(), "epoch".into()];
        header.extend(self.gamma_names.iter().cloned());
        out.write_record(&header)?;
        for r in &self.runs {
            for (e, g) in r.trajectory.iter().enumerate() {
                let mut rec = vec![r.run.to_string(), (e + 1).to_string()];
                rec.extend(g.iter().map(f64::to_string));
                out.write_record(&rec)?;
            }
        }
        out.flush()?;
        Ok(())
    }
}

/// Trains `sweep.runs` models from independent physics initializations
/// drawn from `sweep.init_range`. Failed runs are recorded, not fatal.
pub fn robustness_sweep(dataset: &Dataset, config: &TrainConfig, sweep: &SweepConfig) -> Result<SweepReport> {
    if sweep.runs < 2 {
        return Err(Error::InvalidArgument("a sweep needs at least two runs".into()));
    }
    let (lo, hi) = sweep.init_range;
    let p = config.system.learnable_names().len();
    let runs: Vec<SweepRun> = config.execution.map_range(sweep.runs, |i| {
        let init_seed = config.seed.wrapping_add(i as u64);
        let mut cfg = config.clone();
        if sweep.vary_seed {
            cfg.seed = init_seed;
        }
        let init = GammaInit::Uniform { lo, hi }.resolve(p, init_seed);
        let mut run = SweepRun {
            run: i,
            seed: cfg.seed,
            init: init.as_ref().cloned().unwrap_or_default(),
            final_gammas: Vec::new(),
            latent_var: Vec::new(),
            trajectory: Vec::new(),
            error: None,
        };
        let result = init.and_then(|v| {
            cfg.gamma_init = GammaInit::Values(v);
            train(dataset, &cfg)
        });
        match result {
            Ok(out) => {
                run.final_gammas = out.report.final_gamma_values();
                run.latent_var = out.report.latent_var.clone();
                run.trajectory = out.report.epochs.iter().map(|e| e.gammas.clone()).collect();
            }
            Err(e) => {
                log::warn!("sweep run {i} failed: {e}");
                run.error = Some(e.to_string());
            }
        }
        run
    });
    let ok: Vec<&SweepRun> = runs.iter().filter(|r| r.error.is_none()).collect();
    let (mut mean, mut std) = (vec![f64::NAN; p], vec![f64::NAN; p]);
    if !ok.is_empty() {
        for c in 0..p {
            let vals: Vec<f64> = ok.iter().map(|r| r.final_gammas[c]).collect();
            (mean[c], std[c]) = mean_std(&vals);
        }
    }
    Ok(SweepReport {
        gamma_names: config.system.learnable_names(),
        runs,
        mean,
        std,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtRow {
    pub dt: f64,
    pub final_gammas: Vec<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DtTable {
    pub gamma_names: Vec<String>,
    pub rows: Vec<DtRow>,
}

impl DtTable {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["dt".to_string()];
        header.extend(self.gamma_names.iter().cloned());
        header.push("status".into());
        out.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.dt.to_string()];
            if r.final_gammas.len() == self.gamma_names.len() {
                rec.extend(r.final_gammas.iter().map(f64::to_string));
            } else {
                rec.extend(std::iter::repeat_n(String::new(), self.gamma_names.len()));
            }
            rec.push(r.error.clone().unwrap_or_else(|| "ok".into()));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Default epochs for the dt ablation. Coarse periods converge more slowly
/// than the synthetic default allows: at dt = 0.8 the damping estimate is
/// still drifting at epoch 60 and settles by about 90.
pub const DT_ABLATION_EPOCHS: usize = 100;

/// Regenerates the scene at each sampling period and trains one model per
/// period with the physics step equal to it.
pub fn dt_ablation(scene: &ScenarioConfig, dt_list: &[f64], config: &TrainConfig) -> Result<DtTable> {
    if dt_list.is_empty() {
        return Err(Error::InvalidArgument("dt list is empty".into()));
    }
    let rows: Vec<Result<DtRow>> = config.execution.map(dt_list, |&dt| {
        let dataset = generate_dataset(&ScenarioConfig { dt, ..scene.clone() })?;
        let cfg = TrainConfig {
            dt: None,
            ..config.clone()
        };
        Ok(match train(&dataset, &cfg) {
            Ok(out) => DtRow {
                dt,
                final_gammas: out.report.final_gamma_values(),
                error: None,
            },
            Err(e) => DtRow {
                dt,
                final_gammas: Vec::new(),
                error: Some(e.to_string()),
            },
        })
    });
    Ok(DtTable {
        gamma_names: config.system.learnable_names(),
        rows: rows.into_iter().collect::<Result<_>>()?,
    })
}

/// Local maxima with a 3-point neighborhood: `x[i-1] < x[i] >= x[i+1]`.
pub fn find_peaks(series: &[f64]) -> Vec<usize> {
    (1..series.len().saturating_sub(1))
        .filter(|&i| series[i - 1] < series[i] && series[i] >= series[i + 1])
        .collect()
}

/// `(t, x)` at each peak of `series` sampled every `dt` from `t0`.
pub fn peak_offsets(series: &[f64], t0: f64, dt: f64) -> Vec<(f64, f64)> {
    find_peaks(series)
        .into_iter()
        .map(|i| (t0 + i as f64 * dt, series[i]))
        .collect()
}

/// Damping from the decay of oscillation peaks `A e^{-zeta t / 2}`: linear
/// regression of `ln x_peak` on `t`, `zeta = -2 slope`.
pub fn gt_pendulum_damping(peaks: &[(f64, f64)]) -> Result<f64> {
    if peaks.len() < 2 {
        return Err(Error::InvalidArgument("need at least two peaks".into()));
    }
    if peaks.iter().any(|&(_, x)| !(x > 0.0)) {
        return Err(Error::InvalidArgument("peak amplitudes must be positive".into()));
    }
    let n = peaks.len() as f64;
    let mt = peaks.iter().map(|p| p.0).sum::<f64>() / n;
    let ml = peaks.iter().map(|p| p.1.ln()).sum::<f64>() / n;
    let stt: f64 = peaks.iter().map(|p| (p.0 - mt).powi(2)).sum();
    if !(stt > 0.0) {
        return Err(Error::DegenerateFit("peaks share one time"));
    }
    let stl: f64 = peaks.iter().map(|p| (p.0 - mt) * (p.1.ln() - ml)).sum();
    Ok(-2.0 * stl / stt)
}

/// Outflow constant from the start and end water heights over `t` seconds:
/// `k = 2 (sqrt h0 - sqrt ht) / t`.
pub fn gt_torricelli_k(h0: f64, ht: f64, t: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("duration must be positive, got {t}")));
    }
    if !(h0 >= ht && ht >= 0.0) {
        return Err(Error::InvalidArgument(format!("need h0 >= ht >= 0, got {h0}, {ht}")));
    }
    Ok(2.0 * (h0.sqrt() - ht.sqrt()) / t)
}

fn check_incline(alpha_deg: f64, t: f64) -> Result<()> {
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("duration must be positive, got {t}")));
    }
    if !(alpha_deg > 0.0 && alpha_deg < 90.0) {
        return Err(Error::InvalidArgument(format!("incline must be in (0, 90) degrees, got {alpha_deg}")));
    }
    Ok(())
}

/// Friction coefficient from the travel time over `s` metres:
/// `mu = tan(alpha) - 2 s / (g t^2)`.
///
/// This inverts `s = g (tan(alpha) - mu) t^2 / 2`; for a block on an incline
/// see [`gt_sliding_mu_incline`].
pub fn gt_sliding_mu(alpha_deg: f64, s: f64, t: f64, g: f64) -> Result<f64> {
    check_incline(alpha_deg, t)?;
    Ok(alpha_deg.to_radians().tan() - 2.0 * s / (g * t * t))
}

/// Exact inverse of `s = g (sin(alpha) - mu cos(alpha)) t^2 / 2`.
pub fn gt_sliding_mu_incline(alpha_deg: f64, s: f64, t: f64, g: f64) -> Result<f64> {
    check_incline(alpha_deg, t)?;
    let a = alpha_deg.to_radians();
    Ok(a.tan() - 2.0 * s / (g * t * t * a.cos()))
}

/// Acceleration down an incline with friction, the quantity the sliding
/// block model can actually identify.
pub fn sliding_acceleration(alpha_deg: f64, mu: f64, g: f64) -> f64 {
    let a = alpha_deg.to_radians();
    g * (a.sin() - mu * a.cos())
}

/// Focal length in px/m from the ball's initial image radius `r_pix0`, its
/// real radius `r0` and its distance `h0`: `f = r_pix0 / r0 * h0`.
pub fn gt_freefall_focal(r_pix0: f64, r0: f64, h0: f64) -> Result<f64> {
    if !(r_pix0 > 0.0 && r0 > 0.0 && h0 > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "radii and distance must be positive, got {r_pix0}, {r0}, {h0}"
        )));
    }
    Ok(r_pix0 / r0 * h0)
}
