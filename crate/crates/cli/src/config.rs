//! Experiment files and flag overrides.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use vidphys::eval::SweepConfig;
use vidphys::loss::{LossMode, Prior};
use vidphys::parallel::Execution;
use vidphys::scenes::{Scenario, ScenarioConfig};
use vidphys::trainer::{GammaInit, TrainConfig};

use crate::Common;

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    /// Synthetic scenario or real-video preset name.
    pub scenario: Option<String>,
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub scene: SceneFile,
    #[serde(default)]
    pub train: TrainFile,
    pub prior: Option<PriorFile>,
    #[serde(default)]
    pub sweep: SweepFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneFile {
    pub n_samples: Option<usize>,
    pub frames_per_sample: Option<usize>,
    pub width: Option<usize>,
    pub height: Option<usize>,
    pub dt: Option<f64>,
    pub seed: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainFile {
    pub epochs: Option<usize>,
    /// 0 trains on the whole dataset per step.
    pub batch_size: Option<usize>,
    pub frames_per_sample: Option<usize>,
    pub dt: Option<f64>,
    pub encoder_lr: Option<f64>,
    pub hidden: Option<[usize; 2]>,
    pub seed: Option<u64>,
    pub loss_mode: Option<LossMode>,
    pub init_range: Option<[f64; 2]>,
    pub gamma_init: Option<Vec<f64>>,
    pub sequential: Option<bool>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorFile {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepFile {
    pub runs: Option<usize>,
    pub init_range: Option<[f64; 2]>,
    pub vary_seed: Option<bool>,
    pub dt_list: Option<Vec<f64>>,
}

pub fn read_file(path: &Path) -> Result<FileConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Everything a command needs, after applying the file and then the flags.
#[derive(Debug)]
pub struct Resolved {
    pub scenario: String,
    /// Present for synthetic scenarios.
    pub scene: Option<ScenarioConfig>,
    pub train: TrainConfig,
    pub out: PathBuf,
    pub sweep: SweepConfig,
    pub dt_list: Vec<f64>,
    /// Whether the flags or the file chose the epoch count.
    pub epochs_set: bool,
}

/// `fallback` names the scenario when neither the flags nor the file do,
/// typically the one recorded in a dataset manifest.
pub fn resolve(flags: &Common, fallback: Option<&str>) -> Result<Resolved> {
    let file = match &flags.config {
        Some(p) => read_file(p)?,
        None => FileConfig::default(),
    };
    let scenario = flags
        .scenario
        .clone()
        .or(file.scenario.clone())
        .or(fallback.map(str::to_string))
        .unwrap_or_else(|| "intensity".to_string());
    let mut train = TrainConfig::preset(&scenario)?;
    let mut scene = scenario.parse::<Scenario>().ok().map(ScenarioConfig::preset);

    if let Some(s) = scene.as_mut() {
        let f = &file.scene;
        s.n_samples = f.n_samples.unwrap_or(s.n_samples);
        s.frames_per_sample = f.frames_per_sample.unwrap_or(s.frames_per_sample);
        s.width = f.width.unwrap_or(s.width);
        s.height = f.height.unwrap_or(s.height);
        s.dt = f.dt.unwrap_or(s.dt);
        s.seed = f.seed.unwrap_or(s.seed);
        if let Some(n) = flags.n_samples {
            s.n_samples = n;
        }
        if let Some(n) = flags.frames {
            s.frames_per_sample = n;
        }
        if let Some(dt) = flags.dt {
            s.dt = dt;
        }
        if let Some(seed) = flags.seed {
            s.seed = seed;
        }
    }

    let f = &file.train;
    let epochs_set = flags.epochs.or(f.epochs).is_some();
    train.epochs = flags.epochs.or(f.epochs).unwrap_or(train.epochs);
    if let Some(b) = f.batch_size {
        train.batch_size = (b > 0).then_some(b);
    }
    train.frames_per_sample = f.frames_per_sample.or(train.frames_per_sample);
    train.dt = flags.dt.or(f.dt).or(train.dt);
    train.encoder_lr = f.encoder_lr.unwrap_or(train.encoder_lr);
    if let Some([h1, h2]) = f.hidden {
        train.hidden = (h1, h2);
    }
    train.seed = flags.seed.or(f.seed).unwrap_or(train.seed);
    train.loss_mode = flags.loss_mode.or(f.loss_mode).unwrap_or(train.loss_mode);
    if let Some(v) = &f.gamma_init {
        train.gamma_init = GammaInit::Values(v.clone());
    }
    if let Some((lo, hi)) = flags.init_range.or(f.init_range.map(|[a, b]| (a, b))) {
        train.gamma_init = GammaInit::Uniform { lo, hi };
    }
    if f.sequential == Some(true) {
        train.execution = Execution::Sequential;
    }
    let d = train.system.latent_dim();
    if let Some((mean, std)) = flags.prior.or(file.prior.as_ref().map(|p| (p.mean, p.std))) {
        train.prior = Prior::from_std(mean, std, d)?;
    }

    let s = &file.sweep;
    let mut sweep = SweepConfig::default();
    sweep.runs = flags.runs.or(s.runs).unwrap_or(sweep.runs);
    if let Some(r) = flags.init_range.or(s.init_range.map(|[a, b]| (a, b))) {
        sweep.init_range = r;
    }
    sweep.vary_seed = s.vary_seed.unwrap_or(sweep.vary_seed);
    let dt_list = flags
        .dt_list
        .clone()
        .or(s.dt_list.clone())
        .unwrap_or_else(|| vec![0.2, 0.4, 0.8]);
    if dt_list.iter().any(|dt| !(*dt > 0.0)) {
        bail!("dt values must be positive");
    }

    let out = flags
        .out
        .clone()
        .or(file.out)
        .unwrap_or_else(|| PathBuf::from("runs").join(&scenario));
    Ok(Resolved {
        scenario,
        scene,
        train,
        out,
        sweep,
        dt_list,
        epochs_set,
    })
}

/// Parses `A,B` into a pair of floats.
pub fn parse_pair(s: &str) -> std::result::Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected A,B, got {s:?}"))?;
    let a = a.trim().parse::<f64>().map_err(|e| format!("{a:?}: {e}"))?;
    let b = b.trim().parse::<f64>().map_err(|e| format!("{b:?}: {e}"))?;
    Ok((a, b))
}

pub fn parse_loss_mode(s: &str) -> std::result::Result<LossMode, String> {
    match s {
        "full" => Ok(LossMode::Full),
        "mse-only" => Ok(LossMode::MseOnly),
        other => Err(format!("expected full or mse-only, got {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn value_parsers() {
        assert_eq!(parse_pair("-10, 10").unwrap(), (-10.0, 10.0));
        assert!(parse_pair("1").is_err());
        assert!(parse_loss_mode("kl").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<FileConfig>("scenario = \"scale\"\nfoo = 1").is_err());
        assert!(toml::from_str::<FileConfig>("[train]\nepoch = 3").is_err());
        let ok: FileConfig = toml::from_str("scenario = \"scale\"\n[train]\nepochs = 3\nloss_mode = \"mse-only\"").unwrap();
        assert_eq!(ok.train.loss_mode, Some(LossMode::MseOnly));
    }

    #[test]
    fn flags_win_over_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "scenario = \"scale\"\n[train]\nepochs = 3\nseed = 4\n[prior]\nmean = 1.0\nstd = 0.2\n").unwrap();
        let flags = Common {
            config: Some(path),
            epochs: Some(7),
            ..Common::default()
        };
        let r = resolve(&flags, Some("motion")).unwrap();
        assert_eq!(r.scenario, "scale");
        assert_eq!(r.train.epochs, 7);
        assert_eq!(r.train.seed, 4);
        assert!((r.train.prior.var0[0] - 0.04).abs() < 1e-15);
    }
}
