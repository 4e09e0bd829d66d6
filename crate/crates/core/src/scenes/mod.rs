//! Synthetic video scenes and frame-folder datasets.

mod io;
pub mod render;
pub mod simulate;

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ode::{closed_form_oscillator, closed_form_oscillator_velocity, gamma_from_physical, OdeSystem, SystemKind};
use crate::parallel::Execution;

pub use io::{load_dataset, load_frames, LoadOptions, MANIFEST_FILE};
pub use render::RenderConfig;
pub use simulate::simulate_trajectory;

pub const DATASET_FORMAT: &str = "vidphys-dataset/1";

/// Oscillator used by every single-object synthetic scene.
pub const SYNTHETIC_OMEGA: f64 = 2.0;
pub const SYNTHETIC_ZETA: f64 = 0.04;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    /// Angle of a pendulum bob.
    #[serde(alias = "pendulum-motion")]
    Motion,
    /// Grey level of an irregular shape.
    Intensity,
    /// Radius of a disc whose halves grow and shrink in opposition.
    Scale,
    /// Two sprites coupled by a spring, with per-object masks.
    TwoBody,
}

impl Scenario {
    pub const ALL: [Scenario; 4] = [Scenario::Motion, Scenario::Intensity, Scenario::Scale, Scenario::TwoBody];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Motion => "motion",
            Scenario::Intensity => "intensity",
            Scenario::Scale => "scale",
            Scenario::TwoBody => "two-body",
        }
    }

    /// Objects that need their own masked encoder pass.
    pub fn objects(&self) -> usize {
        match self {
            Scenario::TwoBody => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "motion" | "pendulum-motion" => Ok(Scenario::Motion),
            "intensity" => Ok(Scenario::Intensity),
            "scale" => Ok(Scenario::Scale),
            "two-body" | "spring" => Ok(Scenario::TwoBody),
            other => Err(Error::InvalidArgument(format!("unknown scenario {other:?}"))),
        }
    }
}

/// Affine map from the simulated state to the rendered quantity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observable {
    pub offset: f64,
    pub scale: f64,
}

impl Observable {
    pub fn apply(&self, state: f64) -> f64 {
        self.offset + self.scale * state
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum InitDistribution {
    /// `A e^{-zeta t} cos(omega t + phi)` with uniform `A` and `phi`; an empty
    /// range is a fixed value.
    Phase { amplitude: (f64, f64), phase_lo: f64, phase_hi: f64 },
    /// Opposed bodies around the origin with uniform separation radius and
    /// tangential speed; zero total momentum.
    Orbit { radius: (f64, f64), speed: (f64, f64) },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub scenario: Scenario,
    pub n_samples: usize,
    pub frames_per_sample: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub dt: f64,
    pub dynamics: OdeSystem,
    pub observable: Observable,
    pub init: InitDistribution,
    pub seed: u64,
}

impl ScenarioConfig {
    /// 500 samples of 20 frames at 1x50x50.
    pub fn preset(scenario: Scenario) -> Self {
        let (g0, g1) = gamma_from_physical(SYNTHETIC_OMEGA, SYNTHETIC_ZETA);
        let phase = InitDistribution::Phase {
            amplitude: (1.0, 1.0),
            phase_lo: 0.0,
            phase_hi: 2.0 * PI,
        };
        let (dynamics, observable, init, dt) = match scenario {
            Scenario::Intensity => (
                OdeSystem::oscillator(g0, g1),
                Observable { offset: 0.6, scale: 0.4 },
                phase,
                0.2,
            ),
            Scenario::Motion => (
                OdeSystem::oscillator(g0, g1),
                Observable { offset: 0.0, scale: 180.0 },
                // Varied swings: with one shared amplitude every sample's
                // cos(theta) has the same mean, and a latent tracking it is an
                // almost exact oscillator at twice the true frequency.
                InitDistribution::Phase {
                    amplitude: (0.25, 1.0),
                    phase_lo: 0.0,
                    phase_hi: 2.0 * PI,
                },
                0.2,
            ),
            Scenario::Scale => (
                OdeSystem::oscillator(g0, g1),
                Observable { offset: 0.0, scale: 10.0 },
                phase,
                0.2,
            ),
            Scenario::TwoBody => (
                OdeSystem::two_body_spring(2.0, 0.2),
                // world [-1, 1] onto the 50 px frame
                Observable { offset: 25.0, scale: 25.0 },
                InitDistribution::Orbit {
                    radius: (0.2, 0.5),
                    speed: (0.1, 0.6),
                },
                0.1,
            ),
        };
        ScenarioConfig {
            scenario,
            n_samples: 500,
            frames_per_sample: 20,
            width: 50,
            height: 50,
            channels: 1,
            dt,
            dynamics,
            observable,
            init,
            seed: 0,
        }
    }

    pub fn render_config(&self) -> RenderConfig {
        RenderConfig {
            width: self.width,
            height: self.height,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_samples == 0 {
            return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
        }
        if self.frames_per_sample < self.dynamics.order().max(2) {
            return Err(Error::InvalidArgument(format!(
                "frames_per_sample must be at least {}",
                self.dynamics.order().max(2)
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidArgument("frame size must be positive".into()));
        }
        if self.channels != 1 {
            return Err(Error::InvalidArgument("synthetic scenes are single-channel".into()));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::InvalidArgument(format!("dt must be positive, got {}", self.dt)));
        }
        if let InitDistribution::Phase { amplitude: (lo, hi), .. } = self.init {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidArgument(format!("amplitude range ({lo}, {hi}) is invalid")));
            }
        }
        let expects_spring = self.scenario == Scenario::TwoBody;
        if expects_spring != (self.dynamics.kind() == SystemKind::TwoBodySpring) {
            return Err(Error::InvalidArgument(format!(
                "scenario {} cannot be driven by {:?}",
                self.scenario,
                self.dynamics.kind()
            )));
        }
        if self.dynamics.latent_dim() != if expects_spring { 4 } else { 1 } {
            return Err(Error::InvalidArgument("synthetic scenes need a scalar state".into()));
        }
        Ok(())
    }
}

/// Video frames of one recording or sample, row-major `height x width`
/// intensities in `[0, 1]`, frame-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<f32>,
    pub n_frames: usize,
    pub width: usize,
    pub height: usize,
    pub dt: f64,
    /// One `n_frames x height x width` binary stack per object; empty when unmasked.
    pub masks: Vec<Vec<f32>>,
    pub gt_trajectory: Option<Vec<Vec<f64>>>,
}

impl FrameSequence {
    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let p = self.pixels();
        &self.frames[t * p..(t + 1) * p]
    }

    pub fn mask(&self, object: usize, t: usize) -> &[f32] {
        let p = self.pixels();
        &self.masks[object][t * p..(t + 1) * p]
    }

    /// Keeps frames `start, start + stride, ...`, at most `count` of them.
    pub fn subsample(&self, start: usize, stride: usize, count: usize) -> Result<FrameSequence> {
        if stride == 0 {
            return Err(Error::InvalidArgument("stride must be positive".into()));
        }
        let idx: Vec<usize> = (start..self.n_frames).step_by(stride).take(count).collect();
        if idx.len() < count {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} frames cannot supply {count} frames from {start} with stride {stride}",
                self.n_frames
            )));
        }
        let pick = |stack: &[f32]| -> Vec<f32> {
            let p = self.pixels();
            idx.iter().flat_map(|&t| stack[t * p..(t + 1) * p].iter().copied()).collect()
        };
        Ok(FrameSequence {
            frames: pick(&self.frames),
            n_frames: idx.len(),
            width: self.width,
            height: self.height,
            dt: self.dt * stride as f64,
            masks: self.masks.iter().map(|m| pick(m)).collect(),
            gt_trajectory: self
                .gt_trajectory
                .as_ref()
                .map(|gt| idx.iter().map(|&t| gt[t].clone()).collect()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleMeta {
    /// Simulator state at frame 0: the state followed by its derivatives.
    pub init_state: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_trajectory: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub scenario: String,
    /// Sampling period in seconds.
    pub dt: f64,
    pub n_samples: usize,
    pub frames_per_sample: usize,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    #[serde(default)]
    pub objects: usize,
    pub gt_params: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<OdeSystem>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observable: Option<Observable>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samples: Vec<SampleMeta>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub samples: Vec<FrameSequence>,
}

impl Dataset {
    pub fn dt(&self) -> f64 {
        self.manifest.dt
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn frames_per_sample(&self) -> usize {
        self.manifest.frames_per_sample
    }

    pub fn pixels(&self) -> usize {
        self.manifest.width * self.manifest.height * self.manifest.channels
    }

    /// `samples x frames x channels x width x height`
    pub fn shape(&self) -> [usize; 5] {
        let m = &self.manifest;
        [m.n_samples, m.frames_per_sample, m.channels, m.width, m.height]
    }

    pub fn objects(&self) -> usize {
        self.manifest.objects.max(1)
    }

    /// Splits one long recording into overlapping windows of `window` frames.
    pub fn from_video(seq: FrameSequence, window: usize, scenario: &str) -> Result<Dataset> {
        if window < 2 || window > seq.n_frames {
            return Err(Error::InvalidArgument(format!(
                "window of {window} frames does not fit a {}-frame video",
                seq.n_frames
            )));
        }
        let samples: Vec<FrameSequence> = (0..=seq.n_frames - window)
            .map(|start| seq.subsample(start, 1, window))
            .collect::<Result<_>>()?;
        let manifest = Manifest {
            format: DATASET_FORMAT.to_string(),
            scenario: scenario.to_string(),
            dt: seq.dt,
            n_samples: samples.len(),
            frames_per_sample: window,
            width: seq.width,
            height: seq.height,
            channels: 1,
            objects: seq.masks.len().max(1),
            gt_params: BTreeMap::new(),
            system: None,
            observable: None,
            samples: Vec::new(),
        };
        Ok(Dataset { manifest, samples })
    }

    /// Runs the reference simulator for `frames` frames from the recorded
    /// initial state of `sample`, mapped through the observable.
    pub fn ground_truth(&self, sample: usize, frames: usize) -> Result<Vec<Vec<f64>>> {
        let m = &self.manifest;
        let (system, obs) = match (&m.system, &m.observable) {
            (Some(s), Some(o)) => (s, o),
            _ => return Err(Error::InvalidArgument("dataset has no ground-truth dynamics".into())),
        };
        let meta = m
            .samples
            .get(sample)
            .ok_or_else(|| Error::InvalidArgument(format!("no metadata for sample {sample}")))?;
        let traj = simulate_trajectory(system, &meta.init_state, m.dt, frames)?;
        Ok(traj
            .into_iter()
            .map(|s| s.into_iter().map(|v| obs.apply(v)).collect())
            .collect())
    }

    pub fn write(&self, root: &std::path::Path) -> Result<()> {
        io::write_dataset(self, root)
    }
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn draw_init(cfg: &ScenarioConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    match &cfg.init {
        InitDistribution::Phase {
            amplitude,
            phase_lo,
            phase_hi,
        } => {
            let phi = if phase_hi > phase_lo { rng.random_range(*phase_lo..*phase_hi) } else { *phase_lo };
            let (lo, hi) = *amplitude;
            let a = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            let (zeta, omega) = oscillator_physical(&cfg.dynamics);
            vec![
                closed_form_oscillator(a, zeta, omega, phi, 0.0),
                closed_form_oscillator_velocity(a, zeta, omega, phi, 0.0),
            ]
        }
        InitDistribution::Orbit { radius, speed } => {
            let r = rng.random_range(radius.0..=radius.1);
            let angle = rng.random_range(0.0..2.0 * PI);
            let s = rng.random_range(speed.0..=speed.1);
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let (sa, ca) = angle.sin_cos();
            let p1 = [r * ca, r * sa];
            let v1 = [-sign * s * sa, sign * s * ca];
            vec![p1[0], p1[1], -p1[0], -p1[1], v1[0], v1[1], -v1[0], -v1[1]]
        }
    }
}

/// `(zeta, omega)` of a linear second-order system.
fn oscillator_physical(system: &OdeSystem) -> (f64, f64) {
    let g0 = system.param("gamma0").unwrap_or(0.0);
    let g1 = system.param("gamma1").unwrap_or(0.0);
    let zeta = g1 / 2.0;
    (zeta, (g0 - zeta * zeta).max(0.0).sqrt())
}

fn render_sample(cfg: &ScenarioConfig, traj: &[Vec<f64>], background: &[f32]) -> (Vec<f32>, Vec<Vec<f32>>) {
    let rc = cfg.render_config();
    let obs = cfg.observable;
    let mut frames = Vec::with_capacity(traj.len() * rc.pixels());
    let mut masks = vec![Vec::new(); if cfg.scenario == Scenario::TwoBody { 2 } else { 0 }];
    for state in traj {
        let frame = match cfg.scenario {
            Scenario::Motion => render::render_pendulum(obs.apply(state[0]), &rc),
            Scenario::Intensity => render::render_intensity(obs.apply(state[0]), &rc),
            Scenario::Scale => render::render_scale(obs.apply(state[0]), &rc),
            Scenario::TwoBody => {
                let px = |i: usize| obs.apply(state[i]);
                let out = render::render_two_body([px(0), px(1)], [px(2), px(3)], &rc, background);
                masks[0].extend(out.mask1);
                masks[1].extend(out.mask2);
                out.frame
            }
        };
        frames.extend(frame.into_iter().map(quantize));
    }
    (frames, masks)
}

/// Simulates and renders every sample of `cfg`.
///
/// Initial conditions are drawn sequentially from `cfg.seed`; rendering is
/// independent per sample. Frames are quantized to 8 bits.
pub fn generate_dataset(cfg: &ScenarioConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let inits: Vec<Vec<f64>> = (0..cfg.n_samples).map(|_| draw_init(cfg, &mut rng)).collect();
    let background = if cfg.scenario == Scenario::TwoBody {
        render::background_texture(&cfg.render_config(), cfg.seed)
    } else {
        Vec::new()
    };
    let rendered: Vec<Result<(FrameSequence, SampleMeta)>> = Execution::Parallel.map(&inits, |init| {
        let traj = simulate_trajectory(&cfg.dynamics, init, cfg.dt, cfg.frames_per_sample)?;
        let gt: Vec<Vec<f64>> = traj
            .iter()
            .map(|s| s.iter().map(|&v| cfg.observable.apply(v)).collect())
            .collect();
        let (frames, masks) = render_sample(cfg, &traj, &background);
        let seq = FrameSequence {
            frames,
            n_frames: cfg.frames_per_sample,
            width: cfg.width,
            height: cfg.height,
            dt: cfg.dt,
            masks,
            gt_trajectory: Some(gt.clone()),
        };
        let meta = SampleMeta {
            init_state: init.clone(),
            gt_trajectory: Some(gt),
        };
        Ok((seq, meta))
    });
    let mut samples = Vec::with_capacity(cfg.n_samples);
    let mut metas = Vec::with_capacity(cfg.n_samples);
    for r in rendered {
        let (s, m) = r?;
        samples.push(s);
        metas.push(m);
    }
    let gt_params = cfg
        .dynamics
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value))
        .collect();
    let manifest = Manifest {
        format: DATASET_FORMAT.to_string(),
        scenario: cfg.scenario.name().to_string(),
        dt: cfg.dt,
        n_samples: cfg.n_samples,
        frames_per_sample: cfg.frames_per_sample,
        width: cfg.width,
        height: cfg.height,
        channels: cfg.channels,
        objects: cfg.scenario.objects(),
        gt_params,
        system: Some(cfg.dynamics.clone()),
        observable: Some(cfg.observable),
        samples: metas,
    };
    Ok(Dataset { manifest, samples })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(scenario: Scenario, n: usize, frames: usize) -> ScenarioConfig {
        ScenarioConfig {
            n_samples: n,
            frames_per_sample: frames,
            ..ScenarioConfig::preset(scenario)
        }
    }

    #[test]
    fn preset_shape() {
        let cfg = ScenarioConfig::preset(Scenario::Intensity);
        assert_eq!(
            (cfg.n_samples, cfg.frames_per_sample, cfg.channels, cfg.width, cfg.height),
            (500, 20, 1, 50, 50)
        );
    }

    #[test]
    fn minimal_dataset() {
        let ds = generate_dataset(&small(Scenario::Intensity, 1, 2)).unwrap();
        assert_eq!(ds.shape(), [1, 2, 1, 50, 50]);
        assert_eq!(ds.samples[0].frames.len(), 2 * 2500);
        assert!(generate_dataset(&small(Scenario::Intensity, 1, 1)).is_err());
    }

    #[test]
    fn frames_are_quantized_unit_values() {
        for scenario in Scenario::ALL {
            let ds = generate_dataset(&small(scenario, 2, 4)).unwrap();
            for s in &ds.samples {
                for &v in &s.frames {
                    assert!((0.0..=1.0).contains(&v));
                    let q = v * 255.0;
                    assert!((q - q.round()).abs() < 1e-3);
                }
                assert_eq!(s.masks.len(), if scenario == Scenario::TwoBody { 2 } else { 0 });
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small(Scenario::Motion, 3, 5)).unwrap();
        let b = generate_dataset(&small(Scenario::Motion, 3, 5)).unwrap();
        assert_eq!(a, b);
        let mut other = small(Scenario::Motion, 3, 5);
        other.seed = 9;
        assert_ne!(a, generate_dataset(&other).unwrap());
    }

    #[test]
    fn ground_truth_in_normalized_ranges() {
        let ds = generate_dataset(&small(Scenario::Intensity, 20, 20)).unwrap();
        for s in &ds.samples {
            for z in s.gt_trajectory.as_ref().unwrap() {
                assert!((0.2 - 1e-9..=1.0 + 1e-9).contains(&z[0]));
            }
        }
        let cont = ds.ground_truth(3, 30).unwrap();
        let stored = ds.samples[3].gt_trajectory.as_ref().unwrap();
        for (a, b) in cont.iter().zip(stored) {
            assert_eq!(a, b);
        }
        assert_eq!(cont.len(), 30);
    }

    #[test]
    fn motion_swings_vary_within_full_range() {
        let ds = generate_dataset(&small(Scenario::Motion, 40, 20)).unwrap();
        let peaks: Vec<f64> = ds
            .samples
            .iter()
            .map(|s| s.gt_trajectory.as_ref().unwrap().iter().map(|z| z[0].abs()).fold(0.0, f64::max))
            .collect();
        assert!(peaks.iter().all(|&p| p <= 180.0 + 1e-9));
        let (lo, hi) = peaks.iter().fold((f64::INFINITY, 0.0f64), |(l, h), &p| (l.min(p), h.max(p)));
        assert!(hi > 150.0 && lo < 90.0, "peaks in [{lo}, {hi}]");
        let mut bad = small(Scenario::Motion, 2, 4);
        bad.init = InitDistribution::Phase { amplitude: (1.0, 0.5), phase_lo: 0.0, phase_hi: 1.0 };
        assert!(generate_dataset(&bad).is_err());
    }

    #[test]
    fn two_body_stays_in_frame() {
        let ds = generate_dataset(&small(Scenario::TwoBody, 20, 20)).unwrap();
        for s in &ds.samples {
            for p in s.gt_trajectory.as_ref().unwrap() {
                assert!(p.iter().all(|&c| (5.0..=45.0).contains(&c)), "{p:?}");
            }
        }
    }

    #[test]
    fn subsample_and_windows() {
        let ds = generate_dataset(&small(Scenario::Scale, 1, 12)).unwrap();
        let seq = ds.samples[0].clone();
        let sub = seq.subsample(1, 3, 3).unwrap();
        assert_eq!(sub.n_frames, 3);
        assert_eq!(sub.frame(1), seq.frame(4));
        assert!((sub.dt - 0.6).abs() < 1e-12);
        assert!(seq.subsample(0, 5, 4).is_err());
        let windows = Dataset::from_video(seq, 10, "scale").unwrap();
        assert_eq!(windows.len(), 3);
        assert_eq!(windows.samples[2].frame(0), ds.samples[0].frame(2));
    }

    #[test]
    fn scenario_names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!("fluid".parse::<Scenario>().is_err());
    }
}
