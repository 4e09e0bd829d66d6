//! Joint optimization of the encoder and the physics parameters.
//!
//! A batch is a set of sample windows. Every frame of every window is
//! encoded, each latent from index `n` on is predicted from the `n` before
//! it, and all prediction pairs of the batch feed one loss evaluation.
//! Work is split into fixed chunks of samples whose results are reduced in
//! chunk order, so gradients do not depend on the number of threads.

mod adam;
mod checkpoint;

use std::io::Write;
use std::time::Instant;

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{init_encoder, Activations, EncoderDims, EncoderGrads, EncoderParams, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::loss::{loss_backward, total_loss, LatentBatch, LossMode, LossTerms, Prior};
use crate::ode::{euler_step_jacobian, LatentHistory, OdeSystem, StepJacobian};
use crate::parallel::Execution;
use crate::scenes::{Dataset, FrameSequence, Scenario};

pub use adam::{AdamMoments, BETA1, BETA2, EPSILON};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

pub const DEFAULT_ENCODER_LR: f64 = 1e-2;
/// Samples per unit of parallel work.
pub const CHUNK_SAMPLES: usize = 16;
/// Epochs for the synthetic presets.
pub const SYNTHETIC_EPOCHS: usize = 60;
pub const REAL_VIDEO_EPOCHS: usize = 500;

/// Order of magnitude of the initial value: `10^floor(log10 |gamma_init|)`.
/// A zero or non-finite start falls back to the encoder rate.
pub fn lr_for_gamma(gamma_init: f64) -> f64 {
    if gamma_init == 0.0 || !gamma_init.is_finite() {
        return DEFAULT_ENCODER_LR;
    }
    10f64.powi(gamma_init.abs().log10().floor() as i32)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GammaInit {
    /// One value per learnable parameter.
    Values(Vec<f64>),
    /// Each learnable parameter drawn independently from `[lo, hi]`.
    Uniform { lo: f64, hi: f64 },
}

impl Default for GammaInit {
    fn default() -> Self {
        GammaInit::Uniform { lo: -10.0, hi: 10.0 }
    }
}

impl GammaInit {
    pub fn resolve(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        match self {
            GammaInit::Values(v) if v.len() == n => Ok(v.clone()),
            GammaInit::Values(v) => Err(Error::DimensionMismatch {
                context: "gamma_init values",
                expected: n,
                actual: v.len(),
            }),
            &GammaInit::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                    return Err(Error::InvalidArgument(format!("bad init range [{lo}, {hi}]")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(1);
                Ok((0..n).map(|_| if lo == hi { lo } else { rng.random_range(lo..=hi) }).collect())
            }
        }
    }
}

/// Training presets for the real-video recordings.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RealPreset {
    Pendulum,
    Torricelli,
    SlidingBlock,
    Led,
    FreeFallScale,
}

impl RealPreset {
    pub const ALL: [RealPreset; 5] = [
        RealPreset::Pendulum,
        RealPreset::Torricelli,
        RealPreset::SlidingBlock,
        RealPreset::Led,
        RealPreset::FreeFallScale,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            RealPreset::Pendulum => "pendulum",
            RealPreset::Torricelli => "torricelli",
            RealPreset::SlidingBlock => "sliding-block",
            RealPreset::Led => "led",
            RealPreset::FreeFallScale => "free-fall-scale",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: String,
    pub epochs: usize,
    /// Samples per batch; `None` trains on the whole dataset at once.
    pub batch_size: Option<usize>,
    /// Frames taken from each sample; `None` uses all of them.
    pub frames_per_sample: Option<usize>,
    /// Physics step in seconds. Must be a whole multiple of the dataset's
    /// frame period; `None` uses the frame period.
    pub dt: Option<f64>,
    pub encoder_lr: f64,
    pub hidden: (usize, usize),
    /// Governing equation; learnable values are replaced by `gamma_init`.
    pub system: OdeSystem,
    pub gamma_init: GammaInit,
    pub prior: Prior,
    pub loss_mode: LossMode,
    pub seed: u64,
    #[serde(default)]
    pub execution: Execution,
}

impl TrainConfig {
    pub fn synthetic(scenario: Scenario) -> Self {
        let (system, d) = match scenario {
            Scenario::TwoBody => (OdeSystem::two_body_spring(0.0, 0.2), 4),
            _ => (OdeSystem::oscillator(0.0, 0.0), 1),
        };
        TrainConfig {
            preset: scenario.name().to_string(),
            epochs: SYNTHETIC_EPOCHS,
            batch_size: Some(32),
            frames_per_sample: None,
            dt: None,
            encoder_lr: DEFAULT_ENCODER_LR,
            hidden: DEFAULT_HIDDEN,
            system,
            gamma_init: GammaInit::default(),
            prior: Prior::standard(d),
            loss_mode: LossMode::Full,
            seed: 0,
            execution: Execution::default(),
        }
    }

    pub fn real(preset: RealPreset) -> Self {
        let g = 9.81;
        let (system, batch, frames, dt, init, prior) = match preset {
            RealPreset::Pendulum => (
                OdeSystem::pendulum(0.0, 1.0, g),
                Some(64),
                20,
                1.0 / 10.0,
                GammaInit::Uniform { lo: 0.1, hi: 2.0 },
                Prior::standard(1),
            ),
            RealPreset::Torricelli => (
                OdeSystem::torricelli(0.0),
                Some(64),
                20,
                1.0 / 10.0,
                GammaInit::Uniform { lo: 0.001, hi: 0.1 },
                Prior::torricelli(),
            ),
            RealPreset::SlidingBlock => (
                OdeSystem::sliding_block(0.0),
                Some(32),
                10,
                1.0 / 30.0,
                GammaInit::Uniform { lo: 0.1, hi: 5.0 },
                Prior::standard(1),
            ),
            RealPreset::Led => (
                OdeSystem::exponential_decay(0.0),
                Some(32),
                20,
                1.0 / 60.0,
                GammaInit::Uniform { lo: 0.1, hi: 5.0 },
                Prior::standard(1),
            ),
            RealPreset::FreeFallScale => (
                OdeSystem::free_fall_scale(g, 0.0335, 1451.0, 0.2),
                None,
                4,
                1.0 / 30.0,
                GammaInit::Uniform { lo: 1.0, hi: 20.0 },
                Prior::standard(1),
            ),
        };
        TrainConfig {
            preset: preset.name().to_string(),
            epochs: REAL_VIDEO_EPOCHS,
            batch_size: batch,
            frames_per_sample: Some(frames),
            dt: Some(dt),
            encoder_lr: DEFAULT_ENCODER_LR,
            hidden: DEFAULT_HIDDEN,
            system,
            gamma_init: init,
            prior,
            loss_mode: LossMode::Full,
            seed: 0,
            execution: Execution::default(),
        }
    }

    /// Looks a preset up by name: a synthetic scenario or a real-video experiment.
    pub fn preset(name: &str) -> Result<Self> {
        if let Some(p) = RealPreset::ALL.iter().find(|p| p.name() == name) {
            return Ok(Self::real(*p));
        }
        Ok(Self::synthetic(name.parse()?))
    }
}

/// Whole-number ratio between the physics step and the frame period.
pub fn frame_stride(frame_dt: f64, dt: f64) -> Result<usize> {
    if !(frame_dt > 0.0 && dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "dt {dt} and frame period {frame_dt} must be positive"
        )));
    }
    let ratio = dt / frame_dt;
    let stride = ratio.round();
    if stride < 1.0 || (ratio - stride).abs() > 1e-6 * ratio {
        return Err(Error::InvalidArgument(format!(
            "dt {dt} is not a whole multiple of the frame period {frame_dt}"
        )));
    }
    Ok(stride as usize)
}

/// Encoder plus physics block.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub system: OdeSystem,
}

impl Model {
    /// Masked encoder passes per frame.
    pub fn objects(&self) -> usize {
        (self.system.latent_dim() / self.encoder.dims().output).max(1)
    }

    /// Latent state at each listed frame of `seq`.
    pub fn encode_frames(&self, seq: &FrameSequence, frames: &[usize]) -> Result<Vec<Vec<f64>>> {
        let k = self.objects();
        let mut x = Vec::with_capacity(frames.len() * k * seq.pixels());
        for &t in frames {
            if t >= seq.n_frames {
                return Err(Error::InvalidArgument(format!("frame {t} of a {}-frame sequence", seq.n_frames)));
            }
            push_inputs(seq, t, k, &mut x)?;
        }
        let x = Array2::from_shape_vec((frames.len() * k, seq.pixels()), x).expect("row layout");
        let z = self.encoder.forward(x.view())?.z;
        let d = self.system.latent_dim();
        Ok(z.as_slice().expect("standard layout").chunks(d).map(<[f64]>::to_vec).collect())
    }

    pub fn encode_sequence(&self, seq: &FrameSequence) -> Result<Vec<Vec<f64>>> {
        self.encode_frames(seq, &(0..seq.n_frames).collect::<Vec<_>>())
    }
}

/// Appends the encoder inputs of frame `t`: the frame itself, or the frame
/// under each object mask.
fn push_inputs(seq: &FrameSequence, t: usize, objects: usize, out: &mut Vec<f64>) -> Result<()> {
    push_selected(seq, t, objects, None, out)
}

/// As [`push_inputs`], keeping only the `cols` pixels when given.
fn push_selected(
    seq: &FrameSequence,
    t: usize,
    objects: usize,
    cols: Option<&[usize]>,
    out: &mut Vec<f64>,
) -> Result<()> {
    let frame = seq.frame(t);
    if objects == 1 {
        match cols {
            Some(cols) => out.extend(cols.iter().map(|&i| frame[i] as f64)),
            None => out.extend(frame.iter().map(|&v| v as f64)),
        }
        return Ok(());
    }
    if seq.masks.len() < objects {
        return Err(Error::InvalidArgument(format!(
            "{objects} objects need masks, sequence has {}",
            seq.masks.len()
        )));
    }
    for k in 0..objects {
        let mask = seq.mask(k, t);
        match cols {
            Some(cols) => out.extend(cols.iter().map(|&i| (frame[i] * mask[i]) as f64)),
            None => out.extend(frame.iter().zip(mask).map(|(&v, &m)| (v * m) as f64)),
        }
    }
    Ok(())
}

/// How batches are cut out of a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSpec {
    /// Dataset frames between consecutive window frames.
    pub stride: usize,
    /// Window length in (strided) frames.
    pub frames: usize,
    pub dt: f64,
    pub prior: Prior,
    pub loss_mode: LossMode,
    pub execution: Execution,
    /// Pixels that are non-zero somewhere in the dataset; the rest never
    /// reach the encoder and are skipped. `None` when nearly all are used.
    pub active_pixels: Option<Vec<usize>>,
}

/// Skipping pixels only pays off below this fraction of active ones.
const SPARSE_FRACTION: f64 = 0.9;

fn active_pixels(dataset: &Dataset) -> Option<Vec<usize>> {
    let p = dataset.pixels();
    let mut used = vec![false; p];
    for s in &dataset.samples {
        for frame in s.frames.chunks(p) {
            for (u, &v) in used.iter_mut().zip(frame) {
                *u |= v != 0.0;
            }
        }
    }
    let active: Vec<usize> = (0..p).filter(|&i| used[i]).collect();
    ((active.len() as f64) < SPARSE_FRACTION * p as f64).then_some(active)
}

impl BatchSpec {
    pub fn new(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        let dt = config.dt.unwrap_or(dataset.dt());
        let stride = frame_stride(dataset.dt(), dt)?;
        let available = (dataset.frames_per_sample() - 1) / stride + 1;
        let frames = config.frames_per_sample.unwrap_or(available);
        let n = config.system.order();
        if frames < n + 1 {
            return Err(Error::InvalidArgument(format!(
                "an order-{n} system needs at least {} frames per sample, got {frames}",
                n + 1
            )));
        }
        if frames > available {
            return Err(Error::InvalidArgument(format!(
                "{frames} frames per sample requested, {available} available at stride {stride}"
            )));
        }
        Ok(BatchSpec {
            stride,
            frames,
            dt,
            prior: config.prior.broadcast(config.system.latent_dim())?,
            loss_mode: config.loss_mode,
            execution: config.execution,
            active_pixels: active_pixels(dataset),
        })
    }

    fn frame_index(&self, t: usize) -> usize {
        t * self.stride
    }
}

struct ChunkForward {
    x: Array2<f64>,
    acts: Activations,
}

/// Result of a batch forward pass, kept for the backward pass.
pub struct BatchForward {
    pub batch: LatentBatch,
    pub terms: LossTerms,
    chunks: Vec<ChunkForward>,
    steps: Vec<StepJacobian>,
    samples: usize,
    /// Encoder restricted to the active pixels, when sparse.
    compact: Option<EncoderParams>,
}

/// The encoder with its first layer cut down to `cols`.
fn compact_encoder(encoder: &EncoderParams, cols: &[usize]) -> EncoderParams {
    let mut e = encoder.clone();
    e.w1 = encoder.w1.select(ndarray::Axis(1), cols);
    e
}

/// Gradients of the batch loss.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub encoder: EncoderGrads,
    /// One entry per learnable physics parameter.
    pub gammas: Vec<f64>,
}

impl Gradients {
    pub fn is_finite(&self) -> bool {
        self.encoder.is_finite() && self.gammas.iter().all(|g| g.is_finite())
    }
}

/// Encodes the windows of `samples` and predicts every latent from index
/// `n` on. Rows of the batch are sample-major, then time.
pub fn forward_batch(model: &Model, dataset: &Dataset, samples: &[usize], spec: &BatchSpec) -> Result<BatchForward> {
    let k = model.objects();
    let d = model.system.latent_dim();
    let n = model.system.order();
    let f = spec.frames;
    if let Some(&bad) = samples.iter().find(|&&s| s >= dataset.len()) {
        return Err(Error::InvalidArgument(format!("sample {bad} out of {}", dataset.len())));
    }
    let cols = spec.active_pixels.as_deref();
    let compact = cols.map(|c| compact_encoder(&model.encoder, c));
    let encoder = compact.as_ref().unwrap_or(&model.encoder);
    let pixels = cols.map_or(dataset.pixels(), <[usize]>::len);
    let chunk_ids: Vec<&[usize]> = samples.chunks(CHUNK_SAMPLES).collect();
    let chunks: Vec<Result<ChunkForward>> = spec.execution.map(&chunk_ids, |ids| {
        let mut x = Vec::with_capacity(ids.len() * f * k * pixels);
        for &s in ids.iter() {
            for t in 0..f {
                push_selected(&dataset.samples[s], spec.frame_index(t), k, cols, &mut x)?;
            }
        }
        let x = Array2::from_shape_vec((ids.len() * f * k, pixels), x).expect("row layout");
        let acts = encoder.forward(x.view())?;
        Ok(ChunkForward { x, acts })
    });
    let chunks: Vec<ChunkForward> = chunks.into_iter().collect::<Result<_>>()?;

    // latents[b * f + t] is the full d-dimensional state, objects concatenated.
    let latents: Vec<&[f64]> = chunks
        .iter()
        .flat_map(|c| c.acts.z.as_slice().expect("standard layout").chunks(d))
        .collect();
    let rows = samples.len() * (f - n);
    let mut z = Array2::zeros((rows, d));
    let mut z_hat = Array2::zeros((rows, d));
    let mut steps = Vec::with_capacity(rows);
    let mut r = 0;
    for b in 0..samples.len() {
        for t in n..f {
            let history: Vec<Vec<f64>> = (1..=n).map(|j| latents[b * f + t - j].to_vec()).collect();
            let jac = euler_step_jacobian(&LatentHistory::new(history, spec.dt)?, &model.system)?;
            z.row_mut(r).assign(&ndarray::aview1(latents[b * f + t]));
            z_hat.row_mut(r).assign(&ndarray::aview1(&jac.next));
            steps.push(jac);
            r += 1;
        }
    }
    let batch = LatentBatch::new(z, z_hat)?;
    let terms = total_loss(&batch, &spec.prior, spec.loss_mode)?;
    Ok(BatchForward {
        batch,
        terms,
        chunks,
        steps,
        samples: samples.len(),
        compact,
    })
}

/// Exact gradients of the batch loss with respect to every encoder
/// parameter and every learnable physics parameter.
pub fn backward_batch(model: &Model, fwd: &BatchForward, spec: &BatchSpec) -> Result<Gradients> {
    let k = model.objects();
    let d = model.system.latent_dim();
    let n = model.system.order();
    let f = spec.frames;
    let p = model.system.learnable_names().len();
    let grad = loss_backward(&fwd.batch, &spec.prior, spec.loss_mode)?;

    let mut gammas = vec![0.0; p];
    // Gradient with respect to each encoded state, laid out like the encoder output.
    let mut g_lat = vec![0.0; fwd.samples * f * d];
    let mut r = 0;
    for b in 0..fwd.samples {
        for t in n..f {
            let jac = &fwd.steps[r];
            let dz = grad.d_z.row(r);
            let dzh = grad.d_z_hat.row(r);
            let target = (b * f + t) * d;
            for a in 0..d {
                g_lat[target + a] += dz[a];
            }
            for (a, &g) in dzh.iter().enumerate() {
                for (c, acc) in gammas.iter_mut().enumerate() {
                    *acc += g * jac.wrt_gammas[a * p + c];
                }
            }
            for (j, m) in jac.wrt_history.iter().enumerate() {
                let src = (b * f + t - 1 - j) * d;
                for (a, &g) in dzh.iter().enumerate() {
                    for bb in 0..d {
                        g_lat[src + bb] += g * m[a * d + bb];
                    }
                }
            }
            r += 1;
        }
    }

    let out = d / k;
    let mut offsets = Vec::with_capacity(fwd.chunks.len());
    let mut row = 0;
    for c in &fwd.chunks {
        offsets.push(row);
        row += c.x.nrows();
    }
    let net = fwd.compact.as_ref().unwrap_or(&model.encoder);
    let parts: Vec<Result<EncoderGrads>> = spec.execution.map_range(fwd.chunks.len(), |i| {
        let c = &fwd.chunks[i];
        let start = offsets[i] * out;
        let g = &g_lat[start..start + c.x.nrows() * out];
        let g = ArrayView2::from_shape((c.x.nrows(), out), g).expect("row layout");
        net.backward(c.x.view(), &c.acts, g)
    });
    let mut sum = EncoderParams::zeros(net.dims());
    for part in parts {
        sum.add_assign(&part?);
    }
    let encoder = match spec.active_pixels.as_deref() {
        None => sum,
        Some(cols) => {
            // Inactive pixels have exactly zero first-layer gradient.
            let mut w1 = Array2::zeros(model.encoder.w1.dim());
            for (j, &c) in cols.iter().enumerate() {
                w1.column_mut(c).assign(&sum.w1.column(j));
            }
            EncoderParams { w1, ..sum }
        }
    };
    Ok(Gradients { encoder, gammas })
}

/// Everything needed to continue training bit-identically.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Model,
    pub gamma_init: Vec<f64>,
    pub encoder_moments: AdamMoments,
    pub gamma_moments: AdamMoments,
    /// Adam steps taken so far.
    pub step: u64,
    /// Epochs completed so far.
    pub epoch: usize,
}

impl TrainState {
    pub fn initial(dataset: &Dataset, config: &TrainConfig) -> Result<Self> {
        let d = config.system.latent_dim();
        let objects = dataset.objects();
        if !d.is_multiple_of(objects) {
            return Err(Error::InvalidArgument(format!(
                "latent dimension {d} does not split across {objects} objects"
            )));
        }
        let dims = EncoderDims {
            input: dataset.pixels(),
            hidden1: config.hidden.0,
            hidden2: config.hidden.1,
            output: d / objects,
        };
        let encoder = init_encoder(dims, config.seed)?;
        let mut system = config.system.clone();
        let gamma_init = config.gamma_init.resolve(system.learnable_names().len(), config.seed)?;
        system.set_gammas(&gamma_init)?;
        Ok(TrainState {
            encoder_moments: AdamMoments::zeros(encoder.num_params()),
            gamma_moments: AdamMoments::zeros(gamma_init.len()),
            model: Model { encoder, system },
            gamma_init,
            step: 0,
            epoch: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub l1: f64,
    pub l2: f64,
    pub total: f64,
    pub gammas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedValue {
    pub name: String,
    pub value: f64,
    pub unit: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub preset: String,
    pub seed: u64,
    pub gamma_names: Vec<String>,
    pub gamma_init: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    pub final_gammas: Vec<NamedValue>,
    /// Mean and population variance of the latent over every training frame.
    pub latent_mean: Vec<f64>,
    pub latent_var: Vec<f64>,
    pub wall_clock_s: f64,
    pub config: TrainConfig,
}

impl RunReport {
    pub fn final_gamma_values(&self) -> Vec<f64> {
        self.final_gammas.iter().map(|g| g.value).collect()
    }

    /// Per-epoch losses and parameters as CSV.
    pub fn write_epoch_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        let mut header = vec!["epoch".to_string(), "l1".into(), "l2".into(), "total".into()];
        header.extend(self.gamma_names.iter().cloned());
        out.write_record(&header)?;
        for e in &self.epochs {
            let mut rec = vec![e.epoch.to_string(), e.l1.to_string(), e.l2.to_string(), e.total.to_string()];
            rec.extend(e.gammas.iter().map(f64::to_string));
            out.write_record(&rec)?;
        }
        out.flush()?;
        Ok(())
    }
}

pub struct TrainOutcome {
    pub report: RunReport,
    pub state: TrainState,
}

pub struct Trainer<'a> {
    dataset: &'a Dataset,
    config: TrainConfig,
    spec: BatchSpec,
    state: TrainState,
    gamma_lr: Vec<f64>,
}

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a Dataset, config: TrainConfig) -> Result<Self> {
        let state = TrainState::initial(dataset, &config)?;
        Self::resume(dataset, config, state)
    }

    /// Continues from a saved state; the state must fit the dataset and config.
    pub fn resume(dataset: &'a Dataset, config: TrainConfig, state: TrainState) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("empty dataset".into()));
        }
        let spec = BatchSpec::new(dataset, &config)?;
        let dims = state.model.encoder.dims();
        if dims.input != dataset.pixels() {
            return Err(Error::DimensionMismatch {
                context: "encoder input vs frame size",
                expected: dataset.pixels(),
                actual: dims.input,
            });
        }
        if (dims.hidden1, dims.hidden2) != config.hidden {
            return Err(Error::DimensionMismatch {
                context: "encoder hidden width",
                expected: config.hidden.0,
                actual: dims.hidden1,
            });
        }
        if state.model.system.kind() != config.system.kind()
            || state.model.system.latent_dim() != config.system.latent_dim()
        {
            return Err(Error::InvalidArgument("state was trained for a different system".into()));
        }
        let p = state.model.system.learnable_names().len();
        if state.gamma_init.len() != p || state.gamma_moments.len() != p {
            return Err(Error::DimensionMismatch {
                context: "learnable parameters",
                expected: p,
                actual: state.gamma_init.len(),
            });
        }
        if state.encoder_moments.len() != state.model.encoder.num_params() {
            return Err(Error::DimensionMismatch {
                context: "encoder optimizer state",
                expected: state.model.encoder.num_params(),
                actual: state.encoder_moments.len(),
            });
        }
        let rows = dataset.len() * (spec.frames - config.system.order());
        if rows < 2 {
            return Err(Error::InvalidArgument("dataset yields fewer than two prediction pairs".into()));
        }
        let gamma_lr = state.gamma_init.iter().map(|&g| lr_for_gamma(g)).collect();
        Ok(Trainer {
            dataset,
            config,
            spec,
            state,
            gamma_lr,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn spec(&self) -> &BatchSpec {
        &self.spec
    }

    fn diverged(&self, term: &'static str) -> Error {
        Error::Diverged {
            epoch: self.state.epoch + 1,
            term,
            gammas: self.state.model.system.gammas(),
        }
    }

    /// One optimizer step on `samples`; returns the loss before the update.
    pub fn step(&mut self, samples: &[usize]) -> Result<LossTerms> {
        let model = &self.state.model;
        let fwd = forward_batch(model, self.dataset, samples, &self.spec)?;
        let terms = fwd.terms;
        for (name, v) in [("l1", terms.l1), ("l2", terms.l2), ("total", terms.total)] {
            if !v.is_finite() {
                return Err(self.diverged(name));
            }
        }
        let grads = backward_batch(model, &fwd, &self.spec)?;
        drop(fwd);
        if !grads.is_finite() {
            return Err(self.diverged("gradient"));
        }

        self.state.step += 1;
        let t = self.state.step;
        let lr = self.config.encoder_lr;
        let mut offset = 0;
        let moments = &mut self.state.encoder_moments;
        for (p, g) in self.state.model.encoder.tensors_mut().into_iter().zip(grads.encoder.tensors()) {
            moments.step(offset, p, g, t, |_| lr);
            offset += g.len();
        }
        let mut gammas = self.state.model.system.gammas();
        let gamma_lr = &self.gamma_lr;
        self.state.gamma_moments.step(0, &mut gammas, &grads.gammas, t, |i| gamma_lr[i]);
        if !gammas.iter().all(|g| g.is_finite()) {
            return Err(self.diverged("gamma"));
        }
        self.state.model.system.set_gammas(&gammas)?;
        if !self.state.model.encoder.is_finite() {
            return Err(self.diverged("encoder"));
        }
        Ok(terms)
    }

    /// Shuffles the samples with the run seed and steps through them once.
    pub fn run_epoch(&mut self) -> Result<EpochLog> {
        let mut order: Vec<usize> = (0..self.dataset.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(2 + self.state.epoch as u64);
        order.shuffle(&mut rng);
        let bs = self.config.batch_size.unwrap_or(order.len()).max(1);
        let per_sample = self.spec.frames - self.config.system.order();
        let (mut l1, mut l2, mut total, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(bs) {
            // A lone sample with a single prediction has no batch variance.
            if batch.len() * per_sample < 2 {
                continue;
            }
            let t = self.step(batch)?;
            l1 += t.l1;
            l2 += t.l2;
            total += t.total;
            batches += 1;
        }
        self.state.epoch += 1;
        let nb = batches.max(1) as f64;
        let log = EpochLog {
            epoch: self.state.epoch,
            l1: l1 / nb,
            l2: l2 / nb,
            total: total / nb,
            gammas: self.state.model.system.gammas(),
        };
        log::info!(
            "epoch {} l1={:.6} l2={:.6} total={:.6} gammas={:?}",
            log.epoch,
            log.l1,
            log.l2,
            log.total,
            log.gammas
        );
        Ok(log)
    }

    /// Runs epochs until `config.epochs` have been completed in total.
    pub fn run(mut self) -> Result<TrainOutcome> {
        let start = Instant::now();
        let mut logs = Vec::new();
        while self.state.epoch < self.config.epochs {
            logs.push(self.run_epoch()?);
        }
        let (latent_mean, latent_var) = latent_moments(&self.state.model, self.dataset, &self.spec)?;
        let system = &self.state.model.system;
        let final_gammas = system
            .params()
            .iter()
            .filter(|p| p.learnable)
            .map(|p| NamedValue {
                name: p.name.clone(),
                value: p.value,
                unit: p.unit.clone(),
            })
            .collect();
        let report = RunReport {
            preset: self.config.preset.clone(),
            seed: self.config.seed,
            gamma_names: system.learnable_names(),
            gamma_init: self.state.gamma_init.clone(),
            epochs: logs,
            final_gammas,
            latent_mean,
            latent_var,
            wall_clock_s: start.elapsed().as_secs_f64(),
            config: self.config,
        };
        Ok(TrainOutcome {
            report,
            state: self.state,
        })
    }
}

/// Trains from a fresh initialization.
pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    Trainer::new(dataset, config.clone())?.run()
}

/// Continues training from `state` until `config.epochs` epochs are done.
pub fn train_from(dataset: &Dataset, config: &TrainConfig, state: TrainState) -> Result<TrainOutcome> {
    Trainer::resume(dataset, config.clone(), state)?.run()
}

/// Mean and population variance of the latent over all window frames.
pub fn latent_moments(model: &Model, dataset: &Dataset, spec: &BatchSpec) -> Result<(Vec<f64>, Vec<f64>)> {
    let frames: Vec<usize> = (0..spec.frames).map(|t| spec.frame_index(t)).collect();
    let per_sample: Vec<Result<Vec<Vec<f64>>>> = spec
        .execution
        .map(&dataset.samples, |s| model.encode_frames(s, &frames));
    let d = model.system.latent_dim();
    let (mut sum, mut sq, mut count) = (vec![0.0; d], vec![0.0; d], 0.0);
    let all: Vec<Vec<Vec<f64>>> = per_sample.into_iter().collect::<Result<_>>()?;
    for z in all.iter().flatten() {
        for a in 0..d {
            sum[a] += z[a];
        }
        count += 1.0;
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    for z in all.iter().flatten() {
        for a in 0..d {
            sq[a] += (z[a] - mean[a]).powi(2);
        }
    }
    Ok((mean, sq.iter().map(|s| s / count).collect()))
}
